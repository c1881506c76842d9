"""Visual vocabularies and fixed-length image encodings.

A :class:`Codebook` is trained with Lloyd's k-means from k-means++ seeds.
Images are encoded either as a bag-of-words histogram of nearest-word
counts or as VLAD, the per-word sum of residuals ``x - c_i`` flattened
word-major and L2-normalised.

Both encoders are independent of descriptor order: residuals are summed
after sorting descriptors within each word.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imaging import PathLike

CODEBOOK_MAGIC = b"FRCB"
CODEBOOK_VERSION = 1

# relative gap below which a GEMM-based assignment is re-checked exactly
_TIE_RTOL = 1e-9
_CHUNK = 4096


class AggregateParamError(ValueError):
    pass


@dataclass
class Codebook:
    centroids: np.ndarray
    iterations: int = 0
    inertia: float = float("nan")
    inertia_history: list = field(default_factory=list)

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] < 1:
            raise AggregateParamError(f"centroids must be a non-empty 2-D array, got {c.shape}")
        self.centroids = c

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def _as_matrix(descriptors, dim=None) -> np.ndarray:
    x = np.asarray(descriptors, dtype=np.float64)
    if x.size == 0:
        return np.zeros((0, dim or 0))
    if x.ndim == 1:
        x = x[None, :]
    return x


def _sq_dists_exact(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - c[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def assign(centroids: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest centroid (lowest index on ties) and its squared distance."""
    n = x.shape[0]
    labels = np.empty(n, dtype=np.intp)
    best = np.empty(n)
    c_sq = np.einsum("kd,kd->k", centroids, centroids)
    for start in range(0, n, _CHUNK):
        xs = x[start : start + _CHUNK]
        x_sq = np.einsum("nd,nd->n", xs, xs)
        d = x_sq[:, None] - 2.0 * xs @ centroids.T + c_sq[None, :]
        lab = np.argmin(d, axis=1)
        if centroids.shape[0] > 1:
            part = np.partition(d, 1, axis=1)
            gap = part[:, 1] - part[:, 0]
            scale = np.maximum(1.0, x_sq + c_sq.max())
            unsure = np.flatnonzero(gap <= _TIE_RTOL * scale)
        else:
            unsure = np.arange(len(xs))
        exact_d = None
        if unsure.size:
            exact_d = _sq_dists_exact(xs[unsure], centroids)
            lab[unsure] = np.argmin(exact_d, axis=1)
        dist = np.maximum(d[np.arange(len(xs)), lab], 0.0)
        if exact_d is not None:
            dist[unsure] = exact_d[np.arange(len(unsure)), lab[unsure]]
        labels[start : start + _CHUNK] = lab
        best[start : start + _CHUNK] = dist
    return labels, best


def nearest_word(codebook: Codebook, descriptor) -> int:
    d = np.asarray(descriptor, dtype=np.float64)
    dist = _sq_dists_exact(d[None, :], codebook.centroids)[0]
    return int(np.argmin(dist))


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centres = np.empty((k, x.shape[1]))
    centres[0] = x[rng.integers(n)]
    closest = _sq_dists_exact(x, centres[:1])[:, 0] if n <= _CHUNK else assign(centres[:1], x)[1]
    for j in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        else:
            idx = int(rng.integers(n))
        centres[j] = x[idx]
        d = x - centres[j]
        closest = np.minimum(closest, np.einsum("nd,nd->n", d, d))
    return centres


def kmeans_train(descriptors, k: int, max_iters: int = 100, seed: int = 0) -> Codebook:
    """Lloyd's algorithm from k-means++ seeds.

    Stops after ``max_iters`` rounds or when no assignment changes. An
    empty cluster is re-seeded with the point farthest from its current
    centroid.
    """
    x = _as_matrix(descriptors)
    if k < 1:
        raise AggregateParamError(f"k must be >= 1, got {k}")
    if x.shape[0] < k:
        raise AggregateParamError(f"need at least k={k} descriptors, got {x.shape[0]}")
    rng = np.random.default_rng(seed)
    centres = _kmeanspp(x, k, rng)
    labels, dist = assign(centres, x)
    history = [float(dist.sum())]
    iters = 0
    for iters in range(1, max_iters + 1):
        centres = _update(x, labels, dist, centres)
        new_labels, dist = assign(centres, x)
        history.append(float(dist.sum()))
        changed = np.any(new_labels != labels)
        labels = new_labels
        if not changed:
            break
    return Codebook(centres, iterations=iters, inertia=history[-1], inertia_history=history)


def _update(x, labels, dist, centres) -> np.ndarray:
    k = centres.shape[0]
    out = np.zeros_like(centres)
    order = np.argsort(labels, kind="stable")
    lab = labels[order]
    words, starts, counts = np.unique(lab, return_index=True, return_counts=True)
    # shift by the old centre so clusters that are already exact stay exact
    resid = np.add.reduceat(x[order] - centres[lab], starts, axis=0)
    out[words] = centres[words] + resid / counts[:, None]
    empty = np.setdiff1d(np.arange(k), words)
    if empty.size:
        # farthest points become the new centres, one per empty cluster
        far = np.argsort(-dist, kind="stable")[: empty.size]
        out[empty] = x[far]
    return out


def _sorted_by_word(codebook: Codebook, x: np.ndarray):
    labels, _ = assign(codebook.centroids, x)
    # word first, then lexicographic on the descriptor values
    keys = tuple(x[:, d] for d in range(x.shape[1] - 1, -1, -1)) + (labels,)
    order = np.lexsort(keys)
    return labels[order], x[order]


def bow_counts(codebook: Codebook, descriptors) -> np.ndarray:
    x = _as_matrix(descriptors, codebook.dim)
    if x.shape[0] == 0:
        return np.zeros(codebook.k)
    labels, _ = assign(codebook.centroids, x)
    return np.bincount(labels, minlength=codebook.k).astype(np.float64)


def bow_encode(codebook: Codebook, descriptors) -> np.ndarray:
    """L2-normalised word histogram; all zeros for an empty descriptor set."""
    counts = bow_counts(codebook, descriptors)
    norm = np.linalg.norm(counts)
    return counts / norm if norm > 0 else counts


def vlad_residuals(codebook: Codebook, descriptors) -> np.ndarray:
    """Un-normalised VLAD, shape ``(k, dim)``."""
    x = _as_matrix(descriptors, codebook.dim)
    v = np.zeros((codebook.k, codebook.dim))
    if x.shape[0] == 0:
        return v
    labels, xs = _sorted_by_word(codebook, x)
    words, starts = np.unique(labels, return_index=True)
    v[words] = np.add.reduceat(xs - codebook.centroids[labels], starts, axis=0)
    return v


def vlad_encode(codebook: Codebook, descriptors) -> np.ndarray:
    """Word-major flattened VLAD divided by its L2 norm (zero stays zero)."""
    v = vlad_residuals(codebook, descriptors).ravel()
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v


def encode(aggregator: str, codebook: Codebook, descriptors) -> np.ndarray:
    if aggregator == "bow":
        return bow_encode(codebook, descriptors)
    if aggregator == "vlad":
        return vlad_encode(codebook, descriptors)
    raise AggregateParamError(f"unknown aggregator {aggregator!r}")


# ---------------------------------------------------------------------------
# codebook files: magic "FRCB", u32 version, u32 k, u32 dim, then k*dim
# little-endian float32 centroids in row-major order


def codebook_to_bytes(cb: Codebook) -> bytes:
    head = CODEBOOK_MAGIC + struct.pack("<III", CODEBOOK_VERSION, cb.k, cb.dim)
    return head + cb.centroids.astype("<f4").tobytes()


def codebook_from_bytes(buf: bytes) -> Codebook:
    if buf[:4] != CODEBOOK_MAGIC:
        raise AggregateParamError("not a codebook file (bad magic)")
    version, k, dim = struct.unpack_from("<III", buf, 4)
    if version != CODEBOOK_VERSION:
        raise AggregateParamError(f"unsupported codebook version {version}")
    payload = buf[16:]
    if len(payload) != k * dim * 4:
        raise AggregateParamError("codebook payload size does not match header")
    c = np.frombuffer(payload, dtype="<f4").reshape(k, dim).astype(np.float64)
    return Codebook(c)


def save_codebook(path: PathLike, cb: Codebook) -> None:
    Path(path).write_bytes(codebook_to_bytes(cb))


def load_codebook(path: PathLike) -> Codebook:
    return codebook_from_bytes(Path(path).read_bytes())
