"""Command-line interface.

Settings resolve as defaults < ``--config FILE`` < individual flags. Every
config key has a flag of the same name with dashes, e.g. ``bf_sigma_range``
is ``--bf-sigma-range``. Logs go to stderr; results go to stdout or files.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import typing
from pathlib import Path

import numpy as np

from . import __version__, aggregate, classify, detect, features, pipeline
from .imaging import ImageError, read_image, write_pgm

logger = logging.getLogger("facerec")

_HELP = {
    "cascade": "cascade XML (default: vendored frontal-face cascade)",
    "tilts": "comma-separated ASURF tilts; rotations step by 72/t degrees",
    "k": "vocabulary size (default 64 for vlad, 128 for bow)",
    "threads": "forest training workers",
    "jobs": "image extraction workers",
    "vocab_all_images": "train the vocabulary on all images, test split included",
    "no_split": "train and test on every image (debugging only)",
    "seed": "master seed; every random choice derives from it",
}


def _config_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("pipeline settings")
    g.add_argument("--config", type=Path, help="flat key = value settings file")
    hints = typing.get_type_hints(pipeline.PipelineConfig)
    for f in dataclasses.fields(pipeline.PipelineConfig):
        flag = "--" + f.name.replace("_", "-")
        default = f.default
        help_text = _HELP.get(f.name, "")
        help_text = (help_text + f" (default: {pipeline.format_value(default)})").strip()
        if hints[f.name] is bool:
            g.add_argument(flag, dest=f"cfg_{f.name}", action=argparse.BooleanOptionalAction,
                           default=argparse.SUPPRESS, help=help_text)
        else:
            g.add_argument(flag, dest=f"cfg_{f.name}", default=argparse.SUPPRESS,
                           metavar="VALUE", help=help_text)
    g.add_argument("-v", "--verbose", action="count", default=0, help="more logging")
    return p


def config_from_args(args) -> pipeline.PipelineConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_")}
    return pipeline.load_config(getattr(args, "config", None), **overrides)


def _dataset_args(p):
    p.add_argument("root", type=Path, help="dataset root directory")
    p.add_argument("--layout", choices=pipeline.LAYOUTS, default="generic-dirs")


def build_parser() -> argparse.ArgumentParser:
    parent = _config_parent()
    ap = argparse.ArgumentParser(prog="facerec", description="Face recognition with ASURF features.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("detect", parents=[parent], help="find faces in an image")
    p.add_argument("image", type=Path)
    p.add_argument("--crop-out", type=Path, help="write the largest face crop as PGM")

    p = sub.add_parser("filter", parents=[parent], help="bilateral-filter a face crop")
    p.add_argument("image", type=Path)
    p.add_argument("--out", type=Path, required=True, help="filtered crop (PGM)")
    p.add_argument("--before", type=Path, help="also write the unfiltered crop (PGM)")
    p.add_argument("--full-frame", action="store_true", help="skip detection and cropping")

    p = sub.add_parser("features", parents=[parent], help="ASURF keypoints of one image")
    p.add_argument("image", type=Path)
    p.add_argument("--out", type=Path, help="descriptor dump (u32 count, u32 dim, f32 LE)")
    p.add_argument("--surf", action="store_true", help="plain SURF, no affine views")
    p.add_argument("--raw", action="store_true", help="skip detection, cropping and filtering")

    p = sub.add_parser("vocab", parents=[parent], help="train a visual vocabulary")
    _dataset_args(p)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("encode", parents=[parent], help="encode every image of a dataset")
    _dataset_args(p)
    p.add_argument("--codebook", type=Path, help="existing codebook (default: train one)")
    p.add_argument("--out", type=Path, required=True, help="output .npz")

    p = sub.add_parser("train", parents=[parent], help="train a classifier on encoded data")
    p.add_argument("encoded", type=Path)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("predict", parents=[parent], help="classify encoded images")
    p.add_argument("model", type=Path)
    p.add_argument("encoded", type=Path)
    p.add_argument("--all", action="store_true", help="predict every image, not just the test split")

    p = sub.add_parser("evaluate", parents=[parent], help="full run on one dataset")
    _dataset_args(p)
    p.add_argument("--name", help="dataset name in the report (default: directory name)")
    p.add_argument("--report-out", type=Path, help="append the CSV row to this file")
    p.add_argument("--format", choices=("csv", "pretty"), default="csv")

    p = sub.add_parser("report", parents=[parent], help="merge and render report CSVs")
    p.add_argument("csv", type=Path, nargs="+")
    p.add_argument("--format", choices=("csv", "pretty"), default="pretty")

    p = sub.add_parser("reproduce-tables", parents=[parent],
                       help="accuracy and timing matrix for the supplied datasets")
    p.add_argument("--orl", type=Path)
    p.add_argument("--faces95", type=Path)
    p.add_argument("--faces96", type=Path)
    p.add_argument("--generic", type=Path, action="append", default=[],
                   help="generic-dirs dataset (repeatable)")
    p.add_argument("--all-threads", type=int, default=classify.default_threads(),
                   help="workers for the multi-threaded forest rows")
    p.add_argument("--out", type=Path, help="CSV output (pretty table still goes to stdout)")
    return ap


# ---------------------------------------------------------------------------
# commands


def _cmd_detect(args, cfg):
    img = read_image(args.image)
    model = pipeline.cascade_for(cfg)
    faces = detect.detect_faces(img, model, cfg.detect_params())
    for r in faces:
        print(f"{r.x} {r.y} {r.w} {r.h}")
    if args.crop_out is not None and faces:
        write_pgm(args.crop_out, img.crop(faces[0]))
    logger.info("%d face(s) in %s", len(faces), args.image)
    return 0


def _cmd_filter(args, cfg):
    from .filter import bilateral_filter

    img = read_image(args.image)
    if args.full_frame:
        crop = img
    else:
        crop, _ = pipeline.face_crop(img, cfg)
    if args.before is not None:
        write_pgm(args.before, crop)
    out = bilateral_filter(crop, cfg.bilateral_params())
    write_pgm(args.out, out)
    return 0


def _cmd_features(args, cfg):
    img = read_image(args.image)
    if not args.raw:
        img, _ = pipeline.preprocess(img, cfg)
    grid = [(1.0, 0.0)] if args.surf else cfg.view_grid()
    kps, desc = features.asurf_extract(img, grid, cfg.surf_params())
    print(len(kps))
    for k in kps:
        logger.debug("%.2f %.2f s=%.2f o=%.3f r=%.3g view=%s", k.x, k.y, k.scale,
                     k.orientation, k.response, k.view)
    if args.out is not None:
        features.write_descriptors(args.out, desc)
    return 0


def _extract(args, cfg):
    ds = pipeline.load_dataset(args.root, args.layout)
    return ds, pipeline.extract_all(ds, cfg)


def _cmd_vocab(args, cfg):
    ds, ex = _extract(args, cfg)
    keep = pipeline._usable(ds, ex)
    train_idx, _ = pipeline.resolve_split(ds, cfg, keep)
    cb = pipeline.build_vocabulary(ex, keep if cfg.vocab_all_images else train_idx, cfg)
    aggregate.save_codebook(args.out, cb)
    return 0


def _cmd_encode(args, cfg):
    ds, ex = _extract(args, cfg)
    cb = aggregate.load_codebook(args.codebook) if args.codebook else None
    enc = pipeline.encode_dataset(ds, ex, cfg, codebook=cb)
    np.savez(
        args.out,
        X=enc.X,
        y=enc.y,
        train_idx=enc.train_idx,
        test_idx=enc.test_idx,
        n_classes=ds.n_classes,
        paths=np.array([str(p) for p in ds.paths]),
        class_names=np.array(ds.class_names),
        aggregator=cfg.aggregator,
    )
    return 0


def _load_encoded(path):
    with np.load(path, allow_pickle=False) as z:
        return {k: z[k] for k in z.files}


def _cmd_train(args, cfg):
    enc = _load_encoded(args.encoded)
    tr = enc["train_idx"]
    model = pipeline.fit(enc["X"][tr], enc["y"][tr], cfg, int(enc["n_classes"]))
    if isinstance(model, classify.Forest):
        classify.save_forest(args.out, model)
    else:
        with open(args.out, "wb") as fh:
            np.savez(fh, X=model.X, y=model.y, k=model.k)
    return 0


def _load_model(path):
    head = Path(path).read_bytes()[:4]
    if head == classify.FOREST_MAGIC:
        return classify.load_forest(path)
    with np.load(path, allow_pickle=False) as z:
        return pipeline.KnnModel(z["X"], z["y"], int(z["k"]))


def _cmd_predict(args, cfg):
    enc = _load_encoded(args.encoded)
    model = _load_model(args.model)
    idx = np.arange(len(enc["y"])) if args.all else enc["test_idx"]
    pred = pipeline.predict_with(model, enc["X"][idx])
    names = enc["class_names"]
    print("path,true,predicted")
    for i, p in zip(idx, pred):
        print(f"{enc['paths'][i]},{names[enc['y'][i]]},{names[p]}")
    if len(idx):
        logger.info("accuracy %.4f on %d images",
                    pipeline.get_accuracy(enc["y"][idx].tolist(), pred.tolist()), len(idx))
    return 0


def _cmd_evaluate(args, cfg):
    ds = pipeline.load_dataset(args.root, args.layout)
    res = pipeline.run_face_recognition(ds, cfg, dataset_name=args.name or ds.name)
    sys.stdout.write(pipeline.emit_report([res.row], args.format).decode())
    if args.report_out is not None:
        rows = []
        if args.report_out.exists():
            rows = pipeline.parse_report(args.report_out.read_bytes())
        args.report_out.write_bytes(pipeline.emit_report(rows + [res.row]))
    return 0


def _cmd_report(args, cfg):
    rows = []
    for p in args.csv:
        rows.extend(pipeline.parse_report(p.read_bytes()))
    sys.stdout.write(pipeline.emit_report(rows, args.format).decode())
    return 0


def _cmd_reproduce(args, cfg):
    datasets = {}
    for name, layout in (("orl", "orl"), ("faces95", "faces95"), ("faces96", "faces96")):
        root = getattr(args, name)
        if root is not None:
            datasets[name.upper()] = (root, layout)
    for root in args.generic:
        datasets[root.name] = (root, "generic-dirs")
    if not datasets:
        logger.error("no datasets given; pass --orl, --faces95, --faces96 or --generic")
        return 2
    rows = pipeline.reproduce_tables(datasets, cfg, args.all_threads)
    if args.out is not None:
        args.out.write_bytes(pipeline.emit_report(rows, "csv"))
    sys.stdout.write(pipeline.emit_report(rows, "pretty").decode())
    return 0


_COMMANDS = {
    "detect": _cmd_detect,
    "filter": _cmd_filter,
    "features": _cmd_features,
    "vocab": _cmd_vocab,
    "encode": _cmd_encode,
    "train": _cmd_train,
    "predict": _cmd_predict,
    "evaluate": _cmd_evaluate,
    "report": _cmd_report,
    "reproduce-tables": _cmd_reproduce,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        return _COMMANDS[args.command](args, cfg)
    except (pipeline.ConfigError, pipeline.PipelineError, ImageError,
            detect.CascadeParseError, aggregate.AggregateParamError,
            classify.ClassifierParamError, ValueError) as exc:
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
