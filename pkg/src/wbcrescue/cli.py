"""One binary, many subcommands: rescue, ensemble, fit-pc-model,
calibrate-spikiness, features, noise-score, inject-noise, evaluate.

Exit codes: 0 success, 1 validation or configuration error, 2 I/O error.
Output files are written to a temporary sibling path and renamed into
place, so failures never leave partial outputs behind.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import zlib
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path

from .core import (
    RescueConfig,
    ValidationError,
    default_label_set,
    load_label_file,
    parse_config_file,
)
from .ingest import (
    DirectorySampleSource,
    SampleNotFoundError,
    average_prob_tables,
    list_image_ids,
    parse_class_counts,
    parse_prob_table,
    read_image_rgb,
    write_prob_table,
)
from .metrics import evaluate, format_report, write_confusion_csv
from .netpbm import write_pnm
from .morphology import (
    calibrate_spikiness_threshold,
    fit_gaussian_gate,
    load_gate,
    morph_vector,
    read_features_csv,
    save_gate,
    spikiness,
    trace_contour,
    write_features_csv,
)
from .noise import inject_salt_pepper, noise_score
from .rescue import (
    FILTERED_CLASSES,
    rescue_batch,
    resolve_threads,
    write_predictions_csv,
    write_trace_csv,
)

log = logging.getLogger("wbcrescue")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


@contextmanager
def _atomic(path):
    """Yield a temporary path that replaces `path` only on success."""
    target = Path(path)
    tmp = target.with_name(target.name + f".tmp{os.getpid()}")
    try:
        yield tmp
        os.replace(tmp, target)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def _parallel_map(fn, items, threads: int) -> list:
    workers = resolve_threads(threads)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _load_labels(args):
    if args.labels:
        return load_label_file(args.labels)
    return default_label_set()


def _find_image(images_dir: Path, image_id: str) -> Path:
    for suffix in (".ppm", ".pgm"):
        candidate = images_dir / (image_id + suffix)
        if candidate.is_file():
            return candidate
    raise SampleNotFoundError(f"no image for {image_id!r} under {images_dir}")


def _derive_seed(base_seed: int, image_id: str) -> int:
    # Stable per-image stream regardless of processing order.
    return (base_seed * 1_000_003 + zlib.crc32(image_id.encode("utf-8"))) % 2**63


class _MissingDirsSource:
    def __call__(self, image_id: str):
        raise SampleNotFoundError(
            f"sample {image_id!r} needed for morphological filtering, "
            "but --images/--masks were not given"
        )


def _cmd_rescue(args) -> int:
    label_set = _load_labels(args)
    if args.config:
        config = parse_config_file(args.config, label_set)
    else:
        config = RescueConfig()
        config.validate_against(label_set)
    unfiltered = sorted(config.rare_classes - FILTERED_CLASSES)
    if unfiltered:
        raise ValidationError(
            f"rare classes without a shape filter: {unfiltered} "
            f"(supported: {sorted(FILTERED_CLASSES)})"
        )
    counts = parse_class_counts(args.counts, label_set)
    swin = parse_prob_table(args.swin, label_set)
    med = parse_prob_table(args.med, label_set)
    gate = load_gate(args.gate) if args.gate else None
    if args.images and args.masks:
        source = DirectorySampleSource(args.images, args.masks)
    else:
        source = _MissingDirsSource()
    traces = rescue_batch(
        swin,
        med,
        source,
        counts,
        gate,
        config,
        skip_missing=args.skip_missing,
        threads=args.threads,
    )
    rescued = sum(1 for t in traces if t.phase_reached.value == "Rescued")
    log.info("decided %d images, rescued %d", len(traces), rescued)
    with _atomic(args.out) as tmp:
        write_predictions_csv(tmp, traces, label_set)
    if args.trace:
        with _atomic(args.trace) as tmp:
            write_trace_csv(tmp, traces, label_set)
    return 0


def _cmd_ensemble(args) -> int:
    label_set = _load_labels(args)
    tables = [parse_prob_table(path, label_set) for path in args.inputs]
    merged = average_prob_tables(tables)
    with _atomic(args.out) as tmp:
        write_prob_table(tmp, merged)
    return 0


def _cmd_fit_pc_model(args) -> int:
    rows = read_features_csv(args.features)
    gate = fit_gaussian_gate([vector for _, vector, _ in rows], args.ridge_scale)
    with _atomic(args.out) as tmp:
        save_gate(tmp, gate)
    log.info("fitted gate from %d samples (ridge %g)", gate.sample_count, gate.ridge)
    return 0


def _cmd_calibrate_spikiness(args) -> int:
    rows = read_features_csv(args.features)
    threshold = calibrate_spikiness_threshold([spike for _, _, spike in rows], args.k)
    line = f"tau_s = {threshold:.9g}"
    print(line)
    if args.out:
        with _atomic(args.out) as tmp:
            Path(tmp).write_text(line + "\n", encoding="utf-8")
    return 0


def _cmd_features(args) -> int:
    source = DirectorySampleSource(args.images, args.masks)
    ids = list_image_ids(args.images)

    def extract(image_id: str):
        sample = source(image_id)
        return image_id, morph_vector(sample), spikiness(trace_contour(sample.mask))

    rows = _parallel_map(extract, ids, args.threads)
    with _atomic(args.out) as tmp:
        write_features_csv(tmp, rows)
    return 0


def _cmd_noise_score(args) -> int:
    images_dir = Path(args.images)
    ids = list_image_ids(images_dir)

    def score(image_id: str):
        return image_id, noise_score(read_image_rgb(_find_image(images_dir, image_id)))

    rows = _parallel_map(score, ids, args.threads)
    with _atomic(args.out) as tmp:
        with open(tmp, "w", newline="", encoding="utf-8") as handle:
            handle.write("image_id,residual\n")
            for image_id, residual in rows:
                handle.write(f"{image_id},{residual:.6f}\n")
    return 0


def _cmd_inject_noise(args) -> int:
    images_dir = Path(args.images)
    out_dir = Path(args.out)
    ids = list_image_ids(images_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def corrupt(image_id: str):
        pixels = read_image_rgb(_find_image(images_dir, image_id))
        noisy = inject_salt_pepper(
            pixels, args.density, args.salt_ratio, _derive_seed(args.seed, image_id)
        )
        with _atomic(out_dir / (image_id + ".ppm")) as tmp:
            write_pnm(tmp, noisy)

    _parallel_map(corrupt, ids, args.threads)
    return 0


def _cmd_evaluate(args) -> int:
    label_set = _load_labels(args)
    report, confusion = evaluate(args.pred, args.truth, label_set)
    text = format_report(report, label_set)
    with _atomic(args.out) as tmp:
        Path(tmp).write_text(text, encoding="utf-8")
    if args.confusion:
        with _atomic(args.confusion) as tmp:
            write_confusion_csv(tmp, confusion, label_set)
    log.info("macro_f1 %.6f over %d samples", report.macro_f1, report.total)
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="wbcrescue", description=__doc__)
    parser.add_argument("--verbose", action="store_true", help="log progress to stderr")
    parser.add_argument(
        "--threads",
        type=int,
        default=1,
        help="worker threads for per-image stages (0 = all cores)",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_text):
        cmd = sub.add_parser(name, help=help_text)
        cmd.set_defaults(func=func)
        return cmd

    cmd = add("rescue", _cmd_rescue, "refine predictions with the full pipeline")
    cmd.add_argument("--swin", required=True, help="primary-branch probability CSV")
    cmd.add_argument("--med", required=True, help="verifier-branch probability CSV")
    cmd.add_argument("--counts", required=True, help="class,count training census CSV")
    cmd.add_argument("--images", help="directory of cell images (.ppm/.pgm)")
    cmd.add_argument("--masks", help="directory of cell masks (.pgm)")
    cmd.add_argument("--gate", help="fitted gate model file")
    cmd.add_argument("--config", help="key=value config file")
    cmd.add_argument("--labels", help="catalog file, one class name per line")
    cmd.add_argument("--out", required=True, help="output predictions CSV")
    cmd.add_argument("--trace", help="output decision-trace CSV")
    cmd.add_argument(
        "--skip-missing",
        action="store_true",
        help="deny rescue instead of aborting when a sample file is missing",
    )

    cmd = add("ensemble", _cmd_ensemble, "average probability CSVs element-wise")
    cmd.add_argument("inputs", nargs="+", help="probability CSVs to fuse")
    cmd.add_argument("--labels", help="catalog file")
    cmd.add_argument("--out", required=True, help="output probability CSV")

    cmd = add("fit-pc-model", _cmd_fit_pc_model, "fit the gate from a features CSV")
    cmd.add_argument("--features", required=True, help="features CSV of calibration cells")
    cmd.add_argument("--ridge-scale", type=float, default=1e-6)
    cmd.add_argument("--out", required=True, help="output gate model file")

    cmd = add(
        "calibrate-spikiness",
        _cmd_calibrate_spikiness,
        "derive the spikiness threshold from reference scores",
    )
    cmd.add_argument("--features", required=True, help="features CSV of reference cells")
    cmd.add_argument("--k", type=float, default=2.0, help="standard deviations above the mean")
    cmd.add_argument("--out", help="also write the threshold to this file")

    cmd = add("features", _cmd_features, "dump shape features per image")
    cmd.add_argument("--images", required=True)
    cmd.add_argument("--masks", required=True)
    cmd.add_argument("--out", required=True, help="output features CSV")

    cmd = add("noise-score", _cmd_noise_score, "median-residual score per image")
    cmd.add_argument("--images", required=True)
    cmd.add_argument("--out", required=True, help="output image_id,residual CSV")

    cmd = add("inject-noise", _cmd_inject_noise, "write salt-and-pepper corrupted copies")
    cmd.add_argument("--images", required=True)
    cmd.add_argument("--out", required=True, help="output directory")
    cmd.add_argument("--density", type=float, required=True, help="corruption probability")
    cmd.add_argument("--salt-ratio", type=float, default=0.5)
    cmd.add_argument("--seed", type=int, default=0)

    cmd = add("evaluate", _cmd_evaluate, "score predictions against ground truth")
    cmd.add_argument("--pred", required=True, help="image_id,label predictions CSV")
    cmd.add_argument("--truth", required=True, help="image_id,label ground-truth CSV")
    cmd.add_argument("--labels", help="catalog file")
    cmd.add_argument("--out", required=True, help="output report text file")
    cmd.add_argument("--confusion", help="also write the confusion matrix CSV")

    return parser


def run(argv) -> int:
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
