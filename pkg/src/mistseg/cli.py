"""Command-line entry point: ``mistseg <subcommand> ...``.

Exit codes: 0 success, 1 finished with per-patient failures, 2 fatal error,
64 usage error. Every run writes a JSON manifest to the results directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Optional, Sequence

from . import __version__
from .analyzer import PipelineConfig, analyze
from .dataset import convert_csv, convert_msd, discover_patients, load_description, make_folds
from .errors import MistError
from .evaluate import evaluate_run, write_results_csv
from .inference import BlendSpec, make_predictor, predict_preprocessed, run_inference
from .metrics import DEFAULT_METRICS, DEFAULT_SURFACE_TOLERANCE, METRICS, class_specs
from .parallel import default_workers
from .postprocess import load_strategies, run_postprocess
from .preprocess import preprocess_dataset

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_FATAL = 2
EXIT_USAGE = 64
RESULTS_ENV = "MIST_RESULTS_DIR"

log = logging.getLogger("mistseg.cli")


# logging


class _StageFilter(logging.Filter):
    """Fills in ``stage`` and ``patient`` so every line carries both fields."""

    def __init__(self):
        super().__init__()
        self.stage = "-"

    def filter(self, record):
        if not hasattr(record, "stage"):
            record.stage = self.stage
        if not hasattr(record, "patient"):
            record.patient = "-"
        return True


class _WarningCollector(logging.Handler):
    def __init__(self):
        super().__init__(level=logging.WARNING)
        self.messages: list[str] = []

    def emit(self, record):
        self.messages.append(record.getMessage())


_STAGE = _StageFilter()
_FORMAT = "level=%(levelname)s stage=%(stage)s patient=%(patient)s logger=%(name)s msg=%(message)s"


def _setup_logging(verbose: bool) -> tuple[_WarningCollector, Callable[[], None]]:
    """Install the stderr handler; returns the warning collector and a restore callback."""
    root = logging.getLogger("mistseg")
    saved = (list(root.handlers), root.level, root.propagate)
    for h in saved[0]:
        root.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(_FORMAT))
    handler.addFilter(_STAGE)
    collector = _WarningCollector()
    root.addHandler(handler)
    root.addHandler(collector)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.propagate = False

    def restore():
        for h in list(root.handlers):
            root.removeHandler(h)
        for h in saved[0]:
            root.addHandler(h)
        root.setLevel(saved[1])
        root.propagate = saved[2]

    return collector, restore


# manifest


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_input(path) -> Optional[str]:
    """sha256 of a file, or of the sorted (relative path, file hash) list of a directory."""
    path = Path(path)
    if path.is_file():
        return _sha256_file(path)
    if path.is_dir():
        h = hashlib.sha256()
        for f in sorted(p for p in path.rglob("*") if p.is_file()):
            h.update(f"{f.relative_to(path).as_posix()}\0{_sha256_file(f)}\n".encode())
        return h.hexdigest()
    return None


@dataclass
class RunManifest:
    tool_version: str
    subcommand: str
    options: dict
    input_hashes: dict
    started: str
    finished: str = ""
    exit_code: int = 0
    warnings: list = field(default_factory=list)

    def write(self, results_dir) -> Path:
        out = Path(results_dir)
        out.mkdir(parents=True, exist_ok=True)
        target = out / f"manifest-{self.subcommand}.json"
        fd, tmp = tempfile.mkstemp(dir=out, prefix=".manifest-", suffix=".tmp")
        with os.fdopen(fd, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, target)
        return target


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _jsonable(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        sys.stderr.write(f"\nerror: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _results_default() -> Optional[str]:
    return os.environ.get(RESULTS_ENV)


def _metrics_arg(text: str) -> list[str]:
    metrics = [m.strip() for m in text.split(",") if m.strip()]
    bad = [m for m in metrics if m not in METRICS]
    if bad or not metrics:
        raise argparse.ArgumentTypeError(f"metrics must be a subset of {','.join(METRICS)}")
    return metrics


def _json_arg(text: str):
    """Inline JSON or a path to a JSON file."""
    p = Path(text)
    if p.is_file():
        return json.loads(p.read_text())
    return json.loads(text)


def build_parser() -> argparse.ArgumentParser:
    def global_flags(p, suppress: bool):
        # subcommands accept the flags too, without overriding values given earlier
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        p.add_argument("--workers", type=int, default=d(None), help="worker processes (default: logical cores)")
        p.add_argument("--seed", type=int, default=d(42), help="seed for fold assignment")
        p.add_argument("-v", "--verbose", action="store_true", default=d(False))

    common = _Parser(add_help=False)
    global_flags(common, suppress=True)
    parser = _Parser(prog="mistseg", description="Segmentation dataset pipeline")
    global_flags(parser, suppress=False)
    parser.add_argument("--version", action="version", version=f"mistseg {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)
    sub.required = True

    def results_arg(p, required=True):
        default = _results_default()
        p.add_argument(
            "--results",
            default=default,
            required=required and default is None,
            help=f"results directory (default: ${RESULTS_ENV})",
        )

    p = sub.add_parser("analyze", parents=[common], help="derive config.json and folds.json")
    p.add_argument("--data", required=True, help="dataset description JSON")
    results_arg(p)
    p.add_argument("--max-patch-size", type=int, nargs=3, default=(256, 256, 256))
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--custom-folds", type=_json_arg, default=None, help="JSON (file or inline)")

    p = sub.add_parser("preprocess", parents=[common], help="write preprocessed tensors")
    p.add_argument("--data", required=True)
    results_arg(p)
    p.add_argument("--config", default=None, help="default: <results>/config.json")
    p.add_argument("--compute-dtms", action="store_true")
    p.add_argument("--normalize-dtms", action="store_true")
    p.add_argument("--skip", action="store_true", help="convert only, no cropping/resampling")
    p.add_argument("--bias-correction", action="store_true")

    p = sub.add_parser("evaluate", parents=[common], help="score predictions into results.csv")
    p.add_argument("--preds", required=True)
    p.add_argument("--truth", required=True, help="dataset JSON or directory of masks")
    p.add_argument("--classes", type=_json_arg, default=None, help='e.g. {"WT": [1,2,3]}')
    p.add_argument("--metrics", type=_metrics_arg, default=list(DEFAULT_METRICS))
    p.add_argument("--surf-dice-tol", type=float, default=DEFAULT_SURFACE_TOLERANCE)
    p.add_argument("--out", default=None, help="CSV path (default: <results or preds>/results.csv)")
    results_arg(p, required=False)

    p = sub.add_parser("postprocess", parents=[common], help="apply strategies and re-score")
    p.add_argument("--preds", required=True)
    p.add_argument("--strategy", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--baseline", required=True, help="baseline results.csv")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=_json_arg, default=None)
    p.add_argument("--metrics", type=_metrics_arg, default=None)
    p.add_argument("--surf-dice-tol", type=float, default=DEFAULT_SURFACE_TOLERANCE)
    results_arg(p, required=False)

    p = sub.add_parser("predict", parents=[common], help="sliding-window inference")
    p.add_argument("--paths", required=True, help="CSV or JSON listing of test images")
    p.add_argument("--config", required=True)
    p.add_argument("--predictor", default="oracle")
    p.add_argument("--models", nargs="+", default=None, help="several predictor specs to ensemble")
    p.add_argument("--out", required=True)
    p.add_argument("--no-tta", action="store_true")
    p.add_argument("--all-flips", action="store_true", help="TTA over all 8 flip combinations")
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--sigma", type=float, default=0.125)
    results_arg(p, required=False)

    p = sub.add_parser("convert", parents=[common], help="convert MSD or CSV datasets")
    p.add_argument("format", choices=("msd", "csv"))
    p.add_argument("--source", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--modality", default="mr")
    p.add_argument("--labels", type=int, nargs="+", default=None)
    p.add_argument("--final-classes", type=_json_arg, default=None)

    p = sub.add_parser("run-all", parents=[common], help="analyze, preprocess, predict, evaluate")
    p.add_argument("--data", required=True)
    results_arg(p)
    p.add_argument("--predictor", default="oracle")
    p.add_argument("--models", nargs="+", default=None)
    p.add_argument("--no-tta", action="store_true")
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--sigma", type=float, default=0.125)
    p.add_argument("--max-patch-size", type=int, nargs=3, default=(256, 256, 256))
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--custom-folds", type=_json_arg, default=None)
    p.add_argument("--compute-dtms", action="store_true")
    p.add_argument("--metrics", type=_metrics_arg, default=list(DEFAULT_METRICS))
    p.add_argument("--surf-dice-tol", type=float, default=DEFAULT_SURFACE_TOLERANCE)
    return parser


# subcommands; each returns (exit code, results dir for the manifest, input paths)


def _stage(name: str) -> None:
    _STAGE.stage = name


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _do_analyze(args) -> int:
    _stage("analyze")
    desc = load_description(args.data)
    config = analyze(desc, workers=args.workers, max_patch_size=tuple(args.max_patch_size))
    results = Path(args.results)
    config.save(results / "config.json")
    folds = make_folds(config.patient_ids, args.folds, args.seed, args.custom_folds)
    _write_json(results / "folds.json", folds.to_json())
    log.info("config written to %s", results / "config.json")
    return EXIT_PARTIAL if config.excluded_ids else EXIT_OK


def _do_preprocess(args) -> int:
    _stage("preprocess")
    desc = load_description(args.data)
    results = Path(args.results)
    config = PipelineConfig.load(args.config or results / "config.json")
    done, failed = preprocess_dataset(
        discover_patients(desc, "train"),
        config,
        results,
        workers=args.workers,
        compute_dtms=args.compute_dtms,
        normalize_dtms=args.normalize_dtms,
        skip=args.skip,
        bias_correction=args.bias_correction,
    )
    log.info("preprocessed %d patients", len(done))
    return EXIT_PARTIAL if failed else EXIT_OK


def _specs_from(args):
    return class_specs(args.classes) if args.classes is not None else None


def _do_evaluate(args) -> int:
    _stage("evaluate")
    table = evaluate_run(
        args.preds,
        args.truth,
        _specs_from(args),
        args.metrics,
        workers=args.workers,
        tolerance=args.surf_dice_tol,
    )
    out = Path(args.out) if args.out else Path(args.results or args.preds) / "results.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_results_csv(table, out)
    log.info("results written to %s", out)
    return EXIT_PARTIAL if table.flagged else EXIT_OK


def _do_postprocess(args) -> int:
    _stage("postprocess")
    strategies = load_strategies(args.strategy)
    metrics = args.metrics
    if metrics is None:
        with open(args.baseline, newline="") as fh:
            header = fh.readline().strip().split(",")[1:]
        metrics = list(dict.fromkeys(m for h in header for m in METRICS if h.endswith("_" + m)))
    out_dir, table, score = run_postprocess(
        args.preds,
        strategies,
        args.truth,
        args.baseline,
        args.out,
        _specs_from(args),
        metrics,
        workers=args.workers,
        tolerance=args.surf_dice_tol,
    )
    _write_json(Path(out_dir) / "improvement.json", {"improvement_score": round(score, 10)})
    log.info("improvement score %.6f", score)
    print(f"improvement_score={score:.6f}")
    return EXIT_PARTIAL if table.flagged else EXIT_OK


def _predictors(specs, config: PipelineConfig):
    return [make_predictor(s, len(config.channels), config.labels) for s in specs]


def _do_predict(args) -> int:
    _stage("predict")
    config = PipelineConfig.load(args.config)
    predictors = _predictors(args.models or [args.predictor], config)
    spec = BlendSpec(tuple(config.patch_size), args.overlap, args.sigma)
    done, failed = run_inference(
        args.paths,
        config,
        predictors,
        args.out,
        spec,
        tta=not args.no_tta,
        all_flips=args.all_flips,
        workers=args.workers,
    )
    log.info("wrote %d predictions to %s", len(done), args.out)
    return EXIT_PARTIAL if failed else EXIT_OK


def _do_convert(args) -> int:
    _stage("convert")
    if args.format == "msd":
        desc = convert_msd(args.source, args.out)
    else:
        desc = convert_csv(
            args.source, args.out, args.modality, args.labels, args.final_classes
        )
    log.info("converted dataset with %d channels into %s", len(desc.channels), args.out)
    return EXIT_OK


def _do_run_all(args) -> int:
    results = Path(args.results)
    code = _do_analyze(args)

    _stage("preprocess")
    desc = load_description(args.data)
    config = PipelineConfig.load(results / "config.json")
    done, failed = preprocess_dataset(
        discover_patients(desc, "train"),
        config,
        results,
        workers=args.workers,
        compute_dtms=args.compute_dtms,
    )
    partial = code != EXIT_OK or bool(failed)

    _stage("predict")
    predictors = _predictors(args.models or [args.predictor], config)
    spec = BlendSpec(tuple(config.patch_size), args.overlap, args.sigma)
    pred_dir = results / "predictions"
    predicted, failed = predict_preprocessed(
        results, done, config, predictors, pred_dir, spec, tta=not args.no_tta, workers=args.workers
    )
    partial = partial or bool(failed)

    _stage("evaluate")
    table = evaluate_run(
        pred_dir,
        args.data,
        class_specs(config.final_classes),
        args.metrics,
        workers=args.workers,
        tolerance=args.surf_dice_tol,
        ids=config.patient_ids,
    )
    write_results_csv(table, results / "results.csv")
    log.info("results written to %s", results / "results.csv")
    return EXIT_PARTIAL if partial or table.flagged else EXIT_OK


_COMMANDS = {
    "analyze": _do_analyze,
    "preprocess": _do_preprocess,
    "evaluate": _do_evaluate,
    "postprocess": _do_postprocess,
    "predict": _do_predict,
    "convert": _do_convert,
    "run-all": _do_run_all,
}

# options naming input files or directories, hashed into the manifest
_INPUT_OPTIONS = ("data", "config", "paths", "preds", "truth", "strategy", "baseline", "source")


def _manifest_dir(args) -> Optional[Path]:
    for name in ("results", "out"):
        value = getattr(args, name, None)
        if value:
            p = Path(value)
            return p.parent if p.suffix == ".csv" else p
    return Path(args.preds) if getattr(args, "preds", None) else None


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    if args.workers is None:
        args.workers = default_workers()
    if args.workers < 1:
        sys.stderr.write("error: --workers must be >= 1\n")
        return EXIT_USAGE

    collector, restore_logging = _setup_logging(args.verbose)
    options = {k: _jsonable(v) for k, v in sorted(vars(args).items())}
    hashes = {}
    for name in _INPUT_OPTIONS:
        value = getattr(args, name, None)
        if value:
            hashes[name] = hash_input(value)
    manifest = RunManifest(__version__, args.command, options, hashes, _now())

    try:
        code = _COMMANDS[args.command](args)
    except MistError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        code = EXIT_FATAL
    except Exception as exc:  # noqa: BLE001 - any other failure is fatal too
        log.error("%s: %s", type(exc).__name__, exc, exc_info=args.verbose)
        code = EXIT_FATAL
    finally:
        _stage("-")

    manifest.finished = _now()
    manifest.exit_code = code
    manifest.warnings = list(collector.messages)
    target = _manifest_dir(args)
    if target is not None:
        try:
            manifest.write(target)
        except OSError as exc:
            log.error("could not write manifest: %s", exc)
    restore_logging()
    return code


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
