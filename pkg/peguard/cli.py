"""
Command-Line Interface

WHAT: gen, ingest, extract, train, classify, eval, zeroday, bench
WHY: One entry point for the whole scan/attribute/evaluate pipeline
HOW: argparse subcommands; artifacts go to files, stdout carries terse
     result lines, stderr carries logs and the effective-config line

Exit codes: 0 success, 1 usage error, 2 data error.
Defaults chain through the work directory, so
`gen` -> `extract` -> `train` -> `eval` needs no paths.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from peguard.core.config import get_settings
from peguard.core.errors import InvalidPe, PeguardError
from peguard.ml import ClassifierConfig, load_model, predict, save_model, train
from peguard.ml.config import FAMILIES
from peguard.services.bench import bench
from peguard.services.corpus import (
    MANIFEST_NAME,
    LabelRule,
    gen_corpus,
    load_profiles,
    scaled_counts,
    scan_directory,
)
from peguard.services.evaluation import (
    run_trials,
    sweep_feature_sets,
    zero_day_eval,
    zero_day_table,
)
from peguard.services.features import (
    DLL_CALL_MODES,
    FeatureSetId,
    build_dataset,
    export_csv,
    extract_features,
    import_csv,
)
from peguard.services.manifest import CorpusManifest, content_hash
from peguard.services.pe_format import parse_pe, validate_pe

logger = logging.getLogger(__name__)

SET_CHOICES = [s.value for s in FeatureSetId]
EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Raises instead of exiting so main() owns the exit code."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# =========================
# DEFAULT PATHS
# =========================
def _workdir(args) -> Path:
    return Path(args.workdir)


def _manifest_path(args) -> Path:
    return Path(args.manifest) if args.manifest else _workdir(args) / MANIFEST_NAME


def _dataset_path(args) -> Path:
    return Path(args.data) if args.data else _workdir(args) / f"dataset_{args.set}.csv"


def _model_path(args, family: str) -> Path:
    return Path(args.model) if args.model else _workdir(args) / f"model_{family}.model"


def _load_dataset(args):
    path = _dataset_path(args)
    data = import_csv(path.read_text(encoding="utf-8"))
    logger.info(f"Loaded {len(data)} rows ({data.set_id.name}) from {path}")
    return data


def _config(args, family: str) -> ClassifierConfig:
    return ClassifierConfig.for_family(family, seed=args.seed, class_weights=args.class_weights)


# =========================
# COMMANDS
# =========================
def cmd_gen(args) -> int:
    profiles = load_profiles(Path(args.profiles))
    if args.distinct_only:
        profiles = profiles.distinct_only()
    counts = scaled_counts(profiles.default_counts, args.scale)
    out = Path(args.out) if args.out else _workdir(args)
    manifest = gen_corpus(profiles, counts, args.seed, out, args.jobs)
    print(f"manifest {out / MANIFEST_NAME} {len(manifest)}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    rules = [LabelRule.parse(r) for r in args.rule]
    report = scan_directory(Path(args.dir), rules)
    out = Path(args.out) if args.out else _workdir(args) / MANIFEST_NAME
    manifest = report.manifest
    if args.merge and out.exists():
        manifest = CorpusManifest.load(out).merge(manifest)
    manifest.save(out)
    for line in report.lines():
        print(line)
    return EXIT_OK


def cmd_extract(args) -> int:
    manifest = CorpusManifest.load(_manifest_path(args))
    dataset, skipped = build_dataset(manifest, args.set, args.jobs, args.dll_calls)
    out = Path(args.out) if args.out else _dataset_path(args)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(export_csv(dataset), encoding="utf-8")
    for s in skipped:
        logger.warning(f"Skipped {s.path}: {s.reason}")
    print(f"dataset {out} rows={len(dataset)} skipped={len(skipped)}")
    return EXIT_OK


def cmd_train(args) -> int:
    data = _load_dataset(args)
    model = train(_config(args, args.family), data, jobs=args.jobs)
    out = Path(args.out) if args.out else _model_path(args, args.family)
    save_model(model, out)
    print(f"model {out}")
    return EXIT_OK


def cmd_classify(args) -> int:
    model = load_model(Path(args.model))
    for name in args.files:
        data = Path(name).read_bytes()
        pe = parse_pe(data)
        violations = validate_pe(pe)
        if violations:
            raise InvalidPe(violations[0].field, violations[0].constraint)
        vector = extract_features(pe, model.set_id, dll_calls=args.dll_calls)
        prediction = predict(model, vector)
        print(f"{content_hash(data)} {prediction.class_name} {prediction.score:.6f}")
    return EXIT_OK


def _write_report(report, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "trials.csv").write_text(report.trials_csv(), encoding="utf-8")
    (out / "confusion.csv").write_text(report.mean_confusion.to_csv(), encoding="utf-8")
    logger.info(f"Wrote report to {out}")


def cmd_eval(args) -> int:
    data = _load_dataset(args)
    config = _config(args, args.family)
    if args.sweep:
        reports = sweep_feature_sets(data, config, args.trials, args.seed, jobs=args.jobs)
    else:
        reports = {data.set_id: run_trials(data, config, args.trials, args.seed, args.jobs)}

    base = Path(args.out) if args.out else _workdir(args)
    for set_id, report in reports.items():
        out = base / f"eval_{args.family}_{set_id.value}"
        _write_report(report, out)
        s = report.summary()
        print(
            f"{args.family} {set_id.value} trials={args.trials} "
            f"accuracy={s['accuracy_mean']:.4f} rdr={s['rdr_mean']:.4f} bdr={s['bdr_mean']:.4f} {out}"
        )
    return EXIT_OK


def cmd_zeroday(args) -> int:
    data = _load_dataset(args)
    config = _config(args, args.classifier)
    if args.family.lower() == "all":
        results = zero_day_table(data, config, args.trials, args.seed)
    else:
        results = [zero_day_eval(data, args.family, config, args.trials, args.seed)]

    rows = []
    for r in results:
        print(
            f"{r.held_out} {r.classifier} detection_rate={r.detection_rate:.4f} "
            f"benign_detection_rate={r.benign_detection_rate:.4f} held_out={r.n_held_out}"
        )
        rows.append({
            "held_out": r.held_out,
            "classifier": r.classifier,
            "detection_rate": r.detection_rate,
            "trial_rates": list(r.trial_rates),
            "benign_detection_rate": r.benign_detection_rate,
            "n_held_out": r.n_held_out,
        })
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_bench(args) -> int:
    model = load_model(_model_path(args, args.family))
    records = CorpusManifest.load(_manifest_path(args)).records[: args.samples]
    files = [Path(r.path).read_bytes() for r in records]
    report = bench(files, model, min_samples=args.samples)
    for line in report.lines():
        print(line)
    return EXIT_OK


# =========================
# PARSER
# =========================
def build_parser() -> argparse.ArgumentParser:
    settings = get_settings()

    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=settings.seed)
    common.add_argument("--jobs", type=int, default=settings.jobs)
    common.add_argument("--workdir", default=settings.workdir)
    common.add_argument("--log-level", default=settings.log_level)

    data_opts = _Parser(add_help=False)
    data_opts.add_argument("--set", choices=SET_CHOICES, default=FeatureSetId.FS15.value)
    data_opts.add_argument("--data", help="dataset CSV (default <workdir>/dataset_<set>.csv)")

    classifier_opts = _Parser(add_help=False)
    classifier_opts.add_argument("--class-weights", action="store_true")

    parser = _Parser(prog="peguard", description="Static PE ransomware detection and attribution")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--out")
    p.add_argument("--profiles", default=settings.profiles_path)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--distinct-only", action="store_true")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("ingest", parents=[common], help="hash, dedup and label a directory")
    p.add_argument("dir")
    p.add_argument("--rule", action="append", default=[], metavar="PATTERN=LABEL")
    p.add_argument("--out", help="manifest path (default <workdir>/manifest.tsv)")
    p.add_argument("--merge", action="store_true", help="keep records already in the manifest")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("extract", parents=[common, data_opts], help="build a feature dataset")
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--dll-calls", choices=DLL_CALL_MODES, default="symbols")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", parents=[common, data_opts, classifier_opts], help="train a classifier")
    p.add_argument("--family", choices=FAMILIES, default="rf")
    p.add_argument("--model")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("classify", parents=[common], help="attribute PE files")
    p.add_argument("--model", required=True)
    p.add_argument("--dll-calls", choices=DLL_CALL_MODES, default="symbols")
    p.add_argument("files", nargs="+")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("eval", parents=[common, data_opts, classifier_opts], help="randomized trials")
    p.add_argument("--family", choices=FAMILIES, default="rf")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--sweep", action="store_true", help="run every feature set up to --set")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("zeroday", parents=[common, data_opts, classifier_opts], help="leave-one-family-out")
    p.add_argument("--family", default="all", help="held-out family name, '<Name>-like', or 'all'")
    p.add_argument("--classifier", choices=FAMILIES, default="rf")
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_zeroday)

    p = sub.add_parser("bench", parents=[common], help="per-stage timings")
    p.add_argument("--family", choices=FAMILIES, default="rf")
    p.add_argument("--model")
    p.add_argument("--manifest")
    p.add_argument("--samples", type=int, default=100)
    p.set_defaults(func=cmd_bench)

    return parser


def _check_ranges(args) -> None:
    if args.seed < 0 or args.seed >= 2**64:
        raise UsageError("--seed must be in [0, 2^64)")
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    if getattr(args, "trials", 1) < 1:
        raise UsageError("--trials must be >= 1")
    if getattr(args, "scale", 1.0) <= 0:
        raise UsageError("--scale must be > 0")
    if getattr(args, "samples", 1) < 1:
        raise UsageError("--samples must be >= 1")


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _check_ranges(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        return int(e.code or 0)

    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        stream=sys.stderr,
    )
    effective = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    print(f"effective-config: {json.dumps(effective, sort_keys=True)}", file=sys.stderr)

    try:
        return args.func(args)
    except ValidationError as e:
        print(f"error: invalid configuration: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (PeguardError, OSError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_DATA
