"""Command-line entry point: ``adherence-forecast <command> [flags]``.

Commands: simulate, label, train-eval, ablate, search, predict.
Exit codes: 0 success, 1 runtime/data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .adherence import (
    PRESETS,
    AdherenceDefinition,
    filter_trivial,
    label_cohort,
    labels_to_csv,
    prevalence,
)
from .features import daily_features, features_to_csv
from .metrics import REPORT_DAYS, aggregate
from .model import HyperParams, checkpoint
from .model.kernels import BACKEND
from .sessions import (
    SessionDataError,
    build_cohort,
    generate_synthetic_cohort,
    parse_sessions,
    serialize_sessions,
)
from .trainer import (
    ALL_DAYS,
    SearchSpace,
    TrainConfig,
    cross_validate,
    derive_seed,
    predict_days,
    prepare,
    random_search,
    run_ablation,
)

log = logging.getLogger("adherence_forecast")


class DataError(RuntimeError):
    """Bad or missing input data (exit code 1)."""


# -- helpers ----------------------------------------------------------------

def _nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a count >= 0, got {text}")
    return value


def _pos_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return value


def _read_bytes(path: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror or exc}") from None


def _load_cohort(path: str, keep_single: bool = False):
    raw = _read_bytes(path)
    try:
        cohort = build_cohort(parse_sessions(raw.decode("utf-8")))
    except SessionDataError as exc:
        raise DataError(f"{path}: {exc}") from None
    if not keep_single:
        cohort = filter_trivial(cohort)
    return cohort, hashlib.sha256(raw).hexdigest()


def _read_ids(path: str) -> list[str]:
    text = _read_bytes(path).decode("utf-8")
    ids = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
    return [i for i in ids if i]


def _definition(args) -> AdherenceDefinition:
    base = PRESETS[args.definition]
    return AdherenceDefinition(
        args.span if args.span is not None else base.min_span_days,
        args.connections if args.connections is not None else base.min_connections,
        args.seconds if args.seconds is not None else base.min_session_seconds,
        inclusive_span=(args.span_convention == "inclusive"),
    )


def _hyperparams(args) -> HyperParams:
    return HyperParams(d_model=args.d_model, n_heads=args.heads, ffn_hidden=args.ffn_hidden,
                       dropout_rate=args.dropout, n_layers=args.layers)


def _train_config(args) -> TrainConfig:
    return TrainConfig(lr=args.lr, batch_size=args.batch_size, max_epochs=args.max_epochs,
                       class_weighting=not args.no_weighting, weight_decay=args.weight_decay,
                       seed=args.seed)


def _jobs(args) -> int:
    if args.jobs is not None:
        return args.jobs
    env = os.environ.get("ADHERENCE_JOBS")
    return max(1, int(env)) if env else 1


def _split(cohort, args):
    """(main, exploration) cohorts from ``--exploration-ids``, if given."""
    if not args.exploration_ids:
        return cohort, cohort.subset([])
    wanted = set(_read_ids(args.exploration_ids))
    explo = cohort.subset(wanted)
    main = cohort.subset(set(cohort.patient_ids) - wanted)
    log.info("exploration: %d patients, main: %d", len(explo), len(main))
    return main, explo


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _json(path: Path, obj) -> None:
    _write(path, json.dumps(obj, indent=2, sort_keys=False) + "\n")


class Manifest:
    """Run manifest; written before any results and finalized afterwards."""

    def __init__(self, path: Path, command: str, args, input_hash: str | None, seeds: dict):
        self.path = path
        self.doc = {
            "command": command,
            "argv": sys.argv[1:],
            "config": {k: v for k, v in vars(args).items() if k not in ("func",)},
            "seeds": seeds,
            "input_sha256": input_hash,
            "tool_version": __version__,
            "kernel_backend": BACKEND,
            "started_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "finished_at": None,
        }
        _json(path, self.doc)

    def finish(self, **extra) -> None:
        self.doc.update(extra)
        self.doc["finished_at"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
        _json(self.path, self.doc)


def _fmt_day(day):
    return "never" if day is None else f"day {day}"


# -- commands ---------------------------------------------------------------

def cmd_simulate(args) -> int:
    cohort = generate_synthetic_cohort(args.adherent, args.dropout, args.horizon, args.seed)
    text = serialize_sessions(cohort.events())
    if args.output == "-":
        sys.stdout.write(text)
    else:
        _write(Path(args.output), text)
        print(f"wrote {len(cohort)} patients to {args.output}")
    return 0


def cmd_label(args) -> int:
    cohort, _ = _load_cohort(args.input, args.keep_single_session)
    definition = _definition(args)
    labels = label_cohort(cohort, definition)
    if args.output:
        _write(Path(args.output), labels_to_csv(labels.values()))
    n_bad, n = prevalence(labels)
    pct = 100.0 * n_bad / n if n else 0.0
    print(f"{n_bad}/{n} non-adherent ({pct:.1f}%)")
    return 0


def _save_models(out: Path, folds) -> None:
    models = out / "models"
    models.mkdir(exist_ok=True)
    for f in folds:
        checkpoint.save(models / f"run{f.run:02d}_fold{f.fold:02d}.json", f.params, f.scaler,
                        {"run": f.run, "fold": f.fold, "best_epoch": f.best_epoch})


def _write_report(out: Path, report, prefix: str = "") -> None:
    _write(out / f"{prefix}day_series.csv", report.series.to_csv())
    for d in REPORT_DAYS:
        if d in report.confusion:
            _json(out / f"{prefix}confusion_day{d}.json", report.confusion[d])
            _json(out / f"{prefix}pr_day{d}.json", report.pr[d])
    _json(out / f"{prefix}thresholds.json", report.thresholds_json())


def cmd_train_eval(args) -> int:
    cohort, digest = _load_cohort(args.input, args.keep_single_session)
    main, explo = _split(cohort, args)
    definition = _definition(args)
    out = _out_dir(args)
    manifest = Manifest(out / "manifest.json", "train-eval", args, digest,
                        {"master": args.seed,
                         "fold_seeds": [derive_seed(args.seed, 0, r if args.reseed_folds else 0)
                                        for r in range(args.runs)]})
    main_p, explo_p = prepare(main, definition), prepare(explo, definition)
    if args.dump_features:
        rows = [(r.patient_id, daily_features(r)) for r in cohort]
        _write(Path(args.dump_features), features_to_csv(rows))
    folds = cross_validate(main_p, explo_p, _train_config(args), _hyperparams(args),
                           n_runs=args.runs, n_folds=args.folds, reseed_folds=args.reseed_folds,
                           jobs=_jobs(args), keep_models=args.save_models)
    if args.save_models:
        _save_models(out, folds)
    report = aggregate(folds, pool=args.pool_folds)
    _write_report(out, report)
    manifest.finish(n_main=len(main_p), n_exploration=len(explo_p),
                    non_adherent_main=int(sum(p.dropout for p in main_p)))
    for name, day in report.thresholds.items():
        print(f"{name}: {_fmt_day(day)}")
    return 0


def cmd_ablate(args) -> int:
    cohort, digest = _load_cohort(args.input, args.keep_single_session)
    main, explo = _split(cohort, args)
    out = _out_dir(args)
    manifest = Manifest(out / "manifest.json", f"ablate {args.kind}", args, digest,
                        {"master": args.seed})
    kind = args.kind.replace("-", "_")
    kw = {}
    if kind == "fixed_length":
        if args.length is None:
            raise DataError("fixed-length ablation needs --length")
        kw["length"] = args.length
        if args.fixed_config:
            cfg = json.loads(_read_bytes(args.fixed_config))
            kw["fixed_lr"] = cfg.pop("lr", None)
            kw["fixed_hp"] = HyperParams(**cfg) if cfg else None
    if kind == "adherence_def":
        kw["alt_definition"] = PRESETS[args.alt_definition]
    result = run_ablation(kind, main, explo, _train_config(args), _hyperparams(args),
                          definition=_definition(args), n_runs=args.runs, n_folds=args.folds,
                          reseed_folds=args.reseed_folds, pool=args.pool_folds,
                          jobs=_jobs(args), **kw)
    for arm, fold_results in result.folds.items():
        _write_report(out, aggregate(fold_results, pool=args.pool_folds), prefix=f"{arm}_")
    mwu = result.mann_whitney()
    _json(out / "mann_whitney.json", {"kind": kind, "rows": list(mwu.values()),
                                      "run_values": {a: m.tolist() for a, m in result.arms.items()}})
    manifest.finish()
    print("day,u,p_value")
    for row in mwu.values():
        print(f"{row['day']},{row['u']:.1f},{row['p_value']:.4f}")
    return 0


def cmd_search(args) -> int:
    cohort, digest = _load_cohort(args.input, args.keep_single_session)
    _, explo = _split(cohort, args)
    if not args.exploration_ids:
        explo = cohort
    out = _out_dir(args)
    manifest = Manifest(out / "manifest.json", "search", args, digest, {"master": args.seed})
    space = SearchSpace(n_candidates=args.candidates)
    result = random_search(prepare(explo, _definition(args)), space, seed=args.seed,
                           config=_train_config(args), n_folds=args.folds)
    _json(out / "leaderboard.json", result.leaderboard)
    _json(out / "best.json", {"lr": result.best_lr, **result.best_hp.to_dict()})
    manifest.finish(n_candidates=len(result.leaderboard))
    print(f"best lr={result.best_lr:.6g} {result.best_hp}")
    return 0


def cmd_predict(args) -> int:
    try:
        params, scaler, _ = checkpoint.load(args.model)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load model {args.model}: {exc}") from None
    if scaler is None:
        raise DataError("checkpoint has no scaler")
    cohort, _ = _load_cohort(args.input, keep_single=True)
    rec = next((r for r in cohort if r.patient_id == args.patient), None)
    if rec is None:
        raise DataError(f"patient {args.patient!r} not found in {args.input}")
    from .trainer import PatientData

    patient = PatientData(rec.patient_id, daily_features(rec).matrix(), False)
    prob = float(predict_days(params, scaler, [patient], [args.day])[0, 0])
    print(f"{prob:.6f}")
    return 0


# -- parser -----------------------------------------------------------------

def _add_definition(p) -> None:
    g = p.add_argument_group("adherence definition")
    g.add_argument("--definition", choices=sorted(PRESETS), default="original")
    g.add_argument("--span", type=_pos_int, help="override minimum span in days")
    g.add_argument("--connections", type=_pos_int, help="override minimum connections")
    g.add_argument("--seconds", type=_pos_int, help="override minimum session seconds")
    g.add_argument("--span-convention", choices=["inclusive", "elapsed"], default="inclusive")
    p.add_argument("--keep-single-session", action="store_true",
                   help="do not drop patients with a single session")


def _add_training(p, runs: int = 20, folds: int = 10) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--runs", type=_pos_int, default=runs)
    g.add_argument("--folds", type=_pos_int, default=folds)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--jobs", type=_pos_int, default=None,
                   help="parallel fold workers (default: $ADHERENCE_JOBS or 1)")
    g.add_argument("--lr", type=float, default=0.001306)
    g.add_argument("--batch-size", type=_pos_int, default=64)
    g.add_argument("--max-epochs", type=_pos_int, default=500)
    g.add_argument("--weight-decay", type=float, default=0.01)
    g.add_argument("--no-weighting", action="store_true", help="disable class weighting")
    g.add_argument("--reseed-folds", dest="reseed_folds", action="store_true", default=True)
    g.add_argument("--fixed-folds", dest="reseed_folds", action="store_false",
                   help="reuse one fold partition for every run")
    g.add_argument("--pool-folds", choices=["first", "after"], default="first")
    g.add_argument("--exploration-ids", help="file of exploration patient ids, one per line")
    m = p.add_argument_group("model")
    m.add_argument("--d-model", type=_pos_int, default=4)
    m.add_argument("--heads", type=_pos_int, default=4)
    m.add_argument("--ffn-hidden", type=_pos_int, default=32)
    m.add_argument("--dropout", type=float, default=0.1)
    m.add_argument("--layers", type=_pos_int, default=3)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adherence-forecast", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--config", help="JSON file supplying defaults for any flag")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a synthetic sessions CSV")
    p.add_argument("--adherent", type=_nonneg_int, required=True)
    p.add_argument("--dropout", type=_nonneg_int, required=True)
    p.add_argument("--horizon", type=int, default=70)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", default="-")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("label", help="compute adherence labels")
    p.add_argument("-i", "--input", required=True)
    p.add_argument("-o", "--output", help="labels CSV path")
    _add_definition(p)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("train-eval", help="repeated cross-validated training and evaluation")
    p.add_argument("-i", "--input", required=True)
    p.add_argument("--out-dir", default="results")
    p.add_argument("--save-models", action="store_true")
    p.add_argument("--dump-features", metavar="CSV")
    _add_definition(p)
    _add_training(p)
    p.set_defaults(func=cmd_train_eval)

    p = sub.add_parser("ablate", help="run an ablation study")
    p.add_argument("kind", choices=["weighting", "fixed-length", "adherence-def"])
    p.add_argument("-i", "--input", required=True)
    p.add_argument("--out-dir", default="ablation")
    p.add_argument("--length", type=int, help="sequence length for fixed-length")
    p.add_argument("--fixed-config", help="JSON with lr/hyperparams for the fixed-length arm")
    p.add_argument("--alt-definition", choices=["alt-a", "alt-b"], default="alt-a")
    _add_definition(p)
    _add_training(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("search", help="random hyperparameter search on the exploration cohort")
    p.add_argument("-i", "--input", required=True)
    p.add_argument("--out-dir", default="search")
    p.add_argument("--candidates", type=_pos_int, default=100)
    _add_definition(p)
    _add_training(p, runs=1, folds=5)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("predict", help="score one patient's prefix with a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--patient", required=True)
    p.add_argument("-i", "--input", required=True)
    p.add_argument("--day", type=int, required=True)
    p.set_defaults(func=cmd_predict)
    parser.commands = sub.choices
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    pre, _ = parser.parse_known_args(argv)
    if pre.config:
        try:
            cfg = json.loads(Path(pre.config).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            parser.error(f"cannot read config {pre.config}: {exc}")
        parser.commands[pre.command].set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    args = _apply_config(parser, argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "day", None) is not None and not ALL_DAYS[0] <= args.day <= ALL_DAYS[-1]:
        parser.error(f"--day must lie in [{ALL_DAYS[0]}, {ALL_DAYS[-1]}]")
    if getattr(args, "length", None) is not None and args.length not in ALL_DAYS:
        parser.error(f"--length must lie in [{ALL_DAYS[0]}, {ALL_DAYS[-1]}]")
    if getattr(args, "horizon", 56) < 56:
        parser.error("--horizon must be >= 56")
    try:
        return args.func(args)
    except (DataError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
