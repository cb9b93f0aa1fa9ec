"""Command line: synth, train-generic, run-online, adapt-threshold, evaluate, cross-validate, chance, report."""
import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from .archive import load_model, read_session, read_training_record, save_model, write_session
from .chance import build_chance_bank, permutation_chance
from .classifier_core import activation_pattern, train_generic
from .config import load_settings
from .crossval import cross_validate, cross_validation_chance
from .detector import replay_probabilities
from .errors import ArchiveFormatError, ConfigError, ErrpError, ModelFormatError, UndefinedThresholdError
from .evaluation import MetricsReport, adapt_threshold, evaluate_session, group_erp, onset_map, session_erp
from .features import project_pca, session_epochs, stack_epochs
from .montage import CHANNEL_NAMES
from .report import curves_table, cv_curves_table, outcomes_table, write_report
from .simulator import (make_cohort, make_training_profiles, run_closed_loop_session,
                        simulate_calibration_session, training_corpus)

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_FORMAT = 0, 1, 2, 3


def parse_blocks(text: str) -> list[int]:
    """'4-8' -> [4, 5, 6, 7, 8]; '1,3' -> [1, 3]."""
    blocks = []
    try:
        for part in text.split(","):
            part = part.strip()
            if "-" in part:
                lo, hi = (int(v) for v in part.split("-", 1))
                blocks.extend(range(lo, hi + 1))
            elif part:
                blocks.append(int(part))
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"bad block list {text!r}") from e
    if not blocks:
        raise argparse.ArgumentTypeError("empty block list")
    return blocks


def positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from e
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {value}")
    return value


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2)


def _select(profiles, wanted):
    if not wanted:
        return profiles
    chosen = [p for p in profiles if p.participant_id in set(wanted)]
    if len(chosen) != len(set(wanted)):
        raise ConfigError(f"unknown participant id in {wanted}")
    return chosen


def _sessions(paths) -> list:
    if not paths:
        raise ConfigError("--session is required")
    for p in paths:
        if not Path(p).is_dir():
            raise ConfigError(f"session directory not found: {p}")
    return [read_session(p) for p in paths]


def _load_model(path):
    if path is None:
        return None
    if not Path(path).is_file():
        raise ConfigError(f"model file not found: {path}")
    return load_model(path)


# ---------------- Subcommands ----------------
def cmd_synth(args, settings):
    """Open-loop calibration recordings of the donor or evaluation cohort."""
    if args.cohort == "training":
        profiles = make_training_profiles(settings, args.seed)
    else:
        profiles = make_cohort(settings, args.seed)
    for profile in _select(profiles, args.participants):
        write_session(simulate_calibration_session(profile, settings), Path(args.out) / profile.participant_id)


def cmd_train_generic(args, settings):
    if args.session:
        sessions = _sessions(args.session)
        channel_names = sessions[0].channel_names
        epochs = []
        for session in sessions:
            epochs.extend(session_epochs(session, onset_map(session), settings))
    else:
        channel_names = list(CHANNEL_NAMES)
        epochs = training_corpus(settings, args.seed)
    model, summary = train_generic(epochs, settings)
    if args.session:
        summary = summary.model_copy(update={"source": "sessions",
                                             "sessions": sorted(s.participant_id for s in sessions)})
    else:
        summary = summary.model_copy(update={"source": "synthetic", "seed": args.seed})
    out = Path(args.out)
    save_model(model, out, training=summary.model_dump())
    _write_json(out.with_suffix(".summary.json"), summary.model_dump())
    logger.info(f"[CLI] Generic model: {summary.n_epochs} epochs, k={summary.n_components}")

    if args.pattern:
        X, _ = stack_epochs(epochs)
        pattern = activation_pattern(model.lda, project_pca(model.pca, X), model.pca, model.n_channels)
        df = pd.DataFrame(pattern.channel_map.T, columns=channel_names)
        df.insert(0, "time_s", settings.epoch_offset_s + np.arange(len(df)) / settings.sample_rate)
        df.to_csv(out.with_suffix(".pattern.csv"), index=False)


def cmd_run_online(args, settings):
    model = _load_model(args.model)
    if model is None:
        raise ConfigError("run-online needs --model")
    for profile in _select(make_cohort(settings, args.seed), args.participants):
        session = run_closed_loop_session(profile, model, settings)
        write_session(session, Path(args.out) / profile.participant_id)


def cmd_adapt_threshold(args, settings):
    model = _load_model(args.model)
    blocks = args.blocks or list(range(1, settings.adapt_blocks + 1))
    for session in _sessions(args.session):
        streams = replay_probabilities(session, model, blocks) if model is not None else None
        selection = adapt_threshold(session, settings, blocks, streams)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        curves_table(selection.curves()).to_csv(out / f"{session.participant_id}_adaptation_curves.csv",
                                                index=False)
        print(f"{session.participant_id}\t{selection.tau:.3f}")


def _evaluate(session, settings, model, args):
    report, outcomes = evaluate_session(session, settings, model=model, blocks=args.blocks, tau=args.tau)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pid = session.participant_id
    outcomes_table(outcomes).to_csv(out / f"{pid}_outcomes.csv", index=False)
    for entry in session.threshold_history:
        if "curves" in entry:
            curves_table(entry["curves"]).to_csv(out / f"{pid}_adaptation_block{entry['block'] - 1}.csv", index=False)
    return report


def _erp_table(erp) -> pd.DataFrame:
    return pd.DataFrame({"time_s": erp.times, "mean_error": erp.mean_error, "mean_correct": erp.mean_correct,
                         "p_value": erp.p_values, "significant": erp.significant})


def cmd_evaluate(args, settings):
    model = _load_model(args.model)
    out = Path(args.out)
    sessions = _sessions(args.session)
    for session in sessions:
        report = _evaluate(session, settings, model, args)
        _write_json(out / f"{session.participant_id}.metrics.json", report.model_dump())
        if args.erp:
            _erp_table(session_erp(session, settings)).to_csv(out / f"{session.participant_id}_erp.csv", index=False)
    if args.erp:
        groups = {}
        for session in sessions:
            groups.setdefault(str(session.profile.get("group", "")), []).append(session)
        for group, members in groups.items():
            if group and len(members) > 1:
                _erp_table(group_erp(members, settings)).to_csv(out / f"group_{group}_erp.csv", index=False)


def _describe(record: dict) -> str:
    if record.get("source") == "sessions":
        return f"sessions {record.get('sessions')}"
    if record.get("source") == "synthetic":
        return f"the synthetic corpus of seed {record.get('seed')}"
    return "epochs of unknown origin"


def _chance_corpus(args, settings) -> list:
    """Training epochs of the model under test, rebuilt from the provenance stored in the model file."""
    record = read_training_record(args.model) if args.model else None
    if args.training_session:
        sessions = _sessions(args.training_session)
        ids = sorted(s.participant_id for s in sessions)
        if record is not None and (record.get("source") != "sessions" or sorted(record.get("sessions", [])) != ids):
            raise ConfigError(f"--training-session {ids} is not what the model was trained on ({_describe(record)})")
        epochs = []
        for session in sessions:
            epochs.extend(session_epochs(session, onset_map(session), settings))
    elif record is None:
        logger.warning(f"[CLI] No training record for the evaluated streams, "
                       f"assuming the synthetic corpus of seed {args.seed}")
        epochs = training_corpus(settings, args.seed)
    elif record.get("source") == "synthetic" and record.get("seed") is not None:
        epochs = training_corpus(settings, int(record["seed"]))
    else:
        raise ConfigError(f"model was trained on {_describe(record)}; pass that data with --training-session")

    if record is not None and len(epochs) != record.get("n_epochs"):
        raise ConfigError(f"rebuilt training corpus has {len(epochs)} epochs but the model was trained on "
                          f"{record.get('n_epochs')}; check the configuration")
    return epochs


def cmd_chance(args, settings):
    model = _load_model(args.model)
    epochs = _chance_corpus(args, settings)
    n_perm = settings.n_perm if args.n_perm is None else args.n_perm
    bank = build_chance_bank(epochs, settings, n_perm, seed=args.seed + 1)
    for session in _sessions(args.session):
        report = _evaluate(session, settings, model, args)
        permutation_chance(report, session, bank, settings)
        _write_json(Path(args.out) / f"{session.participant_id}.metrics.json", report.model_dump())


def cmd_cross_validate(args, settings):
    out = Path(args.out)
    for session in _sessions(args.session):
        result = cross_validate(session, settings, seed=args.seed, blocks=args.blocks)
        if not args.no_chance:
            cross_validation_chance(result, session, settings, seed=args.seed + 1, blocks=args.blocks)
        summary = result.summary()
        out.mkdir(parents=True, exist_ok=True)
        cv_curves_table(summary).to_csv(out / f"{session.participant_id}_cv_curves.csv", index=False)
        _write_json(out / f"{session.participant_id}.cv.json", summary)


def cmd_report(args, settings):
    inputs = Path(args.inputs)
    if not inputs.is_dir():
        raise ConfigError(f"input directory not found: {inputs}")
    reports = []
    for path in sorted(inputs.glob("*.metrics.json")):
        with open(path, encoding="utf-8") as f:
            reports.append(MetricsReport.model_validate(json.load(f)))
    cv_results = []
    for path in sorted(inputs.glob("*.cv.json")):
        with open(path, encoding="utf-8") as f:
            cv_results.append(json.load(f))
    if not reports:
        raise ConfigError(f"no *.metrics.json files in {inputs}")
    write_report(reports, args.out, cv_results)


COMMANDS = {
    "synth": cmd_synth,
    "train-generic": cmd_train_generic,
    "run-online": cmd_run_online,
    "adapt-threshold": cmd_adapt_threshold,
    "evaluate": cmd_evaluate,
    "cross-validate": cmd_cross_validate,
    "chance": cmd_chance,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="Seed for every random draw of the run")
    common.add_argument("--config", default=None, help="Flat KEY=VALUE configuration file")
    common.add_argument("--out", required=True, help="Output file or directory")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    ap = argparse.ArgumentParser(prog="errp-detector", description="Generic asynchronous ErrP detection pipeline")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="Simulate open-loop calibration sessions")
    p.add_argument("--cohort", choices=["training", "evaluation"], default="training")
    p.add_argument("--participants", nargs="+", default=None)

    p = sub.add_parser("train-generic", parents=[common], help="Train the generic classifier")
    p.add_argument("--session", nargs="+", default=None, help="Calibration session directories (default: simulate)")
    p.add_argument("--pattern", action="store_true", help="Also write the activation pattern as channels x time CSV")

    p = sub.add_parser("run-online", parents=[common], help="Closed-loop sessions of the evaluation cohort")
    p.add_argument("--model", required=True)
    p.add_argument("--participants", nargs="+", default=None)

    p = sub.add_parser("adapt-threshold", parents=[common], help="Re-derive the personalized threshold")
    p.add_argument("--session", nargs="+", required=True)
    p.add_argument("--model", default=None, help="Replay with this model instead of the stored streams")
    p.add_argument("--blocks", type=parse_blocks, default=None)

    for name, help_text in (("evaluate", "Trial-based metrics"), ("chance", "Metrics plus permutation chance")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--session", nargs="+", required=True)
        p.add_argument("--model", default=None, help="Replay with this model instead of the stored streams")
        p.add_argument("--tau", type=float, default=None)
        p.add_argument("--blocks", type=parse_blocks, default=None)
        if name == "evaluate":
            p.add_argument("--erp", action="store_true", help="Also write grand-average ERP statistics")
        else:
            p.add_argument("--n-perm", type=positive_int, default=None, help="Permuted classifiers in the bank")
            p.add_argument("--training-session", nargs="+", default=None,
                           help="Calibration sessions the model was trained on (default: from the model file)")

    p = sub.add_parser("cross-validate", parents=[common], help="Personalized classifier cross-validation")
    p.add_argument("--session", nargs="+", required=True)
    p.add_argument("--blocks", type=parse_blocks, default=None)
    p.add_argument("--no-chance", action="store_true", help="Skip the label-permuted chance run")

    p = sub.add_parser("report", parents=[common], help="Tables and summary from evaluated participants")
    p.add_argument("--inputs", required=True, help="Directory of *.metrics.json / *.cv.json files")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        settings = load_settings(args.config)
        COMMANDS[args.command](args, settings)
    except ConfigError as e:
        logger.error(f"[CLI] {e}")
        return EXIT_USAGE
    except (ArchiveFormatError, ModelFormatError, UndefinedThresholdError) as e:
        logger.error(f"[CLI] {e}")
        return EXIT_FORMAT
    except ErrpError as e:
        logger.error(f"[CLI] {args.command} failed: {e}")
        return EXIT_FAILURE
    logger.info(f"[CLI] {args.command} done")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
