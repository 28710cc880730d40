"""Command-line entry point: prepare, train, ensemble, eval, track.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from .corpus import SYSTEM, USER_ASR, CorpusError, TokenEvent
from .ensemble import predict_dataset
from .evaluate import MetricsReport, TrackerOutputError, export_tracker_output, score, score_external
from .model import trace_record
from .pipeline import (
    ArtifactError,
    PreparedData,
    RunConfig,
    load_prepared,
    load_run,
    prepare,
    save_prepared,
    write_ensemble,
    write_run_metadata,
)
from .tracking import TrackerSession
from .train import complete_groups, fit

log = logging.getLogger("lectrack")


class UsageError(Exception):
    pass


def _load_config(args) -> RunConfig:
    if not args.config:
        raise UsageError("--config is required")
    try:
        config = RunConfig.load(args.config)
    except (OSError, ValueError, TypeError, KeyError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    train = config.train
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    for flag, field_name in (("no_scores", "use_scores"), ("no_transcriptions", "use_transcriptions"), ("no_abstraction", "use_abstraction")):
        if getattr(args, flag, False):
            overrides[field_name] = False
    for name in ("max_epochs", "patience", "early_stop"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    try:
        train = replace(train, **overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    config = replace(config, train=train)
    if getattr(args, "out_dir", None):
        config = replace(config, out_dir=str(Path(args.out_dir).resolve()))
    if getattr(args, "component", None):
        config = replace(config, components="all" if args.component == "all" else args.component.split(","))
    if getattr(args, "ensemble_size", None) is not None:
        config = replace(config, ensemble_size=args.ensemble_size)
    return config


def _prepared_dir(config: RunConfig) -> Path:
    return Path(config.out_dir) / "prepared"


def _load_prepared(config: RunConfig) -> PreparedData:
    try:
        return load_prepared(_prepared_dir(config))
    except ArtifactError as exc:
        raise UsageError(f"{exc}; run 'lectrack prepare' first") from exc


def _check_paths(config: RunConfig) -> None:
    for label, path in [("data_root", config.data_root), ("ontology", config.ontology), *config.flists.items()]:
        if not Path(path).exists():
            raise UsageError(f"{label} path does not exist: {path}")


def cmd_prepare(args) -> int:
    config = _load_config(args)
    _check_paths(config)
    data = prepare(config)
    manifest = save_prepared(data, _prepared_dir(config))
    print(json.dumps({"prepared": str(_prepared_dir(config)), "fingerprint": data.fingerprint, **manifest}, indent=2))
    return 0


def _evaluate(run_dir: Path, data: PreparedData, splits: Sequence[str]) -> dict[str, MetricsReport]:
    run = load_run(run_dir)
    if run.data_fingerprint != data.fingerprint:
        raise UsageError(f"{run_dir} was trained on different prepared data; refusing to evaluate")
    out = {}
    for split in splits:
        if split not in data.splits:
            continue
        evalset = data.eval_set(split, run.abstraction)
        preds = predict_dataset(run.ensemble, evalset.examples, evalset.assignments, data.schema)
        out[split] = score(preds, evalset.references, data.schema, complete_groups(data.schema, run.ensemble.components))
    return out


def _print_reports(reports: dict[str, MetricsReport], directory: Path | None) -> None:
    for split, rep in reports.items():
        print(f"[{split}]")
        print(rep.table())
        if directory is not None:
            (directory / f"metrics_{split}.json").write_text(json.dumps(rep.to_json(), indent=2, sort_keys=True))


def _train_one(config: RunConfig, data: PreparedData, run_dir: Path) -> dict:
    components = config.component_list(data.schema)
    training = data.training_set(config.train)
    dev = data.eval_set("dev", training.abstraction)
    write_run_metadata(run_dir, training, config.train, data.schema, data.fingerprint)
    report, _ = fit(training, dev, data.schema, config.train, components, run_dir)
    return report.to_json()


def _train_member(payload) -> dict:
    config, run_dir = payload
    data = load_prepared(_prepared_dir(config))
    return _train_one(config, data, run_dir)


def cmd_train(args) -> int:
    config = _load_config(args)
    data = _load_prepared(config)
    run_dir = Path(config.out_dir) / "models" / f"train-{config.train.hash[:12]}"
    report = _train_one(config, data, run_dir)
    print(f"trained {run_dir} (config {config.train.hash[:12]}, selected epoch {report['selected_epoch']})")
    _print_reports(_evaluate(run_dir, data, ("dev", "test")), run_dir)
    return 0


def cmd_ensemble(args) -> int:
    config = _load_config(args)
    data = _load_prepared(config)
    n = config.ensemble_size
    if n < 1:
        raise UsageError("ensemble size must be >= 1")
    ens_dir = Path(config.out_dir) / "ensembles" / f"ens-{config.train.hash[:12]}-n{n}"
    members = [ens_dir / f"member_{i:02d}" for i in range(n)]
    payloads = [(replace(config, train=replace(config.train, seed=config.train.seed + i)), d) for i, d in enumerate(members)]
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers) as pool:
            list(pool.map(_train_member, payloads))
    else:
        for cfg, d in payloads:
            _train_one(cfg, data, d)
    training = data.training_set(config.train)
    write_run_metadata(ens_dir, training, config.train, data.schema, data.fingerprint)
    write_ensemble(ens_dir, members, config.component_list(data.schema))
    print(f"ensemble of {n} written to {ens_dir}")
    _print_reports(_evaluate(ens_dir, data, ("dev", "test")), ens_dir)
    return 0


def cmd_eval(args) -> int:
    config = _load_config(args)
    data = _load_prepared(config)
    split = args.split
    if split not in data.splits:
        raise UsageError(f"prepared data has no {split} split")
    if args.external:
        report = score_external(args.external, data.splits[split].references, data.schema)
        reports = {split: report}
        _print_reports(reports, None)
        if args.json:
            Path(args.json).write_text(json.dumps(report.to_json(), indent=2, sort_keys=True))
        return 0
    if not args.model:
        raise UsageError("eval needs --model DIR or --external FILE")
    run_dir = Path(args.model)
    try:
        reports = _evaluate(run_dir, data, (split,))
    except ArtifactError as exc:
        raise UsageError(str(exc)) from exc
    _print_reports(reports, None)
    if args.json:
        Path(args.json).write_text(json.dumps(reports[split].to_json(), indent=2, sort_keys=True))
    if args.export:
        run = load_run(run_dir)
        if set(run.ensemble.components) != set(data.schema.names):
            raise UsageError("export needs a model for every component")
        evalset = data.eval_set(split, run.abstraction)
        start = time.perf_counter()
        preds = predict_dataset(run.ensemble, evalset.examples, evalset.assignments, data.schema)
        obj = export_tracker_output(preds, data.schema, f"dstc2_{split}", time.perf_counter() - start)
        Path(args.export).write_text(json.dumps(obj))
    return 0


def parse_track_line(line: str) -> tuple[str, float, str] | None:
    """``token [score] [system|user]`` -> (token, score, source); None if malformed."""
    parts = line.split()
    if not parts or len(parts) > 3:
        return None
    token = parts[0]
    score = 1.0
    source = USER_ASR
    for part in parts[1:]:
        if part in ("system", "user"):
            source = SYSTEM if part == "system" else USER_ASR
            continue
        try:
            score = float(part)
        except ValueError:
            return None
        if not 0.0 <= score <= 1.0:
            return None
    return token, score, source


def cmd_track(args, stdin=None, stdout=None) -> int:
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    if not args.model:
        raise UsageError("track needs --model DIR")
    try:
        run = load_run(args.model)
    except ArtifactError as exc:
        raise UsageError(str(exc)) from exc
    session = TrackerSession(run.ensemble, run.schema, run.abstraction)
    t = 0
    for lineno, line in enumerate(stdin, 1):
        if not line.strip():
            continue
        if line.strip() == "RESET":
            session.reset()
            t = 0
            continue
        parsed = parse_track_line(line)
        if parsed is None:
            log.warning("line %d: cannot parse %r; skipped", lineno, line.rstrip("\n"))
            continue
        token, score_, source = parsed
        belief = session.feed(token, score_, source)
        event = TokenEvent(token, score_, source, session.turn)
        dists = {c: (run.schema.values(c), p) for c, p in belief.items()}
        stdout.write(json.dumps(trace_record(session.dialog_id, t, event, dists, args.top_k)) + "\n")
        stdout.flush()
        t += 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lectrack", description="Incremental LSTM dialog state tracker")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, training=False):
        p.add_argument("--config", help="run configuration (JSON)")
        p.add_argument("--out-dir", help="override the config's output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--component", help="component name, comma list, or 'all'")
        if training:
            p.add_argument("--no-scores", action="store_true", help="drop the ASR-score input layer")
            p.add_argument("--no-transcriptions", action="store_true", help="train on ASR 1-best only")
            p.add_argument("--no-abstraction", action="store_true", help="keep rare values concrete")
            p.add_argument("--max-epochs", type=int)
            p.add_argument("--patience", type=int)
            p.add_argument("--early-stop")

    p = sub.add_parser("prepare", help="parse DSTC2 and write prepared datasets")
    common(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train one model per component")
    common(p, training=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ensemble", help="train N members per component and average them")
    common(p, training=True)
    p.add_argument("--ensemble-size", type=int)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("eval", help="score a trained run, an ensemble, or an external tracker output")
    common(p)
    p.add_argument("--model", help="trained run or ensemble directory")
    p.add_argument("--external", help="tracker output file in the DSTC2 format")
    p.add_argument("--split", default="test")
    p.add_argument("--json", help="also write the metrics report as JSON")
    p.add_argument("--export", help="write predictions in the DSTC2 tracker-output format")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("track", help="track a token stream from standard input")
    p.add_argument("--model", required=False, help="trained run or ensemble directory")
    p.add_argument("--top-k", type=int, default=3)
    p.set_defaults(func=cmd_track)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CorpusError, ArtifactError, TrackerOutputError, RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
