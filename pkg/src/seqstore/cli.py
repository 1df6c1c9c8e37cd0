"""``seqstore`` command line: every lifecycle step as a file-in/file-out command.

Exit status: 0 on success, 1 when a check fails or a store operation
raises, 2 for malformed input. Errors are printed to stderr as one JSON
object ``{"error", "message", "field"}``. ``SEQSTORE_LOG`` sets the log
level (default WARNING).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

from seqstore.errors import ConfigError, SeqStoreError
from seqstore.fatrow import fat_row_from_snapshot
from seqstore.immutable import DEFAULT_STRIPE_CAPACITY, DeletionList, Generation, ImmutableStore, compact
from seqstore.metrics import WriteStats, amplification_report
from seqstore.model import DEFAULT_FEATURE_GROUPS, Event, FeatureGroup, TenantSpec, TrainingExample, WorkloadSpec
from seqstore.mutable import MutableStore
from seqstore.pipeline import MODES, LatencyModel, ShardMap, ingest, run_ingested
from seqstore.protocol import make_latemat_example, snapshot_at_inference
from seqstore.scenario import bundled_scenario, load_scenario, run_scenario, Scenario
from seqstore.simulation import examples_jsonl, verify
from seqstore.workload import (
    Label,
    generate_workload,
    read_events,
    read_jsonl,
    request_from_dict,
    scalar_features,
    write_workload,
)

log = logging.getLogger("seqstore")


def _load_json(path: str, field: str) -> Any:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})", field) from None
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}", field) from None


def _write_json(path: str | Path, obj: Any) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _workload_spec(doc: Any) -> WorkloadSpec:
    """Accept either a bare WorkloadSpec document or a scenario holding one."""
    if isinstance(doc, dict) and "workload" in doc:
        doc = doc["workload"]
    if not isinstance(doc, dict):
        raise ConfigError("workload spec must be a JSON object", "workload")
    return WorkloadSpec.from_dict(doc)


def _groups(path: str | None) -> tuple[FeatureGroup, ...]:
    if path is None:
        return DEFAULT_FEATURE_GROUPS
    doc = _load_json(path, "groups")
    if isinstance(doc, dict):
        doc = doc.get("feature_groups")
    if not isinstance(doc, list):
        raise ConfigError("feature groups must be a list", "feature_groups")
    return tuple(FeatureGroup.from_dict(g) for g in doc)


def _tenant(path: str) -> TenantSpec:
    doc = _load_json(path, "tenant")
    if not isinstance(doc, dict):
        raise ConfigError("tenant spec must be a JSON object", "tenant")
    return TenantSpec.from_dict(doc)


def _examples(path: str) -> list[TrainingExample]:
    with open(path) as fh:
        return [TrainingExample.from_json(line) for line in fh if line.strip()]


def _store(generations: str) -> ImmutableStore:
    """Load every ``gen-*`` directory below ``generations`` (or the directory itself)."""
    root = Path(generations)
    dirs = [root] if (root / "manifest.json").exists() else sorted(p for p in root.iterdir() if (p / "manifest.json").exists())
    if not dirs:
        raise ConfigError(f"{root}: no generation manifests found", "generations")
    store = ImmutableStore(keep_generations=None)
    for gen in sorted((Generation.load(d) for d in dirs), key=lambda g: g.generation_id):
        store.publish(gen)
    return store


def cmd_gen_workload(args: argparse.Namespace) -> int:
    spec = _workload_spec(_load_json(args.config, "config"))
    write_workload(generate_workload(spec), args.out)
    return 0


def cmd_ingest(args: argparse.Namespace) -> int:
    store = MutableStore()
    by_user: dict[int, list[Event]] = {}
    for e in read_events(args.events):
        if args.until is None or e.timestamp <= args.until:
            by_user.setdefault(e.user_id, []).append(e)
    for user_id in sorted(by_user):
        store.append(user_id, by_user[user_id])
    if args.evict_below is not None:
        store.evict_below(args.evict_below)
    with open(args.out, "w") as fh:
        store.dump_jsonl(fh)
    return 0


def cmd_compact(args: argparse.Namespace) -> int:
    deletions = DeletionList.from_dict(_load_json(args.deletions, "deletions")) if args.deletions else DeletionList()
    gen = compact(
        read_events(args.source),
        _groups(args.groups),
        deletions,
        args.as_of,
        generation_id=args.generation_id,
        stripe_capacity=args.stripe_capacity,
        shard_count=args.shards,
    )
    gen.write(args.out)
    return 0


def cmd_snapshot(args: argparse.Namespace) -> int:
    """Serve every request of a workload directory against one generation."""
    wdir = Path(args.workload)
    spec = _workload_spec(_load_json(str(wdir / "workload.json"), "workload"))
    tenant = _tenant(args.tenant)
    immutable = _store(args.generation)
    gen = immutable.get()
    events = [e for e in read_events(wdir / "events.jsonl") if e.timestamp > gen.as_of_ts]
    labels = {lb.request_id: lb for lb in (Label.from_dict(d) for d in read_jsonl(wdir / "labels.jsonl"))}
    requests = sorted((request_from_dict(d) for d in read_jsonl(wdir / "requests.jsonl")),
                      key=lambda r: (r.request_ts, r.request_id))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mutable = MutableStore()
    by_user: dict[int, list[Event]] = {}
    for e in events:
        by_user.setdefault(e.user_id, []).append(e)
    for user_id in sorted(by_user):
        mutable.append(user_id, by_user[user_id])
    latemat, fatrow = [], []
    for r in requests:
        snap = snapshot_at_inference(r, tenant, mutable, immutable)
        lb = labels[r.request_id]
        scalar = scalar_features(spec, r.request_id)
        kw = dict(example_id=r.request_id, label_ts=lb.label_ts, labels=lb.labels, scalar_features=scalar)
        latemat.append(make_latemat_example(snap, **kw))
        fatrow.append(fat_row_from_snapshot(snap, **kw))
    (out / "latemat.jsonl").write_text(examples_jsonl(latemat))
    (out / "fatrow.jsonl").write_text(examples_jsonl(fatrow))
    return 0


def cmd_train_sim(args: argparse.Namespace) -> int:
    examples = _examples(args.examples)
    want_fat = args.paradigm == "fatrow"
    if any(x.is_fat_row != want_fat for x in examples):
        raise ConfigError(f"{args.examples} holds examples of another paradigm", "paradigm")
    store = _store(args.generations) if args.generations else None
    latency = LatencyModel.from_dict(_load_json(args.latency, "latency")) if args.latency else LatencyModel()
    shard_map = ShardMap(args.shards)
    ingested = ingest(examples, shard_map, symmetric=not args.asymmetric)
    batches, stats = run_ingested(ingested, _tenant(args.tenant), args.mode, args.prefetch_depth, latency, store,
                                  shard_map=shard_map, bucket=args.bucket_by_user, verify=args.verify)
    if args.stats_out:
        _write_json(args.stats_out, stats.to_dict())
    if args.out:
        Path(args.out).write_text("".join(b.to_json() + "\n" for b in batches))
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    truth = None
    if args.truth:
        truth = {d["example_id"]: tuple(Event.from_dict(e) for e in d["sequence"]) for d in read_jsonl(args.truth)}
    summary = verify(_examples(args.latemat), _examples(args.fatrow), _tenant(args.tenant), _store(args.generations), truth)
    doc = summary.to_dict()
    if args.out:
        _write_json(args.out, doc)
    print(json.dumps(doc, sort_keys=True))
    return 0 if summary.passed else 1


def cmd_report(args: argparse.Namespace) -> int:
    fat = WriteStats.from_dict(_load_json(args.fatrow_stats, "fatrow_stats"))
    late = WriteStats.from_dict(_load_json(args.latemat_stats, "latemat_stats"))
    if args.workload:
        spec = _workload_spec(_load_json(args.workload, "workload"))
        if spec.fingerprint() != fat.workload_fingerprint:
            raise ConfigError("stats were not produced from this workload", "workload")
    report = amplification_report(fat, late, tolerance=args.tolerance)
    _write_json(args.out, report)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["quantity", "measured", "analytic"])
            for key in ("fatrow_uih_write_bytes", "latemat_uih_write_bytes", "write_ratio"):
                w.writerow([key, report["measured"][key], report["analytic"][key]])
    return 0 if report["within_tolerance"] else 1


def cmd_scenario(args: argparse.Namespace) -> int:
    scenario = Scenario.from_dict(bundled_scenario(args.bundled)) if args.bundled else load_scenario(args.config)
    summary = run_scenario(scenario, args.out)
    print(json.dumps({k: summary[k] for k in ("examples", "o2o_rate", "leakage_violations", "passed")}, sort_keys=True))
    return 0 if summary["passed"] else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seqstore", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-workload", help="generate events, requests and labels")
    s.add_argument("--config", required=True, help="WorkloadSpec JSON (or a scenario)")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_gen_workload)

    s = sub.add_parser("ingest", help="load events into the mutable tier and dump it")
    s.add_argument("--events", required=True)
    s.add_argument("--until", type=int, help="ingest events up to this timestamp")
    s.add_argument("--evict-below", type=int, help="evict events at or below this timestamp")
    s.add_argument("--out", required=True, help="JSON Lines dump")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("compact", help="build one immutable generation")
    s.add_argument("--source", required=True, help="events JSON Lines")
    s.add_argument("--groups", help="feature groups JSON (default: built-in groups)")
    s.add_argument("--as-of", type=int, required=True)
    s.add_argument("--deletions", help='{"item_ids": [...], "user_ids": [...]}')
    s.add_argument("--generation-id", type=int, default=1)
    s.add_argument("--stripe-capacity", type=int, default=DEFAULT_STRIPE_CAPACITY)
    s.add_argument("--shards", type=int, default=1)
    s.add_argument("--out", required=True, help="generation directory")
    s.set_defaults(func=cmd_compact)

    s = sub.add_parser("snapshot", help="serve a workload's requests and log both paradigms")
    s.add_argument("--workload", required=True, help="directory written by gen-workload")
    s.add_argument("--generation", required=True, help="generation directory (or a directory of them)")
    s.add_argument("--tenant", required=True, help="logging tenant JSON")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_snapshot)

    s = sub.add_parser("train-sim", help="materialize training batches for one tenant")
    s.add_argument("--mode", choices=MODES, required=True)
    s.add_argument("--paradigm", choices=("fatrow", "latemat"), required=True)
    s.add_argument("--tenant", required=True)
    s.add_argument("--examples", required=True, help="examples JSON Lines")
    s.add_argument("--generations", help="generation directories (late mat only)")
    s.add_argument("--latency", help="latency model JSON")
    s.add_argument("--prefetch-depth", type=int, default=1)
    s.add_argument("--shards", type=int, default=1)
    s.add_argument("--asymmetric", action="store_true", help="ingest by example id instead of user id")
    s.add_argument("--bucket-by-user", action="store_true")
    s.add_argument("--verify", choices=("auto", "full"), default="auto")
    s.add_argument("--stats-out")
    s.add_argument("--out", help="materialized batches JSON Lines")
    s.set_defaults(func=cmd_train_sim)

    s = sub.add_parser("verify", help="check reconstruction against fat rows and served sequences")
    s.add_argument("--latemat", required=True)
    s.add_argument("--fatrow", required=True)
    s.add_argument("--generations", required=True)
    s.add_argument("--tenant", required=True)
    s.add_argument("--truth", help="served sequences JSON Lines (logging tenant only)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("report", help="write-amplification report")
    s.add_argument("--fatrow-stats", required=True)
    s.add_argument("--latemat-stats", required=True)
    s.add_argument("--workload", help="WorkloadSpec JSON the stats must come from")
    s.add_argument("--tolerance", type=float, default=0.10)
    s.add_argument("--out", required=True)
    s.add_argument("--csv", help="also write a CSV summary")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("scenario", help="run a full scenario end to end")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("config", nargs="?", help="scenario JSON")
    src.add_argument("--bundled", metavar="NAME", help="a scenario shipped with the package, e.g. smoke")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_scenario)
    return p


def _fail(exc: Exception, field: str | None, status: int) -> int:
    err = {"error": type(exc).__name__, "message": str(exc), "field": field}
    print(json.dumps(err, sort_keys=True), file=sys.stderr)
    return status


def main(argv: Sequence[str] | None = None) -> int:
    level = logging.getLevelName(os.environ.get("SEQSTORE_LOG", "WARNING").upper())
    logging.basicConfig(level=level if isinstance(level, int) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(exc, exc.field, 2)
    except (OSError, KeyError, TypeError, json.JSONDecodeError) as exc:
        return _fail(exc, None, 2)
    except SeqStoreError as exc:
        return _fail(exc, None, 1)


if __name__ == "__main__":
    sys.exit(main())
