"""Scenario files: one JSON document driving the whole lifecycle.

Schema (``?`` marks optional keys)::

    {
      "workload": {WorkloadSpec fields},
      "feature_groups"?: [{"name", "event_types", "lookback_days"}],
      "tenants": [{"tenant_name", "target_seq_length", "required_traits",
                   "batch_size"?, "base_batch_size"?}],
      "latency"?: {LatencyModel fields},
      "paradigms"?: ["fatrow", "latemat"],
      "stripe_capacity"?: 128, "shard_count"?: 1, "publish_delay_ms"?: 0,
      "adversarial_events_per_request"?: 0,
      "deletions"?: {"item_ids": [...], "user_ids": [...]},
      "pipeline"?: {"mode", "prefetch_depth", "bucket_by_user", "shards",
                    "symmetric_sharding"}
    }

Every artifact is written with sorted keys and no wall-clock values, so a
rerun of the same file reproduces the output directory byte for byte.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

from seqstore.errors import ConfigError
from seqstore.immutable import DEFAULT_STRIPE_CAPACITY, DeletionList
from seqstore.metrics import amplification_report
from seqstore.model import DEFAULT_FEATURE_GROUPS, FeatureGroup, TenantSpec, WorkloadSpec, dumps
from seqstore.pipeline import MODES, LatencyModel, ShardMap, ingest, run_ingested
from seqstore.simulation import SimulationConfig, SimulationResult, examples_jsonl, run_simulation, verify
from seqstore.workload import write_workload

PARADIGMS = ("fatrow", "latemat")
_TOP_LEVEL = {
    "workload", "feature_groups", "tenants", "latency", "paradigms", "stripe_capacity", "shard_count",
    "publish_delay_ms", "adversarial_events_per_request", "deletions", "pipeline",
}
_PIPELINE_KEYS = {"mode", "prefetch_depth", "bucket_by_user", "shards", "symmetric_sharding"}


@dataclass(frozen=True)
class PipelineConfig:
    mode: str = "batch"
    prefetch_depth: int = 1
    bucket_by_user: bool = False
    shards: int = 1
    symmetric_sharding: bool = True

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> PipelineConfig:
        extra = set(d) - _PIPELINE_KEYS
        if extra:
            raise ConfigError(f"pipeline has unknown field {sorted(extra)[0]!r}", f"pipeline.{sorted(extra)[0]}")
        cfg = cls(**d)
        if cfg.mode not in MODES:
            raise ConfigError(f"pipeline.mode must be one of {MODES}", "pipeline.mode")
        if cfg.prefetch_depth < 0:
            raise ConfigError("pipeline.prefetch_depth must be >= 0", "pipeline.prefetch_depth")
        if cfg.shards < 1:
            raise ConfigError("pipeline.shards must be >= 1", "pipeline.shards")
        return cfg


@dataclass(frozen=True)
class Scenario:
    simulation: SimulationConfig
    latency: LatencyModel = field(default_factory=LatencyModel)
    paradigms: tuple[str, ...] = PARADIGMS
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Scenario:
        if not isinstance(d, Mapping):
            raise ConfigError("scenario must be a JSON object", "scenario")
        extra = set(d) - _TOP_LEVEL
        if extra:
            raise ConfigError(f"scenario has unknown field {sorted(extra)[0]!r}", sorted(extra)[0])
        for key in ("workload", "tenants"):
            if key not in d:
                raise ConfigError(f"scenario is missing field {key!r}", key)
        if not isinstance(d["workload"], Mapping):
            raise ConfigError("workload must be an object", "workload")
        if not isinstance(d["tenants"], list) or not d["tenants"]:
            raise ConfigError("tenants must be a non-empty list", "tenants")
        groups = tuple(FeatureGroup.from_dict(g) for g in d["feature_groups"]) if "feature_groups" in d \
            else DEFAULT_FEATURE_GROUPS
        paradigms = tuple(d.get("paradigms", PARADIGMS))
        for p in paradigms:
            if p not in PARADIGMS:
                raise ConfigError(f"unknown paradigm {p!r}", "paradigms")
        sim = SimulationConfig(
            workload=WorkloadSpec.from_dict(d["workload"]),
            feature_groups=groups,
            tenants=tuple(TenantSpec.from_dict(t) for t in d["tenants"]),
            stripe_capacity=_int(d, "stripe_capacity", DEFAULT_STRIPE_CAPACITY, 1),
            shard_count=_int(d, "shard_count", 1, 1),
            publish_delay_ms=_int(d, "publish_delay_ms", 0, 0),
            adversarial_events_per_request=_int(d, "adversarial_events_per_request", 0, 0),
            deletions=DeletionList.from_dict(d.get("deletions")),
        )
        return cls(
            simulation=sim,
            latency=LatencyModel.from_dict(d.get("latency", {})),
            paradigms=paradigms,
            pipeline=PipelineConfig.from_dict(d.get("pipeline", {})),
        )


def _int(d: Mapping[str, Any], key: str, default: int, minimum: int) -> int:
    v = d.get(key, default)
    if not isinstance(v, int) or isinstance(v, bool) or v < minimum:
        raise ConfigError(f"{key} must be an integer >= {minimum}", key)
    return v


def load_scenario(path: str | os.PathLike) -> Scenario:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})", "scenario") from None
    return Scenario.from_dict(doc)


def bundled_scenario(name: str = "smoke") -> dict[str, Any]:
    text = resources.files("seqstore.scenarios").joinpath(f"{name}.json").read_text()
    return json.loads(text)


def _write_json(path: Path, obj: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def run_scenario(scenario: Scenario, out_dir: str | os.PathLike) -> dict[str, Any]:
    """Run the lifecycle and training simulation; return the verification summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = scenario.simulation
    result = run_simulation(cfg)
    write_workload(result.workload, out / "workload")
    for gen in result.generations:
        gen.write(out / "generations" / f"gen-{gen.generation_id:05d}")

    examples_dir = out / "examples"
    examples_dir.mkdir(exist_ok=True)
    (examples_dir / "latemat.jsonl").write_text(examples_jsonl(result.latemat))
    (examples_dir / "fatrow.jsonl").write_text(examples_jsonl(result.fatrow))
    (examples_dir / "truth.jsonl").write_text("".join(
        dumps({"example_id": i, "sequence": [e.to_dict() for e in seq]}) + "\n" for i, seq in sorted(result.truth.items())
    ))

    write_stats = {p: result.write_stats(p) for p in PARADIGMS}
    for p, ws in write_stats.items():
        _write_json(out / "stats" / f"write_{p}.json", ws.to_dict())

    tenant_reads = _train(scenario, result, out)
    report = amplification_report(write_stats["fatrow"], write_stats["latemat"], tenant_reads)
    _write_json(out / "report.json", report)

    summaries = [verify(result.latemat, result.fatrow, cfg.logging_tenant, result.immutable, result.truth)]
    summaries += [verify(result.latemat, result.fatrow, t, result.immutable) for t in cfg.tenants]
    summary = {
        "examples": len(result.latemat),
        "injected_events": len(result.injected),
        "generations": [g.generation_id for g in result.generations],
        "tenants": [s.to_dict() for s in summaries],
        "leakage_violations": sum(s.leakage_violations for s in summaries),
        "o2o_rate": min(s.o2o_rate for s in summaries),
        "passed": all(s.passed for s in summaries),
    }
    _write_json(out / "verification.json", summary)
    return summary


def _train(scenario: Scenario, result: SimulationResult, out: Path) -> dict[str, dict[str, int]]:
    pc = scenario.pipeline
    shard_map = ShardMap(pc.shards)
    reads: dict[str, dict[str, int]] = {}
    for tenant in scenario.simulation.tenants:
        for paradigm in scenario.paradigms:
            examples = result.fatrow if paradigm == "fatrow" else result.latemat
            ingested = ingest(examples, shard_map, symmetric=pc.symmetric_sharding)
            batches, stats = run_ingested(
                ingested, tenant, pc.mode, pc.prefetch_depth, scenario.latency, result.immutable,
                bucket=pc.bucket_by_user, shard_map=shard_map,
            )
            name = f"{tenant.tenant_name}_{paradigm}"
            _write_json(out / "stats" / f"train_{name}.json", stats.to_dict())
            (out / "batches").mkdir(exist_ok=True)
            (out / "batches" / f"{name}.jsonl").write_text("".join(b.to_json() + "\n" for b in batches))
            reads[name] = {
                "primary_read_bytes": stats.primary_read_bytes,
                "lookup_read_bytes": stats.lookup_read_bytes,
                "examples": stats.examples,
            }
    return reads
