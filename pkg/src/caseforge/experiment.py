"""Train -> evaluate -> summarize pipelines and the comparison table."""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .config import ExperimentConfig, dump_config
from .data.dataset import generate_dataset, load_dataset
from .errors import CaseForgeError, MissingFileError, StageError
from .evaluation import Protocol, evaluate
from .training import save_checkpoint, train

log = logging.getLogger(__name__)


@dataclass
class RunSummary:
    name: str
    mode: str
    config_hash: str
    seed: int
    disabled: list
    reports: dict               # protocol name -> EvalReport.to_dict()
    final_losses: dict
    wall_time_s: float = 0.0
    paths: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunSummary":
        return cls(**d)

    def metrics(self) -> dict:
        """Protocol -> (R1, R5, R10, mAP); the reproducible part of a summary."""
        return {p: (r["rank1"], r["rank5"], r["rank10"], r["map"]) for p, r in self.reports.items()}


def _stage(name, fn, artifacts=()):
    try:
        return fn()
    except StageError:
        raise
    except (CaseForgeError, OSError, ValueError, RuntimeError) as exc:
        raise StageError(name, exc, [a for a in artifacts if Path(a).exists()]) from exc


def prepare_data(cfg: ExperimentConfig, out: Path):
    if cfg.data_dir:
        return load_dataset(cfg.data_dir)
    data_dir = out / "data"
    if (data_dir / "manifest.json").is_file():
        return load_dataset(data_dir)
    return generate_dataset(cfg.data, cfg.seed, data_dir)


def run_experiment(cfg: ExperimentConfig, mode: str = "casenet", manifest=None,
                   write_checkpoint: bool = True) -> RunSummary:
    """Generate/load data, train, evaluate every protocol, write the summary.

    Outputs under ``cfg.out_dir``: ``config.json``, ``train/train_log.jsonl``,
    ``checkpoint/``, ``summary.json``, ``table.md`` and a ``manifest.json`` index.
    """
    t0 = time.perf_counter()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.json")

    if manifest is None:
        manifest = _stage("data", lambda: prepare_data(cfg, out), [out / "data"])
    h, w = manifest.image_size
    model_cfg = cfg.model_config(len(manifest.train_labels()), h, w)
    train_cfg = cfg.train_config(mode)

    state, records = _stage("train", lambda: train(manifest, train_cfg, model_cfg, out_dir=out / "train"),
                            [out / "train"])
    ckpt = out / "checkpoint"
    if write_checkpoint:
        _stage("checkpoint", lambda: save_checkpoint(state, ckpt), [out / "train"])

    def _evaluate():
        cache, reports = {}, {}
        for name in cfg.protocols:
            proto = Protocol.parse(name, cfg.same_view_exclusion)
            rep = evaluate(state.bundle, manifest, proto, normalize=cfg.normalize_features, cache=cache)
            reports[proto.name] = rep.to_dict()
        return reports

    reports = _stage("evaluate", _evaluate, [ckpt])
    final = dict(records[-1]) if records else {}
    final.pop("wall_ms", None)
    summary = RunSummary(
        name=cfg.name,
        mode=mode,
        config_hash=cfg.hash(),
        seed=cfg.seed,
        disabled=list(train_cfg.disabled) if mode == "casenet" else [],
        reports=reports,
        final_losses={"last": final, "running": dict(state.running)},
        wall_time_s=round(time.perf_counter() - t0, 3),
        paths={"checkpoint": str(ckpt) if write_checkpoint else None, "train_log": str(out / "train" / "train_log.jsonl")},
    )
    (out / "summary.json").write_text(json.dumps(summary.to_dict(), indent=2))
    (out / "table.md").write_text(comparison_table([summary]))
    index = {"summary": "summary.json", "table": "table.md", "config": "config.json",
             "train_log": "train/train_log.jsonl"}
    if write_checkpoint:
        index["checkpoint"] = "checkpoint"
    if (out / "data" / "manifest.json").is_file():
        index["data"] = "data"
    (out / "manifest.json").write_text(json.dumps(index, indent=2))
    return summary


def run_baseline(cfg: ExperimentConfig, manifest=None, write_checkpoint: bool = True) -> RunSummary:
    """RGB-only shape encoder trained with identity + triplet losses."""
    return run_experiment(cfg, mode="baseline", manifest=manifest, write_checkpoint=write_checkpoint)


def load_summary(run_dir) -> RunSummary:
    p = Path(run_dir)
    if p.is_dir():
        p = p / "summary.json"
    if not p.is_file():
        raise MissingFileError(p)
    return RunSummary.from_dict(json.loads(p.read_text()))


def _label(s: RunSummary) -> str:
    if s.mode == "baseline":
        return f"{s.name} (baseline)"
    if s.disabled:
        return f"{s.name} w/o " + ", ".join(s.disabled)
    return s.name


def comparison_table(summaries, fmt: str = "md") -> str:
    """One row per run, R1/R5/R10/mAP (percent) per protocol, sorted by the first protocol's mAP."""
    if not summaries:
        raise ValueError("need at least one run summary")
    protocols = []
    for s in summaries:
        for p in s.reports:
            if p not in protocols:
                protocols.append(p)
    key = protocols[0]
    rows = sorted(summaries, key=lambda s: -s.reports.get(key, {}).get("map", float("-inf")))
    header = ["Method"] + [f"{p} {m}" for p in protocols for m in ("R1", "R5", "R10", "mAP")]
    body = []
    for s in rows:
        cells = [_label(s)]
        for p in protocols:
            r = s.reports.get(p)
            if r is None:
                cells += ["-"] * 4
            else:
                cells += [f"{100 * r[k]:.1f}" for k in ("rank1", "rank5", "rank10", "map")]
        body.append(cells)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(body)
        return buf.getvalue()
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(c) + " |" for c in body]
    return "\n".join(lines) + "\n"


def report(run_dirs, fmt: str = "md") -> str:
    return comparison_table([load_summary(d) for d in run_dirs], fmt)
