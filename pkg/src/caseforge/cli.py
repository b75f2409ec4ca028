"""Command-line entry point: ``caseforge <command> ...``.

Every failure prints one JSON object ``{"error": <code>, "message": ...}``
on stderr and exits nonzero.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import CaseForgeError, ConfigError

log = logging.getLogger("caseforge")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, json.dumps({"error": "usage", "message": f"{self.prog}: {message}"}) + "\n")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--out", default=None, help="output directory or file")
    p.add_argument("--profile", choices=["desk", "paper"], default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _data_arg(p):
    p.add_argument("--data", default=os.environ.get("CASEFORGE_DATA_DIR"),
                   help="dataset directory (default: $CASEFORGE_DATA_DIR)")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="caseforge", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("generate-data", parents=[common], help="render the synthetic dataset")

    p = sub.add_parser("train", parents=[common], help="train a model")
    _data_arg(p)
    p.add_argument("--resume", default=None, help="checkpoint directory to resume from")
    p.add_argument("--baseline", action="store_true", help="train the RGB-only baseline")

    p = sub.add_parser("evaluate", parents=[common], help="score a checkpoint under one protocol")
    _data_arg(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--protocol", default="rr", choices=["rr", "gr", "rg", "gg"])
    p.add_argument("--clothing", default="any", choices=["any", "same", "changed"])
    p.add_argument("--no-same-view-exclusion", action="store_true")
    p.add_argument("--normalize", action="store_true", help="L2-normalize features before ranking")

    p = sub.add_parser("embed", parents=[common], help="dump shape features of a split")
    _data_arg(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="gallery", choices=["train", "query", "gallery"])
    p.add_argument("--modality", default="rgb", choices=["rgb", "gray"])
    p.add_argument("--normalize", action="store_true")

    p = sub.add_parser("retrieve", parents=[common], help="rank an embedding table against one of its rows")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--query-id", type=int, required=True)
    p.add_argument("--k", type=int, default=10)

    sub.add_parser("run", parents=[common], help="train + evaluate from an experiment config")
    sub.add_parser("run-baseline", parents=[common], help="same, for the RGB-only baseline")

    p = sub.add_parser("report", parents=[common], help="comparison table of finished runs")
    p.add_argument("runs", nargs="+")
    p.add_argument("--format", choices=["md", "csv"], default="md")
    return parser


def _experiment_config(args):
    from .config import ExperimentConfig, load_config
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.profile is not None:
        cfg.profile = args.profile
    if args.out is not None:
        cfg.out_dir = args.out
    cfg.validate()
    return cfg


def _require(value, flag):
    if not value:
        raise ConfigError(f"{flag} is required")
    return value


def cmd_generate_data(args):
    from .data.dataset import GeneratorConfig, generate_dataset
    cfg = GeneratorConfig()
    if args.config:
        d = json.loads(Path(args.config).read_text())
        cfg = GeneratorConfig.from_dict(d.get("data", d) if "version" in d else d)
    out = _require(args.out, "--out")
    m = generate_dataset(cfg, args.seed if args.seed is not None else 0, out)
    print(json.dumps({"out": str(out), "counts": m.counts}))


def cmd_train(args):
    from .data.dataset import load_dataset
    from .training import save_checkpoint, train
    cfg = _experiment_config(args)
    manifest = load_dataset(_require(args.data, "--data"))
    h, w = manifest.image_size
    model_cfg = cfg.model_config(len(manifest.train_labels()), h, w)
    train_cfg = cfg.train_config("baseline" if args.baseline else "casenet")
    out = Path(args.out or cfg.out_dir)
    state, records = train(manifest, train_cfg, model_cfg, out_dir=out, resume=args.resume)
    save_checkpoint(state, out / "checkpoint")
    (out / "manifest.json").write_text(json.dumps(
        {"checkpoint": "checkpoint", "train_log": "train_log.jsonl"}, indent=2))
    print(json.dumps({"step": state.step, "checkpoint": str(out / "checkpoint"), "running": state.running}))


def cmd_evaluate(args):
    from .data.dataset import load_dataset
    from .evaluation import Protocol, evaluate
    from .training import load_bundle
    manifest = load_dataset(_require(args.data, "--data"))
    bundle = load_bundle(args.ckpt)
    proto = Protocol.parse(args.protocol, not args.no_same_view_exclusion)
    if args.clothing != "any":
        proto = Protocol.parse(f"{args.protocol}:{args.clothing}", not args.no_same_view_exclusion)
    rep = evaluate(bundle, manifest, proto, normalize=args.normalize).to_dict()
    text = json.dumps(rep, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)


def cmd_embed(args):
    from .data.dataset import load_dataset
    from .evaluation import embed
    from .training import load_bundle
    manifest = load_dataset(_require(args.data, "--data"))
    table = embed(load_bundle(args.ckpt), manifest, args.split, args.modality, normalize=args.normalize)
    out = _require(args.out, "--out")
    table.save(out)
    print(json.dumps({"out": str(out), "rows": len(table), "dim": int(table.features.shape[1])}))


def cmd_retrieve(args):
    from .evaluation import EmbeddingTable, retrieve
    table = EmbeddingTable.load(args.embeddings)
    if not 0 <= args.query_id < len(table):
        raise ConfigError(f"--query-id {args.query_id} out of range [0, {len(table)})")
    exclude = np.zeros(len(table), dtype=bool)
    exclude[args.query_id] = True
    q = table.features[args.query_id]
    for rank, idx in enumerate(retrieve(q, table, args.k, exclude), start=1):
        dist = float(np.linalg.norm(table.features[idx] - q))
        print(f"{rank}\t{idx}\tidentity={table.identity_id[idx]}\tclothing={table.clothing_id[idx]}"
              f"\tview={table.view_id[idx]}\tdist={dist:.6f}")


def cmd_run(args, baseline=False):
    from .experiment import run_baseline, run_experiment
    cfg = _experiment_config(args)
    summary = run_baseline(cfg) if baseline else run_experiment(cfg)
    print((Path(cfg.out_dir) / "table.md").read_text(), end="")
    return summary


def cmd_report(args):
    from .experiment import report
    text = report(args.runs, args.format)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "embed": cmd_embed,
    "retrieve": cmd_retrieve,
    "run": cmd_run,
    "run-baseline": lambda a: cmd_run(a, baseline=True),
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except CaseForgeError as exc:
        sys.stderr.write(json.dumps({"error": exc.code, "message": exc.message}) + "\n")
        return exc.exit_status
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
