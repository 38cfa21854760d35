"""Command line entry point: ``swarmhead {p1,p2,meta,heatmap,purity}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness

log = logging.getLogger("swarmhead")


def _load(args, problem):
    payload = json.loads(Path(args.config).read_text()) if args.config else {}
    payload.setdefault("problem", problem)
    if payload["problem"] != problem:
        raise SystemExit(f"config problem {payload['problem']!r} does not match subcommand {problem!r}")
    if args.seed is not None:
        payload["seed"] = args.seed
        payload.pop("seeds", None)
    if args.trials is not None:
        payload["trials"] = args.trials
    if args.out is not None:
        payload["out"] = args.out
    return harness.ExperimentConfig.from_json(payload)


def _finish(bundle, config):
    out = bundle.write(config.out)
    for row in bundle.summary:
        print(json.dumps(row, sort_keys=True))
    print(f"wrote {out}")


def cmd_p1(args):
    cfg = _load(args, "P1")
    _finish(harness.run_p1_suite(cfg), cfg)


def cmd_p2(args):
    cfg = _load(args, "P2")
    _finish(harness.run_p2_suite(cfg), cfg)


def cmd_meta(args):
    cfg = _load(args, "meta")
    _finish(harness.run_meta(cfg), cfg)


def cmd_purity(args):
    cfg = _load(args, "purity")
    _finish(harness.compare_purity_baselines(cfg), cfg)


def cmd_heatmap(args):
    written = harness.emit_attention_heatmap(args.run, args.out)
    print(f"wrote {len(written)} heat-map files")


def build_parser():
    p = argparse.ArgumentParser(prog="swarmhead", description="Cluster-head detection experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn, help_ in [
        ("p1", cmd_p1, "single-cluster detection-rate table"),
        ("p2", cmd_p2, "multi-cluster round-loop detection"),
        ("meta", cmd_meta, "meta-train the GRU encoder and save a checkpoint"),
        ("purity", cmd_purity, "K-Means purity: encoder features vs raw windows"),
    ]:
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--seed", type=int, help="first trial seed (overrides config)")
        sp.add_argument("--trials", type=int, help="trials per cell (overrides config)")
        sp.add_argument("--out", help="output directory (overrides config)")
        sp.set_defaults(func=fn)
    hp = sub.add_parser("heatmap", help="attention heat-map CSVs from a P1 run directory")
    hp.add_argument("--run", required=True, help="run directory (or tree) holding attention.json")
    hp.add_argument("--out", help="output directory (default: <run>/heatmap)")
    hp.set_defaults(func=cmd_heatmap)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
