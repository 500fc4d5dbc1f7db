"""Command-line interface: one subcommand per pipeline stage, files under ``--out``.

Layout of the output directory::

    base.ckpt, dense{i}.ckpt        train-singles (+ singles.json gate report)
    single{i}.ckpt                  extract (+ extract.json calibration report)
    merged{j}.ckpt                  merge (+ merge.json)
    router{k}.ckpt, router{k}.jsonl train-routers
    hoe_model.ckpt                  assemble
    sweep.csv, frontier.svg         sweep
    report.json                     report

Each command prints one JSON line on success. On failure it prints one JSON
line ``{"error": <code>, "message": ...}`` to stderr and exits with status 2.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from hoe import persist
from hoe.config import RunConfig, dump_config, load_config
from hoe.errors import CorruptCheckpoint, HoeError, InvalidInput
from hoe.pareto import ParetoPoint, build_report, csv_text
from hoe.policy import PolicyNetwork
from hoe.router import HoeModel, assemble
from hoe.simplex import PreferenceVector
from hoe import pipeline
from hoe.svg import frontier_svg


# --------------------------------------------------------------------------
# checkpoint helpers


def _load_kind(path: Path, kind: str):
    if not path.exists():
        raise InvalidInput(f"missing checkpoint {path}")
    obj, manifest = persist.load_with_manifest(path)
    if manifest["kind"] != kind:
        raise CorruptCheckpoint(f"{path} holds a {manifest['kind']} checkpoint, expected {kind}")
    return obj, manifest


def _dense(out: Path, n: int) -> tuple[PolicyNetwork, list[PolicyNetwork]]:
    base, _ = _load_kind(out / "base.ckpt", "dense")
    nets = [_load_kind(out / f"dense{i}.ckpt", "dense")[0] for i in range(n)]
    return base, nets


def _loras(out: Path, cfg: RunConfig) -> list:
    singles = [_load_kind(out / f"single{i}.ckpt", "lora_expert")[0] for i in range(cfg.objectives)]
    merged = [_load_kind(out / f"merged{j}.ckpt", "lora_expert")[0] for j in range(len(cfg.plan.merged))]
    return singles + merged


def _write_json(path: Path, data) -> None:
    persist.atomic_write(path, (json.dumps(data, sort_keys=True, indent=2) + "\n").encode())


# --------------------------------------------------------------------------
# commands


def cmd_train_singles(cfg: RunConfig, out: Path) -> dict:
    env = pipeline.build_env(cfg)
    base = pipeline.build_base(cfg, env)
    nets, gate = pipeline.train_singles(cfg, env, base)
    # gate before writing anything so a failed run leaves no checkpoints
    pipeline.check_gate(gate)
    persist.save(base, out / "base.ckpt", cfg.seed, {"role": "base"})
    for i, net in enumerate(nets):
        persist.save(net, out / f"dense{i}.ckpt", cfg.seed, {"role": "single_objective", "objective": i})
    _write_json(out / "singles.json", [g.to_dict() for g in gate])
    return {"checkpoints": 1 + len(nets), "gate": [g.to_dict() for g in gate]}


def cmd_extract(cfg: RunConfig, out: Path) -> dict:
    env = pipeline.build_env(cfg)
    base, nets = _dense(out, cfg.objectives)
    experts, report = pipeline.extract_singles(cfg, env, base, nets)
    for e in experts:
        persist.save(e, out / f"{e.id}.ckpt", cfg.seed)
    _write_json(out / "extract.json", report)
    return {"experts": [e.id for e in experts], "rescale": {e.id: e.rescale for e in experts}}


def cmd_merge(cfg: RunConfig, out: Path) -> dict:
    env = pipeline.build_env(cfg)
    base, nets = _dense(out, cfg.objectives)
    experts, report = pipeline.merge_experts(cfg, env, base, nets)
    for e in experts:
        persist.save(e, out / f"{e.id}.ckpt", cfg.seed)
    _write_json(out / "merge.json", report)
    return {"experts": [e.id for e in experts], "rescale": {e.id: e.rescale for e in experts}}


def cmd_train_routers(cfg: RunConfig, out: Path) -> dict:
    env = pipeline.build_env(cfg)
    base, nets = _dense(out, cfg.objectives)
    loras = _loras(out, cfg)
    model = assemble(base, loras)
    z = pipeline.reference_point(cfg, env, nets)
    routers, logs = pipeline.train_routers(cfg, env, model, z)
    for r, log in zip(routers, logs):
        persist.save(r, out / f"{r.id}.ckpt", cfg.seed, {"z_star": [float(x) for x in z]})
        persist.atomic_write(out / f"{r.id}.jsonl", "".join(row.to_json() + "\n" for row in log.rows).encode())
    return {
        "routers": [r.id for r in routers],
        "log_rows": [len(log.rows) for log in logs],
        "lora_checksums": {e.id: e.checksum() for e in loras},
    }


def cmd_assemble(cfg: RunConfig, out: Path) -> dict:
    base, _ = _load_kind(out / "base.ckpt", "dense")
    loras = _loras(out, cfg)
    routers, z = [], None
    for k in range(len(cfg.plan.routers)):
        r, manifest = _load_kind(out / f"router{k}.ckpt", "router_expert")
        routers.append(r)
        z = manifest["metadata"].get("z_star", z)
    model = assemble(base, loras, routers)
    persist.save(model, out / "hoe_model.ckpt", cfg.seed, {"z_star": z} if z is not None else None)
    return {"lora_experts": [e.id for e in loras], "router_experts": [r.id for r in routers]}


def _z_star(cfg: RunConfig, env, manifest: dict) -> np.ndarray:
    z = manifest.get("metadata", {}).get("z_star")
    return np.asarray(z) if z is not None else env.ideal_point() + cfg.omd.z_margin


def cmd_sweep(cfg: RunConfig, out: Path, baselines: Sequence[str] | None = None) -> dict:
    env = pipeline.build_env(cfg)
    model, manifest = _load_kind(out / "hoe_model.ckpt", "hoe_model")
    baselines = list(cfg.eval.baselines if baselines is None else baselines)
    nets: list[PolicyNetwork] = []
    if any(b in ("rs", "mod") for b in baselines):
        _, nets = _dense(out, cfg.objectives)
    policies = pipeline.method_policies(cfg, env, model, model.base, nets, ["hoe", *baselines])
    points = pipeline.paired_sweep(cfg, env, policies)
    z = _z_star(cfg, env, manifest)
    persist.atomic_write(out / "sweep.csv", csv_text(points, z).encode())
    result = {"rows": len(points), "methods": list(policies)}
    if cfg.objectives == 2:
        persist.atomic_write(out / "frontier.svg", frontier_svg(points, "greedy sweep").encode())
        result["svg"] = "frontier.svg"
    return result


def read_sweep_csv(path: Path) -> list[ParetoPoint]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise InvalidInput(f"{path} has no rows")
    n = sum(1 for k in rows[0] if k.startswith("lambda_"))
    return [
        ParetoPoint(
            PreferenceVector(tuple(float(r[f"lambda_{i}"]) for i in range(n))),
            tuple(float(r[f"reward_{i}"]) for i in range(n)),
            int(r["episodes"]),
            r["method"],
            int(r["seed"]),
        )
        for r in rows
    ]


def cmd_report(cfg: RunConfig, out: Path) -> dict:
    path = out / "sweep.csv"
    if not path.exists():
        raise InvalidInput(f"missing {path}; run the sweep command first")
    rep = build_report(read_sweep_csv(path), cfg.to_dict())
    data = {"hypervolume": rep.hypervolume, "dominance": rep.dominance, "reference": list(rep.reference)}
    _write_json(out / "report.json", data)
    return data


def cmd_run_all(cfg: RunConfig, out: Path) -> dict:
    res = {}
    for name, fn in [
        ("train-singles", cmd_train_singles),
        ("extract", cmd_extract),
        ("merge", cmd_merge),
        ("train-routers", cmd_train_routers),
        ("assemble", cmd_assemble),
        ("sweep", cmd_sweep),
        ("report", cmd_report),
    ]:
        res[name] = fn(cfg, out)
    return res


COMMANDS = {
    "train-singles": cmd_train_singles,
    "extract": cmd_extract,
    "merge": cmd_merge,
    "train-routers": cmd_train_routers,
    "assemble": cmd_assemble,
    "sweep": cmd_sweep,
    "report": cmd_report,
    "run-all": cmd_run_all,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hoe", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON run configuration (defaults if omitted)")
    common.add_argument("--seed", type=int, help="override every seed in the configuration")
    common.add_argument("--out", default="hoe-run", help="output directory (default: %(default)s)")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "sweep":
            p.add_argument("--baselines", help="comma-separated subset of rs,mod,morlhf (overrides the config)")
    sub.add_parser("show-config", parents=[common], help="print the effective configuration")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        out = Path(args.out)
        if args.command == "show-config":
            sys.stdout.write(dump_config(cfg))
            return 0
        if args.command == "sweep" and args.baselines is not None:
            names = [b for b in args.baselines.split(",") if b]
            cfg = replace(cfg, eval=replace(cfg.eval, baselines=tuple(names)))
            result = cmd_sweep(cfg, out)
        else:
            result = COMMANDS[args.command](cfg, out)
    except HoeError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return 2
    except OSError as exc:
        print(json.dumps({"error": "IOError", "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # still emit a machine-readable line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    print(json.dumps({"command": args.command, "ok": True, **result}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
