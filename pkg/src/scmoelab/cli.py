"""Command-line entry point.

Subcommands: train, gradcheck, simulate, schedule, offload, analyze. Every
command reads a JSON experiment config (schema-validated, unknown keys
rejected), derives all randomness from one top-level seed, and writes its
reports atomically (temp file + rename) so reruns are byte-stable.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from . import analysis, arch, distsim, grad, modelio, offload, sched
from .arch import ModelConfig
from .distsim import HardwareProfile, StageCosts, StrategySpec
from .grad import LossSpec, TrainConfig
from .numkit import Rng


class CliError(Exception):
    pass


def _atomic_write(path: Path, writer):
    """Call writer(tmp_path), then rename the result into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    writer(tmp)
    os.replace(tmp, path)


def _atomic_text(path: Path, text: str):
    def writer(tmp):
        with open(tmp, "w") as fh:
            fh.write(text)
            if not text.endswith("\n"):
                fh.write("\n")
    _atomic_write(path, writer)


def _atomic_trace(path: Path, trace):
    """Trace containers come with a JSON sidecar; rename both into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    modelio.save_trace(tmp, trace)
    os.replace(str(tmp) + ".json", str(path) + ".json")
    os.replace(tmp, path)


def _check_keys(d: dict, known, what: str):
    unknown = set(d) - set(known)
    if unknown:
        raise CliError(f"unknown {what} keys: {sorted(unknown)}")


def _from_dict(cls, d: dict, what: str):
    _check_keys(d, {f.name for f in dataclasses.fields(cls)}, what)
    return cls(**d)


_CONFIG_KEYS = ("model", "profile", "strategies", "costs", "measure_kernels",
                "calibrate_comm_fraction", "train", "gradcheck", "offload",
                "seed")

_COST_KEYS = ("d_model", "d_hidden", "n_tokens", "overhead_fraction",
              "bytes_per_value")


class ExperimentConfig:
    """Validated view over an experiment JSON document."""

    def __init__(self, doc: dict):
        if not isinstance(doc, dict):
            raise CliError("config root must be a JSON object")
        _check_keys(doc, _CONFIG_KEYS, "config")
        self.doc = doc
        self.seed = int(doc.get("seed", 0))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls(json.load(fh))

    def model(self) -> ModelConfig:
        if "model" not in self.doc:
            raise CliError("config is missing the 'model' section")
        return modelio.config_from_dict(self.doc["model"])

    def profile(self) -> HardwareProfile:
        return _from_dict(HardwareProfile, self.doc.get("profile", {}), "profile")

    def strategies(self):
        specs = self.doc.get("strategies")
        if not specs:
            raise CliError("config is missing the 'strategies' list")
        return [_from_dict(StrategySpec, s, "strategy") for s in specs]

    def costs(self, prof: HardwareProfile) -> StageCosts:
        section = dict(self.doc.get("costs", {}))
        _check_keys(section, _COST_KEYS, "costs")
        d = section.pop("d_model", 64)
        h = section.pop("d_hidden", 128)
        t = section.pop("n_tokens", 32)
        if self.doc.get("measure_kernels"):
            return distsim.measure_toy_costs(d, h, t, prof=prof, **section)
        return distsim.derive_costs(d, h, t, prof, **section)

    def train(self) -> Dict:
        section = dict(self.doc.get("train", {}))
        _check_keys(section, ("steps", "learning_rate", "batch_size", "task",
                              "aux_coeff"), "train")
        return section

    def gradcheck(self) -> Dict:
        section = dict(self.doc.get("gradcheck", {}))
        _check_keys(section, ("n_tokens", "eps", "loss"), "gradcheck")
        return section

    def offload_bytes(self) -> offload.ModelBytes:
        section = self.doc.get("offload", "gpt2_medium_like")
        if section == "gpt2_medium_like":
            return offload.gpt2_medium_like_bytes()
        return _from_dict(offload.ModelBytes, section, "offload")


def cmd_train(cfg: ExperimentConfig, out: Path, fmt: str) -> int:
    section = cfg.train()
    task = section.pop("task", "synthetic-regression")
    tc = TrainConfig(seed=cfg.seed, **section)
    result = grad.train_toy(cfg.model(), tc, task=task)
    _atomic_write(out / "loss.csv", lambda p: grad.write_loss_csv(p, result.losses))
    _atomic_trace(out / "final_trace.bin", result.final_trace)
    _atomic_text(out / "train.json", json.dumps(
        {"task": task, "steps": tc.steps, "seed": tc.seed,
         "initial_loss": result.losses[0], "final_loss": result.losses[-1]},
        indent=2, sort_keys=True))
    return 0


def cmd_gradcheck(cfg: ExperimentConfig, out: Path, fmt: str) -> int:
    section = cfg.gradcheck()
    model = cfg.model()
    t = int(section.get("n_tokens", 5))
    eps = float(section.get("eps", 1e-5))
    rng = Rng(cfg.seed)
    params = arch.init_params(model, rng.spawn(0))
    tokens = rng.spawn(1).normal((t, model.d_model))
    kind = section.get("loss", "mean")
    target = rng.spawn(2).normal((t, model.d_model)) if kind == "mse" else None
    spec = LossSpec(kind=kind, target=target)
    report = grad.check_gradients(model, params, tokens, spec, eps=eps,
                                  rng=rng.spawn(3) if model.noise_enabled else None)
    _atomic_text(out / "gradcheck.json", report.to_json())
    print(f"max relative error {report.max_rel_error:.3e} "
          f"({report.n_flagged}/{report.n_entries} entries flagged)")
    return 0


def cmd_simulate(cfg: ExperimentConfig, out: Path, fmt: str,
                 only: Optional[str] = None) -> int:
    prof = cfg.profile()
    costs = cfg.costs(prof)
    target = cfg.doc.get("calibrate_comm_fraction")
    if target is not None:
        prof = distsim.calibrate_profile(float(target), costs, base=prof)
    strategies = cfg.strategies()
    if only is not None:
        strategies = [s for s in strategies if s.label == only]
        if not strategies:
            raise CliError(f"no configured strategy labeled {only!r}")
    results = []
    for strat in strategies:
        res, tl = distsim.simulate_strategy(strat, costs, prof)
        results.append(res)
        _atomic_write(out / f"timeline_{strat.label}.csv", tl.write_csv)
    report = distsim.ComparisonReport(results=results)
    if fmt == "csv":
        _atomic_write(out / "strategies.csv", report.write_csv)
    _atomic_text(out / "strategies.json", report.to_json())
    return 0


def cmd_schedule(cost_json: str) -> int:
    text = cost_json
    if os.path.exists(cost_json):
        with open(cost_json) as fh:
            text = fh.read()
    choice = sched.choose_slot(sched.CostVector.from_json(text))
    print(choice.to_json())
    return 0


def cmd_offload(cfg: ExperimentConfig, out: Path, fmt: str) -> int:
    model = cfg.model()
    prof = cfg.profile()
    costs = cfg.costs(prof)
    plan = offload.plan_offload(model, cfg.offload_bytes())
    modes = ["GpuOnly", "OffloadBlocking"]
    if model.variant == "scmoe":
        modes.append("OffloadAsync")
    reports = [offload.simulate_decode(plan, costs, prof, m) for m in modes]
    _atomic_text(out / "offload.json", json.dumps(
        {"memory_reduction": plan.memory_reduction(),
         "reports": [json.loads(r.to_json()) for r in reports]},
        indent=2, sort_keys=True))
    _atomic_write(out / "offload.csv",
                  lambda p: offload.write_latency_csv(p, reports))
    return 0


def cmd_analyze(trace_path: str, out: Path, fmt: str) -> int:
    trace = modelio.load_trace(trace_path)
    sim = analysis.cosine_similarity_matrix(trace)
    _atomic_write(out / "similarity.csv", sim.write_csv)
    report = analysis.gating_behavior_report(trace)
    _atomic_write(out / "gating.csv", report.write_csv)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scmoelab",
                                description="mixture-of-experts laboratory: "
                                "exact small-scale models plus a scheduling "
                                "and communication simulator")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="experiment JSON path")
        sp.add_argument("--seed", type=int, default=None, help="override config seed")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--format", choices=("json", "csv"), default="json")

    common(sub.add_parser("train", help="toy SGD run, emits loss CSV and trace"))
    common(sub.add_parser("gradcheck", help="analytic vs finite-difference gradients"))
    sim = sub.add_parser("simulate", help="strategy timelines and comparison")
    common(sim)
    sim.add_argument("--strategy", default=None, help="simulate one strategy label")
    s = sub.add_parser("schedule", help="choose the expert-compute slot")
    s.add_argument("costs", help="cost vector JSON (inline or file path)")
    common(sub.add_parser("offload", help="expert-offload memory and latency"))
    a = sub.add_parser("analyze", help="similarity and gating reports from a trace")
    a.add_argument("trace", help="trace container path")
    common(a, config=False)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "schedule":
            return cmd_schedule(args.costs)
        out = Path(args.out)
        fmt = args.format
        if args.command == "analyze":
            return cmd_analyze(args.trace, out, fmt)
        cfg = ExperimentConfig.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.command == "train":
            return cmd_train(cfg, out, fmt)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, out, fmt)
        if args.command == "simulate":
            return cmd_simulate(cfg, out, fmt, only=args.strategy)
        if args.command == "offload":
            return cmd_offload(cfg, out, fmt)
        raise CliError(f"unknown command {args.command!r}")
    except Exception as exc:  # noqa: BLE001 - single reporting point
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
