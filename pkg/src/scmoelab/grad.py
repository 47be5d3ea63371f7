"""Reverse-mode gradients, a central finite-difference oracle, the residual
Jacobian-identity check, and a toy SGD trainer.

Analytic gradients come from the tape; the oracle re-evaluates the plain
forward with routing pinned to the base point, so the two routes share no
differentiation code. Entries whose perturbation would flip a routing
decision are flagged and excluded from comparisons (the objective is
genuinely non-differentiable there).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from . import arch, tape
from .arch import ActivationTrace, ForwardResult, ModelConfig, ModelParams, MoEReplay
from .numkit import Rng
from .tape import val

GradientSet = Dict[str, np.ndarray]


@dataclass
class LossSpec:
    kind: str = "mse"              # "mse" (vs target) or "mean" (mean of outputs)
    target: Optional[np.ndarray] = None
    aux_coeff: float = 0.01

    def __post_init__(self):
        if self.kind not in ("mse", "mean"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.kind == "mse" and self.target is None:
            raise ValueError("mse loss needs a target matrix")
        if self.aux_coeff < 0:
            raise ValueError("aux coefficient must be >= 0")


@dataclass
class TrainConfig:
    steps: int = 100
    learning_rate: float = 0.01
    batch_size: int = 8
    seed: int = 0
    aux_coeff: float = 0.01


def compute_loss(cfg: ModelConfig, params: ModelParams, tokens, spec: LossSpec,
                 rng: Optional[Rng] = None, replay: Optional[List[MoEReplay]] = None):
    """Evaluate the training objective; polymorphic over parameter leaves."""
    res = arch.model_forward(cfg, params, tokens, rng=rng, replay=replay)
    if spec.kind == "mse":
        diff = tape.sub(res.output, spec.target)
        n_tokens = val(res.output).shape[0]
        loss = tape.scale(tape.sum_all(tape.square(diff)), 1.0 / n_tokens)
    else:
        loss = tape.mean_all(res.output)
    if spec.aux_coeff and res.aux_losses:
        aux_total = res.aux_losses[0]
        for a in res.aux_losses[1:]:
            aux_total = tape.add(aux_total, a)
        loss = tape.add(loss, tape.scale(aux_total, spec.aux_coeff))
    return loss, res


def backward(cfg: ModelConfig, params: ModelParams, tokens, spec: LossSpec,
             rng: Optional[Rng] = None, replay: Optional[List[MoEReplay]] = None):
    """Exact reverse-mode gradients of the objective w.r.t. every parameter.

    Returns (loss value, gradients, forward result). Top-k index sets and drop
    masks are treated as constants.
    """
    lifted, leaves = arch.lift_params(params)
    loss_node, res = compute_loss(cfg, lifted, tokens, spec, rng=rng, replay=replay)
    loss_node.backward()
    grads = {}
    for name, leaf in leaves.items():
        grads[name] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
    loss = float(np.asarray(val(loss_node)).reshape(()))
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    return loss, grads, res


def _free_routing_matches(cfg: ModelConfig, trace: ActivationTrace,
                          replay: List[MoEReplay]) -> bool:
    """True when unpinned routing at the traced logits reproduces the pinned
    decisions (same index sets per token and same drop flags)."""
    capacity = cfg.capacity()
    for m, r in zip(trace.moe, replay):
        if m.decision_prev is not None:
            free_cur, free_prev = arch.dual_routing(
                m.decision.logits, m.decision_prev.logits, cfg.dgmoe_constraint, capacity)
            pairs = [(free_cur, r.indices, r.dropped),
                     (free_prev, r.indices_prev, r.dropped_prev)]
        else:
            free = arch.standard_routing(m.decision.logits,
                                         r.indices.shape[1], capacity)
            pairs = [(free, r.indices, r.dropped)]
        for free, idx, dropped in pairs:
            if not np.array_equal(np.sort(free.indices, axis=1), np.sort(idx, axis=1)):
                return False
            # align drop flags by expert index before comparing
            order_f = np.argsort(free.indices, axis=1)
            order_p = np.argsort(idx, axis=1)
            df = np.take_along_axis(free.dropped, order_f, axis=1)
            dp = np.take_along_axis(dropped, order_p, axis=1)
            if not np.array_equal(df, dp):
                return False
    return True


def fd_gradient(cfg: ModelConfig, params: ModelParams, tokens, spec: LossSpec,
                eps: float = 1e-5, rng: Optional[Rng] = None,
                replay: Optional[List[MoEReplay]] = None):
    """Central finite differences per scalar parameter, with routing pinned to
    the base point. Returns (gradients, flags); flagged entries saw a routing
    flip at a perturbed point and are excluded from comparisons."""
    if eps <= 0:
        raise ValueError("eps must be > 0")
    if replay is None:
        _, base_res = compute_loss(cfg, params, tokens, spec, rng=rng)
        replay = arch.replay_from_trace(base_res.trace)

    grads: GradientSet = {}
    flags: Dict[str, np.ndarray] = {}
    for name, arr in arch.named_parameters(params):
        g = np.zeros_like(arr)
        fl = np.zeros(arr.shape, dtype=bool)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        ff = fl.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp, res_p = compute_loss(cfg, params, tokens, spec, replay=replay)
            flipped = not _free_routing_matches(cfg, res_p.trace, replay)
            flat[i] = orig - eps
            lm, res_m = compute_loss(cfg, params, tokens, spec, replay=replay)
            flipped = flipped or not _free_routing_matches(cfg, res_m.trace, replay)
            flat[i] = orig
            gf[i] = (float(np.asarray(lp).reshape(())) -
                     float(np.asarray(lm).reshape(()))) / (2.0 * eps)
            ff[i] = flipped
        grads[name] = g
        flags[name] = fl
    return grads, flags


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: Dict[str, float]
    n_flagged: int
    n_entries: int

    def to_json(self) -> str:
        return json.dumps({"max_rel_error": self.max_rel_error,
                           "n_flagged": self.n_flagged,
                           "n_entries": self.n_entries,
                           "per_param": self.per_param}, indent=2, sort_keys=True)


def check_gradients(cfg: ModelConfig, params: ModelParams, tokens, spec: LossSpec,
                    eps: float = 1e-5, rng: Optional[Rng] = None,
                    rel_floor: float = 1e-2) -> GradCheckReport:
    """Analytic vs finite-difference comparison over every parameter entry."""
    _, analytic, res = backward(cfg, params, tokens, spec, rng=rng)
    replay = arch.replay_from_trace(res.trace)
    numeric, flags = fd_gradient(cfg, params, tokens, spec, eps=eps, replay=replay)
    per_param = {}
    worst = 0.0
    n_flagged = n_entries = 0
    for name in analytic:
        a, f, fl = analytic[name], numeric[name], flags[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), rel_floor)
        rel = np.abs(a - f) / denom
        rel[fl] = 0.0
        per_param[name] = float(rel.max()) if rel.size else 0.0
        worst = max(worst, per_param[name])
        n_flagged += int(fl.sum())
        n_entries += fl.size
    return GradCheckReport(max_rel_error=worst, per_param=per_param,
                           n_flagged=n_flagged, n_entries=n_entries)


# ---------------------------------------------------------------------------
# residual Jacobian identity


@dataclass
class ResidualIdentityReport:
    depth: int
    dim: int
    max_identity_deviation: float   # max |(J_total - J_Fsum) - I|
    max_total_deviation: float      # max |J_total - (I + J_Fsum)| (same numbers, kept explicit)


def jacobian_identity_report(sublayers: List[Callable], x0: np.ndarray,
                             fd_eps: float = 1e-6) -> ResidualIdentityReport:
    """Verify J(x_L wrt x_0) == I + J(sum_i F_i(x_i) wrt x_0) numerically.

    `sublayers` are residual increments F_i; each must accept an ndarray or a
    Tensor. J_total comes from forward perturbation (central differences on
    the composed map); J_Fsum from tape backward on the accumulated residual
    increments. The two routes share no differentiation code.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    d = x0.shape[1]

    def run_value(x):
        h = x
        for f in sublayers:
            h = h + val(f(h))
        return h

    # forward-perturbation Jacobian of the full map
    j_total = np.zeros((d, d))
    for a in range(d):
        xp, xm = x0.copy(), x0.copy()
        xp[0, a] += fd_eps
        xm[0, a] -= fd_eps
        j_total[a, :] = (run_value(xp) - run_value(xm))[0] / (2.0 * fd_eps)

    # backward-accumulated Jacobian of sum_i F_i(x_i)
    j_fsum = np.zeros((d, d))
    for b in range(d):
        leaf = tape.Tensor(x0, requires_grad=True)
        h = leaf
        total = None
        for f in sublayers:
            inc = f(h)
            total = inc if total is None else tape.add(total, inc)
            h = tape.add(h, inc)
        sel = np.zeros((d, 1))
        sel[b, 0] = 1.0
        comp = tape.mm(total, sel)
        comp.backward()
        j_fsum[:, b] = leaf.grad[0]

    dev = np.abs((j_total - j_fsum) - np.eye(d)).max()
    return ResidualIdentityReport(depth=len(sublayers), dim=d,
                                  max_identity_deviation=float(dev),
                                  max_total_deviation=float(dev))


def residual_identity_check(depth: int, dim: int, seed: int,
                            fd_eps: float = 1e-6) -> ResidualIdentityReport:
    """Identity check on a stack of random shortcut-MoE block pairs, each pair
    treated as one residual sub-layer."""
    rng = Rng(seed)
    cfg = ModelConfig(n_blocks=2, d_model=dim, d_hidden=dim + 3, n_experts=2,
                      k_routed=1, variant="scmoe", shortcut_pos="pos2",
                      capacity_factor=8.0)
    sublayers = []
    for i in range(depth):
        params = arch.init_params(cfg, rng.spawn(i))

        def make(params):
            pinned: List[MoEReplay] = []

            def f(x):
                replay = pinned[0] if pinned else None
                res = arch.model_forward(cfg, params, x, replay=replay)
                if not pinned:
                    pinned.append(arch.replay_from_trace(res.trace))
                return tape.sub(res.output, x)

            return f

        sublayers.append(make(params))
    x0 = rng.spawn(depth).normal((1, dim)) * 0.5
    # pin every sub-layer's routing at the base point before perturbing
    h = x0
    for f in sublayers:
        h = h + val(f(h))
    return jacobian_identity_report(sublayers, x0, fd_eps=fd_eps)


# ---------------------------------------------------------------------------
# toy trainer


@dataclass
class TrainResult:
    losses: List[float]
    params: ModelParams
    final_trace: ActivationTrace
    traces: List[ActivationTrace] = field(default_factory=list)


def train_toy(cfg: ModelConfig, tc: TrainConfig, task: str = "synthetic-regression",
              trace_every: int = 0,
              step_hook: Optional[Callable[[int, ActivationTrace], None]] = None) -> TrainResult:
    """Plain SGD on a deterministic synthetic task.

    task "copy" regresses the model output onto its own input; task
    "synthetic-regression" onto a fixed random linear map of the input.
    """
    if task not in ("copy", "synthetic-regression"):
        raise ValueError(f"unknown task {task!r}")
    rng = Rng(tc.seed)
    params = arch.init_params(cfg, rng.spawn(0))
    data_rng = rng.spawn(1)
    noise_rng = rng.spawn(2)
    target_map = rng.spawn(3).normal((cfg.d_model, cfg.d_model)) / np.sqrt(cfg.d_model)

    losses: List[float] = []
    traces: List[ActivationTrace] = []
    final_trace = None
    for step in range(tc.steps):
        tokens = data_rng.normal((tc.batch_size, cfg.d_model))
        target = tokens if task == "copy" else tokens @ target_map
        spec = LossSpec(kind="mse", target=target, aux_coeff=tc.aux_coeff)
        try:
            loss, grads, res = backward(cfg, params, tokens, spec,
                                        rng=noise_rng if cfg.noise_enabled else None)
        except FloatingPointError as exc:
            raise FloatingPointError(f"divergence at step {step}: {exc}") from exc
        losses.append(loss)
        final_trace = res.trace
        if trace_every and step % trace_every == 0:
            traces.append(res.trace)
        if step_hook is not None:
            step_hook(step, res.trace)
        for name, arr in arch.named_parameters(params):
            arr -= tc.learning_rate * grads[name]
    return TrainResult(losses=losses, params=params, final_trace=final_trace,
                       traces=traces)


def write_loss_csv(path, losses: List[float]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, l in enumerate(losses):
            w.writerow([i, repr(l)])
