"""MoE architectures and block wiring.

Variants: standard top-k, shared-expert, shortcut-connected MoE (routed
experts fed from a preceding-layer representation at one of three positions),
dual-gating MoE (two top-1 gatings with a distinct-expert constraint), and
the three output-combination modes (direct add, CG-1 sigmoid, CG-2 softmax).

The forward is written against the polymorphic ops in tape.py: parameter
leaves may be plain ndarrays (pure evaluation) or Tensor nodes (gradient
tracking). Routing index sets and drop masks are always constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Union

import numpy as np

from . import gating, numkit, tape
from .gating import CapacityConfig, GateDecision, GateParams
from .numkit import Rng
from .tape import val

VARIANTS = ("standard", "shared", "scmoe", "dgmoe")
POSITIONS = ("pos1", "pos2", "pos3")
COMBINE_MODES = ("direct_add", "cg1", "cg2")
FREQUENCIES = ("every-second-block", "every-block")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration and parameter containers


@dataclass
class ModelConfig:
    n_blocks: int
    d_model: int
    d_hidden: int
    n_experts: int
    k_routed: int = 1
    moe_frequency: str = "every-second-block"
    variant: str = "standard"
    shortcut_pos: Optional[str] = None
    combine_mode: str = "direct_add"
    capacity_factor: float = 2.0
    noise_enabled: bool = False
    first_layer_pos1: bool = False
    dgmoe_constraint: bool = True
    pre_layernorm: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.moe_frequency not in FREQUENCIES:
            raise ConfigError(f"unknown moe_frequency {self.moe_frequency!r}")
        if self.combine_mode not in COMBINE_MODES:
            raise ConfigError(f"unknown combine_mode {self.combine_mode!r}")
        if self.moe_frequency == "every-second-block" and self.n_blocks % 2:
            raise ConfigError("every-second-block placement needs an even block count")
        needs_pos = self.variant in ("scmoe", "dgmoe")
        if needs_pos and self.shortcut_pos is None:
            raise ConfigError(f"variant {self.variant!r} needs shortcut_pos")
        if not needs_pos and self.shortcut_pos is not None:
            raise ConfigError(f"variant {self.variant!r} takes no shortcut_pos")
        if self.shortcut_pos is not None and self.shortcut_pos not in POSITIONS:
            raise ConfigError(f"unknown shortcut_pos {self.shortcut_pos!r}")
        if self.variant == "scmoe" and self.moe_frequency == "every-block" \
                and self.shortcut_pos != "pos1":
            raise ConfigError("every-block shortcut placement supports pos1 only")
        if self.variant == "dgmoe":
            if self.n_experts < 2:
                raise ConfigError("dual gating needs at least 2 experts")
            if self.moe_frequency != "every-second-block":
                raise ConfigError("dual gating is defined on block pairs only")
        if self.variant in ("standard", "dgmoe") and self.combine_mode != "direct_add":
            raise ConfigError(f"variant {self.variant!r} has no shared/routed combination")
        if not 1 <= self.k_routed <= self.n_experts:
            raise ConfigError(f"k_routed={self.k_routed} out of range for N={self.n_experts}")
        if self.capacity_factor <= 0:
            raise ConfigError("capacity_factor must be > 0")

    @property
    def has_shared_expert(self) -> bool:
        return self.variant in ("shared", "scmoe")

    def capacity(self) -> CapacityConfig:
        return CapacityConfig(capacity_factor=self.capacity_factor)


@dataclass
class ExpertParams:
    w1: np.ndarray  # (d, h)
    b1: np.ndarray  # (1, h)
    w2: np.ndarray  # (h, d)
    b2: np.ndarray  # (1, d)


@dataclass
class CombineParams:
    mode: str = "direct_add"
    w_cg: Optional[np.ndarray] = None  # (1, d) for cg1, (2, d) for cg2

    def __post_init__(self):
        if self.mode not in COMBINE_MODES:
            raise ConfigError(f"unknown combine mode {self.mode!r}")
        if self.mode == "direct_add":
            if self.w_cg is not None:
                raise ConfigError("direct_add takes no coefficient weights")
        else:
            rows = 1 if self.mode == "cg1" else 2
            if self.w_cg is None or val(self.w_cg).shape[0] != rows:
                raise ConfigError(f"{self.mode} needs a ({rows}, d) coefficient matrix")


@dataclass
class MoELayer:
    variant: str
    experts: List[ExpertParams]
    gate: GateParams
    combine: CombineParams
    shared: Optional[ExpertParams] = None
    shortcut_pos: Optional[str] = None

    def __post_init__(self):
        wants_shared = self.variant in ("shared", "scmoe")
        if wants_shared != (self.shared is not None):
            raise ConfigError("shared expert present iff variant is shared/scmoe")


@dataclass
class AttentionParams:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray


@dataclass
class BlockParams:
    attn: AttentionParams
    feed: Union[ExpertParams, MoELayer]


@dataclass
class ModelParams:
    blocks: List[BlockParams]


# ---------------------------------------------------------------------------
# initialization and parameter naming


def _init_expert(rng: Rng, d: int, h: int, scale: float) -> ExpertParams:
    return ExpertParams(
        w1=rng.normal((d, h)) * scale,
        b1=np.zeros((1, h)),
        w2=rng.normal((h, d)) * scale,
        b2=np.zeros((1, d)),
    )


def init_params(cfg: ModelConfig, rng: Rng) -> ModelParams:
    d, h = cfg.d_model, cfg.d_hidden
    scale = 1.0 / np.sqrt(d)
    blocks = []
    for i in range(cfg.n_blocks):
        attn = AttentionParams(*(rng.normal((d, d)) * scale for _ in range(4)))
        if _is_moe_block(cfg, i):
            experts = [_init_expert(rng, d, h, scale) for _ in range(cfg.n_experts)]
            shared = _init_expert(rng, d, h, scale) if cfg.has_shared_expert else None
            k = 1 if cfg.variant == "dgmoe" else cfg.k_routed
            gate = GateParams(w_gate=rng.normal((d, cfg.n_experts)) * scale,
                              w_noise=rng.normal((d, cfg.n_experts)) * scale,
                              k=k, noise_enabled=cfg.noise_enabled)
            if cfg.combine_mode == "direct_add":
                comb = CombineParams("direct_add")
            else:
                rows = 1 if cfg.combine_mode == "cg1" else 2
                comb = CombineParams(cfg.combine_mode, w_cg=rng.normal((rows, d)) * scale)
            feed = MoELayer(variant=cfg.variant, experts=experts, gate=gate,
                            combine=comb, shared=shared, shortcut_pos=cfg.shortcut_pos)
        else:
            feed = _init_expert(rng, d, h, scale)
        blocks.append(BlockParams(attn=attn, feed=feed))
    return ModelParams(blocks=blocks)


def _is_moe_block(cfg: ModelConfig, i: int) -> bool:
    if cfg.moe_frequency == "every-block":
        return True
    return i % 2 == 1  # second block of each pair


def _expert_items(prefix, e):
    return [(f"{prefix}.w1", e.w1), (f"{prefix}.b1", e.b1),
            (f"{prefix}.w2", e.w2), (f"{prefix}.b2", e.b2)]


def named_parameters(params: ModelParams):
    """Flat (name, array) view of every trainable matrix, in a fixed order."""
    items = []
    for i, blk in enumerate(params.blocks):
        p = f"block{i}"
        a = blk.attn
        items += [(f"{p}.attn.w_q", a.w_q), (f"{p}.attn.w_k", a.w_k),
                  (f"{p}.attn.w_v", a.w_v), (f"{p}.attn.w_o", a.w_o)]
        feed = blk.feed
        if isinstance(feed, MoELayer):
            for e_idx, e in enumerate(feed.experts):
                items += _expert_items(f"{p}.moe.expert{e_idx}", e)
            if feed.shared is not None:
                items += _expert_items(f"{p}.moe.shared", feed.shared)
            items += [(f"{p}.moe.gate.w_gate", feed.gate.w_gate),
                      (f"{p}.moe.gate.w_noise", feed.gate.w_noise)]
            if feed.combine.w_cg is not None:
                items.append((f"{p}.moe.cg.w", feed.combine.w_cg))
        else:
            items += _expert_items(f"{p}.mlp", feed)
    return items


def lift_params(params: ModelParams):
    """Copy the parameter tree with Tensor leaves; returns (tree, name->Tensor)."""
    leaves = {}

    def lift_expert(prefix, e):
        t = ExpertParams(*(tape.Tensor(x, requires_grad=True)
                           for x in (e.w1, e.b1, e.w2, e.b2)))
        for name, tensor in zip(("w1", "b1", "w2", "b2"), (t.w1, t.b1, t.w2, t.b2)):
            leaves[f"{prefix}.{name}"] = tensor
        return t

    blocks = []
    for i, blk in enumerate(params.blocks):
        p = f"block{i}"
        attn_t = []
        for name, x in (("w_q", blk.attn.w_q), ("w_k", blk.attn.w_k),
                        ("w_v", blk.attn.w_v), ("w_o", blk.attn.w_o)):
            t = tape.Tensor(x, requires_grad=True)
            leaves[f"{p}.attn.{name}"] = t
            attn_t.append(t)
        attn = AttentionParams(*attn_t)
        feed = blk.feed
        if isinstance(feed, MoELayer):
            experts = [lift_expert(f"{p}.moe.expert{j}", e) for j, e in enumerate(feed.experts)]
            shared = lift_expert(f"{p}.moe.shared", feed.shared) if feed.shared is not None else None
            wg = tape.Tensor(feed.gate.w_gate, requires_grad=True)
            wn = tape.Tensor(feed.gate.w_noise, requires_grad=True)
            leaves[f"{p}.moe.gate.w_gate"] = wg
            leaves[f"{p}.moe.gate.w_noise"] = wn
            gate = GateParams.__new__(GateParams)
            gate.w_gate, gate.w_noise = wg, wn
            gate.k, gate.noise_enabled = feed.gate.k, feed.gate.noise_enabled
            if feed.combine.w_cg is not None:
                wcg = tape.Tensor(feed.combine.w_cg, requires_grad=True)
                leaves[f"{p}.moe.cg.w"] = wcg
                comb = CombineParams.__new__(CombineParams)
                comb.mode, comb.w_cg = feed.combine.mode, wcg
            else:
                comb = feed.combine
            lifted = MoELayer.__new__(MoELayer)
            lifted.variant, lifted.experts, lifted.gate = feed.variant, experts, gate
            lifted.combine, lifted.shared, lifted.shortcut_pos = comb, shared, feed.shortcut_pos
            blocks.append(BlockParams(attn=attn, feed=lifted))
        else:
            blocks.append(BlockParams(attn=attn, feed=lift_expert(f"{p}.mlp", feed)))
    return ModelParams(blocks=blocks), leaves


# ---------------------------------------------------------------------------
# traces and replay


@dataclass
class BlockTrace:
    h_attn: np.ndarray  # post-attention representation of this block
    h_feed: np.ndarray  # post-feed (MLP or MoE sub-layer) output


@dataclass
class MoETrace:
    block_index: int
    routed_input: np.ndarray      # representation fed to the routed experts
    current_input: np.ndarray     # the MoE module's current-layer input
    preceding_repr: np.ndarray    # preceding-layer post-attention representation
    decision: GateDecision
    decision_prev: Optional[GateDecision]  # second (preceding) gating, dual-gating only
    logits_on_preceding: np.ndarray  # noise-free gate logits on preceding_repr
    logits_on_current: np.ndarray    # noise-free gate logits on current_input
    aux_loss: float


@dataclass
class ActivationTrace:
    tokens: np.ndarray
    blocks: List[BlockTrace] = field(default_factory=list)
    moe: List[MoETrace] = field(default_factory=list)

    def taps(self):
        """Labeled representation taps: model input, then per block the
        post-attention ("1A", "2A", ...) and post-feed ("1M", ...) outputs."""
        labels, arrays = ["In"], [self.tokens]
        for i, b in enumerate(self.blocks):
            labels += [f"{i + 1}A", f"{i + 1}M"]
            arrays += [b.h_attn, b.h_feed]
        return labels, arrays


@dataclass
class MoEReplay:
    """Recorded noise draws and pinned routing decisions for one MoE layer."""
    eps: Optional[np.ndarray] = None
    indices: Optional[np.ndarray] = None
    dropped: Optional[np.ndarray] = None
    eps_prev: Optional[np.ndarray] = None
    indices_prev: Optional[np.ndarray] = None
    dropped_prev: Optional[np.ndarray] = None


def replay_from_trace(trace: ActivationTrace) -> List[MoEReplay]:
    out = []
    for m in trace.moe:
        r = MoEReplay(eps=m.decision.eps, indices=m.decision.indices,
                      dropped=m.decision.dropped)
        if m.decision_prev is not None:
            r.eps_prev = m.decision_prev.eps
            r.indices_prev = m.decision_prev.indices
            r.dropped_prev = m.decision_prev.dropped
        out.append(r)
    return out


@dataclass
class ForwardResult:
    output: object                 # ndarray or Tensor (T, d)
    trace: ActivationTrace
    aux_losses: List[object]       # one scalar per MoE layer (ndarray or Tensor)


# ---------------------------------------------------------------------------
# sub-layer forwards (polymorphic over ndarray / Tensor leaves)


def expert_forward(x, e: ExpertParams):
    """Two-layer feed-forward: gelu(x.W1 + b1).W2 + b2."""
    return tape.add(tape.mm(tape.gelu(tape.add(tape.mm(x, e.w1), e.b1)), e.w2), e.b2)


def attention_forward(x, a: AttentionParams, d_model: int):
    """Single-head scaled dot-product attention (no masking, no heads)."""
    q, k, v = tape.mm(x, a.w_q), tape.mm(x, a.w_k), tape.mm(x, a.w_v)
    scores = tape.scale(tape.mm(q, tape.transpose(k)), 1.0 / np.sqrt(d_model))
    return tape.mm(tape.mm(tape.row_softmax(scores), v), a.w_o)


def layer_norm(x):
    """Parameter-free row layer normalization."""
    xv = val(x)
    mu = xv.mean(axis=1, keepdims=True)
    var = xv.var(axis=1, keepdims=True)
    s = np.sqrt(var + 1e-6)
    y = (xv - mu) / s
    if not isinstance(x, tape.Tensor):
        return y
    n = xv.shape[1]

    def vjp(g):
        gm = g.mean(axis=1, keepdims=True)
        gy = (g * y).mean(axis=1, keepdims=True)
        return ((g - gm - y * gy) / s,)

    return tape.Tensor(y, parents=(x,), vjp=vjp)


def combine(se_out, routed_out, x, c: CombineParams):
    """Merge shared and routed outputs; x is the MoE module's current input."""
    if c.mode == "direct_add":
        return tape.add(se_out, routed_out)
    logits = tape.mm(x, tape.transpose(c.w_cg))  # (T, 1) or (T, 2)
    if c.mode == "cg1":
        return tape.add(tape.mul(tape.sigmoid(logits), se_out), routed_out)
    coef = tape.row_softmax(logits)  # (T, 2), rows sum to 1
    sel0 = np.array([[1.0], [0.0]])
    sel1 = np.array([[0.0], [1.0]])
    c0 = tape.mm(coef, sel0)
    c1 = tape.mm(coef, sel1)
    return tape.add(tape.mul(c0, se_out), tape.mul(c1, routed_out))


def _decision_from_indices(h_val, indices, dropped, eps) -> GateDecision:
    t = h_val.shape[0]
    masked = np.full_like(h_val, numkit.NEG_INF)
    rows = np.arange(t)[:, None]
    masked[rows, indices] = h_val[rows, indices]
    weights = numkit.row_softmax(masked)[rows, indices]
    return GateDecision(logits=h_val, indices=indices.copy(), weights=weights,
                        dropped=dropped.copy(), eps=eps)


def _gate_logits_node(x_src, gate: GateParams, rng, eps):
    """Differentiable gate logits; returns (node, eps_used)."""
    clean = tape.mm(x_src, gate.w_gate)
    if not gate.noise_enabled:
        return clean, None
    if eps is None:
        if rng is None:
            raise ValueError("noise enabled but neither rng nor recorded draws given")
        eps = rng.normal(val(clean).shape)
    noise = tape.mul(eps, tape.softplus(tape.mm(x_src, gate.w_noise)))
    return tape.add(clean, noise), eps


def _routed_sum(x_src, experts, weight_matrix):
    """Sum_i w_col_i * E_i(x_src), with w the (T, N) effective weight matrix."""
    n = len(experts)
    out = None
    wv = val(weight_matrix)
    for i, e in enumerate(experts):
        if not isinstance(weight_matrix, tape.Tensor) and not wv[:, i].any():
            continue  # pure-value fast path: expert receives nothing
        sel = np.zeros((n, 1))
        sel[i, 0] = 1.0
        w_col = tape.mm(weight_matrix, sel)
        term = tape.mul(w_col, expert_forward(x_src, e))
        out = term if out is None else tape.add(out, term)
    if out is None:
        out = np.zeros_like(val(x_src))
    return out


def _aux_loss_node(full_probs, dec: GateDecision, n_experts: int):
    counts = np.bincount(dec.indices.ravel(), minlength=n_experts).astype(np.float64)
    f_col = (counts / (dec.n_tokens * dec.k)).reshape(n_experts, 1)
    return tape.scale(tape.mm(tape.mean_rows(full_probs), f_col), float(n_experts))


def standard_routing(h_val: np.ndarray, k: int, capacity: CapacityConfig) -> GateDecision:
    dec = gating.select_topk(h_val, k)
    return gating.apply_capacity(dec, capacity, h_val.shape[1], h_val.shape[0])


def dual_routing(h_cur: np.ndarray, h_prev: np.ndarray, constraint: bool,
                 capacity: CapacityConfig):
    """Routing decisions of the dual top-1 gating, returned as (cur, prev)."""
    n, t = h_prev.shape[1], h_prev.shape[0]
    dec_prev = gating.select_topk(h_prev, 1)
    dec_prev = gating.apply_capacity(dec_prev, capacity, n, t)
    top2 = gating.topk_indices(h_cur, 2)
    idx = top2[:, :1].copy()
    if constraint:
        clash = idx[:, 0] == dec_prev.indices[:, 0]
        idx[clash, 0] = top2[clash, 1]
    dec_cur = _decision_from_indices(h_cur, idx, np.zeros((t, 1), dtype=bool), None)
    dec_cur = gating.apply_capacity(dec_cur, capacity, n, t)
    return dec_cur, dec_prev


def routed_moe(x_src, layer: MoELayer, k: int, capacity: CapacityConfig,
               rng=None, eps=None, pinned_indices=None, pinned_dropped=None):
    """Top-k routed expert mixture on x_src.

    Returns (output, decision, aux_loss). When pinned indices/drop flags are
    given, routing is replayed as constants while weights stay differentiable
    functions of the (possibly perturbed) logits.
    """
    h_node, eps_used = _gate_logits_node(x_src, layer.gate, rng, eps)
    h_val = val(h_node)
    n = h_val.shape[1]
    if pinned_indices is not None:
        if pinned_dropped is None:
            pinned_dropped = np.zeros(pinned_indices.shape, dtype=bool)
        dec = _decision_from_indices(h_val, pinned_indices, pinned_dropped, eps_used)
    else:
        dec = standard_routing(h_val, k, capacity)
        dec.eps = eps_used
    probs = tape.masked_row_softmax(h_node, dec.support_mask())
    weights_used = tape.mul(probs, dec.keep_mask())
    out = _routed_sum(x_src, layer.experts, weights_used)
    full = tape.masked_row_softmax(h_node, np.ones_like(h_val, dtype=bool))
    aux = _aux_loss_node(full, dec, n)
    return out, dec, aux


def moe_standard(x, layer: MoELayer, capacity: CapacityConfig, k: int,
                 rng=None, replay: Optional[MoEReplay] = None):
    r = replay or MoEReplay()
    return routed_moe(x, layer, k, capacity, rng=rng, eps=r.eps,
                      pinned_indices=r.indices, pinned_dropped=r.dropped)


def moe_shared(x, layer: MoELayer, capacity: CapacityConfig, k: int,
               rng=None, replay: Optional[MoEReplay] = None, routed_src=None):
    """Shared-expert MoE: combine(SE(x), routed(src)). src defaults to x."""
    src = x if routed_src is None else routed_src
    r = replay or MoEReplay()
    routed, dec, aux = routed_moe(src, layer, k, capacity, rng=rng, eps=r.eps,
                                  pinned_indices=r.indices, pinned_dropped=r.dropped)
    se = expert_forward(x, layer.shared)
    return combine(se, routed, x, layer.combine), dec, aux


def moe_dual_gating(x_cur, x_prev, layer: MoELayer, capacity: CapacityConfig,
                    constraint: bool, rng=None, replay: Optional[MoEReplay] = None):
    """Two top-1 gatings: one over the preceding-layer representation, one over
    the current one. With the constraint on, a token whose current top-1 equals
    its preceding top-1 activates the current-layer runner-up instead."""
    r = replay or MoEReplay()
    h_prev, eps_prev = _gate_logits_node(x_prev, layer.gate, rng, r.eps_prev)
    h_cur, eps_cur = _gate_logits_node(x_cur, layer.gate, rng, r.eps)
    hp, hc = val(h_prev), val(h_cur)
    n, t = hp.shape[1], hp.shape[0]

    if r.indices_prev is not None and r.indices is not None:
        dec_prev = _decision_from_indices(hp, r.indices_prev, r.dropped_prev, eps_prev)
        dec_cur = _decision_from_indices(hc, r.indices, r.dropped, eps_cur)
    else:
        dec_cur, dec_prev = dual_routing(hc, hp, constraint, capacity)
        dec_cur.eps, dec_prev.eps = eps_cur, eps_prev

    w_prev = tape.mul(tape.masked_row_softmax(h_prev, dec_prev.support_mask()),
                      dec_prev.keep_mask())
    w_cur = tape.mul(tape.masked_row_softmax(h_cur, dec_cur.support_mask()),
                     dec_cur.keep_mask())
    out = tape.add(_routed_sum(x_cur, layer.experts, w_cur),
                   _routed_sum(x_prev, layer.experts, w_prev))
    full_cur = tape.masked_row_softmax(h_cur, np.ones_like(hc, dtype=bool))
    aux = _aux_loss_node(full_cur, dec_cur, n)
    return out, dec_cur, dec_prev, aux


# ---------------------------------------------------------------------------
# full-model forward


def _backbone(h, blk: BlockParams, cfg: ModelConfig):
    x = layer_norm(h) if cfg.pre_layernorm else h
    return tape.add(h, attention_forward(x, blk.attn, cfg.d_model))


def _feed_input(h, cfg: ModelConfig):
    return layer_norm(h) if cfg.pre_layernorm else h


def _noise_free_logits(x, gate: GateParams) -> np.ndarray:
    return val(x) @ val(gate.w_gate)


def model_forward(cfg: ModelConfig, params: ModelParams, tokens,
                  rng: Optional[Rng] = None,
                  replay: Optional[List[MoEReplay]] = None) -> ForwardResult:
    """Full L-block forward; works on ndarray or Tensor parameter leaves.

    `replay` pins noise draws and routing decisions per MoE layer (in order),
    which the gradient checker uses to keep the objective smooth.
    """
    tokens_v = numkit.as_matrix(val(tokens))
    if not isinstance(tokens, tape.Tensor):
        tokens = tokens_v
    if tokens_v.shape[1] != cfg.d_model:
        raise numkit.ShapeError(f"tokens have width {tokens_v.shape[1]}, expected {cfg.d_model}")
    if len(params.blocks) != cfg.n_blocks:
        raise ConfigError("parameter tree does not match configured block count")
    trace = ActivationTrace(tokens=tokens_v.copy())
    aux_terms: List[object] = []
    capacity = cfg.capacity()
    moe_counter = 0

    def layer_replay():
        nonlocal moe_counter
        r = replay[moe_counter] if replay is not None else MoEReplay()
        moe_counter += 1
        return r

    h = tokens
    if cfg.moe_frequency == "every-second-block":
        for pair in range(cfg.n_blocks // 2):
            prev_blk = params.blocks[2 * pair]
            cur_blk = params.blocks[2 * pair + 1]
            layer: MoELayer = cur_blk.feed
            h_in = h
            h_mh_prev = _backbone(h_in, prev_blk, cfg)
            h_mlp_prev = tape.add(h_mh_prev,
                                  expert_forward(_feed_input(h_mh_prev, cfg), prev_blk.feed))
            h_mh_cur = _backbone(h_mlp_prev, cur_blk, cfg)
            x_cur = _feed_input(h_mh_cur, cfg)
            r = layer_replay()

            pos = cfg.shortcut_pos
            if cfg.variant == "scmoe" and cfg.first_layer_pos1 and pair == 0:
                pos = "pos1"
            if cfg.variant == "scmoe":
                src = {"pos1": h_mlp_prev, "pos2": h_mh_prev, "pos3": h_in}[pos]
                feed_out, dec, aux = moe_shared(x_cur, layer, capacity, cfg.k_routed,
                                                rng=rng, replay=r, routed_src=src)
                dec_prev = None
            elif cfg.variant == "shared":
                src = x_cur
                feed_out, dec, aux = moe_shared(x_cur, layer, capacity, cfg.k_routed,
                                                rng=rng, replay=r)
                dec_prev = None
            elif cfg.variant == "dgmoe":
                src = h_mh_prev
                feed_out, dec, dec_prev, aux = moe_dual_gating(
                    x_cur, src, layer, capacity, cfg.dgmoe_constraint, rng=rng, replay=r)
            else:  # standard
                src = x_cur
                feed_out, dec, aux = moe_standard(x_cur, layer, capacity, cfg.k_routed,
                                                  rng=rng, replay=r)
                dec_prev = None

            out = tape.add(h_mh_cur, feed_out)
            trace.blocks.append(BlockTrace(h_attn=val(h_mh_prev).copy(),
                                           h_feed=val(h_mlp_prev).copy()))
            trace.blocks.append(BlockTrace(h_attn=val(h_mh_cur).copy(),
                                           h_feed=val(out).copy()))
            trace.moe.append(MoETrace(
                block_index=2 * pair + 1,
                routed_input=val(src).copy(),
                current_input=val(x_cur).copy(),
                preceding_repr=val(h_mh_prev).copy(),
                decision=dec, decision_prev=dec_prev,
                logits_on_preceding=_noise_free_logits(h_mh_prev, layer.gate),
                logits_on_current=_noise_free_logits(x_cur, layer.gate),
                aux_loss=float(np.asarray(val(aux)).reshape(()))))
            aux_terms.append(aux)
            h = out
    else:  # every-block
        for i, blk in enumerate(params.blocks):
            layer = blk.feed
            h_in = h
            h_mh = _backbone(h_in, blk, cfg)
            x_cur = _feed_input(h_mh, cfg)
            r = layer_replay()
            if cfg.variant == "scmoe":
                src = h_in  # previous block's output representation
                feed_out, dec, aux = moe_shared(x_cur, layer, capacity, cfg.k_routed,
                                                rng=rng, replay=r, routed_src=src)
            elif cfg.variant == "shared":
                src = x_cur
                feed_out, dec, aux = moe_shared(x_cur, layer, capacity, cfg.k_routed,
                                                rng=rng, replay=r)
            else:
                src = x_cur
                feed_out, dec, aux = moe_standard(x_cur, layer, capacity, cfg.k_routed,
                                                  rng=rng, replay=r)
            out = tape.add(h_mh, feed_out)
            trace.blocks.append(BlockTrace(h_attn=val(h_mh).copy(), h_feed=val(out).copy()))
            trace.moe.append(MoETrace(
                block_index=i,
                routed_input=val(src).copy(),
                current_input=val(x_cur).copy(),
                preceding_repr=val(src).copy(),
                decision=dec, decision_prev=None,
                logits_on_preceding=_noise_free_logits(src, layer.gate),
                logits_on_current=_noise_free_logits(x_cur, layer.gate),
                aux_loss=float(np.asarray(val(aux)).reshape(()))))
            aux_terms.append(aux)
            h = out

    return ForwardResult(output=h, trace=trace, aux_losses=aux_terms)


def forward(cfg: ModelConfig, params: ModelParams, tokens,
            rng: Optional[Rng] = None,
            replay: Optional[List[MoEReplay]] = None):
    """Plain-value forward: returns (output ndarray, ActivationTrace)."""
    res = model_forward(cfg, params, tokens, rng=rng, replay=replay)
    out = val(res.output)
    numkit.assert_finite(out, "model output")
    return out, res.trace
