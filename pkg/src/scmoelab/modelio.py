"""Bit-exact serialization for model parameters, configs, and traces.

Binary container layout (little-endian throughout):

    magic   4 bytes  b"SCML"
    version u32      currently 1
    count   u32      number of entries
    table   per entry: name_len u16, name utf-8, dtype u8, rows u32, cols u32
    payload per entry, in table order: raw row-major bytes

dtype codes: 0 = float64, 1 = int64, 2 = bool. Round-trips are bit-exact.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from typing import Dict, List

import numpy as np

from . import arch
from .arch import ActivationTrace, BlockTrace, ModelConfig, ModelParams, MoETrace
from .gating import GateDecision
from .numkit import Rng

MAGIC = b"SCML"
VERSION = 1

_DTYPES = {0: "<f8", 1: "<i8", 2: "|b1"}
_CODES = {np.dtype(np.float64): 0, np.dtype(np.int64): 1, np.dtype(np.bool_): 2}


def pack_arrays(entries: Dict[str, np.ndarray]) -> bytes:
    header = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    payload = []
    for name, arr in entries.items():
        a = np.ascontiguousarray(arr)
        if a.ndim == 1:
            a = a.reshape(1, -1)
        if a.ndim != 2:
            raise ValueError(f"entry {name!r} is not 2-D")
        code = _CODES.get(a.dtype)
        if code is None:
            raise ValueError(f"entry {name!r} has unsupported dtype {a.dtype}")
        nb = name.encode("utf-8")
        header.append(struct.pack("<H", len(nb)) + nb +
                      struct.pack("<BII", code, a.shape[0], a.shape[1]))
        payload.append(a.astype(_DTYPES[code]).tobytes())
    return b"".join(header + payload)


def unpack_arrays(blob: bytes) -> Dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise ValueError("bad magic bytes")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ValueError(f"unsupported container version {version}")
    off = 12
    table = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        code, rows, cols = struct.unpack_from("<BII", blob, off)
        off += 9
        table.append((name, code, rows, cols))
    out = {}
    for name, code, rows, cols in table:
        dt = np.dtype(_DTYPES[code])
        nbytes = rows * cols * dt.itemsize
        arr = np.frombuffer(blob[off:off + nbytes], dtype=dt).reshape(rows, cols)
        out[name] = arr.astype(dt.newbyteorder("="), copy=True)
        off += nbytes
    return out


# ---------------------------------------------------------------------------
# model parameters + config


def config_to_dict(cfg: ModelConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(d: dict) -> ModelConfig:
    known = {f.name for f in dataclasses.fields(ModelConfig)}
    unknown = set(d) - known
    if unknown:
        raise arch.ConfigError(f"unknown model config keys: {sorted(unknown)}")
    return ModelConfig(**d)


def save_model(path, cfg: ModelConfig, params: ModelParams):
    entries = dict(arch.named_parameters(params))
    with open(path, "wb") as fh:
        fh.write(pack_arrays(entries))
    with open(str(path) + ".json", "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path):
    with open(str(path) + ".json") as fh:
        cfg = config_from_dict(json.load(fh))
    with open(path, "rb") as fh:
        entries = unpack_arrays(fh.read())
    params = arch.init_params(cfg, Rng(0))
    for name, arr in arch.named_parameters(params):
        if name not in entries:
            raise ValueError(f"missing parameter {name!r} in container")
        if entries[name].shape != arr.shape:
            raise ValueError(f"shape mismatch for {name!r}")
        arr[...] = entries[name]
    return cfg, params


# ---------------------------------------------------------------------------
# traces


def _decision_entries(prefix: str, dec: GateDecision, out: Dict[str, np.ndarray]):
    out[f"{prefix}.logits"] = dec.logits
    out[f"{prefix}.indices"] = dec.indices.astype(np.int64)
    out[f"{prefix}.weights"] = dec.weights
    out[f"{prefix}.dropped"] = dec.dropped
    if dec.eps is not None:
        out[f"{prefix}.eps"] = dec.eps


def _decision_from_entries(prefix: str, e: Dict[str, np.ndarray]) -> GateDecision:
    return GateDecision(
        logits=e[f"{prefix}.logits"],
        indices=e[f"{prefix}.indices"],
        weights=e[f"{prefix}.weights"],
        dropped=e[f"{prefix}.dropped"].astype(bool),
        eps=e.get(f"{prefix}.eps"),
    )


def save_trace(path, trace: ActivationTrace):
    entries: Dict[str, np.ndarray] = {"tokens": trace.tokens}
    meta = {"n_blocks": len(trace.blocks), "moe": []}
    for i, b in enumerate(trace.blocks):
        entries[f"block{i}.h_attn"] = b.h_attn
        entries[f"block{i}.h_feed"] = b.h_feed
    for j, m in enumerate(trace.moe):
        p = f"moe{j}"
        entries[f"{p}.routed_input"] = m.routed_input
        entries[f"{p}.current_input"] = m.current_input
        entries[f"{p}.preceding_repr"] = m.preceding_repr
        entries[f"{p}.logits_on_preceding"] = m.logits_on_preceding
        entries[f"{p}.logits_on_current"] = m.logits_on_current
        _decision_entries(f"{p}.decision", m.decision, entries)
        if m.decision_prev is not None:
            _decision_entries(f"{p}.decision_prev", m.decision_prev, entries)
        meta["moe"].append({"block_index": m.block_index, "aux_loss": m.aux_loss,
                            "dual": m.decision_prev is not None})
    with open(path, "wb") as fh:
        fh.write(pack_arrays(entries))
    with open(str(path) + ".json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_trace(path) -> ActivationTrace:
    with open(str(path) + ".json") as fh:
        meta = json.load(fh)
    with open(path, "rb") as fh:
        e = unpack_arrays(fh.read())
    trace = ActivationTrace(tokens=e["tokens"])
    for i in range(meta["n_blocks"]):
        trace.blocks.append(BlockTrace(h_attn=e[f"block{i}.h_attn"],
                                       h_feed=e[f"block{i}.h_feed"]))
    for j, m in enumerate(meta["moe"]):
        p = f"moe{j}"
        trace.moe.append(MoETrace(
            block_index=m["block_index"],
            routed_input=e[f"{p}.routed_input"],
            current_input=e[f"{p}.current_input"],
            preceding_repr=e[f"{p}.preceding_repr"],
            decision=_decision_from_entries(f"{p}.decision", e),
            decision_prev=(_decision_from_entries(f"{p}.decision_prev", e)
                           if m["dual"] else None),
            logits_on_preceding=e[f"{p}.logits_on_preceding"],
            logits_on_current=e[f"{p}.logits_on_current"],
            aux_loss=m["aux_loss"]))
    return trace
