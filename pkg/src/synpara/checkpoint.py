"""Versioned binary checkpoint container.

Layout, all integers little-endian:

    8 bytes   magic "PIPCKPT1"
    u32       number of config/meta entries
    per entry u16 key length, key (utf-8), u32 value length, value (utf-8)
    u32       number of tensors
    per tensor u16 name length, name (utf-8), u8 rank, u32 per dim,
              raw little-endian float64 in row-major order

The config record stores the model configuration plus free-form string
metadata (training mode, PEL weight, bank shape). Tensor payloads round-trip
bit-exactly: bytes out equal bytes in.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from typing import Dict, Optional, Tuple

import numpy as np

from . import model as M
from . import prefix as P
from .errors import ContractError, ValidationError
from .tensor import Tensor

MAGIC = b"PIPCKPT1"

_CONFIG_KEYS = tuple(f.name for f in fields(M.ModelConfig))


@dataclass
class CheckpointData:
    config: M.ModelConfig
    meta: Dict[str, str]
    tensors: Dict[str, np.ndarray]  # insertion-ordered


def _pack_str(s: str, lenfmt: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack(lenfmt, len(raw)) + raw


def save_checkpoint(
    path: str,
    config: M.ModelConfig,
    tensors: Dict[str, Tensor],
    meta: Optional[Dict[str, str]] = None,
) -> None:
    entries = {k: str(getattr(config, k)) for k in _CONFIG_KEYS}
    for key, value in (meta or {}).items():
        if key in _CONFIG_KEYS:
            raise ContractError(f"meta key {key!r} collides with a config field")
        entries[key] = str(value)
    parts = [MAGIC, struct.pack("<I", len(entries))]
    for key, value in entries.items():
        parts.append(_pack_str(key, "<H"))
        parts.append(_pack_str(value, "<I"))
    parts.append(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t, dtype="<f8")
        parts.append(_pack_str(name, "<H"))
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        parts.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise ContractError("checkpoint truncated")
        out = self.blob[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self, lenfmt: str) -> str:
        (n,) = self.unpack(lenfmt)
        return self.take(n).decode("utf-8")


def load_checkpoint(path: str) -> CheckpointData:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    if r.take(len(MAGIC)) != MAGIC:
        raise ContractError(f"{path} is not a checkpoint (bad magic)")
    (n_entries,) = r.unpack("<I")
    entries: Dict[str, str] = {}
    for _ in range(n_entries):
        key = r.string("<H")
        entries[key] = r.string("<I")
    missing = [k for k in _CONFIG_KEYS if k not in entries]
    if missing:
        raise ContractError(f"checkpoint config record missing {missing}")
    config = M.ModelConfig(**{k: int(entries.pop(k)) for k in _CONFIG_KEYS})
    (n_tensors,) = r.unpack("<I")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        name = r.string("<H")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I") if rank else ()
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        raw = r.take(count * 8)
        tensors[name] = (
            np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        )
    if r.off != len(blob):
        raise ContractError("checkpoint has trailing bytes")
    return CheckpointData(config=config, meta=entries, tensors=tensors)


# ---------------------------------------------------------------------------
# state <-> container

def state_tensors(
    weights: M.ModelWeights,
    bank: Optional[P.PrefixBank] = None,
    instructor: Optional[P.ParseInstructor] = None,
) -> Dict[str, Tensor]:
    out: Dict[str, Tensor] = {}
    for name, t in weights.named_tensors():
        out[f"model/{name}"] = t
    if bank is not None:
        for name, t in bank.named_tensors():
            out[f"prefix/{name}"] = t
    if instructor is not None:
        for name, t in instructor.named_tensors():
            out[f"instructor/{name}"] = t
    return out


def save_state(
    path: str,
    weights: M.ModelWeights,
    bank: Optional[P.PrefixBank] = None,
    instructor: Optional[P.ParseInstructor] = None,
    mode: str = "finetune",
    extra_meta: Optional[Dict[str, str]] = None,
) -> None:
    meta = {"mode": mode}
    if bank is not None:
        meta["bank_reparameterized"] = "1" if bank.reparameterized else "0"
        if bank.reparameterized:
            meta["bank_dim_r"] = str(bank.dim_r)
    if instructor is not None:
        meta["instructor_mode"] = instructor.mode
        meta["pel_weight"] = repr(instructor.pel_weight)
    meta.update(extra_meta or {})
    save_checkpoint(path, weights.config, state_tensors(weights, bank, instructor), meta)


def _group(data: CheckpointData, group: str) -> Dict[str, np.ndarray]:
    plen = len(group) + 1
    return {
        name[plen:]: arr
        for name, arr in data.tensors.items()
        if name.startswith(group + "/")
    }


def restore_state(
    data: CheckpointData,
) -> Tuple[M.ModelWeights, Optional[P.PrefixBank], Optional[P.ParseInstructor], str]:
    """Rebuild (weights, bank, instructor, mode) from a loaded checkpoint.

    Tensor name sets must match the shapes the config implies exactly.
    """
    cfg = data.config
    mode = data.meta.get("mode", "finetune")
    if mode not in M.MODES:
        raise ValidationError(f"checkpoint declares unknown mode {mode!r}")

    template = M.init_weights(cfg, seed=0)
    stored = _group(data, "model")
    _check_names("model", stored, {n for n, _ in template.named_tensors()})
    for name, t in template.named_tensors():
        arr = stored[name]
        if arr.shape != t.data.shape:
            raise ContractError(
                f"model/{name} has shape {arr.shape}, expected {t.data.shape}"
            )
        t.data = arr.copy()

    bank = None
    bank_arrays = _group(data, "prefix")
    if bank_arrays:
        reparam = data.meta.get("bank_reparameterized", "0") == "1"
        dim_r = int(data.meta["bank_dim_r"]) if reparam else None
        bank = P.init_prefix_bank(cfg, seed=0, reparameterize=reparam, dim_r=dim_r)
        _check_names("prefix", bank_arrays, set(bank.tensors))
        for name, t in bank.named_tensors():
            arr = bank_arrays[name]
            if arr.shape != t.data.shape:
                raise ContractError(
                    f"prefix/{name} has shape {arr.shape}, expected {t.data.shape}"
                )
            t.data = arr.copy()

    instructor = None
    instr_arrays = _group(data, "instructor")
    if instr_arrays or "instructor_mode" in data.meta:
        imode = data.meta.get("instructor_mode", "indirect")
        pel_weight = float(data.meta.get("pel_weight", "1.0"))
        instructor = P.init_instructor(cfg, seed=0, mode=imode, pel_weight=pel_weight)
        _check_names("instructor", instr_arrays, set(instructor.tensors))
        for name, t in instructor.named_tensors():
            arr = instr_arrays[name]
            if arr.shape != t.data.shape:
                raise ContractError(
                    f"instructor/{name} has shape {arr.shape}, expected {t.data.shape}"
                )
            t.data = arr.copy()

    return template, bank, instructor, mode


def _check_names(group: str, stored: Dict[str, np.ndarray], expected: set):
    got = set(stored)
    if got != expected:
        missing = sorted(expected - got)
        extra = sorted(got - expected)
        raise ContractError(
            f"checkpoint {group} tensors mismatch: missing {missing}, extra {extra}"
        )
