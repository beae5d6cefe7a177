"""Prefix banks and parse-instructed variants.

A PrefixBank owns one learnable (k, v) pair of [prefix_len, dim_h] rows per
attention site. Two parse-instructed flavors build on it:

* direct: the stored v at the last encoder self-attention site is replaced
  at forward time by e(t), the frozen encoder's pooled encoding of the
  target parse. The stored v there becomes a dead parameter; k stays live.
* indirect: the bank is untouched, but an auxiliary attention head reads
  (k_m, v_m, e(t)) and is trained to reconstruct e(t); the mean row-wise
  cosine distance of that reconstruction is added to the LM loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

from . import model as M
from . import tensor as T
from .errors import (
    ContractError,
    DegenerateInputError,
    DimensionError,
    ValidationError,
)
from .seeding import substream
from .tensor import Tensor

INIT_STD = 0.02


def _site_token(kind: str, layer: int) -> str:
    return f"{kind}{layer}"


class PrefixBank:
    """Per-site key/value prefix rows, stored raw or through a shared
    low-dim reparameterization (hidden [prefix_len, dim_r] plus per-site
    linear maps to the key and value rows).
    """

    def __init__(
        self,
        config: M.ModelConfig,
        tensors: Dict[str, Tensor],
        reparameterized: bool = False,
        dim_r: Optional[int] = None,
    ):
        self.config = config
        self.sites = M.attention_sites(config)
        self.tensors = tensors
        self.reparameterized = reparameterized
        self.dim_r = dim_r
        self._site_set = {(s.kind, s.layer_index) for s in self.sites}

    def kv(self, kind: str, layer: int) -> Tuple[Tensor, Tensor]:
        if (kind, layer) not in self._site_set:
            raise ValidationError(f"no attention site ({kind!r}, {layer})")
        tok = _site_token(kind, layer)
        if not self.reparameterized:
            return self.tensors[f"{tok}.k"], self.tensors[f"{tok}.v"]
        h = self.tensors["reparam.hidden"]
        k = T.add(T.matmul(h, self.tensors[f"reparam.{tok}.wk"]), self.tensors[f"reparam.{tok}.bk"])
        v = T.add(T.matmul(h, self.tensors[f"reparam.{tok}.wv"]), self.tensors[f"reparam.{tok}.bv"])
        return k, v

    def named_tensors(self):
        return list(self.tensors.items())

    def param_count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def dead_tensor_name(self, config: Optional[M.ModelConfig] = None) -> str:
        cfg = config or self.config
        return f"{_site_token('encoder-self', cfg.l_enc)}.v"

    def dead_param_count(self, config: Optional[M.ModelConfig] = None) -> int:
        """Size of the stored v at the substitution site; only meaningful for
        raw banks, where that tensor never receives gradient under direct
        substitution.
        """
        if self.reparameterized:
            raise ContractError(
                "a reparameterized bank has no stored v to substitute"
            )
        return self.tensors[self.dead_tensor_name(config)].data.size

    def set_trainable(self, flag: bool):
        for t in self.tensors.values():
            t.requires_grad = bool(flag)


def init_prefix_bank(
    config: M.ModelConfig,
    seed: int,
    reparameterize: bool = False,
    dim_r: Optional[int] = None,
) -> PrefixBank:
    """Every entry i.i.d. Normal(0, INIT_STD^2) from the "prefix" substream."""
    rng = substream(seed, "prefix")
    p, d = config.prefix_len, config.dim_h
    tensors: Dict[str, Tensor] = {}
    if not reparameterize:
        for site in M.attention_sites(config):
            tok = _site_token(site.kind, site.layer_index)
            tensors[f"{tok}.k"] = Tensor(rng.normal(0.0, INIT_STD, (p, d)), requires_grad=True)
            tensors[f"{tok}.v"] = Tensor(rng.normal(0.0, INIT_STD, (p, d)), requires_grad=True)
        return PrefixBank(config, tensors)
    r = dim_r if dim_r is not None else d
    if r < 1:
        raise ValidationError("dim_r must be >= 1")
    tensors["reparam.hidden"] = Tensor(rng.normal(0.0, INIT_STD, (p, r)), requires_grad=True)
    for site in M.attention_sites(config):
        tok = _site_token(site.kind, site.layer_index)
        for name, shape in (
            (f"reparam.{tok}.wk", (r, d)),
            (f"reparam.{tok}.bk", (d,)),
            (f"reparam.{tok}.wv", (r, d)),
            (f"reparam.{tok}.bv", (d,)),
        ):
            tensors[name] = Tensor(rng.normal(0.0, INIT_STD, shape), requires_grad=True)
    return PrefixBank(config, tensors, reparameterized=True, dim_r=r)


# ---------------------------------------------------------------------------
# parse encodings

@dataclass(frozen=True)
class ParseEncoding:
    values: Tensor  # [prefix_len, dim_h], constant
    source_parse: str


def encode_parse(
    parse_ids: Sequence[int],
    weights: M.ModelWeights,
    config: M.ModelConfig,
    source_parse: str = "",
) -> ParseEncoding:
    """e(t): run the linearized parse through the encoder without prefixes,
    then adaptively pool its n rows down (or up) to prefix_len rows.

    Pool bucket j covers input rows [floor(j*n/p), floor((j+1)*n/p)); an
    empty bucket (n < p) falls back to the single nearest row, so short
    parses replicate rows rather than fail. The result is detached: no
    gradient ever flows into the backbone through e(t).
    """
    ids = list(parse_ids)
    if len(ids) == 0:
        raise DegenerateInputError("cannot encode an empty parse")
    with T.no_grad():
        hidden = M.encode(ids, None, weights, config)
    rows = hidden.data
    n = rows.shape[0]
    p = config.prefix_len
    pooled = np.empty((p, config.dim_h))
    for j in range(p):
        lo = (j * n) // p
        hi = max(lo + 1, ((j + 1) * n) // p)
        pooled[j] = rows[lo:hi].mean(axis=0)
    return ParseEncoding(Tensor(pooled, requires_grad=False), source_parse)


class ParseEncodingCache:
    """Memoizes encode_parse by the linearized parse string.

    Reads and the single-writer insert are plain dict operations, which are
    individually atomic under the interpreter lock; concurrent readers may
    at worst recompute an entry, never observe a torn one.
    """

    def __init__(self, weights: M.ModelWeights, config: M.ModelConfig):
        self.weights = weights
        self.config = config
        self._store: Dict[str, ParseEncoding] = {}

    def get(self, parse_string: str, parse_ids: Sequence[int]) -> ParseEncoding:
        hit = self._store.get(parse_string)
        if hit is None:
            hit = encode_parse(parse_ids, self.weights, self.config, parse_string)
            self._store[parse_string] = hit
        return hit

    def __len__(self) -> int:
        return len(self._store)


# ---------------------------------------------------------------------------
# direct substitution

class _DirectView:
    """Prefix provider that forwards to the bank at every site except the
    last encoder self-attention site, where the value rows are replaced by
    e(t) as a constant. The key rows there stay learnable.
    """

    def __init__(self, bank: PrefixBank, substitute: Tensor, config: M.ModelConfig):
        self.bank = bank
        self.config = config
        self._sub = substitute

    def kv(self, kind: str, layer: int) -> Tuple[Tensor, Tensor]:
        k, v = self.bank.kv(kind, layer)
        if kind == "encoder-self" and layer == self.config.l_enc:
            return k, self._sub
        return k, v


def apply_direct(
    bank: PrefixBank,
    encodings: Union[ParseEncoding, Sequence[ParseEncoding]],
    config: M.ModelConfig,
) -> _DirectView:
    """Build a forward view substituting e(t) for v at the last encoder
    layer. Pass one encoding for a single example or a sequence of them
    (one per batch row) for a batched forward.
    """
    if isinstance(encodings, ParseEncoding):
        sub = encodings.values
    else:
        encodings = list(encodings)
        if not encodings:
            raise ContractError("apply_direct needs at least one parse encoding")
        sub = Tensor(
            np.stack([e.values.data for e in encodings]), requires_grad=False
        )
    p, d = config.prefix_len, config.dim_h
    if sub.shape[-2:] != (p, d):
        raise DimensionError(
            f"parse encoding shape {sub.shape} does not match prefix ({p}, {d})"
        )
    return _DirectView(bank, sub, config)


# ---------------------------------------------------------------------------
# indirect instruction

INSTRUCTOR_MODES = ("direct", "indirect")


class ParseInstructor:
    """Auxiliary attention head for indirect parse instruction.

    queries come from e(t); keys/values attend over the concatenation of the
    site-m prefix rows with e(t); the output is projected and mapped row-wise
    by an affine head, trained to land back on e(t).
    """

    def __init__(self, config: M.ModelConfig, mode: str, tensors: Dict[str, Tensor], pel_weight: float = 1.0):
        if mode not in INSTRUCTOR_MODES:
            raise ValidationError(f"instructor mode must be one of {INSTRUCTOR_MODES}")
        if pel_weight < 0:
            raise ValidationError("pel_weight must be >= 0")
        self.config = config
        self.mode = mode
        self.tensors = tensors
        self.pel_weight = float(pel_weight)

    def named_tensors(self):
        return list(self.tensors.items())

    def param_count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def set_trainable(self, flag: bool):
        for t in self.tensors.values():
            t.requires_grad = bool(flag)


def init_instructor(
    config: M.ModelConfig, seed: int, mode: str, pel_weight: float = 1.0
) -> ParseInstructor:
    if mode == "direct":
        return ParseInstructor(config, mode, {}, pel_weight)
    rng = substream(seed, "instructor")
    d = config.dim_h
    tensors: Dict[str, Tensor] = {}
    for name in ("attn.wq", "attn.wk", "attn.wv", "attn.wo"):
        tensors[name] = Tensor(rng.normal(0.0, INIT_STD, (d, d)), requires_grad=True)
    for name in ("attn.bq", "attn.bk", "attn.bv", "attn.bo"):
        tensors[name] = Tensor(np.zeros(d), requires_grad=True)
    tensors["head.w"] = Tensor(rng.normal(0.0, INIT_STD, (d, d)), requires_grad=True)
    tensors["head.b"] = Tensor(np.zeros(d), requires_grad=True)
    return ParseInstructor(config, mode, tensors, pel_weight)


def _affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.add(T.matmul(x, w), b)


def prefix_attend(
    instructor: ParseInstructor, k_m: Tensor, v_m: Tensor, e_t: ParseEncoding
) -> Tensor:
    """A(k_m, v_m, e(t)): attention with e(t) rows as queries over the
    concatenation of prefix rows and e(t) rows. Returns [prefix_len, dim_h].
    """
    if instructor.mode != "indirect":
        raise ContractError("prefix_attend requires an indirect instructor")
    et = e_t.values
    p, d = instructor.config.prefix_len, instructor.config.dim_h
    for name, t in (("k_m", k_m), ("v_m", v_m), ("e_t", et)):
        if t.shape != (p, d):
            raise DimensionError(f"{name} has shape {t.shape}, expected ({p}, {d})")
    w = instructor.tensors
    q = _affine(et, w["attn.wq"], w["attn.bq"])
    keys = _affine(T.concat([k_m, et], axis=0), w["attn.wk"], w["attn.bk"])
    values = _affine(T.concat([v_m, et], axis=0), w["attn.wv"], w["attn.bv"])
    out = M.attention_with_prefix(
        q, keys, values, None, None, None, instructor.config.n_heads
    )
    return _affine(out, w["attn.wo"], w["attn.bo"])


def pel_loss(
    instructor: ParseInstructor, k_m: Tensor, v_m: Tensor, e_t: ParseEncoding
) -> Tensor:
    """Parse-encoding loss: mean over rows of the cosine distance between
    the instructed reconstruction and e(t). Bounded in [0, 2].
    """
    phi = _affine(
        prefix_attend(instructor, k_m, v_m, e_t),
        instructor.tensors["head.w"],
        instructor.tensors["head.b"],
    )
    et = e_t.values
    dots = T.tsum(T.mul(phi, et), axis=1)
    na = T.tsum(T.mul(phi, phi), axis=1)
    nb = T.tsum(T.mul(et, et), axis=1)
    if np.any(na.data == 0.0) or np.any(nb.data == 0.0):
        raise DegenerateInputError("zero-norm row in parse-encoding loss")
    cos = T.div(dots, T.sqrt(T.mul(na, nb)))
    return T.tmean(T.sub(Tensor(1.0), cos))


def combined_loss(lm_loss: Tensor, pel: Tensor, pel_weight: float) -> Tensor:
    if pel_weight < 0:
        raise ValidationError("pel_weight must be >= 0")
    return T.add(lm_loss, T.mul(pel, Tensor(float(pel_weight))))
