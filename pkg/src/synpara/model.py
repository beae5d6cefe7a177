"""Encoder-decoder Transformer with prefix injection at every attention site.

Pre-norm residual blocks, GELU feed-forward, learned positional embeddings,
tied input/output embeddings. Prefixes are post-projection key/value rows
prepended at each attention site; a per-site provider object (the prefix
bank, or a parse-instructed view of it) supplies them, so the model never
owns prefix parameters.

Internally everything runs batched as [batch, positions, dim_h]; the public
single-example operations wrap a batch of one, which is padding-free and
therefore bitwise identical to the unbatched computation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .data import BOS, EOS, PAD
from .errors import (
    ContractError,
    DimensionError,
    EmptyBatchError,
    LengthError,
    ValidationError,
)
from .seeding import substream
from .tensor import Tensor

_NEG = -1e9  # additive mask value; float64 keeps softmax exact enough
_LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    l_enc: int
    l_dec: int
    dim_h: int
    n_heads: int
    dim_ff: int
    vocab_size: int
    max_len: int
    prefix_len: int

    def __post_init__(self):
        for field in ("l_enc", "l_dec", "dim_h", "n_heads", "dim_ff", "vocab_size", "max_len"):
            if getattr(self, field) < 1:
                raise ValidationError(f"{field} must be >= 1")
        if self.prefix_len < 1:
            raise ValidationError("prefix_len must be >= 1")
        if self.dim_h % self.n_heads != 0:
            raise ValidationError(
                f"dim_h {self.dim_h} not divisible by n_heads {self.n_heads}"
            )


def toy_config(vocab_size: int, max_len: int = 64) -> ModelConfig:
    return ModelConfig(
        l_enc=2, l_dec=2, dim_h=32, n_heads=2, dim_ff=64,
        vocab_size=vocab_size, max_len=max_len, prefix_len=8,
    )


def micro_config(vocab_size: int, max_len: int = 32) -> ModelConfig:
    """Smallest config that still exercises every code path; used by the
    gradient-check harness where finite differences are quadratic in size.
    """
    return ModelConfig(
        l_enc=1, l_dec=1, dim_h=8, n_heads=2, dim_ff=16,
        vocab_size=vocab_size, max_len=max_len, prefix_len=2,
    )


SITE_KINDS = ("encoder-self", "decoder-self", "decoder-cross")


@dataclass(frozen=True)
class AttentionSite:
    kind: str
    layer_index: int  # 1-based

    def __post_init__(self):
        if self.kind not in SITE_KINDS:
            raise ValidationError(f"unknown attention site kind {self.kind!r}")
        if self.layer_index < 1:
            raise ValidationError("layer_index is 1-based")


def attention_sites(config: ModelConfig) -> Tuple[AttentionSite, ...]:
    sites = [AttentionSite("encoder-self", i) for i in range(1, config.l_enc + 1)]
    sites += [AttentionSite("decoder-self", i) for i in range(1, config.l_dec + 1)]
    sites += [AttentionSite("decoder-cross", i) for i in range(1, config.l_dec + 1)]
    return tuple(sites)


class ModelWeights:
    """Named backbone tensors plus the frozen flag."""

    def __init__(self, config: ModelConfig, tensors: Dict[str, Tensor], frozen: bool = False):
        self.config = config
        self.tensors = tensors
        self.frozen = frozen
        self.set_frozen(frozen)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def named_tensors(self):
        return list(self.tensors.items())

    def set_frozen(self, flag: bool):
        self.frozen = bool(flag)
        for t in self.tensors.values():
            t.requires_grad = not self.frozen

    def param_count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


def init_weights(config: ModelConfig, seed: int, init_scale: float = 0.02) -> ModelWeights:
    rng = substream(seed, "init")
    d, ff = config.dim_h, config.dim_ff
    tensors: Dict[str, Tensor] = {}

    def mat(name, shape):
        tensors[name] = Tensor(rng.normal(0.0, init_scale, shape), requires_grad=True)

    def zeros(name, shape):
        tensors[name] = Tensor(np.zeros(shape), requires_grad=True)

    def ones(name, shape):
        tensors[name] = Tensor(np.ones(shape), requires_grad=True)

    mat("tok_emb", (config.vocab_size, d))
    mat("pos_emb", (config.max_len, d))

    def ln(name):
        ones(f"{name}.gamma", (d,))
        zeros(f"{name}.beta", (d,))

    def attn(name):
        # no key bias: softmax is invariant to score shifts that are
        # constant along the key axis, so a key bias is dead weight
        for w in ("wq", "wk", "wv", "wo"):
            mat(f"{name}.{w}", (d, d))
        for b in ("bq", "bv", "bo"):
            zeros(f"{name}.{b}", (d,))

    def ffn(name):
        mat(f"{name}.w1", (d, ff))
        zeros(f"{name}.b1", (ff,))
        mat(f"{name}.w2", (ff, d))
        zeros(f"{name}.b2", (d,))

    for i in range(1, config.l_enc + 1):
        ln(f"enc{i}.ln1")
        attn(f"enc{i}.attn")
        ln(f"enc{i}.ln2")
        ffn(f"enc{i}.ff")
    ln("enc_ln")
    for i in range(1, config.l_dec + 1):
        ln(f"dec{i}.ln1")
        attn(f"dec{i}.self")
        ln(f"dec{i}.ln2")
        attn(f"dec{i}.cross")
        ln(f"dec{i}.ln3")
        ffn(f"dec{i}.ff")
    ln("dec_ln")
    return ModelWeights(config, tensors)


# ---------------------------------------------------------------------------
# attention

def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, n, d = x.shape
    return T.transpose(T.reshape(x, (b, n, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def attention_with_prefix(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    k_prefix: Optional[Tensor] = None,
    v_prefix: Optional[Tensor] = None,
    mask: Optional[np.ndarray] = None,
    n_heads: int = 1,
) -> Tensor:
    """Multi-head scaled dot-product attention with optional key/value
    prefix rows prepended before the head split.

    `mask` is an additive numpy mask (0 keeps, large negative drops) over the
    ORIGINAL keys only; prefix positions are never masked. Inputs may be
    [n, dim_h] or batched [batch, n, dim_h].
    """
    if (k_prefix is None) != (v_prefix is None):
        raise ContractError("k_prefix and v_prefix must be both present or both absent")
    squeeze = q.ndim == 2
    if squeeze:
        q = T.reshape(q, (1,) + q.shape)
        k = T.reshape(k, (1,) + k.shape)
        v = T.reshape(v, (1,) + v.shape)
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise DimensionError("attention inputs must be rank 2 or 3")
    batch, n_q, d = q.shape
    n_k = k.shape[1]
    if k.shape != (batch, n_k, d) or v.shape != (batch, n_k, d):
        raise DimensionError(
            f"attention key/value shapes {k.shape}/{v.shape} do not match "
            f"queries {q.shape}"
        )
    if d % n_heads != 0:
        raise DimensionError(f"dim {d} not divisible by {n_heads} heads")

    p_len = 0
    if k_prefix is not None and k_prefix.shape[-2] > 0:
        # ranks may differ (shared [p, d] key rows next to per-example
        # [batch, p, d] values under direct substitution), so lift each to
        # rank 3 before comparing
        if k_prefix.ndim == 2:
            k_prefix = T.broadcast_to(
                T.reshape(k_prefix, (1,) + k_prefix.shape), (batch,) + k_prefix.shape
            )
        if v_prefix.ndim == 2:
            v_prefix = T.broadcast_to(
                T.reshape(v_prefix, (1,) + v_prefix.shape), (batch,) + v_prefix.shape
            )
        if k_prefix.shape != v_prefix.shape:
            raise DimensionError(
                f"prefix shapes differ: {k_prefix.shape} vs {v_prefix.shape}"
            )
        if k_prefix.shape[0] != batch or k_prefix.shape[2] != d:
            raise DimensionError(
                f"prefix shape {k_prefix.shape} incompatible with keys {k.shape}"
            )
        p_len = k_prefix.shape[1]
        k = T.concat([k_prefix, k], axis=1)
        v = T.concat([v_prefix, v], axis=1)

    qh = _split_heads(q, n_heads)
    kh = _split_heads(k, n_heads)
    vh = _split_heads(v, n_heads)
    scores = T.mul(
        T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))),
        Tensor(1.0 / math.sqrt(d // n_heads)),
    )
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape[-1] != n_k:
            raise DimensionError(
                f"mask last dim {mask.shape[-1]} does not cover {n_k} keys"
            )
        while mask.ndim < 4:
            mask = mask[None]
        if p_len:
            mask = np.concatenate(
                [np.zeros(mask.shape[:-1] + (p_len,)), mask], axis=-1
            )
        scores = T.add(scores, Tensor(mask))
    attn = T.softmax(scores, axis=-1)
    out = _merge_heads(T.matmul(attn, vh))
    if squeeze:
        out = T.reshape(out, out.shape[1:])
    return out


# ---------------------------------------------------------------------------
# transformer stacks

def _site_kv(prefix_bank, kind: str, layer: int):
    if prefix_bank is None:
        return None, None
    return prefix_bank.kv(kind, layer)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.add(T.matmul(x, w), b)


def _attn_sublayer(x, mem, name, kind, layer, bank, mask, weights, cfg, capture=None):
    w = weights
    q = _linear(x, w[f"{name}.wq"], w[f"{name}.bq"])
    k = T.matmul(mem, w[f"{name}.wk"])
    v = _linear(mem, w[f"{name}.wv"], w[f"{name}.bv"])
    kp, vp = _site_kv(bank, kind, layer)
    if capture is not None and kp is not None:
        capture[(kind, layer)] = (kp, vp)
    out = attention_with_prefix(q, k, v, kp, vp, mask, cfg.n_heads)
    return _linear(out, w[f"{name}.wo"], w[f"{name}.bo"])


def _ff_sublayer(x, name, weights):
    h = T.gelu(_linear(x, weights[f"{name}.w1"], weights[f"{name}.b1"]))
    return _linear(h, weights[f"{name}.w2"], weights[f"{name}.b2"])


def _embed(ids: np.ndarray, weights, cfg) -> Tensor:
    n = ids.shape[-1]
    if n > cfg.max_len:
        raise LengthError(f"sequence of {n} tokens exceeds max_len {cfg.max_len}")
    tok = T.embedding(weights["tok_emb"], ids)
    pos = T.embedding(weights["pos_emb"], np.arange(n))
    return T.add(tok, pos)


def _ln(x, name, weights):
    return T.layer_norm(x, weights[f"{name}.gamma"], weights[f"{name}.beta"], _LN_EPS)


def _encoder_forward(ids, enc_key_mask, bank, weights, cfg, capture=None):
    """ids: [batch, n] int array; enc_key_mask: additive [batch,1,1,n] or None."""
    x = _embed(ids, weights, cfg)
    for i in range(1, cfg.l_enc + 1):
        h = _ln(x, f"enc{i}.ln1", weights)
        a = _attn_sublayer(
            h, h, f"enc{i}.attn", "encoder-self", i, bank, enc_key_mask,
            weights, cfg, capture,
        )
        x = T.add(x, a)
        h = _ln(x, f"enc{i}.ln2", weights)
        x = T.add(x, _ff_sublayer(h, f"enc{i}.ff", weights))
    return _ln(x, "enc_ln", weights)


def _decoder_forward(dec_ids, enc_out, self_mask, cross_mask, bank, weights, cfg, capture=None):
    x = _embed(dec_ids, weights, cfg)
    for i in range(1, cfg.l_dec + 1):
        h = _ln(x, f"dec{i}.ln1", weights)
        a = _attn_sublayer(
            h, h, f"dec{i}.self", "decoder-self", i, bank, self_mask,
            weights, cfg, capture,
        )
        x = T.add(x, a)
        h = _ln(x, f"dec{i}.ln2", weights)
        a = _attn_sublayer(
            h, enc_out, f"dec{i}.cross", "decoder-cross", i, bank, cross_mask,
            weights, cfg, capture,
        )
        x = T.add(x, a)
        h = _ln(x, f"dec{i}.ln3", weights)
        x = T.add(x, _ff_sublayer(h, f"dec{i}.ff", weights))
    return _ln(x, "dec_ln", weights)


def _causal_mask(m: int) -> np.ndarray:
    return np.where(np.tril(np.ones((m, m))) > 0, 0.0, _NEG)[None, None]


def _key_pad_mask(ids: np.ndarray) -> np.ndarray:
    # [batch, 1, 1, n]; PAD keys dropped
    return np.where(ids == PAD, _NEG, 0.0)[:, None, None, :]


def _validate_ids(ids, cfg):
    arr = np.asarray(ids, dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= cfg.vocab_size):
        raise ValidationError("token id out of vocabulary range")
    return arr


def encode(token_ids: Sequence[int], prefix_bank, weights: ModelWeights, config: ModelConfig) -> Tensor:
    """Last-encoder-layer hidden states for one example, [n, dim_h]."""
    ids = _validate_ids(token_ids, config)
    if ids.size == 0:
        raise EmptyBatchError("encode of an empty token sequence")
    out = _encoder_forward(ids[None], None, prefix_bank, weights, config)
    return T.reshape(out, out.shape[1:])


def forward_loss(
    enc_ids: Sequence[int],
    tgt_ids: Sequence[int],
    prefix_bank,
    weights: ModelWeights,
    config: ModelConfig,
) -> Tensor:
    """Teacher-forced decoder cross-entropy for one example."""
    loss, _ = batch_forward_loss([enc_ids], [tgt_ids], prefix_bank, weights, config)
    return loss


def batch_forward_loss(
    enc_ids_batch: Sequence[Sequence[int]],
    tgt_ids_batch: Sequence[Sequence[int]],
    prefix_bank,
    weights: ModelWeights,
    config: ModelConfig,
    capture: Optional[dict] = None,
) -> Tuple[Tensor, int]:
    """Mean cross-entropy over all non-PAD target positions in the batch.

    Returns (loss, n_target_tokens). Sequences are padded to the batch max
    with PAD, which is excluded from attention keys and from the loss.
    """
    if len(enc_ids_batch) != len(tgt_ids_batch):
        raise ContractError("encoder and target batches differ in length")
    if not enc_ids_batch:
        raise EmptyBatchError("empty batch")
    if any(len(t) == 0 for t in tgt_ids_batch):
        raise EmptyBatchError("empty target sequence")
    batch = len(enc_ids_batch)
    n = max(len(s) for s in enc_ids_batch)
    m = max(len(t) for t in tgt_ids_batch) + 1  # BOS shift / EOS append
    enc = np.full((batch, n), PAD, dtype=np.int64)
    dec_in = np.full((batch, m), PAD, dtype=np.int64)
    targets = np.full((batch, m), PAD, dtype=np.int64)
    for row, (src, tgt) in enumerate(zip(enc_ids_batch, tgt_ids_batch)):
        enc[row, : len(src)] = _validate_ids(src, config)
        t = _validate_ids(tgt, config)
        dec_in[row, 0] = BOS
        dec_in[row, 1 : len(t) + 1] = t
        targets[row, : len(t)] = t
        targets[row, len(t)] = EOS

    enc_mask = _key_pad_mask(enc)
    enc_out = _encoder_forward(enc, enc_mask, prefix_bank, weights, config, capture)
    self_mask = _causal_mask(m) + _key_pad_mask(dec_in)
    dec_out = _decoder_forward(
        dec_in, enc_out, self_mask, enc_mask, prefix_bank, weights, config, capture
    )
    logits = T.matmul(dec_out, T.transpose(weights["tok_emb"], (1, 0)))
    flat = T.reshape(logits, (batch * m, config.vocab_size))
    loss = T.cross_entropy(flat, targets.reshape(-1), ignore_id=PAD)
    return loss, int((targets != PAD).sum())


def forward_logits(
    enc_ids: Sequence[int],
    dec_input_ids: Sequence[int],
    prefix_bank,
    weights: ModelWeights,
    config: ModelConfig,
) -> Tensor:
    """Decoder output logits [len(dec_input_ids), vocab_size] for one
    example; the caller supplies the BOS-shifted decoder input."""
    enc = _validate_ids(enc_ids, config)
    dec = _validate_ids(dec_input_ids, config)
    if enc.size == 0 or dec.size == 0:
        raise EmptyBatchError("forward_logits on an empty sequence")
    enc_out = _encoder_forward(enc[None], None, prefix_bank, weights, config)
    dec_out = _decoder_forward(
        dec[None], enc_out, _causal_mask(dec.size), None,
        prefix_bank, weights, config,
    )
    logits = T.matmul(dec_out, T.transpose(weights["tok_emb"], (1, 0)))
    return T.reshape(logits, logits.shape[1:])


# ---------------------------------------------------------------------------
# generation

@dataclass
class GenerationResult:
    tokens: List[int]
    finished: bool
    score: float  # length-normalized log-probability


def _log_softmax_rows(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def beam_search_core(
    step_fn,
    vocab_size: int,
    beam_width: int,
    max_decode_len: int,
    eos_id: int = EOS,
) -> GenerationResult:
    """Deterministic beam search over a step function.

    step_fn takes a list of token-tuple hypotheses and returns a
    [len(hypotheses), vocab_size] array of next-token log-probabilities.
    Candidates are ranked by summed log-probability with ties broken toward
    the lexicographically smaller token sequence; the returned hypothesis
    maximizes sum / token count among finished beams (EOS included in both),
    falling back to the best unfinished beam, flagged, when nothing finished.
    """
    if beam_width < 1:
        raise ValidationError("beam_width must be >= 1")
    if max_decode_len < 1:
        raise ValidationError("max_decode_len must be >= 1")

    beams = [((), 0.0, False)]  # (tokens, sum logprob, finished)
    for _ in range(max_decode_len):
        active = [b for b in beams if not b[2]]
        if not active:
            break
        logp = np.asarray(step_fn([b[0] for b in active]))
        candidates = [b for b in beams if b[2]]
        for row, (tokens, score, _) in enumerate(active):
            for tok in range(vocab_size):
                candidates.append(
                    (tokens + (tok,), score + logp[row, tok], tok == eos_id)
                )
        candidates.sort(key=lambda c: (-c[1], c[0]))
        beams = candidates[:beam_width]

    def normalized(beam):
        tokens, score, _ = beam
        return score / max(len(tokens), 1)

    finished = [b for b in beams if b[2]]
    pool = finished if finished else beams
    pool.sort(key=lambda b: (-normalized(b), b[0]))
    tokens, _, done = pool[0]
    return GenerationResult(
        tokens=[t for t in tokens if t != eos_id],
        finished=done,
        score=normalized(pool[0]),
    )


def generate_beam(
    src_tokens: Sequence[int],
    parse_tokens: Sequence[int],
    prefix_bank,
    weights: ModelWeights,
    config: ModelConfig,
    beam_width: int = 4,
    max_decode_len: Optional[int] = None,
) -> GenerationResult:
    """Beam search of the decoder conditioned on src + SEP + parse."""
    from .data import SEP  # local to avoid import noise at module top

    if max_decode_len is None:
        max_decode_len = config.max_len - 1
    max_decode_len = min(max_decode_len, config.max_len - 1)

    enc_ids = list(src_tokens) + [SEP] + list(parse_tokens)
    with T.no_grad():
        enc_out = encode(enc_ids, prefix_bank, weights, config)
        enc_out_b = T.reshape(enc_out, (1,) + enc_out.shape)

        def step_fn(hyps):
            dec_len = len(hyps[0]) + 1
            dec_in = np.array([(BOS,) + h for h in hyps], dtype=np.int64)
            mem = T.broadcast_to(enc_out_b, (len(hyps),) + enc_out_b.shape[1:])
            dec_out = _decoder_forward(
                dec_in, mem, _causal_mask(dec_len), None,
                prefix_bank, weights, config,
            )
            logits = dec_out.data[:, -1, :] @ weights["tok_emb"].data.T
            return _log_softmax_rows(logits)

        return beam_search_core(
            step_fn, config.vocab_size, beam_width, max_decode_len
        )


# ---------------------------------------------------------------------------
# parameter accounting

MODES = ("finetune", "prefix", "pip-direct", "pip-indirect")


@dataclass(frozen=True)
class ParamCount:
    trainable: int
    total: int


def count_params(weights: ModelWeights, prefix_bank=None, instructor=None, mode: str = "finetune") -> ParamCount:
    if mode not in MODES:
        raise ValidationError(f"unknown mode {mode!r}; expected one of {MODES}")
    backbone = weights.param_count()
    bank_total = prefix_bank.param_count() if prefix_bank is not None else 0
    instr_total = instructor.param_count() if instructor is not None else 0
    total = backbone + bank_total + instr_total
    if mode == "finetune":
        trainable = backbone
    elif mode == "prefix":
        trainable = bank_total
    elif mode == "pip-direct":
        # the stored v_m is substituted at forward time; it is a dead parameter
        trainable = bank_total - prefix_bank.dead_param_count(weights.config)
    else:  # pip-indirect
        trainable = bank_total + instr_total
    return ParamCount(trainable=trainable, total=total)
