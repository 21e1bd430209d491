"""Conditional sequence model: shared recurrent encoder, knowledge heads,
latent-prior head, and an attention decoder conditioned on a continuous
latent injected as one extra attended slot.

Every forward function takes the parameter set explicitly and records on the
active autodiff tape when one is open, so the same code path serves
inference (no tape) and learning (taped).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig, SpiConfig, derived_rng
from .errors import ContractError, NumericError

PAD, BOS, EOS, SEP = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<sep>")


@dataclass(frozen=True)
class Vocab:
    """Token strings with dense ids; the first four ids are reserved."""

    tokens: tuple[str, ...]

    @staticmethod
    def build(words: Sequence[str]) -> "Vocab":
        tokens = RESERVED_TOKENS + tuple(words)
        if len(set(tokens)) != len(tokens):
            raise ContractError("vocabulary contains duplicate tokens")
        return Vocab(tokens)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def to_text(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)


@dataclass
class DialogueExample:
    """One grounded dialogue turn: history, candidate knowledge, response.

    ``gold_index`` may be None for unannotated data; the response always ends
    with the end-of-sequence token.
    """

    history: list[int]
    candidates: list[list[int]]
    gold_index: int | None
    response: list[int]

    def validate(self, vocab_size: int) -> None:
        if len(self.candidates) < 1:
            raise ContractError("example needs at least one knowledge candidate")
        if self.gold_index is not None and not 0 <= self.gold_index < len(self.candidates):
            raise ContractError(
                f"gold_index {self.gold_index} out of range for {len(self.candidates)} candidates")
        if not self.response:
            raise ContractError("example response is empty")
        if self.response[-1] != EOS:
            raise ContractError("example response must end with the end-of-sequence token")
        for name, seq in (("history", self.history), ("response", self.response),
                          *((f"candidate {i}", c) for i, c in enumerate(self.candidates))):
            for tok in seq:
                if not 0 <= tok < vocab_size:
                    raise ContractError(f"{name} token id {tok} outside vocabulary of {vocab_size}")


@dataclass
class LatentPair:
    """A posterior draw: discrete knowledge index and continuous latent."""

    s: int
    z: np.ndarray


# ---------------------------------------------------------------------------
# parameters

INITIALIZER_HEAD = ("init_w", "init_b")
KNOWLEDGE_PRIOR_HEAD = ("kprior_w", "kprior_b")


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    v, e, h = cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim
    a, hd, d = cfg.att_dim, cfg.dec_hidden_dim, cfg.latent_dim
    return [
        ("embed", (v, e)),
        ("enc_wx", (e, h)),
        ("enc_wh", (h, h)),
        ("enc_b", (h,)),
        ("init_w", (h,)),
        ("init_b", ()),
        ("kprior_w", (h,)),
        ("kprior_b", ()),
        ("zprior_w", (h, d)),
        ("zprior_b", (d,)),
        ("zslot_w", (d, h)),
        ("zslot_b", (h,)),
        ("att_enc", (h, a)),
        ("att_dec", (hd, a)),
        ("att_b", (a,)),
        ("att_v", (a,)),
        ("dec_init_w", (h, hd)),
        ("dec_init_b", (hd,)),
        ("dec_wx", (e, hd)),
        ("dec_wc", (h, hd)),
        ("dec_wh", (hd, hd)),
        ("dec_b", (hd,)),
        ("out_w", (hd, v)),
        ("out_c", (h, v)),
        ("out_b", (v,)),
    ]


class ModelParams:
    """Named trainable tensors in a fixed order (the checkpoint order)."""

    def __init__(self, cfg: ModelConfig, tensors: dict[str, Tensor]):
        self.cfg = cfg
        self.tensors = tensors

    @staticmethod
    def init(cfg: ModelConfig, seed: int = 0, scale: float = 0.1) -> "ModelParams":
        cfg.validate()
        rng = derived_rng(seed, 1)
        tensors: dict[str, Tensor] = {}
        for name, shape in param_shapes(cfg):
            if name.endswith("_b"):
                data = np.zeros(shape)
            else:
                data = rng.normal(size=shape) * scale
            tensors[name] = Tensor(data, name=name, trainable=True)
        return ModelParams(cfg, tensors)

    @staticmethod
    def from_arrays(cfg: ModelConfig, arrays: dict[str, np.ndarray]) -> "ModelParams":
        tensors: dict[str, Tensor] = {}
        for name, shape in param_shapes(cfg):
            if name not in arrays:
                raise ContractError(f"missing parameter {name!r}")
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise ContractError(
                    f"parameter {name!r} has shape {arr.shape}, expected {shape}")
            tensors[name] = Tensor(arr, name=name, trainable=True)
        extra = set(arrays) - set(tensors)
        if extra:
            raise ContractError(f"unknown parameters in checkpoint: {sorted(extra)}")
        return ModelParams(cfg, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def names(self):
        return list(self.tensors.keys())

    def num_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, {
            name: Tensor(t.data.copy(), name=name, trainable=True)
            for name, t in self.tensors.items()})

    def head_names(self, head: str) -> tuple[str, ...]:
        if head == "initializer":
            return INITIALIZER_HEAD
        if head == "knowledge_prior":
            return KNOWLEDGE_PRIOR_HEAD
        raise ContractError(f"unknown head {head!r}")


# ---------------------------------------------------------------------------
# encoder


@dataclass
class EncodedContext:
    """Per-token encoder states and their mean-pooled summary."""

    states: Tensor  # (L, hidden)
    pooled: Tensor  # (hidden,)


def _check_tokens(tokens: Sequence[int], vocab_size: int, what: str) -> None:
    for tok in tokens:
        if not 0 <= tok < vocab_size:
            raise ContractError(f"{what} token id {tok} outside vocabulary of {vocab_size}")


def encode_context(params: ModelParams, example: DialogueExample, s: int) -> EncodedContext:
    """Encode history and candidate ``s`` joined by the separator token.

    History longer than the cap keeps its most recent tokens; the candidate
    keeps its head.
    """
    cfg = params.cfg
    if not 0 <= s < len(example.candidates):
        raise ContractError(f"candidate index {s} out of range")
    hist = list(example.history[-cfg.max_history:])
    cand = list(example.candidates[s][:cfg.max_candidate])
    if not hist and not cand:
        raise ContractError("cannot encode an empty history with an empty candidate")
    tokens = hist + [SEP] + cand
    _check_tokens(tokens, cfg.vocab_size, "context")
    t = params.tensors
    emb = ad.gather_rows(t["embed"], np.asarray(tokens, dtype=np.int64))
    wx, wh, b = t["enc_wx"], t["enc_wh"], t["enc_b"]
    state = Tensor(np.zeros(cfg.hidden_dim))
    rows = []
    for i in range(len(tokens)):
        x = ad.gather_rows(emb, i)
        state = ad.tanh(ad.add(ad.add(ad.matmul(x, wx), ad.matmul(state, wh)), b))
        rows.append(state)
    states = ad.stack_rows(rows)
    pooled = ad.reduce_mean(states, axis=0)
    return EncodedContext(states=states, pooled=pooled)


# ---------------------------------------------------------------------------
# heads


def _sigmoid_and_logs(logit: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """sigmoid(x), log sigmoid(x), log(1 - sigmoid(x)) via a stable pairing."""
    pair = ad.softmax(ad.stack_rows([logit, Tensor(0.0)]))
    logs = ad.log(pair)
    return ad.gather_rows(pair, 0), ad.gather_rows(logs, 0), ad.gather_rows(logs, 1)


def initializer_score_logit(params: ModelParams, pooled: Tensor) -> Tensor:
    t = params.tensors
    return ad.add(ad.matmul(pooled, t["init_w"]), t["init_b"])


def initializer_scores(params: ModelParams, example: DialogueExample, *,
                       prior: str, encodings: Sequence[EncodedContext] | None = None) -> Tensor:
    """Per-candidate relevance scores in (0, 1) from the selection head.

    Only defined for the uniform-prior configuration; the learnable prior
    replaces this head entirely.
    """
    if prior != "uniform":
        raise ContractError("initializer scores are only defined in uniform-prior mode")
    scores = []
    for i in range(len(example.candidates)):
        enc = encodings[i] if encodings is not None else encode_context(params, example, i)
        sig, _, _ = _sigmoid_and_logs(initializer_score_logit(params, enc.pooled))
        scores.append(sig)
    return ad.stack_rows(scores)


def knowledge_prior_logits(params: ModelParams, example: DialogueExample, *,
                           prior: str, encodings: Sequence[EncodedContext] | None = None) -> Tensor:
    """Per-candidate logits of the learnable knowledge prior (softmax weights).

    With one candidate the softmax puts mass 1 on it. Calling this under the
    uniform prior is a contract error.
    """
    if prior != "learnable":
        raise ContractError("knowledge prior logits are only defined in learnable-prior mode")
    t = params.tensors
    logits = []
    for i in range(len(example.candidates)):
        enc = encodings[i] if encodings is not None else encode_context(params, example, i)
        logits.append(ad.add(ad.matmul(enc.pooled, t["kprior_w"]), t["kprior_b"]))
    return ad.stack_rows(logits)


def latent_prior_mean(params: ModelParams, example: DialogueExample, s: int,
                      encoded: EncodedContext | None = None) -> Tensor:
    """Mean of the unit-variance Gaussian prior over the response latent."""
    enc = encoded if encoded is not None else encode_context(params, example, s)
    t = params.tensors
    return ad.add(ad.matmul(enc.pooled, t["zprior_w"]), t["zprior_b"])


def latent_prior_log_density(mu: Tensor, z) -> Tensor:
    """log N(z; mu, I) up to the additive constant: -||z - mu||^2 / 2."""
    zt = z if isinstance(z, Tensor) else Tensor(z)
    if zt.shape != mu.shape:
        raise ContractError(f"latent shape {zt.shape} does not match mean {mu.shape}")
    return ad.scale(ad.squared_l2(ad.sub(zt, mu)), -0.5)


# ---------------------------------------------------------------------------
# decoder


@dataclass
class DecoderCursor:
    """Incremental decoding state: attended slots, their projections, and the
    recurrent state after the consumed prefix."""

    slots: Tensor       # (L+1, hidden)
    proj: Tensor        # (L+1, att)
    state: Tensor       # (dec_hidden,)


def decoder_start(params: ModelParams, encoded: EncodedContext, z) -> DecoderCursor:
    t = params.tensors
    zt = z if isinstance(z, Tensor) else Tensor(z)
    if zt.shape != (params.cfg.latent_dim,):
        raise ContractError(
            f"latent has shape {zt.shape}, expected ({params.cfg.latent_dim},)")
    zrow = ad.add(ad.matmul(zt, t["zslot_w"]), t["zslot_b"])
    slots = ad.concat([encoded.states, zrow], axis=0)
    proj = ad.matmul(slots, t["att_enc"])
    state = ad.tanh(ad.add(ad.matmul(encoded.pooled, t["dec_init_w"]), t["dec_init_b"]))
    return DecoderCursor(slots=slots, proj=proj, state=state)


def decoder_advance(params: ModelParams, cur: DecoderCursor, token: int) -> tuple[DecoderCursor, Tensor]:
    """Consume one token; returns the new cursor and next-token logits (V,)."""
    t = params.tensors
    if not 0 <= token < params.cfg.vocab_size:
        raise ContractError(f"decoder input token {token} outside vocabulary")
    e = ad.gather_rows(t["embed"], int(token))
    q = ad.add(ad.matmul(cur.state, t["att_dec"]), t["att_b"])
    scores = ad.matmul(ad.tanh(ad.add(cur.proj, q)), t["att_v"])
    weights = ad.softmax(scores)
    ctx = ad.matmul(weights, cur.slots)
    pre = ad.add(ad.add(ad.matmul(e, t["dec_wx"]), ad.matmul(ctx, t["dec_wc"])),
                 ad.add(ad.matmul(cur.state, t["dec_wh"]), t["dec_b"]))
    state = ad.tanh(pre)
    logits = ad.add(ad.add(ad.matmul(state, t["out_w"]), ad.matmul(ctx, t["out_c"])),
                    t["out_b"])
    return DecoderCursor(slots=cur.slots, proj=cur.proj, state=state), logits


def decode_logprob(params: ModelParams, example: DialogueExample, s: int, z,
                   encoded: EncodedContext | None = None) -> Tensor:
    """Teacher-forced log-probability of the full response under candidate
    ``s`` and latent ``z`` (scalar tensor). Tokens after the first
    end-of-sequence token are padding and do not contribute."""
    cfg = params.cfg
    response = list(example.response)
    if EOS in response:
        response = response[:response.index(EOS) + 1]
    if not response:
        raise ContractError("cannot score an empty response")
    if len(response) > cfg.max_response:
        raise ContractError(
            f"response of length {len(response)} exceeds the cap {cfg.max_response}")
    _check_tokens(response, cfg.vocab_size, "response")
    enc = encoded if encoded is not None else encode_context(params, example, s)
    cur = decoder_start(params, enc, z)
    total: Tensor | None = None
    prev = BOS
    for target in response:
        cur, logits = decoder_advance(params, cur, prev)
        logp = ad.gather_rows(ad.log(ad.softmax(logits)), int(target))
        total = logp if total is None else ad.add(total, logp)
        prev = int(target)
    return total


def decode_step(params: ModelParams, example: DialogueExample, s: int, z,
                prefix: Sequence[int], encoded: EncodedContext | None = None) -> Tensor:
    """Next-token logits after teacher-forcing ``prefix`` (which starts with
    the begin-of-sequence token)."""
    if not prefix:
        raise ContractError("decode_step needs a non-empty prefix")
    if prefix[0] != BOS:
        raise ContractError("decode_step prefix must start with the begin-of-sequence token")
    enc = encoded if encoded is not None else encode_context(params, example, s)
    cur = decoder_start(params, enc, z)
    logits: Tensor | None = None
    for token in prefix:
        cur, logits = decoder_advance(params, cur, int(token))
    return logits
