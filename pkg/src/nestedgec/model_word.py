"""Word-level attentional encoder-decoder backbone.

Bidirectional GRU encoder, GRU decoder fed with the previous
attention-combined state, bilinear-tanh attention and a softmax output
layer. The character-level pieces live in :mod:`nestedgec.model_hybrid`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np

from . import numcore as nc
from .corpus import BOS, Batch
from .numcore import Tensor

VARIANTS = ("baseline", "hybrid", "nested")


@dataclass(frozen=True)
class ModelConfig:
    variant: str
    src_vocab: int
    tgt_vocab: int
    char_vocab: int = 0
    emb: int = 64
    hidden: int = 64
    att: int = 0
    char_emb: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown model variant {self.variant!r}")
        if min(self.src_vocab, self.tgt_vocab, self.emb, self.hidden) < 1:
            raise ValueError("vocabulary sizes and dimensions must be positive")
        if self.variant != "baseline" and self.char_vocab < 1:
            raise ValueError("hybrid variants need a character vocabulary")

    @property
    def att_dim(self) -> int:
        return self.att or self.hidden

    @property
    def char_emb_dim(self) -> int:
        return self.char_emb or self.emb

    @property
    def uses_chars(self) -> bool:
        return self.variant != "baseline"


def _gru_shapes(prefix: str, inp: int, hid: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}/W": (inp, 3 * hid), f"{prefix}/U": (hid, 2 * hid),
            f"{prefix}/Uh": (hid, hid), f"{prefix}/b": (3 * hid,)}


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every parameter of the given variant."""
    E, H, A = cfg.emb, cfg.hidden, cfg.att_dim
    shapes: dict[str, tuple[int, ...]] = {
        "src_emb": (cfg.src_vocab, E),
        "tgt_emb": (cfg.tgt_vocab, E),
        **_gru_shapes("enc_f", E, H),
        **_gru_shapes("enc_b", E, H),
        **_gru_shapes("dec", E, H),
        "dec_init": (H,),
        "att/phi1_W": (H, A), "att/phi1_b": (A,),
        "att/phi2_W": (2 * H, A), "att/phi2_b": (A,),
        "comb/W": (2 * H + H, H),
        "out/g_W": (H, cfg.tgt_vocab), "out/g_b": (cfg.tgt_vocab,),
    }
    if cfg.uses_chars:
        C, Ec = cfg.char_vocab, cfg.char_emb_dim
        shapes.update({
            "src_char_emb": (C, Ec),
            **_gru_shapes("char_enc", Ec, E),
            "sep/W_hat": (2 * H + H, H),
            "tgt_char_emb": (C, Ec),
            **_gru_shapes("char_dec", Ec, H),
            "char_out/gc_W": (H, C), "char_out/gc_b": (C,),
        })
    if cfg.variant == "nested":
        shapes.update({
            **_gru_shapes("char_dec_nested", Ec, H),
            "char_att/phi1_W": (H, A), "char_att/phi1_b": (A,),
            "char_att/phi2_W": (E, A), "char_att/phi2_b": (A,),
            "char_comb/W_c": (E + H, H),
        })
    return shapes


def is_bias(name: str) -> bool:
    return name.endswith("/b") or name.endswith("_b")


class ModelParams(Mapping[str, Tensor]):
    """Named parameter tensors of one model, plus its configuration."""

    def __init__(self, config: ModelConfig, tensors: Mapping[str, Tensor]):
        expected = param_shapes(config)
        if set(expected) != set(tensors):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ValueError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if tuple(tensors[name].shape) != shape:
                raise ValueError(f"{name}: shape {tensors[name].shape}, expected {shape}")
        self.config = config
        self.tensors = {name: tensors[name] for name in expected}

    @classmethod
    def zeros(cls, config: ModelConfig) -> "ModelParams":
        return cls(config, {n: Tensor(np.zeros(s), requires_grad=True, name=n)
                            for n, s in param_shapes(config).items()})

    @classmethod
    def uniform(cls, config: ModelConfig, rng: nc.Rng, bound: float) -> "ModelParams":
        tensors = {}
        for name, shape in param_shapes(config).items():
            data = np.zeros(shape) if is_bias(name) else rng.uniform(-bound, bound, shape)
            tensors[name] = Tensor(data, requires_grad=True, name=name)
        return cls(config, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def grads(self) -> dict[str, np.ndarray]:
        return {n: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for n, t in self.tensors.items()}

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {n: Tensor(t.data.copy(), requires_grad=True, name=n)
                                         for n, t in self.tensors.items()})

    def all_finite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in self.tensors.values())


@dataclass
class Mode:
    """Train/inference switch for dropout."""

    train: bool = False
    dropout: float = 0.0
    rng: nc.Rng | None = None

    def drop(self, x: Tensor) -> Tensor:
        return nc.dropout(x, self.dropout, self.rng, self.train)


INFERENCE = Mode()


# -- encoder ------------------------------------------------------------------


@dataclass
class EncoderStates:
    """Encoder outputs ``h_t = [f_t; b_t]`` for a (B, T) source batch."""

    states: Tensor          # (B, T, 2H)
    mask: np.ndarray        # (B, T) bool, True on real tokens
    keys: Tensor            # (B, T, A) attention projection of the states

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    def repeat(self, n: int) -> "EncoderStates":
        """Tile a single-sentence encoding ``n`` times (beam search)."""
        idx = np.zeros(n, dtype=np.int64)
        return EncoderStates(nc.take(self.states, idx), self.mask[idx], nc.take(self.keys, idx))

    def select(self, rows: np.ndarray) -> "EncoderStates":
        return EncoderStates(nc.take(self.states, rows), self.mask[rows], nc.take(self.keys, rows))


def project_keys(params: Mapping[str, Tensor], states: Tensor, prefix: str = "att") -> Tensor:
    return nc.tanh(nc.linear(states, params[f"{prefix}/phi2_W"], params[f"{prefix}/phi2_b"]))


def source_embeddings(params: ModelParams, src_ids: np.ndarray, mode: Mode = INFERENCE,
                      oov_vectors: tuple[tuple[np.ndarray, np.ndarray], Tensor] | None = None) -> Tensor:
    """Word embeddings of the source; ``oov_vectors`` (index, rows) overwrite OOV slots."""
    x = nc.embedding(params["src_emb"], src_ids)
    if oov_vectors is not None and len(oov_vectors[0][0]):
        x = nc.index_put(x, oov_vectors[0], oov_vectors[1])
    return mode.drop(x)


def encode_source(params: ModelParams, src_ids: np.ndarray, src_mask: np.ndarray,
                  mode: Mode = INFERENCE, embedded: Tensor | None = None) -> EncoderStates:
    """Run the forward and backward GRUs over a right-padded source batch.

    The forward stream starts from a zero state at the first token; the
    backward stream starts from zero after each sentence's last real token,
    so padding never leaks into real positions.
    """
    src_ids = np.atleast_2d(src_ids)
    src_mask = np.atleast_2d(np.asarray(src_mask, dtype=bool))
    x = embedded if embedded is not None else source_embeddings(params, src_ids, mode)
    if x.shape[-1] != params["enc_f/W"].shape[0]:
        raise ValueError(f"source embedding size {x.shape[-1]} does not fit the encoder")
    B, T = src_ids.shape
    H = params["enc_f/Uh"].shape[0]
    zero = Tensor(np.zeros((B, H)))
    fwd, bwd = [], [None] * T
    f = zero
    for t in range(T):
        f = nc.gru_cell(params, f, x[:, t], prefix="enc_f")
        fwd.append(f)
    b = zero
    for t in reversed(range(T)):
        step = nc.gru_cell(params, b, x[:, t], prefix="enc_b")
        m = src_mask[:, t:t + 1]
        b = step if m.all() else nc.where(m, step, b)
        bwd[t] = b
    states = nc.concat([nc.stack(fwd, axis=1), nc.stack(bwd, axis=1)], axis=-1)
    return EncoderStates(states, src_mask, project_keys(params, states))


# -- attention / decoder --------------------------------------------------------


@dataclass
class AttentionRow:
    weights: Tensor     # (B, T)
    context: Tensor     # (B, 2H)


def attend(params: Mapping[str, Tensor], query: Tensor, states: Tensor, keys: Tensor,
           mask: np.ndarray, prefix: str = "att") -> AttentionRow:
    """Score ``tanh(q W1 + b1) . keys_k`` and softmax-normalise over unmasked k."""
    mask = np.asarray(mask, dtype=bool)
    if mask.size == 0 or not mask.any(axis=-1).all():
        raise ValueError("attention over an empty or fully masked source")
    q = nc.tanh(nc.linear(query, params[f"{prefix}/phi1_W"], params[f"{prefix}/phi1_b"]))
    w = nc.softmax(nc.batched_dot(q, keys), mask=mask)
    return AttentionRow(w, nc.weighted_sum(w, states))


def attend_encoder(params: ModelParams, d: Tensor, enc: EncoderStates) -> AttentionRow:
    return attend(params, d, enc.states, enc.keys, enc.mask)


@dataclass
class DecoderStep:
    d: Tensor            # GRU state d_s
    dbar: Tensor         # ReLU(W [c_s; d_s])
    attention: AttentionRow
    logp: Tensor | None = None


def initial_state(params: ModelParams, batch_size: int) -> Tensor:
    return nc.take(nc.reshape(params["dec_init"], (1, -1)), np.zeros(batch_size, dtype=np.int64))


def decoder_core(params: ModelParams, dbar_prev: Tensor, y_prev: np.ndarray, enc: EncoderStates,
                 mode: Mode = INFERENCE) -> DecoderStep:
    y = mode.drop(nc.embedding(params["tgt_emb"], np.asarray(y_prev)))
    d = nc.gru_cell(params, dbar_prev, y, prefix="dec")
    att = attend_encoder(params, d, enc)
    dbar = nc.relu(nc.matmul(nc.concat([att.context, d], axis=-1), params["comb/W"]))
    return DecoderStep(d, dbar, att)


def output_logp(params: ModelParams, dbar: Tensor, mode: Mode = INFERENCE) -> Tensor:
    return nc.log_softmax(nc.linear(mode.drop(dbar), params["out/g_W"], params["out/g_b"]))


def decode_step(params: ModelParams, dbar_prev: Tensor, y_prev: np.ndarray, enc: EncoderStates,
                mode: Mode = INFERENCE) -> DecoderStep:
    """One decoder step; ``logp`` is the (B, V) log-distribution of the next word."""
    step = decoder_core(params, dbar_prev, y_prev, enc, mode)
    step.logp = output_logp(params, step.dbar, mode)
    return step


@dataclass
class WordPass:
    """Teacher-forced decoder run over a batch."""

    loss: Tensor                 # summed NLL / batch size
    nll_sum: float
    steps: list[DecoderStep]
    enc: EncoderStates

    def stacked(self, attr: str) -> Tensor:
        if attr == "context":
            return nc.stack([s.attention.context for s in self.steps], axis=1)
        return nc.stack([getattr(s, attr) for s in self.steps], axis=1)

    def attention_rows(self) -> np.ndarray:
        """(B, S, T) attention weights as plain numbers."""
        return np.stack([s.attention.weights.data for s in self.steps], axis=1)


def word_pass(params: ModelParams, batch: Batch, mode: Mode = INFERENCE,
              embedded: Tensor | None = None) -> WordPass:
    enc = encode_source(params, batch.src_ids, batch.src_mask, mode, embedded)
    B, S = batch.tgt_in.shape
    dbar = initial_state(params, B)
    steps = []
    for s in range(S):
        step = decoder_core(params, dbar, batch.tgt_in[:, s], enc, mode)
        steps.append(step)
        dbar = step.dbar
    dbars = nc.stack([st.dbar for st in steps], axis=1)
    logp = output_logp(params, dbars, mode)
    total = nc.nll(logp, batch.tgt_out, batch.tgt_mask)
    loss = nc.mul(total, 1.0 / B)
    return WordPass(loss, float(total.data), steps, enc)


def word_loss(params: ModelParams, batch: Batch, mode: Mode = INFERENCE) -> Tensor:
    """Teacher-forced cross-entropy summed over target tokens, averaged per sentence.

    OOV target tokens contribute the probability of UNK. For the hybrid
    variants the source OOV slots carry character-composed embeddings.
    """
    embedded = None
    if params.config.uses_chars:
        from .model_hybrid import hybrid_source_embeddings
        embedded, _ = hybrid_source_embeddings(params, batch, mode)
    return word_pass(params, batch, mode, embedded).loss


def start_tokens(n: int) -> np.ndarray:
    return np.full(n, BOS, dtype=np.int64)
