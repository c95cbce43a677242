"""Character-level components of the hybrid and nested-attention models.

* a forward character GRU composes embeddings for source OOV words;
* a separate-path transform of the word decoder's context and state
  initialises a character decoder at every target UNK;
* hard attention (argmax of the word attention row) picks the source word
  the UNK is aligned to;
* if that source word is itself OOV, the nested decoder attends over its
  character encoder states, otherwise the basic character decoder is used.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numcore as nc
from .corpus import BOW, CPAD, Batch
from .model_word import INFERENCE, Mode, ModelParams, WordPass, attend, project_keys, word_pass
from .numcore import Tensor


@dataclass
class CharEncoding:
    """Character GRU states for one or more words.

    Batched form: ``states`` (N, M, E), ``mask`` (N, M), ``final`` (N, E).
    Single-word form drops the leading axis.
    """

    states: Tensor
    mask: np.ndarray
    final: Tensor

    def keys(self, params: ModelParams) -> Tensor:
        return project_keys(params, self.states, prefix="char_att")


def _pad_chars(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), CPAD, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = True
    return ids, mask


def encode_chars(params: ModelParams, words: Sequence[Sequence[int]], mode: Mode = INFERENCE) -> CharEncoding:
    """Run the forward character GRU over each framed character sequence."""
    if not words or any(len(w) == 0 for w in words):
        raise ValueError("character sequences must be non-empty")
    ids, mask = _pad_chars(words)
    N, M = ids.shape
    x = mode.drop(nc.embedding(params["src_char_emb"], ids))
    E = params["char_enc/Uh"].shape[0]
    h = Tensor(np.zeros((N, E)))
    states = []
    for n in range(M):
        step = nc.gru_cell(params, h, x[:, n], prefix="char_enc")
        m = mask[:, n:n + 1]
        h = step if m.all() else nc.where(m, step, h)
        states.append(h)
    return CharEncoding(nc.stack(states, axis=1), mask, h)


def compose_oov_embedding(params: ModelParams, char_ids: Sequence[int], mode: Mode = INFERENCE) -> CharEncoding:
    """Embedding of one OOV word: the last character GRU state (dimension E)."""
    enc = encode_chars(params, [list(char_ids)], mode)
    return CharEncoding(enc.states[0], enc.mask[0], enc.final[0])


def hybrid_source_embeddings(params: ModelParams, batch: Batch, mode: Mode = INFERENCE):
    """Source embeddings with OOV slots replaced by composed character vectors.

    Returns the (B, T, E) embedding tensor and the char encoding of the
    OOV words (or None), ordered like ``sorted(batch.src_chars)``.
    """
    from .model_word import source_embeddings

    keys = sorted(batch.src_chars)
    if not keys:
        return source_embeddings(params, batch.src_ids, mode), None
    enc = encode_chars(params, [batch.src_chars[k] for k in keys], mode)
    index = (np.array([k[0] for k in keys]), np.array([k[1] for k in keys]))
    # dropout on word embeddings is applied once, after substitution
    x = source_embeddings(params, batch.src_ids, mode, oov_vectors=(index, enc.final))
    return x, enc


def separate_path_init(params: ModelParams, context: Tensor, d: Tensor) -> Tensor:
    """``ReLU(W_hat [c_s; d_s])``: initial state for the character decoder."""
    return nc.relu(nc.matmul(nc.concat([context, d], axis=-1), params["sep/W_hat"]))


def hard_attention_index(row, mask: np.ndarray | None = None) -> int:
    """Argmax source position of an attention row (lowest index on ties)."""
    a = np.asarray(row.data if isinstance(row, Tensor) else row, dtype=np.float64).reshape(-1)
    if mask is not None:
        m = np.asarray(mask, dtype=bool).reshape(-1)
        a = np.where(m, a, -np.inf)
        if not m.any():
            raise ValueError("hard attention over an empty row")
    if a.size == 0:
        raise ValueError("hard attention over an empty row")
    return int(np.argmax(a))


@dataclass
class CharDecodeState:
    d: Tensor                         # d^c_n
    dbar: Tensor | None = None        # ReLU(W_c [c^c_n; d^c_n]) (nested only)
    weights: Tensor | None = None     # character attention row (nested only)

    @property
    def carry(self) -> Tensor:
        """What the next step's GRU receives as previous state."""
        return self.d if self.dbar is None else self.dbar


def char_output_logp(params: ModelParams, h: Tensor, mode: Mode = INFERENCE) -> Tensor:
    return nc.log_softmax(nc.linear(mode.drop(h), params["char_out/gc_W"], params["char_out/gc_b"]))


def _basic_state(params: ModelParams, prev: Tensor, y_prev: np.ndarray, mode: Mode) -> CharDecodeState:
    y = mode.drop(nc.embedding(params["tgt_char_emb"], np.asarray(y_prev)))
    return CharDecodeState(nc.gru_cell(params, prev, y, prefix="char_dec"))


def _nested_state(params: ModelParams, prev: Tensor, y_prev: np.ndarray, src: CharEncoding,
                  keys: Tensor, mode: Mode) -> CharDecodeState:
    y = mode.drop(nc.embedding(params["tgt_char_emb"], np.asarray(y_prev)))
    d = nc.gru_cell(params, prev, y, prefix="char_dec_nested")
    att = attend(params, d, src.states, keys, src.mask, prefix="char_att")
    dbar = nc.relu(nc.matmul(nc.concat([att.context, d], axis=-1), params["char_comb/W_c"]))
    return CharDecodeState(d, dbar, att.weights)


def char_decode_step_basic(params: ModelParams, prev: Tensor, y_prev: np.ndarray,
                           mode: Mode = INFERENCE) -> tuple[CharDecodeState, Tensor]:
    """``d^c_n = GRU_c(prev, y^c_{n-1})`` with prev = d_hat at n=0, d^c_{n-1} after."""
    state = _basic_state(params, prev, y_prev, mode)
    return state, char_output_logp(params, state.d, mode)


def char_decode_step_nested(params: ModelParams, prev: Tensor, y_prev: np.ndarray,
                            src: CharEncoding, keys: Tensor | None = None,
                            mode: Mode = INFERENCE) -> tuple[CharDecodeState, Tensor]:
    """Nested step: GRU, character attention over ``src``, then combination.

    ``prev`` is d_hat at n=0 and the previous combined state after. The
    output distribution is read from the combined state.
    """
    keys = src.keys(params) if keys is None else keys
    state = _nested_state(params, prev, y_prev, src, keys, mode)
    return state, char_output_logp(params, state.dbar, mode)


def char_sequence_pass(params: ModelParams, init: Tensor, char_in: np.ndarray, nested: bool,
                       src: CharEncoding | None = None, mode: Mode = INFERENCE):
    """Teacher-forced character decoder over (N, L) inputs.

    Returns per-step log-probs (N, L, C) and, for the nested decoder, the
    character attention rows of every step.
    """
    keys = src.keys(params) if nested else None
    prev = init
    outs, rows = [], []
    for n in range(char_in.shape[1]):
        if nested:
            state = _nested_state(params, prev, char_in[:, n], src, keys, mode)
            outs.append(state.dbar)
            rows.append(state.weights)
        else:
            state = _basic_state(params, prev, char_in[:, n], mode)
            outs.append(state.d)
        prev = state.carry
    logp = char_output_logp(params, nc.stack(outs, axis=1), mode)
    return logp, rows


# -- loss -----------------------------------------------------------------------


@dataclass
class LossBreakdown:
    word: Tensor
    c1: Tensor
    c2: Tensor
    alpha: float
    beta: float
    total: Tensor
    word_nll: float = 0.0          # unnormalised sums, for per-token reporting
    c1_nll: float = 0.0
    c2_nll: float = 0.0
    n_word_tokens: int = 0
    n_c1_chars: int = 0
    n_c2_chars: int = 0

    def values(self) -> dict[str, float]:
        return {"loss_w": float(self.word.data), "loss_c1": float(self.c1.data),
                "loss_c2": float(self.c2.data), "total": float(self.total.data)}

    @property
    def per_token(self) -> float:
        """Unweighted NLL per predicted symbol (words and characters)."""
        n = self.n_word_tokens + self.n_c1_chars + self.n_c2_chars
        return (self.word_nll + self.c1_nll + self.c2_nll) / max(n, 1)


@dataclass
class UnkAlignment:
    """Where each target OOV in a batch was routed during a teacher-forced pass."""

    rows: np.ndarray        # batch row
    steps: np.ndarray       # target position
    sources: np.ndarray     # z_s
    source_oov: np.ndarray  # bool: aligned source word is OOV
    nested: np.ndarray      # bool: decoded with the nested recurrence


def align_unks(batch: Batch, wp: WordPass, nested_variant: bool) -> UnkAlignment:
    keys = sorted(batch.tgt_chars)
    att = wp.attention_rows()
    rows = np.array([k[0] for k in keys], dtype=np.int64)
    steps = np.array([k[1] for k in keys], dtype=np.int64)
    z = np.array([hard_attention_index(att[b, s], batch.src_mask[b]) for b, s in keys], dtype=np.int64)
    src_oov = batch.src_oov[rows, z] if keys else np.zeros(0, dtype=bool)
    return UnkAlignment(rows, steps, z, src_oov, src_oov & nested_variant)


def total_loss(params: ModelParams, batch: Batch, alpha: float = 0.5, beta: float = 0.5,
               mode: Mode = INFERENCE) -> LossBreakdown:
    """``Loss_w + alpha * Loss_c1 + beta * Loss_c2``, each summed and averaged per sentence.

    ``Loss_c1`` covers target OOVs whose hard-attended source word is in
    vocabulary, ``Loss_c2`` those aligned to a source OOV. In the ``hybrid``
    variant both go through the basic character decoder; in ``nested`` the
    second group uses character attention. The baseline has no character
    losses.
    """
    if alpha < 0 or beta < 0:
        raise ValueError("loss weights must be non-negative")
    cfg = params.config
    B = len(batch)
    zero = Tensor(0.0)
    if not cfg.uses_chars:
        wp = word_pass(params, batch, mode)
        return LossBreakdown(wp.loss, zero, zero, alpha, beta, wp.loss, wp.nll_sum,
                             n_word_tokens=batch.n_target_tokens)
    embedded, src_enc = hybrid_source_embeddings(params, batch, mode)
    wp = word_pass(params, batch, mode, embedded)
    losses = {"c1": zero, "c2": zero}
    sums = {"c1": 0.0, "c2": 0.0}
    counts = {"c1": 0, "c2": 0}
    if batch.tgt_chars:
        al = align_unks(batch, wp, cfg.variant == "nested")
        contexts = wp.stacked("context")
        ds = wp.stacked("d")
        dhat = separate_path_init(params, nc.take(contexts, (al.rows, al.steps)), nc.take(ds, (al.rows, al.steps)))
        tgt_words = [batch.tgt_chars[(b, s)] for b, s in zip(al.rows, al.steps)]
        src_slot = {k: i for i, k in enumerate(sorted(batch.src_chars))}
        for group, sel in (("c1", ~al.source_oov), ("c2", al.source_oov)):
            idx = np.flatnonzero(sel)
            if idx.size == 0:
                continue
            ids, mask = _pad_chars([tgt_words[i] for i in idx])
            char_in, char_out, out_mask = ids[:, :-1], ids[:, 1:], mask[:, 1:]
            init = nc.take(dhat, idx)
            use_nested = group == "c2" and cfg.variant == "nested"
            src = None
            if use_nested:
                slots = np.array([src_slot[(al.rows[i], al.sources[i])] for i in idx])
                src = CharEncoding(nc.take(src_enc.states, slots), src_enc.mask[slots], nc.take(src_enc.final, slots))
            logp, _ = char_sequence_pass(params, init, char_in, use_nested, src, mode)
            total = nc.nll(logp, char_out, out_mask)
            losses[group] = nc.mul(total, 1.0 / B)
            sums[group] = float(total.data)
            counts[group] = int(out_mask.sum())
    total = nc.add(nc.add(wp.loss, nc.mul(losses["c1"], alpha)), nc.mul(losses["c2"], beta))
    return LossBreakdown(wp.loss, losses["c1"], losses["c2"], alpha, beta, total,
                         wp.nll_sum, sums["c1"], sums["c2"], batch.n_target_tokens,
                         counts["c1"], counts["c2"])


def char_sequence_logprob(params: ModelParams, dhat: Tensor, word_chars: Sequence[int],
                          src: CharEncoding | None = None) -> float:
    """Log-probability of a framed character sequence ``[BOW, c.., EOW]`` given d_hat."""
    ids = np.asarray(word_chars, dtype=np.int64)[None, :]
    if ids[0, 0] != BOW:
        raise ValueError("character sequence must start with BOW")
    nested = src is not None
    if nested and src.states.ndim == 2:
        src = CharEncoding(nc.reshape(src.states, (1,) + src.states.shape), src.mask[None],
                           nc.reshape(src.final, (1,) + src.final.shape))
    init = nc.reshape(dhat, (1, -1)) if dhat.ndim == 1 else dhat
    with nc.no_grad():
        logp, _ = char_sequence_pass(params, init, ids[:, :-1], nested, src)
    return float(logp.data[0, np.arange(ids.shape[1] - 1), ids[0, 1:]].sum(dtype=np.float64))
