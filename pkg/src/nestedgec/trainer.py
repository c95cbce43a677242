"""Mini-batch training: initialisation, Adam/SGD, clipping, decay, checkpoints."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import numcore as nc
from .corpus import SentencePair, Vocabularies, encode_batch
from .model_hybrid import LossBreakdown, total_loss
from .model_word import ModelConfig, ModelParams, Mode
from .records import json_record, read_json_record, read_records, write_records

# optimiser scalars kept as exact JSON so a resumed run is bit-identical
_OPT_META = "opt/meta"

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"NAHM"


class NonFiniteLoss(FloatingPointError):
    def __init__(self, iteration: int, values: dict):
        super().__init__(f"non-finite loss at iteration {iteration}: {values}")
        self.iteration = iteration


@dataclass
class TrainConfig:
    batch_size: int = 128
    lr: float = 0.0003
    decay: float = 0.95
    clip: float = 10.0
    dropout: float = 0.15
    alpha: float = 0.5
    beta: float = 0.5
    cost_interval: int = 100
    valid_interval: int = 5000
    checkpoint_interval: int = 10000
    valid_sample: int = 256
    epoch_checkpoints: bool = True
    seed: int = 1234
    emb: int = 64
    hidden: int = 64
    vocab_size: int = 30000
    optimizer: str = "adam"
    steps: int = 10000
    variant: str = "nested"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("batch_size", "cost_interval", "valid_interval", "checkpoint_interval",
                     "emb", "hidden", "vocab_size", "valid_sample"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr < 0 or not 0 < self.decay <= 1 or self.clip <= 0:
            raise ValueError("lr must be >= 0, decay in (0, 1], clip > 0")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def init_bound(hidden: int) -> float:
    return math.sqrt(3.0) / math.sqrt(hidden)


def init_params(model_config: ModelConfig, rng: nc.Rng) -> ModelParams:
    """Weights ~ U(-sqrt(3/H), sqrt(3/H)) for hidden size H; biases zero."""
    return ModelParams.uniform(model_config, rng, init_bound(model_config.hidden))


# -- optimisers -----------------------------------------------------------------


class Adam:
    name = "adam"

    def __init__(self, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def update(self, params: ModelParams, grads: dict[str, np.ndarray]) -> None:
        self.step += 1
        t = self.step
        c1 = 1.0 - self.b1 ** t
        c2 = 1.0 - self.b2 ** t
        lr = np.float32(self.lr * math.sqrt(c2) / c1)
        eps = np.float32(self.eps * math.sqrt(c2))
        for name, g in grads.items():
            p = params[name].data
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= np.float32(self.b1)
            m += np.float32(1 - self.b1) * g
            v *= np.float32(self.b2)
            v += np.float32(1 - self.b2) * (g * g)
            p -= lr * m / (np.sqrt(v) + eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {_OPT_META: json_record({"step": self.step, "lr": self.lr})}
        for k in self.m:
            out[f"opt/m/{k}"] = self.m[k]
            out[f"opt/v/{k}"] = self.v[k]
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        meta = read_json_record(arrays[_OPT_META])
        self.step, self.lr = int(meta["step"]), float(meta["lr"])
        self.m = {k[6:]: v.copy() for k, v in arrays.items() if k.startswith("opt/m/")}
        self.v = {k[6:]: v.copy() for k, v in arrays.items() if k.startswith("opt/v/")}


class SGD:
    name = "sgd"

    def __init__(self, lr: float):
        self.lr = lr
        self.step = 0

    def update(self, params: ModelParams, grads: dict[str, np.ndarray]) -> None:
        self.step += 1
        lr = np.float32(self.lr)
        for name, g in grads.items():
            params[name].data -= lr * g

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {_OPT_META: json_record({"step": self.step, "lr": self.lr})}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        meta = read_json_record(arrays[_OPT_META])
        self.step, self.lr = int(meta["step"]), float(meta["lr"])


def make_optimizer(config: TrainConfig):
    return Adam(config.lr) if config.optimizer == "adam" else SGD(config.lr)


# -- one step -------------------------------------------------------------------


@dataclass
class StepReport:
    loss: LossBreakdown
    grad_norm: float
    clipped_norm: float


def train_step(params: ModelParams, opt, batch, config: TrainConfig, rng: nc.Rng | None,
               iteration: int = 0) -> StepReport:
    """Forward, backward, clip to ``config.clip`` and apply one optimiser update."""
    params.zero_grad()
    mode = Mode(train=True, dropout=config.dropout, rng=rng)
    try:
        lb = total_loss(params, batch, config.alpha, config.beta, mode)
    except FloatingPointError as exc:
        raise NonFiniteLoss(iteration, {"error": str(exc)}) from exc
    vals = lb.values()
    if not all(math.isfinite(v) for v in vals.values()):
        raise NonFiniteLoss(iteration, vals)
    lb.total.backward()
    grads = params.grads()
    norm = nc.global_norm(grads)
    clipped = nc.clip_gradients(grads, config.clip)
    opt.update(params, clipped)
    params.zero_grad()
    return StepReport(lb, norm, nc.global_norm(clipped))


def lr_schedule_update(history: Sequence[float], lr: float, decay: float = 0.95) -> float:
    """Decay when each of the last two cost measurements rose over its predecessor."""
    if len(history) >= 3 and history[-1] > history[-2] > history[-3]:
        return lr * decay
    return lr


# -- checkpoints ------------------------------------------------------------------


@dataclass
class Checkpoint:
    params: ModelParams
    opt_state: dict[str, np.ndarray]
    iteration: int
    history: list[float]
    train_config: TrainConfig
    extra: dict = field(default_factory=dict)
    valid_loss: float = float("nan")

    @property
    def model_config(self) -> ModelConfig:
        return self.params.config


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    records = {name: t.data for name, t in ckpt.params.items()}
    records.update(ckpt.opt_state)
    records["meta/iteration"] = np.array([ckpt.iteration], dtype=np.float32)
    records["meta/history"] = np.asarray(ckpt.history, dtype=np.float32)
    records["meta/valid_loss"] = np.array([ckpt.valid_loss], dtype=np.float32)
    records["meta/config"] = json_record({
        "model": dataclasses.asdict(ckpt.params.config),
        "train": ckpt.train_config.to_dict(),
        "extra": ckpt.extra,
    })
    write_records(path, CHECKPOINT_MAGIC, records)


def load_checkpoint(path) -> Checkpoint:
    records = read_records(path, CHECKPOINT_MAGIC)
    try:
        meta = read_json_record(records.pop("meta/config"))
        iteration = int(records.pop("meta/iteration")[0])
        history = [float(x) for x in records.pop("meta/history")]
        valid_loss = float(records.pop("meta/valid_loss")[0])
    except KeyError as exc:
        raise ValueError(f"{path}: checkpoint lacks {exc}") from exc
    mcfg = ModelConfig(**meta["model"])
    opt_state = {k: v for k, v in records.items() if k.startswith("opt/")}
    tensors = {k: nc.Tensor(v, requires_grad=True, name=k) for k, v in records.items() if not k.startswith("opt/")}
    return Checkpoint(ModelParams(mcfg, tensors), opt_state, iteration, history,
                      TrainConfig.from_dict(meta["train"]), meta.get("extra", {}), valid_loss)


def select_model(checkpoints: Sequence, valid_losses: Sequence[float],
                 f_scores: Sequence[float] | Callable[[object], float], pool: int = 20,
                 iterations: Sequence[int] | None = None):
    """Best dev F0.5 among the ``pool`` checkpoints with lowest validation loss.

    ``f_scores`` may be a callable, evaluated only on the pooled candidates.
    Ties on F0.5 go to the earliest iteration.
    """
    if not checkpoints:
        raise ValueError("no checkpoints to select from")
    if iterations is None:
        iterations = [getattr(c, "iteration", i) for i, c in enumerate(checkpoints)]
    ranked = sorted(range(len(checkpoints)), key=lambda i: (valid_losses[i], iterations[i]))[:pool]
    best = None
    for i in ranked:
        f = f_scores(checkpoints[i]) if callable(f_scores) else f_scores[i]
        key = (-f, iterations[i])
        if best is None or key < best[0]:
            best = (key, i)
    return checkpoints[best[1]]


# -- loop -------------------------------------------------------------------------


def epoch_rng(seed: int, epoch: int) -> nc.Rng:
    return nc.Rng(int(np.random.SeedSequence([seed, epoch]).generate_state(1, np.uint64)[0]))


def evaluate_loss(params: ModelParams, pairs: Sequence[SentencePair], vocabs: Vocabularies,
                  config: TrainConfig, batch_size: int | None = None) -> LossBreakdown | None:
    """Dropout-free loss over ``pairs``; components are averaged per sentence."""
    if not pairs:
        return None
    bs = batch_size or config.batch_size
    sums = {"w": 0.0, "c1": 0.0, "c2": 0.0}
    counts = {"w": 0, "c1": 0, "c2": 0}
    with nc.no_grad():
        for i in range(0, len(pairs), bs):
            lb = total_loss(params, encode_batch(pairs[i:i + bs], vocabs), config.alpha, config.beta)
            sums["w"] += lb.word_nll
            sums["c1"] += lb.c1_nll
            sums["c2"] += lb.c2_nll
            counts["w"] += lb.n_word_tokens
            counts["c1"] += lb.n_c1_chars
            counts["c2"] += lb.n_c2_chars
    n = len(pairs)
    w = nc.Tensor(sums["w"] / n)
    c1 = nc.Tensor(sums["c1"] / n)
    c2 = nc.Tensor(sums["c2"] / n)
    total = nc.Tensor(float(w.data) + config.alpha * float(c1.data) + config.beta * float(c2.data))
    return LossBreakdown(w, c1, c2, config.alpha, config.beta, total, sums["w"], sums["c1"], sums["c2"],
                         counts["w"], counts["c1"], counts["c2"])


class Trainer:
    """Runs the training regime over a fixed corpus.

    State needed for an exact resume (parameters, optimiser moments, dropout
    generator, epoch position, cost history, learning rate) round-trips
    through :meth:`checkpoint` / :meth:`from_checkpoint`.
    """

    def __init__(self, params: ModelParams, pairs: Sequence[SentencePair], vocabs: Vocabularies,
                 config: TrainConfig, valid_pairs: Sequence[SentencePair] | None = None,
                 checkpoint_dir=None):
        self.params = params
        self.pairs = list(pairs)
        self.vocabs = vocabs
        self.config = config
        self.valid_pairs = list(valid_pairs) if valid_pairs else self.pairs[:config.valid_sample]
        self.cost_sample = self.valid_pairs[:config.valid_sample]
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.opt = make_optimizer(config)
        self.dropout_rng = nc.Rng(config.seed)
        self.iteration = 0
        self.epoch = 0
        self.position = 0
        self.history: list[float] = []
        self.saved: list[tuple[int, float, Path | None]] = []
        self.last_report: StepReport | None = None

    # batches of the current epoch, deterministic in (seed, epoch)
    def _epoch_batches(self) -> list[list[SentencePair]]:
        from .corpus import iterate_batches
        return list(iterate_batches(self.pairs, self.config.batch_size, epoch_rng(self.config.seed, self.epoch)))

    def batches(self) -> Iterator[list[SentencePair]]:
        while True:
            chunk = self._epoch_batches()
            while self.position < len(chunk):
                yield chunk[self.position]
            self.epoch += 1
            self.position = 0
            self._on_epoch_end()

    def _on_epoch_end(self) -> None:
        if self.config.epoch_checkpoints:
            self.save()

    def step(self, batch_pairs: Sequence[SentencePair]) -> StepReport:
        batch = encode_batch(batch_pairs, self.vocabs)
        report = train_step(self.params, self.opt, batch, self.config, self.dropout_rng, self.iteration)
        self.iteration += 1
        self.position += 1
        self.last_report = report
        cfg = self.config
        if self.iteration % cfg.cost_interval == 0:
            cost = evaluate_loss(self.params, self.cost_sample, self.vocabs, cfg)
            self.history.append(float(np.float32(cost.total.data)))
            new_lr = lr_schedule_update(self.history, self.opt.lr, cfg.decay)
            if new_lr != self.opt.lr:
                log.info("iteration %d: cost rose twice, lr %.6g -> %.6g", self.iteration, self.opt.lr, new_lr)
            self.opt.lr = new_lr
        if self.iteration % cfg.valid_interval == 0:
            lb = evaluate_loss(self.params, self.valid_pairs, self.vocabs, cfg)
            log.info("iteration %d: valid word %.4f char1 %.4f char2 %.4f", self.iteration,
                     *(lb.values()[k] for k in ("loss_w", "loss_c1", "loss_c2")))
        if self.iteration % cfg.checkpoint_interval == 0:
            self.save()
        return report

    def run(self, steps: int | None = None, on_step: Callable[[int, StepReport], None] | None = None) -> None:
        steps = self.config.steps if steps is None else steps
        it = self.batches()
        for _ in range(steps):
            report = self.step(next(it))
            if on_step is not None:
                on_step(self.iteration, report)

    def checkpoint(self) -> Checkpoint:
        extra = {"epoch": self.epoch, "position": self.position,
                 "rng": _jsonable(self.dropout_rng.get_state()), "optimizer": self.opt.name}
        return Checkpoint(self.params.copy(), {k: v.copy() for k, v in self.opt.state_arrays().items()},
                          self.iteration, list(self.history), self.config, extra)

    def save(self) -> Path | None:
        ckpt = self.checkpoint()
        lb = evaluate_loss(self.params, self.valid_pairs, self.vocabs, self.config)
        ckpt.valid_loss = float(np.float32(lb.total.data)) if lb else float("nan")
        path = None
        if self.checkpoint_dir is not None:
            self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
            path = self.checkpoint_dir / f"iter{self.iteration:08d}.nahm"
            save_checkpoint(ckpt, path)
        self.saved.append((self.iteration, ckpt.valid_loss, path))
        return path

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, pairs, vocabs, valid_pairs=None, checkpoint_dir=None) -> "Trainer":
        tr = cls(ckpt.params.copy(), pairs, vocabs, ckpt.train_config, valid_pairs, checkpoint_dir)
        tr.opt.load_state(ckpt.opt_state)
        tr.iteration = ckpt.iteration
        tr.history = list(ckpt.history)
        tr.epoch = int(ckpt.extra.get("epoch", 0))
        tr.position = int(ckpt.extra.get("position", 0))
        if "rng" in ckpt.extra:
            tr.dropout_rng.set_state(_from_jsonable(ckpt.extra["rng"]))
        return tr


def _jsonable(state):
    if isinstance(state, dict):
        return {k: _jsonable(v) for k, v in state.items()}
    if isinstance(state, int):
        return {"__int__": str(state)}
    return state


def _from_jsonable(state):
    if isinstance(state, dict):
        if set(state) == {"__int__"}:
            return int(state["__int__"])
        return {k: _from_jsonable(v) for k, v in state.items()}
    return state
