"""SGD training with two regimes.

simple: per-sentence windows, no mini-batching, hidden state reset between
sentences, no gradient clipping, one update per window.

gated: mini-batched stream windows with state carried across steps,
gradients averaged over the batch and clipped to a global norm.

The learning rate halves whenever the ratio of successive validation
perplexities (previous / current) falls below the halving ratio, i.e. the
epoch improved by less than the required margin; training stops after
`patience` consecutive such epochs. One plateau counter drives both.
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field

import numpy as np

from .corpus import EncodedCorpus, EncodedSplit, chunk_sentences, chunk_stream
from .linalg import Rng, clip_by_global_norm
from .models import (
    DivergenceError,
    InitScheme,
    ModelSpec,
    backward_chunk,
    forward_chunk,
    init_params,
    param_shapes,
)

REGIMES = ("simple", "gated")


@dataclass(frozen=True)
class TrainConfig:
    regime: str
    t_bptt: int
    batch: int
    lr0: float
    init: InitScheme
    seed: int
    halving_ratio: float = 1.003
    patience: int = 5
    p_drop: float = 0.5
    clip_norm: float | None = None
    max_epochs: int = 100

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.lr0 < 0:
            raise ValueError("lr0 must be non-negative")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.halving_ratio <= 1.0:
            raise ValueError("halving_ratio must exceed 1")
        if self.t_bptt < 1 or self.batch < 1:
            raise ValueError("t_bptt and batch must be positive")

    @classmethod
    def simple(cls, seed: int, **overrides) -> "TrainConfig":
        """Sentence-window regime defaults: BPTT 20, no batching, LR 0.1,
        gaussian init, no clipping."""
        kw = dict(regime="simple", t_bptt=20, batch=1, lr0=0.1,
                  init=InitScheme.gaussian(0.001), p_drop=0.5, clip_norm=None)
        kw.update(overrides)
        return cls(seed=seed, **kw)

    @classmethod
    def gated(cls, seed: int, **overrides) -> "TrainConfig":
        """Stream regime defaults: BPTT 35, batch 20, LR 1.0, uniform init,
        clip to 5."""
        kw = dict(regime="gated", t_bptt=35, batch=20, lr0=1.0,
                  init=InitScheme.uniform(-0.05, 0.05), p_drop=0.5, clip_norm=5.0)
        kw.update(overrides)
        return cls(seed=seed, **kw)


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_ppl: float
    valid_ppl: float | None = None
    seconds: float = 0.0


def sgd_apply(params, grads, lr: float) -> None:
    """In-place step p <- p - lr * g for every array."""
    for name, g in grads.items():
        if not np.isfinite(np.sum(g)):
            raise DivergenceError(f"non-finite gradient in {name}")
        params[name] -= lr * g


def schedule_step(prev_valid_ppl, cur_valid_ppl, lr, plateau_count, cfg: TrainConfig):
    """Apply the halving rule after one epoch; returns (lr, plateau_count, stop).

    The improvement ratio is previous / current, so values above 1 mean the
    model got better; a ratio below cfg.halving_ratio halves the rate and
    advances the plateau counter, any larger improvement resets it. The
    first epoch (no previous value) never halves.
    """
    if cur_valid_ppl < 1.0:
        raise ValueError("perplexity below 1 is not possible")
    if prev_valid_ppl is None:
        return lr, 0, False
    if prev_valid_ppl / cur_valid_ppl < cfg.halving_ratio:
        plateau_count += 1
        return lr / 2.0, plateau_count, plateau_count >= cfg.patience
    return lr, 0, False


def _train_chunks(split: EncodedSplit, cfg: TrainConfig):
    if cfg.regime == "simple":
        if split.has_sentences:
            return chunk_sentences(split, cfg.t_bptt)
        return chunk_stream(split, cfg.t_bptt, batch=1)
    return chunk_stream(split, cfg.t_bptt, cfg.batch)


def train_epoch(params, spec: ModelSpec, cfg: TrainConfig, split: EncodedSplit,
                lr: float, rng: Rng, epoch: int = 0) -> EpochMetrics:
    """One full pass over the training split; params are updated in place.

    Training perplexity is computed from the summed training loss, dropout
    included as incurred. In the gated regime gradients are averaged over
    the batch lanes before clipping so the clip threshold and learning rate
    keep their per-lane meaning.
    """
    t0 = time.perf_counter()
    total_loss = 0.0
    total_tokens = 0
    state = None
    try:
        for chunk in _train_chunks(split, cfg):
            loss, count, cache, state = forward_chunk(
                params, spec, chunk, state, mode="train", rng=rng, p_drop=cfg.p_drop)
            grads, _ = backward_chunk(params, spec, cache)
            if cfg.regime == "gated" and cfg.batch > 1:
                for g in grads.values():
                    g /= cfg.batch
            if cfg.clip_norm is not None:
                clip_by_global_norm(grads.values(), cfg.clip_norm)
            sgd_apply(params, grads, lr)
            total_loss += loss
            total_tokens += count
    except DivergenceError as err:
        err.epoch = epoch
        raise
    train_ppl = float(np.exp(total_loss / total_tokens))
    return EpochMetrics(epoch=epoch, lr=lr, train_ppl=train_ppl,
                        seconds=time.perf_counter() - t0)


@dataclass
class FitResult:
    params: dict
    history: list[EpochMetrics] = field(default_factory=list)
    best_epoch: int = -1
    best_valid_ppl: float = float("inf")


def fit(spec: ModelSpec, cfg: TrainConfig, corpus: EncodedCorpus,
        log=None) -> FitResult:
    """Train until the plateau rule stops or max_epochs is hit.

    Returns the parameters from the best-validation epoch. The halved
    learning rate takes effect from the next epoch onward. All randomness
    is derived from cfg.seed: stream 0 initializes weights, stream (1, e)
    drives epoch e's dropout.
    """
    from .evaluation import perplexity  # local import; evaluation drives fit for sweeps

    root = Rng(cfg.seed)
    params = init_params(spec, cfg.init, root.derive(0))
    result = FitResult(params=copy.deepcopy(params))
    lr = cfg.lr0
    plateau = 0
    prev_valid = None
    for epoch in range(1, cfg.max_epochs + 1):
        metrics = train_epoch(params, spec, cfg, corpus.train, lr,
                              root.derive(1, epoch), epoch=epoch)
        metrics.valid_ppl = perplexity(params, spec, corpus.valid, t_bptt=cfg.t_bptt)
        result.history.append(metrics)
        if log is not None:
            log(metrics)
        if metrics.valid_ppl < result.best_valid_ppl:
            result.best_valid_ppl = metrics.valid_ppl
            result.best_epoch = epoch
            result.params = copy.deepcopy(params)
        lr, plateau, stop = schedule_step(prev_valid, metrics.valid_ppl, lr, plateau, cfg)
        prev_valid = metrics.valid_ppl
        if stop:
            break
    return result


@dataclass
class GradCheckReport:
    spec: ModelSpec
    block_errors: dict[str, float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.block_errors.values())

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def format(self) -> str:
        lines = [f"{self.spec.family} V={self.spec.v} H={self.spec.h} K={self.spec.k}"]
        for name, err in self.block_errors.items():
            mark = "ok" if err < self.tolerance else "FAIL"
            lines.append(f"  {name:16s} max rel err {err:.3e}  [{mark}]")
        lines.append(f"  overall {self.max_error:.3e} (tolerance {self.tolerance:.1e})"
                     f" -> {'pass' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def grad_check(spec: ModelSpec, rng: Rng, t_steps: int = 5, eps: float = 1e-5,
               tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic BPTT gradients against central finite differences.

    Every scalar of every parameter block is perturbed by +/- eps and the
    relative error |analytic - numeric| / max(|analytic|, |numeric|, 1e-3)
    is reported per block (the 1e-3 floor turns the test absolute for
    near-zero gradients, where finite differences lose meaning). Dropout is
    off so repeated passes are identical. Use small specs only.
    """
    from .corpus import SequenceChunk

    params = init_params(spec, InitScheme.uniform(-0.5, 0.5), rng.derive(0))
    data_rng = rng.derive(1)
    ids = (data_rng.uniform01(t_steps) * spec.v).astype(np.int64)
    targets = (data_rng.uniform01(t_steps) * spec.v).astype(np.int64)
    chunk = SequenceChunk(ids[None, :], targets[None, :], reset_before=True)

    def loss_of() -> float:
        loss, _, _, _ = forward_chunk(params, spec, chunk, mode="train")
        return loss

    _, _, cache, _ = forward_chunk(params, spec, chunk, mode="train")
    analytic, _ = backward_chunk(params, spec, cache)

    block_errors: dict[str, float] = {}
    for name in param_shapes(spec):
        arr = params[name]
        worst = 0.0
        flat = arr.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            up = loss_of()
            flat[idx] = orig - eps
            down = loss_of()
            flat[idx] = orig
            numeric = (up - down) / (2.0 * eps)
            a = analytic[name].reshape(-1)[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-3)
            worst = max(worst, err)
        block_errors[name] = worst
    return GradCheckReport(spec=spec, block_errors=block_errors, tolerance=tol)
