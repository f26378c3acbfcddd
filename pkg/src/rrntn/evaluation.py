"""Perplexity measurement, K sweeps, and parameter-capacity reports."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .corpus import EncodedCorpus, EncodedSplit, SequenceChunk, chunk_sentences
from .models import DivergenceError, ModelSpec, forward_chunk, param_count, param_count_formula
from .training import TrainConfig, fit


def _eval_stream_chunks(split: EncodedSplit, t_bptt: int):
    # Full-coverage windows: unlike training's chunk_stream, the trailing
    # partial window is kept so every token after the first is predicted.
    ids = split.ids
    n = len(ids)
    for a in range(0, n - 1, t_bptt):
        b = min(a + t_bptt, n - 1)
        yield SequenceChunk(ids[a:b][None, :], ids[a + 1 : b + 1][None, :], reset_before=a == 0)


def perplexity(params, spec: ModelSpec, split: EncodedSplit, t_bptt: int = 20) -> float:
    """exp(mean negative log-likelihood per predicted token), dropout off.

    Sentence splits reset the hidden state at sentence starts; stream splits
    carry it throughout. Every token after the split's first is predicted
    exactly once, so the value does not depend on t_bptt.
    """
    chunks = (chunk_sentences(split, t_bptt) if split.has_sentences
              else _eval_stream_chunks(split, t_bptt))
    total = 0.0
    count = 0
    state = None
    for chunk in chunks:
        loss, n, _, state = forward_chunk(params, spec, chunk, state, mode="eval")
        total += loss
        count += n
    if count == 0:
        raise ValueError("split has no predictable tokens")
    ppl = float(np.exp(total / count))
    if not np.isfinite(ppl):
        raise DivergenceError("non-finite perplexity")
    return ppl


@dataclass
class SweepRow:
    policy: str
    k: int
    h: int
    params: int
    test_ppl: float | None
    valid_ppl: float | None
    seed: int
    error: str | None = None


@dataclass
class SweepResult:
    rows: list[SweepRow]
    baselines: dict[str, float]

    def to_csv(self) -> str:
        lines = ["policy,K,H,params,test_ppl,valid_ppl,seed"]
        for r in self.rows:
            test = "" if r.test_ppl is None else f"{r.test_ppl:.6f}"
            valid = "" if r.valid_ppl is None else f"{r.valid_ppl:.6f}"
            lines.append(f"{r.policy},{r.k},{r.h},{r.params},{test},{valid},{r.seed}")
        return "\n".join(lines) + "\n"


def run_k_sweep(base_spec: ModelSpec, k_values, cfg: TrainConfig,
                corpus: EncodedCorpus, policies=("f", "fmod"), log=None) -> SweepResult:
    """Train one model per (policy, K) with a shared seed and collect test PPL.

    K = 1 doubles as the plain-RNN baseline and K = V as the full tensor
    net. A diverging cell is recorded with an empty perplexity and the sweep
    continues.
    """
    k_values = [int(k) for k in k_values]
    if not all(a < b for a, b in zip(k_values, k_values[1:])):
        raise ValueError("K values must be strictly increasing")
    if any(k > base_spec.v for k in k_values):
        raise ValueError("K cannot exceed the vocabulary size")
    rows: list[SweepRow] = []
    baselines: dict[str, float] = {}
    for policy in policies:
        for k in k_values:
            spec = replace(base_spec, k=k, policy=policy)
            row = SweepRow(policy=policy, k=k, h=spec.h,
                           params=param_count(spec), test_ppl=None,
                           valid_ppl=None, seed=cfg.seed)
            try:
                result = fit(spec, cfg, corpus)
                row.test_ppl = perplexity(result.params, spec, corpus.test,
                                          t_bptt=cfg.t_bptt)
                row.valid_ppl = result.best_valid_ppl
            except DivergenceError as err:
                row.error = str(err)
            rows.append(row)
            if log is not None:
                log(row)
            if policy == "f" and row.test_ppl is not None:
                if k == 1:
                    baselines["srnn"] = row.test_ppl
                if k == base_spec.v:
                    baselines["rntn"] = row.test_ppl
    return SweepResult(rows=rows, baselines=baselines)


def param_label(count: int) -> str:
    """Round a parameter count the way capacity tables print it: one decimal
    of a million below 20M (trailing .0 dropped), whole millions above."""
    if count >= 20_000_000:
        return f"{(count + 500_000) // 1_000_000}M"
    tenths = (count + 50_000) // 100_000
    if tenths % 10 == 0:
        return f"{tenths // 10}M"
    return f"{tenths // 10}.{tenths % 10}M"


@dataclass
class CapacityRow:
    spec: ModelSpec
    count: int
    label: str
    formula: str


def capacity_report(specs) -> list[CapacityRow]:
    return [
        CapacityRow(spec=s, count=param_count(s), label=param_label(param_count(s)),
                    formula=param_count_formula(s))
        for s in specs
    ]


def format_capacity_table(rows: list[CapacityRow]) -> str:
    lines = []
    for r in rows:
        s = r.spec
        name = f"{s.family} V={s.v} H={s.h} K={s.k}"
        if s.family == "mrnn":
            name += f" F={s.factor}"
        if s.is_gated or s.e != s.h:
            name += f" E={s.e}"
        lines.append(f"{name:40s} {r.count:>12,d}  {r.label:>7s}  {r.formula}")
    return "\n".join(lines)
