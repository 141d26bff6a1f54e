"""Evaluation metrics and the multi-sample study harness.

pass@k (exact combinatorial estimator), majority voting over extracted
answers, distance of an unmask order from strict left-to-right, the
order-vs-accuracy correlation fit, and the trade-off study that draws n
samples per strategy per problem and aggregates pass@k curves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, Optional, Sequence, Tuple

from .core import RandomStream
from .decode import DecodeConfig, decode
from .model import exact_sequence_logprob

__all__ = [
    "pass_at_k",
    "pass_at_k_exact",
    "majority_vote",
    "ar_similarity",
    "CorrelationFit",
    "order_accuracy_correlation",
    "SampleRecord",
    "SampleBatch",
    "StrategyCurve",
    "TradeoffReport",
    "tradeoff_study",
]


def pass_at_k_exact(n: int, c: int, k: int) -> Fraction:
    """Exact probability that a uniformly drawn k-subset of n samples,
    c of them correct, contains at least one correct sample."""
    if not 0 <= c <= n:
        raise ValueError(f"need 0 <= c <= n, got c={c}, n={n}")
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    if c == 0:
        return Fraction(0)
    if n - c < k:
        return Fraction(1)
    miss = Fraction(1)
    for i in range(k):
        miss *= Fraction(n - c - i, n - i)
    return 1 - miss


def pass_at_k(n: int, c: int, k: int) -> float:
    """Float value of :func:`pass_at_k_exact` (stable product form, no
    factorials)."""
    return float(pass_at_k_exact(n, c, k))


def majority_vote(answers: Sequence[Optional[str]]) -> Optional[str]:
    """Modal answer; ties break to the earliest first occurrence.

    ``None`` entries (empty or unparseable outputs) form a reserved bucket
    that can only win when every answer is ``None``.
    """
    if not answers:
        raise ValueError("majority_vote needs at least one answer")
    counts: Dict[Optional[str], int] = {}
    first_seen: Dict[Optional[str], int] = {}
    for i, a in enumerate(answers):
        counts[a] = counts.get(a, 0) + 1
        first_seen.setdefault(a, i)
    real = [a for a in counts if a is not None]
    pool = real if real else [None]
    return min(pool, key=lambda a: (-counts[a], first_seen[a]))


def ar_similarity(order: Sequence[int], gen_len: int) -> int:
    """Hamming distance of an unmask order from the left-to-right order.

    Counts indices where the order differs from the identity permutation;
    0 means the sample decoded strictly left to right.
    """
    if sorted(order) != list(range(gen_len)):
        raise ValueError("order is not a permutation of the generation region")
    return sum(1 for i, p in enumerate(order) if p != i)


@dataclass(frozen=True)
class CorrelationFit:
    """Weighted least-squares line through per-distance mean accuracies.

    ``slope`` is ``None`` when the distances carry no variance (fit
    undefined). ``buckets`` lists (distance, mean accuracy, sample count)
    for plotting.
    """

    slope: Optional[float]
    intercept: Optional[float]
    buckets: Tuple[Tuple[int, float, int], ...]


def order_accuracy_correlation(
    samples: Sequence[Tuple[int, bool]],
) -> CorrelationFit:
    """Fit mean accuracy against order distance, weighted by bucket size.

    ``samples`` are (distance, correct) pairs; exact integer distances are
    bucketed without binning.
    """
    if len(samples) < 2:
        raise ValueError("correlation study needs at least two samples")
    totals: Dict[int, int] = {}
    hits: Dict[int, int] = {}
    for d, ok in samples:
        totals[d] = totals.get(d, 0) + 1
        hits[d] = hits.get(d, 0) + (1 if ok else 0)
    buckets = tuple(
        (d, hits[d] / totals[d], totals[d]) for d in sorted(totals)
    )
    sw = sum(w for _, _, w in buckets)
    sx = sum(w * d for d, _, w in buckets)
    sy = sum(w * a for _, a, w in buckets)
    sxx = sum(w * d * d for d, _, w in buckets)
    sxy = sum(w * d * a for d, a, w in buckets)
    denom = sw * sxx - sx * sx
    if denom <= 0 or len(buckets) < 2:
        return CorrelationFit(None, None, buckets)
    slope = (sw * sxy - sx * sy) / denom
    intercept = (sy - slope * sx) / sw
    return CorrelationFit(slope, intercept, buckets)


@dataclass(frozen=True)
class SampleRecord:
    answer: Optional[str]
    correct: bool
    unmask_order: Tuple[int, ...]
    gen_tokens: Tuple[int, ...]
    score: float


@dataclass(frozen=True)
class SampleBatch:
    """All samples drawn for one problem under one strategy."""

    problem_id: int
    samples: Tuple[SampleRecord, ...]

    @property
    def n(self) -> int:
        return len(self.samples)

    @property
    def c(self) -> int:
        return sum(1 for s in self.samples if s.correct)


@dataclass(frozen=True)
class StrategyCurve:
    strategy: str
    ks: Tuple[int, ...]
    values: Tuple[float, ...]
    mean_distinct_outputs: float
    mean_score: float

    def value_at(self, k: int) -> float:
        return self.values[self.ks.index(k)]


@dataclass(frozen=True)
class TradeoffReport:
    """Per-strategy pass@k curves plus the raw batches behind them."""

    curves: Tuple[StrategyCurve, ...]
    batches: Dict[str, Tuple[SampleBatch, ...]]

    def curve(self, strategy: str) -> StrategyCurve:
        for c in self.curves:
            if c.strategy == strategy:
                return c
        raise KeyError(strategy)


def tradeoff_study(model, task, strategies: Sequence[str], n: int,
                   ks: Sequence[int], cfg: DecodeConfig,
                   master_seed: int = 0) -> TradeoffReport:
    """Draw ``n`` samples per strategy per task instance and aggregate.

    Decoding runs against ``model``; verification and sample scores use the
    task's own verifier (for chain-likelihood tasks that is the exact base
    chain, so a miscalibrated decoder is judged against the truth). Every
    sample has a pre-assigned random stream, so results are independent of
    scheduling.
    """
    ks = tuple(sorted(set(int(k) for k in ks)))
    if not ks or ks[-1] > n:
        raise ValueError(f"requested k values {ks} exceed sample budget n={n}")
    score_model = getattr(model, "base", model)
    curves = []
    batches: Dict[str, Tuple[SampleBatch, ...]] = {}
    for si, strategy in enumerate(strategies):
        per_problem = []
        for pi, inst in enumerate(task.instances):
            samples = []
            prompt = task.prompt(inst)
            # per-token blocks need one step per token
            steps = cfg.gen_len if strategy == "ar" else cfg.steps
            for s in range(n):
                run_cfg = DecodeConfig(
                    gen_len=cfg.gen_len, steps=steps, strategy=strategy,
                    temperature=cfg.temperature, block_size=cfg.block_size,
                    master_seed=cfg.master_seed,
                    confidence_from_noise=cfg.confidence_from_noise,
                )
                stream = RandomStream(master_seed).child(
                    "strategy", si, "inst", pi, "sample", s)
                traj = decode(model, prompt, run_cfg, rng=stream)
                gen = traj.final.gen
                try:
                    score = exact_sequence_logprob(score_model, gen, prefix=prompt)
                except ValueError:
                    score = -math.inf
                samples.append(SampleRecord(
                    answer=task.extract_answer(inst, gen),
                    correct=task.verify(inst, gen),
                    unmask_order=traj.unmask_order,
                    gen_tokens=gen,
                    score=score,
                ))
            per_problem.append(SampleBatch(problem_id=pi, samples=tuple(samples)))
        values = tuple(
            sum(pass_at_k(b.n, b.c, k) for b in per_problem) / len(per_problem)
            for k in ks
        )
        distinct = sum(
            len({s.gen_tokens for s in b.samples}) for b in per_problem
        ) / len(per_problem)
        mean_score = sum(
            s.score for b in per_problem for s in b.samples
        ) / (len(per_problem) * n)
        curves.append(StrategyCurve(strategy, ks, values, distinct, mean_score))
        batches[strategy] = tuple(per_problem)
    return TradeoffReport(tuple(curves), batches)
