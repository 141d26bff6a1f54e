"""Beam search over generation order and token values.

:func:`order_token_search` keeps K partially decoded beams. Between search
boundaries each beam steps independently like a plain decode. At a boundary —
by default the final step of each block — every beam proposes K candidates
(joint draws of which positions to commit and which tokens to write), each
candidate's newly revealed span is scored by the configured estimator using
the candidate's own full-sequence proposal as context, and the pool of K*K
candidates is pruned back to the K best by cumulative score.

Two quadratic-cost baselines are included: :func:`order_search` (branch on
commit positions, argmax tokens) and :func:`token_search` (branch on token
values, left-to-right order), both pruned by accumulated left-to-right-style
log-likelihood, each costing K*K model calls per step by construction.

Everything is deterministic given the master seed: random streams are
pre-assigned per (beam slot, step, candidate), so thread count and execution
order cannot change results.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .core import BlockLayout, MaskedSeq, RandomStream, current_block
from .decode import (
    DecodeConfig,
    StepLog,
    Trajectory,
    gumbel_perturb,
    propose_x0,
    transfer_all_tokens,
    transfer_tokens,
)
from .score import (
    LOGPROB_FLOOR,
    score_all_blocks,
    score_future_blocks,
    score_ots,
)

__all__ = [
    "ESTIMATORS",
    "EXPANSION_MODES",
    "NfeCounter",
    "SearchConfig",
    "IntervalAudit",
    "Beam",
    "CandidateAudit",
    "BoundaryAudit",
    "SearchResult",
    "expand",
    "prune",
    "order_token_search",
    "order_search",
    "token_search",
    "predict_nfe",
    "predict_nfe_majority_vote",
]

ESTIMATORS = ("ots", "all_blocks", "future_blocks")
EXPANSION_MODES = ("gumbel", "deterministic_topk")


@dataclass
class NfeCounter:
    """Model-call accounting, split by purpose.

    ``denoise_evals`` counts predicts used to step trajectories forward;
    ``score_evals`` counts predicts spent on scoring. Reported totals are
    normalized to position units (calls times generation length), the
    convention used when comparing decoding methods.
    """

    positions_per_eval: int
    denoise_evals: int = 0
    score_evals: int = 0

    def add_denoise(self, n: int = 1) -> None:
        self.denoise_evals += n

    def add_score(self, n: int = 1) -> None:
        self.score_evals += n

    @property
    def denoise_positions(self) -> int:
        return self.denoise_evals * self.positions_per_eval

    @property
    def score_positions(self) -> int:
        return self.score_evals * self.positions_per_eval

    @property
    def total_positions(self) -> int:
        return self.denoise_positions + self.score_positions

    def as_dict(self) -> dict:
        return {
            "denoise_evals": self.denoise_evals,
            "score_evals": self.score_evals,
            "denoise_positions": self.denoise_positions,
            "score_positions": self.score_positions,
            "total_positions": self.total_positions,
        }


@dataclass(frozen=True)
class SearchConfig:
    """Plan for one beam search run.

    ``search_interval`` is the number of in-block steps between boundaries;
    it defaults to the whole per-block step count, placing one boundary at
    the end of each block, and must divide every block's step count.
    ``expansion_mode="deterministic_topk"`` replaces Gumbel candidate draws
    with a deterministic enumeration: candidate j varies the token rank at
    the most confident positions in mixed-radix order (j=0 is fully greedy,
    j=1..V-1 sweep the most confident position's tokens, higher j start
    varying the next positions), which makes noise-free expansions enumerate
    the local candidate space instead of collapsing to identical copies.
    """

    gen_len: int
    steps: int
    beam_size: int
    temperature: float = 0.0
    block_size: Optional[int] = None
    search_interval: Optional[int] = None
    estimator: str = "ots"
    expansion_mode: str = "gumbel"
    strategy: str = "low_confidence"
    master_seed: int = 0
    n_context_samples: int = 1
    # Variant reading of the running total: exclude the block being scored.
    cumulative_exclusive: bool = False
    confidence_from_noise: bool = False

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError(f"beam_size must be >= 1, got {self.beam_size}")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}, expected one of {ESTIMATORS}")
        if self.expansion_mode not in EXPANSION_MODES:
            raise ValueError(
                f"unknown expansion_mode {self.expansion_mode!r}, expected one of {EXPANSION_MODES}"
            )
        if self.n_context_samples < 1:
            raise ValueError("n_context_samples must be >= 1")
        dc = self.decode_config  # validates steps/blocks/strategy
        if self.search_interval is not None:
            if self.search_interval < 1:
                raise ValueError("search_interval must be >= 1")
            for b, s_b in enumerate(dc.steps_per_block):
                if s_b % self.search_interval:
                    raise ValueError(
                        f"search_interval {self.search_interval} does not divide "
                        f"block {b}'s step count {s_b}"
                    )

    @property
    def decode_config(self) -> DecodeConfig:
        return DecodeConfig(
            gen_len=self.gen_len,
            steps=self.steps,
            strategy=self.strategy,
            temperature=self.temperature,
            block_size=self.block_size,
            master_seed=self.master_seed,
            confidence_from_noise=self.confidence_from_noise,
        )

    @property
    def layout(self) -> BlockLayout:
        return self.decode_config.layout

    def boundary_steps(self) -> Tuple[int, ...]:
        """Global step indices (0-based) at which expansion happens."""
        out = []
        step = 0
        for s_b in self.decode_config.steps_per_block:
            interval = self.search_interval or s_b
            for local in range(1, s_b + 1):
                if local % interval == 0:
                    out.append(step)
                step += 1
        return tuple(out)


@dataclass(frozen=True)
class IntervalAudit:
    """One scored denoising interval, stored verbatim for replay."""

    block: int
    x_t: MaskedSeq
    x_s: MaskedSeq
    x0_full: MaskedSeq
    value: float


@dataclass(frozen=True)
class Beam:
    """A retained partial trajectory."""

    x: MaskedSeq
    block_scores: Tuple[float, ...]
    cumulative_score: float
    unmask_order: Tuple[int, ...]
    interval_start: MaskedSeq
    lineage: Tuple[int, ...]
    step_logs: Tuple[StepLog, ...] = ()
    intervals: Tuple[IntervalAudit, ...] = ()


@dataclass(frozen=True)
class CandidateAudit:
    parent: int
    candidate: int
    block: int
    block_score: float
    cumulative_score: float
    gen_tokens: Tuple[int, ...]
    kept: bool


@dataclass(frozen=True)
class BoundaryAudit:
    step: int
    block: int
    candidates: Tuple[CandidateAudit, ...]


@dataclass(frozen=True)
class SearchResult:
    trajectory: Trajectory
    best_beam: Beam
    final_beams: Tuple[Beam, ...]
    boundaries: Tuple[BoundaryAudit, ...]
    nfe: NfeCounter


@dataclass(frozen=True)
class _Candidate:
    beam: Beam
    parent: int
    candidate: int
    block: int
    block_score: float


def _score_estimator(cfg: SearchConfig, model, x_t: MaskedSeq, x_s: MaskedSeq,
                     x0_full: MaskedSeq, nfe: Optional[NfeCounter]) -> float:
    if cfg.estimator == "ots":
        return score_ots(model, x_t, x_s, x0_full, nfe)
    if cfg.estimator == "all_blocks":
        return score_all_blocks(model, x_s, x0_full, nfe)
    return score_future_blocks(model, x_t, x_s, x0_full, nfe)


def _deterministic_candidate(logits: np.ndarray, x: MaskedSeq, count: int,
                             cand_idx: int) -> Tuple[np.ndarray, np.ndarray, Tuple[int, ...]]:
    """Candidate ``cand_idx`` of the deterministic expansion.

    Positions are the ``count`` most confident masked slots of the current
    block. The token written at the i-th most confident of them is its
    (digit_i)-th most probable token, where the digits are ``cand_idx`` in
    base V with the fastest digit on the most confident position. Returns
    (proposal, confidences, chosen positions).
    """
    V = logits.shape[1]
    block = current_block(x)
    block_range = x.layout.block_range(block)
    candidates = [p for p in block_range if x.is_masked(p)]
    conf = np.exp(logits.max(axis=-1))
    ranked_pos = sorted(candidates, key=lambda p: (-conf[p], p))[:count]
    proposal = np.argmax(logits, axis=-1)
    confidences = np.exp(logits[np.arange(len(proposal)), proposal])
    cand_idx %= max(V ** len(ranked_pos), 1)
    for i, p in enumerate(ranked_pos):
        rank = (cand_idx // V ** i) % V
        token_order = np.lexsort((np.arange(V), -logits[p]))
        tok = int(token_order[rank])
        proposal[p] = tok
        confidences[p] = float(np.exp(logits[p, tok]))
    return proposal, confidences, tuple(ranked_pos)


def expand(beam: Beam, parent_idx: int, logits: np.ndarray, model,
           cfg: SearchConfig, step: int, count: int, block: int,
           stream: RandomStream, nfe: Optional[NfeCounter]) -> list[_Candidate]:
    """Produce and score K candidates from one beam at a search boundary."""
    out: list[_Candidate] = []
    for ci in range(cfg.beam_size):
        cand_stream = stream.child("beam", parent_idx, "step", step, "cand", ci)
        if cfg.expansion_mode == "gumbel":
            proposal, confs = propose_x0(
                logits, cfg.temperature, cand_stream.child("gumbel"),
                confidence_from_noise=cfg.confidence_from_noise,
            )
            x_cand, chosen = transfer_tokens(
                beam.x, proposal, confs, count, cfg.strategy,
                cand_stream.child("transfer"),
            )
        else:
            proposal, confs, ranked = _deterministic_candidate(logits, beam.x, count, ci)
            x_cand = beam.x.with_tokens({p: int(proposal[p]) for p in ranked})
            chosen = ranked
        x_full = transfer_all_tokens(beam.x, proposal)

        values = [_score_estimator(cfg, model, beam.interval_start, x_cand, x_full, nfe)]
        for extra in range(1, cfg.n_context_samples):
            alt_proposal, _ = propose_x0(
                logits, cfg.temperature, cand_stream.child("ctx", extra),
                confidence_from_noise=cfg.confidence_from_noise,
            )
            alt_full = transfer_all_tokens(x_cand, alt_proposal)
            values.append(_score_estimator(cfg, model, beam.interval_start, x_cand, alt_full, nfe))
        value = float(np.mean(values))

        block_scores = list(beam.block_scores)
        block_scores[block] += value
        if cfg.estimator == "all_blocks":
            cumulative = value
        else:
            cumulative = sum(block_scores[: block + (0 if cfg.cumulative_exclusive else 1)])
        log = StepLog(
            step=step,
            positions=chosen,
            tokens=tuple(int(proposal[p]) for p in chosen),
            confidences=tuple(float(confs[p]) for p in chosen),
        )
        child = Beam(
            x=x_cand,
            block_scores=tuple(block_scores),
            cumulative_score=cumulative,
            unmask_order=beam.unmask_order + chosen,
            interval_start=x_cand,
            lineage=beam.lineage + (parent_idx,),
            step_logs=beam.step_logs + (log,),
            intervals=beam.intervals + (
                IntervalAudit(block, beam.interval_start, x_cand, x_full, value),
            ),
        )
        out.append(_Candidate(child, parent_idx, ci, block, value))
    return out


def prune(candidates: Sequence[_Candidate], k: int) -> Tuple[list[Beam], list[bool]]:
    """Keep the K best candidates by cumulative score.

    Ties break by lower parent slot, then lexicographically smaller token
    sequence, then candidate index — stable and deterministic. Candidates
    whose token state duplicates a better-or-equal survivor are folded into
    it; if fewer than K distinct states exist, survivors are repeated to keep
    the beam count at exactly K.
    """
    if not candidates:
        raise RuntimeError("prune called with no candidates")
    ranked = sorted(
        candidates,
        key=lambda c: (-c.beam.cumulative_score, c.parent, c.beam.x.gen, c.candidate),
    )
    kept: list[Beam] = []
    kept_flags = {}
    seen = set()
    for c in ranked:
        key = c.beam.x.gen
        if key in seen:
            kept_flags[id(c)] = False
            continue
        if len(kept) < k:
            seen.add(key)
            kept.append(c.beam)
            kept_flags[id(c)] = True
        else:
            kept_flags[id(c)] = False
    i = 0
    while len(kept) < k:
        kept.append(kept[i])
        i += 1
    return kept, [kept_flags[id(c)] for c in candidates]


def order_token_search(model, prompt: Sequence[int], cfg: SearchConfig) -> SearchResult:
    """Run the joint order/token beam search and return the best trajectory.

    Returns the full audit alongside: every boundary's candidate pool with
    kept/discarded flags, every surviving beam's per-interval scoring inputs,
    and the model-call counters.
    """
    dc = cfg.decode_config
    layout = cfg.layout
    stream = RandomStream(cfg.master_seed)
    nfe = NfeCounter(positions_per_eval=cfg.gen_len)
    K = cfg.beam_size
    root = MaskedSeq.fully_masked(tuple(prompt), layout, model.vocab.mask_id)
    beams = [
        Beam(
            x=root,
            block_scores=(0.0,) * layout.num_blocks,
            cumulative_score=0.0,
            unmask_order=(),
            interval_start=root,
            lineage=(),
        )
        for _ in range(K)
    ]
    boundary_steps = set(cfg.boundary_steps())
    tokens_per_step = dc.tokens_per_step
    block_of_step = dc.block_of_step
    audits: list[BoundaryAudit] = []

    for step in range(cfg.steps):
        block = block_of_step[step]
        outs = model.predict([b.x for b in beams])
        nfe.add_denoise(K)
        count = tokens_per_step[step]
        if step in boundary_steps:
            pool: list[_Candidate] = []
            for bi, beam in enumerate(beams):
                pool.extend(
                    expand(beam, bi, outs.single(bi), model, cfg, step, count, block, stream, nfe)
                )
            beams, kept = prune(pool, K)
            audits.append(BoundaryAudit(
                step=step,
                block=block,
                candidates=tuple(
                    CandidateAudit(
                        parent=c.parent,
                        candidate=c.candidate,
                        block=c.block,
                        block_score=c.block_score,
                        cumulative_score=c.beam.cumulative_score,
                        gen_tokens=c.beam.x.gen,
                        kept=flag,
                    )
                    for c, flag in zip(pool, kept)
                ),
            ))
        else:
            stepped = []
            for bi, beam in enumerate(beams):
                step_stream = stream.child("beam", bi, "step", step, "cand", 0)
                proposal, confs = propose_x0(
                    outs.single(bi), cfg.temperature, step_stream.child("gumbel"),
                    confidence_from_noise=cfg.confidence_from_noise,
                )
                x2, chosen = transfer_tokens(
                    beam.x, proposal, confs, count, cfg.strategy,
                    step_stream.child("transfer"),
                )
                log = StepLog(
                    step=step,
                    positions=chosen,
                    tokens=tuple(int(proposal[p]) for p in chosen),
                    confidences=tuple(float(confs[p]) for p in chosen),
                )
                stepped.append(dataclasses.replace(
                    beam, x=x2,
                    unmask_order=beam.unmask_order + chosen,
                    step_logs=beam.step_logs + (log,),
                ))
            beams = stepped

    best = beams[0]
    trajectory = Trajectory(
        final=best.x,
        unmask_order=best.unmask_order,
        per_step_log=best.step_logs,
        denoise_evals=nfe.denoise_evals,
    )
    return SearchResult(trajectory, best, tuple(beams), tuple(audits), nfe)


def predict_nfe(cfg: SearchConfig) -> dict:
    """Closed-form model-call budget for a search run, in position units.

    Stepping K beams for S steps costs S*K*L; scoring K*K candidates at each
    of the B block boundaries costs B*K*K*L. Runtime counters from
    :func:`order_token_search` match these exactly when the search interval
    equals the per-block step count and one context sample is used.
    """
    L, S, K = cfg.gen_len, cfg.steps, cfg.beam_size
    B = cfg.layout.num_blocks
    denoise = S * K * L
    score = B * K * K * L * cfg.n_context_samples
    return {"denoise_positions": denoise, "score_positions": score,
            "total_positions": denoise + score}


def predict_nfe_majority_vote(gen_len: int, steps: int, n_samples: int) -> dict:
    """Model-call budget of n independent decodes, in position units."""
    denoise = steps * n_samples * gen_len
    return {"denoise_positions": denoise, "score_positions": 0,
            "total_positions": denoise}


# ---------------------------------------------------------------------------
# Quadratic-cost baselines
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _PathBeam:
    x: MaskedSeq
    cumulative_score: float
    unmask_order: Tuple[int, ...]
    step_logs: Tuple[StepLog, ...]


@dataclass(frozen=True)
class _PathCandidate:
    beam: _PathBeam
    parent: int
    candidate: int


def _prune_paths(candidates: Sequence[_PathCandidate], k: int, state_key) -> list[_PathBeam]:
    ranked = sorted(
        candidates,
        key=lambda c: (-c.beam.cumulative_score, c.parent, c.beam.x.gen, c.candidate),
    )
    kept: list[_PathBeam] = []
    seen = set()
    for c in ranked:
        key = state_key(c.beam.x)
        if key in seen:
            continue
        kept.append(c.beam)
        seen.add(key)
        if len(kept) == k:
            break
    i = 0
    while len(kept) < k:
        kept.append(kept[i])
        i += 1
    return kept


def _path_result(model, beams: Sequence[_PathBeam], nfe: NfeCounter) -> SearchResult:
    best = beams[0]
    trajectory = Trajectory(
        final=best.x,
        unmask_order=best.unmask_order,
        per_step_log=best.step_logs,
        denoise_evals=nfe.denoise_evals,
    )
    synthetic = Beam(
        x=best.x,
        block_scores=(best.cumulative_score,),
        cumulative_score=best.cumulative_score,
        unmask_order=best.unmask_order,
        interval_start=best.x,
        lineage=(),
        step_logs=best.step_logs,
    )
    finals = tuple(
        Beam(
            x=b.x, block_scores=(b.cumulative_score,),
            cumulative_score=b.cumulative_score, unmask_order=b.unmask_order,
            interval_start=b.x, lineage=(), step_logs=b.step_logs,
        )
        for b in beams
    )
    return SearchResult(trajectory, synthetic, finals, (), nfe)


def order_search(model, prompt: Sequence[int], k: int,
                 cfg: SearchConfig) -> SearchResult:
    """Search over commit order only: one position per step, argmax tokens.

    Each beam branches on its K most confident masked positions; every
    candidate is scored by adding the model's log-probability of the argmax
    token at the newly committed position, given the parent's state — the
    accumulated left-to-right-style likelihood of the revealed tokens. Each
    candidate spends its own model call, so scoring costs exactly K*K calls
    per step and K*K*L overall.
    """
    L = cfg.gen_len
    layout = BlockLayout(L, L)
    nfe = NfeCounter(positions_per_eval=L)
    root = MaskedSeq.fully_masked(tuple(prompt), layout, model.vocab.mask_id)
    beams = [_PathBeam(root, 0.0, (), ()) for _ in range(k)]
    for step in range(L):
        pool: list[_PathCandidate] = []
        for bi, beam in enumerate(beams):
            for ci in range(k):
                out = model.predict([beam.x])
                nfe.add_score(1)
                lp = out.single(0)
                masked = beam.x.masked_positions()
                conf = np.exp(lp.max(axis=-1))
                ranked = sorted(masked, key=lambda p: (-conf[p], p))
                pos = ranked[ci % len(ranked)]
                tok = int(np.argmax(lp[pos]))
                inc = max(float(lp[pos, tok]), LOGPROB_FLOOR)
                log = StepLog(step, (pos,), (tok,), (float(np.exp(lp[pos, tok])),))
                child = _PathBeam(
                    x=beam.x.with_tokens({pos: tok}),
                    cumulative_score=beam.cumulative_score + inc,
                    unmask_order=beam.unmask_order + (pos,),
                    step_logs=beam.step_logs + (log,),
                )
                pool.append(_PathCandidate(child, bi, ci))
        beams = _prune_paths(pool, k, state_key=lambda x: x.gen)
    return _path_result(model, beams, nfe)


def token_search(model, prompt: Sequence[int], k: int,
                 cfg: SearchConfig) -> SearchResult:
    """Search over token values only, in left-to-right position order.

    Each beam branches on the K most probable tokens at the current position,
    scored by the accumulated log-likelihood of the prefix. Hypotheses whose
    futures the model cannot distinguish are recombined (for first-order
    chain models the prefix's last token is a sufficient state), keeping the
    best-scoring representative. Costs K*K scoring calls per step.
    """
    L = cfg.gen_len
    layout = BlockLayout(L, L)
    nfe = NfeCounter(positions_per_eval=L)
    root = MaskedSeq.fully_masked(tuple(prompt), layout, model.vocab.mask_id)
    beams = [_PathBeam(root, 0.0, (), ()) for _ in range(k)]
    if getattr(model, "markov_order", 0) == 1:
        def state_key(x: MaskedSeq):
            revealed = x.revealed_positions()
            return (len(revealed), x.gen[revealed[-1]] if revealed else None)
    else:
        def state_key(x: MaskedSeq):
            return x.gen
    for pos in range(L):
        pool: list[_PathCandidate] = []
        for bi, beam in enumerate(beams):
            for ci in range(k):
                out = model.predict([beam.x])
                nfe.add_score(1)
                lp = out.single(0)
                order = np.lexsort((np.arange(lp.shape[1]), -lp[pos]))
                tok = int(order[ci % lp.shape[1]])
                inc = max(float(lp[pos, tok]), LOGPROB_FLOOR)
                log = StepLog(pos, (pos,), (tok,), (float(np.exp(lp[pos, tok])),))
                child = _PathBeam(
                    x=beam.x.with_tokens({pos: tok}),
                    cumulative_score=beam.cumulative_score + inc,
                    unmask_order=beam.unmask_order + (pos,),
                    step_logs=beam.step_logs + (log,),
                )
                pool.append(_PathCandidate(child, bi, ci))
        beams = _prune_paths(pool, k, state_key)
    return _path_result(model, beams, nfe)
