"""Trajectory scoring for search pruning.

All four scorers measure how strongly the model supports tokens that a
candidate revealed, each with a different conditioning context:

* :func:`score_ots` — re-mask exactly the newly revealed positions inside a
  full-sequence proposal and sum their log-probabilities from one predict;
  accumulated over search intervals.
* :func:`score_all_blocks` — re-mask the entire revealed region and score all
  of it jointly; used directly as the pruning score (no accumulation).
* :func:`score_future_blocks` — like the first, but the still-masked future
  is masked in the context too, so no predicted future tokens are conditioned
  on; accumulated over intervals.
* :func:`score_ar` — left-to-right chain-rule log-likelihood of a contiguous
  revealed prefix, one predict per position.

Scores are log-probabilities (<= 0). Tokens the model gives (near-)zero
probability are floored at ``LOGPROB_FLOOR`` so comparisons stay total while
preserving ordering.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import FrozenSet

from .core import MaskedSeq

__all__ = [
    "LOGPROB_FLOOR",
    "PositionSets",
    "RefinementError",
    "newly_revealed",
    "score_ots",
    "score_all_blocks",
    "score_future_blocks",
    "score_ar",
]

logger = logging.getLogger(__name__)

# log(1e-300): scored tokens never contribute less than this.
LOGPROB_FLOOR = math.log(1e-300)


class RefinementError(ValueError):
    """A supposedly less-noisy sequence contradicts the state it refines."""


@dataclass(frozen=True)
class PositionSets:
    """Generation-position sets at a search boundary.

    ``delta`` — positions revealed between the two states; ``revealed`` —
    all non-prompt positions real in the later state; ``future`` — positions
    still masked. ``delta`` is a subset of ``revealed``; ``revealed`` and
    ``future`` partition the generation region.
    """

    delta: FrozenSet[int]
    revealed: FrozenSet[int]
    future: FrozenSet[int]


def newly_revealed(x_t: MaskedSeq, x_s: MaskedSeq) -> PositionSets:
    """Position sets for the denoising step from x_t to its refinement x_s."""
    if x_t.gen_len != x_s.gen_len:
        raise RefinementError("states have different generation lengths")
    delta = set()
    revealed = set()
    future = set()
    for i, (t_tok, s_tok) in enumerate(zip(x_t.gen, x_s.gen)):
        t_masked = t_tok == x_t.mask_id
        s_masked = s_tok == x_s.mask_id
        if not t_masked and (s_masked or s_tok != t_tok):
            raise RefinementError(f"position {i}: committed token changed or was re-masked")
        if s_masked:
            future.add(i)
        else:
            revealed.add(i)
            if t_masked:
                delta.add(i)
    return PositionSets(frozenset(delta), frozenset(revealed), frozenset(future))


def _floored(logprob: float) -> float:
    return max(float(logprob), LOGPROB_FLOOR)


def _sum_logprobs(model, context: MaskedSeq, x0_full: MaskedSeq,
                  positions, nfe=None) -> float:
    out = model.predict([context])
    if nfe is not None:
        nfe.add_score(1)
    lp = out.single(0)
    return sum(_floored(lp[i, x0_full.gen[i]]) for i in sorted(positions))


def score_ots(model, x_t: MaskedSeq, x_s: MaskedSeq, x0_full: MaskedSeq,
              nfe=None) -> float:
    """Incremental block score: likelihood of the newly revealed positions,
    conditioned on the full-sequence proposal with exactly those positions
    re-masked. An empty interval scores 0 (logged, not fatal)."""
    if x0_full.num_masked():
        raise ValueError("full-sequence proposal still contains MASK")
    sets = newly_revealed(x_t, x_s)
    if not sets.delta:
        logger.warning("scoring an interval that revealed no positions; score is 0")
        return 0.0
    context = x0_full.with_masked(sets.delta)
    return _sum_logprobs(model, context, x0_full, sets.delta, nfe)


def score_all_blocks(model, x_s: MaskedSeq, x0_full: MaskedSeq, nfe=None) -> float:
    """Joint infilling score of the entire revealed region."""
    if x0_full.num_masked():
        raise ValueError("full-sequence proposal still contains MASK")
    revealed = x_s.revealed_positions()
    if not revealed:
        logger.warning("scoring a state with nothing revealed; score is 0")
        return 0.0
    context = x0_full.with_masked(revealed)
    return _sum_logprobs(model, context, x0_full, revealed, nfe)


def score_future_blocks(model, x_t: MaskedSeq, x_s: MaskedSeq, x0_full: MaskedSeq,
                        nfe=None) -> float:
    """Newly revealed positions scored without conditioning on predicted
    future content: the context masks both the new positions and everything
    still masked in x_s."""
    if x0_full.num_masked():
        raise ValueError("full-sequence proposal still contains MASK")
    sets = newly_revealed(x_t, x_s)
    if not sets.delta:
        logger.warning("scoring an interval that revealed no positions; score is 0")
        return 0.0
    context = x0_full.with_masked(sets.delta | sets.future)
    return _sum_logprobs(model, context, x0_full, sets.delta, nfe)


def score_ar(model, x: MaskedSeq, nfe=None) -> float:
    """Chain-rule log-likelihood of a contiguous revealed prefix.

    Position i's conditional comes from one predict on the sequence with
    positions >= i masked, reading position i; costs one predict per
    revealed position. The prefix must be gap-free (an empty prefix
    scores 0)."""
    revealed = x.revealed_positions()
    if list(revealed) != list(range(len(revealed))):
        raise ValueError("revealed positions must form a contiguous prefix")
    total = 0.0
    for i in revealed:
        context = x.with_masked(range(i, x.gen_len))
        out = model.predict([context])
        if nfe is not None:
            nfe.add_score(1)
        total += _floored(out.single(0)[i, x.gen[i]])
    return total
