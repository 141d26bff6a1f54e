"""Single-trajectory reverse-process decoding.

One decode runs a fixed number of steps; each step predicts distributions for
the whole generation region, perturbs them with temperature-scaled Gumbel
noise, proposes a full completion by per-position argmax, and commits a
budgeted number of proposals inside the current block. The commit rule is the
remasking strategy: ``low_confidence`` keeps the most confident proposals,
``random`` keeps a uniform subset, ``ar`` keeps the leftmost. Committed
tokens are immutable for the rest of the decode, and blocks are finalized
strictly left to right.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .core import BlockLayout, MaskedSeq, RandomStream, current_block
from .model import DenoiserOutput

__all__ = [
    "STRATEGIES",
    "DecodeConfig",
    "StepLog",
    "Trajectory",
    "gumbel_perturb",
    "propose_x0",
    "transfer_tokens",
    "transfer_all_tokens",
    "decode",
]

STRATEGIES = ("random", "low_confidence", "ar")


@dataclass(frozen=True)
class DecodeConfig:
    """Static plan for one decode: lengths, step budget, strategy, noise.

    ``steps`` must not exceed ``gen_len`` and every block must receive at
    least one step. The per-step token budget is derived: steps are
    apportioned to blocks proportionally (remainder to earlier blocks), and
    within a block the tokens are split evenly over its steps (remainder to
    earlier steps). ``strategy="ar"`` forces per-token blocks.
    """

    gen_len: int
    steps: int
    strategy: str = "low_confidence"
    temperature: float = 0.0
    block_size: Optional[int] = None
    master_seed: int = 0
    # Scoring variant: rank transfers by perturbed values instead of the
    # model's unperturbed probabilities.
    confidence_from_noise: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}, expected one of {STRATEGIES}")
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        block_size = self.block_size
        if self.strategy == "ar":
            block_size = 1
        elif block_size is None:
            block_size = self.gen_len
        object.__setattr__(self, "block_size", block_size)
        if not 1 <= self.steps <= self.gen_len:
            raise ValueError(f"steps must lie in [1, gen_len], got {self.steps} for L={self.gen_len}")
        layout = self.layout
        if self.steps < layout.num_blocks:
            raise ValueError(
                f"{self.steps} steps cannot cover {layout.num_blocks} blocks "
                "(each block needs at least one step)"
            )

    @property
    def layout(self) -> BlockLayout:
        return BlockLayout(self.gen_len, self.block_size)

    @property
    def steps_per_block(self) -> Tuple[int, ...]:
        B = self.layout.num_blocks
        base, extra = divmod(self.steps, B)
        counts = tuple(base + (1 if b < extra else 0) for b in range(B))
        for b, (start, stop) in enumerate(self.layout.boundaries):
            if counts[b] > stop - start:
                raise ValueError(
                    f"block {b} has {stop - start} tokens but was apportioned {counts[b]} steps"
                )
        return counts

    @property
    def tokens_per_step(self) -> Tuple[int, ...]:
        out = []
        for b, (start, stop) in enumerate(self.layout.boundaries):
            length = stop - start
            s_b = self.steps_per_block[b]
            base, extra = divmod(length, s_b)
            out.extend(base + 1 for _ in range(extra))
            out.extend(base for _ in range(s_b - extra))
        return tuple(out)

    @property
    def block_of_step(self) -> Tuple[int, ...]:
        out = []
        for b, s_b in enumerate(self.steps_per_block):
            out.extend([b] * s_b)
        return tuple(out)


@dataclass(frozen=True)
class StepLog:
    step: int
    positions: Tuple[int, ...]
    tokens: Tuple[int, ...]
    confidences: Tuple[float, ...]


@dataclass(frozen=True)
class Trajectory:
    """Completed decode: final sequence, commit order, per-step audit."""

    final: MaskedSeq
    unmask_order: Tuple[int, ...]
    per_step_log: Tuple[StepLog, ...]
    denoise_evals: int = 0

    def __post_init__(self):
        if sorted(self.unmask_order) != list(range(self.final.gen_len)):
            raise ValueError("unmask_order is not a permutation of the generation region")


def gumbel_perturb(logits: np.ndarray, temperature: float,
                   rng: RandomStream) -> np.ndarray:
    """Add temperature-scaled standard Gumbel noise to log-probability vectors.

    With ``temperature == 0`` the input is returned unchanged (and no random
    draws are consumed), so downstream argmax is greedy. Otherwise argmax over
    the perturbed vectors samples the temperature-tempered softmax.
    """
    if temperature < 0:
        raise ValueError(f"temperature must be >= 0, got {temperature}")
    if temperature == 0:
        return logits
    noise = rng.generator().gumbel(size=logits.shape)
    return logits + temperature * noise


def propose_x0(output: DenoiserOutput | np.ndarray, temperature: float,
               rng: RandomStream, *,
               confidence_from_noise: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Full-sequence token proposal plus per-position confidence.

    Tokens are the argmax of the Gumbel-perturbed vectors (ties resolve to
    the lowest token id). Confidence is the model's unperturbed probability
    of the chosen token; ``confidence_from_noise`` switches it to the
    perturbed value.
    """
    logits = output.single(0) if isinstance(output, DenoiserOutput) else output
    perturbed = gumbel_perturb(logits, temperature, rng)
    tokens = np.argmax(perturbed, axis=-1)
    source = perturbed if confidence_from_noise else logits
    confidences = np.exp(source[np.arange(len(tokens)), tokens])
    return tokens, confidences


def _select_positions(candidates: Sequence[int], confidences: np.ndarray,
                      count: int, strategy: str,
                      rng: Optional[RandomStream]) -> Tuple[int, ...]:
    if strategy == "low_confidence":
        ranked = sorted(candidates, key=lambda p: (-confidences[p], p))
        return tuple(ranked[:count])
    if strategy == "ar":
        return tuple(sorted(candidates)[:count])
    if strategy == "random":
        if rng is None:
            raise ValueError("random strategy needs a random stream")
        idx = rng.generator().choice(len(candidates), size=count, replace=False)
        return tuple(candidates[i] for i in idx)
    raise ValueError(f"unknown strategy {strategy!r}")


def transfer_tokens(x: MaskedSeq, proposal: np.ndarray, confidences: np.ndarray,
                    count: int, strategy: str,
                    rng: Optional[RandomStream] = None) -> Tuple[MaskedSeq, Tuple[int, ...]]:
    """Commit ``count`` proposed tokens inside the current block.

    Selection is restricted to the block's masked positions; the strategy
    picks which ones. Returns the refined sequence and the committed
    positions in commitment order.
    """
    block = current_block(x)
    if block >= x.layout.num_blocks:
        raise ValueError("sequence has no masked positions left")
    block_range = x.layout.block_range(block)
    candidates = [p for p in block_range if x.is_masked(p)]
    if count > len(candidates):
        raise ValueError(
            f"asked to commit {count} tokens but block {block} has only "
            f"{len(candidates)} masked positions"
        )
    chosen = _select_positions(candidates, confidences, count, strategy, rng)
    refined = x.with_tokens({p: int(proposal[p]) for p in chosen})
    return refined, chosen


def transfer_all_tokens(x: MaskedSeq, proposal: np.ndarray) -> MaskedSeq:
    """Fill every masked slot from the proposal, leaving committed tokens alone."""
    return x.with_tokens({p: int(proposal[p]) for p in x.masked_positions()})


def decode(model, prompt: Sequence[int], cfg: DecodeConfig,
           rng: Optional[RandomStream] = None, nfe=None) -> Trajectory:
    """Run the full reverse process and return the completed trajectory.

    Deterministic given (model, prompt, cfg, master_seed): every step draws
    from a stream addressed by (beam 0, step, candidate 0), the same
    addressing the beam search uses, so a width-1 search reproduces this
    decode token for token.
    """
    stream = rng if rng is not None else RandomStream(cfg.master_seed)
    x = MaskedSeq.fully_masked(tuple(prompt), cfg.layout, model.vocab.mask_id)
    tokens_per_step = cfg.tokens_per_step
    order: list[int] = []
    logs: list[StepLog] = []
    evals = 0
    for step in range(cfg.steps):
        out = model.predict([x])
        evals += 1
        if nfe is not None:
            nfe.add_denoise(1)
        step_stream = stream.child("beam", 0, "step", step, "cand", 0)
        proposal, confs = propose_x0(
            out.single(0), cfg.temperature, step_stream.child("gumbel"),
            confidence_from_noise=cfg.confidence_from_noise,
        )
        x, chosen = transfer_tokens(
            x, proposal, confs, tokens_per_step[step], cfg.strategy,
            step_stream.child("transfer"),
        )
        order.extend(chosen)
        logs.append(StepLog(
            step=step,
            positions=chosen,
            tokens=tuple(int(proposal[p]) for p in chosen),
            confidences=tuple(float(confs[p]) for p in chosen),
        ))
    return Trajectory(x, tuple(order), tuple(logs), denoise_evals=evals)
