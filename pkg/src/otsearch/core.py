"""Core value types for masked-sequence decoding.

Vocabulary, masked sequences with a prompt/generation split, block layouts
for semi-autoregressive decoding, monotone noise schedules, and counter-based
random streams. All types are immutable after construction; the functions
here are pure and safe for concurrent use.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "Vocabulary",
    "BlockLayout",
    "MaskedSeq",
    "NoiseSchedule",
    "RandomStream",
    "alpha_at",
    "posterior_unmask_prob",
    "forward_corrupt",
    "block_index_of",
    "current_block",
]


@dataclass(frozen=True)
class Vocabulary:
    """Token id space: ids 0..size-1 are real tokens, ``mask_id`` is reserved.

    ``names`` optionally maps real token ids to display strings (used when
    rendering decoded sequences and extracting answers). ``answer_delimiters``
    is an optional (open, close) pair of token ids bracketing an answer span.
    """

    size: int
    mask_id: int = -1
    names: Optional[Tuple[str, ...]] = None
    answer_delimiters: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        if self.size < 2:
            raise ValueError(f"vocabulary needs at least 2 real tokens, got {self.size}")
        if self.mask_id == -1:
            object.__setattr__(self, "mask_id", self.size)
        if 0 <= self.mask_id < self.size:
            raise ValueError(f"mask_id {self.mask_id} collides with real token ids [0, {self.size})")
        if self.names is not None:
            object.__setattr__(self, "names", tuple(self.names))
            if len(self.names) != self.size:
                raise ValueError(f"names has {len(self.names)} entries for {self.size} tokens")

    def render(self, tokens: Iterable[int]) -> str:
        """Join token names (or decimal ids when unnamed); MASK renders as '?'."""
        parts = []
        for t in tokens:
            if t == self.mask_id:
                parts.append("?")
            elif self.names is not None and 0 <= t < self.size:
                parts.append(self.names[t])
            else:
                parts.append(str(t))
        return "".join(parts)


@dataclass(frozen=True)
class BlockLayout:
    """Partition of the generation region [0, L) into contiguous blocks.

    The last block may be shorter when ``block_size`` does not divide L.
    ``block_size == 1`` degenerates to per-token blocks (autoregressive order).
    """

    gen_len: int
    block_size: int

    def __post_init__(self):
        if self.gen_len < 1:
            raise ValueError(f"gen_len must be positive, got {self.gen_len}")
        if not 1 <= self.block_size:
            raise ValueError(f"block_size must be positive, got {self.block_size}")

    @property
    def num_blocks(self) -> int:
        return -(-self.gen_len // self.block_size)

    @property
    def boundaries(self) -> Tuple[Tuple[int, int], ...]:
        """Half-open (start, stop) index ranges, left to right."""
        return tuple(
            (b * self.block_size, min((b + 1) * self.block_size, self.gen_len))
            for b in range(self.num_blocks)
        )

    def block_range(self, b: int) -> range:
        start, stop = self.boundaries[b]
        return range(start, stop)


def block_index_of(layout: BlockLayout, pos: int) -> int:
    """Block index containing generation position ``pos``."""
    if not 0 <= pos < layout.gen_len:
        raise IndexError(f"position {pos} outside generation region [0, {layout.gen_len})")
    return pos // layout.block_size


@dataclass(frozen=True)
class MaskedSeq:
    """A prompt plus a generation region whose slots are real tokens or MASK.

    The prompt is all-real and never modified; the generation region has a
    fixed length for the lifetime of a decode. Slots equal to ``mask_id``
    are masked.
    """

    prompt: Tuple[int, ...]
    gen: Tuple[int, ...]
    layout: BlockLayout
    mask_id: int

    def __post_init__(self):
        object.__setattr__(self, "prompt", tuple(self.prompt))
        object.__setattr__(self, "gen", tuple(self.gen))
        if self.mask_id in self.prompt:
            raise ValueError("prompt slots must be real tokens, found MASK")
        if len(self.gen) != self.layout.gen_len:
            raise ValueError(
                f"gen has {len(self.gen)} slots but layout expects {self.layout.gen_len}"
            )

    @classmethod
    def fully_masked(cls, prompt: Sequence[int], layout: BlockLayout, mask_id: int) -> "MaskedSeq":
        return cls(tuple(prompt), (mask_id,) * layout.gen_len, layout, mask_id)

    @property
    def gen_len(self) -> int:
        return len(self.gen)

    def is_masked(self, pos: int) -> bool:
        return self.gen[pos] == self.mask_id

    def masked_positions(self) -> Tuple[int, ...]:
        return tuple(i for i, t in enumerate(self.gen) if t == self.mask_id)

    def revealed_positions(self) -> Tuple[int, ...]:
        return tuple(i for i, t in enumerate(self.gen) if t != self.mask_id)

    def num_masked(self) -> int:
        return sum(1 for t in self.gen if t == self.mask_id)

    def with_tokens(self, assignments: dict[int, int]) -> "MaskedSeq":
        """New sequence with generation slots overwritten per ``assignments``."""
        gen = list(self.gen)
        for pos, tok in assignments.items():
            gen[pos] = tok
        return MaskedSeq(self.prompt, tuple(gen), self.layout, self.mask_id)

    def with_masked(self, positions: Iterable[int]) -> "MaskedSeq":
        """New sequence with the given generation slots re-masked."""
        gen = list(self.gen)
        for pos in positions:
            gen[pos] = self.mask_id
        return MaskedSeq(self.prompt, tuple(gen), self.layout, self.mask_id)

    def chain_tokens(self) -> Tuple[int, ...]:
        """Prompt and generation slots as one flat token tuple."""
        return self.prompt + self.gen


def current_block(x: MaskedSeq) -> int:
    """Lowest block index still containing a MASK; ``num_blocks`` when none do."""
    for i, t in enumerate(x.gen):
        if t == x.mask_id:
            return block_index_of(x.layout, i)
    return x.layout.num_blocks


@dataclass(frozen=True)
class NoiseSchedule:
    """Monotone non-increasing corruption level alpha(t) with alpha(0)=1, alpha(1)=0.

    ``linear`` uses alpha(t) = 1 - t. A custom schedule interpolates piecewise
    linearly between (t, alpha) knots; knots must start at (0, 1), end at
    (1, 0), and be non-increasing.
    """

    kind: str = "linear"
    table: Optional[Tuple[Tuple[float, float], ...]] = None

    def __post_init__(self):
        if self.kind not in ("linear", "custom"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "custom":
            if not self.table:
                raise ValueError("custom schedule requires a knot table")
            table = tuple((float(t), float(a)) for t, a in self.table)
            object.__setattr__(self, "table", table)
            ts = [t for t, _ in table]
            alphas = [a for _, a in table]
            if ts[0] != 0.0 or ts[-1] != 1.0:
                raise ValueError("knots must span t=0..1")
            if alphas[0] != 1.0 or alphas[-1] != 0.0:
                raise ValueError("knots must satisfy alpha(0)=1 and alpha(1)=0")
            if any(t2 <= t1 for t1, t2 in zip(ts, ts[1:])):
                raise ValueError("knot times must be strictly increasing")
            if any(a2 > a1 for a1, a2 in zip(alphas, alphas[1:])):
                raise ValueError("alpha knots must be non-increasing")


def alpha_at(schedule: NoiseSchedule, t: float) -> float:
    """Corruption survival probability alpha(t) for t in [0, 1]."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"time {t} outside [0, 1]")
    if schedule.kind == "linear":
        return 1.0 - t
    knots = schedule.table
    for (t1, a1), (t2, a2) in zip(knots, knots[1:]):
        if t <= t2:
            if t2 == t1:
                return a2
            w = (t - t1) / (t2 - t1)
            return a1 + w * (a2 - a1)
    return knots[-1][1]


def posterior_unmask_prob(schedule: NoiseSchedule, s: float, t: float) -> float:
    """Probability a masked slot is revealed when stepping time t down to s.

    Equals (alpha_s - alpha_t) / (1 - alpha_t); the complement
    (1 - alpha_s) / (1 - alpha_t) is the probability the slot stays MASK.
    """
    if not 0.0 <= s < t <= 1.0:
        raise ValueError(f"need 0 <= s < t <= 1, got s={s}, t={t}")
    a_s = alpha_at(schedule, s)
    a_t = alpha_at(schedule, t)
    if a_t >= 1.0:
        raise ZeroDivisionError(f"alpha({t}) = 1 leaves no masked mass to reveal")
    return (a_s - a_t) / (1.0 - a_t)


@dataclass(frozen=True)
class RandomStream:
    """Reproducible substream of a master seed, addressed by a derivation path.

    Equal (master_seed, path) pairs always yield the same draws; distinct
    paths yield statistically independent streams. Path components may be
    ints or short strings (strings hash via CRC32), so substreams can be
    pre-assigned per (run, beam, step, purpose) and used from any thread or
    execution order without changing results.
    """

    master_seed: int
    path: Tuple[int, ...] = field(default_factory=tuple)

    def child(self, *components: int | str) -> "RandomStream":
        encoded = tuple(
            zlib.crc32(c.encode()) if isinstance(c, str) else int(c) & 0xFFFFFFFF
            for c in components
        )
        return RandomStream(self.master_seed, self.path + encoded)

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(self.master_seed, spawn_key=self.path)
        return np.random.Generator(np.random.PCG64(seq))


def forward_corrupt(x0: MaskedSeq, t: float, rng: RandomStream,
                    schedule: NoiseSchedule | None = None) -> MaskedSeq:
    """Corrupt a fully real generation region: each slot independently survives
    with probability alpha(t), otherwise becomes MASK. The prompt is untouched.
    """
    if x0.num_masked() > 0:
        raise ValueError("forward corruption needs a fully real generation region")
    schedule = schedule or NoiseSchedule()
    keep = alpha_at(schedule, t)
    draws = rng.generator().random(x0.gen_len)
    gen = tuple(tok if u < keep else x0.mask_id for tok, u in zip(x0.gen, draws))
    return MaskedSeq(x0.prompt, gen, x0.layout, x0.mask_id)
