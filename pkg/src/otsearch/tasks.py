"""Desk-scale benchmark tasks with programmatic verifiers.

Two tasks ship:

* **mini-countdown** — reach a target number with one arithmetic expression
  over a given operand multiset. Instances are generated solvable by
  construction (expression first, target derived); the verifier parses the
  decoded text, checks the operand multiset, and evaluates with exact
  integer arithmetic. A purpose-built chain model accompanies the task: its
  tokenizer merges frequent spans (whole expressions such as ``3*4`` and
  results such as ``=12``) so that a first-order chain can carry
  target-conditioned arithmetic, and its beliefs are deliberately imperfect:
  for most targets a crowd of near-miss expressions jointly outweighs the
  thinner set of correct ones, so per-position confidence is misleading even
  though the correct completions win on joint likelihood.
* **chain membership** — continue a prompt sampled from a reference chain;
  a continuation verifies when its exact log-probability under the reference
  chain clears an instance-specific threshold. Decoding runs against a
  miscalibrated wrapper of the same chain, so confidence-greedy decoding and
  diverse sampling genuinely trade off.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import RandomStream, Vocabulary
from .model import MarkovChainModel, PerturbedModel, exact_sequence_logprob

__all__ = [
    "OPS",
    "CountdownConfig",
    "MiniCountdownInstance",
    "CountdownVerdict",
    "gen_countdown",
    "verify_countdown",
    "extract_countdown_answer",
    "countdown_vocab",
    "build_countdown_model",
    "CountdownTask",
    "make_countdown_task",
    "ChainTaskConfig",
    "ChainTaskInstance",
    "gen_chain_instance",
    "verify_chain",
    "build_chain_model",
    "viterbi_continuation_logprob",
    "ChainTask",
    "make_chain_task",
    "instances_to_jsonl",
    "instances_from_jsonl",
]

OPS = ("+", "-", "*")

# ---------------------------------------------------------------------------
# Expression parsing and evaluation (exact integers, standard precedence)
# ---------------------------------------------------------------------------


def _tokenize_expression(text: str) -> Optional[List[object]]:
    """Lex a candidate expression into ints and operator chars; None on junk."""
    out: List[object] = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch.isdigit():
            j = i
            while j < len(text) and text[j].isdigit():
                j += 1
            out.append(int(text[i:j]))
            i = j
        elif ch in OPS:
            out.append(ch)
            i += 1
        else:
            return None
    return out


def _parse_expression(text: str) -> Optional[Tuple[int, List[int]]]:
    """Evaluate ``number (op number)*`` with ``*`` binding tighter than
    ``+``/``-``, left-associative. Returns (value, operand list) or None."""
    lexed = _tokenize_expression(text)
    if not lexed:
        return None
    expected_number = True
    for item in lexed:
        if expected_number != isinstance(item, int):
            return None
        expected_number = not expected_number
    if expected_number:  # trailing operator
        return None
    operands = [x for x in lexed if isinstance(x, int)]
    # collapse multiplication first, then fold +/- left to right
    terms: List[object] = []
    acc = lexed[0]
    i = 1
    while i < len(lexed):
        op, num = lexed[i], lexed[i + 1]
        if op == "*":
            acc *= num
        else:
            terms.extend([acc, op])
            acc = num
        i += 2
    terms.append(acc)
    value = terms[0]
    for op, num in zip(terms[1::2], terms[2::2]):
        value = value + num if op == "+" else value - num
    return value, operands


# ---------------------------------------------------------------------------
# Countdown vocabulary and model
# ---------------------------------------------------------------------------

_NUM_MAX = 81  # largest value a single-digit pair expression can reach


class _CountdownAlphabet:
    """Token id layout shared by the countdown vocabulary and model builder."""

    def __init__(self):
        self.number = {n: n for n in range(_NUM_MAX + 1)}
        base = _NUM_MAX + 1
        self.plus, self.minus, self.times = base, base + 1, base + 2
        self.eq, self.comma, self.colon, self.pad = base + 3, base + 4, base + 5, base + 6
        names = [str(n) for n in range(_NUM_MAX + 1)]
        names += ["+", "-", "*", "=", ",", ":", "."]
        self.expr: Dict[Tuple[int, str, int], int] = {}
        self.expr_value: Dict[int, int] = {}
        for op in OPS:
            for x in range(1, 10):
                for y in range(1, 10):
                    value = {"+": x + y, "-": x - y, "*": x * y}[op]
                    if value < 1:
                        continue
                    tok = len(names)
                    self.expr[(x, op, y)] = tok
                    self.expr_value[tok] = value
                    names.append(f"{x}{op}{y}")
        self.result: Dict[int, int] = {}
        for value in range(1, _NUM_MAX + 1):
            tok = len(names)
            self.result[value] = tok
            names.append(f"={value}")
        self.names = tuple(names)
        self.size = len(names)


_ALPHABET = _CountdownAlphabet()


def countdown_vocab() -> Vocabulary:
    """Vocabulary for the countdown task: number tokens 0..81, the operator
    and delimiter characters, and merged expression/result tokens (a
    tokenizer-style merge; the verifier only ever sees the rendered text)."""
    return Vocabulary(size=_ALPHABET.size, names=_ALPHABET.names)


def build_countdown_model(true_weight: float = 0.45,
                          trap_weight: float = 0.55,
                          trap_advantage: float = 1.3,
                          expr_share: float = 0.7,
                          smoothing: float = 1e-6) -> MarkovChainModel:
    """Chain model for the countdown benchmark.

    A target number's row splits its expression mass between the expressions
    that actually reach the target (``true_weight``, spread thin over few
    tokens) and a decoy crowd reaching one popular wrong value
    (``trap_weight``, spread over at least ``trap_advantage`` times as many
    tokens). Summed over tokens the decoy value dominates the marginal at
    the result position, but each correct expression individually outweighs
    each decoy, so joint-likelihood pruning recovers what confidence-greedy
    commitment loses. Expression rows transition to their exact result
    token; results transition to padding.
    """
    a = _ALPHABET
    V = a.size
    by_value: Dict[int, List[int]] = {}
    for tok, value in a.expr_value.items():
        by_value.setdefault(value, []).append(tok)
    achievable = sorted(by_value)

    def pick_trap(value: int) -> Optional[int]:
        need = math.ceil(trap_advantage * len(by_value[value]))
        candidates = [u for u in achievable if u != value and len(by_value[u]) >= need]
        if not candidates:
            return None
        return max(candidates, key=lambda u: (len(by_value[u]), -u))

    trans = np.full((V, V), smoothing)
    sep_share = (1.0 - expr_share) / 2.0

    for n in range(_NUM_MAX + 1):
        row = trans[a.number[n]]
        row[a.comma] += sep_share
        row[a.colon] += sep_share
        if n in by_value:
            trap = pick_trap(n)
            true_toks = by_value[n]
            if trap is None:
                for tok in true_toks:
                    row[tok] += expr_share / len(true_toks)
            else:
                trap_toks = by_value[trap]
                for tok in true_toks:
                    row[tok] += expr_share * true_weight / len(true_toks)
                for tok in trap_toks:
                    row[tok] += expr_share * trap_weight / len(trap_toks)
        else:
            for tok in a.expr_value:
                row[tok] += expr_share / len(a.expr_value)

    trans[a.comma, [a.number[n] for n in range(1, 10)]] += 1.0 / 9
    trans[a.colon, [a.number[v] for v in achievable]] += 1.0 / len(achievable)
    for tok, value in a.expr_value.items():
        trans[tok, a.result[value]] += 1.0
    for value in range(1, _NUM_MAX + 1):
        trans[a.result[value], a.pad] += 1.0
    trans[a.pad, a.pad] += 1.0
    # operator/equals tokens only occur in degenerate decodes; keep them alive
    for tok in (a.plus, a.minus, a.times, a.eq):
        trans[tok] += 1.0 / V

    trans /= trans.sum(axis=1, keepdims=True)
    init = np.full(V, smoothing)
    init[[a.number[n] for n in range(1, 10)]] += 1.0 / 9
    init /= init.sum()
    return MarkovChainModel(countdown_vocab(), np.log(init), np.log(trans))


# ---------------------------------------------------------------------------
# Countdown instances
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CountdownConfig:
    """Bounds for instance sampling. Defaults match the shipped benchmark
    model (single-digit operand pairs); wider settings stay verifiable but
    the shipped model has no competence beyond pairs."""

    min_operands: int = 2
    max_operands: int = 2
    operand_min: int = 1
    operand_max: int = 9
    target_max: int = _NUM_MAX
    gen_len: int = 4

    def __post_init__(self):
        if not 2 <= self.min_operands <= self.max_operands <= 4:
            raise ValueError("operand count must lie in 2..4")
        if not 1 <= self.operand_min <= self.operand_max < 50:
            raise ValueError("operands must be positive and < 50")


@dataclass(frozen=True)
class MiniCountdownInstance:
    instance_id: int
    operands: Tuple[int, ...]
    target: int
    prompt_tokens: Tuple[int, ...]
    expression: str  # the generating witness; never shown to the decoder


@dataclass(frozen=True)
class CountdownVerdict:
    ok: bool
    diagnosis: str  # ok | parse_error | wrong_operands | wrong_value


def gen_countdown(rng: RandomStream, cfg: CountdownConfig = CountdownConfig(),
                  instance_id: int = 0) -> MiniCountdownInstance:
    """Sample a solvable instance: draw operands and operators, evaluate the
    flat expression, and keep it once the target is a representable positive
    integer. Deterministic given the stream."""
    gen = rng.generator()
    a = _ALPHABET
    while True:
        count = int(gen.integers(cfg.min_operands, cfg.max_operands + 1))
        operands = [int(gen.integers(cfg.operand_min, cfg.operand_max + 1))
                    for _ in range(count)]
        ops = [OPS[int(gen.integers(0, len(OPS)))] for _ in range(count - 1)]
        expression = str(operands[0])
        for op, operand in zip(ops, operands[1:]):
            expression += op + str(operand)
        parsed = _parse_expression(expression)
        target = parsed[0]
        if not 1 <= target <= cfg.target_max:
            continue
        prompt: List[int] = []
        for i, operand in enumerate(operands):
            if i:
                prompt.append(a.comma)
            prompt.append(a.number[operand])
        prompt += [a.colon, a.number[target]]
        return MiniCountdownInstance(
            instance_id=instance_id,
            operands=tuple(operands),
            target=target,
            prompt_tokens=tuple(prompt),
            expression=expression,
        )


def _split_answer(text: str) -> Optional[Tuple[str, int]]:
    """Pull (expression text, stated value) out of rendered output via the
    final '='. Returns None when there is nothing well-formed to check."""
    eq = text.rfind("=")
    if eq < 0:
        return None
    rhs = text[eq + 1:].strip(".").strip("?")
    if not rhs or not rhs.isdigit():
        return None
    lhs = text[:eq]
    for start in range(len(lhs)):
        parsed = _parse_expression(lhs[start:])
        if parsed is not None and len(parsed[1]) >= 2:
            return lhs[start:], int(rhs)
    return None


def verify_countdown(instance: MiniCountdownInstance, gen_tokens: Sequence[int],
                     vocab: Vocabulary) -> CountdownVerdict:
    """Total verification of arbitrary decoded tokens.

    The rendered text must end in ``expression=value`` (padding ignored);
    the expression must use exactly the instance's operand multiset, and
    both its exact value and the stated value must equal the target.
    """
    text = vocab.render(gen_tokens)
    split = _split_answer(text)
    if split is None:
        return CountdownVerdict(False, "parse_error")
    expr_text, stated = split
    value, operands = _parse_expression(expr_text)
    if Counter(operands) != Counter(instance.operands):
        return CountdownVerdict(False, "wrong_operands")
    if value != instance.target or stated != value:
        return CountdownVerdict(False, "wrong_value")
    return CountdownVerdict(True, "ok")


def extract_countdown_answer(gen_tokens: Sequence[int],
                             vocab: Vocabulary) -> Optional[str]:
    """Canonical ``expression=value`` answer string, or None when unparseable."""
    split = _split_answer(vocab.render(gen_tokens))
    if split is None:
        return None
    return f"{split[0]}={split[1]}"


@dataclass(frozen=True)
class CountdownTask:
    instances: Tuple[MiniCountdownInstance, ...]
    vocab: Vocabulary

    def prompt(self, inst: MiniCountdownInstance) -> Tuple[int, ...]:
        return inst.prompt_tokens

    def verify(self, inst: MiniCountdownInstance, gen_tokens: Sequence[int]) -> bool:
        return verify_countdown(inst, gen_tokens, self.vocab).ok

    def diagnose(self, inst: MiniCountdownInstance, gen_tokens: Sequence[int]) -> str:
        return verify_countdown(inst, gen_tokens, self.vocab).diagnosis

    def extract_answer(self, inst: MiniCountdownInstance,
                       gen_tokens: Sequence[int]) -> Optional[str]:
        return extract_countdown_answer(gen_tokens, self.vocab)


def make_countdown_task(n_instances: int, seed: int,
                        cfg: CountdownConfig = CountdownConfig()
                        ) -> Tuple[MarkovChainModel, CountdownTask]:
    model = build_countdown_model()
    stream = RandomStream(seed)
    instances = tuple(
        gen_countdown(stream.child("countdown", i), cfg, instance_id=i)
        for i in range(n_instances)
    )
    return model, CountdownTask(instances, model.vocab)


# ---------------------------------------------------------------------------
# Chain-membership task
# ---------------------------------------------------------------------------

# 60th percentile of (random-decode score - best continuation score) on the
# shipped chain at tau=0.8, measured once on 64 instances x 64 samples and
# frozen; see docs/tuning.md.
CHAIN_THRESHOLD_OFFSET = -3.82


@dataclass(frozen=True)
class ChainTaskConfig:
    prompt_len: int = 3
    gen_len: int = 16
    threshold_offset: float = CHAIN_THRESHOLD_OFFSET


@dataclass(frozen=True)
class ChainTaskInstance:
    instance_id: int
    prompt_tokens: Tuple[int, ...]
    threshold: float


def build_chain_model(V: int = 8, step_weight: float = 0.5,
                      skip_weight: float = 0.25,
                      temperature_skew: float = 2.0,
                      confidence_bias: float = 2.0) -> PerturbedModel:
    """Reference chain plus the miscalibrated decoder used by the task.

    Rows favour i -> i+1 strongly and i -> i+3 moderately, with the rest
    uniform, so good continuations exist off the greedy path. The returned
    model decodes with sharpened, even-position-biased outputs; its ``base``
    is the clean chain the verifier scores against.
    """
    names = tuple(chr(ord("a") + i) for i in range(V))
    vocab = Vocabulary(size=V, names=names)
    trans = np.full((V, V), (1.0 - step_weight - skip_weight) / V)
    for i in range(V):
        trans[i, (i + 1) % V] += step_weight
        trans[i, (i + 3) % V] += skip_weight
    trans /= trans.sum(axis=1, keepdims=True)
    init = np.full(V, 1.0 / V)
    base = MarkovChainModel(vocab, np.log(init), np.log(trans))
    return PerturbedModel(base, temperature_skew=temperature_skew,
                          confidence_bias=confidence_bias)


def viterbi_continuation_logprob(chain: MarkovChainModel,
                                 prefix: Sequence[int], length: int) -> float:
    """Log-probability of the most likely length-``length`` continuation."""
    if length < 1:
        return 0.0
    if prefix:
        best = chain.log_transition[prefix[-1]].copy()
    else:
        best = chain.log_initial.copy()
    for _ in range(length - 1):
        best = np.max(best[:, None] + chain.log_transition, axis=0)
    return float(best.max())


def gen_chain_instance(chain: MarkovChainModel, rng: RandomStream,
                       cfg: ChainTaskConfig = ChainTaskConfig(),
                       instance_id: int = 0) -> ChainTaskInstance:
    """Sample a prompt from the chain and derive the acceptance threshold
    from the best achievable continuation plus the frozen offset; the
    threshold is achievable by construction."""
    gen = rng.generator()
    prompt = [int(gen.choice(chain.vocab.size, p=np.exp(chain.log_initial)))]
    for _ in range(cfg.prompt_len - 1):
        p = np.exp(chain.log_transition[prompt[-1]])
        prompt.append(int(gen.choice(chain.vocab.size, p=p)))
    best = viterbi_continuation_logprob(chain, prompt, cfg.gen_len)
    return ChainTaskInstance(
        instance_id=instance_id,
        prompt_tokens=tuple(prompt),
        threshold=best + cfg.threshold_offset,
    )


def verify_chain(instance: ChainTaskInstance, gen_tokens: Sequence[int],
                 model) -> bool:
    """Continuation passes iff its exact log-probability under the reference
    chain, conditioned on the prompt, clears the instance threshold. Any
    remaining MASK fails."""
    chain = model.base if hasattr(model, "base") else model
    if chain.vocab.mask_id in tuple(gen_tokens):
        return False
    score = exact_sequence_logprob(chain, gen_tokens, prefix=instance.prompt_tokens)
    return score >= instance.threshold


@dataclass(frozen=True)
class ChainTask:
    instances: Tuple[ChainTaskInstance, ...]
    chain: MarkovChainModel

    def prompt(self, inst: ChainTaskInstance) -> Tuple[int, ...]:
        return inst.prompt_tokens

    def verify(self, inst: ChainTaskInstance, gen_tokens: Sequence[int]) -> bool:
        return verify_chain(inst, gen_tokens, self.chain)

    def extract_answer(self, inst: ChainTaskInstance,
                       gen_tokens: Sequence[int]) -> Optional[str]:
        if self.chain.vocab.mask_id in tuple(gen_tokens):
            return None
        return self.chain.vocab.render(gen_tokens)


def make_chain_task(n_instances: int, seed: int,
                    cfg: ChainTaskConfig = ChainTaskConfig()
                    ) -> Tuple[PerturbedModel, ChainTask]:
    model = build_chain_model()
    stream = RandomStream(seed)
    instances = tuple(
        gen_chain_instance(model.base, stream.child("chain", i), cfg, instance_id=i)
        for i in range(n_instances)
    )
    return model, ChainTask(instances, model.base)


# ---------------------------------------------------------------------------
# Instance file round trips (JSON lines, one instance per line)
# ---------------------------------------------------------------------------


def _instance_to_dict(inst) -> dict:
    if isinstance(inst, MiniCountdownInstance):
        return {
            "kind": "countdown",
            "instance_id": inst.instance_id,
            "operands": list(inst.operands),
            "target": inst.target,
            "prompt_tokens": list(inst.prompt_tokens),
            "expression": inst.expression,
        }
    if isinstance(inst, ChainTaskInstance):
        return {
            "kind": "chain",
            "instance_id": inst.instance_id,
            "prompt_tokens": list(inst.prompt_tokens),
            "threshold": inst.threshold,
        }
    raise TypeError(f"unknown instance type {type(inst)!r}")


def _instance_from_dict(doc: dict):
    kind = doc.get("kind")
    if kind == "countdown":
        return MiniCountdownInstance(
            instance_id=int(doc["instance_id"]),
            operands=tuple(doc["operands"]),
            target=int(doc["target"]),
            prompt_tokens=tuple(doc["prompt_tokens"]),
            expression=doc["expression"],
        )
    if kind == "chain":
        return ChainTaskInstance(
            instance_id=int(doc["instance_id"]),
            prompt_tokens=tuple(doc["prompt_tokens"]),
            threshold=float(doc["threshold"]),
        )
    raise ValueError(f"unknown instance kind {kind!r}")


def instances_to_jsonl(instances: Sequence, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(_instance_to_dict(inst), sort_keys=True) + "\n")


def instances_from_jsonl(path) -> list:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(_instance_from_dict(json.loads(line)))
    return out
