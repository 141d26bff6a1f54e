"""Toy denoisers with exact conditionals.

A denoiser maps a batch of partially masked sequences to per-position
log-probability vectors over the real vocabulary. Two implementations ship:

* :class:`MarkovChainModel` — a first-order chain spanning prompt plus
  generation region; masked-position conditionals are exact (forward-backward
  given every observed token), so it doubles as a ground-truth oracle.
* :class:`PerturbedModel` — wraps a chain and distorts its outputs
  (temperature sharpening everywhere, a confidence bonus toward the base
  argmax at even generation positions), manufacturing positions where
  reported confidence is misleading.

Models are immutable after load; ``predict`` is pure and thread-safe.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .core import MaskedSeq, Vocabulary

__all__ = [
    "DenoiserOutput",
    "MarkovChainModel",
    "PerturbedModel",
    "ModelError",
    "ModelLoadError",
    "load_model",
    "save_model",
    "exact_sequence_logprob",
]

NORMALIZATION_TOL = 1e-6


class ModelError(Exception):
    """Invalid model content or misuse of a model."""


class ModelLoadError(ModelError):
    """Model file missing, unparseable, or failing validation."""


@dataclass(frozen=True)
class DenoiserOutput:
    """Per-sequence, per-generation-position log-probabilities, shape (B, L, V).

    Every position's vector is a normalized distribution over real tokens
    (MASK excluded from the support). Vectors are present for already-revealed
    positions too, but decoding never uses them to overwrite committed tokens.
    """

    logprobs: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.logprobs.shape[0]

    def single(self, i: int = 0) -> np.ndarray:
        return self.logprobs[i]


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = m_safe + np.log(np.sum(np.exp(a - m_safe), axis=axis, keepdims=True))
    out = np.where(np.isfinite(m), out, -np.inf)
    return np.squeeze(out, axis=axis)


def _normalize_logits(lp: np.ndarray) -> np.ndarray:
    """Renormalize each trailing vector to log-sum-exp zero."""
    return lp - _logsumexp(lp, axis=-1)[..., None]


@dataclass(frozen=True)
class MarkovChainModel:
    """First-order chain over prompt+generation positions with exact inference.

    ``log_initial`` (V,) and ``log_transition`` (V, V) live in log domain;
    rows are stochastic. ``predict`` returns, for every generation position,
    the exact conditional P(X_i = v | all observed tokens), computed by
    forward-backward along the chain.
    """

    vocab: Vocabulary
    log_initial: np.ndarray
    log_transition: np.ndarray

    markov_order = 1

    def __post_init__(self):
        V = self.vocab.size
        init = np.asarray(self.log_initial, dtype=np.float64)
        trans = np.asarray(self.log_transition, dtype=np.float64)
        if init.shape != (V,):
            raise ModelError(f"initial distribution has shape {init.shape}, expected ({V},)")
        if trans.shape != (V, V):
            raise ModelError(f"transition matrix has shape {trans.shape}, expected ({V}, {V})")
        if abs(np.exp(_logsumexp(init, axis=0)) - 1.0) > NORMALIZATION_TOL:
            raise ModelError("initial distribution does not sum to 1")
        row_sums = np.exp(_logsumexp(trans, axis=1))
        bad = np.nonzero(np.abs(row_sums - 1.0) > NORMALIZATION_TOL)[0]
        if bad.size:
            raise ModelError(f"transition row {bad[0]} sums to {row_sums[bad[0]]:.6g}, expected 1")
        object.__setattr__(self, "log_initial", init)
        object.__setattr__(self, "log_transition", trans)
        # Linear-domain copies back the scaled forward-backward recursion;
        # per-step renormalization keeps it exact for these chain lengths.
        object.__setattr__(self, "_lin_initial", np.exp(init))
        object.__setattr__(self, "_lin_transition", np.exp(trans))

    @property
    def base(self) -> "MarkovChainModel":
        return self

    def _check_seq(self, seq: MaskedSeq) -> None:
        if seq.mask_id != self.vocab.mask_id:
            raise ValueError(
                f"sequence mask_id {seq.mask_id} does not match model vocabulary "
                f"(mask_id {self.vocab.mask_id})"
            )
        for tok in seq.chain_tokens():
            if tok != seq.mask_id and not 0 <= tok < self.vocab.size:
                raise ValueError(f"token id {tok} outside model vocabulary of size {self.vocab.size}")

    def _conditionals(self, seq: MaskedSeq) -> np.ndarray:
        """Exact per-position conditionals over the whole chain, shape (n, V).

        Scaled forward-backward: linear-domain matvecs with per-step
        renormalization (the scale factors cancel in the conditionals),
        converted to log domain at the end.
        """
        V = self.vocab.size
        tokens = seq.chain_tokens()
        n = len(tokens)
        T = self._lin_transition

        def constrain(vec: np.ndarray, i: int) -> np.ndarray:
            tok = tokens[i]
            if tok == seq.mask_id:
                return vec
            out = np.zeros_like(vec)
            out[tok] = vec[tok]
            return out

        fwd = np.empty((n, V), dtype=np.float64)
        vec = constrain(self._lin_initial, 0)
        for i in range(n):
            if i:
                vec = constrain(vec @ T, i)
            total = vec.sum()
            if total <= 0.0:
                raise ModelError("observed tokens have zero probability under the chain")
            vec = vec / total
            fwd[i] = vec

        bwd = np.empty((n, V), dtype=np.float64)
        vec = np.ones(V, dtype=np.float64)
        bwd[n - 1] = vec
        for i in range(n - 2, -1, -1):
            vec = T @ constrain(vec, i + 1)
            total = vec.sum()
            if total <= 0.0:
                raise ModelError("observed tokens have zero probability under the chain")
            vec = vec / total
            bwd[i] = vec

        post = fwd * bwd
        totals = post.sum(axis=1)
        if np.any(totals <= 0.0):
            raise ModelError("observed tokens have zero probability under the chain")
        post /= totals[:, None]
        with np.errstate(divide="ignore"):
            return np.log(post)

    def predict(self, query: Sequence[MaskedSeq] | MaskedSeq) -> DenoiserOutput:
        """Exact conditionals for every generation position of each sequence."""
        seqs = [query] if isinstance(query, MaskedSeq) else list(query)
        if not seqs:
            raise ValueError("empty query batch")
        p_len, g_len = len(seqs[0].prompt), seqs[0].gen_len
        out = np.empty((len(seqs), g_len, self.vocab.size), dtype=np.float64)
        for i, seq in enumerate(seqs):
            if len(seq.prompt) != p_len or seq.gen_len != g_len:
                raise ValueError("all sequences in a batch must share prompt length and gen length")
            self._check_seq(seq)
            out[i] = self._conditionals(seq)[p_len:]
        return DenoiserOutput(out)


@dataclass(frozen=True)
class PerturbedModel:
    """Chain denoiser with deliberately distorted outputs.

    Distributions are sharpened by raising probabilities to the power
    ``temperature_skew``; at even generation positions an additional
    ``confidence_bias`` log-bonus is granted to the base model's argmax
    token. Outputs stay normalized. The untouched chain remains available
    as ``base`` (verifiers score against it).
    """

    base: MarkovChainModel
    temperature_skew: float = 1.0
    confidence_bias: float = 0.0

    markov_order = 1

    def __post_init__(self):
        if self.temperature_skew <= 0:
            raise ModelError(f"temperature_skew must be positive, got {self.temperature_skew}")

    @property
    def vocab(self) -> Vocabulary:
        return self.base.vocab

    def predict(self, query: Sequence[MaskedSeq] | MaskedSeq) -> DenoiserOutput:
        base_out = self.base.predict(query).logprobs
        lp = _normalize_logits(base_out * self.temperature_skew)
        if self.confidence_bias != 0.0:
            argmax = np.argmax(base_out, axis=-1)
            rows = np.arange(lp.shape[0])[:, None]
            even = np.arange(0, lp.shape[1], 2)[None, :]
            lp[rows, even, argmax[:, ::2]] += self.confidence_bias
            lp = _normalize_logits(lp)
        return DenoiserOutput(lp)


def exact_sequence_logprob(model, tokens: Sequence[int],
                           prefix: Sequence[int] = ()) -> float:
    """Exact chain log-probability of ``tokens``.

    With an empty ``prefix`` this is the unconditional joint
    log initial(t0) + sum of transition log-probs. A non-empty prefix acts
    as observed conditioning context: the first term becomes the transition
    from the prefix's last token. Raises on MASK anywhere.
    """
    chain = model.base if hasattr(model, "base") else model
    tokens = tuple(tokens)
    if not tokens:
        return 0.0
    mask_id = chain.vocab.mask_id
    if mask_id in tokens or mask_id in tuple(prefix):
        raise ValueError("sequence contains MASK; exact scoring needs real tokens")
    if prefix:
        total = chain.log_transition[prefix[-1], tokens[0]]
    else:
        total = chain.log_initial[tokens[0]]
    for a, b in zip(tokens, tokens[1:]):
        total += chain.log_transition[a, b]
    return float(total)


def _as_prob_matrix(raw, name: str, rows: int, cols: int) -> np.ndarray:
    arr = np.asarray(raw, dtype=np.float64)
    if arr.shape != ((rows, cols) if cols else (rows,)):
        raise ModelLoadError(
            f"{name} has shape {arr.shape}, expected {(rows, cols) if cols else (rows,)}"
        )
    if np.any(arr < 0.0):
        raise ModelLoadError(f"{name} contains negative probabilities")
    return arr


def load_model(path) -> MarkovChainModel | PerturbedModel:
    """Load a chain model from a JSON document.

    Required fields: ``vocab_size``, ``initial`` (length V, linear domain),
    ``transition`` (V rows of V, linear domain). Optional: ``names`` (V
    strings), ``answer_delimiters`` ([open_id, close_id]), and ``perturb``
    ({"temperature_skew": float, "confidence_bias": float}) which wraps the
    chain in a :class:`PerturbedModel`.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise ModelLoadError(f"model file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ModelLoadError(f"model file {path} is not valid JSON: {exc}") from exc

    try:
        V = int(doc["vocab_size"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelLoadError(f"model file {path} lacks a valid vocab_size") from exc
    if V < 2:
        raise ModelLoadError(f"vocab_size must be at least 2, got {V}")
    if "initial" not in doc or "transition" not in doc:
        raise ModelLoadError(f"model file {path} needs 'initial' and 'transition'")

    initial = _as_prob_matrix(doc["initial"], "initial", V, 0)
    transition = _as_prob_matrix(doc["transition"], "transition", V, V)
    if abs(initial.sum() - 1.0) > NORMALIZATION_TOL:
        raise ModelLoadError(f"initial distribution sums to {initial.sum():.6g}, expected 1")
    row_sums = transition.sum(axis=1)
    bad = np.nonzero(np.abs(row_sums - 1.0) > NORMALIZATION_TOL)[0]
    if bad.size:
        raise ModelLoadError(f"transition row {bad[0]} sums to {row_sums[bad[0]]:.6g}, expected 1")

    names = doc.get("names")
    if names is not None and len(names) != V:
        raise ModelLoadError(f"names has {len(names)} entries for vocab_size {V}")
    delims = doc.get("answer_delimiters")
    vocab = Vocabulary(
        size=V,
        names=tuple(names) if names else None,
        answer_delimiters=tuple(delims) if delims else None,
    )
    with np.errstate(divide="ignore"):
        chain = MarkovChainModel(vocab, np.log(initial), np.log(transition))

    perturb = doc.get("perturb")
    if perturb:
        return PerturbedModel(
            base=chain,
            temperature_skew=float(perturb.get("temperature_skew", 1.0)),
            confidence_bias=float(perturb.get("confidence_bias", 0.0)),
        )
    return chain


def save_model(model: MarkovChainModel | PerturbedModel, path) -> None:
    """Write a model as the JSON document understood by :func:`load_model`."""
    chain = model.base if hasattr(model, "base") else model
    doc = {
        "vocab_size": chain.vocab.size,
        "initial": np.exp(chain.log_initial).tolist(),
        "transition": np.exp(chain.log_transition).tolist(),
    }
    if chain.vocab.names:
        doc["names"] = list(chain.vocab.names)
    if chain.vocab.answer_delimiters:
        doc["answer_delimiters"] = list(chain.vocab.answer_delimiters)
    if isinstance(model, PerturbedModel):
        doc["perturb"] = {
            "temperature_skew": model.temperature_skew,
            "confidence_bias": model.confidence_bias,
        }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def uniform_chain(V: int, names: Optional[Tuple[str, ...]] = None) -> MarkovChainModel:
    """Chain whose initial and transition rows are all uniform."""
    vocab = Vocabulary(size=V, names=names)
    log_p = math.log(1.0 / V)
    return MarkovChainModel(
        vocab,
        np.full(V, log_p),
        np.full((V, V), log_p),
    )


def identity_chain(V: int) -> MarkovChainModel:
    """Chain that deterministically repeats its previous token."""
    vocab = Vocabulary(size=V)
    with np.errstate(divide="ignore"):
        trans = np.log(np.eye(V))
    return MarkovChainModel(vocab, np.full(V, math.log(1.0 / V)), trans)


def random_chain(V: int, rng: np.random.Generator,
                 concentration: float = 1.0) -> MarkovChainModel:
    """Chain with Dirichlet-distributed initial and transition rows."""
    vocab = Vocabulary(size=V)
    init = rng.dirichlet(np.full(V, concentration))
    trans = np.vstack([rng.dirichlet(np.full(V, concentration)) for _ in range(V)])
    return MarkovChainModel(vocab, np.log(init), np.log(trans))
