"""
Confidence Metrics
==================

Turns the top-5 log-probabilities of a REPEAT probe into low-confidence
metrics and decides whether a token is an anomaly candidate.
"""

import math
from dataclasses import asdict, dataclass
from typing import Any, Dict, Iterable, List, Sequence, Tuple

import numpy as np
from scipy.special import entr

from .errors import DistributionError, EmptyBaselineError, EmptyDistributionError

TOP_K = 5
PROBABILITY_FLOOR = 1e-300
SUM_SLACK = 1e-6


@dataclass(frozen=True)
class PredictionDistribution:
    """Top-k (token_text, logprob) pairs of one probe, descending by logprob."""

    entries: Tuple[Tuple[str, float], ...] = ()

    def __post_init__(self):
        if len(self.entries) > TOP_K:
            raise DistributionError(f"expected at most {TOP_K} entries, got {len(self.entries)}")

        previous = 0.0
        for token_text, logprob in self.entries:
            if math.isnan(logprob) or logprob > 0.0:
                raise DistributionError(f"logprob for {token_text!r} must be <= 0, got {logprob}")
            if logprob > previous:
                raise DistributionError("entries must be non-increasing in logprob")
            previous = logprob

        if self.entries and float(np.sum(self.probabilities)) > 1.0 + SUM_SLACK:
            raise DistributionError("probabilities sum to more than 1")

    @classmethod
    def from_pairs(cls, pairs: Iterable[Tuple[str, float]]) -> "PredictionDistribution":
        """Build from unordered pairs, sorting by descending logprob (stable)."""
        ordered = sorted(((str(text), float(lp)) for text, lp in pairs), key=lambda p: -p[1])
        return cls(tuple(ordered))

    @property
    def is_empty(self) -> bool:
        return not self.entries

    @property
    def probabilities(self) -> np.ndarray:
        return np.exp(np.array([lp for _, lp in self.entries], dtype=np.float64))

    @property
    def top_text(self) -> str:
        return self.entries[0][0] if self.entries else ""


@dataclass(frozen=True)
class ConfidenceMetrics:
    """Low-confidence indicators of one REPEAT probe."""

    entropy: float
    tail_prob: float
    margin: float
    top_prob: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ConfidenceMetrics":
        return cls(
            entropy=float(data['entropy']),
            tail_prob=float(data['tail_prob']),
            margin=float(data['margin']),
            top_prob=float(data['top_prob']),
        )


@dataclass(frozen=True)
class ThresholdConfig:
    """Candidate thresholds; comparisons are strict."""

    entropy_max: float = 1.0
    tail_max: float = 0.1
    margin_min: float = 0.5

    def __post_init__(self):
        for name in ('entropy_max', 'tail_max', 'margin_min'):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        if self.margin_min > 1:
            raise ValueError("margin_min must be <= 1")

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


@dataclass(frozen=True)
class BaselineSummary:
    """Mean metrics over all successful probes of a scan."""

    mean_top_prob: float
    mean_margin: float
    mean_entropy: float
    mean_tail: float
    count: int

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def compute_metrics(dist: PredictionDistribution) -> ConfidenceMetrics:
    """
    Compute entropy, tail probability, top-2 margin and top probability.

    Entropy is the plug-in entropy (nats) of the returned top-k probabilities,
    without renormalization; the missing tail mass is covered by tail_prob.

    Raises:
        EmptyDistributionError: For a no-result probe
    """
    if dist.is_empty:
        raise EmptyDistributionError("empty distribution has no metrics")

    probs = dist.probabilities
    clamped = np.clip(probs, PROBABILITY_FLOOR, 1.0)

    entropy = float(np.sum(entr(clamped)))
    tail_prob = min(1.0, max(0.0, 1.0 - float(np.sum(probs))))
    top_prob = float(probs[0])
    second = float(probs[1]) if len(probs) > 1 else 0.0

    return ConfidenceMetrics(
        entropy=max(0.0, entropy),
        tail_prob=tail_prob,
        margin=top_prob - second,
        top_prob=top_prob,
    )


def candidate_reasons(m: ConfidenceMetrics, t: ThresholdConfig) -> List[str]:
    """Names of the criteria that flag the token: 'entropy', 'tail', 'margin'."""
    reasons = []
    if m.entropy > t.entropy_max:
        reasons.append('entropy')
    if m.tail_prob > t.tail_max:
        reasons.append('tail')
    if m.margin < t.margin_min:
        reasons.append('margin')
    return reasons


def is_candidate(m: ConfidenceMetrics, t: ThresholdConfig) -> bool:
    """True iff any of the three low-confidence criteria fires."""
    return m.entropy > t.entropy_max or m.tail_prob > t.tail_max or m.margin < t.margin_min


def aggregate_baseline(all_metrics: Iterable[ConfidenceMetrics]) -> BaselineSummary:
    """
    Arithmetic means of every metric field.

    Raises:
        EmptyBaselineError: If the stream is empty
    """
    rows: Sequence[ConfidenceMetrics] = list(all_metrics)
    if not rows:
        raise EmptyBaselineError("baseline needs at least one successful probe")

    table = np.array([[m.top_prob, m.margin, m.entropy, m.tail_prob] for m in rows], dtype=np.float64)
    means = table.mean(axis=0)

    return BaselineSummary(
        mean_top_prob=float(means[0]),
        mean_margin=float(means[1]),
        mean_entropy=float(means[2]),
        mean_tail=float(means[3]),
        count=len(rows),
    )
