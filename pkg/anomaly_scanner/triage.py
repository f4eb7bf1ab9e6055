"""
Candidate Triage
================

Confirmation pass over scan candidates: each candidate is REPEAT-probed N
times at sampling temperature, completions are compared to the token text
ignoring whitespace and case, and the candidate is classified as a major or
minor anomaly, a false positive, a no-result token or a permanent error.
"""

import threading
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from loguru import logger

from .checkpoint import CheckpointWriter, ordered_keys, read_ndjson
from .errors import CheckpointError, ScanInterrupted
from .llm_client import ChatClient, FinishStatus, Usage
from .metrics import ConfidenceMetrics
from .scan import Candidate, CandidateSet, call_through_outages
from .workers import ProbeWorkerPool

DEFAULT_SAMPLES = 10


@lru_cache(maxsize=None)
def simple_fold(ch: str) -> str:
    """
    Unicode simple case folding of one character: the result is always a single
    character. Characters whose only folding expands (ß, İ, ŉ) keep their
    single-character lowercase, or stay as they are.
    """
    folded = ch.casefold()
    if len(folded) == 1:
        return folded
    lowered = ch.lower()
    return lowered if len(lowered) == 1 else ch


def normalize(text: str) -> str:
    """Drop every whitespace character and simple-case-fold the rest."""
    return "".join(simple_fold(ch) for ch in text if not ch.isspace())


def is_repetition(input_text: str, output_text: str) -> bool:
    return normalize(input_text) == normalize(output_text)


class Classification(str, Enum):
    MAJOR = "major"
    MINOR = "minor"
    FALSE_POSITIVE = "false_positive"
    NO_RESULT = "no_result"
    PERM_ERROR = "perm_error"


# Reported together as the severe class
SEVERE_CLASSES = (Classification.MAJOR, Classification.NO_RESULT)


class FalsePositiveKind(str, Enum):
    FALSE_MATCH = "false_match"
    WHITESPACE_CASE = "whitespace_case"


def false_positive_kind(token_text: str, top_tokens: Sequence[str]) -> Optional[FalsePositiveKind]:
    """
    Why a token that always repeats correctly was flagged.

    WHITESPACE_CASE when the two most likely scan predictions both repeat the
    token, so the low confidence is mass shared between whitespace and case
    variants; FALSE_MATCH otherwise. None when the scan kept no top-k strings.
    """
    if not top_tokens:
        return None
    if len(top_tokens) >= 2 and all(is_repetition(token_text, t) for t in top_tokens[:2]):
        return FalsePositiveKind.WHITESPACE_CASE
    return FalsePositiveKind.FALSE_MATCH


@dataclass(frozen=True)
class ConfirmationOutcome:
    completion_text: str
    matched: bool
    error_code: Optional[int] = None
    empty_logprobs: bool = False

    @property
    def errored(self) -> bool:
        return self.error_code is not None

    def to_dict(self) -> Dict[str, Any]:
        record: Dict[str, Any] = {'completion': self.completion_text, 'matched': self.matched}
        if self.error_code is not None:
            record['error_code'] = self.error_code
        if self.empty_logprobs:
            record['empty_logprobs'] = True
        return record

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ConfirmationOutcome":
        return cls(
            completion_text=data.get('completion', ""),
            matched=bool(data['matched']),
            error_code=data.get('error_code'),
            empty_logprobs=bool(data.get('empty_logprobs', False)),
        )


@dataclass(frozen=True)
class ConfirmationRun:
    """
    The N confirmation outcomes of one candidate.

    `aborted` marks a run cut short because its first probes all failed; its
    outcome list is then shorter than `samples`.
    """

    token_id: int
    token_text: str
    outcomes: Tuple[ConfirmationOutcome, ...]
    samples: int = DEFAULT_SAMPLES
    aborted: bool = False

    def __post_init__(self):
        if len(self.outcomes) > self.samples:
            raise ValueError(f"{len(self.outcomes)} outcomes for {self.samples} samples")
        if not self.aborted and len(self.outcomes) != self.samples:
            raise ValueError("only an aborted run may have fewer outcomes than samples")

    @property
    def off_target_count(self) -> int:
        return sum(1 for outcome in self.outcomes if not outcome.matched)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'samples': self.samples,
            'aborted': self.aborted,
            'outcomes': [outcome.to_dict() for outcome in self.outcomes],
        }


@dataclass(frozen=True)
class AnomalyRecord:
    """Final classification of one candidate, with its confirmation evidence."""

    token_id: int
    token_text: str
    classification: Classification
    off_target_count: int
    evidence: ConfirmationRun
    metrics: Optional[ConfidenceMetrics] = None
    reasons: Tuple[str, ...] = ()
    usage: Usage = field(default_factory=Usage)
    false_positive_kind: Optional[FalsePositiveKind] = None

    def to_dict(self) -> Dict[str, Any]:
        record: Dict[str, Any] = {
            'id': self.token_id,
            'token': self.token_text,
            'classification': self.classification.value,
            'off_target_count': self.off_target_count,
            'reasons': list(self.reasons),
            'evidence': self.evidence.to_dict(),
            'usage': self.usage.to_dict(),
        }
        if self.metrics is not None:
            record['metrics'] = self.metrics.to_dict()
        if self.false_positive_kind is not None:
            record['false_positive_kind'] = self.false_positive_kind.value
        return record

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AnomalyRecord":
        evidence = data['evidence']
        run = ConfirmationRun(
            token_id=int(data['id']),
            token_text=data['token'],
            outcomes=tuple(ConfirmationOutcome.from_dict(o) for o in evidence['outcomes']),
            samples=int(evidence['samples']),
            aborted=bool(evidence['aborted']),
        )
        metrics = data.get('metrics')
        kind = data.get('false_positive_kind')
        return cls(
            token_id=run.token_id,
            token_text=run.token_text,
            classification=Classification(data['classification']),
            off_target_count=int(data['off_target_count']),
            evidence=run,
            metrics=ConfidenceMetrics.from_dict(metrics) if metrics is not None else None,
            reasons=tuple(data.get('reasons', ())),
            usage=Usage.from_dict(data.get('usage')),
            false_positive_kind=FalsePositiveKind(kind) if kind is not None else None,
        )


def classify_counts(off_target_count: int, samples: int) -> Classification:
    """Strict-majority rule: more than half off-target is major, an exact tie is minor."""
    if not 0 <= off_target_count <= samples:
        raise ValueError(f"off_target_count {off_target_count} outside [0, {samples}]")
    if off_target_count == 0:
        return Classification.FALSE_POSITIVE
    if 2 * off_target_count > samples:
        return Classification.MAJOR
    return Classification.MINOR


def classify(run: ConfirmationRun,
             metrics: Optional[ConfidenceMetrics] = None,
             reasons: Sequence[str] = (),
             usage: Optional[Usage] = None,
             top_tokens: Sequence[str] = ()) -> AnomalyRecord:
    """
    Classify a finished confirmation run.

    Errored outcomes count as off-target. A run whose every outcome came back
    with empty logprobs is NoResult; an aborted run, or one where every probe
    errored, is PermanentError. False positives are split by `top_tokens`,
    the candidate's top-k strings from the scan.
    """
    outcomes = run.outcomes
    off_target = run.off_target_count

    if outcomes and all(o.empty_logprobs for o in outcomes):
        classification = Classification.NO_RESULT
    elif run.aborted or not outcomes or all(o.errored for o in outcomes):
        classification = Classification.PERM_ERROR
    else:
        classification = classify_counts(off_target, len(outcomes))

    return AnomalyRecord(
        token_id=run.token_id,
        token_text=run.token_text,
        classification=classification,
        off_target_count=off_target,
        evidence=run,
        metrics=metrics,
        reasons=tuple(reasons),
        usage=usage or Usage(),
        false_positive_kind=(false_positive_kind(run.token_text, top_tokens)
                             if classification is Classification.FALSE_POSITIVE else None),
    )


@dataclass
class ConfirmConfig:
    samples: int = DEFAULT_SAMPLES
    temperature: float = 1.0
    concurrency: int = 1
    checkpoint_path: Optional[Path] = None
    abort_after: int = 3
    flush_every: int = 100
    flush_interval: float = 10.0
    outage_pause: float = 30.0
    outage_retries: int = 10

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if self.abort_after < 1:
            raise ValueError("abort_after must be >= 1")
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")
        if self.checkpoint_path is not None:
            self.checkpoint_path = Path(self.checkpoint_path)


def load_confirmation_checkpoint(path: Path, repair: bool = True) -> Dict[int, AnomalyRecord]:
    """
    Load finished confirmation records by token id.

    Raises:
        CheckpointError: Malformed or duplicated records
    """
    records: Dict[int, AnomalyRecord] = {}
    for row in read_ndjson(path, repair=repair):
        try:
            record = AnomalyRecord.from_dict(row)
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"{path}: malformed confirmation record ({e})") from None
        if record.token_id in records:
            raise CheckpointError(f"{path}: token {record.token_id} confirmed twice")
        records[record.token_id] = record
    return records


class ConfirmationManager:
    """Confirms candidates concurrently under the client's shared rate limiter."""

    def __init__(self, client: ChatClient, config: Optional[ConfirmConfig] = None, sleep=time.sleep):
        self.client = client
        self.config = config or ConfirmConfig()
        self._sleep = sleep
        self.pool: Optional[ProbeWorkerPool[Candidate]] = None
        self._lock = threading.Lock()

    def confirm(self, candidate: Candidate) -> AnomalyRecord:
        """Probe one candidate `samples` times and classify it."""
        cfg = self.config
        outcomes: List[ConfirmationOutcome] = []
        usage = Usage()
        aborted = False

        for i in range(cfg.samples):
            result = call_through_outages(
                lambda: self.client.confirm_probe(candidate.token_text, temperature=cfg.temperature),
                label=f"candidate {candidate.token_id}",
                pause=cfg.outage_pause,
                retries=cfg.outage_retries,
                sleep=self._sleep,
                stopped=lambda: bool(self.pool and self.pool.stopped),
            )
            usage = usage + result.usage

            if result.finish_status is FinishStatus.API_ERROR:
                outcomes.append(ConfirmationOutcome("", matched=False, error_code=result.error_code))
            else:
                outcomes.append(ConfirmationOutcome(
                    completion_text=result.completion_text,
                    matched=is_repetition(candidate.token_text, result.completion_text),
                    empty_logprobs=result.finish_status is FinishStatus.EMPTY_LOGPROBS,
                ))

            if i + 1 >= cfg.abort_after and i + 1 < cfg.samples and all(o.errored for o in outcomes):
                logger.warning(f"Candidate {candidate.token_id} {candidate.token_text!r}: "
                               f"first {i + 1} probes failed, giving up")
                aborted = True
                break

        run = ConfirmationRun(candidate.token_id, candidate.token_text, tuple(outcomes),
                              samples=cfg.samples, aborted=aborted)
        record = classify(run, metrics=candidate.metrics, reasons=candidate.reasons, usage=usage,
                          top_tokens=candidate.top_tokens)
        logger.debug(f"Candidate {candidate.token_id} {candidate.token_text!r}: "
                     f"{record.off_target_count}/{len(outcomes)} off-target -> {record.classification.value}")
        return record

    def run(self, candidates: CandidateSet) -> List[AnomalyRecord]:
        """
        Confirm every candidate not already in the confirmation checkpoint.

        Returns:
            One record per candidate, ascending by token id

        Raises:
            CheckpointError: Checkpoint written with a different sample count
            ScanInterrupted: The pass stopped before every candidate was confirmed
        """
        cfg = self.config
        by_id = {c.token_id: c for c in candidates}
        done: Dict[int, AnomalyRecord] = {}

        if cfg.checkpoint_path is not None:
            done = {i: r for i, r in load_confirmation_checkpoint(cfg.checkpoint_path).items() if i in by_id}
            mismatched = [i for i, r in done.items() if r.evidence.samples != cfg.samples]
            if mismatched:
                raise CheckpointError(f"{cfg.checkpoint_path} holds runs with a different sample count "
                                      f"(e.g. token {mismatched[0]}); refusing to resume")
            if done:
                logger.warning(f"Resuming confirmation: {len(done):,} candidates already confirmed")

        todo = ordered_keys(sorted(by_id), done)
        logger.info(f"Confirming {len(todo):,} candidates x {cfg.samples} samples "
                    f"at temperature {cfg.temperature}")

        fresh: Dict[int, AnomalyRecord] = {}
        writer = None
        if cfg.checkpoint_path is not None:
            writer = CheckpointWriter(cfg.checkpoint_path, order=todo,
                                      flush_every=cfg.flush_every, flush_interval=cfg.flush_interval)
        self.pool = ProbeWorkerPool(cfg.concurrency, name="confirm")

        def handle(candidate: Candidate):
            record = self.confirm(candidate)
            with self._lock:
                fresh[record.token_id] = record
            if writer is not None:
                writer.commit(record.token_id, record.to_dict())

        try:
            self.pool.run([by_id[i] for i in todo], handle)
        finally:
            if writer is not None:
                writer.close()

        if len(fresh) != len(todo):
            raise ScanInterrupted(f"confirmation stopped after {len(fresh):,}/{len(todo):,} candidates")

        records = sorted({**done, **fresh}.values(), key=lambda r: r.token_id)
        counts = count_classifications(records)
        logger.success("Confirmation complete: " + ", ".join(f"{k} {v}" for k, v in counts.items()))
        return records


def count_classifications(records: Sequence[AnomalyRecord]) -> Dict[str, int]:
    counts = {c.value: 0 for c in Classification}
    for record in records:
        counts[record.classification.value] += 1
    return counts


def run_confirmation(candidates: CandidateSet,
                     client: ChatClient,
                     n: Optional[int] = None,
                     config: Optional[ConfirmConfig] = None) -> List[AnomalyRecord]:
    """Confirm and classify candidates; `n` overrides the configured sample count."""
    cfg = config or ConfirmConfig()
    if n is not None and n != cfg.samples:
        cfg = replace(cfg, samples=n)
    return ConfirmationManager(client, cfg).run(candidates)
