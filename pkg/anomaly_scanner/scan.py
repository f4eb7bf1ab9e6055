"""
Vocabulary Scan
===============

Full-vocabulary REPEAT scan: probes every decodable token in range, computes
confidence metrics, checkpoints per token and emits the candidate set.
"""

import hashlib
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, Iterator, List, Optional, Tuple, TypeVar

from loguru import logger

from .checkpoint import (
    HEADER_KIND, STATUS_NO_RESULT, STATUS_OK, STATUS_PERM_ERROR,
    CheckpointWriter, ScanCheckpoint, ScanRecord, dumps_record, load_scan_checkpoint, ordered_keys,
)
from .errors import CheckpointError, ScanInterrupted, TransportOutageError
from .llm_client import SCAN_MAX_TOKENS, ChatClient, FinishStatus
from .metrics import (
    BaselineSummary, ConfidenceMetrics, ThresholdConfig,
    aggregate_baseline, candidate_reasons, compute_metrics,
)
from .vocab import Vocabulary
from .workers import ProbeWorkerPool

SKIP_UNDECODABLE = "undecodable_utf8"

T = TypeVar("T")


@dataclass
class ScanConfig:
    """Scan settings; only the fingerprinted fields affect checkpoint compatibility."""

    thresholds: ThresholdConfig = field(default_factory=ThresholdConfig)
    scan_temperature: float = 0.0
    concurrency: int = 1
    checkpoint_path: Path = Path("scan_checkpoint.ndjson")
    token_range: Optional[Tuple[int, int]] = None
    flush_every: int = 100
    flush_interval: float = 10.0
    outage_pause: float = 30.0
    outage_retries: int = 10

    def __post_init__(self):
        self.checkpoint_path = Path(self.checkpoint_path)
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")
        if self.scan_temperature < 0:
            raise ValueError("scan_temperature must be >= 0")
        if self.token_range is not None:
            lo, hi = self.token_range
            if lo < 0 or hi < lo:
                raise ValueError(f"invalid token range [{lo}, {hi})")
            self.token_range = (int(lo), int(hi))

    def echo(self, model: str, vocab: Vocabulary) -> Dict[str, Any]:
        return {
            'model': model,
            'max_output_tokens': SCAN_MAX_TOKENS,
            'scan_temperature': self.scan_temperature,
            'thresholds': self.thresholds.to_dict(),
            'token_range': list(self.token_range) if self.token_range else None,
            'vocab_size': len(vocab),
        }

    def fingerprint(self, model: str, vocab: Vocabulary) -> str:
        return hashlib.sha256(dumps_record(self.echo(model, vocab)).encode('utf-8')).hexdigest()[:16]

    def header(self, model: str, vocab: Vocabulary) -> Dict[str, Any]:
        return {
            'kind': HEADER_KIND,
            'fingerprint': self.fingerprint(model, vocab),
            'config': self.echo(model, vocab),
        }


@dataclass(frozen=True)
class Candidate:
    """A token flagged by the scan, with the reasons it was flagged."""

    token_id: int
    token_text: str
    status: str
    reasons: Tuple[str, ...]
    metrics: Optional[ConfidenceMetrics] = None
    error_code: Optional[int] = None
    top_tokens: Tuple[str, ...] = ()


@dataclass(frozen=True)
class CandidateSet:
    candidates: Tuple[Candidate, ...] = ()

    def __len__(self) -> int:
        return len(self.candidates)

    def __iter__(self) -> Iterator[Candidate]:
        return iter(self.candidates)

    def __contains__(self, token_id: object) -> bool:
        return token_id in self.ids

    @property
    def ids(self) -> List[int]:
        return [c.token_id for c in self.candidates]


@dataclass(frozen=True)
class SkippedToken:
    token_id: int
    reason: str
    raw_hex: str


@dataclass
class ScanResult:
    candidates: CandidateSet
    baseline: Optional[BaselineSummary]
    skipped: List[SkippedToken]
    checkpoint: Optional[ScanCheckpoint]

    @property
    def total_scanned(self) -> int:
        return len(self.checkpoint.records) if self.checkpoint else 0


def range_ids(vocab: Vocabulary, token_range: Optional[Tuple[int, int]]) -> List[int]:
    if token_range is None:
        return vocab.ids()
    return vocab.ids(*token_range)


def probeable_ids(vocab: Vocabulary, token_range: Optional[Tuple[int, int]] = None) -> List[int]:
    """Ascending ids in range whose bytes decode as UTF-8."""
    return [token_id for token_id in range_ids(vocab, token_range) if vocab.get(token_id).probeable]


def skipped_tokens(vocab: Vocabulary, token_range: Optional[Tuple[int, int]] = None) -> List[SkippedToken]:
    return [
        SkippedToken(token_id, SKIP_UNDECODABLE, vocab.get(token_id).raw.hex())
        for token_id in range_ids(vocab, token_range)
        if not vocab.get(token_id).probeable
    ]


def candidates_from_records(records: Iterable[ScanRecord],
                            vocab: Vocabulary,
                            thresholds: ThresholdConfig) -> CandidateSet:
    """
    Candidate set derived from checkpoint records alone.

    Low-confidence tokens, no-result tokens and permanent-error tokens are all
    candidates.
    """
    candidates = []
    for record in sorted(records, key=lambda r: r.token_id):
        if record.status == STATUS_OK:
            reasons = tuple(candidate_reasons(record.metrics, thresholds))
            if not reasons:
                continue
        else:
            reasons = (record.status,)

        candidates.append(Candidate(
            token_id=record.token_id,
            token_text=vocab.get(record.token_id).decoded or "",
            status=record.status,
            reasons=reasons,
            metrics=record.metrics,
            error_code=record.error_code,
            top_tokens=record.top_tokens,
        ))
    return CandidateSet(tuple(candidates))


def baseline_from_records(records: Iterable[ScanRecord]) -> Optional[BaselineSummary]:
    metrics = [r.metrics for r in sorted(records, key=lambda r: r.token_id) if r.status == STATUS_OK]
    if not metrics:
        logger.warning("No successful probes; baseline unavailable")
        return None
    return aggregate_baseline(metrics)


def call_through_outages(call: Callable[[], T],
                         label: str,
                         pause: float,
                         retries: int,
                         sleep: Callable[[float], None] = time.sleep,
                         stopped: Callable[[], bool] = lambda: False,
                         on_outage: Optional[Callable[[], None]] = None) -> T:
    """
    Call a probe, pausing and retrying while the endpoint is unreachable.

    Raises:
        ScanInterrupted: The outage outlasted `retries` pauses, or the pool was stopped
    """
    for outage in range(retries + 1):
        try:
            return call()
        except TransportOutageError as e:
            if on_outage:
                on_outage()
            if outage == retries or stopped():
                raise ScanInterrupted(f"endpoint outage while probing {label}: {e}") from e
            logger.warning(f"Endpoint outage; pausing {pause:.0f}s before retrying {label}")
            sleep(pause)
    raise ScanInterrupted(f"endpoint outage while probing {label}")


class ScanManager:
    """
    Runs the REPEAT scan over a vocabulary.

    Workers share one client (and through it the rate limiter and ledger);
    records go through a single ordered checkpoint writer.
    """

    def __init__(self,
                 vocab: Vocabulary,
                 client: ChatClient,
                 config: ScanConfig,
                 sleep=time.sleep):
        self.vocab = vocab
        self.client = client
        self.config = config
        self._sleep = sleep

        self.pool: Optional[ProbeWorkerPool[int]] = None
        self.tokens_probed = 0
        self.outages = 0
        self._lock = threading.Lock()

    def run(self, resume: Optional[ScanCheckpoint] = None) -> ScanResult:
        """
        Scan every probeable token in range that the checkpoint does not already hold.

        Raises:
            CheckpointError: Existing checkpoint without resume, or fingerprint mismatch
            ScanInterrupted: Outage outlasted the pause budget, or the scan was stopped
        """
        cfg = self.config
        header = cfg.header(self.client.model, self.vocab)
        completed: List[int] = []

        if resume is not None:
            resume.verify(header['fingerprint'])
            completed = resume.completed_ids
            logger.warning(f"Resuming scan: {len(completed):,} tokens already done")
        elif cfg.checkpoint_path.exists() and cfg.checkpoint_path.stat().st_size > 0:
            raise CheckpointError(f"checkpoint {cfg.checkpoint_path} already exists; resume it or start fresh")

        todo = ordered_keys(probeable_ids(self.vocab, cfg.token_range), completed)
        logger.info(f"Scanning {len(todo):,} tokens with {self.client.model} "
                    f"(concurrency {cfg.concurrency}, temperature {cfg.scan_temperature})")

        writer = CheckpointWriter(cfg.checkpoint_path, order=todo, header=header,
                                  flush_every=cfg.flush_every, flush_interval=cfg.flush_interval)
        self.pool = ProbeWorkerPool(cfg.concurrency, name="scan")

        def handle(token_id: int):
            record = self._probe_token(token_id)
            writer.commit(token_id, record.to_dict())
            with self._lock:
                self.tokens_probed += 1
                if self.tokens_probed % 1000 == 0:
                    logger.info(f"Scan progress: {self.tokens_probed:,}/{len(todo):,}")

        try:
            self.pool.run(todo, handle)
        finally:
            writer.close()

        if not writer.complete:
            raise ScanInterrupted(f"scan stopped after {self.tokens_probed:,} tokens; resume from {cfg.checkpoint_path}")

        checkpoint = load_scan_checkpoint(cfg.checkpoint_path)
        records = list(checkpoint.records.values()) if checkpoint else []
        result = ScanResult(
            candidates=candidates_from_records(records, self.vocab, cfg.thresholds),
            baseline=baseline_from_records(records),
            skipped=skipped_tokens(self.vocab, cfg.token_range),
            checkpoint=checkpoint,
        )
        logger.success(f"Scan complete: {result.total_scanned:,} scanned, "
                       f"{len(result.candidates):,} candidates, {len(result.skipped):,} skipped")
        return result

    def _probe_token(self, token_id: int) -> ScanRecord:
        entry = self.vocab.get(token_id)
        cfg = self.config

        result = call_through_outages(
            lambda: self.client.repeat_probe(entry.decoded, temperature=cfg.scan_temperature),
            label=f"token {token_id}",
            pause=cfg.outage_pause,
            retries=cfg.outage_retries,
            sleep=self._sleep,
            stopped=lambda: bool(self.pool and self.pool.stopped),
            on_outage=self._count_outage,
        )

        if result.finish_status is FinishStatus.EMPTY_LOGPROBS:
            return ScanRecord(token_id, STATUS_NO_RESULT, result.usage)
        if result.finish_status is FinishStatus.API_ERROR:
            return ScanRecord(token_id, STATUS_PERM_ERROR, result.usage, error_code=result.error_code)

        metrics = compute_metrics(result.distribution)
        logger.debug(f"Token {token_id} {entry.decoded!r}: top {metrics.top_prob:.4f} entropy {metrics.entropy:.4f}")
        top_tokens = tuple(text for text, _ in result.distribution.entries)
        return ScanRecord(token_id, STATUS_OK, result.usage, metrics=metrics, top_tokens=top_tokens)

    def _count_outage(self):
        with self._lock:
            self.outages += 1


def run_scan(vocab: Vocabulary,
             cfg: ScanConfig,
             client: ChatClient,
             resume: Optional[ScanCheckpoint] = None) -> ScanResult:
    """Run (or resume) a scan and return its candidate set."""
    return ScanManager(vocab, client, cfg).run(resume=resume)
