"""
Checkpoint Files
================

Append-only newline-delimited JSON checkpoints for the scan and confirmation
passes. Records are committed in a fixed id order and flushed in batches, so
an interrupted run loses at most one unflushed batch and a resumed run appends
exactly what an uninterrupted run would have written.
"""

import json
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Hashable, Iterable, List, Optional, Sequence, Tuple, Union

from loguru import logger

from .errors import CheckpointError
from .llm_client import Usage
from .metrics import ConfidenceMetrics, ThresholdConfig

HEADER_KIND = "header"

STATUS_OK = "ok"
STATUS_NO_RESULT = "no_result"
STATUS_PERM_ERROR = "perm_error"
SCAN_STATUSES = (STATUS_OK, STATUS_NO_RESULT, STATUS_PERM_ERROR)


def dumps_record(record: Dict[str, Any]) -> str:
    """Canonical single-line JSON used for every checkpoint line."""
    return json.dumps(record, sort_keys=True, ensure_ascii=True, separators=(',', ':'))


@dataclass(frozen=True)
class ScanRecord:
    """One scanned token: metrics and the top-k strings, or a no-result / permanent-error mark."""

    token_id: int
    status: str
    usage: Usage
    metrics: Optional[ConfidenceMetrics] = None
    error_code: Optional[int] = None
    top_tokens: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.status not in SCAN_STATUSES:
            raise ValueError(f"unknown scan status {self.status!r}")
        if (self.status == STATUS_OK) != (self.metrics is not None):
            raise ValueError("metrics are present iff status is 'ok'")

    def to_dict(self) -> Dict[str, Any]:
        record: Dict[str, Any] = {
            'id': self.token_id,
            'status': self.status,
            'usage': self.usage.to_dict(),
        }
        if self.metrics is not None:
            record['metrics'] = self.metrics.to_dict()
        if self.error_code is not None:
            record['error_code'] = self.error_code
        if self.top_tokens:
            record['top_tokens'] = list(self.top_tokens)
        return record

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ScanRecord":
        metrics = data.get('metrics')
        return cls(
            token_id=int(data['id']),
            status=data['status'],
            usage=Usage.from_dict(data.get('usage')),
            metrics=ConfidenceMetrics.from_dict(metrics) if metrics is not None else None,
            error_code=data.get('error_code'),
            top_tokens=tuple(data.get('top_tokens', ())),
        )


@dataclass
class ScanCheckpoint:
    """Loaded scan checkpoint: header plus completed records by id."""

    path: Path
    header: Dict[str, Any]
    records: Dict[int, ScanRecord] = field(default_factory=dict)

    @property
    def fingerprint(self) -> Optional[str]:
        return self.header.get('fingerprint')

    @property
    def config(self) -> Dict[str, Any]:
        return self.header.get('config') or {}

    @property
    def token_range(self) -> Optional[Tuple[int, int]]:
        token_range = self.config.get('token_range')
        return (int(token_range[0]), int(token_range[1])) if token_range else None

    def thresholds(self, default: Optional[ThresholdConfig] = None) -> ThresholdConfig:
        """Thresholds the scan ran with, falling back to `default`."""
        recorded = self.config.get('thresholds')
        if recorded:
            return ThresholdConfig(**recorded)
        return default or ThresholdConfig()

    @property
    def completed_ids(self) -> List[int]:
        return sorted(self.records)

    def usage_total(self) -> Usage:
        total = Usage()
        for record in self.records.values():
            total = total + record.usage
        return total

    def verify(self, fingerprint: str):
        """Refuse to mix configurations in one checkpoint."""
        if self.fingerprint != fingerprint:
            raise CheckpointError(
                f"checkpoint {self.path} was written with config {self.fingerprint}, "
                f"current config is {fingerprint}; refusing to resume"
            )


def read_ndjson(path: Union[str, Path], repair: bool = False) -> List[Dict[str, Any]]:
    """
    Read newline-delimited JSON records.

    A final line without a trailing newline (torn write) is dropped; with
    repair=True the file is also truncated back to the last complete record.
    """
    path = Path(path)
    if not path.exists():
        return []

    data = path.read_bytes()
    complete_length = data.rfind(b"\n") + 1
    if complete_length < len(data):
        logger.warning(f"Dropping torn final record in {path} ({len(data) - complete_length} bytes)")
        if repair:
            with open(path, 'r+b') as f:
                f.truncate(complete_length)

    records = []
    for line_number, line in enumerate(data[:complete_length].split(b"\n")[:-1], start=1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except ValueError as e:
            raise CheckpointError(f"{path}: line {line_number} is not JSON ({e})") from None
    return records


def load_scan_checkpoint(path: Union[str, Path], repair: bool = False) -> Optional[ScanCheckpoint]:
    """
    Load a scan checkpoint.

    Returns:
        None when the file is missing or empty

    Raises:
        CheckpointError: Missing header, duplicate ids, malformed record
    """
    path = Path(path)
    rows = read_ndjson(path, repair=repair)
    if not rows:
        return None

    header = rows[0]
    if header.get('kind') != HEADER_KIND:
        raise CheckpointError(f"{path}: first record is not a header")

    checkpoint = ScanCheckpoint(path=path, header=header)
    for row in rows[1:]:
        try:
            record = ScanRecord.from_dict(row)
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"{path}: malformed record {row!r} ({e})") from None
        if record.token_id in checkpoint.records:
            raise CheckpointError(f"{path}: token {record.token_id} recorded twice")
        checkpoint.records[record.token_id] = record

    logger.info(f"Loaded checkpoint {path.name}: {len(checkpoint.records):,} completed tokens")
    return checkpoint


class CheckpointWriter:
    """
    Single writer for an append-only checkpoint.

    Workers commit records in any order; lines are appended in `order`, each
    one as soon as all its predecessors have landed. The buffer is flushed every
    `flush_every` records or `flush_interval` seconds, whichever comes first.
    """

    def __init__(self,
                 path: Union[str, Path],
                 order: Sequence[Hashable],
                 header: Optional[Dict[str, Any]] = None,
                 flush_every: int = 100,
                 flush_interval: float = 10.0):
        """
        Open the checkpoint for appending.

        Args:
            path: Checkpoint file
            order: Keys still to be written, in file order
            header: Header record written if the file is new or empty
            flush_every: Records per flush
            flush_interval: Seconds between flushes
        """
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.flush_every = flush_every
        self.flush_interval = flush_interval

        self._order = list(order)
        self._next = 0
        self._pending: Dict[Hashable, str] = {}
        self._buffer: List[str] = []
        self._lock = threading.Lock()
        self._last_flush = time.monotonic()

        new_file = not self.path.exists() or self.path.stat().st_size == 0
        self._file = open(self.path, 'a', encoding='utf-8', newline='\n')
        if new_file and header is not None:
            self._file.write(dumps_record(header) + '\n')
            self._file.flush()

    def commit(self, key: Hashable, record: Dict[str, Any]):
        """Hand a finished record to the writer."""
        line = dumps_record(record)
        with self._lock:
            self._pending[key] = line
            while self._next < len(self._order) and self._order[self._next] in self._pending:
                self._buffer.append(self._pending.pop(self._order[self._next]))
                self._next += 1

            if (len(self._buffer) >= self.flush_every or
                    time.monotonic() - self._last_flush > self.flush_interval):
                self._flush_locked()

    def _flush_locked(self):
        if self._buffer:
            self._file.write(''.join(line + '\n' for line in self._buffer))
            self._file.flush()
            os.fsync(self._file.fileno())
            logger.debug(f"Flushed {len(self._buffer)} records to {self.path.name}")
            self._buffer = []
        self._last_flush = time.monotonic()

    @property
    def complete(self) -> bool:
        with self._lock:
            return self._next == len(self._order)

    def close(self):
        """Flush the contiguous prefix; out-of-order leftovers are re-probed on resume."""
        with self._lock:
            self._flush_locked()
            if self._pending:
                logger.warning(f"{len(self._pending)} records behind a gap were not written to {self.path.name}")
                self._pending.clear()
            self._file.close()

    def __enter__(self) -> "CheckpointWriter":
        return self

    def __exit__(self, *exc_info):
        self.close()


def ordered_keys(keys: Iterable[Hashable], done: Iterable[Hashable]) -> List[Hashable]:
    """Keys not yet done, preserving order."""
    done_set = set(done)
    return [key for key in keys if key not in done_set]
