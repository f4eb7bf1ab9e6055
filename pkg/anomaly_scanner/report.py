"""
Scan Report
===========

Merges the scan and confirmation checkpoints into a summary report: a JSON
document and a CSV with one row per classified candidate. Output is stable:
records ascend by token id, probabilities carry 6 significant digits and
currency 2 decimals, so regenerating from the same checkpoints gives the same
bytes.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import pandas as pd
from loguru import logger

from .checkpoint import ScanCheckpoint
from .llm_client import PriceTable, Usage, price_usage
from .metrics import ThresholdConfig
from .scan import baseline_from_records, candidates_from_records, skipped_tokens
from .triage import SEVERE_CLASSES, AnomalyRecord, Classification, FalsePositiveKind
from .vocab import Vocabulary

CSV_COLUMNS = ['id', 'token', 'classification', 'false_positive_kind', 'off_target_count',
               'entropy', 'tail', 'margin', 'top_prob']


def round_sig(value: Optional[float], digits: int = 6) -> Optional[float]:
    if value is None:
        return None
    return float(f"{value:.{digits}g}")


def escape_token(text: str) -> str:
    """Printable ASCII form of a token string (tabs, newlines and non-ASCII escaped)."""
    return text.encode("unicode_escape").decode("ascii")


def _rounded(data: Optional[Dict[str, Any]]) -> Optional[Dict[str, Any]]:
    if data is None:
        return None
    return {k: round_sig(v) if isinstance(v, float) else v for k, v in data.items()}


@dataclass
class ScanReport:
    summary: Dict[str, int]
    baseline: Optional[Dict[str, Any]]
    records: List[AnomalyRecord]
    ledger: Dict[str, Any]
    config: Dict[str, Any]
    pending_ids: List[int] = field(default_factory=list)
    skipped: List[Dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        records = []
        for record in self.records:
            data = record.to_dict()
            if 'metrics' in data:
                data['metrics'] = _rounded(data['metrics'])
            records.append(data)

        return {
            'summary': self.summary,
            'baseline': self.baseline,
            'records': records,
            'pending_ids': self.pending_ids,
            'skipped': self.skipped,
            'ledger': self.ledger,
            'config': self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, ensure_ascii=True) + "\n"

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for record in self.records:
            m = record.metrics
            rows.append({
                'id': record.token_id,
                'token': escape_token(record.token_text),
                'classification': record.classification.value,
                'false_positive_kind': record.false_positive_kind.value if record.false_positive_kind else None,
                'off_target_count': record.off_target_count,
                'entropy': m.entropy if m else None,
                'tail': m.tail_prob if m else None,
                'margin': m.margin if m else None,
                'top_prob': m.top_prob if m else None,
            })
        return pd.DataFrame(rows, columns=CSV_COLUMNS)

    def write(self, json_path: Union[str, Path], csv_path: Union[str, Path]) -> Tuple[Path, Path]:
        json_path, csv_path = Path(json_path), Path(csv_path)
        json_path.parent.mkdir(parents=True, exist_ok=True)
        csv_path.parent.mkdir(parents=True, exist_ok=True)

        json_path.write_text(self.to_json(), encoding="utf-8")
        self.to_frame().to_csv(csv_path, index=False, float_format="%.6g", na_rep="", lineterminator="\n")

        logger.success(f"Report written: {json_path} ({len(self.records)} records), {csv_path}")
        return json_path, csv_path


def _ledger_section(scan_usage: Usage, confirm_usage: Usage, prices: PriceTable) -> Dict[str, Any]:
    def phase(usage: Usage) -> Dict[str, Any]:
        return {**usage.to_dict(), 'cost': f"{price_usage(usage, prices):.2f}"}

    total = scan_usage + confirm_usage
    return {
        'scan': phase(scan_usage),
        'confirmation': phase(confirm_usage),
        'total': phase(total),
        'prompt_per_1k': prices.prompt_per_1k,
        'completion_per_1k': prices.completion_per_1k,
    }


def build_report(vocab: Vocabulary,
                 scan: Optional[ScanCheckpoint],
                 confirmations: Dict[int, AnomalyRecord],
                 thresholds: Optional[ThresholdConfig] = None,
                 prices: Optional[PriceTable] = None) -> ScanReport:
    """
    Assemble the report from checkpoint contents.

    Args:
        vocab: Vocabulary the scan ran over
        scan: Loaded scan checkpoint (None for an empty run)
        confirmations: Confirmation records by token id
        thresholds: Defaults to the thresholds recorded in the scan header
        prices: Price table for the cost section
    """
    prices = prices or PriceTable()
    header_config = dict(scan.config) if scan else {}
    if thresholds is None:
        thresholds = scan.thresholds() if scan else ThresholdConfig()

    scan_records = list(scan.records.values()) if scan else []
    candidates = candidates_from_records(scan_records, vocab, thresholds)
    candidate_ids = set(candidates.ids)

    records = sorted((r for i, r in confirmations.items() if i in candidate_ids), key=lambda r: r.token_id)
    confirmed = {r.token_id for r in records}
    pending_ids = [i for i in candidates.ids if i not in confirmed]

    skipped = skipped_tokens(vocab, scan.token_range) if scan else []

    counts = {c: 0 for c in Classification}
    for record in records:
        counts[record.classification] += 1
    kinds = {k: 0 for k in FalsePositiveKind}
    for record in records:
        if record.false_positive_kind is not None:
            kinds[record.false_positive_kind] += 1

    summary = {
        'total_scanned': len(scan_records),
        'candidates': len(candidates),
        'major': counts[Classification.MAJOR],
        'minor': counts[Classification.MINOR],
        'false_positive': counts[Classification.FALSE_POSITIVE],
        'false_match': kinds[FalsePositiveKind.FALSE_MATCH],
        'whitespace_case': kinds[FalsePositiveKind.WHITESPACE_CASE],
        'no_result': counts[Classification.NO_RESULT],
        'perm_error': counts[Classification.PERM_ERROR],
        'major_total': sum(counts[c] for c in SEVERE_CLASSES),
        'pending': len(pending_ids),
        'skipped': len(skipped),
    }

    baseline = baseline_from_records(scan_records) if scan_records else None
    confirm_usage = Usage()
    for record in records:
        confirm_usage = confirm_usage + record.usage

    return ScanReport(
        summary=summary,
        baseline=_rounded(baseline.to_dict()) if baseline else None,
        records=records,
        ledger=_ledger_section(scan.usage_total() if scan else Usage(), confirm_usage, prices),
        config={**header_config, 'thresholds': thresholds.to_dict(), 'fingerprint': scan.fingerprint if scan else None},
        pending_ids=pending_ids,
        skipped=[{'id': s.token_id, 'reason': s.reason, 'raw_hex': s.raw_hex} for s in skipped],
    )
