"""
Anomalous Token Scanner
=======================

Black-box scanner for anomalous tokens in chat-completion models: probes every
token of a BPE vocabulary, flags low-confidence predictions, confirms and
classifies them, and guards input text against the tokens it found.

Main components:
- Vocabulary: Rank-ordered BPE vocabulary with a cl100k-compatible encoder
- ChatClient: REPEAT/EXPLAIN probes with retries, rate limiting and a cost ledger
- ScanManager: Resumable full-vocabulary scan producing a candidate set
- ConfirmationManager: Confirmation pass classifying candidates
- perturb: Input guard that breaks up blocklisted tokens

Example:
    from anomaly_scanner import ScannerSettings, load_vocabulary, run_scan

    settings = ScannerSettings(endpoint="http://127.0.0.1:8765/v1")
    vocab = load_vocabulary("cl100k_base.tiktoken")
    with settings.make_client() as client:
        result = run_scan(vocab, settings.scan_config("scan.ndjson"), client)
    print(result.candidates.ids)
"""

from .config import ScannerSettings, load_settings
from .guard import Blocklist, find_blocked, perturb
from .llm_client import ChatClient, CostLedger, PriceTable, RetryPolicy
from .metrics import ConfidenceMetrics, PredictionDistribution, ThresholdConfig, compute_metrics, is_candidate
from .report import ScanReport, build_report
from .scan import CandidateSet, ScanConfig, ScanManager, run_scan
from .triage import AnomalyRecord, Classification, ConfirmationManager, classify, normalize, run_confirmation
from .vocab import Vocabulary, load_vocabulary

__version__ = "1.0.0"
__all__ = [
    "ScannerSettings", "load_settings",
    "Blocklist", "find_blocked", "perturb",
    "ChatClient", "CostLedger", "PriceTable", "RetryPolicy",
    "ConfidenceMetrics", "PredictionDistribution", "ThresholdConfig", "compute_metrics", "is_candidate",
    "ScanReport", "build_report",
    "CandidateSet", "ScanConfig", "ScanManager", "run_scan",
    "AnomalyRecord", "Classification", "ConfirmationManager", "classify", "normalize", "run_confirmation",
    "Vocabulary", "load_vocabulary",
]
