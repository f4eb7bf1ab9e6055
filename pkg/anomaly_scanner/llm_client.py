"""
Chat-Completions Client
=======================

REPEAT and EXPLAIN probes over the chat-completions wire protocol, with
top-5 logprob parsing, retry/backoff, a shared rate limiter and a cost ledger.
"""

import json
import re
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, FrozenSet, List, Optional, Tuple

import httpx
from loguru import logger

from .errors import LLMClientError, ResponseParseError, TransportOutageError
from .metrics import TOP_K, PredictionDistribution

REPEAT_SYSTEM_PROMPT = "Repeat user message exactly"
EXPLAIN_SYSTEM_PROMPT = "Explain user message. Respond with JSON {text: <user message>, meaning: <meaning>}"

SCAN_MAX_TOKENS = 1
CONFIRM_MAX_TOKENS = 20
EXPLAIN_MAX_TOKENS = 200


class ProbeKind(str, Enum):
    REPEAT = "repeat"
    EXPLAIN = "explain"


class FinishStatus(str, Enum):
    OK = "ok"
    API_ERROR = "api_error"
    EMPTY_LOGPROBS = "empty_logprobs"


@dataclass(frozen=True)
class ProbeRequest:
    """One probe; the user message is the token text, verbatim."""

    kind: ProbeKind
    token_text: str
    temperature: float = 0.0
    max_output_tokens: int = SCAN_MAX_TOKENS
    want_logprobs: bool = True
    top_logprobs: int = TOP_K

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be positive")

    @property
    def system_prompt(self) -> str:
        return REPEAT_SYSTEM_PROMPT if self.kind is ProbeKind.REPEAT else EXPLAIN_SYSTEM_PROMPT

    def to_payload(self, model: str) -> Dict[str, Any]:
        """Chat-completions request body."""
        payload: Dict[str, Any] = {
            'model': model,
            'messages': [
                {'role': 'system', 'content': self.system_prompt},
                {'role': 'user', 'content': self.token_text},
            ],
            'temperature': self.temperature,
            'max_tokens': self.max_output_tokens,
        }
        if self.want_logprobs:
            payload['logprobs'] = True
            payload['top_logprobs'] = self.top_logprobs
        return payload


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0
    requests: int = 0

    def __add__(self, other: "Usage") -> "Usage":
        return Usage(
            self.prompt_tokens + other.prompt_tokens,
            self.completion_tokens + other.completion_tokens,
            self.requests + other.requests,
        )

    def to_dict(self) -> Dict[str, int]:
        return {
            'prompt_tokens': self.prompt_tokens,
            'completion_tokens': self.completion_tokens,
            'requests': self.requests,
        }

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "Usage":
        data = data or {}
        return cls(
            int(data.get('prompt_tokens', 0)),
            int(data.get('completion_tokens', 0)),
            int(data.get('requests', 0)),
        )


@dataclass(frozen=True)
class ProbeResult:
    """
    Outcome of one probe after retries.

    `usage.requests` counts every HTTP exchange, including retried errors.
    """

    distribution: PredictionDistribution
    completion_text: str
    finish_status: FinishStatus
    usage: Usage
    error_code: Optional[int] = None
    attempts: int = 1

    @property
    def ok(self) -> bool:
        return self.finish_status is FinishStatus.OK


@dataclass(frozen=True)
class ExplainResult:
    """Raw EXPLAIN completion with JSON-wellformedness and echo flags."""

    completion_text: str
    json_ok: bool
    echo_match: bool
    text_field: Optional[str]
    probe: ProbeResult


@dataclass(frozen=True)
class PriceTable:
    """Currency per 1,000 tokens."""

    prompt_per_1k: float = 0.01
    completion_per_1k: float = 0.03


class CostLedger:
    """Thread-safe usage counters priced under a price table."""

    def __init__(self, price_table: Optional[PriceTable] = None):
        self.price_table = price_table or PriceTable()
        self._usage = Usage()
        self._lock = threading.Lock()

    def add(self, usage: Usage):
        with self._lock:
            self._usage = self._usage + usage

    @property
    def usage(self) -> Usage:
        with self._lock:
            return self._usage

    @property
    def prompt_tokens(self) -> int:
        return self.usage.prompt_tokens

    @property
    def completion_tokens(self) -> int:
        return self.usage.completion_tokens

    @property
    def requests(self) -> int:
        return self.usage.requests

    def snapshot(self) -> Dict[str, Any]:
        usage = self.usage
        return {
            **usage.to_dict(),
            'prompt_per_1k': self.price_table.prompt_per_1k,
            'completion_per_1k': self.price_table.completion_per_1k,
            'total': f"{price_usage(usage, self.price_table):.2f}",
        }


def price_usage(usage: Usage, price_table: PriceTable) -> float:
    return (usage.prompt_tokens / 1000.0 * price_table.prompt_per_1k
            + usage.completion_tokens / 1000.0 * price_table.completion_per_1k)


@dataclass(frozen=True)
class RetryPolicy:
    """Bounded exponential backoff: delay(n) = min(cap, base * 2**n)."""

    max_attempts: int = 5
    backoff_base: float = 1.0
    backoff_cap: float = 30.0
    retryable_statuses: FrozenSet[int] = field(default_factory=lambda: frozenset({400, 429, 500, 502, 503}))

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.backoff_base < 0 or self.backoff_cap < self.backoff_base:
            raise ValueError("backoff must satisfy 0 <= base <= cap")

    def delay(self, retry_index: int) -> float:
        return min(self.backoff_cap, self.backoff_base * (2 ** retry_index))


class TokenBucket:
    """
    Global request rate limiter shared by all workers.

    Holds up to `capacity` permits and refills at rate_per_minute / 60 per second.
    """

    def __init__(self,
                 rate_per_minute: float,
                 capacity: Optional[float] = None,
                 clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        if rate_per_minute <= 0:
            raise ValueError("rate_per_minute must be positive")
        self.rate_per_second = rate_per_minute / 60.0
        self.capacity = capacity if capacity is not None else max(1.0, self.rate_per_second)
        self._tokens = self.capacity
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self):
        """Block until a permit is available."""
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate_per_second)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate_per_second
            self._sleep(wait)


def _dig(doc: Any, path: List[Any], prefix: str = "") -> Any:
    current = doc
    walked = prefix
    for key in path:
        walked += f"[{key}]" if isinstance(key, int) else (f".{key}" if walked else key)
        try:
            current = current[key]
        except (KeyError, IndexError, TypeError):
            raise ResponseParseError(walked) from None
        if current is None:
            raise ResponseParseError(walked, "is null")
    return current


def _load_body(wire_body: bytes) -> Dict[str, Any]:
    try:
        doc = json.loads(wire_body)
    except (ValueError, UnicodeDecodeError) as e:
        raise ResponseParseError("$", f"not JSON ({e})") from None
    if not isinstance(doc, dict):
        raise ResponseParseError("$", "not a JSON object")
    return doc


def parse_top_logprobs(wire_body: bytes) -> PredictionDistribution:
    """
    Extract the first-position top-logprob list of a chat-completion response.

    An empty `logprobs.content` array yields an empty distribution.

    Raises:
        ResponseParseError: Naming the path that is missing or malformed
    """
    doc = _load_body(wire_body)
    return _distribution_from_doc(doc)


def _distribution_from_doc(doc: Dict[str, Any]) -> PredictionDistribution:
    content = _dig(doc, ['choices', 0, 'logprobs', 'content'])
    if not isinstance(content, list):
        raise ResponseParseError("choices[0].logprobs.content", "not a list")
    if not content:
        return PredictionDistribution()

    top = _dig(content, [0, "top_logprobs"], prefix="choices[0].logprobs.content")
    if not isinstance(top, list):
        raise ResponseParseError("choices[0].logprobs.content[0].top_logprobs", "not a list")
    pairs: List[Tuple[str, float]] = []
    for i, item in enumerate(top):
        path = f"choices[0].logprobs.content[0].top_logprobs[{i}]"
        try:
            pairs.append((str(item['token']), float(item['logprob'])))
        except (KeyError, TypeError, ValueError):
            raise ResponseParseError(path) from None
    return PredictionDistribution(tuple(pairs))


def _completion_from_doc(doc: Dict[str, Any]) -> str:
    message = _dig(doc, ['choices', 0, 'message'])
    content = message.get('content') if isinstance(message, dict) else None
    return content or ""


def _usage_from_doc(doc: Dict[str, Any]) -> Usage:
    usage = doc.get('usage') or {}
    return Usage(int(usage.get('prompt_tokens', 0)), int(usage.get('completion_tokens', 0)), 1)


_FENCE = re.compile(r"^```(?:json)?\s*(.*?)\s*```$", re.DOTALL)


def check_explain_json(completion_text: str, token_text: str) -> Tuple[bool, bool, Optional[str]]:
    """
    Check an EXPLAIN completion.

    Returns:
        (json_ok, echo_match, text_field): json_ok when the completion is a JSON
        object with `text` and `meaning`; echo_match when `text` equals token_text
    """
    body = completion_text.strip()
    fenced = _FENCE.match(body)
    if fenced:
        body = fenced.group(1)

    try:
        doc = json.loads(body)
    except ValueError:
        return False, False, None

    if not isinstance(doc, dict) or 'text' not in doc or 'meaning' not in doc:
        return False, False, None

    text_field = doc['text'] if isinstance(doc['text'], str) else json.dumps(doc['text'])
    return True, text_field == token_text, text_field


class ChatClient:
    """
    Probe client for a chat-completions endpoint.

    Shareable across worker threads: the HTTP client, rate limiter and ledger
    are all thread-safe.
    """

    def __init__(self,
                 endpoint: str,
                 model: str,
                 api_key: Optional[str] = None,
                 policy: Optional[RetryPolicy] = None,
                 limiter: Optional[TokenBucket] = None,
                 ledger: Optional[CostLedger] = None,
                 timeout: float = 60.0,
                 transport: Optional[httpx.BaseTransport] = None,
                 sleep: Callable[[float], None] = time.sleep):
        """
        Initialize the client.

        Args:
            endpoint: Base URL, e.g. https://api.openai.com/v1 or the mock server's /v1
            model: Model identifier sent with each request
            api_key: Bearer token; never logged
            policy: Retry policy
            limiter: Shared rate limiter (None disables rate limiting)
            ledger: Cost ledger updated from response usage
            timeout: Per-request timeout in seconds
            transport: Optional httpx transport (tests mount the mock app here)
            sleep: Backoff sleep function
        """
        self.endpoint = endpoint.rstrip('/')
        self.model = model
        self.policy = policy or RetryPolicy()
        self.limiter = limiter
        self.ledger = ledger or CostLedger()
        self._sleep = sleep

        headers = {'Content-Type': 'application/json'}
        if api_key:
            headers['Authorization'] = f"Bearer {api_key}"
        self._http = httpx.Client(base_url=self.endpoint, headers=headers, timeout=timeout, transport=transport)

    def close(self):
        self._http.close()

    def __enter__(self) -> "ChatClient":
        return self

    def __exit__(self, *exc_info):
        self.close()

    def send(self, request: ProbeRequest) -> ProbeResult:
        """
        Send a probe with retry/backoff.

        Retryable statuses that persist through all attempts come back as an
        API_ERROR result carrying the last status code.

        Raises:
            LLMClientError: Non-retryable HTTP status (auth, not found, ...)
            TransportOutageError: Endpoint unreachable on every attempt
            ResponseParseError: Malformed 200 response
        """
        payload = request.to_payload(self.model)
        spent = Usage()
        last_code: Optional[int] = None
        last_transport_error: Optional[Exception] = None

        for attempt in range(self.policy.max_attempts):
            if attempt:
                delay = self.policy.delay(attempt - 1)
                logger.debug(f"Retrying {request.kind.value} probe for {request.token_text!r} in {delay:.2f}s")
                self._sleep(delay)

            if self.limiter:
                self.limiter.acquire()

            try:
                response = self._http.post("/chat/completions", json=payload)
            except httpx.TransportError as e:
                last_transport_error = e
                logger.warning(f"Transport error on attempt {attempt + 1}/{self.policy.max_attempts}: {e}")
                continue

            if response.status_code == 200:
                doc = _load_body(response.content)
                usage = _usage_from_doc(doc)
                spent = spent + usage
                self.ledger.add(usage)

                distribution = _distribution_from_doc(doc) if request.want_logprobs else PredictionDistribution()
                empty = request.want_logprobs and distribution.is_empty
                return ProbeResult(
                    distribution=distribution,
                    completion_text=_completion_from_doc(doc),
                    finish_status=FinishStatus.EMPTY_LOGPROBS if empty else FinishStatus.OK,
                    usage=spent,
                    attempts=attempt + 1,
                )

            error_usage = Usage(requests=1)
            spent = spent + error_usage
            self.ledger.add(error_usage)
            last_code = response.status_code

            if response.status_code not in self.policy.retryable_statuses:
                raise LLMClientError(response.status_code, response.text)

            logger.warning(f"HTTP {response.status_code} for {request.token_text!r} "
                           f"(attempt {attempt + 1}/{self.policy.max_attempts})")

        if last_code is None:
            raise TransportOutageError(f"endpoint {self.endpoint} unreachable: {last_transport_error}")

        return ProbeResult(
            distribution=PredictionDistribution(),
            completion_text="",
            finish_status=FinishStatus.API_ERROR,
            usage=spent,
            error_code=last_code,
            attempts=self.policy.max_attempts,
        )

    def repeat_probe(self, token_text: str, temperature: float = 0.0) -> ProbeResult:
        """Scan-pass REPEAT probe: single output token with top-5 logprobs."""
        return self.send(ProbeRequest(ProbeKind.REPEAT, token_text, temperature=temperature,
                                      max_output_tokens=SCAN_MAX_TOKENS))

    def confirm_probe(self, token_text: str, temperature: float = 1.0) -> ProbeResult:
        """Confirmation REPEAT probe; the full completion text is what gets judged."""
        return self.send(ProbeRequest(ProbeKind.REPEAT, token_text, temperature=temperature,
                                      max_output_tokens=CONFIRM_MAX_TOKENS))

    def explain_probe(self, token_text: str, temperature: float = 0.3) -> ExplainResult:
        """EXPLAIN probe for manual investigation."""
        if not 0.0 <= temperature <= 2.0:
            raise ValueError("temperature must be in [0, 2]")

        result = self.send(ProbeRequest(ProbeKind.EXPLAIN, token_text, temperature=temperature,
                                        max_output_tokens=EXPLAIN_MAX_TOKENS, want_logprobs=False))
        json_ok, echo_match, text_field = check_explain_json(result.completion_text, token_text)
        return ExplainResult(
            completion_text=result.completion_text,
            json_ok=json_ok,
            echo_match=echo_match,
            text_field=text_field,
            probe=result,
        )
