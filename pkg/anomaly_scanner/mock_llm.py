"""
Mock Chat-Completions Server
============================

Deterministic stand-in for a chat-completions endpoint. Each token string is
mapped to a behavior (normal echo, minor or major anomaly, no-result, blank,
HTTP 400, schema-violating) and every random choice is derived from
(seed, token text, request ordinal), so the same request sequence always gets
byte-identical responses.

Example:
    profile = AnomalyProfile.from_file("profile.json")
    handle = serve(profile, port=8765)
    ...
    handle.ledger()
    handle.shutdown()
"""

import hashlib
import json
import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
from flask import Flask, Response, jsonify, request
from loguru import logger
from werkzeug.serving import make_server

from .errors import MockServerError
from .llm_client import EXPLAIN_SYSTEM_PROMPT
from .metrics import TOP_K
from .triage import normalize

UNRELATED_STRINGS = (
    "render", "rPid", "reland", "redirectToRoute", "ValueGenerationStrategy",
    "ratulations", "istrates", "(dAtA", "webElementX", "/Subthreshold",
    "VisualStyleBackColor", "stabilstate", "richTextPanel",
)
BLANK_STRINGS = ("", " ", "\n", "\t", "  ")
MAJOR_MASS = 0.96
MINOR_TOP_PROB = 0.52
MINOR_VARIANT_PROB = 0.30
SLOTS = 10


def _whitespace_case_variants(token_text: str, count: int) -> List[str]:
    """Distinct strings that normalize to the same text as token_text."""
    pool = [
        " " + token_text, token_text.upper(), token_text.capitalize(), " " + token_text.upper(),
        "\t" + token_text, " " + token_text.capitalize(), "\n" + token_text,
    ]
    pool += [" " * n + token_text for n in range(2, count + 3)]

    target = normalize(token_text)
    variants: List[str] = []
    for candidate in pool:
        if candidate != token_text and candidate not in variants and normalize(candidate) == target:
            variants.append(candidate)
    return variants[:count]


def _unrelated_pool(token_text: str, extra: Tuple[str, ...] = ()) -> List[str]:
    target = normalize(token_text)
    pool = [s for s in (*extra, *UNRELATED_STRINGS) if normalize(s) != target]
    return list(dict.fromkeys(pool))


@dataclass(frozen=True)
class Normal:
    """
    Echoes the token; remaining mass is split over whitespace/case variants.

    Below 1/TOP_K each variant outweighs the token and is listed ahead of it.
    """

    top_prob: float = 0.99

    def __post_init__(self):
        if not 0.0 < self.top_prob <= 1.0:
            raise MockServerError("Normal.top_prob must be in (0, 1]")

    def distribution(self, token_text: str) -> List[Tuple[str, float]]:
        rest = (1.0 - self.top_prob) / (TOP_K - 1)
        entries = [(token_text, self.top_prob)]
        if rest > 0:
            entries += [(v, rest) for v in _whitespace_case_variants(token_text, TOP_K - 1)]
        return entries


@dataclass(frozen=True)
class MinorAnomalous:
    """
    Mostly echoes, but exactly round(off_target_rate * 10) of every block of
    ten sampled requests return an unrelated variant.
    """

    off_target_rate: float = 0.2
    variants: Tuple[str, ...] = ()

    def __post_init__(self):
        if not 0.0 <= self.off_target_rate <= 1.0:
            raise MockServerError("MinorAnomalous.off_target_rate must be in [0, 1]")

    def off_targets(self, token_text: str) -> List[str]:
        target = normalize(token_text)
        own = [v for v in self.variants if normalize(v) != target]
        return own or _unrelated_pool(token_text)[:1]

    def distribution(self, token_text: str) -> List[Tuple[str, float]]:
        filler = (1.0 - MINOR_TOP_PROB - MINOR_VARIANT_PROB) / (TOP_K - 2)
        entries = [(token_text, MINOR_TOP_PROB), (self.off_targets(token_text)[0], MINOR_VARIANT_PROB)]
        entries += [(v, filler) for v in _whitespace_case_variants(token_text, TOP_K - 2)]
        return entries


@dataclass(frozen=True)
class MajorAnomalous:
    """Near-uniform top-k over unrelated strings; never echoes."""

    flat_k: int = 5

    def __post_init__(self):
        if not 3 <= self.flat_k <= TOP_K:
            raise MockServerError(f"MajorAnomalous.flat_k must be in [3, {TOP_K}]")

    def distribution(self, token_text: str, rng: np.random.Generator) -> List[Tuple[str, float]]:
        pool = _unrelated_pool(token_text)
        picks = rng.permutation(len(pool))[:self.flat_k]
        return [(pool[i], MAJOR_MASS / self.flat_k) for i in picks]


@dataclass(frozen=True)
class NoResult:
    """Empty logprob array and empty completion."""


@dataclass(frozen=True)
class Unspeakable:
    """Only blank strings come back."""

    def distribution(self) -> List[Tuple[str, float]]:
        return [(s, MAJOR_MASS / len(BLANK_STRINGS)) for s in BLANK_STRINGS]


@dataclass(frozen=True)
class Error400:
    """HTTP 400 with probability `rate` per request, otherwise Normal."""

    rate: float = 1.0
    top_prob: float = 0.99

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise MockServerError("Error400.rate must be in [0, 1]")


@dataclass(frozen=True)
class SchemaViolating:
    """REPEAT behaves normally; EXPLAIN answers with prose instead of JSON."""

    top_prob: float = 0.99


BEHAVIORS = {
    'normal': Normal,
    'minor': MinorAnomalous,
    'major': MajorAnomalous,
    'no_result': NoResult,
    'unspeakable': Unspeakable,
    'error400': Error400,
    'schema_violating': SchemaViolating,
}
Behavior = Union[Normal, MinorAnomalous, MajorAnomalous, NoResult, Unspeakable, Error400, SchemaViolating]


def behavior_from_dict(data: Union[str, Mapping[str, Any]]) -> Behavior:
    """
    Parse a behavior descriptor.

    Accepts a bare name ("no_result") or an object such as
    {"kind": "major", "flat_k": 4} or {"kind": "minor", "off_target_rate": 0.2}.
    """
    if isinstance(data, str):
        data = {'kind': data}
    params = dict(data)
    kind = params.pop('kind', None)
    if kind not in BEHAVIORS:
        raise MockServerError(f"unknown behavior kind {kind!r}; expected one of {sorted(BEHAVIORS)}")
    if 'variants' in params:
        params['variants'] = tuple(params['variants'])
    try:
        return BEHAVIORS[kind](**params)
    except TypeError as e:
        raise MockServerError(f"bad parameters for behavior {kind!r}: {e}") from None


def behavior_to_dict(behavior: Behavior) -> Dict[str, Any]:
    kind = next(name for name, cls in BEHAVIORS.items() if isinstance(behavior, cls))
    data = {'kind': kind, **behavior.__dict__}
    if 'variants' in data:
        data['variants'] = list(data['variants'])
    return data


@dataclass
class AnomalyProfile:
    """Default behavior plus per-token-string overrides, and the seed for all sampling."""

    default: Behavior = field(default_factory=Normal)
    overrides: Dict[str, Behavior] = field(default_factory=dict)
    seed: int = 0

    def behavior_for(self, token_text: str) -> Behavior:
        return self.overrides.get(token_text, self.default)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'seed': self.seed,
            'default': behavior_to_dict(self.default),
            'overrides': {text: behavior_to_dict(b) for text, b in sorted(self.overrides.items())},
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "AnomalyProfile":
        return cls(
            default=behavior_from_dict(data.get('default', 'normal')),
            overrides={str(text): behavior_from_dict(b) for text, b in data.get('overrides', {}).items()},
            seed=int(data.get('seed', 0)),
        )

    @classmethod
    def from_file(cls, path: Union[str, Path], seed: Optional[int] = None) -> "AnomalyProfile":
        """Load a JSON profile; `seed` overrides the file's seed."""
        path = Path(path)
        try:
            profile = cls.from_dict(json.loads(path.read_text(encoding="utf-8")))
        except (OSError, ValueError) as e:
            raise MockServerError(f"cannot load profile {path}: {e}") from None
        if seed is not None:
            profile.seed = seed
        logger.info(f"Loaded mock profile {path.name}: {len(profile.overrides)} overrides, seed {profile.seed}")
        return profile


def _text_hash(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")


def _word_count(text: str) -> int:
    return len(text.split())


class MockState:
    """Per-server counters: request ordinals and the server-side ledger."""

    def __init__(self, profile: AnomalyProfile, delay: float = 0.0):
        self.profile = profile
        self.delay = delay
        self.prompt_tokens = 0
        self.completion_tokens = 0
        self.request_count = 0
        self._ordinals: Dict[Tuple[str, str, bool], int] = {}
        self._lock = threading.Lock()

    def next_ordinal(self, token_text: str, kind: str, sampled: bool) -> int:
        key = (token_text, kind, sampled)
        with self._lock:
            ordinal = self._ordinals.get(key, 0)
            self._ordinals[key] = ordinal + 1
            return ordinal

    def charge(self, prompt_tokens: int, completion_tokens: int) -> int:
        """Count one request; returns its 1-based request number."""
        with self._lock:
            self.request_count += 1
            self.prompt_tokens += prompt_tokens
            self.completion_tokens += completion_tokens
            return self.request_count

    def ledger(self) -> Dict[str, int]:
        with self._lock:
            return {
                'prompt_tokens': self.prompt_tokens,
                'completion_tokens': self.completion_tokens,
                'request_count': self.request_count,
            }

    def rng(self, token_text: str, *stream: int) -> np.random.Generator:
        return np.random.default_rng([self.profile.seed, _text_hash(token_text), *stream])


def _logprob(p: float) -> float:
    return math.log(p) if p > 0 else -1e4


def _top_logprob_item(text: str, p: float) -> Dict[str, Any]:
    return {'token': text, 'logprob': _logprob(p), 'bytes': list(text.encode("utf-8"))}


def _sample(entries: List[Tuple[str, float]], rng: np.random.Generator) -> str:
    probs = np.array([p for _, p in entries], dtype=np.float64)
    return entries[int(rng.choice(len(entries), p=probs / probs.sum()))][0]


def _explain_json(text: str, meaning: str) -> str:
    return json.dumps({'text': text, 'meaning': meaning})


class Responder:
    """Builds the completion and top-k list for one request."""

    def __init__(self, state: MockState):
        self.state = state

    def respond(self, token_text: str, kind: str, temperature: float) -> Optional[Tuple[str, List[Tuple[str, float]]]]:
        """
        Returns:
            (completion, top-k entries), or None for an HTTP 400
        """
        behavior = self.state.profile.behavior_for(token_text)
        sampled = temperature > 0
        ordinal = self.state.next_ordinal(token_text, kind, sampled)
        rng = self.state.rng(token_text, ord(kind[0]), int(sampled), ordinal)

        if isinstance(behavior, Error400):
            if behavior.rate >= 1.0 or rng.random() < behavior.rate:
                return None
            behavior = Normal(behavior.top_prob)

        if isinstance(behavior, NoResult):
            return "", []

        if kind == "explain":
            return self._explain(behavior, token_text, ordinal, rng), []

        if isinstance(behavior, SchemaViolating):
            behavior = Normal(behavior.top_prob)

        if isinstance(behavior, MajorAnomalous):
            entries = behavior.distribution(token_text, self.state.rng(token_text, 0))
        elif isinstance(behavior, Unspeakable):
            entries = behavior.distribution()
        else:
            entries = behavior.distribution(token_text)
        # top_logprobs go out in descending order, whatever the profile asks for
        entries = sorted(entries, key=lambda entry: entry[1], reverse=True)

        if not sampled:
            return entries[0][0], entries

        if isinstance(behavior, MinorAnomalous):
            return self._minor_sample(behavior, token_text, ordinal, rng), entries
        return _sample(entries, rng), entries

    def _minor_sample(self, behavior: MinorAnomalous, token_text: str, ordinal: int,
                      rng: np.random.Generator) -> str:
        block, slot = divmod(ordinal, SLOTS)
        off_slots = self.state.rng(token_text, 1, block).permutation(SLOTS)[:round(behavior.off_target_rate * SLOTS)]
        if slot in off_slots:
            variants = behavior.off_targets(token_text)
            return variants[int(rng.integers(len(variants)))]
        return token_text

    def _explain(self, behavior: Behavior, token_text: str, ordinal: int, rng: np.random.Generator) -> str:
        if isinstance(behavior, SchemaViolating):
            return f"The message {token_text!r} looks like a fragment of a longer word."
        if isinstance(behavior, Unspeakable):
            return _explain_json("", "an empty message")
        if isinstance(behavior, MajorAnomalous):
            pool = _unrelated_pool(token_text)
            order = self.state.rng(token_text, 2).permutation(len(pool))
            text = pool[order[ordinal % len(pool)]]
            return _explain_json(text, f"a word related to {text}")
        if isinstance(behavior, MinorAnomalous) and rng.random() < behavior.off_target_rate:
            text = behavior.off_targets(token_text)[0]
            return _explain_json(text, f"a word related to {text}")
        return _explain_json(token_text, "a common word fragment")


def _error_body(message: str, code: int) -> Response:
    response = jsonify({'error': {'message': message, 'type': 'invalid_request_error', 'code': code}})
    response.status_code = code
    return response


def create_app(profile: AnomalyProfile, delay: float = 0.0, model: str = "mock-gpt") -> Flask:
    """Flask app serving POST /v1/chat/completions and GET /v1/ledger."""
    app = Flask(__name__)
    state = MockState(profile, delay=delay)
    responder = Responder(state)
    app.config['MOCK_STATE'] = state

    @app.post("/v1/chat/completions")
    def chat_completions():
        if state.delay:
            time.sleep(state.delay)

        body = request.get_json(silent=True)
        messages = body.get('messages') if isinstance(body, dict) else None
        if not isinstance(messages, list) or not messages:
            state.charge(0, 0)
            return _error_body("messages must be a non-empty list", 400)

        system = next((m.get('content', "") for m in messages if m.get('role') == 'system'), "")
        token_text = next((m.get('content', "") for m in reversed(messages) if m.get('role') == 'user'), "")
        kind = "explain" if system == EXPLAIN_SYSTEM_PROMPT else "repeat"
        temperature = float(body.get('temperature', 1.0))

        outcome = responder.respond(token_text, kind, temperature)
        if outcome is None:
            state.charge(0, 0)
            return _error_body("Bad request", 400)

        completion, entries = outcome
        prompt_tokens = sum(_word_count(str(m.get('content', ""))) for m in messages) + 1
        completion_tokens = _word_count(completion) + 1
        request_number = state.charge(prompt_tokens, completion_tokens)

        choice: Dict[str, Any] = {
            'index': 0,
            'message': {'role': 'assistant', 'content': completion},
            'logprobs': None,
            'finish_reason': 'stop',
        }
        if body.get('logprobs'):
            top_n = min(int(body.get('top_logprobs', TOP_K)), TOP_K)
            content = []
            if entries:
                top = [_top_logprob_item(text, p) for text, p in entries[:top_n]]
                content.append({**_top_logprob_item(*entries[0]), 'top_logprobs': top})
            choice['logprobs'] = {'content': content}

        request_hash = hashlib.sha256(json.dumps(body, sort_keys=True).encode("utf-8")).hexdigest()[:12]
        payload = {
            'id': f"chatcmpl-mock-{request_hash}-{request_number}",
            'object': 'chat.completion',
            'model': body.get('model', model),
            'choices': [choice],
            'usage': {
                'prompt_tokens': prompt_tokens,
                'completion_tokens': completion_tokens,
                'total_tokens': prompt_tokens + completion_tokens,
            },
        }
        return Response(json.dumps(payload, sort_keys=True), mimetype='application/json')

    @app.get("/v1/ledger")
    def ledger():
        return jsonify(state.ledger())

    return app


class MockServerHandle:
    """Running mock server; `url` is the base URL to give the client."""

    def __init__(self, app: Flask, host: str, port: int):
        self.app = app
        try:
            self._server = make_server(host, port, app, threaded=True)
        except (OSError, SystemExit) as e:
            # werkzeug reports a busy port by exiting
            raise MockServerError(f"cannot bind mock server to {host}:{port}: {e}") from None
        self.host = host
        self.port = self._server.port
        self._thread = threading.Thread(target=self._server.serve_forever, name="mock-llm", daemon=True)
        self._thread.start()
        logger.success(f"Mock LLM serving on {self.url}")

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}/v1"

    def ledger(self) -> Dict[str, int]:
        return self.app.config['MOCK_STATE'].ledger()

    def wait(self):
        while self._thread.is_alive():
            self._thread.join(timeout=0.5)

    def shutdown(self):
        self._server.shutdown()
        self._thread.join()
        self._server.server_close()
        logger.info("Mock LLM stopped")

    def __enter__(self) -> "MockServerHandle":
        return self

    def __exit__(self, *exc_info):
        self.shutdown()


def serve(profile: AnomalyProfile, host: str = "127.0.0.1", port: int = 0, delay: float = 0.0) -> MockServerHandle:
    """
    Start the mock server in a background thread.

    Raises:
        MockServerError: Bind failure
    """
    return MockServerHandle(create_app(profile, delay=delay), host, port)


def mock_ledger(handle: Union[MockServerHandle, Flask]) -> Dict[str, int]:
    """Server-side counters of a running or stopped server (or a bare app)."""
    app = handle.app if isinstance(handle, MockServerHandle) else handle
    return app.config['MOCK_STATE'].ledger()
