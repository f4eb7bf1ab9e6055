"""
Shared fixtures: synthetic vocabularies, the mock endpoint wired in-process,
and the real cl100k_base vocabulary when one is available.
"""

import os
from pathlib import Path
from typing import Dict, Iterable

import httpx
import pytest

from anomaly_scanner.llm_client import ChatClient, CostLedger, PriceTable, RetryPolicy
from anomaly_scanner.mock_llm import AnomalyProfile, create_app
from anomaly_scanner.vocab import Vocabulary, load_vocabulary, write_vocabulary

MOCK_ENDPOINT = "http://mock.test/v1"
MOCK_MODEL = "mock-gpt"


def byte_ranks() -> Dict[bytes, int]:
    return {bytes([b]): b for b in range(256)}


def guard_ranks() -> Dict[bytes, int]:
    """
    Byte-complete vocabulary where "abc" is one token (258) but " abc" is not.

    " a" outranks "ab", so a leading space steals the "a" before "ab" can form.
    """
    ranks = byte_ranks()
    ranks.update({b" a": 256, b"ab": 257, b"abc": 258})
    return ranks


def word_ranks(count: int) -> Dict[bytes, int]:
    """`count` distinct alphabetic words with ids 0..count-1."""
    letters = "bcdfghjklmnpqrstvwxz"
    vowels = "aeiou"
    words = []
    for first in letters:
        for vowel in vowels:
            for last in letters:
                words.append(f"{first}{vowel}{last}o")
                if len(words) == count:
                    return {word.encode(): i for i, word in enumerate(words)}
    raise ValueError(f"cannot build {count} words")


@pytest.fixture
def guard_vocab() -> Vocabulary:
    return Vocabulary.from_ranks(guard_ranks())


@pytest.fixture
def guard_vocab_file(tmp_path) -> Path:
    return write_vocabulary(guard_ranks(), tmp_path / "guard.tiktoken")


def mock_client(app, price_table: PriceTable = None, max_attempts: int = 5,
                transport: httpx.BaseTransport = None) -> ChatClient:
    """Client talking to a Flask mock app in-process, with no backoff sleeps or rate limit."""
    return ChatClient(
        MOCK_ENDPOINT,
        MOCK_MODEL,
        policy=RetryPolicy(max_attempts=max_attempts),
        ledger=CostLedger(price_table or PriceTable()),
        transport=transport or httpx.WSGITransport(app=app),
        sleep=lambda seconds: None,
    )


def profile_for(overrides: Dict[str, object], seed: int = 7) -> AnomalyProfile:
    return AnomalyProfile.from_dict({'seed': seed, 'default': {'kind': 'normal', 'top_prob': 0.99},
                                     'overrides': overrides})


@pytest.fixture
def make_mock():
    """Factory returning (app, client) for a profile."""
    def factory(overrides: Dict[str, object] = None, seed: int = 7, **client_kwargs):
        app = create_app(profile_for(overrides or {}, seed=seed))
        return app, mock_client(app, **client_kwargs)
    return factory


def planted_words(vocab: Vocabulary, ids: Iterable[int]) -> Dict[int, str]:
    return {i: vocab.get(i).decoded for i in ids}


# token id -> (behavior, expected classification)
PLANTED = {
    17: ({'kind': 'major', 'flat_k': 5}, 'major'),
    101: ({'kind': 'major', 'flat_k': 4}, 'major'),
    188: ({'kind': 'major', 'flat_k': 3}, 'major'),
    240: ({'kind': 'major', 'flat_k': 5}, 'major'),
    333: ({'kind': 'major', 'flat_k': 4}, 'major'),
    420: ({'kind': 'major', 'flat_k': 3}, 'major'),
    515: ({'kind': 'major', 'flat_k': 5}, 'major'),
    602: ({'kind': 'major', 'flat_k': 4}, 'major'),
    650: ({'kind': 'minor', 'off_target_rate': 0.1}, 'minor'),
    700: ({'kind': 'minor', 'off_target_rate': 0.2}, 'minor'),
    777: ({'kind': 'minor', 'off_target_rate': 0.3}, 'minor'),
    810: ({'kind': 'minor', 'off_target_rate': 0.5}, 'minor'),
    850: ('no_result', 'no_result'),
    901: ('no_result', 'no_result'),
    930: ('no_result', 'no_result'),
    960: ({'kind': 'error400', 'rate': 1.0}, 'perm_error'),
    975: ({'kind': 'error400', 'rate': 1.0}, 'perm_error'),
    30: ({'kind': 'normal', 'top_prob': 0.45}, 'false_positive'),
    260: ({'kind': 'normal', 'top_prob': 0.45}, 'false_positive'),
    470: ({'kind': 'normal', 'top_prob': 0.4}, 'false_positive'),
    690: ({'kind': 'normal', 'top_prob': 0.45}, 'false_positive'),
    990: ({'kind': 'normal', 'top_prob': 0.5}, 'false_positive'),
}


def planted_overrides(vocab: Vocabulary, plants: Dict[int, tuple] = None) -> Dict[str, object]:
    """Profile overrides keyed by token text for the planted ids present in `vocab`."""
    plants = PLANTED if plants is None else plants
    return {vocab.get(i).decoded: behavior for i, (behavior, _) in plants.items() if i in vocab}


@pytest.fixture
def word_vocab() -> Vocabulary:
    return Vocabulary.from_ranks(word_ranks(1000))


@pytest.fixture(scope="session")
def cl100k_reference():
    """tiktoken's cl100k_base encoding; skips when it cannot be loaded offline."""
    tiktoken = pytest.importorskip("tiktoken")
    try:
        return tiktoken.get_encoding("cl100k_base")
    except Exception as e:
        pytest.skip(f"cl100k_base not available: {e}")


@pytest.fixture(scope="session")
def cl100k_vocab(tmp_path_factory) -> Vocabulary:
    """The real cl100k_base vocabulary, from CL100K_BASE_FILE or tiktoken's cache."""
    path = os.environ.get("CL100K_BASE_FILE")
    if path:
        return load_vocabulary(path)

    tiktoken = pytest.importorskip("tiktoken")
    try:
        encoding = tiktoken.get_encoding("cl100k_base")
    except Exception as e:
        pytest.skip(f"cl100k_base not available: {e}")
    out = tmp_path_factory.mktemp("vocab") / "cl100k_base.tiktoken"
    write_vocabulary(encoding._mergeable_ranks, out)
    return load_vocabulary(out)
