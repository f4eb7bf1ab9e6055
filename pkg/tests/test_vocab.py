import base64
import random
import time

import pytest
from loguru import logger

from anomaly_scanner.errors import TokenNotFoundError, VocabularyError
from anomaly_scanner.vocab import Vocabulary, decode_token, encode, load_vocabulary, write_vocabulary

from conftest import byte_ranks, guard_ranks


def _b64(raw: bytes) -> str:
    return base64.b64encode(raw).decode("ascii")


def write_lines(path, lines):
    path.write_bytes("".join(line + "\n" for line in lines).encode("ascii"))
    return path


class TestLoadVocabulary:
    def test_loads_written_file(self, tmp_path):
        path = write_vocabulary(guard_ranks(), tmp_path / "v.tiktoken")
        vocab = load_vocabulary(path)

        assert len(vocab) == 259
        assert vocab.get(258).raw == b"abc"
        assert vocab.get(258).decoded == "abc"
        assert vocab.source == str(path)

    def test_non_utf8_entries_are_not_probeable(self, tmp_path):
        vocab = load_vocabulary(write_vocabulary(byte_ranks(), tmp_path / "bytes.tiktoken"))

        assert vocab.get(0x41).probeable
        assert not vocab.get(0xFF).probeable
        assert vocab.get(0xFF).decoded is None
        assert vocab.probeable_count() == 128

    def test_missing_trailing_newline_is_accepted(self, tmp_path):
        path = tmp_path / "v.tiktoken"
        path.write_bytes(f"{_b64(b'a')} 0\n{_b64(b'b')} 1".encode())
        assert len(load_vocabulary(path)) == 2

    @pytest.mark.parametrize("bad_line, fragment", [
        ("!!!! 2", "base64"),
        ("Yw==", "expected"),
        ("Yw== x", "invalid rank"),
        ("Yw== -3", "negative rank"),
        ("Yw== 1", "duplicate rank"),
        ("YQ== 2", "already assigned"),
    ])
    def test_malformed_line_names_line_number(self, tmp_path, bad_line, fragment):
        path = write_lines(tmp_path / "v.tiktoken", [f"{_b64(b'a')} 0", f"{_b64(b'b')} 1", bad_line])

        with pytest.raises(VocabularyError) as excinfo:
            load_vocabulary(path)

        assert excinfo.value.line_number == 3
        assert fragment in str(excinfo.value)

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(VocabularyError):
            load_vocabulary(tmp_path / "missing.tiktoken")


class TestDecode:
    def test_unknown_id(self, guard_vocab):
        with pytest.raises(TokenNotFoundError) as excinfo:
            decode_token(guard_vocab, 10_000)
        assert isinstance(excinfo.value, KeyError)
        assert excinfo.value.token_id == 10_000

    def test_decode_ids(self, guard_vocab):
        assert guard_vocab.decode([258, 32, 256]) == "abc  a"

    def test_ids_range_is_half_open(self, guard_vocab):
        assert guard_vocab.ids(250, 258) == list(range(250, 258))
        assert guard_vocab.ids(300, 400) == []


class TestEncode:
    def test_whole_piece_token(self, guard_vocab):
        assert encode(guard_vocab, "abc") == [258]

    def test_lowest_rank_merges_first(self, guard_vocab):
        # " a" (256) beats "ab" (257), so "abc" never forms
        assert guard_vocab.encode(" abc") == [256, 98, 99]
        assert guard_vocab.byte_pair_merge(b" abc") == [b" a", b"b", b"c"]

    def test_merge_inside_piece(self, guard_vocab):
        assert guard_vocab.encode("cab") == [99, 257]
        assert guard_vocab.encode("xabc") == [120, 258]

    def test_empty_text(self, guard_vocab):
        assert guard_vocab.encode("") == []

    @pytest.mark.parametrize("text, pieces", [
        ("hello world", ["hello", " world"]),
        ("don't", ["don", "'t"]),
        ("a\r\nb", ["a", "\r\n", "b"]),
        ("123456", ["123", "456"]),
        ("  x", [" ", " x"]),
        ("x = 1;", ["x", " =", " ", "1", ";"]),
    ])
    def test_split_pattern(self, guard_vocab, text, pieces):
        assert guard_vocab.split(text) == pieces

    def test_decode_inverts_encode(self, guard_vocab):
        rng = random.Random(3)
        alphabet = "abc x.\t\né中"
        for _ in range(200):
            text = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 12)))
            assert guard_vocab.decode(guard_vocab.encode(text)) == text

    def test_not_byte_complete(self):
        vocab = Vocabulary.from_ranks({b"a": 0, b"b": 1})
        with pytest.raises(VocabularyError):
            vocab.encode("c")

    def test_consistency_check(self):
        vocab = Vocabulary.from_ranks({**byte_ranks(), b"ab": 256, b"xyz": 257})
        assert vocab.check_consistency() == [257]

    def test_load_warns_about_unreachable_tokens(self, tmp_path):
        path = write_vocabulary({**byte_ranks(), b"ab": 256, b"xyz": 257}, tmp_path / "v.tiktoken")
        messages = []
        sink = logger.add(messages.append, level="WARNING", format="{message}")
        try:
            load_vocabulary(path)
            load_vocabulary(path, check_merges=False)
        finally:
            logger.remove(sink)

        assert len(messages) == 1
        assert "ids [257]" in messages[0]


class TestCl100k:
    def test_known_ids(self, cl100k_vocab):
        start = time.perf_counter()
        assert cl100k_vocab.encode("atrigesimal") == [43587]
        assert cl100k_vocab.encode(" atrigesimal") == [30670, 343, 30572]
        assert time.perf_counter() - start < 1.0
        assert decode_token(cl100k_vocab, 43587).decoded == "atrigesimal"

    def test_matches_reference_tokenizer(self, cl100k_vocab, cl100k_reference):
        base = [
            "def __init__(self, vocab_path):", "camelCaseIdentifier", "snake_case_name_2",
            "\tindented\twith\ttabs", "line one\r\nline two\r\n", "trailing spaces   ",
            "   leading", "x+=1;y-=2", "HTTPServerError", "getElementById",
            "Zürich café naïve", "日本語のテキスト", "Ελληνικά γράμματα", "emoji 🙂🚀 mix",
            "don't won't I'm they'll we've", "1234567890", "3.14159e-10",
            "<|endoftext|> is plain text here", "SolidGoldMagikarp", " petertodd",
            "atrigesimal", " atrigesimal", "\n\n\n", "a b", "tab\t\tdouble",
            "mixed\r\n\tindent", "URL https://example.com/a?b=c", "JSON {\"k\": [1, 2]}",
            "ratulations", "webElementXpaths", "VisualStyleBackColor", "richTextPanel",
            "reland redirectToRoute", "ValueGenerationStrategy", "(dAtA",
            "/Subthreshold", "stabilstate", "istrates", "rPid render",
        ]
        rng = random.Random(11)
        corpus = list(base)
        while len(corpus) < 200:
            corpus.append(rng.choice(base) + rng.choice(["", " ", "\t", "\r\n", "\n"]) + rng.choice(base))

        mismatches = [s for s in corpus if cl100k_vocab.encode(s) != cl100k_reference.encode_ordinary(s)]
        assert mismatches == []
