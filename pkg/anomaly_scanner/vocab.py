"""
BPE Vocabulary
==============

Loading of rank-ordered byte-level BPE vocabularies (the `.tiktoken` line
format used to distribute cl100k_base) together with a faithful encoder.

Example:
    vocab = load_vocabulary("cl100k_base.tiktoken")
    vocab.encode("atrigesimal")      # [43587]
    decode_token(vocab, 43587).decoded
"""

import base64
import binascii
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Union

import regex
from loguru import logger

from .errors import TokenNotFoundError, VocabularyError

CL100K_SPLIT_PATTERN = (
    r"(?i:'s|'t|'re|'ve|'m|'ll|'d)"
    r"|[^\r\n\p{L}\p{N}]?\p{L}+"
    r"|\p{N}{1,3}"
    r"| ?[^\s\p{L}\p{N}]+[\r\n]*"
    r"|\s*[\r\n]+"
    r"|\s+(?!\S)"
    r"|\s+"
)


@dataclass(frozen=True)
class TokenEntry:
    """One vocabulary entry. `decoded` is None when the bytes are not valid UTF-8."""

    id: int
    raw: bytes
    decoded: Optional[str] = None

    @property
    def probeable(self) -> bool:
        return self.decoded is not None


class Vocabulary:
    """
    Immutable rank-ordered BPE vocabulary.

    The rank of a token doubles as its merge priority: two adjacent parts
    merge when their concatenation is itself a token, lowest rank first.
    Safe for concurrent reads once constructed.
    """

    def __init__(self,
                 entries: Mapping[int, TokenEntry],
                 split_pattern: str = CL100K_SPLIT_PATTERN,
                 source: Optional[str] = None):
        """
        Build a vocabulary from entries.

        Args:
            entries: Token id to entry map
            split_pattern: Pre-tokenization regular expression
            source: Where the entries came from (file path), for reporting
        """
        self._entries: Dict[int, TokenEntry] = dict(sorted(entries.items()))
        self._ranks: Dict[bytes, int] = {}
        for token_id, entry in self._entries.items():
            if entry.raw in self._ranks:
                raise VocabularyError(
                    f"bytes {entry.raw!r} assigned to both {self._ranks[entry.raw]} and {token_id}"
                )
            self._ranks[entry.raw] = token_id

        self.split_pattern = split_pattern
        self.source = source
        self._splitter = regex.compile(split_pattern)

    @classmethod
    def from_ranks(cls, ranks: Mapping[bytes, int], **kwargs) -> "Vocabulary":
        """Build a vocabulary from a bytes -> rank map."""
        entries = {rank: _make_entry(rank, raw) for raw, rank in ranks.items()}
        if len(entries) != len(ranks):
            raise VocabularyError("duplicate ranks in rank map")
        return cls(entries, **kwargs)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, token_id: object) -> bool:
        return token_id in self._entries

    def __iter__(self) -> Iterator[TokenEntry]:
        return iter(self._entries.values())

    @property
    def entries(self) -> Mapping[int, TokenEntry]:
        return MappingProxyType(self._entries)

    def ids(self, lo: Optional[int] = None, hi: Optional[int] = None) -> List[int]:
        """Ascending token ids in [lo, hi)."""
        return [
            token_id for token_id in self._entries
            if (lo is None or token_id >= lo) and (hi is None or token_id < hi)
        ]

    def get(self, token_id: int) -> TokenEntry:
        try:
            return self._entries[token_id]
        except KeyError:
            raise TokenNotFoundError(token_id) from None

    def decode_bytes(self, ids: Sequence[int]) -> bytes:
        return b"".join(self.get(token_id).raw for token_id in ids)

    def decode(self, ids: Sequence[int]) -> str:
        return self.decode_bytes(ids).decode("utf-8", errors="replace")

    def split(self, text: str) -> List[str]:
        """Pre-tokenization pieces of text."""
        return self._splitter.findall(text)

    def encode(self, text: str) -> List[int]:
        """Encode text to token ids: split into pieces, then merge within each piece."""
        ids: List[int] = []
        for piece in self.split(text):
            ids.extend(self._encode_piece(piece.encode("utf-8")))
        return ids

    def _encode_piece(self, piece: bytes) -> List[int]:
        rank = self._ranks.get(piece)
        if rank is not None:
            return [rank]

        ids = []
        for part in self.byte_pair_merge(piece):
            rank = self._ranks.get(part)
            if rank is None:
                raise VocabularyError(f"byte sequence {part!r} has no token; vocabulary is not byte-complete")
            ids.append(rank)
        return ids

    def byte_pair_merge(self, piece: bytes) -> List[bytes]:
        """Merge single bytes of a piece, lowest rank first, until no adjacent pair is a token."""
        parts = [piece[i:i + 1] for i in range(len(piece))]

        while len(parts) > 1:
            best_rank = None
            best_index = -1
            for i in range(len(parts) - 1):
                rank = self._ranks.get(parts[i] + parts[i + 1])
                if rank is not None and (best_rank is None or rank < best_rank):
                    best_rank = rank
                    best_index = i

            if best_rank is None:
                break

            parts[best_index:best_index + 2] = [parts[best_index] + parts[best_index + 1]]

        return parts

    def check_consistency(self) -> List[int]:
        """Ids of multi-byte entries whose bytes are not reachable by merges."""
        unreachable = []
        for token_id, entry in self._entries.items():
            if len(entry.raw) > 1 and self.byte_pair_merge(entry.raw) != [entry.raw]:
                unreachable.append(token_id)
        return unreachable

    def probeable_count(self) -> int:
        return sum(1 for entry in self._entries.values() if entry.probeable)


def _make_entry(token_id: int, raw: bytes) -> TokenEntry:
    try:
        decoded = raw.decode("utf-8")
    except UnicodeDecodeError:
        decoded = None
    return TokenEntry(id=token_id, raw=raw, decoded=decoded)


def load_vocabulary(path: Union[str, Path],
                    split_pattern: str = CL100K_SPLIT_PATTERN,
                    check_merges: bool = True) -> Vocabulary:
    """
    Load a `<base64 bytes> <rank>` vocabulary file.

    Args:
        path: Vocabulary file path
        split_pattern: Pre-tokenization pattern
        check_merges: Warn about multi-byte tokens that no merge sequence produces

    Returns:
        Vocabulary with one entry per line

    Raises:
        VocabularyError: On unreadable file or malformed line (names the line number)
    """
    path = Path(path)
    logger.info(f"Loading vocabulary: {path}")

    try:
        content = path.read_bytes()
    except OSError as e:
        raise VocabularyError(f"cannot read vocabulary file {path}: {e}") from e

    lines = content.split(b"\n")
    if lines and lines[-1] == b"":
        lines.pop()

    entries: Dict[int, TokenEntry] = {}
    seen_bytes: Dict[bytes, int] = {}
    for line_number, line in enumerate(lines, start=1):
        fields = line.rstrip(b"\r").split(b" ")
        if len(fields) != 2 or not fields[1]:
            raise VocabularyError("expected '<base64> <rank>'", line_number)

        try:
            raw = base64.b64decode(fields[0], validate=True)
        except (binascii.Error, ValueError):
            raise VocabularyError("invalid base64 token bytes", line_number) from None

        try:
            rank = int(fields[1])
        except ValueError:
            raise VocabularyError(f"invalid rank {fields[1]!r}", line_number) from None
        if rank < 0:
            raise VocabularyError(f"negative rank {rank}", line_number)
        if rank in entries:
            raise VocabularyError(f"duplicate rank {rank}", line_number)
        if raw in seen_bytes:
            raise VocabularyError(f"bytes already assigned to rank {seen_bytes[raw]}", line_number)

        seen_bytes[raw] = rank
        entries[rank] = _make_entry(rank, raw)

    vocab = Vocabulary(entries, split_pattern=split_pattern, source=str(path))
    undecodable = len(vocab) - vocab.probeable_count()
    logger.success(f"Loaded {len(vocab):,} tokens from {path.name} ({undecodable} not valid UTF-8)")

    if check_merges:
        unreachable = vocab.check_consistency()
        if unreachable:
            logger.warning(f"{len(unreachable):,} tokens in {path.name} cannot be produced by merges "
                           f"(e.g. ids {unreachable[:5]}); encode() never emits them")
    return vocab


def decode_token(vocab: Vocabulary, token_id: int) -> TokenEntry:
    """Look up a token entry; raises TokenNotFoundError for unknown ids."""
    return vocab.get(token_id)


def encode(vocab: Vocabulary, text: str) -> List[int]:
    """Encode text with the vocabulary's split pattern and merge ranks."""
    return vocab.encode(text)


def write_vocabulary(ranks: Mapping[bytes, int], path: Union[str, Path]) -> Path:
    """Write a bytes -> rank map in the `<base64> <rank>` line format, ascending rank."""
    path = Path(path)
    with open(path, "w", encoding="ascii", newline="\n") as f:
        for raw, rank in sorted(ranks.items(), key=lambda item: item[1]):
            f.write(f"{base64.b64encode(raw).decode('ascii')} {rank}\n")
    return path
