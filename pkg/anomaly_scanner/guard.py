"""
Input Guard
===========

Finds spans of input text that tokenize to blocklisted anomalous tokens and
breaks them up by inserting a space in front, so the text encodes to other ids
while its visible content stays the same.

Example:
    bl = Blocklist.from_report("report.json", vocab)
    perturb("atrigesimal", vocab, bl).text    # " atrigesimal"
"""

import json
from bisect import bisect_right
from dataclasses import dataclass
from pathlib import Path
from typing import FrozenSet, Iterable, List, Sequence, Tuple, Union

from loguru import logger

from .errors import GuardError, GuardUnresolvableError
from .vocab import Vocabulary

MAX_PASSES = 3
DEFAULT_BLOCK_CLASSES = ("major", "no_result")


@dataclass(frozen=True)
class Blocklist:
    ids: FrozenSet[int]
    source: str = "inline"

    def __contains__(self, token_id: object) -> bool:
        return token_id in self.ids

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_ids(cls, ids: Iterable[int], vocab: Vocabulary, source: str = "inline") -> "Blocklist":
        """
        Build a blocklist, checking every id against the vocabulary.

        Raises:
            GuardError: An id is not in the vocabulary
        """
        ids = frozenset(int(i) for i in ids)
        unknown = sorted(i for i in ids if i not in vocab)
        if unknown:
            raise GuardError(f"blocklist {source} names ids missing from the vocabulary: {unknown[:10]}")
        return cls(ids=ids, source=source)

    @classmethod
    def from_report(cls,
                    path: Union[str, Path],
                    vocab: Vocabulary,
                    classes: Sequence[str] = DEFAULT_BLOCK_CLASSES) -> "Blocklist":
        """Ids of the report records whose classification is in `classes`."""
        path = Path(path)
        try:
            report = json.loads(path.read_text(encoding="utf-8"))
            records = report['records']
            ids = [int(r['id']) for r in records if r['classification'] in classes]
        except (OSError, ValueError, KeyError, TypeError) as e:
            raise GuardError(f"cannot read blocklist from report {path}: {e}") from None

        logger.info(f"Blocklist from {path.name}: {len(ids)} ids ({', '.join(classes)})")
        return cls.from_ids(ids, vocab, source=str(path))

    @classmethod
    def from_ids_file(cls, path: Union[str, Path], vocab: Vocabulary) -> "Blocklist":
        """One id per line; blank lines and `#` comments are ignored."""
        path = Path(path)
        ids = []
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except OSError as e:
            raise GuardError(f"cannot read blocklist {path}: {e}") from None

        for line_number, line in enumerate(lines, start=1):
            line = line.split('#', 1)[0].strip()
            if not line:
                continue
            try:
                ids.append(int(line))
            except ValueError:
                raise GuardError(f"{path}: line {line_number} is not a token id: {line!r}") from None
        return cls.from_ids(ids, vocab, source=str(path))


def load_blocklist(path: Union[str, Path], vocab: Vocabulary) -> Blocklist:
    """A `.json` path is read as a report, anything else as an ids file."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        return Blocklist.from_report(path, vocab)
    return Blocklist.from_ids_file(path, vocab)


@dataclass(frozen=True)
class BlockedSpan:
    """Byte span [start, end) of the UTF-8 text that encodes to a blocked id."""

    start: int
    end: int
    token_id: int


@dataclass(frozen=True)
class PerturbResult:
    text: str
    changed: bool
    inserted_positions: Tuple[int, ...] = ()

    def restore(self) -> str:
        """The original text: this text with the inserted characters removed."""
        inserted = set(self.inserted_positions)
        return "".join(ch for i, ch in enumerate(self.text) if i not in inserted)


def find_blocked(text: str, vocab: Vocabulary, bl: Blocklist) -> List[BlockedSpan]:
    """Byte spans of every blocked token in the encoding of `text`, in order."""
    spans = []
    offset = 0
    for token_id in vocab.encode(text):
        length = len(vocab.get(token_id).raw)
        if token_id in bl:
            spans.append(BlockedSpan(offset, offset + length, token_id))
        offset += length
    return spans


def _char_starts(text: str) -> List[int]:
    starts = []
    offset = 0
    for ch in text:
        starts.append(offset)
        offset += len(ch.encode("utf-8"))
    return starts


def perturb(text: str, vocab: Vocabulary, bl: Blocklist, max_passes: int = MAX_PASSES) -> PerturbResult:
    """
    Insert a space before every blocked span until no blocked id remains.

    A span that starts inside a multi-byte character gets its space before that
    character. Spans at the very start of the text get a leading space too.

    Raises:
        GuardUnresolvableError: Blocked ids remain after `max_passes` passes
    """
    chars = list(text)
    inserted = [False] * len(chars)

    for _ in range(max_passes):
        current = "".join(chars)
        hits = find_blocked(current, vocab, bl)
        if not hits:
            break

        starts = _char_starts(current)
        positions = sorted({bisect_right(starts, hit.start) - 1 for hit in hits}, reverse=True)
        for position in positions:
            chars.insert(position, " ")
            inserted.insert(position, True)
        logger.debug(f"Guard pass inserted {len(positions)} spaces for ids {sorted({h.token_id for h in hits})}")

    result = "".join(chars)
    surviving = find_blocked(result, vocab, bl)
    if surviving:
        raise GuardUnresolvableError(span.token_id for span in surviving)

    positions = tuple(i for i, flag in enumerate(inserted) if flag)
    return PerturbResult(text=result, changed=bool(positions), inserted_positions=positions)
