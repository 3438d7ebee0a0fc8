"""Id spaces for subwords, entities, predicates and timestamps, plus the
greedy longest-match subword tokenizer."""
from __future__ import annotations

import re
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
CONTINUATION = "##"
INVERSE_SUFFIX = "^-1"
SECTION_SENTINEL = "#---"

MAX_PIECE_LEN = 8
MIN_PIECE_COUNT = 2


class IdSpace:
    """Dense bijection between labels and ``0..n-1`` in insertion order."""

    def __init__(self, labels: Iterable[str] = ()):
        self._labels: list[str] = []
        self._ids: dict[str, int] = {}
        for lab in labels:
            self.add(lab)

    def add(self, label: str) -> int:
        idx = self._ids.get(label)
        if idx is None:
            idx = len(self._labels)
            self._labels.append(label)
            self._ids[label] = idx
        return idx

    def __len__(self) -> int:
        return len(self._labels)

    def __contains__(self, label: str) -> bool:
        return label in self._ids

    def __iter__(self):
        return iter(self._labels)

    def __eq__(self, other) -> bool:
        return isinstance(other, IdSpace) and self._labels == other._labels

    def id(self, label: str) -> int:
        return self._ids[label]

    def get(self, label: str, default=None):
        return self._ids.get(label, default)

    def label(self, idx: int) -> str:
        return self._labels[idx]

    @property
    def labels(self) -> list[str]:
        return list(self._labels)


@dataclass
class Vocabulary:
    subwords: IdSpace = field(default_factory=lambda: IdSpace(SPECIAL_TOKENS))
    entities: IdSpace = field(default_factory=IdSpace)
    predicates: IdSpace = field(default_factory=IdSpace)
    timestamps: IdSpace = field(default_factory=IdSpace)
    reciprocal: bool = False

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_predicates(self) -> int:
        return len(self.predicates)

    @property
    def n_timestamps(self) -> int:
        return len(self.timestamps)

    @property
    def n_subwords(self) -> int:
        return len(self.subwords)

    def save(self, path: str | Path) -> None:
        """One token per line; sections subwords, entities, predicates,
        timestamps separated by the ``#---`` sentinel."""
        sections = [self.subwords, self.entities, self.predicates, self.timestamps]
        lines: list[str] = []
        for i, space in enumerate(sections):
            if i:
                lines.append(SECTION_SENTINEL)
            for lab in space:
                if "\n" in lab or lab == SECTION_SENTINEL:
                    raise ValueError(f"label {lab!r} cannot be stored one-per-line")
                lines.append(lab)
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        sections: list[list[str]] = [[]]
        for line in text.splitlines():
            if line == SECTION_SENTINEL:
                sections.append([])
            else:
                sections[-1].append(line)
        if len(sections) not in (3, 4):
            raise ValueError(f"{path}: expected 3 or 4 sections, found {len(sections)}")
        if tuple(sections[0][:len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError(f"{path}: subword section must start with {SPECIAL_TOKENS}")
        vocab = cls(IdSpace(sections[0]), IdSpace(sections[1]), IdSpace(sections[2]),
                    IdSpace(sections[3] if len(sections) == 4 else ()))
        preds = sections[2]
        half = len(preds) // 2
        vocab.reciprocal = bool(preds) and len(preds) % 2 == 0 and all(
            preds[half + i] == preds[i] + INVERSE_SUFFIX for i in range(half))
        return vocab


# --------------------------------------------------------------------------
# text normalisation

_PUNCT_RE = re.compile(r"(\W)", re.UNICODE)


def basic_split(text: str) -> list[str]:
    """Lowercase, strip accents, split on whitespace and punctuation."""
    text = unicodedata.normalize("NFD", text.lower())
    text = "".join(c for c in text if unicodedata.category(c) != "Mn")
    words: list[str] = []
    for chunk in text.split():
        words.extend(p for p in _PUNCT_RE.split(chunk) if p and not p.isspace())
    return words


def build_subword_vocab(corpus: Sequence[str], max_size: int) -> IdSpace:
    """Frequency-based subword inventory.

    Always holds the special tokens and every character seen (both as a
    word-initial piece and as a ``##`` continuation). Remaining slots up to
    ``max_size`` go to the most frequent substrings of length 2..8 that occur
    at least twice; ties prefer more covered characters, then word-initial
    pieces, then lexical order.
    """
    words = Counter(w for line in corpus for w in basic_split(line))
    if not corpus or not words:
        raise ValueError("cannot build a subword vocabulary from an empty corpus")
    chars = sorted({c for w in words for c in w})
    base = list(SPECIAL_TOKENS) + chars + [CONTINUATION + c for c in chars]
    if max_size < len(base):
        raise ValueError(f"max_size={max_size} is smaller than the {len(base)} "
                         "special and character tokens")
    counts: Counter[str] = Counter()
    for w, n in words.items():
        for i in range(len(w)):
            for j in range(i + 2, min(len(w), i + MAX_PIECE_LEN) + 1):
                counts[w[i:j] if i == 0 else CONTINUATION + w[i:j]] += n
    ranked = sorted((p for p, n in counts.items() if n >= MIN_PIECE_COUNT),
                    key=lambda p: (-counts[p], -len(p.removeprefix(CONTINUATION)),
                                   p.startswith(CONTINUATION), p))
    return IdSpace(base + ranked[:max_size - len(base)])


def tokenize(text: str, subwords: IdSpace) -> list[int]:
    """Greedy longest-match-first. A character no piece covers becomes
    ``[UNK]`` and matching resumes at the next character."""
    longest = max((len(p) for p in subwords), default=1)
    out: list[int] = []
    for word in basic_split(text):
        start = 0
        while start < len(word):
            prefix = CONTINUATION if start > 0 else ""
            piece_id = None
            end = min(len(word), start + longest)
            while end > start:
                piece_id = subwords.get(prefix + word[start:end])
                if piece_id is not None:
                    break
                end -= 1
            if piece_id is None:
                out.append(UNK_ID)
                start += 1
            else:
                out.append(piece_id)
                start = end
    return out
