"""Quadruple and aligned-text datasets.

File formats
------------
Quadruple file: ``subject<TAB>predicate<TAB>object<TAB>timestamp`` per line,
timestamp either an ISO date or a non-negative integer.

Aligned-text file: JSON lines with string fields ``subject, predicate,
object, timestamp, text``.

Documents file (input to distant pairing): JSON lines with ``key`` and
``text``; ``key`` is matched against the quadruple timestamp label.
"""
from __future__ import annotations

import datetime as _dt
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .vocab import INVERSE_SUFFIX, IdSpace, Vocabulary, tokenize

logger = logging.getLogger(__name__)

DEFAULT_MAX_TOKENS = 64


class Quadruple(NamedTuple):
    subject: int
    predicate: int
    object: int
    timestamp: int


@dataclass(frozen=True)
class AlignedSample:
    quad: Quadruple
    tokens: tuple[int, ...]
    text: str = ""

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("aligned sample needs a non-empty token sequence")


@dataclass
class DatasetSplit:
    vocab: Vocabulary
    train: np.ndarray
    valid: np.ndarray = field(default_factory=lambda: np.zeros((0, 4), dtype=np.int64))
    test: np.ndarray = field(default_factory=lambda: np.zeros((0, 4), dtype=np.int64))
    aligned: list[AlignedSample] = field(default_factory=list)
    test_aligned: list[AlignedSample] = field(default_factory=list)

    def all_quadruples(self) -> np.ndarray:
        return np.concatenate([self.train, self.valid, self.test]).astype(np.int64)


class DataFormatError(ValueError):
    pass


# --------------------------------------------------------------------------
# timestamps

def _timestamp_key(raw: str, where: str):
    if raw.isdigit():
        return (0, int(raw))
    try:
        return (1, _dt.date.fromisoformat(raw).toordinal())
    except ValueError:
        pass
    try:
        return (1, _dt.datetime.fromisoformat(raw).timestamp() / 86400.0)
    except ValueError:
        raise DataFormatError(f"{where}: unknown timestamp format {raw!r}") from None


def index_timestamps(raw_labels: Iterable[str], where: str = "timestamps") -> IdSpace:
    """Dense indices in chronological order."""
    keys = {lab: _timestamp_key(lab, where) for lab in raw_labels}
    kinds = {k[0] for k in keys.values()}
    if len(kinds) > 1:
        raise DataFormatError(f"{where}: mixed integer and ISO-date timestamps")
    return IdSpace(sorted(keys, key=lambda lab: keys[lab]))


# --------------------------------------------------------------------------
# quadruples

def read_quadruple_file(path: str | Path) -> list[tuple[str, str, str, str]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4 or not all(p.strip() for p in parts):
                raise DataFormatError(f"{path}:{lineno}: expected 4 tab-separated "
                                      f"fields, got {len(parts)}")
            _timestamp_key(parts[3].strip(), f"{path}:{lineno}")
            rows.append(tuple(p.strip() for p in parts))
    return rows


def index_quadruples(rows: Sequence[tuple[str, str, str, str]], vocab: Vocabulary
                     ) -> np.ndarray:
    """Assign entity/predicate ids in first-appearance order (extending
    ``vocab``). Timestamps must already be indexed."""
    out = np.zeros((len(rows), 4), dtype=np.int64)
    for i, (s, p, o, t) in enumerate(rows):
        ts = vocab.timestamps.get(t)
        if ts is None:
            raise DataFormatError(f"timestamp {t!r} not in the vocabulary")
        out[i] = (vocab.entities.add(s), vocab.predicates.add(p),
                  vocab.entities.add(o), ts)
    return out


def load_quadruples(path: str | Path, vocab: Vocabulary | None = None
                    ) -> tuple[np.ndarray, Vocabulary]:
    """Load one quadruple file into an ``(n, 4)`` id array."""
    rows = read_quadruple_file(path)
    if vocab is None:
        vocab = Vocabulary(timestamps=index_timestamps((r[3] for r in rows), str(path)))
    quads = index_quadruples(rows, vocab)
    logger.info("%s: %d quadruples, %d entities, %d predicates, %d timestamps",
                path, len(quads), vocab.n_entities, vocab.n_predicates,
                vocab.n_timestamps)
    return quads, vocab


def load_dataset(train: str | Path, valid: str | Path | None = None,
                 test: str | Path | None = None) -> DatasetSplit:
    """Load train/valid/test into a shared vocabulary."""
    raw = {name: read_quadruple_file(p) if p else []
           for name, p in (("train", train), ("valid", valid), ("test", test))}
    ts = index_timestamps((r[3] for rows in raw.values() for r in rows), str(train))
    vocab = Vocabulary(timestamps=ts)
    arrays = {name: index_quadruples(rows, vocab) for name, rows in raw.items()}
    return DatasetSplit(vocab, arrays["train"], arrays["valid"], arrays["test"])


def save_quadruples(path: str | Path, quads: np.ndarray, vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s, p, o, t in np.asarray(quads, dtype=np.int64):
            fh.write(f"{vocab.entities.label(s)}\t{vocab.predicates.label(p)}\t"
                     f"{vocab.entities.label(o)}\t{vocab.timestamps.label(t)}\n")


def add_reciprocals(quads: np.ndarray, vocab: Vocabulary) -> np.ndarray:
    """Append ``(o, p^-1, s, t)`` for each ``(s, p, o, t)``.

    Inverse predicate ids are ``p + n_predicates``; the predicate space of
    ``vocab`` is doubled in place.
    """
    if vocab.reciprocal:
        raise ValueError("vocabulary already augmented with reciprocal predicates")
    n_pred = vocab.n_predicates
    for lab in vocab.predicates.labels:
        vocab.predicates.add(lab + INVERSE_SUFFIX)
    vocab.reciprocal = True
    quads = np.asarray(quads, dtype=np.int64).reshape(-1, 4)
    inv = quads[:, [2, 1, 0, 3]].copy()
    inv[:, 1] += n_pred
    return np.concatenate([quads, inv])


# --------------------------------------------------------------------------
# aligned text

def load_aligned(path: str | Path, vocab: Vocabulary, max_tokens: int = DEFAULT_MAX_TOKENS
                 ) -> list[AlignedSample]:
    """Read aligned JSON lines; ids resolve through ``vocab`` (subwords must
    already be built). Records with unknown ids or empty token sequences
    are skipped."""
    records = read_aligned_records(path)
    out = []
    skipped = 0
    for rec in records:
        try:
            q = Quadruple(vocab.entities.id(rec["subject"]), vocab.predicates.id(rec["predicate"]),
                          vocab.entities.id(rec["object"]), vocab.timestamps.id(rec["timestamp"]))
        except KeyError:
            skipped += 1
            continue
        toks = tuple(tokenize(rec["text"], vocab.subwords)[:max_tokens])
        if not toks:
            skipped += 1
            continue
        out.append(AlignedSample(q, toks, rec["text"]))
    if skipped:
        logger.warning("%s: skipped %d aligned records", path, skipped)
    return out


_ALIGNED_FIELDS = ("subject", "predicate", "object", "timestamp", "text")


def read_aligned_records(path: str | Path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataFormatError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
            missing = [f for f in _ALIGNED_FIELDS if not isinstance(rec.get(f), str)]
            if missing:
                raise DataFormatError(f"{path}:{lineno}: missing string fields {missing}")
            records.append(rec)
    return records


def write_aligned_records(path: str | Path, records: Iterable[Mapping]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps({f: rec[f] for f in _ALIGNED_FIELDS}, ensure_ascii=False))
            fh.write("\n")
            n += 1
    return n


# --------------------------------------------------------------------------
# distant supervision

_SENTENCE_RE = re.compile(r"(?<=[.!?])\s+")


def split_sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENTENCE_RE.split(text) if s.strip()]


def surface_form(label: str) -> str:
    return label.replace("_", " ").strip()


def _mention_pattern(form: str) -> re.Pattern:
    return re.compile(r"(?<!\w)" + re.escape(form) + r"(?!\w)", re.IGNORECASE)


@dataclass
class PairingStats:
    quadruples: int = 0
    matched_quadruples: int = 0
    skipped_quadruples: int = 0
    samples: int = 0


def match_sentences(quads: np.ndarray, documents: Sequence[Mapping], vocab: Vocabulary,
                    surface_forms: Mapping[str, str] | None = None
                    ) -> tuple[list[tuple[int, str]], PairingStats]:
    """Pair quadruples with every sentence that mentions both entities.

    A document pairs only with quadruples whose timestamp label equals its
    ``key``. Mentions are case-insensitive whole-word matches of the entity
    surface form (``surface_forms`` lookup, else the label with underscores
    as spaces). Returns ``(quad_row, sentence)`` pairs in document order.
    """
    quads = np.asarray(quads, dtype=np.int64).reshape(-1, 4)
    stats = PairingStats(quadruples=len(quads))
    patterns: dict[int, re.Pattern | None] = {}

    def pattern(ent: int):
        if ent not in patterns:
            lab = vocab.entities.label(ent)
            if surface_forms is None:
                form = surface_form(lab)
            else:
                form = surface_forms.get(lab, "")
            patterns[ent] = _mention_pattern(form) if form else None
        return patterns[ent]

    by_key: dict[str, list[int]] = {}
    for row, (s, _, o, t) in enumerate(quads):
        if pattern(s) is None or pattern(o) is None:
            stats.skipped_quadruples += 1
            continue
        by_key.setdefault(vocab.timestamps.label(t), []).append(row)
    if stats.skipped_quadruples:
        logger.warning("%d quadruples skipped: missing entity surface form",
                       stats.skipped_quadruples)

    pairs: list[tuple[int, str]] = []
    matched = set()
    for doc in documents:
        rows = by_key.get(str(doc.get("key")), [])
        if not rows:
            continue
        for sent in split_sentences(doc.get("text", "")):
            for row in rows:
                s, _, o, _ = quads[row]
                if pattern(s).search(sent) and pattern(o).search(sent):
                    pairs.append((row, sent))
                    matched.add(row)
    stats.matched_quadruples = len(matched)
    stats.samples = len(pairs)
    return pairs, stats


def pair_distant(quads: np.ndarray, documents: Sequence[Mapping], vocab: Vocabulary,
                 surface_forms: Mapping[str, str] | None = None,
                 max_tokens: int = DEFAULT_MAX_TOKENS) -> list[AlignedSample]:
    """Distant-supervision pairing into tokenized aligned samples."""
    pairs, _ = match_sentences(quads, documents, vocab, surface_forms)
    out = []
    for row, sent in pairs:
        toks = tuple(tokenize(sent, vocab.subwords)[:max_tokens])
        if toks:
            out.append(AlignedSample(Quadruple(*map(int, quads[row])), toks, sent))
    return out


def read_documents(path: str | Path) -> list[dict]:
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataFormatError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
            if not isinstance(rec, dict) or not isinstance(rec.get("text"), str):
                raise DataFormatError(f"{path}:{lineno}: document needs a string 'text'")
            docs.append(rec)
    return docs


def build_wiki_description_sample(quad: Quadruple, subj_description: str, pred_label: str,
                                  obj_description: str, subwords: IdSpace,
                                  max_tokens: int = DEFAULT_MAX_TOKENS) -> AlignedSample:
    """Subject description, predicate label and object description
    concatenated into one token sequence."""
    for name, txt in (("subject", subj_description), ("predicate", pred_label),
                      ("object", obj_description)):
        if not txt or not txt.strip():
            raise ValueError(f"empty {name} description")
    toks = (tokenize(subj_description, subwords) + tokenize(pred_label, subwords)
            + tokenize(obj_description, subwords))
    text = f"{subj_description} {pred_label} {obj_description}"
    return AlignedSample(Quadruple(*quad), tuple(toks[:max_tokens]), text)
