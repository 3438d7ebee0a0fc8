"""Link-prediction ranking and metrics.

Each test quadruple yields two queries, ``(s, p, ?, t)`` and ``(?, p, o, t)``.
Ranks use the mean-tie convention ``1 + #greater + #ties / 2`` so that a
constant scorer gets ``(E + 1) / 2``. The filtered setting drops candidates
whose completed quadruple (same timestamp) is a known fact.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .data import AlignedSample
from .encoder import POS_OBJ, POS_SUBJ, build_input, collate
from .tkge import TKGEModel

HITS_AT = (1, 3, 10)


class Direction(str, enum.Enum):
    OBJECT = "replace-object"
    SUBJECT = "replace-subject"


@dataclass(frozen=True)
class Query:
    direction: Direction
    quad: tuple[int, int, int, int]

    @property
    def answer(self) -> int:
        return self.quad[2] if self.direction is Direction.OBJECT else self.quad[0]

    def candidates(self, n_entities: int) -> np.ndarray:
        """All ``n_entities`` completions, one quadruple per candidate."""
        q = np.tile(np.asarray(self.quad, dtype=np.int64), (n_entities, 1))
        q[:, 2 if self.direction is Direction.OBJECT else 0] = np.arange(n_entities)
        return q


def queries_for(quads: np.ndarray) -> list[Query]:
    out = []
    for q in np.asarray(quads, dtype=np.int64).reshape(-1, 4):
        t = tuple(int(x) for x in q)
        out += [Query(Direction.OBJECT, t), Query(Direction.SUBJECT, t)]
    return out


class FilterIndex:
    """Known answers per query key, time-aware by default."""

    def __init__(self, quads: np.ndarray | None = None, time_aware: bool = True):
        self.time_aware = time_aware
        self._obj: dict[tuple, set[int]] = {}
        self._subj: dict[tuple, set[int]] = {}
        if quads is not None:
            self.add(quads)

    def add(self, quads: np.ndarray) -> None:
        for s, p, o, t in np.asarray(quads, dtype=np.int64).reshape(-1, 4):
            tk = int(t) if self.time_aware else None
            self._obj.setdefault((int(s), int(p), tk), set()).add(int(o))
            self._subj.setdefault((int(p), int(o), tk), set()).add(int(s))

    def known(self, query: Query) -> set[int]:
        s, p, o, t = query.quad
        tk = t if self.time_aware else None
        if query.direction is Direction.OBJECT:
            return self._obj.get((s, p, tk), set())
        return self._subj.get((p, o, tk), set())


def rank_from_scores(scores: np.ndarray, answer: int, exclude: Iterable[int] = ()) -> float:
    """Mean-tie rank of ``answer``; ``exclude`` ids (other than the answer)
    are removed from the candidate set first."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 <= answer < len(scores):
        raise IndexError(f"ground truth {answer} outside the entity vocabulary")
    keep = np.ones(len(scores), dtype=bool)
    ex = [e for e in exclude if e != answer]
    if ex:
        keep[ex] = False
    target = scores[answer]
    others = scores[keep]
    greater = int(np.sum(others > target))
    ties = int(np.sum(others == target)) - 1  # the answer ties with itself
    return 1.0 + greater + ties / 2.0


def rank_query(model: TKGEModel, query: Query, filter_index: FilterIndex | None = None
               ) -> float:
    if not 0 <= query.answer < model.n_entities:
        raise IndexError(f"ground truth {query.answer} outside the entity vocabulary")
    scores = model.score_numpy(query.candidates(model.n_entities))
    exclude = filter_index.known(query) if filter_index is not None else ()
    return rank_from_scores(scores, query.answer, exclude)


@dataclass
class RankingReport:
    setting: str
    ranks: list[float] = field(default_factory=list)

    @property
    def n_queries(self) -> int:
        return len(self.ranks)

    @property
    def mrr(self) -> float:
        return float(np.mean(1.0 / np.asarray(self.ranks))) if self.ranks else 0.0

    def hits(self, k: int) -> float:
        return float(np.mean(np.asarray(self.ranks) <= k)) if self.ranks else 0.0

    def to_dict(self) -> dict:
        return {"setting": self.setting, "mrr": self.mrr, "hits1": self.hits(1),
                "hits3": self.hits(3), "hits10": self.hits(10), "n_queries": self.n_queries}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False)

    def to_table(self) -> str:
        d = self.to_dict()
        head = f"{'setting':<10}{'MRR':>10}{'Hits@1':>10}{'Hits@3':>10}{'Hits@10':>10}{'queries':>10}"
        row = (f"{d['setting']:<10}{d['mrr']:>10.4f}{d['hits1']:>10.4f}{d['hits3']:>10.4f}"
               f"{d['hits10']:>10.4f}{d['n_queries']:>10d}")
        return head + "\n" + row


def _batched_scores(model: TKGEModel, queries: Sequence[Query], chunk: int = 256
                    ) -> np.ndarray:
    E = model.n_entities
    out = np.empty((len(queries), E))
    for i in range(0, len(queries), chunk):
        part = queries[i:i + chunk]
        cands = np.concatenate([q.candidates(E) for q in part])
        out[i:i + len(part)] = model.score_numpy(cands).reshape(len(part), E)
    return out


def evaluate(model: TKGEModel, test: np.ndarray, filter_quads: np.ndarray | None = None,
             setting: str = "filtered", time_aware: bool = True) -> RankingReport:
    """Rank every test quadruple in both directions.

    ``setting`` is ``"raw"`` or ``"filtered"``; filtering uses
    ``filter_quads`` (normally train + valid + test).
    """
    if setting not in ("raw", "filtered"):
        raise ValueError("setting must be 'raw' or 'filtered'")
    test = np.asarray(test, dtype=np.int64).reshape(-1, 4)
    if len(test) == 0:
        raise ValueError("empty test split")
    fidx = None
    if setting == "filtered":
        fidx = FilterIndex(filter_quads if filter_quads is not None else test, time_aware)
    queries = queries_for(test)
    scores = _batched_scores(model, queries)
    report = RankingReport(setting)
    for q, sc in zip(queries, scores):
        report.ranks.append(rank_from_scores(sc, q.answer, fidx.known(q) if fidx else ()))
    return report


def evaluate_both(model: TKGEModel, test: np.ndarray, filter_quads: np.ndarray,
                  time_aware: bool = True) -> tuple[RankingReport, RankingReport]:
    """Raw and filtered reports sharing one scoring pass."""
    test = np.asarray(test, dtype=np.int64).reshape(-1, 4)
    queries = queries_for(test)
    scores = _batched_scores(model, queries)
    fidx = FilterIndex(filter_quads, time_aware)
    raw, filt = RankingReport("raw"), RankingReport("filtered")
    for q, sc in zip(queries, scores):
        raw.ranks.append(rank_from_scores(sc, q.answer))
        filt.ranks.append(rank_from_scores(sc, q.answer, fidx.known(q)))
    return raw, filt


# --------------------------------------------------------------------------
# inference with text

def text_entity_logits(encoder, sample: AlignedSample, direction: Direction) -> np.ndarray:
    """Entity-head logits at the queried slot with that slot set to [MASK]."""
    seq = build_input(sample, encoder.max_len)
    pos = POS_OBJ if direction is Direction.OBJECT else POS_SUBJ
    seq.is_mask[pos] = True
    batch = collate([seq])
    states = encoder.encode(batch)
    logits = encoder.head_logits(states, batch, [0], [pos], "entity")
    return logits.data[0].astype(np.float64)


def predict_with_text(encoder, sample: AlignedSample, direction: Direction,
                      filter_index: FilterIndex | None = None) -> float:
    """Rank of the ground truth under the KTP entity predictor."""
    if sample is None or not sample.tokens:
        raise ValueError("predict_with_text needs a textual description")
    q = Query(Direction(direction), tuple(int(x) for x in sample.quad))
    logits = text_entity_logits(encoder, sample, q.direction)
    exclude = filter_index.known(q) if filter_index is not None else ()
    return rank_from_scores(logits, q.answer, exclude)


def evaluate_with_text(encoder, samples: Sequence[AlignedSample],
                       filter_quads: np.ndarray | None = None, setting: str = "filtered",
                       time_aware: bool = True) -> RankingReport:
    if setting not in ("raw", "filtered"):
        raise ValueError("setting must be 'raw' or 'filtered'")
    if not samples:
        raise ValueError("no aligned test samples")
    fidx = None
    if setting == "filtered":
        fq = filter_quads if filter_quads is not None else np.array([s.quad for s in samples])
        fidx = FilterIndex(fq, time_aware)
    report = RankingReport(setting)
    for s in samples:
        for d in (Direction.OBJECT, Direction.SUBJECT):
            report.ranks.append(predict_with_text(encoder, s, d, fidx))
    return report
