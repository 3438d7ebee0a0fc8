"""Knowledge-text prediction: masking, the masked-token loss and the joint
objective ``L_tke + lambda * L_ktp``."""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import numerics as nx
from .encoder import (HEADS, POS_OBJ, POS_PRED, POS_SEP, POS_SUBJ, POS_TIME, InputSequence,
                      TextEncoder, build_input, collate)
from .numerics import Tensor
from .tkge import negative_sample, tke_loss_from_negatives
from .vocab import MASK_ID, SPECIAL_TOKENS

logger = logging.getLogger(__name__)

MASK_PROB = 0.15
REPLACE_MASK, REPLACE_RANDOM, REPLACE_KEEP = 0, 1, 2
N_SPECIAL = len(SPECIAL_TOKENS)


class MaskingStrategy(str, enum.Enum):
    E_R_W_JOINT = "e_r_w_joint"        # entities, predicate, subwords independently
    E_OR_R_PLUS_W = "e_or_r_plus_w"    # exactly one knowledge token plus subwords
    E_OR_R_OR_W = "e_or_r_or_w"        # one category per sample

    @classmethod
    def parse(cls, value) -> "MaskingStrategy":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower().replace("+", "_plus_").replace("/", "_or_"))
        except ValueError:
            raise ValueError(f"unknown masking strategy {value!r}; choose from "
                             f"{[s.value for s in cls]}") from None


@dataclass
class SpaceSizes:
    subwords: int
    entities: int
    predicates: int
    timestamps: int

    @classmethod
    def of(cls, encoder: TextEncoder) -> "SpaceSizes":
        t = encoder.tkge
        return cls(encoder.n_subwords, t.n_entities, t.n_predicates, t.n_timestamps)


class Label(NamedTuple):
    position: int
    original: int
    head: str


@dataclass
class MaskedSample:
    seq: InputSequence
    labels: list[Label] = field(default_factory=list)
    replacements: list[int] = field(default_factory=list)


_SLOT_HEAD = {POS_SUBJ: "entity", POS_PRED: "predicate", POS_OBJ: "entity", POS_TIME: "time"}


def _random_other(rng: np.random.Generator, low: int, high: int, original: int) -> int | None:
    """Uniform id in ``[low, high)`` other than ``original``; None if none exists."""
    n = high - low - (1 if low <= original < high else 0)
    if n <= 0:
        return None
    r = low + int(rng.integers(0, n))
    if low <= original <= r:
        r += 1
    return r


def mask_sample(seq: InputSequence, strategy, rng: np.random.Generator, sizes: SpaceSizes,
                mask_time: bool = False) -> MaskedSample:
    """Choose positions to predict and apply the 80/10/10 replacement rule."""
    strategy = MaskingStrategy.parse(strategy)
    n = len(seq)
    text_pos = np.arange(POS_SEP + 1, n - 1)  # between the two SEPs
    chosen: list[int] = []
    sub_draw = rng.random(len(text_pos))
    if strategy is MaskingStrategy.E_R_W_JOINT:
        knowledge = rng.random(3) < MASK_PROB
        chosen += [p for p, m in zip((POS_SUBJ, POS_PRED, POS_OBJ), knowledge) if m]
        chosen += text_pos[sub_draw < MASK_PROB].tolist()
    elif strategy is MaskingStrategy.E_OR_R_PLUS_W:
        chosen.append((POS_SUBJ, POS_PRED, POS_OBJ)[int(rng.integers(0, 3))])
        chosen += text_pos[sub_draw < MASK_PROB].tolist()
    else:
        category = int(rng.integers(0, 3))
        if category == 0:
            chosen += text_pos[sub_draw < MASK_PROB].tolist()
        elif category == 1:
            chosen.append((POS_SUBJ, POS_OBJ)[int(rng.integers(0, 2))])
        else:
            chosen.append(POS_PRED)
    # the time decision is drawn even when unused, and last, so toggling
    # mask_time leaves every other masking decision unchanged
    time_draws = rng.random(2)
    if mask_time and time_draws[0] < MASK_PROB:
        chosen.append(POS_TIME)

    out = MaskedSample(seq.copy())
    s = out.seq
    for pos in sorted(chosen, key=lambda q: (q == POS_TIME, q)):
        head = _SLOT_HEAD.get(pos, "subword")
        orig = int(s.token_ids[pos])
        u = time_draws[1] if pos == POS_TIME else rng.random()
        if u < 0.8:
            kind = REPLACE_MASK
            if head == "subword":
                s.token_ids[pos] = MASK_ID
            else:
                s.is_mask[pos] = True
        elif u < 0.9:
            kind = REPLACE_RANDOM
            low, high = {"subword": (N_SPECIAL, sizes.subwords),
                         "entity": (0, sizes.entities),
                         "predicate": (0, sizes.predicates),
                         "time": (0, sizes.timestamps)}[head]
            new = _random_other(rng, low, high, orig)
            if new is None:
                kind = REPLACE_KEEP
            else:
                s.token_ids[pos] = new
        else:
            kind = REPLACE_KEEP
        out.labels.append(Label(pos, orig, head))
        out.replacements.append(kind)
    return out


_EMPTY_WARNINGS = {"count": 0}


def empty_ktp_batches() -> int:
    """How many KTP batches so far had nothing masked (and contributed 0)."""
    return _EMPTY_WARNINGS["count"]


def ktp_loss(masked: Sequence[MaskedSample], encoder: TextEncoder,
             dropout_rng: np.random.Generator | None = None) -> Tensor:
    """Mean cross-entropy over every masked position of the batch, each
    scored by the head of its token space."""
    n_labels = sum(len(m.labels) for m in masked)
    if n_labels == 0:
        _EMPTY_WARNINGS["count"] += 1
        logger.warning("KTP batch without masked positions contributes 0")
        return Tensor(np.zeros((), dtype=encoder.dtype))
    batch = collate([m.seq for m in masked])
    states = encoder.encode(batch, dropout_rng)
    losses = []
    for head in HEADS:
        rows, cols, labels = [], [], []
        for i, m in enumerate(masked):
            for lab in m.labels:
                if lab.head == head:
                    rows.append(i)
                    cols.append(lab.position)
                    labels.append(lab.original)
        if rows:
            logits = encoder.head_logits(states, batch, rows, cols, head)
            losses.append(nx.log_softmax_xent(logits, np.array(labels)))
    return nx.mean(losses[0] if len(losses) == 1 else nx.concat(losses, axis=0))


# --------------------------------------------------------------------------
# joint objective

@dataclass
class BatchPlan:
    """Everything random about one training step, fixed up front."""
    positives: np.ndarray               # (B, 4)
    negatives: np.ndarray               # (B * M, 4)
    masked: list[MaskedSample] = field(default_factory=list)


class JointTerms(NamedTuple):
    total: Tensor
    tke: Tensor
    ktp: Tensor


def sample_rngs(seed: int, epoch: int, index: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent (negatives, masking) generators for one sample."""
    ss = np.random.SeedSequence((seed, epoch, index))
    a, b = ss.spawn(2)
    return np.random.default_rng(a), np.random.default_rng(b)


def joint_objective(encoder: TextEncoder, plan: BatchPlan, lam: float,
                    dropout_rng: np.random.Generator | None = None) -> JointTerms:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    tke = tke_loss_from_negatives(encoder.tkge, plan.positives, plan.negatives)
    ktp = ktp_loss(plan.masked, encoder, dropout_rng) if plan.masked else \
        Tensor(np.zeros((), dtype=encoder.dtype))
    return JointTerms(nx.add(tke, nx.scale(ktp, lam)), tke, ktp)


def plan_joint_batch(samples, encoder: TextEncoder, M: int, strategy, seed: int, epoch: int,
                     indices: Sequence[int], mask_time: bool = False) -> BatchPlan:
    """Negatives and masks for aligned samples, one derived seed per sample."""
    sizes = SpaceSizes.of(encoder)
    pos, negs, masked = [], [], []
    for s, idx in zip(samples, indices):
        neg_rng, mask_rng = sample_rngs(seed, epoch, idx)
        pos.append(s.quad)
        if M:
            negs.append(negative_sample(s.quad, M, neg_rng, encoder.tkge.n_entities))
        seq = build_input(s, encoder.max_len)
        masked.append(mask_sample(seq, strategy, mask_rng, sizes, mask_time))
    negatives = np.concatenate(negs) if negs else np.zeros((0, 4), dtype=np.int64)
    return BatchPlan(np.array(pos, dtype=np.int64).reshape(-1, 4), negatives, masked)


def joint_loss(encoder: TextEncoder, samples, lam: float, M: int, seed: int = 0,
               strategy=MaskingStrategy.E_OR_R_PLUS_W, mask_time: bool = False
               ) -> tuple[JointTerms, dict[str, np.ndarray]]:
    """Joint loss on a batch of aligned samples and its gradient by name."""
    plan = plan_joint_batch(samples, encoder, M, strategy, seed, 0, range(len(samples)),
                            mask_time)
    params = {**encoder.tkge.params, **encoder.params}
    with nx.Tape() as tape:
        terms = joint_objective(encoder, plan, lam)
    grads = tape.backward(terms.total, params.values())
    return terms, {name: grads[t] for name, t in params.items()}
