"""Masked transformer encoder over packed knowledge + text sequences.

Layout of one sequence (positions are fixed for the knowledge segment)::

    [CLS] e_s p e_o tau [SEP] w_1 ... w_n [SEP]

Entity and predicate positions read their vectors from the
:class:`~ecola.tkge.TKGEModel` tables (time-dependent for every kind except
``sf``), so gradients of the text objective land in the same parameters the
scorer uses.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .data import AlignedSample
from .numerics import Tensor
from .tkge import TKGEModel
from .vocab import CLS_ID, MASK_ID, PAD_ID, SEP_ID

TYPE_SUBWORD, TYPE_ENTITY, TYPE_PREDICATE, TYPE_TIME = 0, 1, 2, 3
N_TYPES = 4
POS_CLS, POS_SUBJ, POS_PRED, POS_OBJ, POS_TIME, POS_SEP = range(6)
KNOWLEDGE_POSITIONS = (POS_SUBJ, POS_PRED, POS_OBJ, POS_TIME)
SLOT_COPY = {POS_SUBJ: None, POS_OBJ: None}   # SimplE copy per entity slot; None = mean
N_FIXED = 7  # CLS, four knowledge tokens, two SEP

HEADS = ("entity", "predicate", "subword", "time")
HEAD_TYPE = {"subword": TYPE_SUBWORD, "entity": TYPE_ENTITY,
             "predicate": TYPE_PREDICATE, "time": TYPE_TIME}


@dataclass
class InputSequence:
    token_ids: np.ndarray   # ids in the space given by type_ids
    type_ids: np.ndarray
    position_ids: np.ndarray
    attention: np.ndarray   # 1 = real token
    timestamp: int          # time index the entity vectors are evaluated at
    is_mask: np.ndarray     # knowledge slot replaced by the [MASK] embedding

    def __len__(self) -> int:
        return len(self.token_ids)

    def copy(self) -> "InputSequence":
        return InputSequence(self.token_ids.copy(), self.type_ids.copy(),
                             self.position_ids.copy(), self.attention.copy(),
                             self.timestamp, self.is_mask.copy())


def build_input(sample: AlignedSample, max_len: int = 64) -> InputSequence:
    """Pack a quadruple and its subwords; text beyond ``max_len - 7`` is cut."""
    if max_len <= N_FIXED:
        raise ValueError(f"max_len must exceed {N_FIXED}")
    s, p, o, t = sample.quad
    words = list(sample.tokens[:max_len - N_FIXED])
    ids = [CLS_ID, s, p, o, t, SEP_ID] + words + [SEP_ID]
    types = [TYPE_SUBWORD, TYPE_ENTITY, TYPE_PREDICATE, TYPE_ENTITY, TYPE_TIME,
             TYPE_SUBWORD] + [TYPE_SUBWORD] * (len(words) + 1)
    n = len(ids)
    return InputSequence(np.array(ids, dtype=np.int64), np.array(types, dtype=np.int64),
                         np.arange(n, dtype=np.int64), np.ones(n, dtype=np.int64),
                         int(t), np.zeros(n, dtype=bool))


@dataclass
class InputBatch:
    token_ids: np.ndarray     # (B, T)
    type_ids: np.ndarray
    position_ids: np.ndarray
    attention: np.ndarray
    timestamps: np.ndarray    # (B,)
    is_mask: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.token_ids.shape


def collate(seqs: list[InputSequence]) -> InputBatch:
    """Right-pad to the longest sequence with [PAD] subwords, attention 0."""
    B, T = len(seqs), max(len(s) for s in seqs)
    tok = np.full((B, T), PAD_ID, dtype=np.int64)
    typ = np.zeros((B, T), dtype=np.int64)
    pos = np.tile(np.arange(T, dtype=np.int64), (B, 1))
    att = np.zeros((B, T), dtype=np.int64)
    msk = np.zeros((B, T), dtype=bool)
    for i, s in enumerate(seqs):
        n = len(s)
        tok[i, :n], typ[i, :n], pos[i, :n] = s.token_ids, s.type_ids, s.position_ids
        att[i, :n], msk[i, :n] = s.attention, s.is_mask
    return InputBatch(tok, typ, pos, att, np.array([s.timestamp for s in seqs]), msk)


class TextEncoder:
    """Pre-norm transformer with type and learned absolute position
    embeddings. Parameters are named ``enc.*``; entity and predicate vectors
    are borrowed from ``tkge``.
    """

    def __init__(self, tkge: TKGEModel, n_subwords: int, max_len: int = 64, layers: int = 2,
                 heads: int = 2, ff_mult: int = 4, dropout: float = 0.1, seed: int = 0,
                 dtype=None):
        d = tkge.dim
        if layers < 1 or heads < 1 or d % heads:
            raise ValueError(f"need layers >= 1 and heads dividing dim ({d}/{heads})")
        self.tkge = tkge
        self.dim, self.layers, self.heads = d, layers, heads
        self.max_len, self.dropout = max_len, dropout
        self.n_subwords = n_subwords
        self.dtype = np.dtype(dtype if dtype is not None else tkge.dtype)
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}

        def normal(name, shape, std=0.02):
            self._add(name, rng.normal(0.0, std, size=shape))

        def const(name, shape, value=0.0):
            self._add(name, np.full(shape, value))

        normal("subword", (n_subwords, d))
        normal("time", (tkge.n_timestamps, d))
        normal("type", (N_TYPES, d))
        normal("pos", (max_len, d))
        ff = ff_mult * d
        for i in range(layers):
            pre = f"l{i}."
            const(pre + "ln1_g", (d,), 1.0)
            const(pre + "ln1_b", (d,))
            for w in ("q", "k", "v", "o"):
                normal(pre + "w" + w, (d, d))
                const(pre + "b" + w, (d,))
            const(pre + "ln2_g", (d,), 1.0)
            const(pre + "ln2_b", (d,))
            normal(pre + "w1", (d, ff))
            const(pre + "b1", (ff,))
            normal(pre + "w2", (ff, d))
            const(pre + "b2", (d,))
        const("lnf_g", (d,), 1.0)
        const("lnf_b", (d,))
        normal("head_w", (d, d))
        const("head_b", (d,))
        const("head_ln_g", (d,), 1.0)
        const("head_ln_b", (d,))
        const("bias_entity", (tkge.n_entities,))
        const("bias_predicate", (tkge.n_predicates,))
        const("bias_subword", (n_subwords,))
        const("bias_time", (tkge.n_timestamps,))

    def _add(self, name: str, data: np.ndarray) -> None:
        full = "enc." + name
        self.params[full] = Tensor(data.astype(self.dtype), requires_grad=True, name=full)

    def p(self, name: str) -> Tensor:
        return self.params["enc." + name]

    # ------------------------------------------------------------------

    def embed_inputs(self, batch: InputBatch) -> Tensor:
        """Token + type + position embeddings, ``(B, T, d)``."""
        B, T = batch.shape
        d = self.dim
        if T > self.max_len:
            raise ValueError(f"sequence length {T} exceeds max_len {self.max_len}")
        tok, typ = batch.token_ids, batch.type_ids
        sub_ids = np.where(typ == TYPE_SUBWORD, tok, PAD_ID)
        sub_keep = np.broadcast_to((typ == TYPE_SUBWORD)[..., None], (B, T, d)).astype(self.dtype)
        sub = nx.mul(nx.gather(self.p("subword"), sub_ids), sub_keep)
        mask_vec = nx.gather(self.p("subword"), np.array(MASK_ID))

        ts = batch.timestamps
        slots = {
            POS_SUBJ: self.tkge.injected(tok[:, POS_SUBJ], ts, SLOT_COPY[POS_SUBJ]),
            POS_PRED: nx.gather(self.tkge.predicate_table(), tok[:, POS_PRED]),
            POS_OBJ: self.tkge.injected(tok[:, POS_OBJ], ts, SLOT_COPY[POS_OBJ]),
            POS_TIME: nx.gather(self.p("time"), tok[:, POS_TIME]),
        }
        pieces = [nx.take(sub, 0, POS_SUBJ, axis=1)]
        for pos in KNOWLEDGE_POSITIONS:
            vec = slots[pos]
            m = batch.is_mask[:, pos]
            if m.any():
                mm = np.broadcast_to(m[:, None], (B, d)).astype(self.dtype)
                vec = nx.add(nx.mul(vec, 1.0 - mm), nx.mul(mm, mask_vec))
            pieces.append(nx.reshape(vec, (B, 1, d)))
        pieces.append(nx.take(sub, POS_SEP, T, axis=1))
        x = nx.concat(pieces, axis=1)
        x = nx.add(x, nx.gather(self.p("type"), typ))
        return nx.add(x, nx.gather(self.p("pos"), batch.position_ids))

    def _dropout(self, x: Tensor, rng: np.random.Generator | None) -> Tensor:
        if rng is None or self.dropout <= 0:
            return x
        keep = (rng.random(x.shape) >= self.dropout).astype(self.dtype) / (1.0 - self.dropout)
        return nx.mul(x, keep)

    def encode(self, batch: InputBatch, rng: np.random.Generator | None = None) -> Tensor:
        """Contextual states ``(B, T, d)``. Dropout only when ``rng`` is given."""
        B, T = batch.shape
        d, H = self.dim, self.heads
        dh = d // H
        key_mask = (batch.attention > 0)[:, None, None, :]
        x = self._dropout(self.embed_inputs(batch), rng)
        inv_sqrt = 1.0 / math.sqrt(dh)
        for i in range(self.layers):
            pre = f"l{i}."
            h = nx.layer_norm(x, self.p(pre + "ln1_g"), self.p(pre + "ln1_b"))

            def split(w):
                y = nx.add(nx.matmul(h, self.p(pre + "w" + w)), self.p(pre + "b" + w))
                return nx.transpose(nx.reshape(y, (B, T, H, dh)), (0, 2, 1, 3))

            q, k, v = split("q"), split("k"), split("v")
            att = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), inv_sqrt)
            att = self._dropout(nx.softmax(att, key_mask), rng)
            ctx = nx.reshape(nx.transpose(nx.matmul(att, v), (0, 2, 1, 3)), (B, T, d))
            out = nx.add(nx.matmul(ctx, self.p(pre + "wo")), self.p(pre + "bo"))
            x = nx.add(x, self._dropout(out, rng))
            h = nx.layer_norm(x, self.p(pre + "ln2_g"), self.p(pre + "ln2_b"))
            f = nx.gelu(nx.add(nx.matmul(h, self.p(pre + "w1")), self.p(pre + "b1")))
            f = nx.add(nx.matmul(f, self.p(pre + "w2")), self.p(pre + "b2"))
            x = nx.add(x, self._dropout(f, rng))
        return nx.layer_norm(x, self.p("lnf_g"), self.p("lnf_b"))

    def _entity_logits(self, z: Tensor, timestamps: np.ndarray, cols: np.ndarray) -> Tensor:
        # each slot is scored against its own copy of the entity table
        E, d = self.tkge.n_entities, self.dim
        parts, order = [], []
        for pos in (POS_SUBJ, POS_OBJ):
            idx = np.flatnonzero(cols == pos)
            if not idx.size:
                continue
            ents = self.tkge.embed_all(timestamps[idx], SLOT_COPY[pos])   # (k, E, d)
            zz = nx.reshape(nx.gather(z, idx), (idx.size, 1, d))
            parts.append(nx.reshape(nx.matmul(zz, nx.transpose(ents, (0, 2, 1))), (idx.size, E)))
            order.append(idx)
        if len(parts) == 1:
            return parts[0]
        inverse = np.argsort(np.concatenate(order), kind="stable")
        return nx.gather(nx.concat(parts, axis=0), inverse)

    def head_logits(self, states: Tensor, batch: InputBatch, rows, cols, head: str) -> Tensor:
        """Logits ``(k, |space|)`` for positions ``(rows[i], cols[i])``.

        Output weights are tied to the input tables; entity logits are
        computed against every entity's vector at the sample's timestamp.
        """
        if head not in HEAD_TYPE:
            raise ValueError(f"unknown head {head!r}")
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        B, T = batch.shape
        if rows.size and (cols.min() < 0 or cols.max() >= T or rows.min() < 0
                          or rows.max() >= B):
            raise IndexError("head position outside the batch")
        if np.any(batch.type_ids[rows, cols] != HEAD_TYPE[head]):
            raise ValueError(f"{head} head applied to a position of another token type")
        d = self.dim
        z = nx.gather(nx.reshape(states, (B * T, d)), rows * T + cols)
        z = nx.gelu(nx.add(nx.matmul(z, self.p("head_w")), self.p("head_b")))
        z = nx.layer_norm(z, self.p("head_ln_g"), self.p("head_ln_b"))
        if head == "entity":
            if self.tkge.kind.value == "sf":
                table = nx.transpose(self.tkge.p("ent"), (1, 0))
                logits = nx.matmul(z, table)
            else:
                logits = self._entity_logits(z, batch.timestamps[rows], cols)
        else:
            table = {"predicate": self.tkge.predicate_table(), "subword": self.p("subword"),
                     "time": self.p("time")}[head]
            logits = nx.matmul(z, nx.transpose(table, (1, 0)))
        return nx.add(logits, self.p("bias_" + head))
