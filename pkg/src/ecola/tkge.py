"""Time-dependent entity embeddings, quadruple scorers and the BCE objective.

Four embedding functions share one interface:

``dyernie``  initial embedding plus velocity, ``e + v * t``
``de``       diachronic: first ``gamma*d`` dims static amplitudes, the rest
             ``a * sin(w * t + b)`` with entity-specific ``a, w, b``
``utee``     entity-specific static part, temporal part shared by all entities
``sf``       DE whose static part is a projection ``e @ W`` of a static
             vector; only that static vector is exposed to the text encoder

``dyernie`` scores with a negative Euclidean distance plus entity biases;
the other three use the SimplE bilinear form on head/tail entity copies.
Timestamps enter as ``index / max(1, T - 1)``.
"""
from __future__ import annotations

import enum

import numpy as np

from . import numerics as nx
from .numerics import Tensor

LOG_CLAMP = 1e-12


class ModelKind(str, enum.Enum):
    DYERNIE = "dyernie"
    DE = "de"
    UTEE = "utee"
    SF = "sf"

    @classmethod
    def parse(cls, value) -> "ModelKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown model kind {value!r}; choose from "
                             f"{[k.value for k in cls]}") from None


def time_scalar(index, n_timestamps: int) -> np.ndarray:
    return np.asarray(index, dtype=np.float64) / max(1, n_timestamps - 1)


def static_dims(dim: int, gamma: float) -> int:
    if dim <= 0:
        raise ValueError("dim must be positive")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    return int(round(gamma * dim))


class TKGEModel:
    """Parameters and scoring for one temporal embedding function.

    ``params`` maps names to leaf tensors; every name starts with
    ``"tkge."`` so the dict can be merged with encoder parameters.
    """

    def __init__(self, kind, n_entities: int, n_predicates: int, n_timestamps: int,
                 dim: int = 64, gamma: float = 0.5, seed: int = 0, dtype=np.float64,
                 init_scale: float = 0.1):
        self.kind = ModelKind.parse(kind)
        if n_entities < 1 or n_predicates < 1 or n_timestamps < 1:
            raise ValueError("vocabulary sizes must be positive")
        self.n_entities = n_entities
        self.n_predicates = n_predicates
        self.n_timestamps = n_timestamps
        self.dim = dim
        self.gamma = gamma
        self.gd = static_dims(dim, gamma)
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        for name, shape, init in self._layout():
            if init == "uniform":
                bound = init_scale / np.sqrt(dim)
                data = rng.uniform(-bound, bound, size=shape)
            else:
                data = np.zeros(shape)
            self.params["tkge." + name] = Tensor(data.astype(self.dtype),
                                                 requires_grad=True, name="tkge." + name)

    def _layout(self):
        ne, npred, d, gd = self.n_entities, self.n_predicates, self.dim, self.gd
        td = d - gd
        k = self.kind
        if k is ModelKind.DYERNIE:
            return [("ent", (ne, d), "uniform"), ("vel", (ne, d), "zeros"),
                    ("rel_diag", (npred, d), "uniform"), ("rel_vec", (npred, d), "uniform"),
                    ("bias", (ne,), "zeros")]
        rel = [("rel", (npred, d), "uniform"), ("rel_inv", (npred, d), "uniform")]
        if k is ModelKind.DE:
            ent = []
            for c in ("h", "t"):
                ent += [(f"amp_{c}", (ne, d), "uniform"), (f"freq_{c}", (ne, td), "uniform"),
                        (f"phase_{c}", (ne, td), "uniform")]
            return ent + rel
        if k is ModelKind.UTEE:
            return [("ent_h", (ne, gd), "uniform"), ("ent_t", (ne, gd), "uniform"),
                    ("amp", (td,), "uniform"), ("freq", (td,), "uniform"),
                    ("phase", (td,), "uniform")] + rel
        ent = [("ent", (ne, d), "uniform"), ("proj", (d, gd), "uniform")]
        for c in ("h", "t"):
            ent += [(f"amp_{c}", (ne, td), "uniform"), (f"freq_{c}", (ne, td), "uniform"),
                    (f"phase_{c}", (ne, td), "uniform")]
        return ent + rel

    def p(self, name: str) -> Tensor:
        return self.params["tkge." + name]

    def tscalar(self, t_index) -> np.ndarray:
        return time_scalar(t_index, self.n_timestamps)

    # ------------------------------------------------------------------
    # embeddings

    def _check_entities(self, ent: np.ndarray) -> np.ndarray:
        ent = np.asarray(ent, dtype=np.int64)
        if ent.size and (ent.min() < 0 or ent.max() >= self.n_entities):
            raise IndexError(f"entity id out of range [0, {self.n_entities})")
        return ent

    def _sinusoid(self, amp: Tensor, freq: Tensor, phase: Tensor, t: np.ndarray) -> Tensor:
        tt = np.broadcast_to(t.astype(self.dtype)[..., None], freq.shape)
        return nx.mul(amp, nx.sin(nx.add(nx.mul(freq, tt), phase)))

    def embed(self, ent, t_index, copy: str = "h") -> Tensor:
        """Time-dependent embeddings ``(n, d)`` for entity ids and time indices.

        ``copy`` selects the SimplE head (``"h"``) or tail (``"t"``) copy and
        is ignored by ``dyernie``.
        """
        ent = self._check_entities(ent)
        t = np.broadcast_to(self.tscalar(t_index), ent.shape)
        gd = self.gd
        k = self.kind
        if k is ModelKind.DYERNIE:
            tt = np.broadcast_to(t.astype(self.dtype)[..., None], ent.shape + (self.dim,))
            return nx.add(nx.gather(self.p("ent"), ent),
                          nx.mul(nx.gather(self.p("vel"), ent), tt))
        if k is ModelKind.UTEE:
            static = nx.gather(self.p(f"ent_{copy}"), ent)
            td = self.dim - gd
            tt = np.broadcast_to(t.astype(self.dtype)[..., None], ent.shape + (td,))
            temporal = nx.mul(nx.sin(nx.add(nx.mul(self.p("freq"), tt), self.p("phase"))),
                              self.p("amp"))
            return nx.concat([static, temporal], axis=-1)
        freq = nx.gather(self.p(f"freq_{copy}"), ent)
        phase = nx.gather(self.p(f"phase_{copy}"), ent)
        if k is ModelKind.DE:
            amp = nx.gather(self.p(f"amp_{copy}"), ent)
            static = nx.take(amp, 0, gd)
            temporal = self._sinusoid(nx.take(amp, gd, self.dim), freq, phase, t)
        else:
            static = nx.matmul(nx.gather(self.p("ent"), ent), self.p("proj"))
            temporal = self._sinusoid(nx.gather(self.p(f"amp_{copy}"), ent), freq, phase, t)
        return nx.concat([static, temporal], axis=-1)

    def embed_all(self, t_index, copy: str | None = None) -> Tensor:
        """Encoder-facing vectors of every entity at each time: ``(k, n_entities, d)``."""
        t_index = np.asarray(t_index, dtype=np.int64).reshape(-1)
        ent = np.broadcast_to(np.arange(self.n_entities), (len(t_index), self.n_entities))
        tt = np.broadcast_to(t_index[:, None], ent.shape)
        return self.injected(ent, tt, copy)

    def injected(self, ent, t_index, copy: str | None = None) -> Tensor:
        """Entity vectors fed to the text encoder.

        ``dyernie``: the time-dependent embedding; ``sf``: the static vector
        only; ``de``/``utee``: the mean of the head and tail copies, or one
        copy when ``copy`` is ``"h"`` or ``"t"``.
        """
        if self.kind is ModelKind.DYERNIE:
            return self.embed(ent, t_index)
        if self.kind is ModelKind.SF:
            return nx.gather(self.p("ent"), self._check_entities(ent))
        if copy is not None:
            return self.embed(ent, t_index, copy)
        return nx.scale(nx.add(self.embed(ent, t_index, "h"), self.embed(ent, t_index, "t")), 0.5)

    def predicate_table(self) -> Tensor:
        """Predicate vectors shared with the encoder (translation vector for
        ``dyernie``, forward relation vector otherwise)."""
        return self.p("rel_vec") if self.kind is ModelKind.DYERNIE else self.p("rel")

    # ------------------------------------------------------------------
    # scoring

    def score(self, quads) -> Tensor:
        """Plausibility ``(n,)`` of ``(n, 4)`` quadruples; higher is better."""
        q = np.asarray(quads, dtype=np.int64).reshape(-1, 4)
        s, r, o, t = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
        if q.size and (r.min() < 0 or r.max() >= self.n_predicates):
            raise IndexError(f"predicate id out of range [0, {self.n_predicates})")
        if q.size and (t.min() < 0 or t.max() >= self.n_timestamps):
            raise IndexError(f"timestamp out of range [0, {self.n_timestamps})")
        if self.kind is ModelKind.DYERNIE:
            es, eo = self.embed(s, t), self.embed(o, t)
            lhs = nx.mul(nx.gather(self.p("rel_diag"), r), es)
            rhs = nx.add(eo, nx.gather(self.p("rel_vec"), r))
            bias = self.p("bias")
            return nx.add(nx.neg(nx.euclid_dist(lhs, rhs)),
                          nx.add(nx.gather(bias, s), nx.gather(bias, o)))
        fwd = nx.sum(nx.mul(nx.mul(self.embed(s, t, "h"), nx.gather(self.p("rel"), r)),
                            self.embed(o, t, "t")), axis=-1)
        bwd = nx.sum(nx.mul(nx.mul(self.embed(o, t, "h"), nx.gather(self.p("rel_inv"), r)),
                            self.embed(s, t, "t")), axis=-1)
        return nx.scale(nx.add(fwd, bwd), 0.5)

    def score_numpy(self, quads) -> np.ndarray:
        return self.score(quads).data.copy()


# --------------------------------------------------------------------------
# negatives and loss

def negative_sample(quad, M: int, rng: np.random.Generator, n_entities: int) -> np.ndarray:
    """``M`` corruptions of one quadruple; each swaps the subject or the
    object (fair coin) for a different, uniformly drawn entity."""
    if M < 1:
        raise ValueError("M must be at least 1")
    if n_entities < 2:
        raise ValueError("negative sampling needs at least two entities")
    q = np.asarray(quad, dtype=np.int64).reshape(4)
    out = np.tile(q, (M, 1))
    slot = np.where(rng.random(M) < 0.5, 0, 2)
    orig = q[slot]
    draw = rng.integers(0, n_entities - 1, size=M)
    out[np.arange(M), slot] = draw + (draw >= orig)
    return out


def negative_batch(quads: np.ndarray, M: int, rngs, n_entities: int) -> np.ndarray:
    """Negatives for each row with its own generator, stacked row-major."""
    if M == 0:
        return np.zeros((0, 4), dtype=np.int64)
    return np.concatenate([negative_sample(q, M, g, n_entities)
                           for q, g in zip(np.asarray(quads).reshape(-1, 4), rngs)])


def tke_loss_from_negatives(model: TKGEModel, positives: np.ndarray,
                            negatives: np.ndarray) -> Tensor:
    positives = np.asarray(positives, dtype=np.int64).reshape(-1, 4)
    if len(positives) == 0:
        raise ValueError("empty batch")
    negatives = np.asarray(negatives, dtype=np.int64).reshape(-1, 4)
    allq = np.concatenate([positives, negatives])
    y = np.zeros(len(allq))
    y[:len(positives)] = 1.0
    return nx.mean(nx.bce_with_logits(model.score(allq), y, LOG_CLAMP))


def tke_loss(model: TKGEModel, positives, M: int, rng: np.random.Generator) -> Tensor:
    """Mean binary cross-entropy over the positives and ``M`` negatives each."""
    positives = np.asarray(positives, dtype=np.int64).reshape(-1, 4)
    negs = (np.concatenate([negative_sample(q, M, rng, model.n_entities) for q in positives])
            if M > 0 else np.zeros((0, 4), dtype=np.int64))
    return tke_loss_from_negatives(model, positives, negs)
