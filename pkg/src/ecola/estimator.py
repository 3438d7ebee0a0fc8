"""scikit-learn style wrapper around training and ranking.

``X`` is always an integer array of ``(subject, predicate, object, time)``
rows using dense ids. Texts, when given to :meth:`ECOLAEstimator.fit`, align
one-to-one with the rows of ``X`` and switch on joint training.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import AlignedSample, Quadruple
from .evaluator import evaluate
from .trainer import TrainConfig, train_joint, train_tke_only
from .vocab import build_subword_vocab, tokenize


def check_quadruples(X, n_entities: int | None = None, n_predicates: int | None = None,
                     n_timestamps: int | None = None) -> np.ndarray:
    """Validate and return ``X`` as an ``(n, 4)`` int64 array."""
    arr = np.asarray(X)
    if arr.ndim == 1 and arr.size == 4:
        arr = arr.reshape(1, 4)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"expected an (n, 4) array of quadruples, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError("no quadruples given")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.isfinite(arr)) or np.any(arr != np.round(arr)):
            raise ValueError("quadruple ids must be integers")
    arr = arr.astype(np.int64)
    if arr.min() < 0:
        raise ValueError("quadruple ids must be non-negative")
    for col, bound, what in ((0, n_entities, "subject"), (2, n_entities, "object"),
                             (1, n_predicates, "predicate"), (3, n_timestamps, "time")):
        if bound is not None and arr[:, col].max() >= bound:
            raise ValueError(f"{what} id {arr[:, col].max()} outside the fitted range [0, {bound})")
    return arr


def check_texts(texts, n: int) -> list[str]:
    if isinstance(texts, str):
        raise TypeError("texts must be a sequence of strings, one per quadruple")
    texts = list(texts)
    if len(texts) != n:
        raise ValueError(f"{len(texts)} texts for {n} quadruples")
    for i, t in enumerate(texts):
        if not isinstance(t, str) or not t.strip():
            raise ValueError(f"text {i} is empty or not a string")
    return texts


class ECOLAEstimator(BaseEstimator):
    """Temporal KG embedding, optionally enhanced by aligned texts.

    Parameters mirror :class:`~ecola.trainer.TrainConfig`; ``n_entities``,
    ``n_predicates`` and ``n_timestamps`` default to ``max id + 1`` of the
    training data.
    """

    def __init__(self, kind="de", dim=64, gamma=0.5, layers=2, heads=2, lam=0.3, negatives=16,
                 lr=1e-3, batch_size=32, epochs=200, seed=0, masking="e_or_r_plus_w",
                 mask_time=False, warmup=0.05, weight_decay=0.0, precision="float32",
                 dropout=0.1, init_scale=0.1, max_subwords=2000, max_len=64,
                 n_entities=None, n_predicates=None, n_timestamps=None):
        self.kind = kind
        self.dim = dim
        self.gamma = gamma
        self.layers = layers
        self.heads = heads
        self.lam = lam
        self.negatives = negatives
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.masking = masking
        self.mask_time = mask_time
        self.warmup = warmup
        self.weight_decay = weight_decay
        self.precision = precision
        self.dropout = dropout
        self.init_scale = init_scale
        self.max_subwords = max_subwords
        self.max_len = max_len
        self.n_entities = n_entities
        self.n_predicates = n_predicates
        self.n_timestamps = n_timestamps

    def _config(self) -> TrainConfig:
        names = TrainConfig().to_dict().keys()
        return TrainConfig(**{k: v for k, v in self.get_params().items() if k in names})

    def fit(self, X, y=None, texts: Sequence[str] | None = None):
        """Train on quadruples ``X``; with ``texts`` the joint objective is used."""
        X = check_quadruples(X)
        ne = self.n_entities or int(max(X[:, 0].max(), X[:, 2].max()) + 1)
        npred = self.n_predicates or int(X[:, 1].max() + 1)
        nt = self.n_timestamps or int(X[:, 3].max() + 1)
        check_quadruples(X, ne, npred, nt)
        config = self._config()
        if texts is None:
            res = train_tke_only(config, X, ne, npred, nt)
            self.subwords_ = None
        else:
            texts = check_texts(texts, len(X))
            self.subwords_ = build_subword_vocab(texts, self.max_subwords)
            aligned = [AlignedSample(Quadruple(*map(int, q)), tuple(tokenize(t, self.subwords_)), t)
                       for q, t in zip(X, texts)]
            res = train_joint(config, aligned, ne, npred, nt, len(self.subwords_))
        self.model_ = res.tkge
        self.encoder_ = res.encoder
        self.log_ = res.log
        self.n_entities_, self.n_predicates_, self.n_timestamps_ = ne, npred, nt
        self.train_quadruples_ = X
        return self

    def _checked(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return check_quadruples(X, self.n_entities_, self.n_predicates_, self.n_timestamps_)

    def decision_function(self, X) -> np.ndarray:
        """Plausibility score of each quadruple."""
        return self.model_.score_numpy(self._checked(X))

    def predict(self, X) -> np.ndarray:
        """Best-scoring object for each ``(s, p, ?, t)`` query; column 2 of ``X`` is ignored."""
        X = self._checked(X)
        E = self.n_entities_
        cands = np.repeat(X, E, axis=0)
        cands[:, 2] = np.tile(np.arange(E), len(X))
        return self.model_.score_numpy(cands).reshape(len(X), E).argmax(axis=1)

    def score(self, X, y=None) -> float:
        """Time-aware filtered MRR on ``X`` (filtering with the training facts too)."""
        X = self._checked(X)
        known = np.concatenate([self.train_quadruples_, X])
        return evaluate(self.model_, X, known).mrr
