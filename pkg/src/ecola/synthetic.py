"""Small generated corpora with known structure, for experiments and tests.

``memorization_corpus``
    random facts whose texts name both entities and the predicate with
    unique words; a held-out split is described the same way.

``alias_corpus``
    every "concept" has two entity ids. The ``main`` id carries most facts,
    the ``alias`` id a few. Texts never use entity-specific names, only the
    concept word, so text is the only evidence that the two ids co-refer.
    Test queries are alias-id facts whose main-id twin is in training.
"""
from __future__ import annotations

import string

import numpy as np

from .data import AlignedSample, DatasetSplit, Quadruple
from .vocab import IdSpace, Vocabulary, build_subword_vocab, tokenize


def _words(rng: np.random.Generator, n: int, length: int = 6) -> list[str]:
    letters = np.array(list(string.ascii_lowercase))
    seen: set[str] = set()
    out = []
    while len(out) < n:
        w = "".join(rng.choice(letters, size=length))
        if w not in seen:
            seen.add(w)
            out.append(w)
    return out


def _finish(vocab: Vocabulary, train: np.ndarray, test: np.ndarray,
            train_texts: list[str], test_texts: list[str], max_size: int) -> DatasetSplit:
    vocab.subwords = build_subword_vocab(train_texts + test_texts, max_size)
    tok = lambda q, txt: AlignedSample(Quadruple(*map(int, q)),  # noqa: E731
                                       tuple(tokenize(txt, vocab.subwords)), txt)
    return DatasetSplit(vocab, train, np.zeros((0, 4), dtype=np.int64), test,
                        aligned=[tok(q, x) for q, x in zip(train, train_texts)],
                        test_aligned=[tok(q, x) for q, x in zip(test, test_texts)])


def memorization_corpus(n_train: int = 300, n_test: int = 60, n_entities: int = 50,
                        n_predicates: int = 6, n_timestamps: int = 12, seed: int = 0,
                        max_subwords: int = 400) -> DatasetSplit:
    rng = np.random.default_rng(seed)
    names = _words(rng, n_entities + n_predicates)
    ent_names, pred_names = names[:n_entities], names[n_entities:]
    facts: set[tuple] = set()
    while len(facts) < n_train + n_test:
        s, o = rng.choice(n_entities, size=2, replace=False)
        facts.add((int(s), int(rng.integers(n_predicates)), int(o),
                   int(rng.integers(n_timestamps))))
    quads = np.array(sorted(facts), dtype=np.int64)
    quads = quads[rng.permutation(len(quads))]
    train, test = quads[:n_train], quads[n_train:]
    vocab = Vocabulary(entities=IdSpace(f"E{i}" for i in range(n_entities)),
                       predicates=IdSpace(f"P{i}" for i in range(n_predicates)),
                       timestamps=IdSpace(str(i) for i in range(n_timestamps)))
    text = lambda q: f"{ent_names[q[0]]} {pred_names[q[1]]} {ent_names[q[2]]}"  # noqa: E731
    return _finish(vocab, train, test, [text(q) for q in train], [text(q) for q in test],
                   max_subwords)


def alias_corpus(n_concepts: int = 20, n_predicates: int = 8, n_timestamps: int = 20,
                 facts_per_concept: int = 10, alias_train: int = 2, alias_test: int = 3,
                 reveal_time: bool = False, seed: int = 0, max_subwords: int = 400
                 ) -> DatasetSplit:
    """``2 * n_concepts`` entities: ids ``0..C-1`` are main ids, ``C..2C-1``
    their aliases. With ``reveal_time`` every text also names the timestamp."""
    rng = np.random.default_rng(seed)
    C = n_concepts
    words = _words(rng, C + n_predicates + n_timestamps)
    concept_w = words[:C]
    pred_w = words[C:C + n_predicates]
    time_w = words[C + n_predicates:]

    concept_facts: list[tuple[int, int, int, int]] = []
    seen = set()
    for c in range(C):
        k = 0
        while k < facts_per_concept:
            o = int(rng.integers(C))
            f = (c, int(rng.integers(n_predicates)), o, int(rng.integers(n_timestamps)))
            if o == c or f in seen:
                continue
            seen.add(f)
            concept_facts.append(f)
            k += 1

    train, test = [], []
    for c in range(C):
        own = [f for f in concept_facts if f[0] == c]
        idx = rng.permutation(len(own))
        alias_tr = set(idx[:alias_train].tolist())
        alias_te = set(idx[alias_train:alias_train + alias_test].tolist())
        for j, (s, p, o, t) in enumerate(own):
            train.append((s, p, o, t))
            if j in alias_tr:
                train.append((s + C, p, o, t))
            elif j in alias_te:
                test.append((s + C, p, o, t))
    train_arr = np.array(train, dtype=np.int64)
    test_arr = np.array(test, dtype=np.int64)

    def text(q):
        s, p, o, t = q
        body = f"{concept_w[s % C]} {pred_w[p]} {concept_w[o % C]}"
        return f"{body} {time_w[t]}" if reveal_time else body

    vocab = Vocabulary(
        entities=IdSpace([f"C{i}" for i in range(C)] + [f"C{i}_alias" for i in range(C)]),
        predicates=IdSpace(f"P{i}" for i in range(n_predicates)),
        timestamps=IdSpace(str(i) for i in range(n_timestamps)))
    return _finish(vocab, train_arr, test_arr, [text(q) for q in train_arr],
                   [text(q) for q in test_arr], max_subwords)
