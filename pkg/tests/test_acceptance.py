"""End-to-end acceptance checks.

Each test prints one ``CRITERION n: PASS|FAIL`` line with the measured
numbers and then asserts. Run alone with ``pytest tests/test_acceptance.py -v``;
the training-based checks take several minutes in total.
"""
import time

import numpy as np
import pytest

from conftest import N_SUBWORDS
from oracles import brute_ranks, metrics
from ecola import numerics as nx
from ecola.data import AlignedSample, Quadruple
from ecola.encoder import POS_OBJ, POS_PRED, POS_SUBJ, TextEncoder, build_input
from ecola.evaluator import evaluate, evaluate_with_text
from ecola.ktp import (REPLACE_KEEP, REPLACE_MASK, REPLACE_RANDOM, SpaceSizes, joint_objective,
                       mask_sample, plan_joint_batch)
from ecola.synthetic import alias_corpus, memorization_corpus
from ecola.tkge import TKGEModel, negative_batch, tke_loss_from_negatives
from ecola.trainer import StopTraining, TrainConfig, train_joint, train_tke_only

KINDS = ("dyernie", "de", "utee", "sf")
SEEDS = (0, 1, 2)


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return emit


# -- 1 ---------------------------------------------------------------------------

def _joint_case(kind, seed):
    rng = np.random.default_rng(seed)
    tk = TKGEModel(kind, 5, 3, 4, dim=16, seed=seed, init_scale=4.0)
    enc = TextEncoder(tk, N_SUBWORDS, max_len=16, layers=1, heads=2, dropout=0.0, seed=seed)
    samples = [AlignedSample(Quadruple(int(rng.integers(5)), int(rng.integers(3)),
                                       int(rng.integers(5)), int(rng.integers(4))),
                             tuple(int(x) for x in rng.integers(5, N_SUBWORDS, size=3)))
               for _ in range(3)]
    plan = plan_joint_batch(samples, enc, 2, "e_or_r_plus_w", seed, 0, range(3))
    params = list(tk.params.values()) + list(enc.params.values())
    return (lambda: joint_objective(enc, plan, 0.3).total), params


def test_criterion_1_gradient_suite(report):
    start = time.perf_counter()
    errs = {}
    for kind in KINDS:
        tk = TKGEModel(kind, 5, 3, 4, dim=16, seed=1, init_scale=4.0)
        rng = np.random.default_rng(0)
        for t in tk.params.values():   # non-zero everywhere so no term is trivially flat
            t.data[...] = rng.normal(size=t.shape) * 0.5
        pos = np.array([[0, 0, 1, 0], [2, 1, 3, 2], [4, 2, 0, 3]])
        negs = negative_batch(pos, 3, [np.random.default_rng(i) for i in range(3)], 5)
        errs[f"tke/{kind}"] = nx.grad_check(lambda: tke_loss_from_negatives(tk, pos, negs),
                                            list(tk.params.values()))
        f, params = _joint_case(kind, 3)
        errs[f"joint/{kind}"] = nx.grad_check(f, params, max_coords=150,
                                              rng=np.random.default_rng(1))
    elapsed = time.perf_counter() - start
    worst = max(errs.values())
    ok = worst < 1e-4 and elapsed < 60
    report(1, ok, f"max rel err {worst:.2e} over {len(errs)} checks, {elapsed:.1f}s")
    assert ok, errs


# -- 2 ---------------------------------------------------------------------------

def test_criterion_2_ranking_oracle(report):
    mismatches, worst = 0, 0.0
    for i in range(50):
        rng = np.random.default_rng(100 + i)
        E = int(rng.integers(2, 21))
        n = int(rng.integers(1, 16))
        m = TKGEModel(KINDS[i % 4], E, 3, 4, dim=8, seed=i, init_scale=3.0)
        quads = np.column_stack([rng.integers(0, E, n), rng.integers(0, 3, n),
                                 rng.integers(0, E, n), rng.integers(0, 4, n)])
        known = np.concatenate([quads, np.column_stack([
            rng.integers(0, E, 20), rng.integers(0, 3, 20),
            rng.integers(0, E, 20), rng.integers(0, 4, 20)])])
        for setting, filt in (("raw", None), ("filtered", known)):
            got = evaluate(m, quads, known, setting=setting)
            ref = brute_ranks(m, quads, filt)
            mismatches += got.ranks != ref
            d = got.to_dict()
            worst = max([worst] + [abs(d[k] - v) for k, v in metrics(ref).items()])
    ok = mismatches == 0 and worst <= 1e-12
    report(2, ok, f"50 instances x raw/filtered: {mismatches} rank mismatches, "
                  f"max metric diff {worst:.1e}")
    assert ok


# -- 3 ---------------------------------------------------------------------------

def test_criterion_3_degeneracies(report):
    rng = np.random.default_rng(0)
    ents = np.arange(6)
    checks = {}

    de = TKGEModel("de", 6, 2, 5, dim=8, gamma=1.0, seed=0, init_scale=5.0)
    ref = de.embed(ents, np.zeros(6, int)).data.tobytes()
    checks["de gamma=1 time-invariant"] = all(
        de.embed(ents, np.full(6, t)).data.tobytes() == ref for t in range(5))

    ut = TKGEModel("utee", 6, 2, 5, dim=8, seed=0, init_scale=5.0)
    checks["utee shared temporal slice"] = all(
        np.all(e[:, ut.gd:] == e[0, ut.gd:])
        for e in (ut.embed(ents, np.full(6, t)).data for t in range(5)))

    dy = TKGEModel("dyernie", 6, 2, 5, dim=8, seed=0, init_scale=5.0)
    ref = dy.embed(ents, np.zeros(6, int)).data.tobytes()
    checks["dyernie v=0 time-invariant"] = all(
        dy.embed(ents, np.full(6, t)).data.tobytes() == ref for t in range(5))

    for t in dy.params.values():
        t.data[...] = 0.0
    pos = np.column_stack([rng.integers(0, 6, 8), rng.integers(0, 2, 8),
                           rng.integers(0, 6, 8), rng.integers(0, 5, 8)])
    negs = negative_batch(pos, 1, [np.random.default_rng(i) for i in range(8)], 6)
    loss = tke_loss_from_negatives(dy, pos, negs).item()
    checks["zero dyernie loss = ln 2"] = abs(loss - np.log(2)) <= 1e-12

    ok = all(checks.values())
    report(3, ok, "; ".join(f"{k}: {'ok' if v else 'no'}" for k, v in checks.items()))
    assert ok


# -- 4 ---------------------------------------------------------------------------

def test_criterion_4_masking_statistics(report):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    sizes = SpaceSizes(400, 50, 6, 12)
    seqs = []
    for i in range(64):
        k = int(rng.integers(1, 30))
        q = Quadruple(int(rng.integers(50)), int(rng.integers(6)), int(rng.integers(50)),
                      int(rng.integers(12)))
        seqs.append(build_input(AlignedSample(q, tuple(int(x) for x in
                                                       rng.integers(5, 400, size=k)))))
    n = 200_000
    gen = np.random.default_rng(2024)
    n_text = n_sub = 0
    kinds = np.zeros(3, dtype=np.int64)
    both = 0
    for i in range(n):
        seq = seqs[i % len(seqs)]
        m = mask_sample(seq, "e_or_r_plus_w", gen, sizes)
        n_text += len(seq) - 7
        pos = {lab.position for lab in m.labels}
        n_sub += sum(lab.head == "subword" for lab in m.labels)
        both += bool(pos & {POS_SUBJ, POS_OBJ}) and POS_PRED in pos
        for r in m.replacements:
            kinds[r] += 1
    mixed = 0
    gen = np.random.default_rng(2025)
    for i in range(n):
        m = mask_sample(seqs[i % len(seqs)], "e_or_r_or_w", gen, sizes)
        heads = {lab.head for lab in m.labels}
        mixed += len(heads) > 1 or (heads == {"entity"} and len(m.labels) > 1)
    elapsed = time.perf_counter() - start
    rate = n_sub / n_text
    frac = kinds / kinds.sum()
    ok = (abs(rate - 0.15) <= 0.005
          and abs(frac[REPLACE_MASK] - 0.8) <= 0.01
          and abs(frac[REPLACE_RANDOM] - 0.1) <= 0.01
          and abs(frac[REPLACE_KEEP] - 0.1) <= 0.01
          and both == 0 and mixed == 0 and elapsed < 120)
    report(4, ok, f"subword rate {rate:.4f}, mask/random/keep "
                  f"{frac[0]:.4f}/{frac[1]:.4f}/{frac[2]:.4f}, E+R together {both}, "
                  f"E/R/W mixed {mixed}, {elapsed:.0f}s")
    assert ok


# -- 5, 7, 9 -----------------------------------------------------------------------

MEMO_CONFIG = dict(kind="de", dim=64, layers=2, lr=1e-2, epochs=500, eval_every=25,
                   patience=100)


def _memorize(workers):
    ds = memorization_corpus(seed=0)
    v = ds.vocab
    known = ds.all_quadruples()
    trace = []

    def stop_when_memorized(tk):
        mrr = evaluate(tk, ds.train, known).mrr
        trace.append(mrr)
        if mrr >= 0.95:
            raise StopTraining
        return mrr

    start = time.perf_counter()
    res = train_joint(TrainConfig(workers=workers, **MEMO_CONFIG), ds.aligned, v.n_entities,
                      v.n_predicates, v.n_timestamps, v.n_subwords,
                      validate=stop_when_memorized)
    return ds, res, trace, time.perf_counter() - start


@pytest.fixture(scope="module")
def memorized():
    return _memorize(1)


def test_criterion_5_memorization(memorized, report):
    ds, res, trace, elapsed = memorized
    final = evaluate(res.tkge, ds.train, ds.all_quadruples()).mrr
    ok = final >= 0.95 and res.final.epoch <= 500 and elapsed < 600
    report(5, ok, f"train MRR {final:.4f} after {res.final.epoch} epochs, {elapsed:.0f}s")
    assert ok


def test_criterion_7_inference_with_text(memorized, report):
    ds, res, _, _ = memorized
    known = ds.all_quadruples()
    emb = evaluate(res.tkge, ds.test, known).mrr
    txt = evaluate_with_text(res.encoder, ds.test_aligned, known).mrr
    # test texts name both entities, so text must be strictly better
    ok = txt > emb
    report(7, ok, f"test MRR with text {txt:.4f} vs embedding only {emb:.4f}")
    assert ok


def test_criterion_9_reproducibility(memorized, report, tmp_path):
    _, first, _, _ = memorized
    _, second, _, _ = _memorize(4)
    a, b = tmp_path / "w1.ckpt", tmp_path / "w4.ckpt"
    first.final.save(a)
    second.final.save(b)
    ok = a.read_bytes() == b.read_bytes() and first.final.config.precision == "float32"
    report(9, ok, f"workers=1 vs workers=4 final checkpoints "
                  f"{'byte-identical' if ok else 'differ'} ({a.stat().st_size} bytes)")
    assert ok


# -- 6, 8 --------------------------------------------------------------------------

ALIAS_CONFIG = dict(kind="utee", dim=32, lr=1e-2, init_scale=8.0, epochs=200, lam=0.3)


def _alias_mrr(seed, joint, reveal_time=False, mask_time=False):
    ds = alias_corpus(seed=seed, reveal_time=reveal_time)
    v = ds.vocab
    cfg = TrainConfig(seed=seed, mask_time=mask_time, **ALIAS_CONFIG)
    if joint:
        res = train_joint(cfg, ds.aligned, v.n_entities, v.n_predicates, v.n_timestamps,
                          v.n_subwords)
    else:
        res = train_tke_only(cfg, ds.train, v.n_entities, v.n_predicates, v.n_timestamps)
    return evaluate(res.tkge, ds.test, ds.all_quadruples()).mrr


def test_criterion_6_enhancement_direction(report):
    start = time.perf_counter()
    gains = []
    for s in SEEDS:
        base, ecola = _alias_mrr(s, False), _alias_mrr(s, True)
        gains.append(100 * (ecola - base))
    elapsed = time.perf_counter() - start
    med = float(np.median(gains))
    ok = med >= 5.0 and elapsed < 1800
    report(6, ok, f"ECOLA-UTEE minus UTEE test MRR per seed "
                  f"{', '.join(f'{g:+.1f}' for g in gains)} pts, median {med:+.1f} "
                  f"(need >= +5.0), {elapsed:.0f}s")
    assert ok


def test_criterion_8_time_masking(report):
    diffs = []
    for s in SEEDS:
        off = _alias_mrr(s, True, reveal_time=True, mask_time=False)
        on = _alias_mrr(s, True, reveal_time=True, mask_time=True)
        diffs.append(100 * (on - off))
    med = float(np.median(diffs))
    ok = med >= -1.0
    report(8, ok, f"tECOLA minus ECOLA test MRR per seed "
                  f"{', '.join(f'{d:+.1f}' for d in diffs)} pts, median {med:+.1f} "
                  f"(need >= -1.0)")
    assert ok
