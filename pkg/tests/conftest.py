import numpy as np
import pytest

from ecola.data import AlignedSample, Quadruple
from ecola.encoder import TextEncoder
from ecola.tkge import TKGEModel

N_SUBWORDS = 30


def make_samples(n=6, ne=7, npred=3, nt=4, seed=0, min_len=1, max_len=6):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        q = Quadruple(int(rng.integers(ne)), int(rng.integers(npred)),
                      int(rng.integers(ne)), int(rng.integers(nt)))
        k = int(rng.integers(min_len, max_len + 1))
        out.append(AlignedSample(q, tuple(int(x) for x in rng.integers(5, N_SUBWORDS, size=k))))
    return out


def make_encoder(kind="de", dim=8, layers=1, heads=2, ne=7, npred=3, nt=4, seed=0,
                 dropout=0.0, scale=1.0):
    tk = TKGEModel(kind, ne, npred, nt, dim=dim, seed=seed, init_scale=scale)
    return TextEncoder(tk, N_SUBWORDS, max_len=16, layers=layers, heads=heads,
                       dropout=dropout, seed=seed + 1)


@pytest.fixture
def samples():
    return make_samples()


@pytest.fixture
def encoder():
    return make_encoder()
