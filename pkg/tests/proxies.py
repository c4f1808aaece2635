"""Stand-in datasets for checks whose real data is not shipped with the repo."""

import os
from pathlib import Path

import numpy as np

from lkdist.core import Dataset, load_dataset

OLDENBURG_ENV = "LKDIST_OLDENBURG"
_CANDIDATES = ("tests/data/OL.cnode", "data/OL.cnode")


def oldenburg_path():
    """Location of the Oldenburg road-network node file, or None."""
    env = os.environ.get(OLDENBURG_ENV)
    if env:
        return Path(env) if Path(env).exists() else None
    root = Path(__file__).resolve().parent.parent
    for rel in _CANDIDATES:
        if (root / rel).exists():
            return root / rel
    return None


def load_oldenburg():
    path = oldenburg_path()
    return None if path is None else load_dataset(path, "nodes")


def road_network(n=6105, seed=0):
    """Synthetic road-network-like node set: dense towns joined by roads.

    Nodes cluster around town centres and are strung along straight roads
    between random town pairs, on a 10,000 x 10,000 extent rounded to 0.01.
    """
    rng = np.random.default_rng(seed)
    towns = rng.uniform(0, 10_000, size=(25, 2))
    parts = [c + rng.normal(0, rng.uniform(80, 300), size=(rng.integers(60, 200), 2)) for c in towns]
    count = sum(len(p) for p in parts)
    while count < n:
        a, b = towns[rng.integers(25)], towns[rng.integers(25)]
        length = np.linalg.norm(b - a)
        if length < 1:
            continue
        t = np.sort(rng.random(int(length / rng.uniform(40, 150)) + 2))
        parts.append(a + t[:, None] * (b - a) + rng.normal(0, 5, size=(len(t), 2)))
        count += len(t)
    pts = np.unique(np.round(np.vstack(parts), 2), axis=0)
    pts = pts[rng.permutation(len(pts))[:n]]
    return Dataset(pts)
