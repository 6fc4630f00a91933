import csv
import pathlib

import numpy as np
import pytest

from protocloud.graphdata import Dataset
from protocloud.smiles import smiles_to_graph

ROOT = pathlib.Path(__file__).resolve().parents[1]
ESOL_CSV = ROOT / "data" / "esol.csv"


def numeric_grad(f, x, eps=1e-5):
    """Central differences of scalar ``f()`` w.r.t. the array ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        hi = f()
        x[idx] = old - eps
        lo = f()
        x[idx] = old
        g[idx] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12))


def esol_rows():
    with open(ESOL_CSV, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="session")
def esol():
    graphs = []
    for k, row in enumerate(esol_rows()):
        g = smiles_to_graph(row["smiles"], float(row["label"]))
        g.id = str(k)
        graphs.append(g)
    return Dataset(graphs)
