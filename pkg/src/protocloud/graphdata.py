"""Graph datasets: JSONL storage, random splits, batching, label scaling.

One JSON object per line::

    {"id": ..., "nodes": [[f, ...], ...], "edges": [[src, dst, [f, ...]], ...],
     "label": y, "task": "regression" | "classification"}

Edges are stored once per bond and become two directed edges in memory.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, SchemaError
from .graph import MolecularGraph

TASKS = ("regression", "classification")


@dataclass(frozen=True)
class LabelStats:
    mean: float
    std: float

    def destandardize(self, values):
        return np.asarray(values, dtype=np.float64) * self.std + self.mean


@dataclass(frozen=True)
class Dataset:
    graphs: tuple
    task: str = "regression"
    stats: LabelStats | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise SchemaError(f"unknown task {self.task!r}")
        object.__setattr__(self, "graphs", tuple(self.graphs))
        for g in self.graphs:
            if g.label is None:
                continue
            if self.task == "classification" and g.label not in (0.0, 1.0):
                raise SchemaError(f"graph {g.id!r}: classification label must be 0 or 1, got {g.label}")
            if not math.isfinite(g.label):
                raise SchemaError(f"graph {g.id!r}: non-finite label")

    def __len__(self):
        return len(self.graphs)

    def __iter__(self):
        return iter(self.graphs)

    def __getitem__(self, i):
        return self.graphs[i]

    @property
    def labels(self):
        return np.array([g.label for g in self.graphs], dtype=np.float64)

    def subset(self, indices):
        return replace(self, graphs=tuple(self.graphs[i] for i in indices))


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if len(self.fractions) != 3 or any(f <= 0 for f in self.fractions):
            raise ConfigError(f"split fractions must be three positive numbers, got {self.fractions}")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got {sum(self.fractions)}")


def graph_to_record(g, task):
    return {
        "id": g.id,
        "nodes": g.node_features.tolist(),
        "edges": [[src, dst, f.tolist()] for src, dst, f in g.undirected_edges()],
        "label": None if g.label is None else float(g.label),
        "task": task,
    }


def record_to_graph(rec):
    nodes = rec["nodes"]
    edges = rec["edges"]
    node_width = len(nodes[0]) if nodes else 0
    if any(len(row) != node_width for row in nodes):
        raise SchemaError(f"graph {rec.get('id')!r}: ragged node feature rows")
    edge_width = len(edges[0][2]) if edges else 0
    parsed = []
    for e in edges:
        src, dst, f = e
        if len(f) != edge_width:
            raise SchemaError(f"graph {rec.get('id')!r}: ragged edge feature rows")
        if not (0 <= src < len(nodes) and 0 <= dst < len(nodes)) or src == dst:
            raise SchemaError(f"graph {rec.get('id')!r}: bad edge endpoints ({src}, {dst})")
        parsed.append((int(src), int(dst), f))
    label = rec.get("label")
    g = MolecularGraph.from_undirected(
        np.array(nodes, dtype=np.float64).reshape(len(nodes), node_width),
        parsed,
        edge_width,
        label=None if label is None else float(label),
        id=str(rec.get("id", "")),
    )
    return g, edge_width


def save_jsonl(ds, path):
    with open(path, "w", encoding="utf-8") as fh:
        for g in ds.graphs:
            fh.write(json.dumps(graph_to_record(g, ds.task)) + "\n")


def load_jsonl(path, task=None):
    graphs = []
    tasks = set()
    widths = set()
    edge_widths = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            try:
                g, edge_width = record_to_graph(rec)
            except (KeyError, TypeError, ValueError) as exc:
                if isinstance(exc, SchemaError):
                    raise SchemaError(f"{path}:{lineno}: {exc}") from None
                raise SchemaError(f"{path}:{lineno}: malformed graph record ({exc})") from None
            widths.add(g.node_features.shape[1])
            if g.n_edges:
                edge_widths.add(edge_width)
            tasks.add(rec.get("task", task or "regression"))
            graphs.append(g)
    if len(widths) > 1 or len(edge_widths) > 1:
        raise SchemaError(f"{path}: inconsistent feature widths (nodes {sorted(widths)}, edges {sorted(edge_widths)})")
    if len(tasks) > 1:
        raise SchemaError(f"{path}: mixed tasks {sorted(tasks)}")
    if edge_widths:
        width = edge_widths.pop()
        for g in graphs:
            if not g.n_edges:
                g.edge_features = np.zeros((0, width))
    found = tasks.pop() if tasks else (task or "regression")
    return Dataset(graphs, task=task or found)


def split(ds, spec=SplitSpec()):
    """Shuffle by seed and cut into (train, valid, test)."""
    n = len(ds)
    if n == 0:
        raise ConfigError("cannot split an empty dataset")
    perm = np.random.default_rng(spec.seed).permutation(n)
    n_train = math.floor(spec.fractions[0] * n)
    n_valid = math.floor(spec.fractions[1] * n)
    parts = (perm[:n_train], perm[n_train:n_train + n_valid], perm[n_train + n_valid:])
    if any(len(p) == 0 for p in parts):
        raise ConfigError(f"split of {n} graphs leaves an empty part: sizes {[len(p) for p in parts]}")
    return tuple(ds.subset(p.tolist()) for p in parts)


def standardize_labels(train, *others):
    """Scale labels by train mean/std; classification sets pass through."""
    if train.task != "regression":
        return (train, *others), None
    y = train.labels
    mean = float(y.mean())
    std = float(y.std())
    if std < 1e-12:
        raise ConfigError("training labels have zero variance")
    stats = LabelStats(mean, std)

    def scaled(ds):
        graphs = [replace(g, label=(g.label - mean) / std) for g in ds.graphs]
        return Dataset(graphs, task=ds.task, stats=stats)

    return tuple(scaled(ds) for ds in (train, *others)), stats


def batches(ds, batch_size, seed, epoch):
    """Epoch-dependent shuffled batches; the last one may be partial."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    order = np.random.default_rng([seed, epoch]).permutation(len(ds))
    return [[ds.graphs[i] for i in order[k:k + batch_size]] for k in range(0, len(ds), batch_size)]
