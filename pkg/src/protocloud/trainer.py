"""Model assembly, training with early stopping, evaluation and checkpoints."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .contrastive import make_negatives, nc_loss, total_loss
from .encoder import EncoderParams, GraphBatch, aggregate, node_embeddings
from .errors import ConfigError, SchemaError, TrainingError, UsageError
from .graphdata import LabelStats, batches, standardize_labels
from .metrics import correlation_analysis, rmse, roc_auc
from .otcore import CostKind
from .protohead import (
    HeadKind,
    MLPParams,
    PlanAudit,
    PrototypeSet,
    mlp_head,
    project_nodes,
    readout,
    readout_sum,
)

FORMAT_VERSION = 1
PROB_EPS = 1e-7


@dataclass
class TrainConfig:
    n_epochs: int = 150
    batch_size: int = 16
    lr: float = 5e-4
    lr_pc: float = 5e-3
    n_layers: int = 5
    n_hidden: int = 200
    n_ffn_hidden: int = 100
    dropout_gnn: float = 0.0
    dropout_fnn: float = 0.0
    n_pc: int = 10
    pc_size: int = 10
    pc_hidden: int = 10
    nc_coef: float = 0.1
    head: str = "ProtoW-L2"
    cost: str | None = None
    seed: int = 0
    patience: int = 50
    debug: bool = False

    def __post_init__(self):
        for name in ("n_epochs", "batch_size", "n_layers", "n_hidden", "n_ffn_hidden",
                     "n_pc", "pc_size", "pc_hidden"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        for name in ("patience", "seed"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 0:
                raise ConfigError(f"{name} must be a nonnegative integer, got {value!r}")
        for name in ("lr", "lr_pc", "nc_coef"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or not math.isfinite(value) or value < 0:
                raise ConfigError(f"{name} must be a finite nonnegative number, got {value!r}")
        for name in ("dropout_gnn", "dropout_fnn"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or not 0.0 <= value < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {value!r}")
        try:
            head = HeadKind.parse(self.head)
        except UsageError as exc:
            raise ConfigError(f"head: {exc}") from None
        self.head = head.value
        if self.cost is not None:
            try:
                cost = CostKind.parse(self.cost)
            except UsageError as exc:
                raise ConfigError(f"cost: {exc}") from None
            if head.uses_transport and cost is not head.cost:
                raise ConfigError(f"cost {cost.value} contradicts head {head.value}")
            self.cost = cost.value
        elif head.cost is not None:
            self.cost = head.cost.value

    @property
    def head_kind(self):
        return HeadKind.parse(self.head)

    @property
    def cost_kind(self):
        return None if self.cost is None else CostKind.parse(self.cost)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"unknown config field {key!r}")
        return cls(**data)

    def to_dict(self):
        return dataclasses.asdict(self)

    def digest(self):
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class Forward:
    pred: gc.Tensor
    representation: gc.Tensor
    readout: object = None
    projected: gc.Tensor | None = None


class Model:
    """Encoder, optional projection and prototypes, and the MLP head.

    ``input_scale`` divides the representation before the MLP. Transport
    readouts grow with n * N, so training fixes it to N times the mean
    training graph size; it is a constant, not a parameter.
    """

    def __init__(self, config, node_width, edge_width, stats=None, task="regression", input_scale=1.0):
        self.config = config
        self.input_scale = float(input_scale)
        self.node_width = node_width
        self.edge_width = edge_width
        self.stats = stats
        self.task = task
        rng = np.random.default_rng(config.seed)
        head = config.head_kind
        self.encoder = EncoderParams.init(node_width, edge_width, config.n_hidden, config.n_layers,
                                          rng, dropout=config.dropout_gnn)
        self.projection = None
        self.prototypes = None
        n_in = config.n_hidden
        if head.uses_prototypes:
            size = 1 if head is HeadKind.PROTOS_L2 else config.pc_size
            limit = np.sqrt(6.0 / (config.pc_hidden + config.n_hidden))
            self.projection = gc.parameter(
                rng.uniform(-limit, limit, size=(config.pc_hidden, config.n_hidden)), "projection.P")
            self.prototypes = PrototypeSet.init(config.n_pc, size, config.pc_hidden, rng)
            n_in = config.n_pc
        self.mlp = MLPParams.init(n_in, config.n_ffn_hidden, rng, dropout=config.dropout_fnn)

    def main_parameters(self):
        params = self.encoder.parameters() + self.mlp.parameters()
        if self.projection is not None:
            params.append(self.projection)
        return params

    def prototype_parameters(self):
        return [] if self.prototypes is None else [self.prototypes.points]

    def parameters(self):
        return self.main_parameters() + self.prototype_parameters()

    def named_arrays(self):
        return {p.name: p.data for p in self.parameters()}

    def load_arrays(self, arrays):
        for p in self.parameters():
            if p.name not in arrays:
                raise SchemaError(f"checkpoint lacks parameter {p.name!r}")
            value = np.asarray(arrays[p.name], dtype=np.float64).reshape(p.shape)
            p.data = value.copy()

    def forward(self, batch, train=False, rng=None, audit=None):
        head = self.config.head_kind
        H = node_embeddings(batch, self.encoder, train, rng)
        ro = None
        Hp = None
        if head is HeadKind.BASELINE_SUM:
            rep = aggregate(H, batch)
        else:
            Hp = project_nodes(H, self.projection)
            if head is HeadKind.PROTOS_L2:
                ro = readout_sum(Hp, self.prototypes, batch)
            else:
                ro = readout(Hp, self.prototypes, batch, self.config.cost_kind, audit)
            rep = ro.values
        r = rep if self.input_scale == 1.0 else gc.scale(rep, 1.0 / self.input_scale)
        return Forward(mlp_head(r, self.mlp, train, rng), rep, ro, Hp)


def task_loss(pred, labels, task):
    """Mean squared error, or binary cross-entropy on sigmoid(pred)."""
    y = gc.constant(np.asarray(labels, dtype=np.float64).reshape(pred.shape))
    if task == "regression":
        diff = gc.sub(pred, y)
        return gc.mean(gc.mul(diff, diff))
    p = gc.clip(gc.sigmoid(pred), PROB_EPS, 1.0 - PROB_EPS)
    ll = gc.add(gc.mul(y, gc.log(p)), gc.mul(1.0 - y, gc.log(1.0 - p)))
    return gc.scale(gc.mean(ll), -1.0)


def _rng(*keys):
    return np.random.default_rng([int(k) for k in keys])


@dataclass
class TrainResult:
    model: Model
    history: list
    best_epoch: int
    best_metric: float
    audit: PlanAudit | None = None


def _improved(metric, best, task):
    if best is None:
        return True
    return metric < best if task == "regression" else metric > best


def _widths(ds):
    for g in ds.graphs:
        if g.n_edges:
            return g.node_features.shape[1], g.edge_features.shape[1]
    return ds.graphs[0].node_features.shape[1], 0


def input_scale(config, train_ds):
    """MLP input divisor: N times the mean training graph size for transport heads."""
    if not config.head_kind.uses_transport:
        return 1.0
    return config.pc_size * float(np.mean([g.n_nodes for g in train_ds.graphs]))


def train(config, train_ds, valid_ds, log=None):
    """Fit a model; returns the best-validation parameters and per-epoch history."""
    if len(train_ds) == 0 or len(valid_ds) == 0:
        raise ConfigError("training and validation sets must be non-empty")
    if train_ds.task != valid_ds.task:
        raise ConfigError("training and validation tasks differ")
    task = train_ds.task
    (train_s, valid_s), stats = standardize_labels(train_ds, valid_ds)
    node_width, edge_width = _widths(train_ds)
    model = Model(config, node_width, edge_width, stats, task, input_scale(config, train_ds))
    main, protos = model.main_parameters(), model.prototype_parameters()
    params = main + protos
    state = gc.AdamState.for_groups({"main": (main, config.lr), "prototypes": (protos, config.lr_pc)})
    audit = PlanAudit() if config.debug else None
    head = config.head_kind
    use_nc = config.nc_coef > 0 and head.uses_transport
    best = None
    best_epoch = -1
    best_arrays = {p.name: p.data.copy() for p in params}
    since_best = 0
    history = []
    for epoch in range(config.n_epochs):
        losses, ncs = [], []
        for b, graphs in enumerate(batches(train_s, config.batch_size, config.seed, epoch)):
            batch = GraphBatch(graphs)
            fwd = model.forward(batch, train=True, rng=_rng(config.seed, epoch, b, 0), audit=audit)
            loss = task_loss(fwd.pred, [g.label for g in graphs], task)
            nc = None
            if use_nc:
                negatives = [make_negatives(fwd.readout.graph_plans(g), _rng(config.seed, epoch, b, 1, g))
                             for g in range(len(batch))]
                nc = nc_loss(fwd.projected, model.prototypes, fwd.readout.plans, negatives,
                             config.cost_kind, batch, audit, cost=fwd.readout.cost)
            total = total_loss(loss, nc, config.nc_coef)
            if not math.isfinite(total.item()):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            grads = gc.backward(total, params)
            try:
                gc.adam_step(params, grads, state)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from None
            losses.append(loss.item())
            if nc is not None:
                ncs.append(nc.item())
        metric = evaluate(model, valid_ds)["value"]
        row = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "valid_metric": metric,
            "nc_term": float(np.mean(ncs)) if ncs else None,
        }
        history.append(row)
        if log is not None:
            log(row)
        if _improved(metric, best, task):
            best, best_epoch, since_best = metric, epoch, 0
            best_arrays = {p.name: p.data.copy() for p in params}
        else:
            since_best += 1
            if since_best > config.patience:
                break
    model.load_arrays(best_arrays)
    return TrainResult(model, history, best_epoch, best, audit)


def _batched(ds, size):
    graphs = ds.graphs
    for k in range(0, len(graphs), size):
        yield GraphBatch(graphs[k:k + size])


def predict(model, ds, batch_size=64):
    """Predictions on the original label scale (probabilities for classification)."""
    out = []
    for batch in _batched(ds, batch_size):
        out.append(model.forward(batch).pred.data[:, 0])
    raw = np.concatenate(out) if out else np.zeros(0)
    if model.task == "classification":
        return 0.5 * (1.0 + np.tanh(0.5 * raw))
    return model.stats.destandardize(raw) if model.stats is not None else raw


def embed(model, ds, batch_size=64, with_plans=False):
    """Representation fed to the MLP for each graph, optionally with plans."""
    reps, plans = [], []
    for batch in _batched(ds, batch_size):
        fwd = model.forward(batch)
        reps.append(fwd.representation.data)
        if with_plans and fwd.readout is not None and fwd.readout.plans is not None:
            plans.extend(fwd.readout.graph_plans(g) for g in range(len(batch)))
    E = np.vstack(reps) if reps else np.zeros((0, 0))
    return (E, plans) if with_plans else E


def evaluate(model, ds):
    """Task metric of ``model`` on a raw-label dataset."""
    if ds.task != model.task:
        raise UsageError(f"checkpoint was trained for {model.task}, data is {ds.task}")
    pred = predict(model, ds)
    labels = ds.labels
    if model.task == "regression":
        return {"task": "regression", "metric_name": "rmse", "value": rmse(pred, labels), "n": len(ds)}
    return {"task": "classification", "metric_name": "roc_auc", "value": roc_auc(pred, labels), "n": len(ds)}


def smoothness(model, ds):
    """Spearman and Pearson correlation of embedding distance vs label gap."""
    return correlation_analysis(embed(model, ds), ds.labels)


def prototype_spread(model):
    """Mean pairwise distance between points of the same prototype, averaged."""
    protos = model.prototypes
    if protos is None or protos.size < 2:
        raise UsageError("prototype spread needs prototypes with at least two points")
    i, j = np.triu_indices(protos.size, k=1)
    spreads = []
    for k in range(protos.n_protos):
        Q = protos.cloud(k)
        spreads.append(np.linalg.norm(Q[i] - Q[j], axis=1).mean())
    return float(np.mean(spreads))


# ---------------------------------------------------------------- checkpoints


def checkpoint_document(model):
    return {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "task": model.task,
        "widths": {"node": model.node_width, "edge": model.edge_width},
        "input_scale": model.input_scale,
        "label_stats": None if model.stats is None else {"mean": model.stats.mean, "std": model.stats.std},
        "params": {name: arr.tolist() for name, arr in model.named_arrays().items()},
    }


def save_checkpoint(model, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(checkpoint_document(model), fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not a JSON checkpoint ({exc.msg})") from None
    if doc.get("format_version") != FORMAT_VERSION:
        raise SchemaError(f"{path}: unsupported checkpoint format {doc.get('format_version')!r}")
    config = TrainConfig.from_dict(doc["config"])
    stats = doc.get("label_stats")
    stats = None if stats is None else LabelStats(stats["mean"], stats["std"])
    widths = doc["widths"]
    model = Model(config, widths["node"], widths["edge"], stats, doc.get("task", "regression"),
                  doc.get("input_scale", 1.0))
    model.load_arrays(doc["params"])
    return model
