# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.metrics import confusion_matrix

from fedhunter import neural_core
from fedhunter.errors import DataError, DimensionError, KindError, TrainingError
from fedhunter.netflow_ingest import NUM_FEATURES, FeatureVector, to_arrays
from fedhunter.neural_core import DTYPE, LayerKind, LayerSpec
from fedhunter.provenance_graph import EMBEDDING_DIM, ProvenanceGraph

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.5

# Training defaults for each detector: (epochs, batch size, learning rate). The
# graph detector trains on the full graph at every epoch.
TRAINING_DEFAULTS = {
    "cnn_gru": (25, 512, 0.001),
    "e_graphsage": (100, None, 0.001),
}

CNN_GRU_ARCHITECTURE = (
    LayerSpec("conv1d_2", LayerKind.Conv1D, {"in_channels": 1, "filters": 32, "kernel_size": 3, "activation": "relu"}),
    LayerSpec("batch_normalization_3", LayerKind.BatchNorm1D, {"features": 32}),
    LayerSpec("max_pooling1d_4", LayerKind.MaxPool1D, {"pool_size": 2}),
    LayerSpec("conv1d_5", LayerKind.Conv1D, {"in_channels": 32, "filters": 32, "kernel_size": 3, "activation": "relu"}),
    LayerSpec("batch_normalization_6", LayerKind.BatchNorm1D, {"features": 32}),
    LayerSpec("max_pooling1d_7", LayerKind.MaxPool1D, {"pool_size": 2}),
    LayerSpec("conv1d_8", LayerKind.Conv1D, {"in_channels": 32, "filters": 32, "kernel_size": 3, "activation": "relu"}),
    LayerSpec("batch_normalization_9", LayerKind.BatchNorm1D, {"features": 32}),
    LayerSpec("max_pooling1d_10", LayerKind.MaxPool1D, {"pool_size": 2}),
    LayerSpec("flatten_11", LayerKind.Flatten),
    LayerSpec("gru_12", LayerKind.GRU, {"input_size": 1, "units": 3}),
    LayerSpec("concatenate_13", LayerKind.Concatenate),
    LayerSpec("dense_14", LayerKind.Dense, {"in_features": 323, "units": 64}),
    LayerSpec("dense_15", LayerKind.Dense, {"in_features": 64, "units": 1, "activation": "sigmoid"}),
)

# Each E-GraphSAGE layer consumes concat(h_v, mean(concat(h_u, e_uv))).
E_GRAPHSAGE_ARCHITECTURE = (
    LayerSpec("e_graphsage_2", LayerKind.Dense, {"in_features": 3 * EMBEDDING_DIM, "units": 128, "bias": False, "activation": "relu"}),
    LayerSpec("e_graphsage_3", LayerKind.Dense, {"in_features": 2 * 128 + EMBEDDING_DIM, "units": EMBEDDING_DIM, "bias": False, "activation": "relu"}),
    LayerSpec("dropout_4", LayerKind.Dropout, {"rate": 0.2}),
    LayerSpec("dense_5", LayerKind.Dense, {"in_features": 2 * EMBEDDING_DIM, "units": 2}),
)


def _build(architecture):
    return torch.nn.ModuleDict(
        OrderedDict((spec.name, neural_core.build_layer(spec)) for spec in architecture)
    )


@neural_core.register_model("cnn_gru")
class CnnGruModel(torch.nn.Module):
    penultimate_dim = 64

    def __init__(self):
        super().__init__()
        self.layers = _build(CNN_GRU_ARCHITECTURE)
        self.metadata = {}

    def check_input(self, x, *args):
        if x.dim() != 2 or x.shape[1] != NUM_FEATURES:
            raise DimensionError("flow batch", ("batch", NUM_FEATURES), tuple(x.shape))

    def penultimate(self, x):
        conv = x.unsqueeze(1)
        for name in (
            "conv1d_2", "batch_normalization_3", "max_pooling1d_4",
            "conv1d_5", "batch_normalization_6", "max_pooling1d_7",
            "conv1d_8", "batch_normalization_9", "max_pooling1d_10",
            "flatten_11",
        ):
            conv = self.layers[name](conv)
        # The GRU reads the input as 10 timesteps of one feature
        recurrent = self.layers["gru_12"](x.unsqueeze(-1))
        merged = self.layers["concatenate_13"](conv, recurrent)
        return self.layers["dense_14"](merged)

    def head(self, z):
        return self.layers["dense_15"](z).squeeze(-1)

    def forward(self, x):
        return self.head(self.penultimate(x))


@neural_core.register_model("e_graphsage")
class EGraphSageModel(torch.nn.Module):
    penultimate_dim = 2 * EMBEDDING_DIM

    def __init__(self):
        super().__init__()
        self.layers = _build(E_GRAPHSAGE_ARCHITECTURE)
        self.metadata = {}

    def check_input(self, node_x, edge_x, edge_index):
        if node_x.dim() != 2 or node_x.shape[1] != EMBEDDING_DIM:
            raise DimensionError("node features", ("nodes", EMBEDDING_DIM), tuple(node_x.shape))
        if edge_x.dim() != 2 or edge_x.shape[1] != EMBEDDING_DIM:
            raise DimensionError("edge features", ("edges", EMBEDDING_DIM), tuple(edge_x.shape))
        if tuple(edge_index.shape) != (2, edge_x.shape[0]):
            raise DimensionError("edge index", (2, edge_x.shape[0]), tuple(edge_index.shape))

    def node_embeddings(self, node_x, edge_x, edge_index):
        src, dst = edge_index[0], edge_index[1]
        num_nodes = node_x.shape[0]
        edge_ids = torch.arange(edge_index.shape[1])
        # An edge is incident to both endpoints, a self loop only once. The
        # incidence order only depends on the edge list.
        other = src != dst
        targets = torch.cat([src, dst[other]])
        neighbors = torch.cat([dst, src[other]])
        incident = torch.cat([edge_ids, edge_ids[other]])
        counts = torch.bincount(targets, minlength=num_nodes).clamp(min=1)
        counts = counts.to(DTYPE).unsqueeze(-1)

        def mean_over_incidences(values):
            total = torch.zeros(num_nodes, values.shape[1], dtype=values.dtype)
            return total.index_add(0, targets, values) / counts

        edge_context = mean_over_incidences(edge_x[incident])
        h = node_x
        for name in ("e_graphsage_2", "e_graphsage_3"):
            neighborhood = mean_over_incidences(h[neighbors])
            h = self.layers[name](torch.cat([h, neighborhood, edge_context], dim=-1))
        return self.layers["dropout_4"](h)

    def penultimate(self, node_x, edge_x, edge_index):
        h = self.node_embeddings(node_x, edge_x, edge_index)
        return torch.cat([h[edge_index[0]], h[edge_index[1]]], dim=-1)

    def head_logits(self, z):
        return self.layers["dense_5"](z)

    def head(self, z):
        return torch.softmax(self.head_logits(z), dim=-1)

    def logits(self, node_x, edge_x, edge_index):
        return self.head_logits(self.penultimate(node_x, edge_x, edge_index))

    def forward(self, node_x, edge_x, edge_index):
        return torch.softmax(self.logits(node_x, edge_x, edge_index), dim=-1)


def canonical_kind(kind):
    kind = kind.replace("-", "_")
    if kind not in TRAINING_DEFAULTS:
        raise KindError(f"unknown model kind {kind}")
    return kind


def create_model(kind, seed=0):
    model = neural_core.MODEL_REGISTRY[canonical_kind(kind)]()
    neural_core.initialize(model, seed)
    model.eval()
    return model


# A set of labeled edges evaluated in the context of a whole graph
@dataclass
class EdgeSelection:
    graph: ProvenanceGraph
    edge_ids: List[str] = field(default_factory=list)


def graph_tensors(graph):
    node_pos = {n: i for i, n in enumerate(graph.nodes)}
    node_x = torch.tensor(graph.node_features(), dtype=DTYPE)
    edge_x = torch.tensor(graph.edge_features(), dtype=DTYPE)
    edge_index = torch.tensor(
        [[node_pos[e.src] for e in graph.edges], [node_pos[e.dst] for e in graph.edges]],
        dtype=torch.int64,
    ).reshape(2, -1)
    return node_x, edge_x, edge_index


def flow_tensors(vectors):
    x, y = to_arrays(vectors)
    return torch.tensor(x, dtype=DTYPE), torch.tensor(y, dtype=DTYPE)


def _as_selection(data):
    if isinstance(data, ProvenanceGraph):
        return EdgeSelection(data, [e.id for e in data.edges])
    if isinstance(data, EdgeSelection):
        return data
    raise KindError(f"graph detector cannot score {type(data).__name__}")


def _check_flows(data):
    if isinstance(data, (ProvenanceGraph, EdgeSelection)):
        raise KindError("flow detector cannot score graph data")
    return data


def sample_count(data):
    if isinstance(data, ProvenanceGraph):
        return len(data.edges)
    if isinstance(data, EdgeSelection):
        return len(data.edge_ids)
    return len(data)


def select(data, indices):
    if isinstance(data, (ProvenanceGraph, EdgeSelection)):
        selection = _as_selection(data)
        return EdgeSelection(selection.graph, [selection.edge_ids[i] for i in indices])
    return [data[i] for i in indices]


def true_labels(data):
    if isinstance(data, (ProvenanceGraph, EdgeSelection)):
        selection = _as_selection(data)
        return np.array(
            [selection.graph.find_edge(e).label for e in selection.edge_ids], dtype=np.int64
        )
    return np.array([v.label for v in data], dtype=np.int64)


def _edge_rows(selection):
    return torch.tensor(
        [selection.graph.edge_index[e] for e in selection.edge_ids], dtype=torch.int64
    )


def _graph_outputs(model, data, fn):
    selection = _as_selection(data)
    tensors = graph_tensors(selection.graph)
    model.eval()
    with torch.no_grad():
        out = fn(*tensors)
    return out[_edge_rows(selection)]


def predict_proba(model, data):
    if isinstance(model, EGraphSageModel):
        return _graph_outputs(model, data, model.forward)[:, 1].numpy()
    x, _ = flow_tensors(_check_flows(data))
    model.eval()
    with torch.no_grad():
        return model(x).numpy()


def penultimate(model, data):
    if isinstance(model, EGraphSageModel):
        return _graph_outputs(model, data, model.penultimate).numpy()
    x, _ = flow_tensors(_check_flows(data))
    model.eval()
    with torch.no_grad():
        return model.penultimate(x).numpy()


# Maps penultimate vectors to attack probabilities.
def head(model, vectors):
    z = torch.as_tensor(np.asarray(vectors, dtype=np.float64))
    if z.dim() != 2 or z.shape[1] != model.penultimate_dim:
        raise DimensionError("penultimate vectors", ("batch", model.penultimate_dim), tuple(z.shape))
    model.eval()
    with torch.no_grad():
        out = model.head(z)
    if isinstance(model, EGraphSageModel):
        out = out[:, 1]
    return out.numpy()


def cnn_gru_forward(model, x, threshold=DEFAULT_THRESHOLD):
    if isinstance(x, FeatureVector):
        x = x.values
    x = torch.as_tensor(np.asarray(x, dtype=np.float64)).reshape(1, -1)
    model.check_input(x)
    model.eval()
    with torch.no_grad():
        probability = float(model(x)[0])
    return probability, int(probability > threshold)


def egs_forward(model, graph):
    tensors = graph_tensors(graph)
    model.check_input(*tensors)
    model.eval()
    with torch.no_grad():
        probs = model(*tensors)
    return OrderedDict((e.id, probs[i].numpy()) for i, e in enumerate(graph.edges))


def class_weights(labels):
    counts = torch.bincount(labels, minlength=2).to(DTYPE)
    weights = torch.ones(2, dtype=DTYPE)
    present = counts > 0
    inverse = 1.0 / counts[present]
    weights[present] = inverse / inverse.mean()
    return weights


def _check_loss(loss, epoch):
    if not torch.isfinite(loss):
        raise TrainingError(f"loss diverged at epoch {epoch}", epoch=epoch)


def _train_flows(model, data, epochs, batch_size, lr, generator):
    x, y = flow_tensors(data)
    n = x.shape[0]
    batch_size = batch_size or n
    params = list(model.parameters())
    optimizer = None
    history = []
    for epoch in range(epochs):
        model.train()
        order = torch.randperm(n, generator=generator)
        total = 0.0
        for start in range(0, n, batch_size):
            batch = order[start : start + batch_size]
            loss = F.binary_cross_entropy(model(x[batch]), y[batch])
            _check_loss(loss, epoch)
            grads = torch.autograd.grad(loss, params)
            optimizer = neural_core.adam_step(params, grads, optimizer, lr=lr)
            total += loss.item() * batch.shape[0]
        history.append(total / n)
        logger.debug(f"epoch {epoch}: loss {history[-1]:.6f}")
    return history


def _train_graph(model, graph, epochs, lr, generator):
    node_x, edge_x, edge_index = graph_tensors(graph)
    y = torch.tensor(graph.edge_labels(), dtype=torch.int64)
    weights = class_weights(y)
    params = list(model.parameters())
    optimizer = None
    history = []
    model.layers["dropout_4"].generator = generator
    try:
        for epoch in range(epochs):
            model.train()
            logits = model.logits(node_x, edge_x, edge_index)
            loss = F.cross_entropy(logits, y, weight=weights)
            _check_loss(loss, epoch)
            grads = torch.autograd.grad(loss, params)
            optimizer = neural_core.adam_step(params, grads, optimizer, lr=lr)
            history.append(loss.item())
            logger.debug(f"epoch {epoch}: loss {history[-1]:.6f}")
    finally:
        model.layers["dropout_4"].generator = None
    return history


def train_local(model, data, epochs=None, batch_size=None, lr=None, seed=0):
    default_epochs, default_batch, default_lr = TRAINING_DEFAULTS[model.model_kind]
    epochs = default_epochs if epochs is None else epochs
    lr = default_lr if lr is None else lr
    if sample_count(data) == 0:
        raise DataError("cannot train on an empty dataset")
    generator = torch.Generator().manual_seed(int(seed))
    try:
        if isinstance(model, EGraphSageModel):
            if isinstance(data, EdgeSelection):
                raise KindError("train the graph detector on a ProvenanceGraph")
            history = _train_graph(model, data, epochs, lr, generator)
        else:
            batch_size = default_batch if batch_size is None else batch_size
            history = _train_flows(model, _check_flows(data), epochs, batch_size, lr, generator)
    finally:
        model.eval()
    return model, history


@dataclass
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn

    def to_dict(self):
        return {"tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn}


@dataclass
class DetectionReport:
    counts: ConfusionCounts
    accuracy: float
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    threshold: float = DEFAULT_THRESHOLD
    undefined_flags: List[str] = field(default_factory=list)

    @classmethod
    def from_counts(cls, counts, threshold=DEFAULT_THRESHOLD):
        assert counts.total > 0
        undefined = []
        accuracy = (counts.tp + counts.tn) / counts.total
        precision = recall = f1 = None
        if counts.tp + counts.fp > 0:
            precision = counts.tp / (counts.tp + counts.fp)
        else:
            undefined.append("precision")
        if counts.tp + counts.fn > 0:
            recall = counts.tp / (counts.tp + counts.fn)
        else:
            undefined.append("recall")
        if precision is not None and recall is not None and precision + recall > 0:
            f1 = 2 * precision * recall / (precision + recall)
        else:
            undefined.append("f1")
        return cls(counts, accuracy, precision, recall, f1, threshold, undefined)

    def to_dict(self):
        return {
            "counts": self.counts.to_dict(),
            "metrics": {
                "accuracy": self.accuracy,
                "precision": self.precision,
                "recall": self.recall,
                "f1": self.f1,
            },
            "threshold": self.threshold,
            "undefined_flags": list(self.undefined_flags),
        }


def confusion_counts(predictions, labels):
    tn, fp, fn, tp = confusion_matrix(
        np.asarray(labels, dtype=np.int64),
        np.asarray(predictions, dtype=np.int64),
        labels=[0, 1],
    ).ravel()
    return ConfusionCounts(tp=int(tp), tn=int(tn), fp=int(fp), fn=int(fn))


def evaluate(model, data, threshold=DEFAULT_THRESHOLD):
    if sample_count(data) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    predictions = (predict_proba(model, data) > threshold).astype(np.int64)
    counts = confusion_counts(predictions, true_labels(data))
    return DetectionReport.from_counts(counts, threshold)
