# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

import enum
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import torch
from scipy.special import comb

from fedhunter import detectors
from fedhunter.errors import CapacityError, ConfigError, DataError, DimensionError, KindError
from fedhunter.netflow_ingest import FEATURE_NAMES, FeatureVector, to_arrays
from fedhunter.neural_core import DTYPE
from fedhunter.provenance_graph import EMBEDDING_DIM, khop_subgraph

logger = logging.getLogger(__name__)

MAX_EXACT_FEATURES = 20
DEFAULT_COALITION_BUDGET = 2048
RIDGE_LAMBDA = 1e-10
# Above this condition number the regression falls back to ridge
MAX_CONDITION = 1e12
# Rows per predictor call when evaluating masked inputs
EVAL_CHUNK = 1 << 16


class GradientMode(enum.Enum):
    EXPECTED_GRADIENTS = "expected_gradients"
    PAPER_LITERAL = "paper_literal"


@dataclass(frozen=True)
class Coalition:
    mask: tuple

    @classmethod
    def from_code(cls, code, num_features):
        return cls(tuple(bool((code >> i) & 1) for i in range(num_features)))

    @property
    def size(self):
        return sum(self.mask)


# Absent features take the value of each background sample in turn and the
# masked prediction is the average over the background.
@dataclass
class MaskingConfig:
    background: np.ndarray

    def __post_init__(self):
        background = np.asarray(self.background, dtype=np.float64)
        if background.ndim == 1:
            background = background[None, :]
        if background.ndim != 2 or background.shape[0] == 0:
            raise DataError("the background dataset must be a nonempty 2-D array")
        self.background = background

    @property
    def num_features(self):
        return self.background.shape[1]

    def check(self, x):
        if x.shape != (self.num_features,):
            raise DimensionError("explained instance", (self.num_features,), x.shape)


@dataclass
class ShapExplanation:
    phi0: float
    phi: np.ndarray
    feature_names: Sequence[str]
    f_x: float
    mode: str
    seed: Optional[int] = None
    ridge_fallback: bool = False
    weights: Optional[np.ndarray] = None

    @property
    def completeness_gap(self):
        return float(self.phi0 + np.sum(self.phi) - self.f_x)

    def to_dict(self):
        payload = {
            "phi0": float(self.phi0),
            "phi": [
                {"feature": name, "value": float(v)}
                for name, v in zip(self.feature_names, self.phi)
            ],
            "f_x": float(self.f_x),
            "mode": self.mode,
            "seed": self.seed,
        }
        if self.ridge_fallback:
            payload["ridge_fallback"] = True
        if self.weights is not None:
            payload["weights"] = [float(w) for w in self.weights]
        return payload


@dataclass
class GradientShapConfig:
    samples: int = 50
    baseline: Optional[np.ndarray] = None
    mode: GradientMode = GradientMode.EXPECTED_GRADIENTS
    seed: int = 0

    def __post_init__(self):
        if self.samples < 1:
            raise ConfigError(f"gradient SHAP needs at least one sample, got {self.samples}")
        if not isinstance(self.mode, GradientMode):
            self.mode = GradientMode(self.mode)
        if self.baseline is not None:
            self.baseline = np.asarray(self.baseline, dtype=np.float64)


@dataclass
class SubgraphExplanation:
    center: str
    node_scores: Dict[str, float]
    edge_scores: Dict[str, float]
    edge_id: str
    predicted_class: int
    probability: float
    hops: int
    mode: str
    seed: int
    subgraph: object = field(default=None, repr=False)

    def to_dict(self):
        return {
            "edge_id": self.edge_id,
            "predicted_class": self.predicted_class,
            "probability": self.probability,
            "center": self.center,
            "hops": self.hops,
            "mode": self.mode,
            "seed": self.seed,
            "node_scores": dict(self.node_scores),
            "edge_scores": dict(self.edge_scores),
        }


def default_feature_names(num_features):
    if num_features == len(FEATURE_NAMES):
        return list(FEATURE_NAMES)
    return [f"x{i}" for i in range(num_features)]


def flow_predictor(model):
    def predict(x):
        x = torch.as_tensor(np.asarray(x, dtype=np.float64))
        model.eval()
        with torch.no_grad():
            return model(x).numpy()

    return predict


def _masks(codes, num_features):
    return ((codes[:, None] >> np.arange(num_features)) & 1).astype(bool)


def coalition_values(f, x, masking, masks):
    masks = np.asarray(masks, dtype=bool)
    background = masking.background
    num_background = background.shape[0]
    values = np.empty(masks.shape[0], dtype=np.float64)
    step = max(1, EVAL_CHUNK // num_background)
    for start in range(0, masks.shape[0], step):
        block = masks[start : start + step]
        inputs = np.where(block[:, None, :], x[None, None, :], background[None, :, :])
        out = np.asarray(f(inputs.reshape(-1, x.shape[0])), dtype=np.float64).reshape(
            block.shape[0], num_background
        )
        values[start : start + step] = out.mean(axis=1)
    return values


def coalition_value(f, x, masking, coalition):
    x = np.asarray(x, dtype=np.float64)
    masking.check(x)
    return float(coalition_values(f, x, masking, np.array([coalition.mask]))[0])


def _model_output(f, x):
    return float(np.asarray(f(x[None, :]), dtype=np.float64).reshape(-1)[0])


def shapley_exact(f, x, masking, feature_names=None):
    x = np.asarray(x, dtype=np.float64)
    masking.check(x)
    m = x.shape[0]
    if m > MAX_EXACT_FEATURES:
        raise CapacityError(
            f"exact enumeration over {m} features needs 2^{m} coalitions, use kernel_shap instead"
        )
    codes = np.arange(1 << m, dtype=np.int64)
    values = coalition_values(f, x, masking, _masks(codes, m))
    sizes = np.array([bin(c).count("1") for c in codes])
    # |S|!(M-|S|-1)!/M! == 1 / (M * C(M-1, |S|))
    weights = 1.0 / (m * comb(m - 1, np.minimum(sizes, m - 1), exact=False))
    phi = np.zeros(m)
    for i in range(m):
        without = codes[((codes >> i) & 1) == 0]
        phi[i] = np.sum(weights[without] * (values[without | (1 << i)] - values[without]))
    return ShapExplanation(
        phi0=float(values[0]),
        phi=phi,
        feature_names=feature_names or default_feature_names(m),
        f_x=_model_output(f, x),
        mode="exact",
    )


def shapley_kernel(num_features, size):
    return (num_features - 1) / (comb(num_features, size) * size * (num_features - size))


# Coalition sizes are drawn in proportion to their total kernel mass, and the
# members of each coalition uniformly. Each sample carries its size's mass
# divided by the number of samples of that size.
def _sample_coalitions(num_features, budget, rng):
    sizes = np.arange(1, num_features)
    mass = (num_features - 1) / (sizes * (num_features - sizes))
    share = mass / mass.sum() * budget
    counts = np.floor(share).astype(np.int64)
    remainder = budget - counts.sum()
    for k in np.argsort(-(share - counts), kind="stable")[:remainder]:
        counts[k] += 1
    masks, weights = [], []
    for size, count, size_mass in zip(sizes, counts, mass):
        for _ in range(count):
            mask = np.zeros(num_features, dtype=bool)
            mask[rng.permutation(num_features)[:size]] = True
            masks.append(mask)
            weights.append(size_mass / count)
    return np.array(masks), np.array(weights)


def kernel_shap(f, x, masking, coalition_budget=DEFAULT_COALITION_BUDGET, seed=0, feature_names=None):
    x = np.asarray(x, dtype=np.float64)
    masking.check(x)
    m = x.shape[0]
    phi0 = float(np.mean(np.asarray(f(masking.background), dtype=np.float64)))
    f_x = _model_output(f, x)
    delta = f_x - phi0
    names = feature_names or default_feature_names(m)
    if m == 1:
        return ShapExplanation(phi0, np.array([delta]), names, f_x, "kernel", seed)

    if (1 << m) <= coalition_budget:
        masks = _masks(np.arange(1, (1 << m) - 1, dtype=np.int64), m)
        weights = shapley_kernel(m, masks.sum(axis=1))
    else:
        if coalition_budget < 3:
            raise ConfigError(f"coalition budget {coalition_budget} is too small")
        rng = np.random.default_rng(seed)
        masks, weights = _sample_coalitions(m, coalition_budget - 2, rng)
    y = coalition_values(f, x, masking, masks) - phi0

    # phi_M = delta - sum(phi_j) is substituted so both constraints hold exactly
    z = masks.astype(np.float64)
    a = z[:, :-1] - z[:, -1:]
    b = y - z[:, -1] * delta
    lhs = a.T @ (weights[:, None] * a)
    rhs = a.T @ (weights * b)
    ridge = False
    try:
        if np.linalg.cond(lhs) > MAX_CONDITION:
            raise np.linalg.LinAlgError("ill-conditioned coalition system")
        head = np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError:
        logger.warning(f"Singular coalition regression, falling back to ridge with lambda={RIDGE_LAMBDA}")
        ridge = True
        head = np.linalg.solve(lhs + RIDGE_LAMBDA * np.eye(m - 1), rhs)
    phi = np.append(head, delta - head.sum())
    return ShapExplanation(phi0, phi, names, f_x, "kernel", seed, ridge_fallback=ridge)


def _gradient_weights(displacement):
    total = displacement.sum()
    if not np.any(displacement):
        return np.zeros_like(displacement)
    if total == 0.0:
        raise DataError("degenerate weights: the displacement from the baseline sums to zero")
    return displacement / total


# fn maps a (n, M) float64 tensor to n differentiable scalar outputs.
def gradient_shap(fn, x, config, background=None, feature_names=None):
    x = np.asarray(x, dtype=np.float64)
    if config.baseline is not None:
        baseline = config.baseline
    elif background is not None:
        baseline = MaskingConfig(background).background.mean(axis=0)
    else:
        raise ConfigError("gradient SHAP needs a baseline or a background dataset")
    if baseline.shape != x.shape:
        raise DimensionError("baseline", x.shape, baseline.shape)

    generator = torch.Generator().manual_seed(int(config.seed))
    alphas = torch.rand(config.samples, generator=generator, dtype=DTYPE)
    x_t = torch.as_tensor(x)
    base_t = torch.as_tensor(baseline)
    points = (base_t[None, :] + alphas[:, None] * (x_t - base_t)[None, :]).requires_grad_(True)
    with torch.enable_grad():
        outputs = fn(points)
        (grads,) = torch.autograd.grad(outputs.sum(), points)
    mean_grad = grads.mean(dim=0).detach().numpy()
    with torch.no_grad():
        ends = fn(torch.stack([base_t, x_t])).numpy()

    displacement = x - baseline
    weights = None
    if config.mode == GradientMode.EXPECTED_GRADIENTS:
        phi = displacement * mean_grad
    else:
        weights = _gradient_weights(displacement)
        phi = weights * mean_grad
    return ShapExplanation(
        phi0=float(ends[0]),
        phi=phi,
        feature_names=feature_names or default_feature_names(x.shape[0]),
        f_x=float(ends[1]),
        mode=config.mode.value,
        seed=config.seed,
        weights=weights,
    )


def normalize_scores(raw):
    raw = OrderedDict((k, abs(float(v))) for k, v in raw.items())
    top = max(raw.values(), default=0.0)
    if top == 0.0:
        return OrderedDict((k, 0.0) for k in raw)
    return OrderedDict((k, v / top) for k, v in raw.items())


def explain_edge(model, graph, edge_id, hops=1, config=None):
    if not isinstance(model, detectors.EGraphSageModel):
        raise KindError("sub-graph explanations need the graph detector")
    config = config or GradientShapConfig()
    graph.find_edge(edge_id)
    probabilities = detectors.egs_forward(model, graph)[edge_id]
    predicted = int(np.argmax(probabilities))

    sub = khop_subgraph(graph, edge_id, hops)
    node_x, edge_x, edge_index = detectors.graph_tensors(sub)
    num_nodes, num_edges = node_x.shape[0], edge_x.shape[0]
    row = sub.edge_index[edge_id]
    split = num_nodes * EMBEDDING_DIM

    def score(points):
        out = []
        for p in points:
            nodes = p[:split].reshape(num_nodes, EMBEDDING_DIM)
            edges = p[split:].reshape(num_edges, EMBEDDING_DIM)
            out.append(model(nodes, edges, edge_index)[row, predicted])
        return torch.stack(out)

    x = torch.cat([node_x.reshape(-1), edge_x.reshape(-1)]).numpy()
    # All-zero embeddings stand for absent entities
    if config.baseline is None:
        config = GradientShapConfig(config.samples, np.zeros_like(x), config.mode, config.seed)
    model.eval()
    explanation = gradient_shap(score, x, config)

    node_phi = explanation.phi[:split].reshape(num_nodes, EMBEDDING_DIM).sum(axis=1)
    edge_phi = explanation.phi[split:].reshape(num_edges, EMBEDDING_DIM).sum(axis=1)
    node_scores = normalize_scores(OrderedDict(zip(sub.nodes, node_phi)))
    edge_scores = normalize_scores(OrderedDict((e.id, v) for e, v in zip(sub.edges, edge_phi)))
    edge = sub.find_edge(edge_id)
    center = edge.dst if node_scores[edge.dst] > node_scores[edge.src] else edge.src
    return SubgraphExplanation(
        center=center,
        node_scores=node_scores,
        edge_scores=edge_scores,
        edge_id=edge_id,
        predicted_class=predicted,
        probability=float(probabilities[predicted]),
        hops=hops,
        mode=config.mode.value,
        seed=config.seed,
        subgraph=sub,
    )


def explain_flow(model, vector, background, method="kernel-shap", coalition_budget=DEFAULT_COALITION_BUDGET, seed=0, samples=50, mode=GradientMode.EXPECTED_GRADIENTS):
    if not isinstance(model, detectors.CnnGruModel):
        raise KindError("flow explanations need the flow detector")
    x = np.asarray(vector.values if isinstance(vector, FeatureVector) else vector, dtype=np.float64)
    background = np.asarray(background, dtype=np.float64)
    if method == "exact":
        return shapley_exact(flow_predictor(model), x, MaskingConfig(background))
    if method == "kernel-shap":
        return kernel_shap(flow_predictor(model), x, MaskingConfig(background), coalition_budget, seed)
    if method == "gradient-shap":
        config = GradientShapConfig(samples=samples, mode=mode, seed=seed)
        model.eval()
        return gradient_shap(model, x, config, background=background)
    raise ConfigError(f"unknown explanation method {method}")


def sample_background(vectors, size=100, seed=0):
    x, _ = to_arrays(vectors)
    if x.shape[0] == 0:
        raise DataError("cannot draw a background from an empty dataset")
    if x.shape[0] <= size:
        return x
    rows = np.sort(np.random.default_rng(seed).choice(x.shape[0], size=size, replace=False))
    return x[rows]


# KernelSHAP values for up to per_class samples of each category, in long format:
# one row per (sample, feature).
def summarize_categories(model, subsets, background, per_class=100, seed=0, coalition_budget=DEFAULT_COALITION_BUDGET):
    f = flow_predictor(model)
    masking = MaskingConfig(background)
    rows: List[dict] = []
    rng = np.random.default_rng(seed)
    for category, vectors in subsets.items():
        if not vectors:
            logger.warning(f"Category {category} is empty, it has no summary rows")
            continue
        picked = range(len(vectors))
        if len(vectors) > per_class:
            picked = np.sort(rng.choice(len(vectors), size=per_class, replace=False))
        for sample, i in enumerate(picked):
            x = np.asarray(vectors[i].values, dtype=np.float64)
            explanation = kernel_shap(f, x, masking, coalition_budget, seed)
            for name, value, phi in zip(explanation.feature_names, x, explanation.phi):
                rows.append(
                    {
                        "category": category,
                        "sample": sample,
                        "feature": name,
                        "feature_value": float(value),
                        "shap_value": float(phi),
                    }
                )
    return pd.DataFrame(rows, columns=["category", "sample", "feature", "feature_value", "shap_value"])
