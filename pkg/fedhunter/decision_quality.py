# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

import enum
import io
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist

from fedhunter import detectors, utils
from fedhunter.errors import DataError, DimensionError, StaleDatasetError
from fedhunter.netflow_ingest import FeatureVector
from fedhunter.neural_core import model_fingerprint

logger = logging.getLogger(__name__)

DEFAULT_PER_CLASS = 100
DEFAULT_METRIC = "euclidean"


class PredictionCategory(enum.Enum):
    TP = "TP"
    TN = "TN"
    FP = "FP"
    FN = "FN"


# Order used both for iteration and to break distance ties
TIE_ORDER = (
    PredictionCategory.TP,
    PredictionCategory.TN,
    PredictionCategory.FP,
    PredictionCategory.FN,
)


def category_of(prediction, label):
    if prediction == 1:
        return PredictionCategory.TP if label == 1 else PredictionCategory.FP
    return PredictionCategory.FN if label == 1 else PredictionCategory.TN


# Penultimate vectors of past predictions grouped by how the prediction turned
# out. The fingerprint ties the vectors to the model that produced them.
@dataclass
class QualityDataset:
    fingerprint: str
    dim: int
    classes: Dict[PredictionCategory, np.ndarray] = field(default_factory=OrderedDict)
    per_class: int = DEFAULT_PER_CLASS

    def __post_init__(self):
        classes = OrderedDict()
        for category in TIE_ORDER:
            vectors = np.asarray(self.classes.get(category, np.zeros((0, self.dim))), dtype=np.float64)
            vectors = vectors.reshape(-1, self.dim) if vectors.size == 0 else vectors
            if vectors.ndim != 2 or vectors.shape[1] != self.dim:
                raise DimensionError(f"{category.value} vectors", ("n", self.dim), vectors.shape)
            classes[category] = vectors
        self.classes = classes

    def sizes(self):
        return OrderedDict((c, v.shape[0]) for c, v in self.classes.items())

    def nonempty(self):
        return [c for c, v in self.classes.items() if v.shape[0] > 0]

    def to_dict(self):
        return {
            "fingerprint": self.fingerprint,
            "dim": self.dim,
            "per_class": self.per_class,
            "classes": OrderedDict((c.value, v.tolist()) for c, v in self.classes.items()),
        }

    @classmethod
    def from_dict(cls, payload):
        try:
            dim = int(payload["dim"])
            classes = {
                PredictionCategory(name): np.asarray(vectors, dtype=np.float64).reshape(-1, dim)
                for name, vectors in payload["classes"].items()
            }
            return cls(
                fingerprint=payload["fingerprint"],
                dim=dim,
                classes=classes,
                per_class=int(payload.get("per_class", DEFAULT_PER_CLASS)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"malformed quality dataset: {e}") from e


@dataclass
class QualityVerdict:
    category: PredictionCategory
    distances: Dict[PredictionCategory, float]

    def to_dict(self):
        return {
            "category": self.category.value,
            "distances": OrderedDict(
                (c.value, d) for c, d in self.distances.items()
            ),
        }


@dataclass
class CheckerReport:
    accuracy: float
    total: int
    confusion: Dict[str, Dict[str, int]]

    def to_dict(self):
        return {"accuracy": self.accuracy, "total": self.total, "confusion": self.confusion}


def split_by_category(model, labeled_data, threshold=detectors.DEFAULT_THRESHOLD):
    predictions = (detectors.predict_proba(model, labeled_data) > threshold).astype(np.int64)
    labels = detectors.true_labels(labeled_data)
    routed = OrderedDict((c, []) for c in TIE_ORDER)
    for i, (p, y) in enumerate(zip(predictions, labels)):
        routed[category_of(p, y)].append(i)
    return OrderedDict((c, detectors.select(labeled_data, idx)) for c, idx in routed.items())


def build_quality_dataset(model, subsets, per_class_cap=DEFAULT_PER_CLASS, seed=0):
    if all(detectors.sample_count(s) == 0 for s in subsets.values()):
        raise DataError("all four prediction categories are empty")
    rng = np.random.default_rng(seed)
    classes = OrderedDict()
    for category in TIE_ORDER:
        subset = subsets.get(category, [])
        n = detectors.sample_count(subset)
        if n == 0:
            logger.warning(f"No {category.value} samples, the category stays empty")
            classes[category] = np.zeros((0, model.penultimate_dim))
            continue
        picked = np.arange(n)
        if n > per_class_cap:
            picked = np.sort(rng.choice(n, size=per_class_cap, replace=False))
        classes[category] = detectors.penultimate(model, detectors.select(subset, picked))
    return QualityDataset(model_fingerprint(model), model.penultimate_dim, classes, per_class_cap)


def average_distances(vectors, quality_set, metric=DEFAULT_METRIC):
    vectors = np.asarray(vectors, dtype=np.float64).reshape(-1, quality_set.dim)
    return OrderedDict(
        (c, cdist(vectors, stored, metric=metric).mean(axis=1))
        for c, stored in quality_set.classes.items()
        if stored.shape[0] > 0
    )


def classify_vector(vector, quality_set, metric=DEFAULT_METRIC):
    if len(quality_set.nonempty()) < 2:
        raise DataError("decision checking needs at least two nonempty categories")
    distances = OrderedDict((c, float(d[0])) for c, d in average_distances(vector, quality_set, metric).items())
    best = None
    for category, d in distances.items():
        if best is None or d < distances[best]:
            best = category
    return QualityVerdict(best, distances)


def _as_single(instance):
    if isinstance(instance, FeatureVector):
        return [instance]
    if detectors.sample_count(instance) != 1:
        raise DataError("decision checking takes exactly one instance")
    return instance


def check_fingerprint(model, quality_set):
    if quality_set.fingerprint != model_fingerprint(model):
        raise StaleDatasetError(
            "the quality dataset was built from a different model, rebuild it"
        )


def check_decision(model, instance, quality_set, metric=DEFAULT_METRIC):
    check_fingerprint(model, quality_set)
    embedding = detectors.penultimate(model, _as_single(instance))[0]
    return classify_vector(embedding, quality_set, metric)


def evaluate_checker(model, quality_set, labeled_data, threshold=detectors.DEFAULT_THRESHOLD, metric=DEFAULT_METRIC):
    check_fingerprint(model, quality_set)
    if len(quality_set.nonempty()) < 2:
        raise DataError("decision checking needs at least two nonempty categories")
    n = detectors.sample_count(labeled_data)
    if n == 0:
        raise DataError("cannot evaluate the checker on an empty dataset")
    predictions = (detectors.predict_proba(model, labeled_data) > threshold).astype(np.int64)
    labels = detectors.true_labels(labeled_data)
    vectors = detectors.penultimate(model, labeled_data)
    distances = average_distances(vectors, quality_set, metric)
    ordered = list(distances)
    # argmin picks the first minimum, which follows the tie order
    verdicts = np.argmin(np.stack([distances[c] for c in ordered], axis=1), axis=1)

    confusion = OrderedDict((c.value, OrderedDict((v.value, 0) for v in TIE_ORDER)) for c in TIE_ORDER)
    correct = 0
    for p, y, v in zip(predictions, labels, verdicts):
        truth = category_of(p, y)
        verdict = ordered[v]
        confusion[truth.value][verdict.value] += 1
        correct += int(truth == verdict)
    return CheckerReport(correct / n, n, confusion)


def save_quality_dataset(path, quality_set):
    return utils.write_json(path, quality_set.to_dict())


def load_quality_dataset(path):
    try:
        payload = utils.read_json(path)
    except ValueError as e:
        raise DataError(f"{path}: {e}") from e
    return QualityDataset.from_dict(payload)


def embeddings_frame(quality_set):
    columns = [f"x{i}" for i in range(quality_set.dim)]
    frames = []
    for category, vectors in quality_set.classes.items():
        frame = pd.DataFrame(vectors, columns=columns)
        frame.insert(0, "category", category.value)
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


def export_embeddings(quality_set, path):
    if not quality_set.nonempty():
        raise DataError("cannot export an empty quality dataset")
    buffer = io.StringIO()
    embeddings_frame(quality_set).to_csv(buffer, index=False, float_format="%.17g")
    return utils.atomic_write_text(path, buffer.getvalue())


def load_embeddings(path, fingerprint=""):
    frame = pd.read_csv(path, float_precision="round_trip")
    if "category" not in frame.columns:
        raise DataError(f"{path}: missing category column")
    components: List[str] = [c for c in frame.columns if c != "category"]
    classes = {
        PredictionCategory(name): group[components].to_numpy(dtype=np.float64)
        for name, group in frame.groupby("category", sort=False)
    }
    return QualityDataset(fingerprint, len(components), classes)
