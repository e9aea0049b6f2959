# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from fedhunter import detectors, neural_core, utils
from fedhunter.errors import ConfigError, DataError, DimensionError, FedHunterError, KindError, TrainingError
from fedhunter.provenance_graph import ProvenanceGraph, edge_subgraph

logger = logging.getLogger(__name__)

# Counters carried in a model state rather than learned weights. They are not
# averaged: the aggregate takes the value of the lowest client id.
COUNTER_SUFFIX = "num_batches_tracked"

PARTITIONERS = ("equal",)


# The message a client sends back to the server at the end of a round
@dataclass
class ClientUpdate:
    client_id: int
    layers: List[Dict[str, Any]]
    n_k: int
    losses: List[float] = field(default_factory=list)

    def __post_init__(self):
        if self.n_k < 1:
            raise DataError(f"client {self.client_id} reported n_k={self.n_k}, expected at least 1")

    def to_json(self):
        return utils.dumps(asdict(self))

    @classmethod
    def from_json(cls, text):
        payload = json.loads(text)
        return cls(
            client_id=int(payload["client_id"]),
            layers=payload["layers"],
            n_k=int(payload["n_k"]),
            losses=payload.get("losses", []),
        )


@dataclass
class FederatedConfig:
    clients: int = 10
    rounds: int = 20
    epochs: Optional[int] = None
    batch_size: Optional[int] = None
    lr: Optional[float] = None
    seed: int = 0
    model: str = "cnn-gru"
    partition: str = "equal"

    def __post_init__(self):
        if self.clients < 1:
            raise ConfigError(f"need at least one client, got {self.clients}")
        if self.rounds < 1:
            raise ConfigError(f"need at least one round, got {self.rounds}")
        if self.epochs is not None and self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError(f"batch size must be positive, got {self.batch_size}")
        if self.lr is not None and self.lr < 0:
            raise ConfigError(f"learning rate must be non-negative, got {self.lr}")
        if self.partition not in PARTITIONERS:
            raise ConfigError(f"unknown partition {self.partition}, expected one of {PARTITIONERS}")
        try:
            detectors.canonical_kind(self.model)
        except KindError as e:
            raise ConfigError(str(e)) from e

    # Fills the model-specific training defaults left unset.
    def resolved(self):
        epochs, batch_size, lr = detectors.TRAINING_DEFAULTS[detectors.canonical_kind(self.model)]
        return FederatedConfig(
            clients=self.clients,
            rounds=self.rounds,
            epochs=epochs if self.epochs is None else self.epochs,
            batch_size=batch_size if self.batch_size is None else self.batch_size,
            lr=lr if self.lr is None else self.lr,
            seed=self.seed,
            model=self.model,
            partition=self.partition,
        )

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, payload, **overrides):
        known = {k: v for k, v in payload.items() if k in cls.__dataclass_fields__}
        unknown = sorted(set(payload) - set(known))
        if unknown:
            raise ConfigError(f"unknown configuration keys {unknown}")
        known.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**known)

    @classmethod
    def from_json(cls, path, **overrides):
        try:
            payload = utils.read_json(path)
        except ValueError as e:
            raise ConfigError(f"{path}: {e}") from e
        if not isinstance(payload, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(payload, **overrides)


@dataclass
class RoundLog:
    round_index: int
    client_losses: Dict[int, List[float]]
    report: Optional[detectors.DetectionReport] = None

    def to_dict(self):
        return {
            "round": self.round_index,
            "client_losses": {str(k): v for k, v in sorted(self.client_losses.items())},
            "report": None if self.report is None else self.report.to_dict(),
        }


def partition_equal(data, num_clients, seed=0):
    n = detectors.sample_count(data)
    if num_clients < 1:
        raise ConfigError(f"need at least one client, got {num_clients}")
    if num_clients > n:
        raise DataError(f"cannot split {n} samples across {num_clients} clients")
    order = np.random.default_rng(seed).permutation(n)
    parts = [np.sort(part) for part in np.array_split(order, num_clients)]
    if isinstance(data, ProvenanceGraph):
        return [
            edge_subgraph(data, [data.edges[i].id for i in part], name=f"{data.name}:client{k}")
            for k, part in enumerate(parts)
        ]
    return [detectors.select(data, part) for part in parts]


def aggregate(updates):
    if not updates:
        raise DataError("cannot aggregate an empty list of client updates")
    updates = sorted(updates, key=lambda u: u.client_id)
    reference = updates[0]
    total = sum(u.n_k for u in updates)
    names = [layer["name"] for layer in reference.layers]
    for u in updates[1:]:
        if [layer["name"] for layer in u.layers] != names:
            raise DataError(
                f"client {u.client_id} sent layers that differ from client {reference.client_id}"
            )
        for layer, ref in zip(u.layers, reference.layers):
            if list(layer["shape"]) != list(ref["shape"]) or len(layer["data"]) != len(ref["data"]):
                raise DimensionError(
                    f"client {u.client_id} layer {layer['name']}",
                    tuple(ref["shape"]),
                    tuple(layer["shape"]),
                )

    merged = []
    for i, ref in enumerate(reference.layers):
        if ref["name"].endswith(COUNTER_SUFFIX):
            merged.append(dict(ref))
            continue
        # Summed in ascending client id order
        acc = None
        for u in updates:
            term = (u.n_k / total) * np.asarray(u.layers[i]["data"], dtype=np.float64)
            acc = term if acc is None else acc + term
        merged.append({"name": ref["name"], "shape": list(ref["shape"]), "data": acc.tolist()})
    return merged


def _identity_transport(message):
    return message


def _local_round(kind, global_layers, client_id, data, config, round_index, transport):
    model = neural_core.MODEL_REGISTRY[kind]()
    model.load_state_dict(neural_core.layers_state(model, global_layers))
    seed = utils.derive_seed(config.seed, client_id, round_index)
    try:
        _, history = detectors.train_local(
            model, data, epochs=config.epochs, batch_size=config.batch_size, lr=config.lr, seed=seed
        )
    except FedHunterError as e:
        raise TrainingError(
            f"client {client_id} failed in round {round_index}: {e}",
            epoch=getattr(e, "epoch", None),
            client_id=client_id,
            round_index=round_index,
        ) from e
    update = ClientUpdate(
        client_id, neural_core.state_layers(model.state_dict()), detectors.sample_count(data), history
    )
    return ClientUpdate.from_json(transport(update.to_json()))


def run_federated(config, model_kind=None, train_data=None, test_data=None, transport=None):
    kind = detectors.canonical_kind(model_kind or config.model)
    config = config.resolved()
    transport = transport or _identity_transport
    if train_data is None or detectors.sample_count(train_data) == 0:
        raise DataError("federated training needs nonempty training data")
    parts = partition_equal(train_data, config.clients, seed=config.seed)
    global_model = detectors.create_model(kind, seed=config.seed)
    workers = max(1, min(utils.worker_count(), config.clients))
    logger.info(
        f"Training {kind} with {config.clients} clients for {config.rounds} rounds on {workers} workers"
    )

    logs = []
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for round_index in range(1, config.rounds + 1):
            global_layers = neural_core.state_layers(global_model.state_dict())
            futures = [
                pool.submit(
                    _local_round, kind, global_layers, client_id, data, config, round_index, transport
                )
                for client_id, data in enumerate(parts)
            ]
            # Results are collected in client order, the first failure aborts the round
            updates = [f.result() for f in futures]
            global_model.load_state_dict(neural_core.layers_state(global_model, aggregate(updates)))

            report = None
            if test_data is not None and detectors.sample_count(test_data) > 0:
                report = detectors.evaluate(global_model, test_data)
            log = RoundLog(round_index, {u.client_id: list(u.losses) for u in updates}, report)
            logs.append(log)
            if report is not None:
                logger.info(
                    f"round {round_index}: accuracy {report.accuracy:.4f}, f1 {report.f1}"
                )
            else:
                logger.info(f"round {round_index} done")

    global_model.metadata = {
        "round": config.rounds,
        "seed": config.seed,
        "config": config.to_dict(),
        "metrics_history": [log.report.to_dict() for log in logs if log.report is not None],
    }
    return neural_core.to_checkpoint(global_model), logs


def write_round_logs(path, logs):
    lines = [utils.dumps(log.to_dict()) for log in logs]
    return utils.atomic_write_text(path, "".join(line + "\n" for line in lines))


def read_round_logs(path):
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
