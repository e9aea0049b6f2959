# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

import enum
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Dict, List

import torch

from fedhunter import utils
from fedhunter.errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DimensionError,
    KindError,
    TrainingError,
)

logger = logging.getLogger(__name__)

DTYPE = torch.float64
CHECKPOINT_VERSION = 1

# BatchNorm running statistics follow x_run = 0.99 * x_run + 0.01 * x_batch,
# which is torch momentum 0.01.
BATCHNORM_EPS = 1e-3
BATCHNORM_MOMENTUM = 0.99


class LayerKind(enum.Enum):
    Conv1D = "Conv1D"
    BatchNorm1D = "BatchNorm1D"
    MaxPool1D = "MaxPool1D"
    Flatten = "Flatten"
    GRU = "GRU"
    Dense = "Dense"
    Concatenate = "Concatenate"
    Dropout = "Dropout"
    ReLU = "ReLU"
    Sigmoid = "Sigmoid"
    Softmax = "Softmax"


REQUIRED_HYPERPARAMS = {
    LayerKind.Conv1D: ("in_channels", "filters", "kernel_size"),
    LayerKind.BatchNorm1D: ("features",),
    LayerKind.MaxPool1D: ("pool_size",),
    LayerKind.Flatten: (),
    LayerKind.GRU: ("input_size", "units"),
    LayerKind.Dense: ("in_features", "units"),
    LayerKind.Concatenate: (),
    LayerKind.Dropout: ("rate",),
    LayerKind.ReLU: (),
    LayerKind.Sigmoid: (),
    LayerKind.Softmax: (),
}


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: LayerKind
    hyperparams: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        missing = [k for k in REQUIRED_HYPERPARAMS[self.kind] if k not in self.hyperparams]
        if missing:
            raise ConfigError(f"layer {self.name} ({self.kind.value}) misses {missing}")


# Max pooling with stride 1 and "same" padding: the sequence length is preserved
# by padding the tail with -inf.
class SamePadMaxPool1d(torch.nn.Module):
    def __init__(self, pool_size):
        super().__init__()
        self.pool_size = pool_size

    def forward(self, x):
        x = torch.nn.functional.pad(x, (0, self.pool_size - 1), value=-math.inf)
        return torch.nn.functional.max_pool1d(x, self.pool_size, stride=1)


# Keras-style flatten of a (batch, channels, length) activation: time-major.
class ChannelsLastFlatten(torch.nn.Module):
    def forward(self, x):
        return x.transpose(1, 2).flatten(start_dim=1)


# GRU over a (batch, length, features) sequence returning the final hidden state.
class LastStateGRU(torch.nn.Module):
    def __init__(self, input_size, units):
        super().__init__()
        self.gru = torch.nn.GRU(input_size, units, batch_first=True)

    def forward(self, x):
        _, h = self.gru(x)
        return h[-1]


class Concatenate(torch.nn.Module):
    def forward(self, *xs):
        return torch.cat(xs, dim=-1)


# Inverted dropout drawing its mask from an explicit generator, so that clients
# training concurrently never share the global random state.
class SeededDropout(torch.nn.Module):
    def __init__(self, rate):
        super().__init__()
        assert 0.0 <= rate < 1.0
        self.rate = rate
        self.generator = None

    def forward(self, x):
        if not self.training or self.rate == 0.0:
            return x
        keep = 1.0 - self.rate
        mask = torch.bernoulli(torch.full_like(x, keep), generator=self.generator)
        return x * mask / keep


def build_layer(spec: LayerSpec):
    hp = spec.hyperparams
    kind = spec.kind
    if kind == LayerKind.Conv1D:
        layer = torch.nn.Conv1d(
            hp["in_channels"],
            hp["filters"],
            hp["kernel_size"],
            padding=hp["kernel_size"] // 2,
        )
    elif kind == LayerKind.BatchNorm1D:
        layer = torch.nn.BatchNorm1d(
            hp["features"], eps=BATCHNORM_EPS, momentum=1.0 - BATCHNORM_MOMENTUM
        )
    elif kind == LayerKind.MaxPool1D:
        layer = SamePadMaxPool1d(hp["pool_size"])
    elif kind == LayerKind.Flatten:
        layer = ChannelsLastFlatten()
    elif kind == LayerKind.GRU:
        layer = LastStateGRU(hp["input_size"], hp["units"])
    elif kind == LayerKind.Dense:
        layer = torch.nn.Linear(hp["in_features"], hp["units"], bias=hp.get("bias", True))
    elif kind == LayerKind.Concatenate:
        layer = Concatenate()
    elif kind == LayerKind.Dropout:
        layer = SeededDropout(hp["rate"])
    elif kind == LayerKind.ReLU:
        layer = torch.nn.ReLU()
    elif kind == LayerKind.Sigmoid:
        layer = torch.nn.Sigmoid()
    elif kind == LayerKind.Softmax:
        layer = torch.nn.Softmax(dim=-1)
    else:
        raise ConfigError(f"unsupported layer kind {kind}")

    activation = hp.get("activation")
    if activation == "relu":
        layer = torch.nn.Sequential(layer, torch.nn.ReLU())
    elif activation == "sigmoid":
        layer = torch.nn.Sequential(layer, torch.nn.Sigmoid())
    elif activation is not None:
        raise ConfigError(f"unsupported activation {activation} on {spec.name}")
    return layer.to(DTYPE)


# Glorot-uniform weights, zero biases, drawn from a generator seeded with seed.
def initialize(model, seed):
    generator = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if p.dim() >= 2:
                receptive = math.prod(p.shape[2:])
                fan_in = p.shape[1] * receptive
                fan_out = p.shape[0] * receptive
                bound = math.sqrt(6.0 / (fan_in + fan_out))
                p.uniform_(-bound, bound, generator=generator)
            elif name.rsplit(".", 1)[-1].startswith("bias"):
                p.zero_()
    return model


MODEL_REGISTRY = {}


def register_model(kind):
    def wrap(cls):
        cls.model_kind = kind
        MODEL_REGISTRY[kind] = cls
        return cls

    return wrap


def _parameter_versions(model):
    return tuple(p._version for p in model.parameters())


class ForwardCache:
    def __init__(self, model, inputs, output):
        self.inputs = inputs
        self.output = output
        self.versions = _parameter_versions(model)
        self.consumed = False


def forward(model, *inputs, training=False):
    if hasattr(model, "check_input"):
        model.check_input(*inputs)
    leaves = []
    for x in inputs:
        if torch.is_tensor(x) and x.is_floating_point():
            x = x.detach().clone().requires_grad_(True)
        leaves.append(x)
    model.train(training)
    with torch.enable_grad():
        output = model(*leaves)
    return output, ForwardCache(model, leaves, output)


def backward(model, cache, output_gradient):
    if cache.consumed:
        raise ContractError("forward cache was already used for a backward pass")
    if cache.versions != _parameter_versions(model):
        raise ContractError("model parameters changed since the forward pass")
    if output_gradient.shape != cache.output.shape:
        raise DimensionError(
            "output gradient", tuple(cache.output.shape), tuple(output_gradient.shape)
        )
    cache.consumed = True
    differentiable = [x for x in cache.inputs if torch.is_tensor(x) and x.requires_grad]
    named = list(model.named_parameters())
    targets = differentiable + [p for _, p in named]
    if cache.output.requires_grad:
        grads = torch.autograd.grad(
            cache.output, targets, grad_outputs=output_gradient, allow_unused=True
        )
    else:
        grads = [None] * len(targets)
    grads = [torch.zeros_like(t) if g is None else g for t, g in zip(targets, grads)]
    input_grads = grads[: len(differentiable)]
    param_grads = OrderedDict(
        (name, g) for (name, _), g in zip(named, grads[len(differentiable):])
    )
    if len(input_grads) == 1:
        input_grads = input_grads[0]
    return input_grads, param_grads


# One Adam update with bias correction. The returned optimizer carries the
# moment estimates and must be passed back in on the next step.
def adam_step(params, grads, state=None, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    params = list(params)
    grads = list(grads)
    assert len(params) == len(grads)
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise DimensionError("gradient", tuple(p.shape), tuple(g.shape))
        if not torch.isfinite(g).all():
            raise TrainingError("non-finite gradient in Adam step")
    if state is None:
        state = torch.optim.Adam(params, lr=lr, betas=(beta1, beta2), eps=eps)
    for p, g in zip(params, grads):
        p.grad = g.detach().clone()
    state.step()
    return state


@dataclass
class ModelCheckpoint:
    model_kind: str
    layers: List[Dict[str, Any]]
    metadata: Dict[str, Any] = field(default_factory=dict)
    format_version: int = CHECKPOINT_VERSION

    def to_dict(self):
        return {
            "format_version": self.format_version,
            "model_kind": self.model_kind,
            "layers": self.layers,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, payload):
        try:
            return cls(
                model_kind=payload["model_kind"],
                layers=payload["layers"],
                metadata=payload.get("metadata", {}),
                format_version=payload["format_version"],
            )
        except (KeyError, TypeError) as e:
            raise CheckpointError(f"malformed checkpoint: missing {e}") from e


def state_layers(state_dict):
    return [
        {
            "name": name,
            "shape": list(t.shape),
            "data": t.detach().reshape(-1).tolist(),
        }
        for name, t in state_dict.items()
    ]


def layers_state(model, layers):
    reference = model.state_dict()
    names = [layer["name"] for layer in layers]
    if sorted(names) != sorted(reference):
        missing = sorted(set(reference) - set(names))
        extra = sorted(set(names) - set(reference))
        raise CheckpointError(
            f"layers do not match the {model.model_kind} architecture: missing {missing}, unexpected {extra}"
        )
    state = OrderedDict()
    for layer in layers:
        ref = reference[layer["name"]]
        shape = tuple(layer["shape"])
        if shape != tuple(ref.shape) or len(layer["data"]) != ref.numel():
            raise CheckpointError(
                f"layer {layer['name']} has shape {shape}, architecture declares {tuple(ref.shape)}"
            )
        state[layer["name"]] = torch.tensor(layer["data"], dtype=ref.dtype).reshape(shape)
    return state


def to_checkpoint(model):
    return ModelCheckpoint(
        model_kind=model.model_kind,
        layers=state_layers(model.state_dict()),
        metadata=dict(getattr(model, "metadata", {})),
    )


def from_checkpoint(checkpoint, expected_kind=None):
    if checkpoint.format_version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {checkpoint.format_version}, expected {CHECKPOINT_VERSION}"
        )
    if expected_kind is not None and checkpoint.model_kind != expected_kind:
        raise KindError(
            f"checkpoint holds a {checkpoint.model_kind} model, expected {expected_kind}"
        )
    # Model classes register themselves on import
    from fedhunter import detectors  # noqa: F401

    if checkpoint.model_kind not in MODEL_REGISTRY:
        raise KindError(f"unknown model kind {checkpoint.model_kind}")
    model = MODEL_REGISTRY[checkpoint.model_kind]()
    model.load_state_dict(layers_state(model, checkpoint.layers))
    model.metadata = dict(checkpoint.metadata)
    model.eval()
    return model


def checkpoint_text(model):
    return utils.dumps(to_checkpoint(model).to_dict()) + "\n"


def save_checkpoint(model, path):
    return utils.atomic_write_text(path, checkpoint_text(model))


def load_checkpoint(path, expected_kind=None):
    try:
        payload = utils.read_json(path)
    except ValueError as e:
        raise CheckpointError(f"{path}: cannot parse checkpoint ({e})") from e
    return from_checkpoint(ModelCheckpoint.from_dict(payload), expected_kind)


def model_fingerprint(model):
    return utils.fingerprint(utils.dumps(state_layers(model.state_dict())))
