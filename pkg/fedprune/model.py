"""Partitioned neural network with exact gradients and mask-constrained updates.

Parameters live in two flat float64 vectors: the personalized part ``v``
(kept on the device) and the global part ``u`` (uploaded and aggregated).
Each parameterized layer owns a contiguous slice of one of them, weights
first, then biases.
"""

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from fedprune.data import MiniBatch
from fedprune.fileio import atomic_write_bytes

PERSONALIZED = "personalized"
GLOBAL = "global"

LayerKind = Literal["dense", "conv", "pool", "activation"]
Partition = Literal["personalized", "global"]

_HEADER_LENGTH = struct.Struct("<Q")


class ModelError(ValueError):
    """Raised for malformed architectures, shape mismatches and bad masks."""
    pass


@dataclass(frozen=True)
class LayerSpec:
    """One layer.

    ``dims`` is ``(in, out)`` for dense, ``(in_channels, out_channels, kernel)``
    for conv (stride 1, same padding, odd kernel), ``(size,)`` for max-pool and
    empty for activations, whose function is named by ``activation``.
    """
    kind: LayerKind
    dims: tuple[int, ...]
    partition: Partition
    activation: str = "relu"

    @property
    def weight_shape(self) -> tuple[int, ...] | None:
        if self.kind == "dense":
            return (self.dims[0], self.dims[1])
        if self.kind == "conv":
            c_in, c_out, k = self.dims
            return (c_out, c_in, k, k)
        return None

    @property
    def bias_size(self) -> int:
        return self.dims[1] if self.kind in ("dense", "conv") else 0

    @property
    def param_count(self) -> int:
        shape = self.weight_shape
        return 0 if shape is None else int(np.prod(shape)) + self.bias_size

    def fans(self) -> tuple[int, int]:
        if self.kind == "dense":
            return self.dims[0], self.dims[1]
        c_in, c_out, k = self.dims
        return c_in * k * k, c_out * k * k

    def to_json(self) -> dict:
        return {"kind": self.kind, "dims": list(self.dims), "partition": self.partition, "activation": self.activation}


@dataclass(frozen=True)
class _Slot:
    layer: int
    partition: Partition
    offset: int
    weight_shape: tuple[int, ...]
    bias_size: int

    @property
    def weight_size(self) -> int:
        return int(np.prod(self.weight_shape))


@dataclass(frozen=True)
class Architecture:
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]
    _slots: tuple[_Slot, ...] = field(init=False, repr=False, compare=False)
    _sizes: dict = field(init=False, repr=False, compare=False)
    class_count: int = field(init=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ModelError("architecture needs at least one layer")

        seen_global = False
        for i, layer in enumerate(self.layers):
            if layer.partition not in (PERSONALIZED, GLOBAL):
                raise ModelError(f"layer {i}: unknown partition {layer.partition!r}")
            if layer.partition == GLOBAL:
                seen_global = True
            elif seen_global:
                raise ModelError(f"layer {i}: personalized layer after the global split point")

        shape = self.input_shape
        offsets = {PERSONALIZED: 0, GLOBAL: 0}
        slots = []
        for i, layer in enumerate(self.layers):
            shape = _output_shape(i, layer, shape)
            if layer.weight_shape is not None:
                slots.append(_Slot(i, layer.partition, offsets[layer.partition], layer.weight_shape, layer.bias_size))
                offsets[layer.partition] += layer.param_count
        if len(shape) != 1 or self.layers[-1].kind != "dense":
            raise ModelError("the last layer must be dense and produce class logits")
        object.__setattr__(self, "_slots", tuple(slots))
        object.__setattr__(self, "_sizes", dict(offsets))
        object.__setattr__(self, "class_count", shape[0])

    @property
    def n_personalized(self) -> int:
        return self._sizes[PERSONALIZED]

    @property
    def n_global(self) -> int:
        return self._sizes[GLOBAL]

    def all_global(self) -> "Architecture":
        """The same network with every layer in the global part."""
        return Architecture(self.input_shape, tuple(replace(layer, partition=GLOBAL) for layer in self.layers))

    def to_json(self) -> dict:
        return {"input_shape": list(self.input_shape), "layers": [layer.to_json() for layer in self.layers]}

    @classmethod
    def from_json(cls, data: dict) -> "Architecture":
        layers = tuple(
            LayerSpec(kind=l["kind"], dims=tuple(l["dims"]), partition=l["partition"], activation=l.get("activation", "relu"))
            for l in data["layers"]
        )
        return cls(tuple(data["input_shape"]), layers)


def _output_shape(i: int, layer: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    if layer.kind == "dense":
        if len(layer.dims) != 2:
            raise ModelError(f"layer {i}: dense dims must be (in, out)")
        flat = int(np.prod(shape))
        if flat != layer.dims[0]:
            raise ModelError(f"layer {i}: dense expects {layer.dims[0]} inputs, gets {flat}")
        return (layer.dims[1],)
    if layer.kind == "conv":
        if len(layer.dims) != 3 or layer.dims[2] % 2 == 0:
            raise ModelError(f"layer {i}: conv dims must be (in_channels, out_channels, odd kernel)")
        if len(shape) != 3 or shape[0] != layer.dims[0]:
            raise ModelError(f"layer {i}: conv expects ({layer.dims[0]}, H, W) input, gets {shape}")
        return (layer.dims[1], shape[1], shape[2])
    if layer.kind == "pool":
        size = layer.dims[0] if layer.dims else 2
        if len(shape) != 3 or shape[1] % size or shape[2] % size:
            raise ModelError(f"layer {i}: pool size {size} does not tile input {shape}")
        return (shape[0], shape[1] // size, shape[2] // size)
    if layer.kind == "activation":
        if layer.activation not in _ACTIVATIONS:
            raise ModelError(f"layer {i}: unknown activation {layer.activation!r}")
        return shape
    raise ModelError(f"layer {i}: unknown kind {layer.kind!r}")


@dataclass(frozen=True, eq=False)
class PartitionedModel:
    architecture: Architecture
    personalized_params: np.ndarray
    global_params: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.personalized_params, dtype=np.float64)
        u = np.asarray(self.global_params, dtype=np.float64)
        if v.shape != (self.architecture.n_personalized,):
            raise ModelError(f"personalized part has {v.size} values, architecture needs {self.architecture.n_personalized}")
        if u.shape != (self.architecture.n_global,):
            raise ModelError(f"global part has {u.size} values, architecture needs {self.architecture.n_global}")
        object.__setattr__(self, "personalized_params", v)
        object.__setattr__(self, "global_params", u)

    def replace(self, *, personalized: np.ndarray | None = None, global_: np.ndarray | None = None) -> "PartitionedModel":
        return PartitionedModel(
            self.architecture,
            self.personalized_params if personalized is None else personalized,
            self.global_params if global_ is None else global_,
        )


@dataclass(frozen=True, eq=False)
class PruningMask:
    bits: np.ndarray
    ratio: float

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 1:
            raise ModelError("mask must be a 1-D vector")
        if not 0.0 <= self.ratio <= 1.0:
            raise ModelError(f"mask ratio must be in [0, 1], got {self.ratio}")
        if bits.size - int(bits.sum()) != pruned_count(bits.size, self.ratio):
            raise ModelError("mask zeros do not match round(ratio * N)")
        object.__setattr__(self, "bits", bits)

    @property
    def retained(self) -> int:
        return int(self.bits.sum())

    @classmethod
    def keep_all(cls, size: int) -> "PruningMask":
        return cls(np.ones(size, dtype=bool), 0.0)


@dataclass(frozen=True, eq=False)
class GradientPair:
    grad_personalized: np.ndarray
    grad_global: np.ndarray


def pruned_count(n_u: int, rho: float) -> int:
    """Round-half-up of ``rho * n_u``."""
    return min(int(np.floor(rho * n_u + 0.5)), n_u)


def pruned_size(n_v: float, n_u: float, rho: float) -> float:
    """Weights left on the device after pruning; real-valued."""
    if not 0.0 <= rho <= 1.0:
        raise ModelError(f"pruning ratio must be in [0, 1], got {rho}")
    return n_v + (1.0 - rho) * n_u


def initialize(architecture: Architecture, seed) -> PartitionedModel:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    parts = {PERSONALIZED: np.zeros(architecture.n_personalized), GLOBAL: np.zeros(architecture.n_global)}
    for slot in architecture._slots:
        fan_in, fan_out = architecture.layers[slot.layer].fans()
        a = np.sqrt(6.0 / (fan_in + fan_out))
        parts[slot.partition][slot.offset:slot.offset + slot.weight_size] = rng.uniform(-a, a, size=slot.weight_size)
    return PartitionedModel(architecture, parts[PERSONALIZED], parts[GLOBAL])


# --- layers ---

def _relu(x):
    return np.maximum(x, 0.0)


def _relu_grad(x, y):
    return (x > 0).astype(np.float64)


def _tanh_grad(x, y):
    return 1.0 - y * y


_ACTIVATIONS = {
    "relu": (_relu, _relu_grad),
    "tanh": (np.tanh, _tanh_grad),
}


def _conv_forward(x, weight, bias):
    n, c, h, w = x.shape
    k = weight.shape[-1]
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * k * k)
    out = cols @ weight.reshape(weight.shape[0], -1).T + bias
    return out.reshape(n, h, w, -1).transpose(0, 3, 1, 2), cols


def _conv_backward(dy, x_shape, cols, weight):
    n, c, h, w = x_shape
    c_out, _, k, _ = weight.shape
    pad = k // 2
    dy2 = dy.transpose(0, 2, 3, 1).reshape(n * h * w, c_out)
    dweight = (dy2.T @ cols).reshape(weight.shape)
    dbias = dy2.sum(axis=0)
    dcols = (dy2 @ weight.reshape(c_out, -1)).reshape(n, h, w, c, k, k)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + h, j:j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, pad:pad + h, pad:pad + w], dweight, dbias


def _pool_forward(x, size):
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // size, size, w // size, size).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // size, w // size, size * size)
    arg = blocks.argmax(axis=-1)
    return np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0], arg


def _pool_backward(dy, x_shape, arg, size):
    n, c, h, w = x_shape
    dblocks = np.zeros((n, c, h // size, w // size, size * size))
    np.put_along_axis(dblocks, arg[..., None], dy[..., None], axis=-1)
    dblocks = dblocks.reshape(n, c, h // size, w // size, size, size).transpose(0, 1, 2, 4, 3, 5)
    return dblocks.reshape(n, c, h, w)


def _layer_params(model: PartitionedModel) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    sources = {PERSONALIZED: model.personalized_params, GLOBAL: model.global_params}
    params = {}
    for slot in model.architecture._slots:
        flat = sources[slot.partition]
        end = slot.offset + slot.weight_size
        params[slot.layer] = (flat[slot.offset:end].reshape(slot.weight_shape), flat[end:end + slot.bias_size])
    return params


def _prepare_inputs(architecture: Architecture, inputs: np.ndarray) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 0 or x.shape[0] == 0:
        raise ModelError("batch must be nonempty")
    expected = int(np.prod(architecture.input_shape))
    if int(np.prod(x.shape[1:])) != expected:
        raise ModelError(f"input has {int(np.prod(x.shape[1:]))} features, architecture expects {expected}")
    return x.reshape((x.shape[0],) + architecture.input_shape)


def _forward(model: PartitionedModel, inputs: np.ndarray):
    arch = model.architecture
    params = _layer_params(model)
    x = _prepare_inputs(arch, inputs)
    caches = []
    for i, layer in enumerate(arch.layers):
        if layer.kind == "dense":
            weight, bias = params[i]
            flat = x.reshape(x.shape[0], -1)
            caches.append((x.shape, flat))
            x = flat @ weight + bias
        elif layer.kind == "conv":
            weight, bias = params[i]
            out, cols = _conv_forward(x, weight, bias)
            caches.append((x.shape, cols))
            x = out
        elif layer.kind == "pool":
            size = layer.dims[0] if layer.dims else 2
            out, arg = _pool_forward(x, size)
            caches.append((x.shape, arg))
            x = out
        else:
            fn, _ = _ACTIVATIONS[layer.activation]
            y = fn(x)
            caches.append((x, y))
            x = y
    return x, caches


def _backward(model: PartitionedModel, caches, dlogits: np.ndarray) -> GradientPair:
    arch = model.architecture
    params = _layer_params(model)
    grads = {PERSONALIZED: np.zeros(arch.n_personalized), GLOBAL: np.zeros(arch.n_global)}
    slots = {slot.layer: slot for slot in arch._slots}
    dx = dlogits
    for i in range(len(arch.layers) - 1, -1, -1):
        layer = arch.layers[i]
        if layer.kind == "dense":
            weight, _ = params[i]
            x_shape, flat = caches[i]
            dweight, dbias = flat.T @ dx, dx.sum(axis=0)
            dx = (dx @ weight.T).reshape(x_shape)
        elif layer.kind == "conv":
            weight, _ = params[i]
            x_shape, cols = caches[i]
            dx, dweight, dbias = _conv_backward(dx, x_shape, cols, weight)
        elif layer.kind == "pool":
            x_shape, arg = caches[i]
            dx = _pool_backward(dx, x_shape, arg, layer.dims[0] if layer.dims else 2)
            continue
        else:
            _, grad_fn = _ACTIVATIONS[layer.activation]
            x_in, y = caches[i]
            dx = dx * grad_fn(x_in, y)
            continue
        slot = slots[i]
        target = grads[slot.partition]
        end = slot.offset + slot.weight_size
        target[slot.offset:end] = dweight.ravel()
        target[end:end + slot.bias_size] = dbias
    return GradientPair(grads[PERSONALIZED], grads[GLOBAL])


def _check_labels(model: PartitionedModel, labels: np.ndarray, n: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (n,):
        raise ModelError(f"{y.size} labels for {n} inputs")
    if np.any(y < 0) or np.any(y >= model.architecture.class_count):
        raise ModelError("label outside the model's class range")
    return y


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def logits(model: PartitionedModel, inputs: np.ndarray) -> np.ndarray:
    out, _ = _forward(model, inputs)
    return out


def predict(model: PartitionedModel, inputs: np.ndarray) -> np.ndarray:
    return logits(model, inputs).argmax(axis=1)


def forward_loss(model: PartitionedModel, batch: MiniBatch) -> float:
    """Mean cross-entropy over the batch."""
    out, _ = _forward(model, batch.inputs)
    y = _check_labels(model, batch.labels, out.shape[0])
    return float(-_log_softmax(out)[np.arange(y.size), y].mean())


def backward(model: PartitionedModel, batch: MiniBatch) -> GradientPair:
    out, caches = _forward(model, batch.inputs)
    y = _check_labels(model, batch.labels, out.shape[0])
    dlogits = np.exp(_log_softmax(out))
    dlogits[np.arange(y.size), y] -= 1.0
    return _backward(model, caches, dlogits / y.size)


def _check_rate(name: str, eta: float) -> None:
    if eta < 0:
        raise ModelError(f"{name} must be >= 0, got {eta}")


def _check_mask(model: PartitionedModel, mask: PruningMask) -> None:
    if mask.bits.size != model.architecture.n_global:
        raise ModelError(f"mask has {mask.bits.size} entries, global part has {model.architecture.n_global}")


def personalized_step(model: PartitionedModel, batch: MiniBatch, eta_v: float) -> PartitionedModel:
    """One SGD step on ``v``; ``u`` is untouched."""
    _check_rate("eta_v", eta_v)
    grads = backward(model, batch)
    return model.replace(personalized=model.personalized_params - eta_v * grads.grad_personalized)


def global_step(model: PartitionedModel, batch: MiniBatch, eta_u: float) -> PartitionedModel:
    """One unmasked SGD step on ``u`` (used by the importance probe)."""
    _check_rate("eta_u", eta_u)
    grads = backward(model, batch)
    return model.replace(global_=model.global_params - eta_u * grads.grad_global)


def global_step_masked(model: PartitionedModel, batch: MiniBatch, eta_u: float, mask: PruningMask) -> PartitionedModel:
    """SGD on ``u`` restricted to retained coordinates; pruned ones do not move."""
    _check_rate("eta_u", eta_u)
    _check_mask(model, mask)
    grads = backward(model, batch)
    masked = np.where(mask.bits, grads.grad_global, 0.0)
    return model.replace(global_=model.global_params - eta_u * masked)


def joint_step(model: PartitionedModel, batch: MiniBatch, eta_v: float, eta_u: float, mask: PruningMask) -> PartitionedModel:
    """Update ``v`` and masked ``u`` from gradients taken at the same point."""
    _check_rate("eta_v", eta_v)
    _check_rate("eta_u", eta_u)
    _check_mask(model, mask)
    grads = backward(model, batch)
    return model.replace(
        personalized=model.personalized_params - eta_v * grads.grad_personalized,
        global_=model.global_params - eta_u * np.where(mask.bits, grads.grad_global, 0.0),
    )


def importance_scores(u_probe: np.ndarray, u_ref: np.ndarray) -> np.ndarray:
    """How far each global weight moved during the probe steps."""
    a, b = np.asarray(u_probe, dtype=np.float64), np.asarray(u_ref, dtype=np.float64)
    if a.shape != b.shape:
        raise ModelError(f"score inputs differ in shape: {a.shape} vs {b.shape}")
    return np.abs(a - b)


def build_mask(scores: np.ndarray, rho: float) -> PruningMask:
    """Prune the ``round(rho * N)`` lowest-scoring weights; ties prune lower indices first."""
    if not 0.0 <= rho <= 1.0:
        raise ModelError(f"pruning ratio must be in [0, 1], got {rho}")
    scores = np.asarray(scores, dtype=np.float64)
    bits = np.ones(scores.size, dtype=bool)
    order = np.argsort(scores, kind="stable")
    bits[order[:pruned_count(scores.size, rho)]] = False
    return PruningMask(bits, rho)


def apply_mask(model: PartitionedModel, mask: PruningMask) -> PartitionedModel:
    _check_mask(model, mask)
    return model.replace(global_=np.where(mask.bits, model.global_params, 0.0))


def save_checkpoint(model: PartitionedModel, path: Path) -> None:
    """Length-prefixed JSON architecture header, then ``v`` and ``u`` as little-endian float64."""
    header = json.dumps(model.architecture.to_json(), sort_keys=True).encode("utf-8")
    body = np.concatenate([model.personalized_params, model.global_params]).astype("<f8").tobytes()
    atomic_write_bytes(Path(path), _HEADER_LENGTH.pack(len(header)) + header + body)


def load_checkpoint(path: Path) -> PartitionedModel:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER_LENGTH.size:
        raise ModelError(f"{path}: truncated checkpoint")
    (length,) = _HEADER_LENGTH.unpack_from(raw)
    start = _HEADER_LENGTH.size + length
    try:
        architecture = Architecture.from_json(json.loads(raw[_HEADER_LENGTH.size:start].decode("utf-8")))
    except (ValueError, KeyError, TypeError) as e:
        raise ModelError(f"{path}: bad checkpoint header: {e}") from e
    n_v = architecture.n_personalized
    expected = 8 * (n_v + architecture.n_global)
    body = raw[start:]
    if len(body) != expected:
        raise ModelError(f"{path}: checkpoint body is {len(body)} bytes, architecture needs {expected}")
    values = np.frombuffer(body, dtype="<f8")
    return PartitionedModel(architecture, values[:n_v].astype(np.float64), values[n_v:].astype(np.float64))
