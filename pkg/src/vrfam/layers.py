"""Trainable layers built on the tensor primitives."""

import math
from typing import Dict, Iterator, Tuple

import numpy as np

from vrfam import ops
from vrfam.errors import CheckpointError, ConfigurationError
from vrfam.tensor import Tensor


def glorot_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, fan_out: int) -> Tensor:
    """Draw a float32 parameter from U(-sqrt(6/(fan_in+fan_out)), +sqrt(...))."""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class Module:
    """Base class for layers and models.

    A module owns named parameters (tensors that receive gradients), named
    buffers (arrays such as running statistics) and named child modules.
    """

    def __init__(self):
        self.__parameters: Dict[str, Tensor] = {}
        self.__buffers: Dict[str, np.ndarray] = {}
        self.__children: Dict[str, "Module"] = {}
        self.training = True

    def add_parameter(self, name: str, tensor: Tensor) -> Tensor:
        self.__parameters[name] = tensor
        return tensor

    def add_buffer(self, name: str, array: np.ndarray) -> np.ndarray:
        self.__buffers[name] = array
        return array

    def add_child(self, name: str, module: "Module") -> "Module":
        self.__children[name] = module
        return module

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        return iter(self.__children.items())

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        """Yield ``(dotted name, tensor)`` for every parameter, depth first."""
        for name, tensor in self.__parameters.items():
            yield prefix + name, tensor
        for name, child in self.__children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, array in self.__buffers.items():
            yield prefix + name, array
        for name, child in self.__children.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self.named_parameters())

    def parameter_count(self) -> int:
        return sum(t.data.size for _, t in self.named_parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Return copies of all parameters and buffers keyed by dotted name."""
        state = {name: t.data.copy() for name, t in self.named_parameters()}
        state.update({name: a.copy() for name, a in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """Copy ``state`` into the parameters and buffers in place.

        Raises
        ------
        CheckpointError
            If the names or shapes do not match the module's inventory.
        """
        targets: Dict[str, np.ndarray] = {name: t.data for name, t in self.named_parameters()}
        targets.update(dict(self.named_buffers()))
        if set(targets) != set(state):
            missing = sorted(set(targets) - set(state))
            unexpected = sorted(set(state) - set(targets))
            raise CheckpointError(f"state mismatch: missing {missing}, unexpected {unexpected}")
        for name, target in targets.items():
            source = np.asarray(state[name])
            if source.shape != target.shape:
                raise CheckpointError(f"{name}: shape {source.shape} does not match {target.shape}")
            target[...] = source

    def zero_grad(self) -> None:
        for _, tensor in self.named_parameters():
            tensor.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.__children.items():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)


class Dense(Module):
    """Affine map over the last axis of the input."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        self.weight = self.add_parameter(
            "weight", glorot_uniform(rng, (in_features, out_features), in_features, out_features)
        )
        self.bias = self.add_parameter("bias", zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.dense(x, self.weight, self.bias)


class Conv1d(Module):
    """Stride-1 "same" convolution over x [batch, channels, T]."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator):
        super().__init__()
        self.kernel_size = kernel_size
        shape = (out_channels, in_channels, kernel_size)
        self.weight = self.add_parameter(
            "weight", glorot_uniform(rng, shape, in_channels * kernel_size, out_channels * kernel_size)
        )
        self.bias = self.add_parameter("bias", zeros(out_channels))

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv1d(x, self.weight, self.bias)


class BatchNorm1d(Module):
    """Batch normalization with running statistics for x [batch, channels, T]."""

    def __init__(self, channels: int):
        super().__init__()
        self.gamma = self.add_parameter("gamma", ones(channels))
        self.beta = self.add_parameter("beta", zeros(channels))
        self.running_mean = self.add_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.running_var = self.add_buffer("running_var", np.ones(channels, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return ops.batchnorm1d(
            x,
            self.gamma,
            self.beta,
            training=self.training,
            running_mean=self.running_mean,
            running_var=self.running_var,
        )


class SelfAttention(Module):
    """Single-head scaled dot-product self-attention over x [batch, T, d_model].

    Queries and keys have ``d_model // reduction`` features; values keep
    ``d_model`` features.
    """

    def __init__(self, d_model: int, rng: np.random.Generator, reduction: int = 4):
        super().__init__()
        if d_model % reduction:
            raise ConfigurationError(
                f"embed dim {d_model} is not divisible by the query/key reduction {reduction}"
            )
        width = d_model // reduction
        self.query = self.add_child("query", Dense(d_model, width, rng, bias=False))
        self.key = self.add_child("key", Dense(d_model, width, rng, bias=False))
        self.value = self.add_child("value", Dense(d_model, d_model, rng))

    def forward(self, x: Tensor, return_weights: bool = False):
        return ops.scaled_dot_attention(
            x,
            self.query.weight,
            self.key.weight,
            self.value.weight,
            self.value.bias,
            return_weights=return_weights,
        )

    def __call__(self, x: Tensor, return_weights: bool = False):
        return self.forward(x, return_weights=return_weights)
