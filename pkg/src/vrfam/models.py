"""Build the MLP, FCN and PCT window classifiers and persist them as checkpoints."""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from vrfam import layers, ops
from vrfam.errors import CheckpointError, ConfigurationError
from vrfam.tensor import Tensor

MODEL_KINDS = ("mlp", "fcn", "pct")
CLASS_COUNT = 2

FCN_FILTERS = (128, 256, 128)
FCN_KERNELS = (8, 5, 3)
PCT_D_MODEL = 64
PCT_BLOCKS = 4
PCT_QK_REDUCTION = 4

CHECKPOINT_MAGIC = b"VRFAMCKP"
CHECKPOINT_FORMAT_VERSION = 1

DEFAULT_HYPER = {
    "mlp": {},
    "fcn": {"filters": FCN_FILTERS, "kernels": FCN_KERNELS},
    "pct": {"d_model": PCT_D_MODEL, "blocks": PCT_BLOCKS, "qk_reduction": PCT_QK_REDUCTION},
}


@dataclass
class ModelSpec:
    """Architecture descriptor of one classifier.

    Attributes:
        kind (str): One of "mlp", "fcn", "pct".
        window_size (int): Frames per input window.
        channels (int): Input channels per frame.
        class_count (int): Always 2.
        hyper (dict): Kind-specific structural parameters. Missing keys take
            the defaults of ``DEFAULT_HYPER``.
    """

    kind: str
    window_size: int
    channels: int
    class_count: int = CLASS_COUNT
    hyper: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigurationError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        if self.class_count != CLASS_COUNT:
            raise ConfigurationError(f"class_count is fixed at {CLASS_COUNT}, got {self.class_count}")
        if self.window_size < 1 or self.channels < 1:
            raise ConfigurationError(
                f"window_size and channels must be positive, got {self.window_size}, {self.channels}"
            )
        unknown = set(self.hyper) - set(DEFAULT_HYPER[self.kind])
        if unknown:
            raise ConfigurationError(f"unknown {self.kind} hyper-parameters: {sorted(unknown)}")
        merged = dict(DEFAULT_HYPER[self.kind])
        merged.update(self.hyper)
        self.hyper = {k: tuple(v) if isinstance(v, (list, tuple)) else v for k, v in merged.items()}
        self._check_hyper()

    def _check_hyper(self) -> None:
        if self.kind == "fcn":
            filters, kernels = self.hyper["filters"], self.hyper["kernels"]
            if not isinstance(filters, tuple) or not isinstance(kernels, tuple):
                raise ConfigurationError(f"fcn filters and kernels must be lists, got {filters!r}, {kernels!r}")
            if not filters or len(filters) != len(kernels):
                raise ConfigurationError(f"filters {list(filters)} and kernels {list(kernels)} differ in length")
            if not all(_positive_int(value) for value in filters + kernels):
                raise ConfigurationError(
                    f"fcn filters and kernels must be positive integers, got {list(filters)}, {list(kernels)}"
                )
        elif self.kind == "pct":
            d_model, blocks, reduction = (self.hyper[key] for key in ("d_model", "blocks", "qk_reduction"))
            if not all(_positive_int(value) for value in (d_model, blocks, reduction)):
                raise ConfigurationError(
                    f"pct d_model, blocks and qk_reduction must be positive integers, got {d_model}, {blocks}, "
                    f"{reduction}"
                )
            if d_model % 4:
                raise ConfigurationError(f"PCT embed dim must be divisible by 4, got {d_model}")
            if d_model % reduction:
                raise ConfigurationError(f"qk_reduction {reduction} does not divide d_model {d_model}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "window_size": self.window_size,
            "channels": self.channels,
            "class_count": self.class_count,
            "hyper": {k: list(v) if isinstance(v, tuple) else v for k, v in self.hyper.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        return cls(
            kind=data["kind"],
            window_size=int(data["window_size"]),
            channels=int(data["channels"]),
            class_count=int(data.get("class_count", CLASS_COUNT)),
            hyper=dict(data.get("hyper", {})),
        )


def _positive_int(value) -> bool:
    return isinstance(value, (int, np.integer)) and not isinstance(value, bool) and value > 0


def mlp_widths(input_dim: int) -> List[int]:
    """Return the MLP layer widths D -> floor(D/2) -> floor(D/4) -> 2."""
    return [input_dim, input_dim // 2, input_dim // 4, CLASS_COUNT]


class MLP(layers.Module):
    """Flatten the window and halve the width twice before the 2-way softmax."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        super().__init__()
        input_dim = spec.window_size * spec.channels
        if input_dim < 4:
            raise ConfigurationError(f"MLP needs window_size*channels >= 4, got {input_dim}")
        self.widths = mlp_widths(input_dim)
        self.hidden = []
        for index, (fan_in, fan_out) in enumerate(zip(self.widths[:-2], self.widths[1:-1])):
            self.hidden.append(self.add_child(f"hidden{index + 1}", layers.Dense(fan_in, fan_out, rng)))
        self.output = self.add_child("output", layers.Dense(self.widths[-2], CLASS_COUNT, rng))

    def forward(self, x: Tensor) -> Tensor:
        h = ops.reshape(x, (x.shape[0], -1))
        for layer in self.hidden:
            h = ops.relu(layer(h))
        return ops.softmax(self.output(h))


class FCN(layers.Module):
    """Three conv -> batch norm -> ReLU blocks, global average pooling, dense head."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        super().__init__()
        filters, kernels = spec.hyper["filters"], spec.hyper["kernels"]
        if len(filters) != len(kernels):
            raise ConfigurationError(f"filters {filters} and kernels {kernels} differ in length")
        if spec.window_size < max(kernels):
            raise ConfigurationError(
                f"window_size {spec.window_size} is shorter than the largest kernel {max(kernels)}"
            )
        self.convs, self.norms = [], []
        in_channels = spec.channels
        for index, (out_channels, kernel) in enumerate(zip(filters, kernels), start=1):
            self.convs.append(self.add_child(f"conv{index}", layers.Conv1d(in_channels, out_channels, kernel, rng)))
            self.norms.append(self.add_child(f"bn{index}", layers.BatchNorm1d(out_channels)))
            in_channels = out_channels
        self.head = self.add_child("head", layers.Dense(in_channels, CLASS_COUNT, rng))

    def forward(self, x: Tensor) -> Tensor:
        # windows arrive as [batch, T, C]
        h = ops.transpose(x, (0, 2, 1))
        for conv, norm in zip(self.convs, self.norms):
            h = ops.relu(norm(conv(h)))
        return ops.softmax(self.head(ops.global_avg_pool(h)))


class AttentionBlock(layers.Module):
    """Self-attention with a residual add, then position-wise linear -> BN -> ReLU."""

    def __init__(self, d_model: int, reduction: int, rng: np.random.Generator):
        super().__init__()
        self.attention = self.add_child("attention", layers.SelfAttention(d_model, rng, reduction))
        self.linear = self.add_child("linear", layers.Dense(d_model, d_model, rng))
        self.norm = self.add_child("bn", layers.BatchNorm1d(d_model))

    def forward(self, x: Tensor) -> Tensor:
        h = ops.add(x, self.attention(x))
        h = ops.transpose(self.linear(h), (0, 2, 1))
        return ops.transpose(ops.relu(self.norm(h)), (0, 2, 1))


class PCT(layers.Module):
    """Simplified point cloud transformer.

    Block outputs feed the next block directly; there is no concatenation of
    block outputs and no max/avg pooling stage. The last block is averaged
    over time positions before the dense head.
    """

    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        super().__init__()
        d_model, reduction = int(spec.hyper["d_model"]), int(spec.hyper["qk_reduction"])
        if d_model % 4:
            raise ConfigurationError(f"PCT embed dim must be divisible by 4, got {d_model}")
        self.embedding = self.add_child("embedding", layers.Dense(spec.channels, d_model, rng))
        self.blocks = [
            self.add_child(f"block{index}", AttentionBlock(d_model, reduction, rng))
            for index in range(1, int(spec.hyper["blocks"]) + 1)
        ]
        self.head = self.add_child("head", layers.Dense(d_model, CLASS_COUNT, rng))

    def features(self, x: Tensor) -> Tensor:
        """Return the [batch, d_model] vector the head classifies."""
        h = self.embedding(x)
        for block in self.blocks:
            h = block(h)
        return ops.reduce_mean(h, axis=1)

    def forward(self, x: Tensor) -> Tensor:
        return ops.softmax(self.head(self.features(x)))


def build_mlp(spec: ModelSpec, seed: int = 0) -> MLP:
    return MLP(spec, np.random.default_rng(seed))


def build_fcn(spec: ModelSpec, seed: int = 0) -> FCN:
    return FCN(spec, np.random.default_rng(seed))


def build_pct(spec: ModelSpec, seed: int = 0) -> PCT:
    return PCT(spec, np.random.default_rng(seed))


BUILDERS = {"mlp": build_mlp, "fcn": build_fcn, "pct": build_pct}


def build_model(spec: ModelSpec, seed: int = 0) -> layers.Module:
    """Build the classifier described by ``spec`` with seeded initialization."""
    return BUILDERS[spec.kind](spec, seed)


@dataclass
class TrainedOn:
    """Provenance of a checkpoint."""

    code: str
    window_size: int
    split_seed: int


@dataclass
class Checkpoint:
    """Architecture, parameters and provenance of one trained grid cell.

    ``norm`` holds the per-channel training mean/std the inputs were
    normalized with, so held-out windows can be re-scored without the
    training set.
    """

    spec: ModelSpec
    parameters: Dict[str, np.ndarray]
    trained_on: TrainedOn
    norm: Optional[dict] = None
    format_version: int = CHECKPOINT_FORMAT_VERSION

    @classmethod
    def from_model(cls, model: layers.Module, spec: ModelSpec, trained_on: TrainedOn, norm: dict = None):
        return cls(spec=spec, parameters=model.state_dict(), trained_on=trained_on, norm=norm)

    def to_model(self) -> layers.Module:
        """Rebuild the model and load the stored parameters; returned in inference mode."""
        model = build_model(self.spec)
        model.load_state_dict(self.parameters)
        return model.eval()


def save_checkpoint(checkpoint: Checkpoint, path) -> None:
    """Write ``checkpoint`` as magic, manifest length, JSON manifest, float32 payload.

    The payload holds every tensor as little-endian float32 in manifest
    order; the manifest indexes each tensor by name, shape and byte offset.
    """
    index, chunks, offset = [], [], 0
    for name in sorted(checkpoint.parameters):
        array = np.ascontiguousarray(checkpoint.parameters[name], dtype="<f4")
        index.append({"name": name, "shape": list(array.shape), "offset": offset})
        chunks.append(array.tobytes())
        offset += array.nbytes
    manifest = {
        "format_version": checkpoint.format_version,
        "spec": checkpoint.spec.to_dict(),
        "trained_on": vars(checkpoint.trained_on),
        "norm": checkpoint.norm,
        "tensors": index,
        "payload_bytes": offset,
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as stream:
        stream.write(CHECKPOINT_MAGIC)
        stream.write(struct.pack("<Q", len(header)))
        stream.write(header)
        for chunk in chunks:
            stream.write(chunk)


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint written by :func:`save_checkpoint`.

    Raises
    ------
    CheckpointError
        On a wrong magic, an unknown format version or a truncated payload.
    """
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a vrfam checkpoint")
    start = len(CHECKPOINT_MAGIC)
    if len(raw) < start + 8:
        raise CheckpointError(f"{path}: truncated before the manifest length")
    (header_length,) = struct.unpack("<Q", raw[start:start + 8])
    header_end = start + 8 + header_length
    if len(raw) < header_end:
        raise CheckpointError(f"{path}: truncated inside the manifest")
    try:
        manifest = json.loads(raw[start + 8:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as error:
        raise CheckpointError(f"{path}: unreadable manifest ({error})") from None
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {manifest.get('format_version')}")
    payload = raw[header_end:]
    if len(payload) != manifest["payload_bytes"]:
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, expected {manifest['payload_bytes']}")
    parameters = {}
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        values = np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"])
        parameters[entry["name"]] = values.reshape(entry["shape"]).astype(np.float32)
    return Checkpoint(
        spec=ModelSpec.from_dict(manifest["spec"]),
        parameters=parameters,
        trained_on=TrainedOn(**manifest["trained_on"]),
        norm=manifest["norm"],
        format_version=manifest["format_version"],
    )
