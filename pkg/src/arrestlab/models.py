"""Compact classifiers split into a backbone (representation) and a head.

A model's layer plan is a tuple of small layer descriptions.  The backbone is
everything up to ``representation_tap``; the head is the final linear layer
that maps the representation to logits.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

CHECKPOINT_MAGIC = b"ARRESTCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class Layer:
    kind: str  # conv | fc | relu | tanh | gap | flatten
    out: int = 0
    kernel: int = 3
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class ArchitectureSpec:
    name: str
    layers: tuple[Layer, ...]
    representation_tap: int
    """Number of leading layers forming the backbone."""
    spatial_tap: int | None = None
    """Number of leading layers producing the pre-pool feature map, if any."""

    def __post_init__(self):
        head = self.layers[self.representation_tap:]
        if len(head) != 1 or head[0].kind != "fc":
            raise ValueError(f"{self.name}: representation tap must feed the final fc layer")


def small_mlp(width: int = 256, rep: int = 128) -> ArchitectureSpec:
    return ArchitectureSpec(
        "small-mlp",
        (Layer("flatten"), Layer("fc", width), Layer("relu"), Layer("fc", rep), Layer("relu"),
         Layer("fc")),
        representation_tap=5,
    )


def small_cnn(channels: int = 16, rep: int = 128) -> ArchitectureSpec:
    return ArchitectureSpec(
        "small-cnn",
        (Layer("conv", channels, 3, 1, 1), Layer("relu"),
         Layer("conv", rep, 3, 2, 1), Layer("relu"),
         Layer("gap"), Layer("fc")),
        representation_tap=5,
        spatial_tap=4,
    )


REGISTRY = {"small-mlp": small_mlp, "small-cnn": small_cnn}


def get_architecture(name: str) -> ArchitectureSpec:
    try:
        return REGISTRY[name]()
    except KeyError:
        raise ValueError(f"unknown architecture {name!r}; registered: {sorted(REGISTRY)}") from None


def _init_params(arch: ArchitectureSpec, input_shape: tuple[int, ...], num_classes: int,
                 rng: np.random.Generator) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}
    shape = tuple(input_shape)
    for i, layer in enumerate(arch.layers):
        if layer.kind == "conv":
            c, h, w = shape
            fan_in = c * layer.kernel * layer.kernel
            bound = np.sqrt(6.0 / fan_in)
            params[f"conv{i}.weight"] = rng.uniform(-bound, bound,
                                                    (layer.out, c, layer.kernel, layer.kernel))
            params[f"conv{i}.bias"] = np.zeros(layer.out)
            ho = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
            wo = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
            shape = (layer.out, ho, wo)
        elif layer.kind == "fc":
            out = num_classes if i == len(arch.layers) - 1 else layer.out
            fan_in = shape[0]
            bound = np.sqrt(6.0 / fan_in)
            params[f"fc{i}.weight"] = rng.uniform(-bound, bound, (out, fan_in))
            params[f"fc{i}.bias"] = np.zeros(out)
            shape = (out,)
        elif layer.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif layer.kind == "gap":
            shape = (shape[0],)
        elif layer.kind not in ("relu", "tanh"):
            raise ValueError(f"unknown layer kind {layer.kind!r}")
    return params


class Model:
    """Differentiable classifier ``f = head . backbone`` with named parameters."""

    def __init__(self, arch: ArchitectureSpec, input_shape, num_classes: int,
                 params: dict[str, np.ndarray], frozen: bool = False):
        self.arch = arch
        self.input_shape = tuple(int(s) for s in input_shape)
        self.num_classes = int(num_classes)
        self.frozen = frozen
        self.params: dict[str, Tensor] = {
            k: Tensor(np.array(v, dtype=np.float64), requires_grad=not frozen, name=k)
            for k, v in params.items()
        }

    # -- evaluation -------------------------------------------------------
    def _bind(self, track: bool) -> dict[str, Tensor]:
        if track and not self.frozen:
            return self.params
        return {k: Tensor(p.data) for k, p in self.params.items()}

    def _input(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != len(self.input_shape) + 1 or x.shape[1:] != self.input_shape:
            raise ShapeError(f"{self.arch.name}: input shape {x.shape} does not match "
                             f"(n, {', '.join(map(str, self.input_shape))})")
        return x

    def _run(self, t: Tensor, start: int, stop: int, P: dict[str, Tensor]) -> Tensor:
        for i in range(start, stop):
            layer = self.arch.layers[i]
            if layer.kind == "conv":
                t = ad.conv2d(t, P[f"conv{i}.weight"], P[f"conv{i}.bias"],
                              stride=layer.stride, padding=layer.padding)
            elif layer.kind == "fc":
                t = ad.linear(t, P[f"fc{i}.weight"], P[f"fc{i}.bias"])
            elif layer.kind == "relu":
                t = ad.relu(t)
            elif layer.kind == "tanh":
                t = ad.tanh(t)
            elif layer.kind == "gap":
                t = ad.global_avg_pool(t)
            elif layer.kind == "flatten":
                t = ad.flatten(t)
        return t

    def represent(self, x, track_params: bool = True) -> Tensor:
        """Latent representation h(x): the input of the final linear layer."""
        P = self._bind(track_params)
        return self._run(self._input(x), 0, self.arch.representation_tap, P)

    def feature_map(self, x, track_params: bool = True) -> Tensor:
        """Spatial (n, C, H, W) features before global pooling."""
        if self.arch.spatial_tap is None:
            raise ShapeError(f"{self.arch.name} has no spatial representation")
        P = self._bind(track_params)
        return self._run(self._input(x), 0, self.arch.spatial_tap, P)

    def head(self, r, track_params: bool = True) -> Tensor:
        r = r if isinstance(r, Tensor) else Tensor(r)
        P = self._bind(track_params)
        n = len(self.arch.layers)
        return self._run(r, self.arch.representation_tap, n, P)

    def forward_full(self, x, track_params: bool = True) -> Tensor:
        P = self._bind(track_params)
        r = self._run(self._input(x), 0, self.arch.representation_tap, P)
        return self._run(r, self.arch.representation_tap, len(self.arch.layers), P)

    __call__ = forward_full

    def predict(self, x, batch_size: int = 256) -> np.ndarray:
        out = []
        for i in range(0, len(x), batch_size):
            out.append(self.forward_full(x[i:i + batch_size], track_params=False).data.argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=int)

    # -- parameters -------------------------------------------------------
    @property
    def representation_size(self) -> int:
        return self.params[f"fc{len(self.arch.layers) - 1}.weight"].shape[1]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def clone(self, frozen: bool | None = None) -> "Model":
        return Model(self.arch, self.input_shape, self.num_classes, self.state(),
                     frozen=self.frozen if frozen is None else frozen)

    def __repr__(self) -> str:
        return (f"Model({self.arch.name}, input={self.input_shape}, K={self.num_classes}, "
                f"frozen={self.frozen})")


def build(arch: str | ArchitectureSpec, seed: int = 0, num_classes: int = 10,
          input_shape=(1, 28, 28)) -> Model:
    if isinstance(arch, str):
        arch = get_architecture(arch)
    rng = np.random.default_rng(seed)
    params = _init_params(arch, tuple(input_shape), num_classes, rng)
    return Model(arch, input_shape, num_classes, params)


def clone_frozen(model: Model) -> Model:
    return model.clone(frozen=True)


# -- checkpoints ----------------------------------------------------------

def _pack_str(buf: io.BytesIO, s: str) -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def save(model: Model, path) -> None:
    """Write a checkpoint atomically (tmp file + rename)."""
    if model.arch.name not in REGISTRY or REGISTRY[model.arch.name]() != model.arch:
        raise CheckpointError(f"only registered architectures can be saved, got {model.arch.name!r}")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    _pack_str(buf, model.arch.name)
    buf.write(struct.pack("<I", model.num_classes))
    buf.write(struct.pack("<I", len(model.input_shape)))
    buf.write(struct.pack(f"<{len(model.input_shape)}I", *model.input_shape))
    buf.write(struct.pack("<I", len(model.params)))
    for name, p in model.params.items():
        _pack_str(buf, name)
        buf.write(struct.pack("<I", p.data.ndim))
        buf.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        buf.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.raw):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        n = self.u32()
        if n > 4096:
            raise CheckpointError(f"implausible string length {n} at offset {self.pos - 4}")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"corrupt string at offset {self.pos - n}") from exc


def load(path, arch: str | None = None) -> Model:
    """Read a checkpoint; with ``arch`` given, refuse any other architecture."""
    r = _Reader(Path(path).read_bytes())
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a model checkpoint (bad magic)")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    name = r.string()
    if arch is not None and name != arch:
        raise CheckpointError(f"checkpoint holds {name!r}, expected {arch!r}")
    spec = get_architecture(name) if name in REGISTRY else None
    if spec is None:
        raise CheckpointError(f"checkpoint architecture {name!r} is not registered")
    num_classes = r.u32()
    rank = r.u32()
    if rank > 8:
        raise CheckpointError(f"implausible input rank {rank}")
    input_shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
    count = r.u32()
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        pname = r.string()
        prank = r.u32()
        if prank > 8:
            raise CheckpointError(f"implausible rank {prank} for {pname!r}")
        dims = struct.unpack(f"<{prank}I", r.take(4 * prank))
        size = int(np.prod(dims)) if dims else 1
        params[pname] = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(dims)
    if r.pos != len(r.raw):
        raise CheckpointError(f"{len(r.raw) - r.pos} trailing bytes after last tensor")
    expected = _init_params(spec, input_shape, num_classes, np.random.default_rng(0))
    if set(expected) != set(params) or any(expected[k].shape != params[k].shape for k in expected):
        raise CheckpointError(f"tensor layout does not match architecture {name!r}")
    return Model(spec, input_shape, num_classes, params)


def same_parameters(a: Model, b: Model) -> bool:
    """Bitwise equality of all parameter tensors."""
    if a.params.keys() != b.params.keys():
        return False
    return all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)


__all__ = [
    "ArchitectureSpec", "Layer", "Model", "CheckpointError", "build", "clone_frozen",
    "save", "load", "small_mlp", "small_cnn", "get_architecture", "same_parameters",
]
