"""Shared video encoder, projection heads, and checkpoint serialization.

One 4-stage 3D CNN (conv -> batch norm -> relu -> max pool per stage, then
global average pooling) embeds every clip regardless of view; two
independent 2-layer heads map the backbone feature into the speed-perception
and instance-perception embedding spaces. Projected features are
L2-normalized by default so dot-product similarities stay in [-1, 1].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .seeding import substream

CHECKPOINT_MAGIC = b"MCPC"
CHECKPOINT_VERSION = 1

_OPT_PREFIX = "opt."


@dataclass(frozen=True)
class ArchConfig:
    in_channels: int = 3
    channels: tuple[int, ...] = (8, 16, 32, 64)
    # stage 1 is a spatial patchify stem; the temporal axis stays intact so
    # playback speed remains observable by the 3x3x3 stages that follow
    conv1_kernel: tuple[int, int, int] = (1, 2, 2)
    conv1_stride: tuple[int, int, int] = (1, 2, 2)
    conv1_pad: tuple[int, int, int] = (0, 0, 0)
    proj_hidden: int = 64
    proj_dim: int = 128
    cls_hidden: int = 64
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9
    normalize_projections: bool = True
    # standardize the pooled feature before the heads: the raw post-relu
    # average lives in a tight positive cone, and the speed-perception hinge
    # (no temperature amplification) cannot escape it in a desk-scale step
    # budget
    feature_norm: bool = True

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]

    def stage_geometry(self, stage: int):
        """(kernel, stride, pad) of the 1-indexed conv stage."""
        if stage == 1:
            return self.conv1_kernel, self.conv1_stride, self.conv1_pad
        return (3, 3, 3), (1, 1, 1), (1, 1, 1)


def _is_buffer(name: str) -> bool:
    return ".running_" in name


class ParameterStore:
    """Named tensors: trainable weights, norm buffers, and SGD velocity."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.entries: dict[str, Tensor] = {}
        self.velocity: dict[str, np.ndarray] = {}

    def add(self, name: str, array: np.ndarray, trainable: bool = True) -> None:
        if name in self.entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        self.entries[name] = Tensor(array, requires_grad=trainable)

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def names(self) -> list[str]:
        return list(self.entries)

    def trainable(self) -> list[str]:
        return [n for n, t in self.entries.items() if t.requires_grad]

    def update_buffer(self, name: str, value: np.ndarray) -> None:
        old = self.entries[name]
        if old.requires_grad:
            raise ValueError(f"{name!r} is trainable, not a buffer")
        self.entries[name] = Tensor(value)

    def zero_grad(self) -> None:
        for t in self.entries.values():
            t.grad = None

    def gradients(self) -> dict[str, np.ndarray]:
        """Gradient per trainable parameter; absent entries mean zero."""
        return {n: self.entries[n].grad for n in self.trainable()
                if self.entries[n].grad is not None}

    def snapshot(self) -> "ParameterStore":
        out = ParameterStore(self.seed)
        for name, t in self.entries.items():
            out.add(name, t.data.copy(), trainable=t.requires_grad)
        out.velocity = {n: v.copy() for n, v in self.velocity.items()}
        return out

    def astype(self, dtype) -> "ParameterStore":
        out = ParameterStore(self.seed)
        for name, t in self.entries.items():
            out.add(name, t.data.astype(dtype), trainable=t.requires_grad)
        return out


def _he(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)).astype(dtype)


def _add_head(store: ParameterStore, rng, prefix: str, dims: tuple[int, ...],
              dtype) -> None:
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        store.add(f"{prefix}.fc{i + 1}.w", _he(rng, (fan_in, fan_out), fan_in, dtype))
        store.add(f"{prefix}.fc{i + 1}.b", np.zeros(fan_out, dtype))


def init_params(seed: int, arch: ArchConfig = ArchConfig(),
                dtype=np.float32) -> ParameterStore:
    """He fan-in init for weights, zero biases, identity norm layers."""
    rng = substream(seed, "init")
    store = ParameterStore(seed)
    cin = arch.in_channels
    for i, cout in enumerate(arch.channels, start=1):
        kernel, _, _ = arch.stage_geometry(i)
        fan_in = cin * int(np.prod(kernel))
        store.add(f"enc.conv{i}.w", _he(rng, (*kernel, cin, cout), fan_in, dtype))
        store.add(f"enc.bn{i}.gamma", np.ones(cout, dtype))
        store.add(f"enc.bn{i}.beta", np.zeros(cout, dtype))
        store.add(f"enc.bn{i}.running_mean", np.zeros(cout, dtype), trainable=False)
        store.add(f"enc.bn{i}.running_var", np.ones(cout, dtype), trainable=False)
        cin = cout
    feat = arch.feature_dim
    if arch.feature_norm:
        store.add("enc.bnf.gamma", np.ones(feat, dtype))
        store.add("enc.bnf.beta", np.zeros(feat, dtype))
        store.add("enc.bnf.running_mean", np.zeros(feat, dtype), trainable=False)
        store.add("enc.bnf.running_var", np.ones(feat, dtype), trainable=False)
    _add_head(store, rng, "mip", (feat, arch.proj_hidden, arch.proj_dim), dtype)
    _add_head(store, rng, "cip", (feat, arch.proj_hidden, arch.proj_dim), dtype)
    return store


def add_classifier(store: ParameterStore, seed: int, num_classes: int,
                   arch: ArchConfig = ArchConfig(), dtype=np.float32) -> None:
    """Two fully-connected layers on the backbone feature, fresh random init."""
    rng = substream(seed, "classifier")
    _add_head(store, rng, "cls", (arch.feature_dim, arch.cls_hidden, num_classes),
              dtype)


# ---- forward passes ------------------------------------------------------------


def encode(store: ParameterStore, clips, arch: ArchConfig = ArchConfig(),
           training: bool = False, update_stats: bool | None = None) -> Tensor:
    """Embed a clip batch (N, T, H, W, C) into backbone features (N, D).

    Both the RGB and the motion view pass through these same weights.
    Training mode normalizes with batch statistics and (by default) updates
    the running averages used at evaluation.
    """
    x = clips if isinstance(clips, Tensor) else Tensor(clips)
    if x.data.ndim != 5 or x.data.shape[-1] != arch.in_channels:
        raise ShapeError(
            f"expected clips shaped (N, T, H, W, {arch.in_channels}), "
            f"got {x.data.shape}")
    if update_stats is None:
        update_stats = training
    for i in range(1, len(arch.channels) + 1):
        _, stride, pad = arch.stage_geometry(i)
        x = ad.conv3d_cl(x, store[f"enc.conv{i}.w"], stride, pad)
        x = _norm(store, x, f"enc.bn{i}", arch, training, update_stats)
        x = x.relu()
        x = ad.maxpool3d_cl(x)
    x = ad.global_avg_pool_cl(x)
    if arch.feature_norm:
        x = _norm(store, x, "enc.bnf", arch, training, update_stats)
    return x


def _norm(store: ParameterStore, x: Tensor, name: str, arch: ArchConfig,
          training: bool, update_stats: bool) -> Tensor:
    out, mu, var = ad.batchnorm_cl(
        x, store[f"{name}.gamma"], store[f"{name}.beta"],
        store[f"{name}.running_mean"].data, store[f"{name}.running_var"].data,
        training, arch.bn_eps)
    if training and update_stats:
        m = arch.bn_momentum
        store.update_buffer(f"{name}.running_mean",
                            m * store[f"{name}.running_mean"].data + (1 - m) * mu)
        store.update_buffer(f"{name}.running_var",
                            m * store[f"{name}.running_var"].data + (1 - m) * var)
    return out


def _project(store: ParameterStore, features: Tensor, prefix: str,
             arch: ArchConfig) -> Tensor:
    h = ad.affine(features, store[f"{prefix}.fc1.w"], store[f"{prefix}.fc1.b"]).relu()
    z = ad.affine(h, store[f"{prefix}.fc2.w"], store[f"{prefix}.fc2.b"])
    return ad.l2_normalize(z) if arch.normalize_projections else z


def project_mip(store: ParameterStore, features: Tensor,
                arch: ArchConfig = ArchConfig()) -> Tensor:
    return _project(store, features, "mip", arch)


def project_cip(store: ParameterStore, features: Tensor,
                arch: ArchConfig = ArchConfig()) -> Tensor:
    return _project(store, features, "cip", arch)


def classify(store: ParameterStore, features: Tensor) -> Tensor:
    h = ad.affine(features, store["cls.fc1.w"], store["cls.fc1.b"]).relu()
    return ad.affine(h, store["cls.fc2.w"], store["cls.fc2.b"])


# ---- checkpoint format -----------------------------------------------------------


def _pack_entry(name: str, array: np.ndarray) -> bytes:
    encoded = name.encode("ascii")
    parts = [struct.pack("<H", len(encoded)), encoded,
             struct.pack("<B", array.ndim)]
    parts.extend(struct.pack("<I", d) for d in array.shape)
    parts.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    return b"".join(parts)


def checkpoint_bytes(store: ParameterStore) -> bytes:
    entries = [(name, t.data) for name, t in store.entries.items()]
    entries.extend((_OPT_PREFIX + name, v) for name, v in store.velocity.items())
    parts = [CHECKPOINT_MAGIC,
             struct.pack("<II", CHECKPOINT_VERSION, len(entries))]
    parts.extend(_pack_entry(name, arr) for name, arr in entries)
    return b"".join(parts)


def save_params(store: ParameterStore, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(store))


def load_params(path) -> ParameterStore:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {blob[:4]!r})")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    offset = 12
    store = ParameterStore()
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset:offset + name_len].decode("ascii")
        offset += name_len
        (rank,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        shape = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=offset)
        offset += 4 * size
        arr = arr.reshape(shape).copy()
        if name.startswith(_OPT_PREFIX):
            store.velocity[name[len(_OPT_PREFIX):]] = arr
        else:
            store.add(name, arr, trainable=not _is_buffer(name))
    return store
