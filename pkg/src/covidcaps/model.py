"""Capsule classifier: convolutional front end feeding two capsule layers.

Fixed structure, configurable widths. Four 3x3-style convolutions (strides
1, 1, 1, 2), batch normalization after the first, ReLU after each, 2x2
average pooling after the second. The last feature map is regrouped into
primary capsules, squashed, then routed through a mid capsule layer and a
final layer with one capsule per class; class probability is the final
capsule's length.

Also holds the transfer-learning surgery (swap the class-capsule head,
freeze the convolutional stack) and a binary checkpoint format that
round-trips parameters bit for bit.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, replace
from typing import BinaryIO, Optional

import numpy as np

from .capsule import capsule_lengths, capsule_probabilities, predict_votes, route, squash
from .errors import (
    BuildError,
    CheckpointFormatError,
    DimensionError,
    ParameterError,
    SelectorError,
)
from .objective import LossConfig
from .tensor import RunningStats, Tensor, avg_pool2d, batch_norm, conv2d

__all__ = [
    "ArchitectureConfig",
    "Model",
    "build_model",
    "replace_head",
    "freeze_feature_extractor",
    "save_checkpoint",
    "load_checkpoint",
]

_MAGIC = b"CCAP"
_VERSION = 1

# structure shared by every instance of this architecture
_CONV_STRIDES = (1, 1, 1, 2)
_POOL_AFTER = 1  # index of the conv block followed by 2x2 average pooling
_POOL_SIZE = 2


@dataclass(frozen=True)
class ArchitectureConfig:
    input_hw: tuple[int, int] = (128, 128)
    input_channels: int = 1
    conv_channels: tuple[int, int, int, int] = (64, 64, 128, 128)
    conv_kernels: tuple[int, int, int, int] = (3, 3, 3, 3)
    primary_capsule_dim: int = 8
    mid_capsules: tuple[int, int] = (32, 8)  # (count, dim)
    final_capsules: tuple[int, int] = (2, 16)  # (count, dim)
    routing_iters: int = 3

    def __post_init__(self):
        if len(self.conv_channels) != 4 or len(self.conv_kernels) != 4:
            raise ParameterError("exactly four conv blocks are expected")
        if min(self.conv_channels) < 1 or min(self.conv_kernels) < 1:
            raise ParameterError("conv channels and kernels must be positive")
        if min(self.input_hw) < 1 or self.input_channels < 1:
            raise ParameterError("input dimensions must be positive")
        if self.primary_capsule_dim < 1:
            raise ParameterError("primary capsule dim must be positive")
        if len(self.mid_capsules) != 2 or min(self.mid_capsules) < 1:
            raise ParameterError("mid_capsules must be (count, dim) with positive entries")
        if len(self.final_capsules) != 2 or self.final_capsules[1] < 1:
            raise ParameterError("final_capsules must be (count, dim) with positive entries")
        if self.final_capsules[0] < 2:
            raise ParameterError("a classifier needs at least two class capsules")
        if self.routing_iters < 1:
            raise ParameterError("routing_iters must be >= 1")

    def feature_geometry(self) -> list[tuple[int, int, int]]:
        """(channels, height, width) after each conv/pool stage, in order."""
        h, w = self.input_hw
        stages = []
        for i in range(4):
            k, s = self.conv_kernels[i], _CONV_STRIDES[i]
            if h < k or w < k:
                raise BuildError(f"conv{i + 1} kernel {k} does not fit feature map {h}x{w}")
            h = (h - k) // s + 1
            w = (w - k) // s + 1
            stages.append((self.conv_channels[i], h, w))
            if i == _POOL_AFTER:
                if h < _POOL_SIZE or w < _POOL_SIZE:
                    raise BuildError(f"pool window does not fit feature map {h}x{w}")
                h = (h - _POOL_SIZE) // _POOL_SIZE + 1
                w = (w - _POOL_SIZE) // _POOL_SIZE + 1
                stages.append((self.conv_channels[i], h, w))
        return stages

    @property
    def num_primary_capsules(self) -> int:
        c, h, w = self.feature_geometry()[-1]
        total = c * h * w
        if total % self.primary_capsule_dim:
            raise BuildError(
                f"final feature map has {total} values, not divisible into "
                f"capsules of dim {self.primary_capsule_dim}"
            )
        return total // self.primary_capsule_dim

    @property
    def num_classes(self) -> int:
        return self.final_capsules[0]


def _init_rng(seed: int, name: str) -> np.random.Generator:
    # one independent stream per parameter so adding/replacing one
    # parameter never shifts the values drawn for the others
    return np.random.default_rng([seed & 0xFFFFFFFF, zlib.crc32(name.encode())])


class Model:
    """Parameter store plus the forward pass wiring them together."""

    def __init__(self, config: ArchitectureConfig, loss: LossConfig, dtype=np.float32, seed: int = 0):
        config.num_primary_capsules  # validates geometry before any allocation
        self.config = config
        self.loss = loss
        self.dtype = np.dtype(dtype)
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        self.buffers: set[str] = set()
        self.trainable: dict[str, bool] = {}
        self._build_params()
        self._bn_stats = RunningStats(
            mean=self.params["bn1.running_mean"].data,
            var=self.params["bn1.running_var"].data,
        )

    # -- construction -----------------------------------------------------

    def _add_param(self, name: str, data: np.ndarray, trainable: bool = True) -> None:
        t = Tensor(data.astype(self.dtype), requires_grad=trainable)
        self.params[name] = t
        self.trainable[name] = trainable

    def _add_buffer(self, name: str, data: np.ndarray) -> None:
        self.params[name] = Tensor(data.astype(self.dtype), requires_grad=False)
        self.trainable[name] = False
        self.buffers.add(name)

    def _conv_init(self, name: str, out_c: int, in_c: int, k: int) -> np.ndarray:
        # He-style scaling keeps activation variance roughly constant through
        # the ReLU stack, so the squash layers see O(1) vectors at the start
        std = np.sqrt(2.0 / (in_c * k * k))
        return _init_rng(self.seed, name).normal(0.0, std, size=(out_c, in_c, k, k))

    def _caps_init(self, name: str, num_in: int, num_out: int, out_dim: int, in_dim: int) -> np.ndarray:
        bound = 1.0 / np.sqrt(in_dim)
        return _init_rng(self.seed, name).uniform(-bound, bound, size=(num_in, num_out, out_dim, in_dim))

    def _build_params(self) -> None:
        cfg = self.config
        in_c = cfg.input_channels
        for i in range(4):
            out_c, k = cfg.conv_channels[i], cfg.conv_kernels[i]
            self._add_param(f"conv{i + 1}.weight", self._conv_init(f"conv{i + 1}.weight", out_c, in_c, k))
            self._add_param(f"conv{i + 1}.bias", np.zeros(out_c))
            in_c = out_c
        c1 = cfg.conv_channels[0]
        self._add_param("bn1.gamma", np.ones(c1))
        self._add_param("bn1.beta", np.zeros(c1))
        # identity-normalization start so a freshly built model can run inference
        self._add_buffer("bn1.running_mean", np.zeros(c1))
        self._add_buffer("bn1.running_var", np.ones(c1))

        mid_n, mid_d = cfg.mid_capsules
        fin_n, fin_d = cfg.final_capsules
        self._add_param(
            "caps2.W",
            self._caps_init("caps2.W", cfg.num_primary_capsules, mid_n, mid_d, cfg.primary_capsule_dim),
        )
        self._add_param("caps3.W", self._caps_init("caps3.W", mid_n, fin_n, fin_d, mid_d))

    # -- forward ------------------------------------------------------------

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        """Final class capsules, shape (batch, num_classes, final_dim)."""
        cfg = self.config
        if x.ndim == 3:
            x = x.reshape(1, *x.shape)
        if x.ndim != 4 or x.shape[1] != cfg.input_channels or x.shape[2:] != tuple(cfg.input_hw):
            raise DimensionError(
                f"expected input (batch, {cfg.input_channels}, {cfg.input_hw[0]}, "
                f"{cfg.input_hw[1]}), got {x.shape}"
            )
        p = self.params
        # frozen normalization layers run on their stored statistics
        bn_mode = "train" if (training and self.trainable["bn1.gamma"]) else "infer"

        h = conv2d(x, p["conv1.weight"], p["conv1.bias"], stride=_CONV_STRIDES[0])
        h = batch_norm(h, p["bn1.gamma"], p["bn1.beta"], mode=bn_mode, stats=self._bn_stats)
        h = h.relu()
        h = conv2d(h, p["conv2.weight"], p["conv2.bias"], stride=_CONV_STRIDES[1]).relu()
        h = avg_pool2d(h, _POOL_SIZE, _POOL_SIZE)
        h = conv2d(h, p["conv3.weight"], p["conv3.bias"], stride=_CONV_STRIDES[2]).relu()
        h = conv2d(h, p["conv4.weight"], p["conv4.bias"], stride=_CONV_STRIDES[3]).relu()

        batch = h.shape[0]
        u = h.reshape(batch, cfg.num_primary_capsules, cfg.primary_capsule_dim)
        u = squash(u)
        v, _ = route(predict_votes(u, p["caps2.W"]), iters=cfg.routing_iters)
        v, _ = route(predict_votes(v, p["caps3.W"]), iters=cfg.routing_iters)
        return v

    def class_lengths(self, x: Tensor, training: bool = False) -> Tensor:
        """Differentiable capsule lengths, shape (batch, num_classes)."""
        return capsule_lengths(self.forward(x, training=training))

    def predict_proba(self, x: Tensor) -> np.ndarray:
        """Per-class probabilities as plain numbers (inference mode)."""
        return capsule_probabilities(self.forward(x, training=False))

    # -- parameter management -------------------------------------------------

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def set_trainable(self, pattern: str, flag: bool) -> list[str]:
        """Flip requires_grad on every non-buffer parameter matching a glob."""
        import fnmatch

        matched = []
        for name, p in self.params.items():
            if name in self.buffers:
                continue
            if fnmatch.fnmatch(name, pattern):
                p.requires_grad = flag
                self.trainable[name] = flag
                matched.append(name)
        if not matched:
            raise SelectorError(f"pattern {pattern!r} matched no trainable parameter")
        return matched

    def count_trainable_params(self) -> int:
        return sum(p.size for name, p in self.params.items() if self.trainable[name])

    def copy(self) -> "Model":
        """Independent deep copy (same config, duplicated arrays and flags)."""
        clone = Model.__new__(Model)
        clone.config = self.config
        clone.loss = self.loss
        clone.dtype = self.dtype
        clone.seed = self.seed
        clone.params = {}
        clone.buffers = set(self.buffers)
        clone.trainable = dict(self.trainable)
        for name, p in self.params.items():
            t = Tensor(p.data.copy(), requires_grad=p.requires_grad)
            clone.params[name] = t
        clone._bn_stats = RunningStats(
            mean=clone.params["bn1.running_mean"].data,
            var=clone.params["bn1.running_var"].data,
            momentum=self._bn_stats.momentum,
            updates=self._bn_stats.updates,
        )
        return clone


def build_model(
    config: ArchitectureConfig = ArchitectureConfig(),
    loss: LossConfig = LossConfig(),
    seed: int = 0,
    dtype=np.float32,
) -> Model:
    return Model(config, loss, dtype=dtype, seed=seed)


def replace_head(model: Model, num_classes: int, seed: Optional[int] = None) -> Model:
    """Swap the class-capsule layer for a freshly initialized one.

    Everything below the head keeps its weights; the new head gets its own
    random draw. Used to retarget a pretrained feature stack at a task
    with a different class count.
    """
    if num_classes < 2:
        raise ParameterError(f"head needs at least two class capsules, got {num_classes}")
    cfg = model.config
    model.config = replace(cfg, final_capsules=(num_classes, cfg.final_capsules[1]))
    mid_n, mid_d = cfg.mid_capsules
    fin_d = cfg.final_capsules[1]
    head_seed = model.seed if seed is None else seed
    bound = 1.0 / np.sqrt(mid_d)
    data = _init_rng(head_seed, "caps3.W/replaced").uniform(
        -bound, bound, size=(mid_n, num_classes, fin_d, mid_d)
    )
    model.params["caps3.W"] = Tensor(data.astype(model.dtype), requires_grad=True)
    model.trainable["caps3.W"] = True
    return model


def freeze_feature_extractor(model: Model) -> Model:
    """Make the convolutional stack non-trainable (capsule layers stay live)."""
    model.set_trainable("conv*", False)
    model.set_trainable("bn*", False)
    return model


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------
#
#   bytes 0-3   magic "CCAP"
#   bytes 4-7   format version, u32 little-endian
#   config      u32 byte length, then that many bytes of canonical JSON
#               {"arch": ..., "loss": ..., "trainable": ...}
#   records     until EOF, one per parameter (sorted by name):
#               u32 name length, name bytes (UTF-8),
#               u32 rank, rank * u32 dims,
#               raw float32 little-endian values, C order


def _config_json(model: Model) -> bytes:
    payload = {
        "arch": asdict(model.config),
        "loss": asdict(model.loss),
        "trainable": {k: model.trainable[k] for k in sorted(model.trainable)},
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _write_record(fh: BinaryIO, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(model: Model, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        blob = _config_json(model)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in sorted(model.params):
            _write_record(fh, name, model.params[name].data)


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointFormatError(f"truncated checkpoint while reading {what} at offset {fh.tell() - len(data)}")
    return data


def load_checkpoint(path: str) -> Model:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != _MAGIC:
            raise CheckpointFormatError(f"bad magic {magic!r}, expected {_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != _VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        try:
            payload = json.loads(_read_exact(fh, blob_len, "config").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointFormatError(f"config block is not valid JSON: {exc}") from exc

        try:
            arch_raw = dict(payload["arch"])
            loss_raw = dict(payload["loss"])
            trainable_raw = dict(payload["trainable"])
        except (KeyError, TypeError) as exc:
            raise CheckpointFormatError(f"config block missing section: {exc}") from exc
        for key in ("input_hw", "conv_channels", "conv_kernels", "mid_capsules", "final_capsules"):
            if key in arch_raw:
                arch_raw[key] = tuple(arch_raw[key])
        try:
            config = ArchitectureConfig(**arch_raw)
            loss = LossConfig(**loss_raw)
        except (TypeError, ParameterError) as exc:
            raise CheckpointFormatError(f"config block rejected: {exc}") from exc

        model = Model(config, loss)
        seen: set[str] = set()
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise CheckpointFormatError(f"truncated record header at offset {fh.tell() - len(head)}")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(fh, name_len, "record name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"rank of {name}"))
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, f"dims of {name}"))
            count = int(np.prod(shape, dtype=np.int64)) if rank else 1
            raw = _read_exact(fh, 4 * count, f"data of {name}")
            if name in seen:
                raise CheckpointFormatError(f"duplicate parameter record {name!r}")
            seen.add(name)
            if name not in model.params:
                raise CheckpointFormatError(f"unknown parameter record {name!r}")
            target = model.params[name].data
            if tuple(shape) != target.shape:
                raise CheckpointFormatError(
                    f"parameter {name!r} has shape {tuple(shape)}, model expects {target.shape}"
                )
            values = np.frombuffer(raw, dtype="<f4").reshape(shape)
            target[...] = values.astype(model.dtype)

        missing = set(model.params) - seen
        if missing:
            raise CheckpointFormatError(f"checkpoint missing parameters: {sorted(missing)}")

        for name, flag in trainable_raw.items():
            if name not in model.params:
                raise CheckpointFormatError(f"trainable flag for unknown parameter {name!r}")
            if name not in model.buffers:
                model.params[name].requires_grad = bool(flag)
                model.trainable[name] = bool(flag)
        return model
