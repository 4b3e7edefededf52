"""Staged LipShiFT classifier, its Lipschitz report and checkpoint format."""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, DimensionError, FormatError
from .layers import (
    AvgPool,
    CenterNorm,
    Drop,
    Layer,
    LiResConv,
    LLNHead,
    MaxMin,
    PatchEmbed,
    Shift,
)
from .spectral import SAFETY_FACTOR
from .tensor import Tensor

CHECKPOINT_MAGIC = b"LSFT"
CHECKPOINT_VERSION = 1


@dataclass
class ArchConfig:
    """Architecture hyperparameters.

    Stage ``s`` has ``embed_dim * dim_multipliers[s]`` channels and
    ``stage_depths[s]`` shift blocks; consecutive stages are joined by a 2x2
    patch merge.  The defaults are the desk-scale configuration.
    """

    stage_depths: tuple[int, ...] = (1, 1, 1, 1)
    embed_dim: int = 16
    dim_multipliers: tuple[int, ...] = (1, 2, 4, 8)
    patch_size: int = 1
    shift_fraction: float = 0.125
    p_drop: float = 0.0
    num_classes: int = 2
    input_shape: tuple[int, int, int] = (3, 8, 8)
    liresconv_init: str = "composite"

    def __post_init__(self):
        self.stage_depths = tuple(int(d) for d in self.stage_depths)
        self.dim_multipliers = tuple(int(m) for m in self.dim_multipliers)
        self.input_shape = tuple(int(s) for s in self.input_shape)

    @property
    def stage_dims(self) -> tuple[int, ...]:
        return tuple(self.embed_dim * m for m in self.dim_multipliers)

    def validate(self) -> "ArchConfig":
        if not self.stage_depths or any(d < 1 for d in self.stage_depths):
            raise ConfigError(f"stage_depths: every depth must be >= 1, got {self.stage_depths}")
        if len(self.dim_multipliers) != len(self.stage_depths):
            raise ConfigError(
                f"dim_multipliers: need one entry per stage ({len(self.stage_depths)}), got {self.dim_multipliers}"
            )
        if self.embed_dim < 2 or any(d % 2 for d in self.stage_dims):
            raise ConfigError(f"embed_dim: stage dims must be even for MaxMin pairing, got {self.stage_dims}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape: expected (C, H, W), got {self.input_shape}")
        if self.patch_size < 1:
            raise ConfigError(f"patch_size: must be >= 1, got {self.patch_size}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes: must be >= 2, got {self.num_classes}")
        if not 0.0 <= self.p_drop < 1.0:
            raise ConfigError(f"p_drop: must be in [0, 1), got {self.p_drop}")
        _, h, w = self.input_shape
        factor = self.patch_size * 2 ** (len(self.stage_depths) - 1)
        if h % factor or w % factor:
            raise ConfigError(
                f"input_shape: {h}x{w} not divisible by patch_size * 2^(stages-1) = {factor}"
            )
        for dim in self.stage_dims:
            group = dim * self.shift_fraction
            if self.shift_fraction < 0 or abs(group - round(group)) > 1e-9 or 4 * round(group) > dim:
                raise ConfigError(f"shift_fraction: {self.shift_fraction} invalid for {dim} channels")
        if self.liresconv_init not in ("composite", "residual", "zeros"):
            raise ConfigError(f"liresconv_init: unknown value {self.liresconv_init!r}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown architecture keys: {sorted(unknown)}")
        return cls(**d)


class ShiftBlock:
    """shift -> CenterNorm -> LiResConv (DropPath on the conv branch) -> MaxMin -> Dropout.

    The LiResConv skip connection is the block's residual path.
    """

    def __init__(self, dim: int, shift_fraction: float, p_drop: float, seed: int, init: str, name: str):
        self.name = name
        self.layers: list[Layer] = [
            Shift(dim, shift_fraction, name=f"{name}.shift"),
            CenterNorm(dim, axis=1, name=f"{name}.norm"),
            LiResConv(
                dim,
                seed=seed,
                init=init,
                drop_path=Drop(p_drop, "droppath", name=f"{name}.droppath"),
                name=f"{name}.liresconv",
            ),
            MaxMin(axis=1, name=f"{name}.maxmin"),
            Drop(p_drop, "dropout", name=f"{name}.dropout"),
        ]


class LipShiFTModel:
    """Patch embedding, shift-block stages with patch merges, average pool, LLN head.

    ``layers`` lists every map between the input and the logits exactly once,
    in application order.
    """

    def __init__(self, cfg: ArchConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        ss = np.random.SeedSequence(seed)
        seeds = iter(int(s.generate_state(1)[0]) for s in ss.spawn(1 + sum(cfg.stage_depths) + len(cfg.stage_depths) + 1))
        dims = cfg.stage_dims
        layers: list[Layer] = [PatchEmbed(cfg.input_shape[0], dims[0], cfg.patch_size, seed=next(seeds), name="embed")]
        for s, depth in enumerate(cfg.stage_depths):
            if s > 0:
                layers.append(PatchEmbed(dims[s - 1], dims[s], 2, seed=next(seeds), name=f"stage{s}.merge"))
            for b in range(depth):
                block = ShiftBlock(dims[s], cfg.shift_fraction, cfg.p_drop, next(seeds), cfg.liresconv_init, f"stage{s}.block{b}")
                layers.extend(block.layers)
        layers.append(AvgPool(global_pool=True, name="pool"))
        layers.append(LLNHead(dims[-1], cfg.num_classes, seed=next(seeds), name="head"))
        self.layers = layers
        shapes = []
        shape = tuple(cfg.input_shape)
        for layer in layers:
            shapes.append(shape)
            shape = layer.output_shape(shape)
        self.input_shapes = shapes

    @property
    def head(self) -> LLNHead:
        return self.layers[-1]

    @property
    def backbone(self) -> list[Layer]:
        return self.layers[:-1]

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for layer in self.layers:
            for pname, p in layer.parameters().items():
                out[f"{layer.name}.{pname}"] = p
        return out

    def set_parameters(self, values: dict[str, np.ndarray]) -> None:
        """Overwrite parameter values from arrays keyed like :meth:`parameters`."""
        for key, p in self.parameters().items():
            if key not in values:
                continue
            arr = np.array(values[key], dtype=p.dtype)
            if arr.shape != p.shape:
                raise DimensionError(f"parameter {key}: shape {arr.shape} != {p.shape}")
            arr.flags.writeable = False
            p.data = arr

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            for bname, b in layer.buffers().items():
                out[f"{layer.name}.{bname}"] = b
        return out

    def load_buffers(self, values: dict[str, np.ndarray]) -> None:
        for layer in self.layers:
            prefix = f"{layer.name}."
            mine = {k[len(prefix):]: v for k, v in values.items() if k.startswith(prefix)}
            if mine:
                layer.load_buffers(mine)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def forward(self, x, training: bool = False, seed: int | None = None) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.cfg.input_shape):
            raise DimensionError(f"expected input [N, {', '.join(map(str, self.cfg.input_shape))}], got {x.shape}")
        rng = np.random.default_rng(seed) if training else None
        for layer in self.layers:
            x = layer.forward(x, training, rng)
        return x

    __call__ = forward

    def features(self, x) -> Tensor:
        """Backbone output (input of the head), inference mode."""
        if not isinstance(x, Tensor):
            x = Tensor(x)
        for layer in self.backbone:
            x = layer.forward(x, False, None)
        return x

    def predict_logits(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        x = np.asarray(x)
        out = []
        with T.no_grad():
            for i in range(0, len(x), batch_size):
                out.append(np.asarray(self.forward(x[i : i + batch_size]).data))
        if not out:
            return np.zeros((0, self.cfg.num_classes), dtype=T.get_default_dtype())
        return np.concatenate(out)

    def bound_tensor(self, update: bool = True, iters: int = 1) -> Tensor:
        """Differentiable product of backbone layer bounds (warm-started power iteration)."""
        total: Tensor | float = 1.0
        for layer, shape in zip(self.backbone, self.input_shapes):
            if isinstance(layer, (LiResConv, PatchEmbed)):
                b = layer.bound_tensor(shape, update=update, iters=iters)
            else:
                b = layer.bound_tensor(shape, update=update)
            if isinstance(b, Tensor):
                b = T.reshape(b, ())
                total = T.mul(b, total) if isinstance(total, float) else T.mul(total, b)
            else:
                total = total * b if isinstance(total, float) else T.scale(total, b)
        if isinstance(total, float):
            total = Tensor(total)
        return total

    def warm_start_bounds(self, iters: int = 100) -> None:
        """Advance the persistent power-iteration vectors, e.g. before training."""
        with T.no_grad():
            self.bound_tensor(update=True, iters=iters)


def build_model(cfg: ArchConfig, seed: int = 0) -> LipShiFTModel:
    return LipShiFTModel(cfg, seed)


@dataclass
class LipschitzReport:
    """Per-layer bounds and the derived model and margin constants.

    ``backbone_bound`` is the product of all layer bounds before the head and
    is a sound Lipschitz constant for the feature map.  ``scaled_bound`` is
    ``(1 - p_drop) * backbone_bound`` and is reported for comparison only.
    """

    per_layer: list[tuple[str, float]]
    backbone_bound: float
    p_drop: float
    scaled_bound: float
    head_pairs: np.ndarray
    flagged: list[str] = field(default_factory=list)

    def pair_constants(self, paper_drop_scaling: bool = False) -> np.ndarray:
        """``K[i, j]`` bounding the Lipschitz constant of logit margin ``z_i - z_j``."""
        bound = self.scaled_bound if paper_drop_scaling else self.backbone_bound
        return bound * self.head_pairs

    @property
    def margin_constants(self) -> np.ndarray:
        return self.pair_constants(paper_drop_scaling=True)

    def loosest(self, k: int = 5) -> list[tuple[str, float]]:
        return sorted(self.per_layer, key=lambda t: t[1], reverse=True)[:k]

    def to_text(self) -> str:
        lines = ["layer,bound"]
        lines += [f"{name},{bound:.9g}" for name, bound in self.per_layer]
        lines.append(f"backbone_bound,{self.backbone_bound:.9g}")
        lines.append(f"p_drop,{self.p_drop:.9g}")
        lines.append(f"scaled_bound,{self.scaled_bound:.9g}")
        if self.flagged:
            lines.append(f"not_converged,{';'.join(self.flagged)}")
        lines.append("head_pairs," + ";".join(" ".join(f"{v:.9g}" for v in row) for row in self.head_pairs))
        return "\n".join(lines) + "\n"


def lipschitz_report(model: LipShiFTModel) -> LipschitzReport:
    """Recompute every layer bound with fresh power iterations and compose them."""
    per_layer = []
    flagged = []
    backbone = 1.0
    for layer, shape in zip(model.backbone, model.input_shapes):
        est = layer.bound_estimate(shape)
        value = est.value
        if not est.converged:
            flagged.append(layer.name)
        if est.iterations_used > 0:
            # power iteration approaches sigma_max from below
            value = est.value * SAFETY_FACTOR
        per_layer.append((layer.name, float(value)))
        backbone *= value
    p = model.cfg.p_drop
    return LipschitzReport(
        per_layer=per_layer,
        backbone_bound=float(backbone),
        p_drop=p,
        scaled_bound=float(backbone * (1.0 - p)),
        head_pairs=model.head.pair_constants(),
        flagged=flagged,
    )


# ---------------------------------------------------------------------------
# checkpoint I/O


def _write_str(buf, s: str) -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def encode_checkpoint(arrays: dict[str, np.ndarray], config: dict) -> bytes:
    """Serialize named float arrays plus a JSON config blob."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    _write_str(buf, json.dumps(config, sort_keys=True, separators=(",", ":")))
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.ndim > 255:
            raise FormatError(f"{name}: rank {arr.ndim} too large")
        _write_str(buf, name)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"truncated checkpoint reading {what} at byte {self.pos}")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def string(self, what: str) -> str:
        n = self.u32(what)
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"invalid UTF-8 in {what}") from exc


def decode_checkpoint(raw: bytes) -> tuple[dict[str, np.ndarray], dict]:
    r = _Reader(raw)
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError("bad magic")
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        config = json.loads(r.string("config"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"config blob is not valid JSON: {exc}") from exc
    count = r.u32("parameter count")
    arrays = {}
    for _ in range(count):
        name = r.string("parameter name")
        rank = struct.unpack("<B", r.take(1, f"{name} rank"))[0]
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"{name} dims")) if rank else ()
        n = math.prod(dims)
        data = np.frombuffer(r.take(4 * n, f"{name} data"), dtype="<f4").reshape(dims)
        arrays[name] = data.astype(np.float32)
    if r.pos != len(raw):
        raise FormatError(f"{len(raw) - r.pos} trailing bytes after last parameter")
    return arrays, config


def save_checkpoint(path, model: LipShiFTModel, extra: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> None:
    """Write parameters, buffers (``buffer:`` prefix) and any ``extra`` arrays."""
    arrays = {name: p.data for name, p in model.parameters().items()}
    arrays.update({f"buffer:{k}": v for k, v in model.buffers().items()})
    if extra:
        arrays.update(extra)
    config = {"arch": model.cfg.to_dict(), "seed": model.seed, "meta": meta or {}}
    Path(path).write_bytes(encode_checkpoint(arrays, config))


def load_checkpoint(path) -> tuple[LipShiFTModel, dict[str, np.ndarray], dict]:
    """Rebuild a model from a checkpoint.

    Returns ``(model, extra_arrays, meta)`` where ``extra_arrays`` holds
    entries that are neither parameters nor buffers (optimizer state).
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    arrays, config = decode_checkpoint(path.read_bytes())
    if "arch" not in config:
        raise FormatError("checkpoint config has no 'arch' section")
    cfg = ArchConfig.from_dict(config["arch"])
    with T.default_dtype(np.float32):
        model = LipShiFTModel(cfg, int(config.get("seed", 0)))
    params = model.parameters()
    missing = [k for k in params if k not in arrays]
    if missing:
        raise FormatError(f"checkpoint is missing parameters: {missing}")
    model.set_parameters({k: arrays[k] for k in params})
    model.load_buffers({k[len("buffer:"):]: v for k, v in arrays.items() if k.startswith("buffer:")})
    extra = {k: v for k, v in arrays.items() if k not in params and not k.startswith("buffer:")}
    return model, extra, config.get("meta", {})
