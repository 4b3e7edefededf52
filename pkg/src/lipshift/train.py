"""Lipschitz-margin training: epsilon schedule, EMMA loss, AdamW, the loop."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .certify import evaluate
from .data import Dataset, batch_iter
from .exceptions import ConfigError, ContractError, TrainingError
from .model import LipShiFTModel, lipschitz_report, load_checkpoint, save_checkpoint
from .tensor import Tensor

TARGET_EPS = 36 / 255
LOG_HEADER = ["epoch", "eps_train", "loss", "clean_acc", "vra", "backbone_bound", "scaled_bound", "lr"]


@dataclass(frozen=True)
class EpsSchedule:
    """Training radius ``min(3t / 2T, 1) * eps``: linear ramp, flat after ``t = 2T/3``."""

    total_epochs: int
    target_eps: float = TARGET_EPS

    def eps_at(self, t: float) -> float:
        if not 0 <= t <= self.total_epochs:
            raise ContractError(f"epoch {t} outside [0, {self.total_epochs}]")
        if self.total_epochs == 0:
            return self.target_eps
        return min(3.0 * t / (2.0 * self.total_epochs), 1.0) * self.target_eps


def eps_at(schedule: EpsSchedule, t: float) -> float:
    return schedule.eps_at(t)


@dataclass
class TrainConfig:
    batch_size: int = 128
    lr: float = 5e-4
    epochs: int = 500
    weight_decay: float = 0.0
    trades_lambda: float = 1.0
    seed: int = 0
    loss: str = "emma"
    target_eps: float = TARGET_EPS
    mix_ratio: tuple[int, int] | None = None
    crop_pad: int = 4
    save_every: int = 0
    bound_iters: int = 1
    detach_bound: bool = False
    paper_drop_scaling: bool = False

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1:
            raise ConfigError(f"batch_size: must be >= 1, got {self.batch_size}")
        if self.lr < 0:
            raise ConfigError(f"lr: must be >= 0, got {self.lr}")
        if self.epochs < 0:
            raise ConfigError(f"epochs: must be >= 0, got {self.epochs}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay: must be >= 0, got {self.weight_decay}")
        if self.trades_lambda < 0:
            raise ConfigError(f"trades_lambda: must be >= 0, got {self.trades_lambda}")
        if self.target_eps < 0:
            raise ConfigError(f"target_eps: must be >= 0, got {self.target_eps}")
        if self.loss not in ("emma", "trades_eval"):
            raise ConfigError(f"loss: expected 'emma' or 'trades_eval', got {self.loss!r}")
        if self.mix_ratio is not None and (len(self.mix_ratio) != 2 or min(self.mix_ratio) < 0 or sum(self.mix_ratio) == 0):
            raise ConfigError(f"mix_ratio: expected two non-negative counts, got {self.mix_ratio}")
        if self.bound_iters < 1:
            raise ConfigError(f"bound_iters: must be >= 1, got {self.bound_iters}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["mix_ratio"] is not None:
            d["mix_ratio"] = list(d["mix_ratio"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        d = dict(d)
        if d.get("mix_ratio") is not None:
            d["mix_ratio"] = tuple(d["mix_ratio"])
        return cls(**d)


# ---------------------------------------------------------------------------
# losses


def _onehot(labels: np.ndarray, num_classes: int, dtype) -> np.ndarray:
    out = np.zeros((len(labels), num_classes), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _check_finite(logits: Tensor) -> None:
    if not np.all(np.isfinite(logits.data)):
        bad = np.flatnonzero(~np.isfinite(logits.data).all(axis=1))
        raise TrainingError(f"non-finite logits in {len(bad)} of {logits.shape[0]} samples (first rows {bad[:5].tolist()})")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy."""
    labels = np.asarray(labels)
    y = Tensor(_onehot(labels, logits.shape[1], logits.dtype), dtype=logits.dtype)
    picked = T.tsum(T.mul(logits, y), 1)
    return T.mean(T.sub(T.logsumexp(logits, axis=1), picked))


def _as_matrix(K, like: Tensor) -> Tensor:
    return K if isinstance(K, Tensor) else Tensor(K, dtype=like.dtype)


def emma_logits(logits: Tensor, labels: np.ndarray, K, eps_t: float, detach_radius: bool = True) -> Tensor:
    """Competitor logits raised by ``r_j * K[j, y]`` with ``r_j = clamp((z_y - z_j) / K[j, y], 0, eps_t)``.

    ``detach_radius`` treats ``r_j`` as a constant, so gradients reach the
    logits and ``K`` only through ``z_j + r_j * K[j, y]``.
    """
    labels = np.asarray(labels)
    n, c = logits.shape
    K = _as_matrix(K, logits)
    if K.shape != (c, c):
        raise ContractError(f"pair constants of shape {K.shape} do not match {c} classes")
    onehot = _onehot(labels, c, logits.dtype)
    Y = Tensor(onehot, dtype=logits.dtype)
    Ky = T.matmul(Y, K)  # row y of K for every sample
    zy = T.broadcast_to(T.reshape(T.tsum(T.mul(logits, Y), 1), (n, 1)), (n, c))
    margin = T.sub(zy, logits)
    active = (Ky.data > 0) & (onehot == 0)
    if detach_radius:
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(active, np.clip(margin.data / np.where(active, Ky.data, 1.0), 0.0, eps_t), 0.0)
        radius = Tensor(r, dtype=logits.dtype)
    else:
        safe = T.add(Ky, Tensor(np.where(active, 0.0, 1.0), dtype=logits.dtype))
        radius = T.mul(T.clip(T.div(margin, safe), 0.0, eps_t), Tensor(active.astype(float), dtype=logits.dtype))
    return T.add(logits, T.mul(radius, Ky))


def emma_loss(logits: Tensor, labels: np.ndarray, K, eps_t: float, detach_radius: bool = True) -> Tensor:
    """Cross-entropy on EMMA-inflated competitor logits; equals CE at ``eps_t = 0``."""
    _check_finite(logits)
    if eps_t < 0:
        raise ContractError(f"eps_t must be >= 0, got {eps_t}")
    if eps_t == 0:
        return cross_entropy(logits, labels)
    return cross_entropy(emma_logits(logits, labels, K, eps_t, detach_radius), labels)


def adjusted_logits(logits: Tensor, labels: np.ndarray, K, eps: float = TARGET_EPS) -> Tensor:
    """Every competitor raised by the full ``eps * K[j, y]`` (no clamp)."""
    labels = np.asarray(labels)
    n, c = logits.shape
    K = _as_matrix(K, logits)
    Y = Tensor(_onehot(labels, c, logits.dtype), dtype=logits.dtype)
    return T.add(logits, T.scale(T.matmul(Y, K), eps))


def trades_eval_loss(logits_clean: Tensor, logits_adjusted: Tensor, labels: np.ndarray, lam: float = 1.0) -> Tensor:
    """``CE(clean) + lam * CE(adjusted)``; logged as a metric."""
    if lam < 0:
        raise ContractError(f"lambda must be >= 0, got {lam}")
    _check_finite(logits_clean)
    _check_finite(logits_adjusted)
    clean = cross_entropy(logits_clean, labels)
    if lam == 0:
        return clean
    return T.add(clean, T.scale(cross_entropy(logits_adjusted, labels), lam))


# ---------------------------------------------------------------------------
# optimizer


def cosine_lr(lr: float, t: float, total: float) -> float:
    """Cosine decay from ``lr`` at ``t = 0`` to 0 at ``t = total``; no warmup."""
    if total <= 0:
        return lr
    return lr * 0.5 * (1.0 + math.cos(math.pi * t / total))


class AdamW:
    """Adam with decoupled weight decay over a name -> Tensor parameter dict."""

    def __init__(self, params: dict[str, Tensor], weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float, grads: dict[str, np.ndarray] | None = None) -> None:
        if grads is None:
            grads = {k: p.grad for k, p in self.params.items()}
        for k, g in grads.items():
            if g is not None and not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for parameter {k}")
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                g = np.zeros_like(p.data)
            g = np.asarray(g, dtype=p.dtype)
            self.m[k] = (b1 * self.m[k] + (1 - b1) * g).astype(p.dtype)
            self.v[k] = (b2 * self.v[k] + (1 - b2) * g * g).astype(p.dtype)
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            new = p.data * (1.0 - lr * self.weight_decay) - lr * update
            new = np.asarray(new, dtype=p.dtype)
            new.flags.writeable = False
            p.data = new

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"optim.m:{k}"] = self.m[k]
            out[f"optim.v:{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for k, p in self.params.items():
            if f"optim.m:{k}" in arrays:
                self.m[k] = np.asarray(arrays[f"optim.m:{k}"], dtype=p.dtype).copy()
                self.v[k] = np.asarray(arrays[f"optim.v:{k}"], dtype=p.dtype).copy()
        self.step_count = int(step_count)


def optimizer_step(state: AdamW, params: dict[str, Tensor], grads: dict[str, np.ndarray], lr_t: float) -> dict[str, Tensor]:
    """Functional wrapper: apply one AdamW update to ``params``."""
    if state.params is not params:
        state.params = params
    state.step(lr_t, grads)
    return params


# ---------------------------------------------------------------------------
# training loop


def margin_constants_tensor(model: LipShiFTModel, cfg: TrainConfig, update: bool = True) -> Tensor:
    """Differentiable ``K = L * ||w_i - w_j||`` for the current weights."""
    bound = model.bound_tensor(update=update, iters=cfg.bound_iters)
    if cfg.detach_bound:
        bound = bound.detach()
    if cfg.paper_drop_scaling:
        bound = T.scale(bound, 1.0 - model.cfg.p_drop)
    pairs = model.head.pair_constants_tensor()
    return T.mul(T.broadcast_to(T.reshape(bound, (1, 1)), pairs.shape), pairs)


def training_loss(model: LipShiFTModel, x: np.ndarray, y: np.ndarray, eps_t: float, cfg: TrainConfig,
                  seed: int | None = None, update_bound: bool = True, training: bool = True) -> Tensor:
    logits = model.forward(x, training=training, seed=seed)
    K = margin_constants_tensor(model, cfg, update=update_bound)
    if cfg.loss == "emma":
        return emma_loss(logits, y, K, eps_t)
    return trades_eval_loss(logits, adjusted_logits(logits, y, K, eps_t), y, cfg.trades_lambda)


@dataclass
class TrainResult:
    log: list[dict]
    report: object
    checkpoint: Path | None


def _batch_seed(seed: int, epoch: int, batch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, batch]).generate_state(1)[0])


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, 2**31 - 1]).generate_state(1)[0])


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def train(
    model: LipShiFTModel,
    dataset: Dataset,
    cfg: TrainConfig,
    eval_dataset: Dataset | None = None,
    out_dir=None,
    resume: bool = True,
    verbose: bool = False,
) -> TrainResult:
    """Run margin training; returns the per-epoch log and final Lipschitz report.

    Every epoch: draw ``eps_t`` from the schedule, iterate seeded batches, step
    AdamW with a per-step cosine learning rate, then recompute the report and
    evaluate clean accuracy and VRA at the target radius on ``eval_dataset``
    (the training set if omitted).  With ``out_dir`` the log is written to
    ``train_log.csv`` and checkpoints to ``checkpoints/``; an existing
    ``checkpoints/last.lsft`` is resumed when ``resume`` is set.
    """
    cfg.validate()
    if tuple(dataset.shape) != tuple(model.cfg.input_shape):
        raise ContractError(f"dataset shape {dataset.shape} != model input {model.cfg.input_shape}")
    if dataset.num_classes != model.cfg.num_classes:
        raise ContractError(f"dataset has {dataset.num_classes} classes, model {model.cfg.num_classes}")
    eval_ds = eval_dataset if eval_dataset is not None else dataset
    schedule = EpsSchedule(cfg.epochs, cfg.target_eps)
    params = model.parameters()
    opt = AdamW(params, cfg.weight_decay)
    batch_size = min(cfg.batch_size, len(dataset))
    steps_per_epoch = math.ceil(len(dataset) / batch_size)
    total_steps = steps_per_epoch * cfg.epochs

    out = Path(out_dir) if out_dir is not None else None
    ckpt_dir = out / "checkpoints" if out is not None else None
    log_path = out / "train_log.csv" if out is not None else None
    start_epoch = 0
    log: list[dict] = []
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        last = ckpt_dir / "last.lsft"
        if resume and last.exists():
            loaded, extra, meta = load_checkpoint(last)
            if loaded.cfg.to_dict() != model.cfg.to_dict():
                raise ConfigError("checkpoint architecture differs from requested model")
            model.set_parameters({k: p.data for k, p in loaded.parameters().items()})
            model.load_buffers(loaded.buffers())
            opt.load_state_arrays(extra, meta.get("step", 0))
            start_epoch = int(meta.get("epoch", 0))
            if log_path.exists():
                with open(log_path, newline="") as fh:
                    log = [dict(r) for r in csv.DictReader(fh)][:start_epoch]

    def _save(name: str, epoch: int) -> Path:
        path = ckpt_dir / name
        save_checkpoint(path, model, extra=opt.state_arrays(), meta={"epoch": epoch, "step": opt.step_count, "train": cfg.to_dict()})
        return path

    def _write_log():
        with open(log_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_HEADER)
            for row in log:
                w.writerow([row[k] if isinstance(row[k], str) else _fmt(row[k]) for k in LOG_HEADER])

    if start_epoch == 0:
        model.warm_start_bounds(100)
    if out is not None:
        _write_log()
        if start_epoch == 0:
            _save("epoch_000.lsft", 0)
            _save("last.lsft", 0)

    step = opt.step_count
    for epoch in range(start_epoch, cfg.epochs):
        eps_t = schedule.eps_at(epoch)
        lr_epoch = cosine_lr(cfg.lr, step, total_steps)
        losses = []
        batches = batch_iter(dataset, batch_size, _epoch_seed(cfg.seed, epoch), cfg.mix_ratio, cfg.crop_pad)
        for b, (xb, yb) in enumerate(batches):
            lr_t = cosine_lr(cfg.lr, step, total_steps)
            model.zero_grad()
            loss = training_loss(model, xb, yb, eps_t, cfg, seed=_batch_seed(cfg.seed, epoch, b))
            T.backward(loss)
            opt.step(lr_t)
            losses.append(loss.item())
            step += 1
        report = lipschitz_report(model)
        clean, vra_value, _ = evaluate(model, eval_ds, cfg.target_eps, report=report, paper_drop_scaling=cfg.paper_drop_scaling)
        row = {
            "epoch": epoch + 1,
            "eps_train": eps_t,
            "loss": float(np.mean(losses)),
            "clean_acc": clean,
            "vra": vra_value,
            "backbone_bound": report.backbone_bound,
            "scaled_bound": report.scaled_bound,
            "lr": lr_epoch,
        }
        log.append(row)
        if verbose:
            print(" ".join(f"{k}={_fmt(v)}" for k, v in row.items()), flush=True)
        if out is not None:
            _write_log()
            if cfg.save_every and (epoch + 1) % cfg.save_every == 0:
                _save(f"epoch_{epoch + 1:03d}.lsft", epoch + 1)
            _save("last.lsft", epoch + 1)

    final = None
    report = lipschitz_report(model)
    if out is not None:
        final = _save("final.lsft", cfg.epochs)
        (out / "lipschitz_report.txt").write_text(report.to_text())
    return TrainResult(log, report, final)
