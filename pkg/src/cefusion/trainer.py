"""Training loop, Adam and checkpoint files.

Checkpoint layout (little-endian)::

    b"MMCK"  u32 version (= 1)
    u32 config_len, ModelConfig.to_bytes()
    u32 n_tensors
    per tensor, in param_shapes() order:
        u16 name_len, utf-8 name, u8 ndim, u32 * ndim shape, float32 * prod(shape)
"""

from __future__ import annotations

import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataio import ModalityBundle
from .errors import ContractError, CorruptionError, DataError, FormatError, LabelError, ParameterError
from .metrics import confusion, macro_f1
from .model import ModelConfig, ModelParams, forward, init_params, param_shapes, video_loss
from .tensor import Graph, Tensor, backward, zero_grad

log = logging.getLogger(__name__)

CKPT_MAGIC = b"MMCK"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    class_weights: Sequence[float] | None = None
    patience: int = 20

    def __post_init__(self):
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr < 0:
            raise ParameterError(f"learning rate must be non-negative, got {self.lr}")


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    train_accuracy: float
    val_macro_f1: float | None
    wall_time: float


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None

    def to_text(self) -> str:
        """Tab-separated table.  Wall time is left out so reruns are byte-identical."""
        lines = ["epoch\tmean_loss\ttrain_accuracy\tval_macro_f1"]
        for r in self.epochs:
            val = "-" if r.val_macro_f1 is None else f"{r.val_macro_f1:.6f}"
            lines.append(f"{r.epoch}\t{r.mean_loss:.6f}\t{r.train_accuracy:.6f}\t{val}")
        return "\n".join(lines) + "\n"


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    scratch: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @classmethod
    def zeros_like(cls, params: ModelParams) -> AdamState:
        return cls(0, {n: np.zeros_like(t.data) for n, t in params.tensors.items()},
                   {n: np.zeros_like(t.data) for n, t in params.tensors.items()})


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, in place, in parameter order.

    Uses the equivalent form ``p -= (lr / bc1) * m / (sqrt(v) / sqrt(bc2) + eps)``
    so every array operation can write into a reused buffer.
    """
    for n, t in params.tensors.items():
        if grads[n].shape != t.shape:
            raise ContractError(f"adam_step: gradient for {n} has shape {grads[n].shape}, parameter {t.shape}")
    state.step += 1
    bc1 = 1.0 - cfg.beta1 ** state.step
    bc2 = 1.0 - cfg.beta2 ** state.step
    step_size = cfg.lr / bc1
    root_bc2 = np.sqrt(bc2)
    for n, t in params.tensors.items():
        g = grads[n]
        m, v = state.m[n], state.v[n]
        tmp = state.scratch.get(n)
        if tmp is None:
            tmp = state.scratch[n] = np.empty_like(t.data)
        m *= cfg.beta1
        np.multiply(g, 1.0 - cfg.beta1, out=tmp)
        m += tmp
        v *= cfg.beta2
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - cfg.beta2
        v += tmp
        np.sqrt(v, out=tmp)
        tmp /= root_bc2
        tmp += cfg.eps
        np.divide(m, tmp, out=tmp)
        tmp *= step_size
        t.data -= tmp


def inverse_frequency_weights(bundles: Sequence[ModalityBundle], K: int) -> np.ndarray:
    """Per-class weights ``N / (K * count)`` over training frames; absent classes get 0."""
    counts = np.zeros(K, dtype=np.float64)
    for b in bundles:
        counts += np.bincount(b.targets(), minlength=K)[:K]
    total = counts.sum()
    return np.where(counts > 0, total / (K * np.maximum(counts, 1)), 0.0)


def frame_macro_f1(bundles: Sequence[ModalityBundle], params: ModelParams, config: ModelConfig) -> float:
    preds, golds = [], []
    for b in bundles:
        preds.append(forward(b, params, config, mode="eval").labels)
        golds.append(b.targets())
    return macro_f1(confusion(np.concatenate(preds), np.concatenate(golds), config.num_classes))


def train(
    train_set: Sequence[ModalityBundle],
    val_set: Sequence[ModalityBundle],
    model_config: ModelConfig,
    train_config: TrainConfig,
) -> tuple[ModelParams, TrainLog]:
    """Adam on per-video cross-entropy, one video per step.

    Returns the parameters from the epoch with the best validation macro F1
    (frame level) together with the per-epoch log.  Training stops early once
    validation has not improved for ``patience`` epochs.  Without a
    validation set the final parameters are returned.
    """
    if not train_set:
        raise DataError("training set is empty")
    K = model_config.num_classes
    for kind, bundles in (("training", train_set), ("validation", val_set)):
        for b in bundles:
            targets = b.targets()
            if targets is None:
                raise DataError(f"{kind} video {b.video_id!r} has no label")
            if targets.min() < 0 or targets.max() >= K:
                raise LabelError(f"{kind} video {b.video_id!r} has labels outside [0, {K})")

    params = init_params(model_config, train_config.seed)
    shuffle_rng = np.random.default_rng([train_config.seed, 1])
    dropout_rng = np.random.default_rng([train_config.seed, 2])
    state = AdamState.zeros_like(params)
    weights = train_config.class_weights
    trainlog = TrainLog()
    best_f1, best, stale = -1.0, None, 0

    for epoch in range(1, train_config.epochs + 1):
        started = time.perf_counter()
        losses, correct, frames = [], 0, 0
        for i in shuffle_rng.permutation(len(train_set)):
            bundle = train_set[i]
            zero_grad(params.values())
            with Graph() as graph:
                loss, logits = video_loss(bundle, params, model_config, weights, train=True, rng=dropout_rng)
            backward(graph, loss)
            adam_step(params, {n: t.grad for n, t in params.tensors.items()}, state, train_config)
            losses.append(loss.item())
            targets = bundle.targets()
            correct += int((np.argmax(logits.data, axis=1) == targets).sum())
            frames += len(targets)

        val_f1 = frame_macro_f1(val_set, params, model_config) if val_set else None
        record = EpochRecord(epoch, float(np.mean(losses)), correct / frames, val_f1,
                             time.perf_counter() - started)
        trainlog.epochs.append(record)
        log.info("epoch %d loss %.4f acc %.4f val_f1 %s (%.2fs)", epoch, record.mean_loss,
                 record.train_accuracy, "-" if val_f1 is None else f"{val_f1:.4f}", record.wall_time)

        if val_f1 is None:
            continue
        if val_f1 > best_f1:
            best_f1, best, stale = val_f1, params.copy(), 0
            trainlog.best_epoch = epoch
        else:
            stale += 1
            if stale >= train_config.patience:
                log.info("early stop after %d epochs without improvement", stale)
                break

    final = best if best is not None else params
    return final, trainlog


# -- checkpoints ---------------------------------------------------------------------

def checkpoint_bytes(params: ModelParams, config: ModelConfig) -> bytes:
    expected = param_shapes(config)
    if list(expected) != params.names():
        raise ContractError("parameters do not match the layout of this model config")
    cfg = config.to_bytes()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(cfg)), cfg, struct.pack("<I", len(expected))]
    for name, shape in expected.items():
        t = params[name]
        if t.shape != shape:
            raise ContractError(f"{name}: shape {t.shape}, config expects {shape}")
        if not np.isfinite(t.data).all():
            raise ContractError(f"{name}: non-finite parameter values")
        raw = name.encode()
        parts.append(struct.pack(f"<H{len(raw)}sB{len(shape)}I", len(raw), raw, len(shape), *shape))
        parts.append(t.data.astype("<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(params: ModelParams, config: ModelConfig, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, config))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CorruptionError(f"{self.path}: truncated checkpoint at byte {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> tuple[ModelParams, ModelConfig]:
    """Read a checkpoint; with ``expected_config`` refuse one trained under another config."""
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version, cfg_len = r.unpack("<II")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        config = ModelConfig.from_bytes(r.take(cfg_len))
    except (struct.error, ValueError, ParameterError) as exc:
        raise CorruptionError(f"{path}: unreadable model config: {exc}") from exc
    if expected_config is not None and config.config_hash() != expected_config.config_hash():
        raise ContractError(f"{path}: checkpoint config {config} differs from requested {expected_config}")

    expected = param_shapes(config)
    (count,) = r.unpack("<I")
    if count != len(expected):
        raise CorruptionError(f"{path}: {count} tensors, config implies {len(expected)}")
    tensors = {}
    for name, shape in expected.items():
        (name_len,) = r.unpack("<H")
        got = r.take(name_len).decode(errors="replace")
        (ndim,) = r.unpack("<B")
        got_shape = r.unpack(f"<{ndim}I")
        if got != name or tuple(got_shape) != shape:
            raise CorruptionError(f"{path}: found {got}{got_shape}, expected {name}{shape}")
        data = np.frombuffer(r.take(4 * int(np.prod(shape))), dtype="<f4").reshape(shape)
        tensors[name] = Tensor(data, requires_grad=True)
    if r.pos != len(r.raw):
        raise CorruptionError(f"{path}: {len(r.raw) - r.pos} trailing bytes")
    return ModelParams(tensors), config
