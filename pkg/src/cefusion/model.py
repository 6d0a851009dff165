"""Feature-level fusion network.

Per video the pipeline is::

    concat(vit 768, resnet 512) -> 1280 -> linear -> 512 ─┐
                                    audio 128 ───────────┼─> TCN per stream -> D_model
                                    text 768 ────────────┘
    co-attention over a (2W+1)-frame window of all three streams -> D_model
    linear classifier -> K logits per frame

The TCN stage is causal.  Co-attention lets frame ``t`` read frames up to
``t + W``, so the whole model looks at most ``W`` frames ahead.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as tc
from .aggregation import FramePredictions
from .dataio import MODALITIES, MODALITY_DIMS, ModalityBundle
from .errors import AlignmentError, ContractError, DimensionError, ParameterError
from .tensor import Tensor

STREAMS = ("visual", "audio", "text")


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 7
    d_model: int = 256
    tcn_blocks: int = 2
    kernel_size: int = 3
    dilations: tuple[int, ...] = (1, 2)
    window: int = 3
    dropout: float = 0.1
    fused_dim: int = 512
    modality_dims: tuple[tuple[str, int], ...] = tuple(MODALITY_DIMS.items())

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        object.__setattr__(self, "modality_dims", tuple((str(m), int(d)) for m, d in dict(self.modality_dims).items()))
        if self.num_classes < 2:
            raise ParameterError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.window < 0:
            raise ParameterError(f"window must be >= 0, got {self.window}")
        if len(self.dilations) != self.tcn_blocks:
            raise ParameterError(f"{self.tcn_blocks} TCN blocks but {len(self.dilations)} dilations")
        if any(d < 1 for d in self.dilations) or self.kernel_size < 1 or self.d_model < 1:
            raise ParameterError("kernel size, dilations and d_model must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ParameterError(f"dropout must be in [0, 1), got {self.dropout}")
        if set(self.dims) != set(MODALITIES):
            raise ParameterError(f"modality_dims must cover {MODALITIES}")

    @property
    def dims(self) -> dict[str, int]:
        return dict(self.modality_dims)

    def stream_input_dim(self, stream: str) -> int:
        if stream == "visual":
            return self.fused_dim
        return self.dims[stream]

    _FIXED = struct.Struct("<IIIIIId")

    def to_bytes(self) -> bytes:
        dims = self.dims
        out = self._FIXED.pack(self.num_classes, self.d_model, self.tcn_blocks, self.kernel_size,
                               self.window, self.fused_dim, self.dropout)
        out += struct.pack(f"<I{len(self.dilations)}I", len(self.dilations), *self.dilations)
        out += struct.pack("<4I", *(dims[m] for m in MODALITIES))
        return out

    @classmethod
    def from_bytes(cls, raw: bytes) -> ModelConfig:
        K, d_model, blocks, k, window, fused, dropout = cls._FIXED.unpack_from(raw)
        off = cls._FIXED.size
        (n,) = struct.unpack_from("<I", raw, off)
        off += 4
        dilations = struct.unpack_from(f"<{n}I", raw, off)
        off += 4 * n
        dims = struct.unpack_from("<4I", raw, off)
        if off + 16 != len(raw):
            raise ValueError("trailing bytes after model config")
        return cls(K, d_model, blocks, k, dilations, window, dropout, fused, tuple(zip(MODALITIES, dims)))

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every learnable tensor in its fixed serialisation order."""
    dims = config.dims
    D, k = config.d_model, config.kernel_size
    shapes = {
        "visual_proj.weight": (dims["vit"] + dims["resnet"], config.fused_dim),
        "visual_proj.bias": (config.fused_dim,),
    }
    for s in STREAMS:
        c_in = config.stream_input_dim(s)
        for b in range(config.tcn_blocks):
            pre = f"tcn.{s}.block{b}"
            shapes[f"{pre}.conv1.weight"] = (k, c_in, D)
            shapes[f"{pre}.conv1.bias"] = (D,)
            shapes[f"{pre}.conv2.weight"] = (k, D, D)
            shapes[f"{pre}.conv2.bias"] = (D,)
            if c_in != D:
                shapes[f"{pre}.residual.weight"] = (c_in, D)
                shapes[f"{pre}.residual.bias"] = (D,)
            c_in = D
    for name in ("query", "key", "value", "output"):
        shapes[f"coattn.{name}"] = (D, D)
    shapes["classifier.weight"] = (D, config.num_classes)
    shapes["classifier.bias"] = (config.num_classes,)
    return shapes


@dataclass
class ModelParams:
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def values(self) -> list[Tensor]:
        return list(self.tensors.values())

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def copy(self, dtype=None, requires_grad: bool = True) -> ModelParams:
        return ModelParams({
            n: Tensor(t.data, requires_grad=requires_grad, dtype=dtype or t.dtype)
            for n, t in self.tensors.items()
        })

    def equal(self, other: ModelParams) -> bool:
        return (self.names() == other.names() and all(
            self[n].shape == other[n].shape and self[n].data.tobytes() == other[n].data.tobytes()
            for n in self.names()))


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Random initial weights, a pure function of ``(config, seed)``.

    Convolutions use He fan-in scaling; plain linear maps use ``1/sqrt(fan_in)``;
    the classifier starts small so initial logits are near uniform.  Biases
    start at zero.
    """
    rng = np.random.default_rng([seed, 0])
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("bias"):
            data = np.zeros(shape)
        elif ".conv" in name:
            data = rng.standard_normal(shape) * math.sqrt(2.0 / (shape[0] * shape[1]))
        elif name == "classifier.weight":
            data = rng.standard_normal(shape) * (0.01 / math.sqrt(shape[0]))
        else:
            data = rng.standard_normal(shape) * math.sqrt(1.0 / shape[0])
        tensors[name] = Tensor(data, requires_grad=True, dtype=dtype)
    return ModelParams(tensors)


# -- building blocks -------------------------------------------------------------

def fuse_visual(f_vit: Tensor, f_resnet: Tensor, params: ModelParams, trace: dict | None = None) -> Tensor:
    """Concatenate ViT and ResNet frame features and project to the fused width."""
    if f_vit.shape[0] != f_resnet.shape[0]:
        raise AlignmentError(f"fuse_visual: vit has {f_vit.shape[0]} frames, resnet {f_resnet.shape[0]}")
    w = params["visual_proj.weight"]
    joint = tc.concat([f_vit, f_resnet], axis=1)
    if joint.shape[1] != w.shape[0]:
        raise DimensionError(f"fuse_visual: concatenated width {joint.shape[1]}, projection expects {w.shape[0]}")
    fused = tc.add_bias(tc.matmul(joint, w), params["visual_proj.bias"])
    if trace is not None:
        trace["visual_concat"] = joint
        trace["visual_fused"] = fused
    return fused


def tcn_forward(
    seq: Tensor,
    params: ModelParams,
    config: ModelConfig,
    stream: str,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    expected = config.stream_input_dim(stream)
    if seq.ndim != 2 or seq.shape[1] != expected:
        raise DimensionError(f"tcn_forward[{stream}]: input {seq.shape}, expected T x {expected}")
    x = seq
    for b, dilation in enumerate(config.dilations):
        pre = f"tcn.{stream}.block{b}"
        h = tc.relu(tc.add_bias(tc.conv1d_causal(x, params[f"{pre}.conv1.weight"], dilation),
                                params[f"{pre}.conv1.bias"]))
        h = tc.relu(tc.add_bias(tc.conv1d_causal(h, params[f"{pre}.conv2.weight"], dilation),
                                params[f"{pre}.conv2.bias"]))
        if f"{pre}.residual.weight" in params.tensors:
            res = tc.add_bias(tc.matmul(x, params[f"{pre}.residual.weight"]), params[f"{pre}.residual.bias"])
        else:
            res = x
        x = tc.add(h, res)
        if train and config.dropout > 0:
            x = tc.dropout(x, config.dropout, rng)
    return x


def window_index(T: int, window: int, n_streams: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Token table rows and validity mask for each frame's context window.

    Tokens are laid out stream-major (``stream * T + frame``).  Slot
    ``s * (2W+1) + j`` of frame ``t`` refers to frame ``t - W + j`` of stream
    ``s``; slots outside ``[0, T)`` are masked out.
    """
    offsets = np.arange(-window, window + 1)
    frames = np.arange(T)[:, None] + offsets[None, :]
    valid = (frames >= 0) & (frames < T)
    clipped = np.clip(frames, 0, T - 1)
    index = np.concatenate([s * T + clipped for s in range(n_streams)], axis=1)
    mask = np.concatenate([valid] * n_streams, axis=1)
    return index, mask


def coattention_fuse(
    visual: Tensor,
    audio: Tensor,
    text: Tensor,
    params: ModelParams,
    window: int,
    trace: dict | None = None,
) -> Tensor:
    """One embedding per frame from a windowed attention over all three streams.

    The query is the mean of the three stream vectors at frame ``t``; keys
    and values are every stream's vectors at frames ``t - W .. t + W``
    (clipped to the video), scaled dot-product, single head.
    """
    T = visual.shape[0]
    if audio.shape[0] != T or text.shape[0] != T:
        raise AlignmentError(f"coattention_fuse: frame counts {T}, {audio.shape[0]}, {text.shape[0]}")
    D = visual.shape[1]
    tokens = tc.concat([visual, audio, text], axis=0)
    keys = tc.matmul(tokens, params["coattn.key"])
    values = tc.matmul(tokens, params["coattn.value"])
    query = tc.matmul(tc.scale(tc.add(tc.add(visual, audio), text), 1.0 / 3.0), params["coattn.query"])
    index, mask = window_index(T, window)
    scores = tc.scale(tc.rowwise_dot(query, tc.gather_rows(keys, index)), 1.0 / math.sqrt(D))
    attn = tc.masked_softmax(scores, mask)
    out = tc.matmul(tc.weighted_rows(attn, tc.gather_rows(values, index)), params["coattn.output"])
    if trace is not None:
        trace["attention"] = attn
        trace["attention_mask"] = mask
    return out


# -- full model --------------------------------------------------------------------

def bundle_tensors(bundle: ModalityBundle, dtype=np.float32) -> dict[str, Tensor]:
    return {m: Tensor(getattr(bundle, m).data, dtype=dtype) for m in MODALITIES}


def forward_logits(
    bundle: ModalityBundle,
    params: ModelParams,
    config: ModelConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
    trace: dict | None = None,
) -> Tensor:
    if train and config.dropout > 0 and rng is None:
        raise ContractError("forward_logits: training mode with dropout needs an rng")
    T = bundle.vit.frames
    for seq in bundle.sequences():
        if seq.frames != T:
            raise AlignmentError(f"{bundle.video_id}: {seq.modality} has {seq.frames} frames, expected {T}")
    x = bundle_tensors(bundle, params.dtype)
    visual = fuse_visual(x["vit"], x["resnet"], params, trace)
    streams = {
        "visual": tcn_forward(visual, params, config, "visual", train, rng),
        "audio": tcn_forward(x["audio"], params, config, "audio", train, rng),
        "text": tcn_forward(x["text"], params, config, "text", train, rng),
    }
    if trace is not None:
        trace.update({f"tcn_{s}": t for s, t in streams.items()})
    fused = coattention_fuse(streams["visual"], streams["audio"], streams["text"], params, config.window, trace)
    logits = tc.add_bias(tc.matmul(fused, params["classifier.weight"]), params["classifier.bias"])
    if trace is not None:
        trace["fused"] = fused
        trace["logits"] = logits
    return logits


def forward(
    bundle: ModalityBundle,
    params: ModelParams,
    config: ModelConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> FramePredictions:
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    logits = forward_logits(bundle, params, config, train=mode == "train", rng=rng)
    probs = tc.softmax(logits, axis=1)
    labels = np.argmax(logits.data, axis=1).astype(np.int64)
    return FramePredictions(bundle.video_id, labels, logits.data.copy(), probs.data.copy())


def video_loss(
    bundle: ModalityBundle,
    params: ModelParams,
    config: ModelConfig,
    class_weights=None,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """Cross-entropy of one video against its per-frame targets; returns ``(loss, logits)``."""
    targets = bundle.targets()
    if targets is None:
        raise ContractError(f"{bundle.video_id}: no label to train on")
    logits = forward_logits(bundle, params, config, train=train, rng=rng)
    return tc.cross_entropy(logits, targets, class_weights), logits


def model_grad_check(
    bundle: ModalityBundle,
    params: ModelParams,
    config: ModelConfig,
    epsilon: float = 1e-3,
    n_samples: int | None = 200,
    seed: int = 0,
    skip_kinks: bool = True,
) -> tc.GradCheckResult:
    """Finite-difference check of the whole network in float64 (eval mode)."""
    names = params.names()

    def loss_fn(ts):
        return video_loss(bundle, ModelParams(dict(zip(names, ts))), config)[0]

    return tc.grad_check_details(loss_fn, params.values(), epsilon=epsilon, n_samples=n_samples,
                                 seed=seed, skip_kinks=skip_kinks)
