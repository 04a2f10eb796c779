"""Multi-task CNN: shared conv backbone, quality regression head, scene head.

Pure numpy, NHWC activations, weights stored in (out, in, kh, kw) order like
most deep learning frameworks. ``forward_arrays`` keeps what ``backward``
needs so training can run without an autodiff library.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imaging import ImageDimensionError, Patch


@dataclass(frozen=True)
class NetworkConfig:
    input_size: int = 64
    conv_channels: tuple = (32, 32, 64, 64, 128, 128)
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    pool_after: tuple = (2, 4)
    pool_window: int = 2
    head_hidden_dims: tuple = (256, 256)
    dropout_rate: float = 0.5
    scene_classes: int = 4

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "pool_after", tuple(int(p) for p in self.pool_after))
        object.__setattr__(self, "head_hidden_dims", tuple(int(h) for h in self.head_hidden_dims))
        if (self.kernel, self.stride, self.padding) != (3, 1, 1):
            raise ValueError("only 3x3 convolutions with stride 1 and padding 1 are supported")
        if self.pool_window != 2:
            raise ValueError("only 2x2 max pooling is supported")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.input_size % (2 ** len(self.pool_after)):
            raise ValueError("input_size must be divisible by the total pooling factor")

    @property
    def backbone_out_dim(self) -> int:
        return self.conv_channels[-1]

    @property
    def final_spatial(self) -> int:
        return self.input_size // 2 ** len(self.pool_after)

    def reduced(self, divisor: int = 8, input_size: int | None = None) -> "NetworkConfig":
        """Same topology with every width divided by ``divisor``."""
        return NetworkConfig(
            input_size=self.input_size if input_size is None else input_size,
            conv_channels=tuple(max(1, c // divisor) for c in self.conv_channels),
            pool_after=self.pool_after,
            head_hidden_dims=tuple(max(1, h // divisor) for h in self.head_hidden_dims),
            dropout_rate=self.dropout_rate,
            scene_classes=self.scene_classes,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


def parameter_shapes(config: NetworkConfig) -> dict[str, tuple]:
    """Every learnable tensor, in checkpoint order."""
    shapes = {}
    c_in = 1
    for i, c_out in enumerate(config.conv_channels, start=1):
        shapes[f"conv{i}.weight"] = (c_out, c_in, config.kernel, config.kernel)
        shapes[f"conv{i}.bias"] = (c_out,)
        c_in = c_out
    for head, n_out in (("quality", 1), ("scene", config.scene_classes)):
        d_in = config.backbone_out_dim
        for j, d_out in enumerate(config.head_hidden_dims, start=1):
            shapes[f"{head}.fc{j}.weight"] = (d_out, d_in)
            shapes[f"{head}.fc{j}.bias"] = (d_out,)
            d_in = d_out
        shapes[f"{head}.out.weight"] = (n_out, d_in)
        shapes[f"{head}.out.bias"] = (n_out,)
    return shapes


def parameter_count(config: NetworkConfig) -> int:
    return sum(int(np.prod(s)) for s in parameter_shapes(config).values())


@dataclass
class NetworkWeights:
    config: NetworkConfig
    params: dict[str, np.ndarray]

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def group(self, name: str) -> dict[str, np.ndarray]:
        """``backbone``, ``quality`` or ``scene`` parameters."""
        if name == "backbone":
            return {k: v for k, v in self.params.items() if k.startswith("conv")}
        return {k: v for k, v in self.params.items() if k.startswith(name + ".")}

    def copy(self) -> "NetworkWeights":
        return NetworkWeights(self.config, {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "NetworkWeights":
        return NetworkWeights(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def count(self) -> int:
        return sum(v.size for v in self.params.values())


def init_weights(config: NetworkConfig, seed: int, dtype=np.float32) -> NetworkWeights:
    """He-normal weights (std sqrt(2 / fan_in)) and zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    return NetworkWeights(config, params)


@dataclass
class ForwardOutput:
    quality: float
    scene_logits: np.ndarray

    @property
    def scene_probabilities(self) -> np.ndarray:
        return softmax(self.scene_logits)


def softmax(logits, axis=-1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# -- layer primitives ----------------------------------------------------------

def _im2col(x: np.ndarray) -> np.ndarray:
    """(N, H, W, C) -> (N*H*W, C*9) rows ordered (c, kh, kw), zero padding 1."""
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))
    return win.reshape(n * h * w, c * 9)


def _conv_forward(x, weight, bias):
    n, h, w, _ = x.shape
    c_out = weight.shape[0]
    out = _im2col(x) @ weight.reshape(c_out, -1).T
    out += bias
    return out.reshape(n, h, w, c_out)


def _conv_backward(x, weight, dout, need_dx=True):
    n, h, w, c_in = x.shape
    c_out = weight.shape[0]
    d2 = dout.reshape(-1, c_out)
    dw = (_im2col(x).T @ d2).T.reshape(weight.shape)
    db = d2.sum(axis=0)
    dx = None
    if need_dx:
        flipped = weight[:, :, ::-1, ::-1].transpose(0, 2, 3, 1).reshape(c_out * 9, c_in)
        dp = np.pad(dout, ((0, 0), (1, 1), (1, 1), (0, 0)))
        win = sliding_window_view(dp, (3, 3), axis=(1, 2))
        # window axes come out ordered (c_out, kh, kw), matching ``flipped``
        dx = (win.reshape(n * h * w, c_out * 9) @ flipped).reshape(n, h, w, c_in)
    return dx, dw, db


def _pool_forward(x):
    n, h, w, c = x.shape
    blocks = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, arg


def _pool_backward(dout, arg, in_shape):
    n, h, w, c = in_shape
    blocks = np.zeros((n, h // 2, w // 2, c, 4), dtype=dout.dtype)
    np.put_along_axis(blocks, arg[..., None], dout[..., None], axis=-1)
    return blocks.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)


def _dropout_masks(rng, n, config: NetworkConfig, dtype):
    rate = config.dropout_rate
    masks = {}
    for head in ("quality", "scene"):
        for j, d in enumerate(config.head_hidden_dims, start=1):
            keep = rng.random((n, d)) >= rate
            masks[f"{head}.fc{j}"] = keep.astype(dtype) / dtype.type(1.0 - rate)
    return masks


# -- forward / backward --------------------------------------------------------

def _as_batch(x, config: NetworkConfig, dtype) -> np.ndarray:
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim == 2:
        arr = arr[None]
    s = config.input_size
    if arr.ndim != 3 or arr.shape[1:] != (s, s):
        raise ImageDimensionError(f"expected patches of shape ({s}, {s}), got {arr.shape[-2:]}")
    return arr


def forward_arrays(weights: NetworkWeights, x, train_mode: bool = False,
                   dropout_seed: int = 0, rng: np.random.Generator | None = None):
    """Batched forward pass on an ``(N, S, S)`` array.

    Returns ``(quality (N,), logits (N, K), cache)``. Dropout runs only when
    ``train_mode`` is set; masks come from ``rng`` if given, else from
    ``dropout_seed``. Inverted scaling means eval mode needs no correction.
    """
    cfg, p = weights.config, weights.params
    dtype = weights.dtype
    h = _as_batch(x, cfg, dtype)[..., None]
    n = h.shape[0]
    cache = {"trace": [("input", h.shape[1:])], "conv_in": [], "relu": [], "pool": []}
    for i in range(1, len(cfg.conv_channels) + 1):
        cache["conv_in"].append(h)
        h = _conv_forward(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"])
        np.maximum(h, 0, out=h)
        cache["relu"].append(h)
        cache["trace"].append((f"conv{i}", h.shape[1:]))
        if i in cfg.pool_after:
            shape = h.shape
            h, arg = _pool_forward(h)
            cache["pool"].append((arg, shape))
            cache["trace"].append((f"pool{cfg.pool_after.index(i) + 1}", h.shape[1:]))
        else:
            cache["pool"].append(None)
    cache["gap_shape"] = h.shape
    feat = h.mean(axis=(1, 2))
    cache["trace"].append(("gap", feat.shape[1:]))
    cache["feat"] = feat

    masks = None
    if train_mode and cfg.dropout_rate > 0:
        if rng is None:
            rng = np.random.default_rng(dropout_seed)
        masks = _dropout_masks(rng, n, cfg, np.dtype(dtype))
    cache["masks"] = masks

    outs = {}
    for head in ("quality", "scene"):
        a = feat
        acts = []
        for j in range(1, len(cfg.head_hidden_dims) + 1):
            a = a @ p[f"{head}.fc{j}.weight"].T + p[f"{head}.fc{j}.bias"]
            np.maximum(a, 0, out=a)
            if masks is not None:
                a = a * masks[f"{head}.fc{j}"]
            acts.append(a)
        cache[f"{head}.acts"] = acts
        outs[head] = a @ p[f"{head}.out.weight"].T + p[f"{head}.out.bias"]
    cache["trace"].append(("quality", outs["quality"].shape[1:]))
    cache["trace"].append(("scene_logits", outs["scene"].shape[1:]))
    return outs["quality"][:, 0], outs["scene"], cache


def backward(weights: NetworkWeights, cache, d_quality, d_logits) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given its derivatives w.r.t. both outputs."""
    cfg, p = weights.config, weights.params
    dtype = weights.dtype
    grads = {}
    d_feat = np.zeros_like(cache["feat"])
    heads = (("quality", np.asarray(d_quality, dtype=dtype).reshape(-1, 1)),
             ("scene", np.asarray(d_logits, dtype=dtype)))
    for head, d_out in heads:
        acts = cache[f"{head}.acts"]
        grads[f"{head}.out.weight"] = d_out.T @ acts[-1]
        grads[f"{head}.out.bias"] = d_out.sum(axis=0)
        da = d_out @ p[f"{head}.out.weight"]
        for j in range(len(cfg.head_hidden_dims), 0, -1):
            a = acts[j - 1]
            if cache["masks"] is not None:
                da = da * cache["masks"][f"{head}.fc{j}"]
            da = da * (a > 0)
            a_prev = acts[j - 2] if j > 1 else cache["feat"]
            grads[f"{head}.fc{j}.weight"] = da.T @ a_prev
            grads[f"{head}.fc{j}.bias"] = da.sum(axis=0)
            da = da @ p[f"{head}.fc{j}.weight"]
        d_feat = d_feat + da

    n, hh, ww, c = cache["gap_shape"]
    dh = np.broadcast_to((d_feat / dtype.type(hh * ww))[:, None, None, :], (n, hh, ww, c))
    for i in range(len(cfg.conv_channels), 0, -1):
        pool = cache["pool"][i - 1]
        if pool is not None:
            dh = _pool_backward(dh, *pool)
        dh = dh * (cache["relu"][i - 1] > 0)
        dx, dw, db = _conv_backward(cache["conv_in"][i - 1], p[f"conv{i}.weight"], dh, need_dx=i > 1)
        grads[f"conv{i}.weight"] = dw
        grads[f"conv{i}.bias"] = db
        dh = dx
    return {k: grads[k] for k in p}


def shape_trace(weights: NetworkWeights) -> list[tuple[str, tuple]]:
    s = weights.config.input_size
    return forward_arrays(weights, np.zeros((1, s, s)))[2]["trace"]


def _patch_pixels(patch) -> np.ndarray:
    return patch.pixels if isinstance(patch, Patch) else np.asarray(patch)


def forward(weights: NetworkWeights, patch, train_mode: bool = False,
            dropout_seed: int = 0) -> ForwardOutput:
    pix = _patch_pixels(patch)
    if np.ndim(pix) != 2:
        raise ImageDimensionError(f"expected a single 2-D patch, got shape {np.shape(pix)}")
    q, logits, _ = forward_arrays(weights, pix[None], train_mode, dropout_seed)
    return ForwardOutput(float(q[0]), logits[0].copy())


def predict_arrays(weights: NetworkWeights, x, chunk: int = 64):
    """Eval-mode quality and logits for a stack of patches, in chunks."""
    x = np.asarray(x)
    if len(x) == 0:
        return np.zeros(0), np.zeros((0, weights.config.scene_classes))
    qs, ls = [], []
    for start in range(0, len(x), chunk):
        q, lg, _ = forward_arrays(weights, x[start:start + chunk])
        qs.append(q)
        ls.append(lg)
    return np.concatenate(qs), np.concatenate(ls)


def forward_batch(weights: NetworkWeights, patches: Sequence, train_mode: bool = False,
                  dropout_seed: int = 0) -> list[ForwardOutput]:
    if len(patches) == 0:
        return []
    x = np.stack([_patch_pixels(pt) for pt in patches])
    if train_mode:
        q, logits, _ = forward_arrays(weights, x, True, dropout_seed)
    else:
        q, logits = predict_arrays(weights, x)
    return [ForwardOutput(float(qi), li.copy()) for qi, li in zip(q, logits)]


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_MAGIC = b"SIQACKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable checkpoint, or one that does not fit the requested config."""


@dataclass
class Checkpoint:
    weights: NetworkWeights
    metadata: dict = field(default_factory=dict)


def save_checkpoint(path, weights: NetworkWeights, metadata: dict | None = None) -> None:
    """Write weights as float32 little-endian tensors behind a JSON header.

    Layout: 8-byte magic, uint32 version, uint64 header length, UTF-8 JSON
    header (config, tensor names and shapes in storage order, metadata),
    then the tensors back to back in that order.
    """
    tensors = [{"name": k, "shape": list(v.shape)} for k, v in weights.params.items()]
    header = {
        "config": weights.config.to_dict(),
        "tensors": tensors,
        "metadata": metadata or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for v in weights.params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_checkpoint(path, expected_config: NetworkConfig | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    offset = 20
    header = json.loads(data[offset:offset + hlen].decode("utf-8"))
    offset += hlen
    config = NetworkConfig.from_dict(header["config"])
    if expected_config is not None and config != expected_config:
        raise CheckpointError(
            f"{path}: checkpoint network config {config} is incompatible with {expected_config}")
    expected = parameter_shapes(config)
    stored = [(t["name"], tuple(t["shape"])) for t in header["tensors"]]
    if stored != list(expected.items()):
        raise CheckpointError(f"{path}: tensor layout does not match its network config")
    need = offset + 4 * sum(int(np.prod(shape)) for _, shape in stored)
    if len(data) < need:
        raise CheckpointError(f"{path}: truncated, expected {need} bytes, found {len(data)}")
    params = {}
    for name, shape in stored:
        size = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=offset)
        params[name] = arr.reshape(shape).astype(np.float32)
        offset += 4 * size
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    return Checkpoint(NetworkWeights(config, params), header["metadata"])
