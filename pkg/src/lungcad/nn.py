"""Minimal feed-forward neural network engine on numpy.

Dense, 2-D convolution, 2x2 max-pooling, ReLU, dropout and softmax layers
with cross-entropy loss and plain SGD. Image inputs are channels-last
(batch, height, width, channels); dense stacks use (batch, features).
All math runs in float64. Includes central finite-difference gradient
verification and a versioned binary model container.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, fields
from typing import ClassVar, Sequence

import numpy as np

log = logging.getLogger(__name__)

MODEL_MAGIC = b"LCNN"
MODEL_VERSION = 1


class ShapeError(ValueError):
    """Layer chain or batch shape is inconsistent."""


class NumericError(ArithmeticError):
    """Non-finite value produced during a forward or backward pass."""


# ---------------------------------------------------------------------------
# layer specs

@dataclass(frozen=True)
class Dense:
    in_units: int
    out_units: int
    kind: ClassVar[str] = "dense"


@dataclass(frozen=True)
class Conv2D:
    in_channels: int
    out_channels: int
    kernel_size: int = 5
    stride: int = 1
    kind: ClassVar[str] = "conv2d"


@dataclass(frozen=True)
class MaxPool2x2:
    kind: ClassVar[str] = "maxpool2x2"


@dataclass(frozen=True)
class Relu:
    kind: ClassVar[str] = "relu"


@dataclass(frozen=True)
class Dropout:
    rate: float
    kind: ClassVar[str] = "dropout"

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")


@dataclass(frozen=True)
class Softmax:
    kind: ClassVar[str] = "softmax"


LayerSpec = Dense | Conv2D | MaxPool2x2 | Relu | Dropout | Softmax

_SPEC_KINDS = {cls.kind: cls for cls in (Dense, Conv2D, MaxPool2x2, Relu, Dropout, Softmax)}


def spec_to_dict(spec: LayerSpec) -> dict:
    d = {"kind": spec.kind}
    for f in fields(spec):
        d[f.name] = getattr(spec, f.name)
    return d


def spec_from_dict(d: dict) -> LayerSpec:
    cls = _SPEC_KINDS.get(d.get("kind"))
    if cls is None:
        raise ValueError(f"unknown layer kind {d.get('kind')!r}")
    kwargs = {k: v for k, v in d.items() if k != "kind"}
    return cls(**kwargs)


def _infer_shape(spec: LayerSpec, in_shape: tuple[int, ...], index: int) -> tuple[int, ...]:
    """Output shape (without batch dim) of `spec` applied to `in_shape`."""
    where = f"layer {index} ({spec.kind})"
    if isinstance(spec, Dense):
        if int(np.prod(in_shape)) != spec.in_units:
            raise ShapeError(
                f"{where}: expects {spec.in_units} input units, got shape {in_shape}"
            )
        return (spec.out_units,)
    if isinstance(spec, Conv2D):
        if len(in_shape) != 3 or in_shape[2] != spec.in_channels:
            raise ShapeError(
                f"{where}: expects (H, W, {spec.in_channels}) input, got {in_shape}"
            )
        h, w, _ = in_shape
        k, s = spec.kernel_size, spec.stride
        if h < k or w < k:
            raise ShapeError(f"{where}: input {in_shape} smaller than kernel {k}")
        return ((h - k) // s + 1, (w - k) // s + 1, spec.out_channels)
    if isinstance(spec, MaxPool2x2):
        if len(in_shape) != 3:
            raise ShapeError(f"{where}: expects (H, W, C) input, got {in_shape}")
        h, w, c = in_shape
        if h % 2 or w % 2:
            raise ShapeError(f"{where}: spatial dims must be even, got {in_shape}")
        return (h // 2, w // 2, c)
    if isinstance(spec, Dropout):
        if not 0.0 <= spec.rate < 1.0:
            raise ShapeError(f"{where}: dropout rate must be in [0, 1), got {spec.rate}")
        return in_shape
    if isinstance(spec, Softmax):
        if len(in_shape) != 1:
            raise ShapeError(f"{where}: softmax expects a flat vector, got {in_shape}")
        return in_shape
    return in_shape  # relu


def _init_params(spec: LayerSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases; paramless layers get an empty dict."""
    if isinstance(spec, Dense):
        limit = np.sqrt(6.0 / (spec.in_units + spec.out_units))
        w = rng.uniform(-limit, limit, size=(spec.in_units, spec.out_units))
        return {"w": w, "b": np.zeros(spec.out_units)}
    if isinstance(spec, Conv2D):
        k = spec.kernel_size
        fan_in = k * k * spec.in_channels
        fan_out = k * k * spec.out_channels
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(k, k, spec.in_channels, spec.out_channels))
        return {"w": w, "b": np.zeros(spec.out_channels)}
    return {}


# ---------------------------------------------------------------------------
# network

class Network:
    """Ordered layer stack with per-layer parameter tensors.

    Construction validates the whole chain (shape safety is checked here,
    never mid-training) and initializes parameters deterministically from
    `seed`. Instances are treated as values: training operates on copies.
    """

    def __init__(self, input_shape: Sequence[int], layers: Sequence[LayerSpec], seed: int,
                 _params: list[dict[str, np.ndarray]] | None = None):
        self.input_shape = tuple(int(d) for d in input_shape)
        if not self.input_shape or any(d <= 0 for d in self.input_shape):
            raise ShapeError(f"bad input shape {self.input_shape}")
        self.layers = list(layers)
        if not self.layers:
            raise ShapeError("network needs at least one layer")
        self.seed = int(seed)

        shape = self.input_shape
        self.layer_shapes = [shape]
        for i, spec in enumerate(self.layers):
            shape = _infer_shape(spec, shape, i)
            self.layer_shapes.append(shape)
        self.output_shape = shape

        if _params is not None:
            self.params = _params
        else:
            rng = np.random.default_rng(self.seed)
            self.params = [_init_params(spec, rng) for spec in self.layers]

    @property
    def has_dropout(self) -> bool:
        return any(isinstance(s, Dropout) and s.rate > 0 for s in self.layers)

    def copy(self) -> "Network":
        params = [{k: v.copy() for k, v in p.items()} for p in self.params]
        return Network(self.input_shape, self.layers, self.seed, _params=params)

    def params_equal(self, other: "Network") -> bool:
        if len(self.params) != len(other.params):
            return False
        for a, b in zip(self.params, other.params):
            if a.keys() != b.keys():
                return False
            for k in a:
                if not np.array_equal(a[k], b[k]):
                    return False
        return True

    # -- forward ------------------------------------------------------------

    def forward(self, batch: np.ndarray, mode: str = "inference",
                rng: np.random.Generator | None = None) -> np.ndarray:
        """Run the batch through all layers and return the output.

        `mode` is "training" or "inference"; dropout masks are applied only
        in training mode and are drawn from `rng`.
        """
        out, _ = self._forward(batch, mode, rng, want_caches=False)
        return out

    def _forward(self, batch, mode, rng, want_caches):
        if mode not in ("training", "inference"):
            raise ValueError(f"mode must be 'training' or 'inference', got {mode!r}")
        x = np.asarray(batch, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(
                f"batch shape {x.shape[1:]} does not match network input {self.input_shape}"
            )
        if mode == "training" and self.has_dropout and rng is None:
            raise ValueError("training-mode forward requires rng (dropout is active)")
        caches = []
        for i, (spec, p) in enumerate(zip(self.layers, self.params)):
            x, cache = _layer_forward(spec, p, x, mode, rng)
            if not np.all(np.isfinite(x)):
                raise NumericError(f"non-finite output at layer {i} ({spec.kind})")
            caches.append(cache if want_caches else None)
        return x, caches

    # -- backward -----------------------------------------------------------

    def _backward(self, caches, grad_out):
        """Gradients of the loss w.r.t. every parameter tensor.

        `grad_out` is dL/d(output); returns a list shaped like self.params.
        """
        grads: list[dict[str, np.ndarray]] = [None] * len(self.layers)
        g = grad_out
        for i in range(len(self.layers) - 1, -1, -1):
            spec, p, cache = self.layers[i], self.params[i], caches[i]
            g, layer_grads = _layer_backward(spec, p, cache, g)
            if not np.all(np.isfinite(g)) or any(
                not np.all(np.isfinite(v)) for v in layer_grads.values()
            ):
                raise NumericError(f"non-finite gradient at layer {i} ({spec.kind})")
            grads[i] = layer_grads
        return grads

    def _step(self, batch, labels, lr, rng=None, class_weights=None):
        """One in-place SGD step; returns the pre-update loss."""
        out, caches = self._forward(batch, "training", rng, want_caches=True)
        loss = loss_cross_entropy(out, labels, class_weights)
        grad = _cross_entropy_grad(out, labels, class_weights)
        grads = self._backward(caches, grad)
        for p, g in zip(self.params, grads):
            for k in p:
                p[k] -= lr * g[k]
        return loss

    # -- serialization ------------------------------------------------------

    def save(self, path) -> None:
        """Write the versioned binary container (bit-exact round trip)."""
        header = {
            "input_shape": list(self.input_shape),
            "seed": self.seed,
            "layers": [spec_to_dict(s) for s in self.layers],
            "params": [
                {k: {"shape": list(v.shape)} for k, v in sorted(p.items())}
                for p in self.params
            ],
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(MODEL_MAGIC)
            fh.write(struct.pack("<II", MODEL_VERSION, len(blob)))
            fh.write(blob)
            for p in self.params:
                for k in sorted(p):
                    fh.write(np.ascontiguousarray(p[k], dtype="<f8").tobytes())

    @staticmethod
    def load(path) -> "Network":
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != MODEL_MAGIC:
                raise ValueError(f"{path}: not a model file (bad magic {magic!r})")
            version, hlen = struct.unpack("<II", fh.read(8))
            if version != MODEL_VERSION:
                raise ValueError(f"{path}: unsupported model version {version}")
            header = json.loads(fh.read(hlen).decode("utf-8"))
            layers = [spec_from_dict(d) for d in header["layers"]]
            params = []
            for pdesc in header["params"]:
                p = {}
                for k, desc in sorted(pdesc.items()):
                    shape = tuple(desc["shape"])
                    n = int(np.prod(shape)) if shape else 1
                    raw = fh.read(8 * n)
                    if len(raw) != 8 * n:
                        raise ValueError(f"{path}: truncated parameter data")
                    p[k] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
                params.append(p)
        return Network(header["input_shape"], layers, header["seed"], _params=params)


# ---------------------------------------------------------------------------
# per-layer forward / backward

def _layer_forward(spec, p, x, mode, rng):
    if isinstance(spec, Dense):
        flat = x.reshape(x.shape[0], -1)
        out = flat @ p["w"] + p["b"]
        return out, (x.shape, flat)
    if isinstance(spec, Conv2D):
        cols, out_hw = _im2col(x, spec.kernel_size, spec.stride)
        wmat = p["w"].reshape(-1, spec.out_channels)
        out = cols @ wmat + p["b"]
        out = out.reshape(x.shape[0], out_hw[0], out_hw[1], spec.out_channels)
        return out, (x.shape, cols, out_hw)
    if isinstance(spec, MaxPool2x2):
        n, h, w, c = x.shape
        win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
        win = win.reshape(n, h // 2, w // 2, c, 4)
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return out, (x.shape, idx)
    if isinstance(spec, Relu):
        mask = x > 0
        return x * mask, mask
    if isinstance(spec, Dropout):
        if mode != "training" or spec.rate == 0.0:
            return x, None
        keep = rng.random(x.shape) >= spec.rate
        scale = 1.0 / (1.0 - spec.rate)
        return x * keep * scale, (keep, scale)
    if isinstance(spec, Softmax):
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=1, keepdims=True)
        return out, out
    raise TypeError(f"unhandled layer spec {spec!r}")


def _layer_backward(spec, p, cache, g):
    if isinstance(spec, Dense):
        in_shape, flat = cache
        grads = {"w": flat.T @ g, "b": g.sum(axis=0)}
        return (g @ p["w"].T).reshape(in_shape), grads
    if isinstance(spec, Conv2D):
        in_shape, cols, out_hw = cache
        k, s = spec.kernel_size, spec.stride
        gmat = g.reshape(-1, spec.out_channels)
        grads = {
            "w": (cols.T @ gmat).reshape(p["w"].shape),
            "b": gmat.sum(axis=0),
        }
        dcols = (gmat @ p["w"].reshape(-1, spec.out_channels).T)
        dcols = dcols.reshape(in_shape[0], out_hw[0], out_hw[1], k, k, in_shape[3])
        dx = np.zeros(in_shape)
        for ki in range(k):
            for kj in range(k):
                dx[:, ki:ki + s * out_hw[0]:s, kj:kj + s * out_hw[1]:s, :] += \
                    dcols[:, :, :, ki, kj, :]
        return dx, grads
    if isinstance(spec, MaxPool2x2):
        in_shape, idx = cache
        n, h, w, c = in_shape
        dwin = np.zeros((n, h // 2, w // 2, c, 4))
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dx = dwin.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        return dx.reshape(in_shape), {}
    if isinstance(spec, Relu):
        return g * cache, {}
    if isinstance(spec, Dropout):
        if cache is None:
            return g, {}
        keep, scale = cache
        return g * keep * scale, {}
    if isinstance(spec, Softmax):
        probs = cache
        dot = (g * probs).sum(axis=1, keepdims=True)
        return probs * (g - dot), {}
    raise TypeError(f"unhandled layer spec {spec!r}")


def _im2col(x, k, s):
    """Patch matrix (n*out_h*out_w, k*k*c) of all kernel windows of x."""
    windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
    windows = windows[:, ::s, ::s]             # (n, out_h, out_w, c, k, k)
    out_hw = windows.shape[1:3]
    cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(-1, k * k * x.shape[3])
    return cols, out_hw


# ---------------------------------------------------------------------------
# loss

def loss_cross_entropy(probs: np.ndarray, labels, class_weights=None) -> float:
    """Weighted mean of -log p(true class); p clamped below at 1e-12."""
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.intp)
    if probs.ndim != 2 or len(y) != probs.shape[0]:
        raise ShapeError(f"probs {probs.shape} incompatible with {len(y)} labels")
    if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("probability rows must sum to 1")
    if np.any(y < 0) or np.any(y >= probs.shape[1]):
        raise ValueError("label out of range")
    p_true = np.maximum(probs[np.arange(len(y)), y], 1e-12)
    w = np.ones(len(y)) if class_weights is None else np.asarray(class_weights)[y]
    return float((w * -np.log(p_true)).sum() / w.sum())


def _cross_entropy_grad(probs, labels, class_weights=None):
    """dL/d(probs) for loss_cross_entropy; zero inside the clamp region."""
    y = np.asarray(labels, dtype=np.intp)
    w = np.ones(len(y)) if class_weights is None else np.asarray(class_weights)[y]
    p_true = probs[np.arange(len(y)), y]
    grad = np.zeros_like(probs)
    live = p_true >= 1e-12
    rows = np.arange(len(y))[live]
    grad[rows, y[live]] = -w[live] / (p_true[live] * w.sum())
    return grad


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    shuffle: bool = True
    class_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


def train_step(model: Network, batch, labels, lr: float,
               rng: np.random.Generator | None = None,
               class_weights=None) -> tuple[Network, float]:
    """One SGD step on a copy of the model; loss is computed pre-update."""
    net = model.copy()
    loss = net._step(batch, labels, lr, rng, class_weights)
    return net, loss


def train(model: Network, samples, labels, config: TrainConfig) -> Network:
    """SGD training loop, fully determined by (model, data, config.seed)."""
    x = np.asarray(samples, dtype=np.float64)
    y = np.asarray(labels, dtype=np.intp)
    if len(x) != len(y):
        raise ValueError(f"{len(x)} samples vs {len(y)} labels")
    if len(x) == 0:
        raise ValueError("empty sample set")
    if len(np.unique(y)) < 2:
        log.warning("training on a single-class sample set (%d samples)", len(x))
    rng = np.random.default_rng(config.seed)
    net = model.copy()
    n = len(x)
    for _ in range(config.epochs):
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            net._step(x[idx], y[idx], config.learning_rate, rng, config.class_weights)
    return net


# ---------------------------------------------------------------------------
# gradient verification

def gradient_check(model: Network, batch, labels, epsilon: float = 1e-5,
                   n_samples: int = 25, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Checks up to `n_samples` randomly chosen entries per parameter tensor.
    Dropout is disabled (inference-mode passes) so the loss is smooth in the
    parameters. Relative error uses max(|analytic|, |numeric|, 1e-8) as the
    denominator.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must be in [1e-6, 1e-3], got {epsilon}")
    x = np.asarray(batch, dtype=np.float64)
    y = np.asarray(labels, dtype=np.intp)
    net = model.copy()

    out, caches = net._forward(x, "inference", None, want_caches=True)
    grad = _cross_entropy_grad(out, y)
    analytic = net._backward(caches, grad)

    def loss_now():
        probs = net.forward(x, "inference")
        return loss_cross_entropy(probs, y)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(net.params, analytic):
        for key in sorted(p):
            arr = p[key]
            size = arr.size
            if size > n_samples:
                flat_idx = rng.choice(size, size=n_samples, replace=False)
            else:
                flat_idx = np.arange(size)
            flat = arr.reshape(-1)
            gflat = g[key].reshape(-1)
            for i in flat_idx:
                orig = flat[i]
                flat[i] = orig + epsilon
                lp = loss_now()
                flat[i] = orig - epsilon
                lm = loss_now()
                flat[i] = orig
                numeric = (lp - lm) / (2 * epsilon)
                denom = max(abs(gflat[i]), abs(numeric), 1e-8)
                worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst


# ---------------------------------------------------------------------------
# stock architectures

def build_patch_cnn(seed: int, input_shape=(48, 48, 3)) -> Network:
    """Default CNN for 48x48x3 candidate patches.

    conv(3->8, 5x5) / relu / pool -> conv(8->16, 5x5) / relu / pool
    -> dense 64 / relu / dropout 0.5 -> dense 2 / softmax.
    """
    h, w, c = input_shape
    h1, w1 = (h - 4) // 2, (w - 4) // 2
    h2, w2 = (h1 - 4) // 2, (w1 - 4) // 2
    flat = h2 * w2 * 16
    layers = [
        Conv2D(c, 8, kernel_size=5),
        Relu(),
        MaxPool2x2(),
        Conv2D(8, 16, kernel_size=5),
        Relu(),
        MaxPool2x2(),
        Dense(flat, 64),
        Relu(),
        Dropout(0.5),
        Dense(64, 2),
        Softmax(),
    ]
    return Network(input_shape, layers, seed)
