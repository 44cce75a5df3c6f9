"""Minimal CNN/MLP engine: forward pass with activation capture, backprop, SGD to a target accuracy."""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from arm_meter import kernels
from arm_meter.stats import average_activation
from arm_meter.tensor_io import ActivationTrace, Dataset, LayerTrace, read_weights, write_weights

LAYER_KINDS = ("conv2d", "dense", "global_average_pool", "logits")
# keeps dead-input pre-activations off the ReLU kink at initialization
BIAS_INIT = 0.01


class ShapeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    size: int = 0  # out_channels for conv2d, out_features for dense/logits

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind != "global_average_pool" and self.size < 1:
            raise ValueError(f"{self.kind} layer needs a positive size")


@dataclass(frozen=True)
class ModelSpec:
    model_id: str
    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.shapes()

    def shapes(self) -> list[tuple[int, ...]]:
        """Output shape (without batch axis) after each layer; validates the chain."""
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ShapeError(f"input shape must be (channels, height, width), got {self.input_shape}")
        kinds = [layer.kind for layer in self.layers]
        if not kinds or kinds[-1] != "logits" or kinds.count("logits") != 1:
            raise ShapeError("the last layer, and only the last, must be a logits layer")
        shape: tuple[int, ...] = self.input_shape
        out = []
        for layer in self.layers:
            if layer.kind == "conv2d":
                if len(shape) != 3:
                    raise ShapeError("conv2d needs a (channels, height, width) input")
                shape = (layer.size, shape[1], shape[2])
            elif layer.kind == "global_average_pool":
                if len(shape) != 3:
                    raise ShapeError("global_average_pool needs a spatial input")
                shape = (shape[0],)
            else:
                shape = (layer.size,)
            out.append(shape)
        return out

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "input_shape": list(self.input_shape),
            "layers": [asdict(layer) for layer in self.layers],
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        return cls(
            model_id=data["model_id"],
            input_shape=tuple(data["input_shape"]),
            layers=tuple(LayerSpec(d["kind"], int(d.get("size", 0))) for d in data["layers"]),
            seed=int(data.get("seed", 0)),
        )

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ModelSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def zoo_spec(name: str, input_shape=(1, 16, 16), num_classes: int = 4, seed: int = 0) -> ModelSpec:
    """Small fixed architectures used by the experiment driver."""
    zoo = {
        "toy-cnn-a": [LayerSpec("conv2d", 4), LayerSpec("conv2d", 8), LayerSpec("global_average_pool")],
        "toy-cnn-b": [
            LayerSpec("conv2d", 4),
            LayerSpec("conv2d", 6),
            LayerSpec("conv2d", 8),
            LayerSpec("global_average_pool"),
        ],
        "toy-mlp": [LayerSpec("dense", 32), LayerSpec("dense", 16)],
    }
    if name not in zoo:
        raise KeyError(f"unknown zoo model {name!r}; choose from {sorted(zoo)}")
    layers = zoo[name] + [LayerSpec("logits", num_classes)]
    return ModelSpec(name, tuple(input_shape), tuple(layers), seed)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass
class _Param:
    name: str
    kind: str
    w: np.ndarray
    b: np.ndarray


class Model:
    """Parameters plus forward/backward for a :class:`ModelSpec`.

    Hidden conv2d and dense layers are followed by ReLU; their post-ReLU outputs
    are the captured activations. Dense layers flatten spatial inputs.
    """

    def __init__(self, spec: ModelSpec, params: list[_Param]):
        self.spec = spec
        self.params = params

    @property
    def dtype(self):
        return self.params[0].w.dtype

    @property
    def n_parameters(self) -> int:
        return sum(p.w.size + p.b.size for p in self.params)

    @property
    def capture_names(self) -> list[str]:
        return [p.name for p in self.params if p.kind != "logits"]

    def astype(self, dtype) -> "Model":
        return Model(
            self.spec,
            [_Param(p.name, p.kind, p.w.astype(dtype), p.b.astype(dtype)) for p in self.params],
        )

    def copy(self) -> "Model":
        return self.astype(self.dtype)

    def get_flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([p.w.ravel(), p.b.ravel()]) for p in self.params])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat)
        if flat.size != self.n_parameters:
            raise ShapeError(f"expected {self.n_parameters} weights, got {flat.size}")
        pos = 0
        for p in self.params:
            for arr in (p.w, p.b):
                arr[...] = flat[pos : pos + arr.size].reshape(arr.shape)
                pos += arr.size

    # -- forward / backward -------------------------------------------------

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4 or tuple(x.shape[1:]) != self.spec.input_shape:
            raise ShapeError(
                f"dimension mismatch: model expects {self.spec.input_shape}, got {tuple(x.shape[1:])}"
            )
        return np.ascontiguousarray(x, dtype=self.dtype)

    def forward(self, x: np.ndarray, keep: bool = False, maps: bool = False):
        """Return ``(logits, captured, cache)``.

        ``captured`` maps each hidden layer name to its per-filter spatial mean
        (``(n, filters)``), or to the full post-ReLU feature maps when ``maps``.
        ``cache`` is only populated when ``keep`` (needed by :meth:`backward`).
        """
        h = self._check_input(x)
        it = iter(self.params)
        captured: dict[str, np.ndarray] = {}
        cache = []
        for layer in self.spec.layers:
            if layer.kind == "global_average_pool":
                cache.append(("gap", h.shape))
                h = h.mean(axis=(2, 3), dtype=np.float64).astype(self.dtype)
                continue
            p = next(it)
            if p.kind == "conv2d":
                z = kernels.conv3x3_forward(h, p.w, p.b)
            else:
                inp = h.reshape(h.shape[0], -1)
                z = inp @ p.w.T + p.b
            if keep:
                cache.append((p, h))
            if p.kind == "logits":
                h = z
                break
            h = np.maximum(z, 0)
            if keep:
                cache.append(("relu", h))
            if maps:
                captured[p.name] = h
            elif h.ndim == 4:
                captured[p.name] = h.mean(axis=(2, 3), dtype=np.float64)
            else:
                captured[p.name] = h.astype(np.float64)
        return h, captured, cache

    def backward(self, dlogits: np.ndarray, cache) -> list[tuple[np.ndarray, np.ndarray]]:
        grads: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        g = dlogits
        for item in reversed(cache):
            tag, val = item
            if tag == "gap":
                n, c, hh, ww = val
                g = np.broadcast_to(g[:, :, None, None] / (hh * ww), val).astype(self.dtype)
            elif tag == "relu":
                g = g * (val > 0)
            else:
                p, inp = tag, val
                if p.kind == "conv2d":
                    g = np.ascontiguousarray(g, dtype=self.dtype)
                    dx, dw, db = kernels.conv3x3_backward(inp, p.w, g)
                    grads[p.name] = (dw, db)
                    g = dx
                else:
                    flat = inp.reshape(inp.shape[0], -1)
                    grads[p.name] = (g.T @ flat, g.sum(axis=0))
                    g = (g @ p.w).reshape(inp.shape)
        return [grads[p.name] for p in self.params]

    def loss_and_grads(self, x: np.ndarray, y: np.ndarray):
        """Mean softmax cross-entropy over the batch and its parameter gradients."""
        logits, _, cache = self.forward(x, keep=True)
        loss, dlogits = softmax_cross_entropy(logits, y)
        return loss, self.backward(dlogits, cache)

    def loss(self, x: np.ndarray, y: np.ndarray) -> float:
        logits, _, _ = self.forward(x)
        return softmax_cross_entropy(logits, y)[0]

    def predict(self, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
        out = [self.forward(x[s : s + batch_size])[0].argmax(axis=1) for s in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def softmax_cross_entropy(logits: np.ndarray, y: np.ndarray):
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    n = logits.shape[0]
    loss = float(-logp[np.arange(n), y].mean(dtype=np.float64))
    d = np.exp(logp)
    d[np.arange(n), y] -= 1
    return loss, (d / n).astype(logits.dtype)


def init_model(spec: ModelSpec, dtype=np.float32) -> Model:
    """He-uniform weights drawn from ``spec.seed``; biases start at ``BIAS_INIT``."""
    rng = np.random.default_rng(spec.seed)
    shapes = spec.shapes()
    prev = spec.input_shape
    params = []
    counts = {"conv2d": 0, "dense": 0}
    for layer, out_shape in zip(spec.layers, shapes):
        if layer.kind == "global_average_pool":
            prev = out_shape
            continue
        if layer.kind == "conv2d":
            fan_in = prev[0] * 9
            wshape = (layer.size, prev[0], 3, 3)
        else:
            fan_in = int(np.prod(prev))
            wshape = (layer.size, fan_in)
        limit = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-limit, limit, size=wshape).astype(dtype)
        if layer.kind == "logits":
            name = "logits"
        else:
            counts[layer.kind] += 1
            name = f"{'conv' if layer.kind == 'conv2d' else 'dense'}{counts[layer.kind]}"
        params.append(_Param(name, layer.kind, w, np.full(layer.size, BIAS_INIT, dtype=dtype)))
        prev = out_shape
    return Model(spec, params)


# ---------------------------------------------------------------------------
# Capture
# ---------------------------------------------------------------------------


def forward_with_capture(model: Model, ds: Dataset, batch_size: int = 500):
    """Predictions and per-filter averaged post-ReLU activations for every sample."""
    model._check_input(ds.images[:1])
    preds = []
    chunks: dict[str, list[np.ndarray]] = {name: [] for name in model.capture_names}
    for s in range(0, len(ds), batch_size):
        logits, captured, _ = model.forward(ds.images[s : s + batch_size])
        preds.append(logits.argmax(axis=1))
        for name, val in captured.items():
            chunks[name].append(val)
    layers = [LayerTrace(name, np.concatenate(vals, axis=0).T) for name, vals in chunks.items()]
    trace = ActivationTrace(model.spec.model_id, ds.name, layers)
    return np.concatenate(preds), trace


def capture_slow(model: Model, ds: Dataset) -> ActivationTrace:
    """Reference path: materialize every feature map and average it one at a time."""
    _, fmaps, _ = model.forward(ds.images, maps=True)
    layers = []
    for name, maps in fmaps.items():
        n, f = maps.shape[:2]
        vals = np.empty((f, n))
        for x in range(n):
            for k in range(f):
                fmap = maps[x, k] if maps.ndim == 4 else maps[x, k].reshape(1, 1)
                vals[k, x] = average_activation(fmap)
        layers.append(LayerTrace(name, vals))
    return ActivationTrace(model.spec.model_id, ds.name, layers)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    target_accuracy: float
    max_epochs: int
    learning_rate: float = 1e-3
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")
        if not 0 < self.target_accuracy <= 1:
            raise ValueError("target_accuracy must be in (0, 1]")


@dataclass
class RetrainingReport:
    epochs_used: int
    reached_target: bool
    accuracy_curve: list[float] = field(default_factory=list)
    loss_curve: list[float] = field(default_factory=list)
    wall_seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def accuracy(model: Model, ds: Dataset) -> float:
    if len(ds) == 0:
        return 0.0
    return float(np.mean(model.predict(ds.images) == ds.labels))


def holdout_split(n: int, fraction: float = 0.1, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic (train, holdout) index split."""
    perm = np.random.default_rng(seed).permutation(n)
    n_hold = max(1, int(round(n * fraction)))
    return np.sort(perm[n_hold:]), np.sort(perm[:n_hold])


def sgd_epoch(model: Model, ds: Dataset, cfg: TrainConfig, rng: np.random.Generator) -> float:
    order = rng.permutation(len(ds))
    total = 0.0
    lr = model.dtype.type(cfg.learning_rate)
    for s in range(0, len(ds), cfg.batch_size):
        idx = order[s : s + cfg.batch_size]
        loss, grads = model.loss_and_grads(ds.images[idx], ds.labels[idx])
        total += loss * len(idx)
        for p, (dw, db) in zip(model.params, grads):
            p.w -= lr * dw.astype(model.dtype, copy=False)
            p.b -= lr * db.astype(model.dtype, copy=False)
    return total / len(ds)


def train_to_accuracy(
    model: Model,
    ds: Dataset,
    cfg: TrainConfig,
    holdout: Dataset | None = None,
) -> RetrainingReport:
    """Mini-batch SGD (fixed rate) until holdout accuracy reaches the target.

    Accuracy is checked before the first epoch and after every epoch. When no
    holdout set is given, 10% of ``ds`` is split off with ``cfg.seed``.
    The model is updated in place.
    """
    start = time.perf_counter()
    if holdout is None:
        train_idx, hold_idx = holdout_split(len(ds), 0.1, cfg.seed)
        ds, holdout = ds.subset(train_idx), ds.subset(hold_idx)
    rng = np.random.default_rng(cfg.seed)
    curve = [accuracy(model, holdout)]
    losses: list[float] = []
    epochs = 0
    while curve[-1] < cfg.target_accuracy and epochs < cfg.max_epochs:
        losses.append(sgd_epoch(model, ds, cfg, rng))
        epochs += 1
        curve.append(accuracy(model, holdout))
    return RetrainingReport(
        epochs_used=epochs,
        reached_target=curve[-1] >= cfg.target_accuracy,
        accuracy_curve=curve,
        loss_curve=losses,
        wall_seconds=time.perf_counter() - start,
    )


def _relu_pattern(model: Model, x: np.ndarray) -> bytes:
    _, _, cache = model.forward(x, keep=True)
    return b"".join(np.packbits(val > 0).tobytes() for tag, val in cache if isinstance(tag, str) and tag == "relu")


def gradient_check(model: Model, x: np.ndarray, y: np.ndarray, h: float = 1e-4) -> float:
    """Max relative error between backprop and central finite differences (float64).

    Relative error per parameter is ``|a - n| / max(|a|, |n|, 1e-6)``. When the
    +/-h step flips any ReLU on/off the difference quotient straddles a kink; the
    step is then shrunk (down to h/100) and the parameter skipped if it still flips.
    """
    m = model.astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    _, grads = m.loss_and_grads(x, y)
    analytic = np.concatenate([np.concatenate([dw.ravel(), db.ravel()]) for dw, db in grads])
    base = _relu_pattern(m, x)
    flat = m.get_flat()
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        for step in (h, h / 10, h / 100):
            flat[i] = orig + step
            m.set_flat(flat)
            up, up_pat = m.loss(x, y), _relu_pattern(m, x)
            flat[i] = orig - step
            m.set_flat(flat)
            down, down_pat = m.loss(x, y), _relu_pattern(m, x)
            flat[i] = orig
            m.set_flat(flat)
            if up_pat == base and down_pat == base:
                numeric = (up - down) / (2 * step)
                a = analytic[i]
                worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-6))
                break
    return float(worst)


def save_model_weights(model: Model, path) -> None:
    write_weights(model.get_flat(), path)


def load_model(spec: ModelSpec, weights_path=None) -> Model:
    model = init_model(spec)
    if weights_path is not None:
        model.set_flat(read_weights(weights_path))
    return model
