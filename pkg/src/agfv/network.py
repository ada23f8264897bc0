"""Network configuration, presets, parameter handling and SGD.

Two presets are provided.  ``paper200`` follows an AlexNet-like geometry on
200x200x1 inputs (5 conv, 3 pool, 3 fully connected, LRN after the first two
convolutions).  ``desk32`` is the small 32x32 variant every test and the
benchmark run on (3 conv, 2 pool, 3 fully connected).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DimensionError, NumericalError, UsageError
from .layers import (
    LayerSpec,
    fan_in,
    layer_backward,
    layer_forward,
    output_shape,
    param_shapes,
)
from .tensor import DTYPES


@dataclass(frozen=True)
class NetworkConfig:
    input_side: int
    layers: tuple[LayerSpec, ...]
    input_channels: int = 1
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.input_channels, self.input_side, self.input_side)

    def layer(self, name: str) -> LayerSpec:
        for spec in self.layers:
            if spec.name == name:
                return spec
        raise KeyError(name)

    def has_layer(self, name: str) -> bool:
        return any(l.name == name for l in self.layers)

    def width_of(self, name: str) -> int:
        return self.layer(name).width if self.has_layer(name) else 0

    @property
    def inject_width(self) -> int:
        return sum(l.width for l in self.layers if l.kind == "concat_inject")

    def shapes(self) -> list[tuple[tuple, tuple]]:
        """(input, output) per-sample shape of every layer.

        Raises DimensionError naming the first layer that does not fit.
        """
        out = []
        shape = self.input_shape
        for i, spec in enumerate(self.layers):
            try:
                nxt = output_shape(spec, shape)
            except DimensionError as exc:
                raise DimensionError(f"layer {i} ({spec.name}, {spec.kind}): {exc}") from None
            out.append((shape, nxt))
            shape = nxt
        return out

    @property
    def output_shape(self) -> tuple:
        return self.shapes()[-1][1] if self.layers else self.input_shape

    def param_shapes(self) -> dict[str, tuple]:
        result = {}
        for spec, (ins, _) in zip(self.layers, self.shapes()):
            for key, shp in param_shapes(spec, ins).items():
                result[f"{spec.name}.{key}"] = shp
        return result

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_side": self.input_side,
            "input_channels": self.input_channels,
            "layers": [l.to_dict() for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(
            input_side=d["input_side"],
            input_channels=d.get("input_channels", 1),
            name=d.get("name", "custom"),
            layers=tuple(LayerSpec.from_dict(l) for l in d["layers"]),
        )


def _fc_block(fc6: int, fc7: int, classes: int, dropout: float) -> list[LayerSpec]:
    return [
        LayerSpec("fully_connected", "fc6", width=fc6),
        LayerSpec("relu", "relu6"),
        LayerSpec("dropout", "drop6", rate=dropout),
        LayerSpec("fully_connected", "fc7", width=fc7),
        LayerSpec("relu", "relu7"),
        LayerSpec("dropout", "drop7", rate=dropout),
        LayerSpec("fully_connected", "fc8", width=classes),
    ]


def paper200(num_classes: int = 10575, fc6: int = 4096, fc7: int = 4096, dropout: float = 0.5) -> NetworkConfig:
    layers = [
        LayerSpec("conv", "conv1", out_channels=96, kernel=11, stride=4),
        LayerSpec("relu", "relu1"),
        LayerSpec("lrn", "lrn1"),
        LayerSpec("maxpool", "pool1", window=3, stride=2),
        LayerSpec("conv", "conv2", out_channels=256, kernel=5, pad=2),
        LayerSpec("relu", "relu2"),
        LayerSpec("lrn", "lrn2"),
        LayerSpec("maxpool", "pool2", window=3, stride=2),
        LayerSpec("conv", "conv3", out_channels=384, kernel=3, pad=1),
        LayerSpec("relu", "relu3"),
        LayerSpec("conv", "conv4", out_channels=384, kernel=3, pad=1),
        LayerSpec("relu", "relu4"),
        LayerSpec("conv", "conv5", out_channels=256, kernel=3, pad=1),
        LayerSpec("relu", "relu5"),
        LayerSpec("maxpool", "pool5", window=3, stride=2),
    ]
    return NetworkConfig(200, tuple(layers + _fc_block(fc6, fc7, num_classes, dropout)), name="paper200")


def desk32(num_classes: int, fc6: int = 64, fc7: int = 64, dropout: float = 0.1, channels=(8, 16, 16)) -> NetworkConfig:
    c1, c2, c3 = channels
    layers = [
        LayerSpec("conv", "conv1", out_channels=c1, kernel=5, pad=2),
        LayerSpec("relu", "relu1"),
        LayerSpec("lrn", "lrn1"),
        LayerSpec("maxpool", "pool1", window=2, stride=2),
        LayerSpec("conv", "conv2", out_channels=c2, kernel=3, pad=1),
        LayerSpec("relu", "relu2"),
        LayerSpec("lrn", "lrn2"),
        LayerSpec("maxpool", "pool2", window=2, stride=2),
        LayerSpec("conv", "conv3", out_channels=c3, kernel=3, pad=1),
        LayerSpec("relu", "relu3"),
    ]
    return NetworkConfig(32, tuple(layers + _fc_block(fc6, fc7, num_classes, dropout)), name="desk32")


PRESETS = {"paper200": paper200, "desk32": desk32}


def preset(name: str, num_classes: int, **kw) -> NetworkConfig:
    try:
        return PRESETS[name](num_classes=num_classes, **kw)
    except KeyError:
        raise UsageError(f"unknown preset {name!r}; known: {sorted(PRESETS)}") from None


def embedding_config(cfg: NetworkConfig, inject_width: int = 0) -> NetworkConfig:
    """Siamese branch: drop the classifier head, inject after fc6, L2-normalize fc7.

    With ``inject_width == 0`` no injection layer is inserted at all.
    """
    layers = []
    for spec in cfg.layers:
        if spec.name == "fc8":
            break
        layers.append(spec)
        if spec.name == "drop6" and inject_width > 0:
            layers.append(LayerSpec("concat_inject", "inject", width=inject_width))
    layers.append(LayerSpec("l2norm", "embed"))
    return replace(cfg, layers=tuple(layers), name=f"{cfg.name}-siamese")


# -- parameters ------------------------------------------------------------


@dataclass
class ModelParams:
    weights: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    precision: str = "float64"

    def __getitem__(self, key: str) -> np.ndarray:
        return self.weights[key]

    def layer(self, name: str) -> dict[str, np.ndarray]:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.weights.items() if k.startswith(prefix)}

    def copy(self) -> "ModelParams":
        return ModelParams(
            {k: v.copy() for k, v in self.weights.items()},
            {k: v.copy() for k, v in self.velocity.items()},
            self.precision,
        )

    def check(self, cfg: NetworkConfig) -> None:
        expected = cfg.param_shapes()
        for key, shp in expected.items():
            if key not in self.weights:
                raise DimensionError(f"layer {key.split('.')[0]}: missing parameter {key}")
            if self.weights[key].shape != shp:
                raise DimensionError(
                    f"layer {key.split('.')[0]}: parameter {key} has shape "
                    f"{list(self.weights[key].shape)}, expected {list(shp)}"
                )
        extra = set(self.weights) - set(expected)
        if extra:
            raise DimensionError(f"unexpected parameters {sorted(extra)}")


def init_params(cfg: NetworkConfig, rng: np.random.Generator, precision: str = "float64") -> ModelParams:
    """He-scaled uniform weights (std sqrt(2/fan_in)), zero biases."""
    dtype = DTYPES[precision]
    weights = {}
    for spec, (ins, _) in zip(cfg.layers, cfg.shapes()):
        shapes = param_shapes(spec, ins)
        if not shapes:
            continue
        bound = np.sqrt(6.0 / fan_in(spec, ins))
        weights[f"{spec.name}.W"] = rng.uniform(-bound, bound, size=shapes["W"]).astype(dtype)
        weights[f"{spec.name}.b"] = np.zeros(shapes["b"], dtype=dtype)
    return ModelParams(weights, precision=precision)


def transfer_params(src: ModelParams, cfg: NetworkConfig, inject_init: float = 0.0, rng=None) -> ModelParams:
    """Copy pretrained weights into ``cfg``.

    Weight rows for inputs the source lacks (the injected scores feeding fc7)
    start at zero, or uniform in [-inject_init, inject_init] when that is > 0.
    """
    if inject_init > 0 and rng is None:
        raise ValueError("random init of injected rows needs an rng")
    dtype = DTYPES[src.precision]
    weights = {}
    for key, shp in cfg.param_shapes().items():
        if key not in src.weights:
            raise DimensionError(f"layer {key.split('.')[0]}: no pretrained parameter {key}")
        w = src.weights[key]
        if w.shape == shp:
            weights[key] = w.copy()
        elif key.endswith(".W") and w.ndim == 2 and w.shape[1] == shp[1] and w.shape[0] < shp[0]:
            grown = np.zeros(shp, dtype=dtype)
            grown[: w.shape[0]] = w
            if inject_init > 0:
                grown[w.shape[0] :] = rng.uniform(-inject_init, inject_init, (shp[0] - w.shape[0], shp[1]))
            weights[key] = grown
        else:
            raise DimensionError(
                f"layer {key.split('.')[0]}: pretrained shape {list(w.shape)} does not fit {list(shp)}"
            )
    return ModelParams(weights, precision=src.precision)


# -- forward / backward ----------------------------------------------------


def forward(cfg: NetworkConfig, params: ModelParams, x: np.ndarray, train: bool = False, rng=None, inject=None):
    """Run a batch through the network. Returns (per-layer caches, output)."""
    dtype = DTYPES[params.precision]
    x = np.asarray(x, dtype=dtype)
    if x.shape[1:] != cfg.input_shape:
        raise DimensionError(f"layer 0 ({cfg.layers[0].name}): expected input {cfg.input_shape}, got {x.shape[1:]}")
    return run_layers(cfg.layers, params, x, train, rng, inject)


def run_layers(layers, params: ModelParams, x, train=False, rng=None, inject=None, offset: int = 0):
    """Forward through a slice of layers; ``offset`` only affects error messages."""
    if inject is not None:
        inject = np.asarray(inject, dtype=x.dtype)
    caches = []
    for i, spec in enumerate(layers, start=offset):
        try:
            x, cache = layer_forward(spec, params.layer(spec.name), x, train, rng, inject)
        except (ValueError, DimensionError) as exc:
            raise DimensionError(f"layer {i} ({spec.name}): {exc}") from None
        caches.append(cache)
    return caches, x


def backward(cfg: NetworkConfig, params: ModelParams, caches, upstream: np.ndarray):
    """Gradients for every parameter and for the input batch."""
    return back_layers(cfg.layers, params, caches, upstream)


def back_layers(layers, params: ModelParams, caches, upstream: np.ndarray, grads: dict | None = None):
    if caches is None or len(caches) != len(layers):
        raise UsageError("backward needs the activation cache of a matching forward call")
    grads = {} if grads is None else grads
    dy = upstream
    for spec, cache in zip(reversed(layers), reversed(caches)):
        dy, pg = layer_backward(spec, params.layer(spec.name), cache, dy)
        for key, g in pg.items():
            name = f"{spec.name}.{key}"
            grads[name] = grads[name] + g if name in grads else g
    return grads, dy


def sgd_step(params: ModelParams, grads: dict, lr: float, momentum: float = 0.0, weight_decay: float = 0.0) -> ModelParams:
    """In-place momentum SGD: v = m*v + g + wd*w ; w -= lr*v."""
    if lr < 0 or not 0.0 <= momentum < 1.0 or weight_decay < 0:
        raise ValueError("need lr >= 0, momentum in [0, 1), weight_decay >= 0")
    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {key}; training aborted")
    for key, w in params.weights.items():
        g = grads.get(key)
        if g is None:
            continue
        v = params.velocity.get(key)
        step = g + weight_decay * w if weight_decay else g
        v = step if v is None else momentum * v + step
        params.velocity[key] = v.astype(w.dtype, copy=False)
        w -= (lr * v).astype(w.dtype, copy=False)
    return params


def softmax_xent_loss(logits: np.ndarray, label) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over a batch (or a single logit vector)."""
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    z = logits[None] if single else logits
    labels = np.atleast_1d(np.asarray(label))
    if np.any(labels >= z.shape[1]) or np.any(labels < 0):
        raise ValueError(f"label out of range for {z.shape[1]} classes")
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = z.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return float(loss), grad[0] if single else grad
