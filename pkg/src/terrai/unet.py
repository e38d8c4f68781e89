"""Two-level U-Net regressor and the masked RMSE objective.

Topology for widths (c1, c2, c3) on an 8x8 input:

    enc1  double-conv -> c1   (8x8)   -> maxpool
    enc2  double-conv -> c2   (4x4)   -> maxpool
    bott  double-conv -> c3   (2x2)
    up2   2x2 transposed conv c3 -> c2, concat enc2, double-conv -> c2 (4x4)
    up1   2x2 transposed conv c2 -> c1, concat enc1, double-conv -> c1 (8x8)
    head  1x1 conv c1 -> 1
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff
from .autodiff import Graph, Parameter, Tensor

PATCH = 8
INPUT_CHANNELS = 18
LOSS_EPS = 1e-12


@dataclass(frozen=True)
class WidthConfig:
    name: str
    channels: tuple[int, int, int]

    def __post_init__(self):
        if len(self.channels) != 3 or any(c <= 0 for c in self.channels):
            raise ValueError(f"need three positive widths, got {self.channels}")
        c1, c2, c3 = self.channels
        if not c1 < c2 < c3:
            raise ValueError(f"widths must strictly increase, got {self.channels}")


VARIANTS = {
    "small": WidthConfig("small", (4, 8, 16)),
    "baseline": WidthConfig("baseline", (24, 36, 48)),
    "large": WidthConfig("large", (72, 84, 96)),
}


def width_config(name: str) -> WidthConfig:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ValueError(f"unknown variant {name!r}; expected one of {sorted(VARIANTS)}") from None


def layer_shapes(config: WidthConfig, input_channels: int = INPUT_CHANNELS) -> dict[str, tuple]:
    """Ordered mapping of parameter identifier -> shape for the documented topology."""
    c1, c2, c3 = config.channels
    shapes: dict[str, tuple] = {}

    def double(prefix, c_in, c_out):
        shapes[f"{prefix}.conv1.weight"] = (c_out, c_in, 3, 3)
        shapes[f"{prefix}.conv1.bias"] = (c_out,)
        shapes[f"{prefix}.conv2.weight"] = (c_out, c_out, 3, 3)
        shapes[f"{prefix}.conv2.bias"] = (c_out,)

    double("enc1", input_channels, c1)
    double("enc2", c1, c2)
    double("bottleneck", c2, c3)
    shapes["up2.weight"] = (c3, c2, 2, 2)
    shapes["up2.bias"] = (c2,)
    double("dec2", 2 * c2, c2)
    shapes["up1.weight"] = (c2, c1, 2, 2)
    shapes["up1.bias"] = (c1,)
    double("dec1", 2 * c1, c1)
    shapes["head.weight"] = (1, c1, 1, 1)
    shapes["head.bias"] = (1,)
    return shapes


class UNetModel:
    def __init__(self, config: WidthConfig, params: dict[str, Parameter], seed: int = 0,
                 input_channels: int = INPUT_CHANNELS, activation: str = "relu"):
        expected = layer_shapes(config, input_channels)
        if list(params) != list(expected):
            raise ValueError("parameter set does not match the topology")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ValueError(f"{name}: shape {params[name].shape} != {shape}")
        self.config = config
        self.params = params
        self.seed = seed
        self.input_channels = input_channels
        self.activation = activation

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def astype(self, dtype) -> "UNetModel":
        params = {k: p.astype(dtype) for k, p in self.params.items()}
        return UNetModel(self.config, params, self.seed, self.input_channels, self.activation)

    def state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.params.values()]

    def load_state(self, state: list[np.ndarray]):
        for p, v in zip(self.params.values(), state):
            p.data = v.copy()

    def _block(self, g: Graph, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        x = g.activation(g.conv2d(x, p[f"{prefix}.conv1.weight"], p[f"{prefix}.conv1.bias"]), self.activation)
        return g.activation(g.conv2d(x, p[f"{prefix}.conv2.weight"], p[f"{prefix}.conv2.bias"]), self.activation)

    def forward(self, x, graph: Graph | None = None) -> Tensor:
        g = graph if graph is not None else Graph(enabled=False)
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.shape[1] != self.input_channels:
            raise ValueError(f"model expects {self.input_channels} channels, got {x.shape[1]}")
        p = self.params
        e1 = self._block(g, x, "enc1")
        e2 = self._block(g, g.maxpool2(e1), "enc2")
        b = self._block(g, g.maxpool2(e2), "bottleneck")
        d2 = self._block(g, g.concat_channels(e2, g.upsample2(b, p["up2.weight"], p["up2.bias"])), "dec2")
        d1 = self._block(g, g.concat_channels(e1, g.upsample2(d2, p["up1.weight"], p["up1.bias"])), "dec1")
        return g.conv2d(d1, p["head.weight"], p["head.bias"])

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Inference without recording; returns (N, H, W)."""
        outs = [
            self.forward(x[i:i + batch_size]).data[:, 0]
            for i in range(0, len(x), batch_size)
        ]
        return np.concatenate(outs) if outs else np.zeros((0,) + x.shape[2:], np.float32)


def _fan_in(name: str, shape: tuple) -> int:
    if name.startswith("up"):
        # each transposed-conv output pixel sees one kernel tap per input channel
        return shape[0]
    return int(np.prod(shape[1:]))


def build_model(config: WidthConfig, seed: int = 0, input_channels: int = INPUT_CHANNELS,
                activation: str = "relu") -> UNetModel:
    """He-uniform weights (bound sqrt(6 / fan_in)) and zero biases, drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in layer_shapes(config, input_channels).items():
        if name.endswith(".bias"):
            data = np.zeros(shape, dtype=np.float32)
        else:
            bound = np.sqrt(6.0 / _fan_in(name, shape))
            data = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        params[name] = Parameter(data, name)
    return UNetModel(config, params, seed, input_channels, activation)


def parameter_count(model) -> int:
    if isinstance(model, UNetModel):
        return int(sum(p.data.size for p in model.parameters()))
    return int(sum(np.asarray(p.data).size for p in model))


def masked_rmse_loss(graph: Graph, prediction: Tensor, label: np.ndarray, mask: np.ndarray) -> Tensor:
    """sqrt(sum_valid (pred - label)^2 / n_valid + eps), reduced in float64.

    Invalid pixels are selected away with ``np.where`` so any finite value
    there leaves the loss and its gradient bit-identical.
    """
    pred = prediction.data.reshape(prediction.shape[0], *prediction.shape[2:])
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != mask.shape or np.shape(label) != mask.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, label {np.shape(label)}, mask {mask.shape}")
    n_valid = int(mask.sum())
    if n_valid == 0:
        raise ValueError("masked RMSE needs at least one valid pixel")
    diff = np.where(mask, pred.astype(np.float64) - np.asarray(label, dtype=np.float64), 0.0)
    loss = np.sqrt(np.sum(diff * diff) / n_valid + LOSS_EPS)
    out = Tensor(np.asarray(loss, dtype=np.float64), requires_grad=True)

    def backward():
        if out.grad is None:
            return
        g = float(out.grad) * diff / (n_valid * loss)
        prediction._accumulate(g.reshape(prediction.shape).astype(prediction.dtype))

    graph.record(backward)
    return out


def masked_sse(prediction: np.ndarray, label: np.ndarray, mask: np.ndarray) -> tuple[float, int]:
    """Sum of squared valid errors and valid count, for pooling across batches."""
    diff = np.where(mask, prediction.astype(np.float64) - label.astype(np.float64), 0.0)
    return float(np.sum(diff * diff)), int(np.sum(mask))


def save_checkpoint(model: UNetModel, path, schema_checksum: str = "", extra: dict | None = None) -> dict:
    header = {
        "config_name": model.config.name,
        "channels": list(model.config.channels),
        "input_channels": model.input_channels,
        "input_schema_checksum": schema_checksum,
        "seed": model.seed,
        "activation": model.activation,
        "parameter_count": parameter_count(model),
    }
    header.update(extra or {})
    return autodiff.save_parameters(model.parameters(), path, header)


def load_checkpoint(path) -> tuple[UNetModel, dict]:
    params, header = autodiff.load_parameters(path)
    config = WidthConfig(header["config_name"], tuple(header["channels"]))
    model = UNetModel(config, {p.identifier: p for p in params}, header["seed"],
                      header["input_channels"], header.get("activation", "relu"))
    return model, header
