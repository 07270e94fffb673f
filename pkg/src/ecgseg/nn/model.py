"""The conv -> BiLSTM -> dropout -> time-distributed softmax sequence labeller."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .layers import (
    BiLstmLayer,
    Conv1DLayer,
    LstmCell,
    bilstm_backward,
    bilstm_forward,
    conv1d_backward,
    conv1d_forward,
    dense_backward,
    dense_forward,
    dropout,
    dropout_backward,
    softmax,
)

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class ModelConfig:
    conv_filters: tuple[int, ...] = (32, 64, 128)
    kernel_size: int = 3
    lstm_units: tuple[int, ...] = (250, 125)
    dropout: float = 0.2
    n_classes: int = 4
    in_channels: int = 1
    conv_activation: str = "relu"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["conv_filters"] = tuple(d.get("conv_filters", ()))
        d["lstm_units"] = tuple(d.get("lstm_units", ()))
        return cls(**d)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Parameter names and shapes, in the fixed order used for checkpoints."""
        shapes: dict[str, tuple[int, ...]] = {}
        width = self.in_channels
        for i, filters in enumerate(self.conv_filters):
            shapes[f"conv{i}.w"] = (self.kernel_size, width, filters)
            shapes[f"conv{i}.b"] = (filters,)
            width = filters
        for j, units in enumerate(self.lstm_units):
            for direction in ("fwd", "bwd"):
                shapes[f"bilstm{j}.{direction}.U"] = (width, 4 * units)
                shapes[f"bilstm{j}.{direction}.W"] = (units, 4 * units)
                shapes[f"bilstm{j}.{direction}.b"] = (4 * units,)
            width = 2 * units
        shapes["dense.w"] = (width, self.n_classes)
        shapes["dense.b"] = (self.n_classes,)
        return shapes


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    a = rng.normal(size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q if rows >= cols else q.T


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float64) -> Params:
    """Glorot-uniform feed-forward/input weights, orthogonal recurrent weights,
    forget-gate bias 1, other biases 0."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, shape in config.param_shapes().items():
        kind = name.rsplit(".", 1)[1]
        if name.startswith("conv") and kind == "w":
            m, cin, cout = shape
            value = _glorot(rng, shape, m * cin, m * cout)
        elif kind == "U" or name == "dense.w":
            value = _glorot(rng, shape, shape[0], shape[1])
        elif kind == "W":
            value = _orthogonal(rng, *shape)
        elif kind == "b" and name.startswith("bilstm"):
            value = np.zeros(shape)
            value[: shape[0] // 4] = 1.0
        else:
            value = np.zeros(shape)
        params[name] = np.ascontiguousarray(value, dtype=dtype)
    return params


def param_breakdown(config: ModelConfig) -> dict[str, int]:
    """Trainable scalar count per layer."""
    out: dict[str, int] = {}
    for name, shape in config.param_shapes().items():
        layer = name.split(".")[0]
        out[layer] = out.get(layer, 0) + int(np.prod(shape))
    return out


def param_count(params_or_config: Params | ModelConfig) -> int:
    if isinstance(params_or_config, ModelConfig):
        return sum(param_breakdown(params_or_config).values())
    return int(sum(v.size for v in params_or_config.values()))


def check_params(config: ModelConfig, params: Params) -> None:
    expected = config.param_shapes()
    for name, shape in expected.items():
        if name not in params:
            raise ValueError(f"layer {name.split('.')[0]}: missing parameter tensor {name!r}")
        if tuple(params[name].shape) != shape:
            raise ValueError(
                f"layer {name.split('.')[0]}: parameter {name!r} has shape "
                f"{tuple(params[name].shape)}, architecture expects {shape}"
            )
    extra = set(params) - set(expected)
    if extra:
        raise ValueError(f"unexpected parameter tensors {sorted(extra)}")


def _conv_layer(config: ModelConfig, params: Params, i: int) -> Conv1DLayer:
    return Conv1DLayer(params[f"conv{i}.w"], params[f"conv{i}.b"], config.conv_activation)


def _bilstm_layer(params: Params, j: int) -> BiLstmLayer:
    def cell(direction: str) -> LstmCell:
        p = f"bilstm{j}.{direction}."
        return LstmCell(params[p + "U"], params[p + "W"], params[p + "b"])

    return BiLstmLayer(cell("fwd"), cell("bwd"))


@dataclass
class ForwardCache:
    config: ModelConfig
    conv: list = field(default_factory=list)
    lstm: list = field(default_factory=list)
    dropout_mask: np.ndarray | None = None
    dense: tuple | None = None
    logits: np.ndarray | None = None
    squeeze: bool = False


def _prepare_input(x: np.ndarray, config: ModelConfig, dtype) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=dtype)
    if x.ndim == 1:
        return x[None, :, None], True
    if x.ndim == 2:
        if config.in_channels == 1 and x.shape[1] != 1:
            return x[:, :, None], False  # [B, T]
        return x[None], True  # [T, C]
    return x, False


def model_forward(
    params: Params,
    x: np.ndarray,
    config: ModelConfig = ModelConfig(),
    training: bool = False,
    rng: np.random.Generator | None = None,
):
    """Class posteriors per timestep.

    ``x`` may be ``[T]``, ``[T, 1]``, ``[B, T]`` or ``[B, T, C]``; output is
    ``[..., T, n_classes]`` matching the leading dims. Returns ``(probs, cache)``.
    """
    dtype = params["dense.w"].dtype
    h, squeeze = _prepare_input(x, config, dtype)
    cache = ForwardCache(config=config, squeeze=squeeze)
    for i in range(len(config.conv_filters)):
        h, c = conv1d_forward(_conv_layer(config, params, i), h)
        cache.conv.append(c)
    for j in range(len(config.lstm_units)):
        h, c = bilstm_forward(_bilstm_layer(params, j), h)
        cache.lstm.append(c)
    if config.lstm_units:
        h, cache.dropout_mask = dropout(h, config.dropout, training, rng)
    logits, cache.dense = dense_forward(params["dense.w"], params["dense.b"], h)
    cache.logits = logits
    probs = softmax(logits)
    return (probs[0] if squeeze else probs), cache


def model_backward(cache: ForwardCache, dlogits: np.ndarray) -> Params:
    """Gradients of the loss for every parameter, given dloss/dlogits."""
    config = cache.config
    dlogits = np.asarray(dlogits)
    if cache.squeeze:
        dlogits = dlogits[None]
    if cache.logits is None or dlogits.shape != cache.logits.shape:
        raise ValueError(
            f"gradient shape {dlogits.shape} does not match cached logits "
            f"{None if cache.logits is None else cache.logits.shape}"
        )
    grads: Params = {}
    dh, g = dense_backward(cache.dense, dlogits)
    grads["dense.w"], grads["dense.b"] = g["w"], g["b"]
    if config.lstm_units:
        dh = dropout_backward(cache.dropout_mask, dh)
    for j in reversed(range(len(config.lstm_units))):
        dh, g = bilstm_backward(cache.lstm[j], dh)
        for direction in ("fwd", "bwd"):
            for k, v in g[direction].items():
                grads[f"bilstm{j}.{direction}.{k}"] = v
    for i in reversed(range(len(config.conv_filters))):
        dh, g = conv1d_backward(cache.conv[i], dh)
        grads[f"conv{i}.w"], grads[f"conv{i}.b"] = g["w"], g["b"]
    return {name: grads[name] for name in config.param_shapes()}


@dataclass
class Model:
    config: ModelConfig
    params: Params

    @classmethod
    def create(cls, config: ModelConfig = ModelConfig(), seed: int = 0, dtype=np.float64) -> "Model":
        return cls(config, init_params(config, seed, dtype))

    def forward(self, x, training=False, rng=None):
        return model_forward(self.params, x, self.config, training, rng)

    def predict_proba(self, x: np.ndarray, batch_size: int = 32) -> np.ndarray:
        """Inference on ``[B, T]`` (or a single ``[T]``) in chunks of ``batch_size``."""
        x = np.asarray(x)
        if x.ndim == 1:
            return self.forward(x)[0]
        out = [self.forward(x[i : i + batch_size])[0] for i in range(0, len(x), batch_size)]
        return np.concatenate(out, axis=0)

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()})
