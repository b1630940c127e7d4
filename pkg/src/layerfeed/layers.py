"""Network building blocks: dense and conv layers, spatial softmax, and the
LSTM stack with optional per-layer feature injection.

Every forward function accepts either a single sample (vector / [C,H,W]
image) or a leading batch axis; the single-sample form is the contract the
tests pin down, the batched form is what training uses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor,
    add,
    add_bias,
    concat,
    conv2d,
    div,
    exp,
    expand,
    linear,
    lstm_gates,
    mul,
    reduce_sum,
    relu,
    reshape,
    sub,
)

IMAGE_SHAPE = (3, 64, 64)
FEATURE_DIM = 32
GATE_ORDER = ("input", "forget", "cell", "output")


@dataclass
class DenseParams:
    weight: Tensor  # [out, in]
    bias: Tensor  # [out]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class ConvParams:
    weight: Tensor  # [filters, in_channels, k, k]
    bias: Tensor  # [filters]


@dataclass
class LstmCellParams:
    """Gate order along the stacked 4*units axis: input, forget, cell, output."""

    input_weights: Tensor  # [4*units, input_dim]
    recurrent_weights: Tensor  # [4*units, units]
    biases: Tensor  # [4*units]

    @property
    def units(self) -> int:
        return self.recurrent_weights.shape[1]

    @property
    def input_dim(self) -> int:
        return self.input_weights.shape[1]


@dataclass
class LstmState:
    """Per-layer hidden and cell tensors; shapes [units] or [batch, units]."""

    h: list[Tensor]
    c: list[Tensor]

    def __len__(self) -> int:
        return len(self.h)


@dataclass
class StackConfig:
    layers: int = 6
    units: int = 400
    each_layer_input: bool = True
    joint_dim: int = 24
    feature_dim: int = FEATURE_DIM

    def layer_input_dims(self) -> list[int]:
        first = self.joint_dim + self.feature_dim
        if self.each_layer_input:
            rest = self.units + self.feature_dim
        else:
            rest = self.units
        return [first] + [rest] * (self.layers - 1)

    def head_input_dim(self) -> int:
        if self.each_layer_input:
            return self.units + self.feature_dim
        return self.units


def _promote(x: Tensor) -> tuple[Tensor, bool]:
    if x.data.ndim == 1:
        return reshape(x, (1, x.data.shape[0])), True
    return x, False


def dense(params: DenseParams, x: Tensor) -> Tensor:
    """weight @ x + bias, batched over any leading axis of x."""
    if x.data.shape[-1] != params.in_dim:
        raise ValueError(
            f"dense expects inputs of length {params.in_dim}, got shape {x.data.shape}"
        )
    x2, squeeze = _promote(x)
    y = add_bias(linear(x2, params.weight), params.bias)
    return reshape(y, (params.out_dim,)) if squeeze else y


def lstm_cell_step(
    params: LstmCellParams, x: Tensor, h: Tensor, c: Tensor
) -> tuple[Tensor, Tensor]:
    """One step of the standard forget-gate cell (no peepholes)."""
    units = params.units
    if x.data.shape[-1] != params.input_dim:
        raise ValueError(
            f"lstm cell expects input length {params.input_dim}, got {x.data.shape}"
        )
    if h.data.shape[-1] != units or c.data.shape[-1] != units:
        raise ValueError(
            f"lstm state length must be {units}, got h {h.data.shape} c {c.data.shape}"
        )
    x2, squeeze = _promote(x)
    h2, _ = _promote(h)
    c2, _ = _promote(c)
    pre = add_bias(
        add(linear(x2, params.input_weights), linear(h2, params.recurrent_weights)),
        params.biases,
    )
    h_next, c_next = lstm_gates(pre, c2)
    if squeeze:
        return reshape(h_next, (units,)), reshape(c_next, (units,))
    return h_next, c_next


def lstm_stack_step(
    cfg: StackConfig,
    cells: list[LstmCellParams],
    joint_in: Tensor,
    z: Tensor,
    state: LstmState,
) -> tuple[Tensor, LstmState]:
    """Advance the whole stack one step and return the head's input context.

    With per-layer injection the feature vector z is concatenated onto the
    input of every layer and onto the returned context; otherwise it enters
    only through layer 1 and the context is the top hidden state alone.
    """
    if joint_in.data.shape[-1] != cfg.joint_dim:
        raise ValueError(
            f"joint input length {joint_in.data.shape[-1]} != {cfg.joint_dim}"
        )
    if z.data.shape[-1] != cfg.feature_dim:
        raise ValueError(f"feature length {z.data.shape[-1]} != {cfg.feature_dim}")
    if len(state) != cfg.layers or len(cells) != cfg.layers:
        raise ValueError(
            f"stack expects {cfg.layers} layers, got {len(cells)} cells and "
            f"{len(state)} state entries"
        )
    x = concat([joint_in, z], axis=-1)
    new_h: list[Tensor] = []
    new_c: list[Tensor] = []
    for n in range(cfg.layers):
        h_next, c_next = lstm_cell_step(cells[n], x, state.h[n], state.c[n])
        new_h.append(h_next)
        new_c.append(c_next)
        if n + 1 < cfg.layers:
            x = concat([h_next, z], axis=-1) if cfg.each_layer_input else h_next
    top = new_h[-1]
    context = concat([top, z], axis=-1) if cfg.each_layer_input else top
    return context, LstmState(new_h, new_c)


def _coord_grid(extent: int, dtype) -> np.ndarray:
    if extent == 1:
        return np.zeros(1, dtype=dtype)
    return np.linspace(-1.0, 1.0, extent, dtype=dtype)


def spatial_softmax(features: Tensor) -> Tensor:
    """Per-channel softmax-weighted pixel coordinates, packed [x..., y...].

    Coordinate grids span [-1, 1] along each axis, so shifting the map
    content by d pixels moves the output by 2*d/(extent-1).
    """
    if features.data.ndim not in (3, 4):
        raise ValueError(
            f"spatial_softmax expects [C,H,W] or [N,C,H,W], got {features.data.shape}"
        )
    h, w = features.data.shape[-2:]
    shift = features.data.max(axis=(-2, -1), keepdims=True)  # constant; exact softmax grad
    e = exp(sub(features, shift))
    total = reduce_sum(e, axes=(-2, -1), keepdims=True)
    p = div(e, expand(total, e.data.shape))
    gx = _coord_grid(w, features.dtype).reshape(1, 1, w)
    gy = _coord_grid(h, features.dtype).reshape(1, h, 1)
    xs = reduce_sum(mul(p, gx), axes=(-2, -1))
    ys = reduce_sum(mul(p, gy), axes=(-2, -1))
    return concat([xs, ys], axis=-1)


@dataclass
class CnnMlpParams:
    convs: list[ConvParams]
    fc_hidden: DenseParams
    fc_out: DenseParams


@dataclass
class CnnSsParams:
    convs: list[ConvParams]


def _check_image(image: Tensor) -> None:
    if image.data.shape[-3:] != IMAGE_SHAPE:
        raise ValueError(
            f"encoder expects {IMAGE_SHAPE} images (optionally batched), "
            f"got {image.data.shape}"
        )


def cnn_mlp_encode(params: CnnMlpParams, image: Tensor) -> Tensor:
    """Strided conv stack that halves the image each layer, then a 2-layer MLP."""
    _check_image(image)
    x = image
    for conv in params.convs:
        x = relu(conv2d(x, conv.weight, conv.bias, stride=2, padding=1))
    spatial = x.data.shape[-3] * x.data.shape[-2] * x.data.shape[-1]
    if x.data.ndim == 4:
        x = reshape(x, (x.data.shape[0], spatial))
    else:
        x = reshape(x, (spatial,))
    x = relu(dense(params.fc_hidden, x))
    return dense(params.fc_out, x)


def cnn_ss_encode(params: CnnSsParams, image: Tensor) -> Tensor:
    """Stride-1 conv stack (no compression) into spatial-softmax coordinates.

    No activation after the final conv; its channel count fixes the feature
    width at 2 features per channel.
    """
    _check_image(image)
    x = image
    for conv in params.convs[:-1]:
        x = relu(conv2d(x, conv.weight, conv.bias, stride=1, padding=1))
    last = params.convs[-1]
    x = conv2d(x, last.weight, last.bias, stride=1, padding=1)
    return spatial_softmax(x)


def init_dense(rng: np.random.Generator, out_dim: int, in_dim: int, dtype=np.float64) -> DenseParams:
    bound = 1.0 / np.sqrt(in_dim)
    return DenseParams(
        weight=Tensor(rng.uniform(-bound, bound, (out_dim, in_dim)).astype(dtype), requires_grad=True),
        bias=Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True),
    )


def init_conv(rng: np.random.Generator, filters: int, channels: int, kernel: int, dtype=np.float64) -> ConvParams:
    bound = 1.0 / np.sqrt(channels * kernel * kernel)
    return ConvParams(
        weight=Tensor(
            rng.uniform(-bound, bound, (filters, channels, kernel, kernel)).astype(dtype),
            requires_grad=True,
        ),
        bias=Tensor(np.zeros(filters, dtype=dtype), requires_grad=True),
    )


def init_lstm_cell(
    rng: np.random.Generator, units: int, input_dim: int, dtype=np.float64
) -> LstmCellParams:
    bx = 1.0 / np.sqrt(input_dim)
    bh = 1.0 / np.sqrt(units)
    biases = np.zeros(4 * units, dtype=dtype)
    biases[units : 2 * units] = 1.0  # forget gate starts open
    return LstmCellParams(
        input_weights=Tensor(
            rng.uniform(-bx, bx, (4 * units, input_dim)).astype(dtype), requires_grad=True
        ),
        recurrent_weights=Tensor(
            rng.uniform(-bh, bh, (4 * units, units)).astype(dtype), requires_grad=True
        ),
        biases=Tensor(biases, requires_grad=True),
    )


def init_stack(
    rng: np.random.Generator, cfg: StackConfig, dtype=np.float64
) -> list[LstmCellParams]:
    return [
        init_lstm_cell(rng, cfg.units, in_dim, dtype)
        for in_dim in cfg.layer_input_dims()
    ]


def zero_state(cfg: StackConfig, batch: int | None = None, dtype=np.float64) -> LstmState:
    shape = (cfg.units,) if batch is None else (batch, cfg.units)
    return LstmState(
        h=[Tensor(np.zeros(shape, dtype=dtype)) for _ in range(cfg.layers)],
        c=[Tensor(np.zeros(shape, dtype=dtype)) for _ in range(cfg.layers)],
    )
