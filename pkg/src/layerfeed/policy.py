"""End-to-end closed-loop policy: image + joint state in, next-step command out.

The policy normalizes the follower's response with stored training
statistics, encodes the frame to a 32-dim feature vector, advances the
recurrent stack one step, and denormalizes the head output into the
predicted next-step leader response. Fixed joints are overridden with their
configured constants on the way out.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers
from .data import JointRecord, Trajectory
from .layers import (
    CnnMlpParams,
    CnnSsParams,
    DenseParams,
    LstmCellParams,
    LstmState,
    StackConfig,
    cnn_mlp_encode,
    cnn_ss_encode,
    dense,
    lstm_stack_step,
)
from .tensor import Tensor

ENCODERS = ("cnn_mlp", "cnn_spatial_softmax")

CNN_MLP_CHANNELS = (16, 32, 64)
CNN_SS_CHANNELS = (16, 16, 16, 16)
DEFAULT_EVAL_STEPS = 240


@dataclass
class PolicyConfig:
    encoder: str = "cnn_mlp"
    each_layer_input: bool = True
    lstm_layers: int = 6
    lstm_units: int = 400
    joint_count: int = 8
    feature_dim: int = 32
    control_rate_hz: int = 50
    conv_channels: tuple[int, ...] = ()
    fc_hidden: int = 1024
    fixed_joints: dict[int, float] = field(default_factory=lambda: {1: 0.0})

    def __post_init__(self):
        if self.encoder not in ENCODERS:
            raise ValueError(f"unknown encoder {self.encoder!r}, expected one of {ENCODERS}")
        if not self.conv_channels:
            self.conv_channels = (
                CNN_MLP_CHANNELS if self.encoder == "cnn_mlp" else CNN_SS_CHANNELS
            )
        self.conv_channels = tuple(self.conv_channels)
        if self.encoder == "cnn_spatial_softmax" and 2 * self.conv_channels[-1] != self.feature_dim:
            raise ValueError(
                f"spatial softmax yields 2 features per channel; final conv must have "
                f"{self.feature_dim // 2} channels, got {self.conv_channels[-1]}"
            )
        self.fixed_joints = {int(k): float(v) for k, v in self.fixed_joints.items()}

    @property
    def input_dim(self) -> int:
        return 3 * self.joint_count + self.feature_dim

    @property
    def output_dim(self) -> int:
        return 3 * self.joint_count

    def stack_config(self) -> StackConfig:
        return StackConfig(
            layers=self.lstm_layers,
            units=self.lstm_units,
            each_layer_input=self.each_layer_input,
            joint_dim=3 * self.joint_count,
            feature_dim=self.feature_dim,
        )

    def output_mask(self) -> np.ndarray:
        """1 for dims that carry signal, 0 for all channels of fixed joints."""
        mask = np.ones(self.output_dim)
        for idx in self.fixed_joints:
            for channel in range(3):
                mask[channel * self.joint_count + idx] = 0.0
        return mask


def desk_config(encoder: str = "cnn_mlp", each_layer_input: bool = True) -> PolicyConfig:
    """Small preset that trains in minutes on a CPU: 2x64 LSTM, slim encoder."""
    channels = (8, 8, 8) if encoder == "cnn_mlp" else (8, 8, 8, 16)
    return PolicyConfig(
        encoder=encoder,
        each_layer_input=each_layer_input,
        lstm_layers=2,
        lstm_units=64,
        conv_channels=channels,
        fc_hidden=128,
    )


@dataclass
class PolicyParams:
    encoder: CnnMlpParams | CnnSsParams
    cells: list[LstmCellParams]
    head: DenseParams

    def named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, conv in enumerate(self.encoder.convs):
            out[f"enc.conv{i}.w"] = conv.weight
            out[f"enc.conv{i}.b"] = conv.bias
        if isinstance(self.encoder, CnnMlpParams):
            out["enc.fc_hidden.w"] = self.encoder.fc_hidden.weight
            out["enc.fc_hidden.b"] = self.encoder.fc_hidden.bias
            out["enc.fc_out.w"] = self.encoder.fc_out.weight
            out["enc.fc_out.b"] = self.encoder.fc_out.bias
        for i, cell in enumerate(self.cells):
            out[f"lstm{i}.wx"] = cell.input_weights
            out[f"lstm{i}.wh"] = cell.recurrent_weights
            out[f"lstm{i}.b"] = cell.biases
        out["head.w"] = self.head.weight
        out["head.b"] = self.head.bias
        return out


def init_params(cfg: PolicyConfig, rng: np.random.Generator, dtype=np.float64) -> PolicyParams:
    if cfg.encoder == "cnn_mlp":
        convs, channels = [], 3
        for filters in cfg.conv_channels:
            convs.append(layers.init_conv(rng, filters, channels, 4, dtype))
            channels = filters
        downs = len(cfg.conv_channels)
        spatial = (64 >> downs) ** 2 * channels
        encoder = CnnMlpParams(
            convs=convs,
            fc_hidden=layers.init_dense(rng, cfg.fc_hidden, spatial, dtype),
            fc_out=layers.init_dense(rng, cfg.feature_dim, cfg.fc_hidden, dtype),
        )
    else:
        convs, channels = [], 3
        for filters in cfg.conv_channels:
            convs.append(layers.init_conv(rng, filters, channels, 3, dtype))
            channels = filters
        encoder = CnnSsParams(convs=convs)
    cells = layers.init_stack(rng, cfg.stack_config(), dtype)
    head = layers.init_dense(rng, cfg.output_dim, cfg.stack_config().head_input_dim(), dtype)
    return PolicyParams(encoder=encoder, cells=cells, head=head)


def params_from_arrays(
    cfg: PolicyConfig, arrays: dict[str, np.ndarray], dtype=np.float64
) -> PolicyParams:
    """Rebuild the parameter tree from named checkpoint blocks."""
    params = init_params(cfg, np.random.default_rng(0), dtype)
    named = params.named()
    missing = set(named) - set(arrays)
    extra = set(arrays) - set(named)
    if missing or extra:
        raise ValueError(f"checkpoint blocks mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
    for name, tensor in named.items():
        arr = arrays[name]
        if arr.shape != tensor.data.shape:
            raise ValueError(f"block {name}: shape {arr.shape} != expected {tensor.data.shape}")
        tensor.data = arr.astype(tensor.data.dtype)
    return params


def encode(cfg: PolicyConfig, params: PolicyParams, image: Tensor) -> Tensor:
    if cfg.encoder == "cnn_mlp":
        return cnn_mlp_encode(params.encoder, image)
    return cnn_ss_encode(params.encoder, image)


def init_state(cfg: PolicyConfig, batch: int | None = None, dtype=np.float64) -> LstmState:
    """All-zero hidden and cell state; re-initialization is idempotent."""
    return layers.zero_state(cfg.stack_config(), batch, dtype)


def policy_step(
    cfg: PolicyConfig,
    params: PolicyParams,
    stats,
    image: np.ndarray,
    follower: JointRecord,
    state: LstmState,
) -> tuple[JointRecord, LstmState]:
    """One control step: [3,64,64] image in [0,1] plus follower response in,
    predicted next-step leader response out. Pure in (inputs, params, state).
    """
    if stats is None:
        raise ValueError("policy_step needs normalization statistics (train first)")
    dtype = params.head.weight.dtype
    xn = stats.normalize_inputs(follower.to_vector()).astype(dtype)
    z = encode(cfg, params, Tensor(np.asarray(image, dtype=dtype)))
    context, next_state = lstm_stack_step(
        cfg.stack_config(), params.cells, Tensor(xn), z, state
    )
    yn = dense(params.head, context)
    y = stats.denormalize_outputs(yn.data.astype(np.float64))
    command = JointRecord.from_vector(y, role="leader")
    for idx, value in cfg.fixed_joints.items():
        command.angle[idx] = value
        command.velocity[idx] = 0.0
        command.torque[idx] = 0.0
    return command, next_state


@dataclass
class Policy:
    """Config + parameters + normalization stats, ready to run closed-loop."""

    cfg: PolicyConfig
    params: PolicyParams
    stats: object

    def init_state(self, batch: int | None = None) -> LstmState:
        return init_state(self.cfg, batch, self.params.head.weight.dtype)

    def step(self, image, follower: JointRecord, state: LstmState):
        return policy_step(self.cfg, self.params, self.stats, image, follower, state)


def rollout(policy, env, max_steps: int | None = None) -> Trajectory:
    """Drive the environment with the policy at the control rate.

    Records the realized follower stream, the commands as the leader stream,
    and one frame per control step; stops at max_steps or the env's terminal
    flag. Environment faults are re-raised with the failing step index.
    """
    max_steps = DEFAULT_EVAL_STEPS if max_steps is None else max_steps
    state = policy.init_state()
    followers, commands, frames = [], [], []
    for step in range(max_steps):
        frame_u8, follower = env.observe()
        image = frame_u8.astype(np.float64).transpose(2, 0, 1) / 255.0
        command, state = policy.step(image, follower, state)
        followers.append(follower.to_vector().reshape(3, -1))
        commands.append(command.to_vector().reshape(3, -1))
        frames.append(frame_u8)
        try:
            env.control_step(command)
        except Exception as err:
            raise RuntimeError(f"environment fault at step {step}: {err}") from err
        if env.terminal:
            break
    rate = env.control_rate_hz
    return Trajectory(
        joint_rate_hz=rate,
        frame_rate_hz=rate,
        slot=getattr(env, "slot", 0.0),
        seed=getattr(env, "seed", 0),
        leader=np.stack(commands).astype(np.float32),
        follower=np.stack(followers).astype(np.float32),
        frames=np.stack(frames),
    )
