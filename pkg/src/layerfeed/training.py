"""Dataset pipeline and the optimization loop.

500 Hz joint streams are downsampled to the 50 Hz control rate (all ten
phase offsets become separate sequences, sharing the episode's frames),
padded to mean + 2 std of the training lengths by repeating the final
record, and regressed with MSE on denormalized next-step leader targets.
Full-sequence backpropagation through time, Adam, best-validation
checkpointing.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import DatasetManifest, Trajectory, read_trajectory
from .policy import Policy, PolicyConfig, PolicyParams, encode, init_params, params_from_arrays
from .tensor import (
    Graph,
    Tensor,
    add,
    add_bias,
    backward,
    concat,
    gather_rows,
    linear,
    lstm_gates,
    mul,
    narrow,
    reduce_sum,
    reshape,
    split_steps,
)

CHECKPOINT_MAGIC = b"ILCKPT1\x00"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch


@dataclass
class NormStats:
    """Per-dimension mean/std over the training split; zero-variance dims
    (fixed joints) are flagged inactive and pass through normalization as 0.
    """

    input_mean: np.ndarray
    input_std: np.ndarray
    input_active: np.ndarray  # bool, std > 0
    target_mean: np.ndarray
    target_std: np.ndarray
    target_active: np.ndarray

    def normalize_inputs(self, v: np.ndarray) -> np.ndarray:
        return np.where(self.input_active, (v - self.input_mean) / self.input_std, 0.0)

    def denormalize_inputs(self, v: np.ndarray) -> np.ndarray:
        return np.where(self.input_active, v * self.input_std + self.input_mean, self.input_mean)

    def denormalize_outputs(self, v: np.ndarray) -> np.ndarray:
        return np.where(self.target_active, v * self.target_std + self.target_mean, self.target_mean)

    def to_dict(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, payload: dict) -> "NormStats":
        return cls(
            input_mean=np.array(payload["input_mean"]),
            input_std=np.array(payload["input_std"]),
            input_active=np.array(payload["input_active"], dtype=bool),
            target_mean=np.array(payload["target_mean"]),
            target_std=np.array(payload["target_std"]),
            target_active=np.array(payload["target_active"], dtype=bool),
        )


def _stats_for(block: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mean = block.mean(axis=0)
    std = block.std(axis=0)
    active = std > 1e-12
    return mean, np.where(active, std, 1.0), active


def compute_norm_stats(inputs: np.ndarray, targets: np.ndarray) -> NormStats:
    """inputs/targets: [samples, 3*J] raw training records."""
    imean, istd, iact = _stats_for(inputs)
    tmean, tstd, tact = _stats_for(targets)
    return NormStats(imean, istd, iact, tmean, tstd, tact)


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 16
    epochs: int = 300
    noise_variance: float = 0.01
    augment_images: bool = True
    seed: int = 0
    dtype: str = "float32"  # training precision; checkpoints always store float64

    def __post_init__(self):
        if min(self.lr, self.batch_size, self.epochs) <= 0 or self.noise_variance < 0:
            raise ValueError("hyperparameters must be positive (noise variance >= 0)")


@dataclass
class SampledSequence:
    """One 50 Hz training sequence: follower inputs, leader targets, and the
    indices of the episode frames each step observes."""

    follower: np.ndarray  # [T, 3*J] float32
    leader: np.ndarray  # [T, 3*J]
    frame_indices: np.ndarray  # [T] into the owning episode's frame store
    episode: int
    slot: float

    def __len__(self) -> int:
        return self.follower.shape[0]


def downsample(traj: Trajectory, phase: int = 0) -> Trajectory:
    """Keep every (joint_rate/frame_rate)-th joint record starting at `phase`."""
    if traj.joint_rate_hz % traj.frame_rate_hz:
        raise ValueError(
            f"joint rate {traj.joint_rate_hz} not divisible by frame rate {traj.frame_rate_hz}"
        )
    ratio = traj.joint_rate_hz // traj.frame_rate_hz
    if not 0 <= phase < ratio:
        raise ValueError(f"phase {phase} outside [0, {ratio})")
    return Trajectory(
        joint_rate_hz=traj.frame_rate_hz,
        frame_rate_hz=traj.frame_rate_hz,
        slot=traj.slot,
        seed=traj.seed,
        leader=traj.leader[phase::ratio].copy(),
        follower=traj.follower[phase::ratio].copy(),
        frames=traj.frames.copy(),
    )


def expand_phases(traj: Trajectory, episode: int) -> list[SampledSequence]:
    """All phase offsets of one episode; every phase reuses the same frames."""
    ratio = traj.joint_rate_hz // traj.frame_rate_hz
    out = []
    joints = traj.joint_count
    for phase in range(ratio):
        steps = np.arange(phase, traj.joint_steps, ratio)
        out.append(
            SampledSequence(
                follower=traj.follower[steps].reshape(len(steps), 3 * joints),
                leader=traj.leader[steps].reshape(len(steps), 3 * joints),
                frame_indices=steps // ratio,
                episode=episode,
                slot=traj.slot,
            )
        )
    return out


def pad_length(lengths: list[int]) -> int:
    """ceil(mean + 2 * population std) of the training sequence lengths."""
    if not lengths:
        raise ValueError("no sequences to pad")
    arr = np.asarray(lengths, dtype=np.float64)
    return int(np.ceil(arr.mean() + 2.0 * arr.std()))

def pad_sequences(seqs: list[SampledSequence], length: int | None = None) -> list[SampledSequence]:
    """Repeat the final record up to `length`; longer sequences are truncated."""
    if not seqs:
        raise ValueError("no sequences to pad")
    target = pad_length([len(s) for s in seqs]) if length is None else length

    def fix(arr: np.ndarray) -> np.ndarray:
        if arr.shape[0] >= target:
            return arr[:target]
        tail = np.repeat(arr[-1:], target - arr.shape[0], axis=0)
        return np.concatenate([arr, tail], axis=0)

    return [
        SampledSequence(
            follower=fix(s.follower),
            leader=fix(s.leader),
            frame_indices=fix(s.frame_indices),
            episode=s.episode,
            slot=s.slot,
        )
        for s in seqs
    ]


def augment(batch: np.ndarray, variance: float, rng: np.random.Generator) -> np.ndarray:
    """Elementwise gaussian input noise in raw units, fresh each step."""
    if variance == 0:
        return batch
    return batch + rng.normal(0.0, np.sqrt(variance), batch.shape)


def adam_step(
    value: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    t: int,
    lr: float = 0.001,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One bias-corrected Adam update; returns (value', m', v')."""
    if grad.shape != value.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {value.shape}")
    if t < 1:
        raise ValueError("step counter starts at 1")
    b1, b2 = betas
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    return value - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    """Keeps first/second moment state per named parameter; updates in a
    fixed name order so training is deterministic."""

    def __init__(self, params: dict[str, Tensor], lr: float = 0.001,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = dict(sorted(params.items()))
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, grads: dict[Tensor, np.ndarray]) -> None:
        self.t += 1
        for name, p in self.params.items():
            g = grads.get(p)
            if g is None:
                continue
            new, self.m[name], self.v[name] = adam_step(
                p.data.astype(np.float64), g.astype(np.float64),
                self.m[name], self.v[name], self.t, self.lr, self.betas, self.eps,
            )
            p.data = new.astype(p.data.dtype)


@dataclass
class PreparedDataset:
    train: list[SampledSequence]
    val: list[SampledSequence]
    frames: list[np.ndarray]  # per episode, [F, 64, 64, 3] uint8
    stats: NormStats
    pad_len: int


def prepare_dataset(data_dir: str | Path, manifest: DatasetManifest | None = None) -> PreparedDataset:
    data_dir = Path(data_dir)
    manifest = manifest or DatasetManifest.load(data_dir)
    train_seqs: list[SampledSequence] = []
    val_seqs: list[SampledSequence] = []
    frames: list[np.ndarray] = []
    for episode, entry in enumerate(manifest.entries):
        traj = read_trajectory(data_dir / entry.path)
        frames.append(traj.frames)
        seqs = expand_phases(traj, episode)
        (train_seqs if entry.role == "train" else val_seqs).extend(seqs)
    if not train_seqs or not val_seqs:
        raise ValueError("dataset needs both train and val episodes")
    stats = compute_norm_stats(
        np.concatenate([s.follower for s in train_seqs]),
        np.concatenate([s.leader for s in train_seqs]),
    )
    target = pad_length([len(s) for s in train_seqs])
    return PreparedDataset(
        train=pad_sequences(train_seqs, target),
        val=pad_sequences(val_seqs, target),
        frames=frames,
        stats=stats,
        pad_len=target,
    )


def _batch_frame_table(
    seqs: list[SampledSequence], frames: list[np.ndarray], dtype
) -> tuple[np.ndarray, np.ndarray]:
    """Unique frames used by a batch plus per-(sequence, step) indices into them."""
    episodes = sorted({s.episode for s in seqs})
    offsets = {}
    tables = []
    total = 0
    for ep in episodes:
        offsets[ep] = total
        tables.append(frames[ep])
        total += frames[ep].shape[0]
    table = np.concatenate(tables).astype(dtype) / 255.0
    table = table.transpose(0, 3, 1, 2)  # [U, 3, H, W]
    idx = np.stack([s.frame_indices + offsets[s.episode] for s in seqs])
    return table, idx


def _unrolled_predictions(
    cfg: PolicyConfig,
    params: PolicyParams,
    inputs: np.ndarray,  # [B, T, 3*J] normalized joints
    z_seq: Tensor,  # [B, T, F]
    steps_out: int,
) -> Tensor:
    """Stack outputs for steps 0..steps_out-1 as one [steps_out*B, out] tensor.

    Equivalent to stepping lstm_stack_step through time (the tests assert
    this), but every input-side GEMM that does not depend on the recurrent
    state is hoisted out of the time loop: layer-1 preactivations, the
    feature-injection terms of the upper layers, and the head's feature term
    are each computed for all timesteps in a single matrix product.
    """
    batch, total_steps, fdim = z_seq.data.shape
    units = cfg.lstm_units
    dtype = inputs.dtype
    cells = params.cells
    inj = cfg.each_layer_input

    z_flat = reshape(z_seq, (batch * total_steps, fdim))
    in1 = concat([Tensor(inputs.reshape(batch * total_steps, -1)), z_flat], axis=1)
    pre_in = [split_steps(reshape(linear(in1, cells[0].input_weights),
                                  (batch, total_steps, 4 * units)))]
    wh_in: list[Tensor | None] = [None]
    for n in range(1, cfg.lstm_layers):
        wxn = cells[n].input_weights
        if inj:
            wh_in.append(narrow(wxn, 1, 0, units))
            wz = narrow(wxn, 1, units, fdim)
            pre_in.append(split_steps(reshape(linear(z_flat, wz),
                                              (batch, total_steps, 4 * units))))
        else:
            wh_in.append(wxn)
            pre_in.append(None)
    if inj:
        head_h = narrow(params.head.weight, 1, 0, units)
        head_z = split_steps(reshape(linear(z_flat, narrow(params.head.weight, 1, units, fdim)),
                                     (batch, total_steps, cfg.output_dim)))
    else:
        head_h = params.head.weight
        head_z = None

    h = [Tensor(np.zeros((batch, units), dtype=dtype)) for _ in range(cfg.lstm_layers)]
    c = [Tensor(np.zeros((batch, units), dtype=dtype)) for _ in range(cfg.lstm_layers)]
    outs = []
    for t in range(steps_out):
        pre = add_bias(add(pre_in[0][t], linear(h[0], cells[0].recurrent_weights)),
                       cells[0].biases)
        h[0], c[0] = lstm_gates(pre, c[0])
        for n in range(1, cfg.lstm_layers):
            a = linear(h[n - 1], wh_in[n])
            if inj:
                a = add(a, pre_in[n][t])
            pre = add_bias(add(a, linear(h[n], cells[n].recurrent_weights)), cells[n].biases)
            h[n], c[n] = lstm_gates(pre, c[n])
        y = linear(h[-1], head_h)
        if inj:
            y = add(y, head_z[t])
        outs.append(y)
    return add_bias(concat(outs, axis=0), params.head.bias)


def _sequence_loss(
    cfg: PolicyConfig,
    params: PolicyParams,
    stats: NormStats,
    seqs: list[SampledSequence],
    frames: list[np.ndarray],
    dtype,
    noise_variance: float = 0.0,
    augment_images: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Masked MSE of denormalized predictions vs next-step leader targets.

    Encodes each distinct frame once per step; phase copies of an episode
    share both the frame and (when enabled) its noise draw.
    """
    batch = len(seqs)
    steps = len(seqs[0])
    if steps < 2:
        raise ValueError("sequences must have at least 2 steps (input, next-step target)")
    table, idx = _batch_frame_table(seqs, frames, dtype)
    follower = np.stack([s.follower for s in seqs]).astype(np.float64)
    targets = np.stack([s.leader for s in seqs]).astype(np.float64)
    if rng is not None and noise_variance > 0:
        follower = augment(follower, noise_variance, rng)
        if augment_images:
            std = np.sqrt(noise_variance)
            table = table + std * rng.standard_normal(table.shape, dtype=np.float32).astype(
                dtype, copy=False
            )
    inputs = stats.normalize_inputs(follower).astype(dtype)

    z_all = encode(cfg, params, Tensor(table))
    z_seq = gather_rows(z_all, idx)
    yn = _unrolled_predictions(cfg, params, inputs, z_seq, steps - 1)

    mask = cfg.output_mask().astype(dtype)
    t_std = np.where(stats.target_active, stats.target_std, 1.0).astype(dtype)
    t_mean = stats.target_mean.astype(dtype)
    # step-major target layout matching the concatenated predictions
    target_flat = np.swapaxes(targets[:, 1:steps, :], 0, 1).reshape(-1, cfg.output_dim)
    denom = float(batch * (steps - 1) * mask.sum())
    pred = add(mul(yn, t_std), t_mean)  # denormalize inside the graph
    err = pred - target_flat.astype(dtype)
    return mul(reduce_sum(mul(mul(err, err), mask)), 1.0 / denom)


@dataclass
class Checkpoint:
    policy_cfg: PolicyConfig
    stats: NormStats
    arrays: dict[str, np.ndarray]
    meta: dict

    def policy(self, dtype=np.float64) -> Policy:
        params = params_from_arrays(self.policy_cfg, self.arrays, dtype)
        return Policy(self.policy_cfg, params, self.stats)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    cfg = asdict(ckpt.policy_cfg)
    cfg["conv_channels"] = list(cfg["conv_channels"])
    header = {
        "format_version": CHECKPOINT_VERSION,
        "policy_config": cfg,
        "norm_stats": ckpt.stats.to_dict(),
        "fixed_joints": {str(k): v for k, v in ckpt.policy_cfg.fixed_joints.items()},
        "meta": ckpt.meta,
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(ckpt.arrays)))
        for name in sorted(ckpt.arrays):
            arr = np.ascontiguousarray(ckpt.arrays[name], dtype="<f8")
            encoded = name.encode()
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as f:
        if f.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen))
        cfg_dict = header["policy_config"]
        cfg_dict["conv_channels"] = tuple(cfg_dict["conv_channels"])
        cfg_dict["fixed_joints"] = {int(k): v for k, v in cfg_dict["fixed_joints"].items()}
        policy_cfg = PolicyConfig(**cfg_dict)
        stats = NormStats.from_dict(header["norm_stats"])
        (nblocks,) = struct.unpack("<I", f.read(4))
        arrays = {}
        for _ in range(nblocks):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode()
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}Q", f.read(8 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            arrays[name] = np.frombuffer(f.read(8 * count), dtype="<f8").reshape(shape).copy()
    return Checkpoint(policy_cfg, stats, arrays, header["meta"])


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    curves: list[tuple[int, float, float]]  # (epoch, train_mse, val_mse)

    def curves_csv(self) -> str:
        lines = ["epoch,train_mse,val_mse"]
        lines += [f"{e},{tr:.10g},{va:.10g}" for e, tr, va in self.curves]
        return "\n".join(lines) + "\n"


def _forward_loss(cfg, params, stats, seqs, frames, dtype) -> float:
    # inference only, so one big batch amortizes the frame encoding
    return float(_sequence_loss(cfg, params, stats, seqs, frames, dtype).data)


def train(
    policy_cfg: PolicyConfig,
    train_cfg: TrainConfig,
    dataset: PreparedDataset,
    log=None,
) -> TrainResult:
    """Optimize on the prepared dataset; returns the best-validation model.

    Raises TrainingDiverged (with the epoch index) on a non-finite loss.
    """
    dtype = np.dtype(train_cfg.dtype)
    init_rng = np.random.default_rng([train_cfg.seed, 1])
    noise_rng = np.random.default_rng([train_cfg.seed, 2])
    shuffle_rng = np.random.default_rng([train_cfg.seed, 3])

    params = init_params(policy_cfg, init_rng, dtype)
    named = params.named()
    opt = Adam(named, lr=train_cfg.lr)
    episodes = sorted({s.episode for s in dataset.train})
    by_episode = {ep: [s for s in dataset.train if s.episode == ep] for ep in episodes}

    curves = []
    best_val = np.inf
    best_arrays = {k: p.data.astype(np.float64) for k, p in named.items()}
    best_epoch = 0
    for epoch in range(1, train_cfg.epochs + 1):
        order = list(episodes)
        shuffle_rng.shuffle(order)
        seqs = [s for ep in order for s in by_episode[ep]]
        epoch_loss, seen = 0.0, 0
        for start in range(0, len(seqs), train_cfg.batch_size):
            chunk = seqs[start : start + train_cfg.batch_size]
            with Graph():
                loss = _sequence_loss(
                    policy_cfg, params, dataset.stats, chunk, dataset.frames, dtype,
                    noise_variance=train_cfg.noise_variance,
                    augment_images=train_cfg.augment_images,
                    rng=noise_rng,
                )
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(epoch)
            grads = backward(loss)
            opt.step(grads)
            epoch_loss += value * len(chunk)
            seen += len(chunk)
        train_loss = epoch_loss / seen
        val_loss = _forward_loss(
            policy_cfg, params, dataset.stats, dataset.val, dataset.frames, dtype
        )
        if not np.isfinite(val_loss):
            raise TrainingDiverged(epoch)
        curves.append((epoch, train_loss, val_loss))
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_arrays = {k: p.data.astype(np.float64).copy() for k, p in named.items()}
        if log:
            log(epoch, train_loss, val_loss)

    meta = {
        "train_config": asdict(train_cfg),
        "best_epoch": best_epoch,
        "best_val_mse": best_val,
        "final_train_mse": curves[-1][1],
        "pad_len": dataset.pad_len,
        "seed": train_cfg.seed,
    }
    ckpt = Checkpoint(policy_cfg, dataset.stats, best_arrays, meta)
    return TrainResult(ckpt, curves)
