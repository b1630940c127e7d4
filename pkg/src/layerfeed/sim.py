"""Synthetic planar pick-and-place benchmark.

A leader/follower pair on an abstract 8-joint gantry: the scripted leader
plays minimum-jerk reach / grasp / lift / place profiles, the follower tracks
them through per-joint PD dynamics with torque feedforward at 500 Hz, and a
tiny rasterizer produces 64x64 frames at 50 Hz. Object start positions live
on a line of slots; training uses 5 of them and evaluation adds the midpoints
and both extrapolated ends.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import JointRecord, Trajectory

PHYSICS_RATE_HZ = 500
FRAME_RATE_HZ = 50
JOINT_COUNT = 8
JOINT_NAMES = ("base_x", "reach", "lift", "wrist", "grip", "pass0", "pass1", "pass2")

# paper-style numbering starts at 1, so "joint 2" is index 1; locking the
# reach joint turns the arm into a planar gantry
DEFAULT_FIXED_JOINTS: dict[int, float] = {1: 0.0}

# critically damped PD (omega = 20 rad/s): settles in well under 0.5 s
KP = 400.0
KV = 40.0

SLOT_SCALE = 0.1  # world units per slot step
CENTER_SLOT = 2.0
TRAIN_SLOTS = (0.0, 1.0, 2.0, 3.0, 4.0)
EVAL_SLOTS = (-0.5, 0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5)

GRIP_OPEN = 0.03
GRIP_CLOSED = 0.0
GRIP_CLOSE_THRESHOLD = 0.012
GRIP_OPEN_THRESHOLD = 0.02
GRASP_RADIUS = 0.03
GRASP_ENGAGE_HEIGHT = 0.03

HOVER_HEIGHT = 0.12
GRASP_HEIGHT = 0.008
PLACE_HEIGHT = 0.02

LIFT_SUCCESS_HEIGHT = 0.05
CENTER_ZONE = 0.1

IMG_H = IMG_W = 64
PX_PER_UNIT = 100.0
U_CENTER = 32.0
V_TABLE = 54  # first table row; objects rest just above it

ACTUATION_NOISE_STD = 0.2  # rad/s^2, follower only
TRACKING_TOLERANCE = 0.02  # rad, leader/follower angle error after transients


@dataclass
class SlotGrid:
    train: tuple[float, ...] = TRAIN_SLOTS
    eval: tuple[float, ...] = EVAL_SLOTS
    scale: float = SLOT_SCALE

    def __post_init__(self):
        missing = [s for s in self.train if s not in self.eval]
        if missing:
            raise ValueError(f"eval slots must cover train slots; missing {missing}")

    def to_world(self, slot: float) -> float:
        return (slot - CENTER_SLOT) * self.scale


@dataclass
class WorldState:
    q: np.ndarray  # [8] joint angles
    qd: np.ndarray  # [8] joint velocities
    object_x: float
    object_z: float
    grasped: bool

    def copy(self) -> "WorldState":
        return WorldState(self.q.copy(), self.qd.copy(), self.object_x, self.object_z, self.grasped)

    @property
    def ee_x(self) -> float:
        return float(self.q[0] + self.q[1])

    @property
    def ee_z(self) -> float:
        return float(self.q[2])

    @property
    def grip(self) -> float:
        return float(self.q[4])


def home_state(object_x: float) -> WorldState:
    q = np.zeros(JOINT_COUNT)
    q[2] = HOVER_HEIGHT
    q[4] = GRIP_OPEN
    for idx, value in DEFAULT_FIXED_JOINTS.items():
        q[idx] = value
    return WorldState(q=q, qd=np.zeros(JOINT_COUNT), object_x=object_x, object_z=0.0, grasped=False)


def follower_dynamics_step(
    state: WorldState,
    command: JointRecord,
    dt: float = 1.0 / PHYSICS_RATE_HZ,
    noise: np.ndarray | None = None,
    fixed_joints: dict[int, float] = DEFAULT_FIXED_JOINTS,
) -> tuple[WorldState, np.ndarray]:
    """One semi-implicit Euler step; returns (next state, applied torque).

    Per joint: acceleration = KP * (angle_cmd - q) - KV * qd + torque_cmd.
    Commanded velocity is deliberately not consumed; a command whose torque
    carries KV * vel + acc feedforward yields exact critically damped
    tracking. Fixed joints stay locked and report zero torque.
    """
    if not np.isfinite(command.angle).all() or not np.isfinite(command.torque).all():
        bad = int(np.flatnonzero(~(np.isfinite(command.angle) & np.isfinite(command.torque)))[0])
        raise ValueError(f"non-finite command for joint {bad}")
    nxt = state.copy()
    torque = KP * (command.angle - nxt.q) - KV * nxt.qd + command.torque
    accel = torque.copy()
    if noise is not None:
        accel = accel + noise
    nxt.qd = nxt.qd + accel * dt
    nxt.q = nxt.q + nxt.qd * dt
    for idx, value in fixed_joints.items():
        nxt.q[idx] = value
        nxt.qd[idx] = 0.0
        torque[idx] = 0.0

    # grasp logic: closing near the object on the table attaches it
    if not nxt.grasped:
        if (
            nxt.grip < GRIP_CLOSE_THRESHOLD
            and abs(nxt.ee_x - nxt.object_x) <= GRASP_RADIUS
            and nxt.ee_z <= GRASP_ENGAGE_HEIGHT
            and nxt.object_z <= 1e-9
        ):
            nxt.grasped = True
    if nxt.grasped:
        nxt.object_x = nxt.ee_x
        nxt.object_z = max(nxt.ee_z, 0.0)
        if nxt.grip > GRIP_OPEN_THRESHOLD:
            nxt.grasped = False
            nxt.object_z = 0.0
    return nxt, torque


def render(state: WorldState) -> np.ndarray:
    """Deterministic 64x64 RGB8 rasterization of the world, HWC uint8.

    Horizontal pixel positions are affine in world x (PX_PER_UNIT px per
    unit), so slot geometry is recoverable from frames.
    """
    img = np.empty((IMG_H, IMG_W, 3), dtype=np.uint8)
    img[:] = (30, 30, 40)
    img[V_TABLE:, :] = (95, 70, 40)

    def paint(cx: float, cy: float, half: int, color) -> None:
        u = int(round(cx))
        v = int(round(cy))
        u0, u1 = max(u - half, 0), min(u + half + 1, IMG_W)
        v0, v1 = max(v - half, 0), min(v + half + 1, IMG_H)
        if u0 < u1 and v0 < v1:
            img[v0:v1, u0:u1] = color

    obj_u = U_CENTER + state.object_x * PX_PER_UNIT
    obj_v = V_TABLE - 3 - state.object_z * PX_PER_UNIT
    paint(obj_u, obj_v, 2, (225, 45, 45))

    ee_u = U_CENTER + state.ee_x * PX_PER_UNIT
    ee_v = V_TABLE - 9 - state.ee_z * PX_PER_UNIT
    tint = (45, 200, 225) if state.grip < GRIP_CLOSE_THRESHOLD else (45, 220, 70)
    paint(ee_u, ee_v, 2, tint)
    return img


def frame_to_float(frame_u8: np.ndarray) -> np.ndarray:
    """[H,W,3] uint8 -> [3,H,W] float64 in [0,1]."""
    return frame_u8.astype(np.float64).transpose(2, 0, 1) / 255.0


def _min_jerk(u: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    s = 10 * u**3 - 15 * u**4 + 6 * u**5
    ds = 30 * u**2 - 60 * u**3 + 30 * u**4
    dds = 60 * u - 180 * u**2 + 120 * u**3
    return s, ds, dds


class _Profile:
    """Piecewise minimum-jerk position profile for one joint."""

    def __init__(self, start: float):
        self.knots: list[tuple[float, float, float]] = []  # (t0, t1, target)
        self.start = start

    def hold_until(self, t: float) -> float:
        return t

    def move(self, t0: float, duration: float, target: float) -> float:
        self.knots.append((t0, t0 + duration, target))
        return t0 + duration

    def sample(self, times: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        pos = np.full_like(times, self.start)
        vel = np.zeros_like(times)
        acc = np.zeros_like(times)
        q0 = self.start
        for t0, t1, target in self.knots:
            span = t1 - t0
            active = (times >= t0) & (times < t1)
            u = (times[active] - t0) / span
            s, ds, dds = _min_jerk(u)
            delta = target - q0
            pos[active] = q0 + delta * s
            vel[active] = delta * ds / span
            acc[active] = delta * dds / span**2
            after = times >= t1
            pos[after] = target
            vel[after] = 0.0
            acc[after] = 0.0
            q0 = target
        return pos, vel, acc


def leader_script(
    slot: float,
    rng: np.random.Generator,
    grid: SlotGrid,
    duration_jitter: float = 0.05,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Scripted leader joint streams (angles, velocities, accelerations) at 500 Hz."""
    target_x = grid.to_world(slot)
    jitter = lambda d: d * (1.0 + rng.uniform(-duration_jitter, duration_jitter))

    base = _Profile(0.0)
    lift = _Profile(HOVER_HEIGHT)
    wrist = _Profile(0.0)
    grip = _Profile(GRIP_OPEN)

    t = 0.08
    t = base.move(t, jitter(0.45), target_x)  # reach over the object
    t = lift.move(t, jitter(0.25), GRASP_HEIGHT)  # descend
    t = grip.move(t, jitter(0.18), GRIP_CLOSED)  # close
    t_lift = lift.move(t, jitter(0.25), HOVER_HEIGHT)  # lift
    wrist.move(t, jitter(0.25), 0.25)
    t = t_lift
    t = base.move(t, jitter(0.45), 0.0)  # carry to center
    t = lift.move(t, jitter(0.22), PLACE_HEIGHT)  # lower
    t = grip.move(t, jitter(0.18), GRIP_OPEN)  # release
    t_up = lift.move(t, jitter(0.20), HOVER_HEIGHT)  # retreat
    wrist.move(t, jitter(0.20), 0.0)
    t = t_up + 0.08

    steps = int(np.ceil(t * PHYSICS_RATE_HZ / 10.0)) * 10  # whole number of frames
    times = np.arange(steps) / PHYSICS_RATE_HZ
    angles = np.zeros((steps, JOINT_COUNT))
    vels = np.zeros((steps, JOINT_COUNT))
    accs = np.zeros((steps, JOINT_COUNT))
    for idx, profile in ((0, base), (2, lift), (3, wrist), (4, grip)):
        angles[:, idx], vels[:, idx], accs[:, idx] = profile.sample(times)
    for idx, value in DEFAULT_FIXED_JOINTS.items():
        angles[:, idx] = value
        vels[:, idx] = 0.0
        accs[:, idx] = 0.0
    return angles, vels, accs


def teacher_demonstrate(
    slot: float,
    seed: int,
    grid: SlotGrid | None = None,
    actuation_noise_std: float = ACTUATION_NOISE_STD,
    object_jitter: float = 0.005,
) -> Trajectory:
    """One scripted leader episode tracked by the noisy follower, 500 Hz.

    The leader torque channel carries the exact feedforward KV * vel + acc,
    which is also what makes the follower's tracking critically damped.
    """
    grid = grid or SlotGrid()
    if not (min(grid.eval) <= slot <= max(grid.eval)):
        raise ValueError(f"slot {slot} outside the reachable grid {grid.eval}")
    rng = np.random.default_rng([seed, int(round(slot * 2)) & 0xFFFF])
    angles, vels, accs = leader_script(slot, rng, grid)
    torques = KV * vels + accs
    for idx in DEFAULT_FIXED_JOINTS:
        torques[:, idx] = 0.0
    steps = angles.shape[0]
    ratio = PHYSICS_RATE_HZ // FRAME_RATE_HZ

    object_x = grid.to_world(slot) + rng.uniform(-object_jitter, object_jitter)
    state = home_state(object_x)
    noise = rng.normal(0.0, actuation_noise_std, (steps, JOINT_COUNT))
    for idx in DEFAULT_FIXED_JOINTS:
        noise[:, idx] = 0.0

    follower = np.zeros((steps, 3, JOINT_COUNT), dtype=np.float64)
    frames = np.zeros((steps // ratio, IMG_H, IMG_W, 3), dtype=np.uint8)
    applied = np.zeros(JOINT_COUNT)  # response torque lags one physics step
    for step in range(steps):
        if step % ratio == 0:
            frames[step // ratio] = render(state)
        follower[step, 0] = state.q
        follower[step, 1] = state.qd
        follower[step, 2] = applied
        command = JointRecord(angles[step], vels[step], torques[step], role="leader")
        state, applied = follower_dynamics_step(state, command, noise=noise[step])

    leader = np.stack([angles, vels, torques], axis=1)
    return Trajectory(
        joint_rate_hz=PHYSICS_RATE_HZ,
        frame_rate_hz=FRAME_RATE_HZ,
        slot=slot,
        seed=seed,
        leader=leader.astype(np.float32),
        follower=follower.astype(np.float32),
        frames=frames,
    )


class PickPlaceEnv:
    """Closed-loop environment stepped at the policy's control rate."""

    def __init__(
        self,
        slot: float,
        seed: int,
        grid: SlotGrid | None = None,
        control_rate_hz: int = FRAME_RATE_HZ,
        trial_jitter: float = 0.0,
        actuation_noise_std: float = 0.0,
    ):
        self.grid = grid or SlotGrid()
        self.slot = slot
        self.seed = seed
        self.control_rate_hz = control_rate_hz
        self.substeps = PHYSICS_RATE_HZ // control_rate_hz
        self.rng = np.random.default_rng([seed, 0x5E9])
        object_x = self.grid.to_world(slot) + self.rng.uniform(-trial_jitter, trial_jitter)
        self.state = home_state(object_x)
        if trial_jitter:
            self.state.q[0] += self.rng.uniform(-trial_jitter, trial_jitter)
            self.state.q[2] += self.rng.uniform(-trial_jitter, trial_jitter)
        self.noise_std = actuation_noise_std
        self.peak_object_z = 0.0
        self.ever_grasped = False
        self._steps_since_release = None
        self._last_torque = np.zeros(JOINT_COUNT)
        self.terminal = False

    def observe(self) -> tuple[np.ndarray, JointRecord]:
        frame = render(self.state)
        follower = JointRecord(
            self.state.q.copy(), self.state.qd.copy(), self._last_torque.copy(), "follower"
        )
        return frame, follower

    def control_step(self, command: JointRecord) -> None:
        """Apply one 50 Hz command through the 500 Hz dynamics."""
        for _ in range(self.substeps):
            noise = None
            if self.noise_std:
                noise = self.rng.normal(0.0, self.noise_std, JOINT_COUNT)
            self.state, torque = follower_dynamics_step(self.state, command, noise=noise)
        self._last_torque = torque
        self.peak_object_z = max(self.peak_object_z, self.state.object_z)
        if self.state.grasped:
            self.ever_grasped = True
            self._steps_since_release = None
        elif self.ever_grasped:
            self._steps_since_release = (
                0 if self._steps_since_release is None else self._steps_since_release + 1
            )
            if self._steps_since_release >= self.control_rate_hz // 5:  # 0.2 s settle
                self.terminal = True

    def success(self) -> bool:
        """Lifted above threshold, then released inside the center zone."""
        return (
            self.peak_object_z > LIFT_SUCCESS_HEIGHT
            and not self.state.grasped
            and self.state.object_z <= 1e-9
            and abs(self.state.object_x) <= CENTER_ZONE
        )


@dataclass
class SuccessTable:
    slots: list[float]
    trials_per_slot: int
    successes: list[int]

    @property
    def per_slot_percent(self) -> list[float]:
        return [100.0 * s / self.trials_per_slot for s in self.successes]

    @property
    def total_percent(self) -> float:
        return 100.0 * sum(self.successes) / (self.trials_per_slot * len(self.slots))

    def format(self) -> str:
        head = " | ".join(f"{s:>5g}" for s in self.slots) + " | total"
        vals = " | ".join(f"{p:>5.0f}" for p in self.per_slot_percent)
        return f"slot    {head}\nsuccess {vals} | {self.total_percent:5.1f}"

    def to_csv(self) -> str:
        lines = ["slot,success_percent"]
        lines += [f"{s},{p}" for s, p in zip(self.slots, self.per_slot_percent)]
        lines.append(f"total,{self.total_percent}")
        return "\n".join(lines) + "\n"


def thread_limit() -> int:
    try:
        return max(1, int(os.environ.get("IL_THREADS", "1")))
    except ValueError:
        return 1


def evaluate(
    policy,
    slots: list[float] | None = None,
    trials_per_slot: int = 5,
    seed: int = 0,
    max_steps: int | None = None,
    trial_jitter: float = 0.01,
    grid: SlotGrid | None = None,
    record: bool = False,
) -> SuccessTable | tuple[SuccessTable, list[Trajectory]]:
    """Closed-loop success percentages per slot; optionally keeps trajectories.

    Deterministic under a fixed seed: each (slot, trial) pair owns a derived
    seed, and results merge in slot order however many worker threads run.
    """
    from .policy import rollout  # local import keeps module dependencies one-way

    grid = grid or SlotGrid()
    slots = list(grid.eval) if slots is None else list(slots)
    if trials_per_slot <= 0:
        raise ValueError("trials_per_slot must be positive")

    def run_slot(slot_index: int) -> tuple[int, list[Trajectory]]:
        slot = slots[slot_index]
        wins = 0
        kept = []
        for trial in range(trials_per_slot):
            trial_seed = (seed * 1_000_003 + slot_index * 1_009 + trial) & 0x7FFFFFFFFFFFFFFF
            env = PickPlaceEnv(slot, seed=trial_seed, grid=grid, trial_jitter=trial_jitter)
            traj = rollout(policy, env, max_steps=max_steps)
            wins += int(env.success())
            if record:
                kept.append(traj)
        return wins, kept

    workers = thread_limit()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_slot, range(len(slots))))
    else:
        results = [run_slot(i) for i in range(len(slots))]
    table = SuccessTable(slots, trials_per_slot, [wins for wins, _ in results])
    if record:
        return table, [t for _, kept in results for t in kept]
    return table
