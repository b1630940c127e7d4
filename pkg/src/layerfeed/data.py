"""Trajectory containers, the binary trajectory file format, and the dataset
manifest.

A trajectory file is: 6-byte magic, a fixed little-endian header, the leader
and follower joint blocks as float32 ``[steps, 3, joints]`` (angle, velocity,
torque), then raw RGB8 frames ``[frames, H, W, 3]``. Block sizes must match
the header arithmetic exactly and the magic is verified on read.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TRAJECTORY_MAGIC = b"ILTRJ1"
_HEADER = struct.Struct("<IIIQQdQII")  # jc, jrate, frate, jsteps, fsteps, slot, seed, h, w

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


@dataclass
class JointRecord:
    """One instant of one robot: per-joint angle, angular velocity, torque."""

    angle: np.ndarray
    velocity: np.ndarray
    torque: np.ndarray
    role: str = "follower"

    def to_vector(self) -> np.ndarray:
        """Pack as [angles..., velocities..., torques...]."""
        return np.concatenate([self.angle, self.velocity, self.torque])

    @classmethod
    def from_vector(cls, vec: np.ndarray, role: str = "follower") -> "JointRecord":
        vec = np.asarray(vec)
        if vec.ndim != 1 or vec.size % 3:
            raise ValueError(f"joint vector must be flat with length 3*J, got {vec.shape}")
        j = vec.size // 3
        return cls(vec[:j].copy(), vec[j : 2 * j].copy(), vec[2 * j :].copy(), role)

    @property
    def joint_count(self) -> int:
        return self.angle.shape[0]


@dataclass
class Trajectory:
    """Leader and follower streams plus rendered frames for one episode.

    Streams are [steps, 3, joints] float32 with channel order angle,
    velocity, torque; frames are [n, H, W, 3] uint8 sampled every
    joint_rate/frame_rate joint steps starting at step 0.
    """

    joint_rate_hz: int
    frame_rate_hz: int
    slot: float
    seed: int
    leader: np.ndarray
    follower: np.ndarray
    frames: np.ndarray

    @property
    def joint_steps(self) -> int:
        return self.leader.shape[0]

    @property
    def frame_steps(self) -> int:
        return self.frames.shape[0]

    @property
    def joint_count(self) -> int:
        return self.leader.shape[2]

    def validate(self) -> None:
        if self.leader.shape != self.follower.shape:
            raise ValueError(
                f"leader block {self.leader.shape} != follower block {self.follower.shape}"
            )
        if self.leader.ndim != 3 or self.leader.shape[1] != 3:
            raise ValueError(f"joint stream must be [steps, 3, joints], got {self.leader.shape}")
        if self.frames.ndim != 4 or self.frames.shape[3] != 3:
            raise ValueError(f"frames must be [n, H, W, 3], got {self.frames.shape}")
        if self.joint_rate_hz % self.frame_rate_hz:
            raise ValueError(
                f"joint rate {self.joint_rate_hz} not divisible by frame rate {self.frame_rate_hz}"
            )
        ratio = self.joint_rate_hz // self.frame_rate_hz
        expected = -(-self.joint_steps // ratio)
        if self.frame_steps != expected:
            raise ValueError(
                f"{self.frame_steps} frames inconsistent with {self.joint_steps} joint "
                f"steps at rate ratio {ratio} (expected {expected})"
            )
        if not np.isfinite(self.leader).all() or not np.isfinite(self.follower).all():
            raise ValueError("joint streams hold non-finite values")

    def frame_index_for_joint_step(self, step: int) -> int:
        return step // (self.joint_rate_hz // self.frame_rate_hz)


def write_trajectory(path: str | Path, traj: Trajectory) -> None:
    traj.validate()
    h, w = traj.frames.shape[1:3]
    header = _HEADER.pack(
        traj.joint_count,
        traj.joint_rate_hz,
        traj.frame_rate_hz,
        traj.joint_steps,
        traj.frame_steps,
        float(traj.slot),
        traj.seed,
        h,
        w,
    )
    with open(path, "wb") as f:
        f.write(TRAJECTORY_MAGIC)
        f.write(header)
        f.write(np.ascontiguousarray(traj.leader, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(traj.follower, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(traj.frames, dtype=np.uint8).tobytes())


def read_trajectory(path: str | Path) -> Trajectory:
    with open(path, "rb") as f:
        magic = f.read(len(TRAJECTORY_MAGIC))
        if magic != TRAJECTORY_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {TRAJECTORY_MAGIC!r}")
        jc, jrate, frate, jsteps, fsteps, slot, seed, h, w = _HEADER.unpack(
            f.read(_HEADER.size)
        )
        joint_bytes = jsteps * 3 * jc * 4
        leader = np.frombuffer(f.read(joint_bytes), dtype="<f4").reshape(jsteps, 3, jc)
        follower = np.frombuffer(f.read(joint_bytes), dtype="<f4").reshape(jsteps, 3, jc)
        frame_bytes = fsteps * h * w * 3
        raw = f.read(frame_bytes)
        if len(raw) != frame_bytes or f.read(1):
            raise ValueError(f"{path}: block sizes disagree with header")
        frames = np.frombuffer(raw, dtype=np.uint8).reshape(fsteps, h, w, 3)
    traj = Trajectory(jrate, frate, slot, seed, leader.copy(), follower.copy(), frames.copy())
    traj.validate()
    return traj


@dataclass
class ManifestEntry:
    path: str
    slot: float
    seed: int
    role: str  # "train" | "val"
    joint_rate_hz: int
    frame_rate_hz: int
    joint_steps: int
    frame_steps: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class DatasetManifest:
    seed: int
    slot_scale: float
    train_slots: list[float]
    eval_slots: list[float]
    entries: list[ManifestEntry] = field(default_factory=list)
    format_version: int = MANIFEST_VERSION

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        payload = {
            "format_version": self.format_version,
            "seed": self.seed,
            "slot_scale": self.slot_scale,
            "train_slots": self.train_slots,
            "eval_slots": self.eval_slots,
            "entries": [e.to_dict() for e in self.entries],
        }
        path = directory / MANIFEST_NAME
        path.write_text(json.dumps(payload, indent=2))
        return path

    @classmethod
    def load(cls, directory: str | Path, verify: bool = True) -> "DatasetManifest":
        directory = Path(directory)
        payload = json.loads((directory / MANIFEST_NAME).read_text())
        if payload["format_version"] != MANIFEST_VERSION:
            raise ValueError(
                f"manifest format {payload['format_version']} unsupported "
                f"(expected {MANIFEST_VERSION})"
            )
        manifest = cls(
            seed=payload["seed"],
            slot_scale=payload["slot_scale"],
            train_slots=payload["train_slots"],
            eval_slots=payload["eval_slots"],
            entries=[ManifestEntry(**e) for e in payload["entries"]],
            format_version=payload["format_version"],
        )
        if verify:
            manifest.verify(directory)
        return manifest

    def verify(self, directory: str | Path) -> None:
        """Every referenced file must exist and agree with its manifest entry."""
        directory = Path(directory)
        for entry in self.entries:
            path = directory / entry.path
            if not path.exists():
                raise FileNotFoundError(f"manifest references missing file {path}")
            traj = read_trajectory(path)
            mismatches = [
                name
                for name, got, want in [
                    ("slot", traj.slot, entry.slot),
                    ("seed", traj.seed, entry.seed),
                    ("joint_rate_hz", traj.joint_rate_hz, entry.joint_rate_hz),
                    ("frame_rate_hz", traj.frame_rate_hz, entry.frame_rate_hz),
                    ("joint_steps", traj.joint_steps, entry.joint_steps),
                    ("frame_steps", traj.frame_steps, entry.frame_steps),
                ]
                if got != want
            ]
            if mismatches:
                raise ValueError(f"{path}: header disagrees with manifest on {mismatches}")

    def paths(self, directory: str | Path, role: str | None = None) -> list[Path]:
        directory = Path(directory)
        return [
            directory / e.path for e in self.entries if role is None or e.role == role
        ]
