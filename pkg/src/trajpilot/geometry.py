"""Timestamped 6-DoF pose streams to fixed-size relative-control tensors.

Quaternions are scalar-first ``(w, x, y, z)``. A control row is
``[dx, dy, dz, rx, ry, rz]``: the translation from one resampled knot to the
next expressed in the earlier knot's body frame, and the relative rotation as
a principal-branch rotation vector.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

KNOTS = 16
UNIT_TOL = 1e-9


@dataclass(frozen=True)
class Pose:
    t: float
    translation: np.ndarray
    rotation: np.ndarray  # unit quaternion (w, x, y, z)

    def __post_init__(self):
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(4))
        if not np.isfinite(self.t):
            raise ValueError("pose timestamp must be finite")
        _check_unit(self.rotation)


@dataclass(frozen=True)
class ControlTensor:
    controls: np.ndarray  # (16, 6)
    interval: tuple[float, float]

    def __post_init__(self):
        c = np.asarray(self.controls, dtype=float)
        if c.shape != (KNOTS, 6):
            raise ValueError(f"controls must be {KNOTS}x6, got {c.shape}")
        object.__setattr__(self, "controls", c)


class PoseStream:
    """Column-wise pose storage: ``t`` (N,), ``translation`` (N,3), ``rotation`` (N,4)."""

    def __init__(self, t, translation, rotation):
        self.t = np.asarray(t, dtype=float).reshape(-1)
        self.translation = np.asarray(translation, dtype=float).reshape(-1, 3)
        self.rotation = np.asarray(rotation, dtype=float).reshape(-1, 4)
        if not (len(self.t) == len(self.translation) == len(self.rotation)):
            raise ValueError("pose stream columns differ in length")

    @classmethod
    def from_poses(cls, poses) -> "PoseStream":
        poses = list(poses)
        return cls([p.t for p in poses], [p.translation for p in poses], [p.rotation for p in poses])

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, i) -> Pose:
        return Pose(self.t[i], self.translation[i], self.rotation[i])


def _check_unit(q: np.ndarray) -> None:
    norms = np.linalg.norm(np.atleast_2d(q), axis=-1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ValueError(f"quaternion is not unit-norm (|q| = {norms})")


def _rot(q: np.ndarray) -> Rotation:
    return Rotation.from_quat(q, scalar_first=True)


def rotation_to_rotvec(q) -> np.ndarray:
    """Axis-angle vector of a unit quaternion, angle in [0, pi]."""
    q = np.asarray(q, dtype=float)
    _check_unit(q)
    return _rot(q).as_rotvec()


def rotation_from_rotvec(r) -> np.ndarray:
    """Unit quaternion (w >= 0) for a rotation vector."""
    return _rot_to_quat(Rotation.from_rotvec(np.asarray(r, dtype=float)))


def _rot_to_quat(rot: Rotation) -> np.ndarray:
    q = rot.as_quat(canonical=True, scalar_first=True)
    return q


def quat_multiply(a, b) -> np.ndarray:
    return _rot_to_quat(_rot(np.asarray(a, float)) * _rot(np.asarray(b, float)))


def rotation_matrix(q) -> np.ndarray:
    return _rot(np.asarray(q, dtype=float)).as_matrix()


def _relative(trans_a, quat_a, trans_b, quat_b) -> np.ndarray:
    ra, rb = _rot(quat_a), _rot(quat_b)
    dt = ra.inv().apply(np.asarray(trans_b) - np.asarray(trans_a))
    dr = (ra.inv() * rb).as_rotvec()
    return np.concatenate([dt, dr], axis=-1)


def relative_pose(a: Pose, b: Pose) -> np.ndarray:
    """6-vector taking pose ``a`` to pose ``b``, expressed in ``a``'s frame."""
    return _relative(a.translation, a.rotation, b.translation, b.rotation)


def interpolate(stream: PoseStream, times) -> tuple[np.ndarray, np.ndarray]:
    """Linear translation and shortest-arc slerp rotation at ``times``."""
    times = np.asarray(times, dtype=float)
    trans = np.stack([np.interp(times, stream.t, stream.translation[:, k]) for k in range(3)], axis=-1)
    rot = Slerp(stream.t, _rot(stream.rotation))(times)
    return trans, _rot_to_quat(rot)


def resample_controls(poses, interval, knots: int = KNOTS) -> ControlTensor:
    """Resample a pose stream over ``interval`` into a (16, 6) control tensor.

    The interval is clipped to the pose time range. Knots are uniform on the
    clipped interval; row k is the relative pose from knot k to knot k+1, and
    the final row repeats the one before it (16 knots give 15 deltas).
    """
    stream = poses if isinstance(poses, PoseStream) else PoseStream.from_poses(poses)
    if len(stream) < 2:
        raise ValueError("need at least two poses")
    if np.any(np.diff(stream.t) <= 0):
        raise ValueError("pose timestamps must be strictly increasing")
    _check_unit(stream.rotation)
    t0, t1 = float(interval[0]), float(interval[1])
    if not t1 > t0:
        raise ValueError(f"empty interval {interval}")
    t0, t1 = max(t0, stream.t[0]), min(t1, stream.t[-1])
    if not t1 > t0:
        raise ValueError(f"interval {interval} does not overlap poses [{stream.t[0]}, {stream.t[-1]}]")
    times = np.linspace(t0, t1, knots)
    trans, quat = interpolate(stream, times)
    deltas = _relative(trans[:-1], quat[:-1], trans[1:], quat[1:])
    controls = np.concatenate([deltas, deltas[-1:]], axis=0)
    return ControlTensor(controls, (t0, t1))


def transform_stream(stream: PoseStream, translation, rotation) -> PoseStream:
    """Apply one world-frame rigid transform to every pose."""
    g = _rot(np.asarray(rotation, dtype=float))
    trans = g.apply(stream.translation) + np.asarray(translation, dtype=float)
    quat = _rot_to_quat(g * _rot(stream.rotation))
    return PoseStream(stream.t.copy(), trans, quat)


def write_poses_jsonl(path, stream: PoseStream) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for t, (tx, ty, tz), (qw, qx, qy, qz) in zip(stream.t, stream.translation, stream.rotation):
            fh.write(json.dumps({"t": float(t), "tx": float(tx), "ty": float(ty), "tz": float(tz),
                                 "qw": float(qw), "qx": float(qx), "qy": float(qy), "qz": float(qz)}))
            fh.write("\n")


def read_poses_jsonl(path) -> PoseStream:
    rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    return PoseStream(
        [r["t"] for r in rows],
        [[r["tx"], r["ty"], r["tz"]] for r in rows],
        [[r["qw"], r["qx"], r["qy"], r["qz"]] for r in rows],
    )
