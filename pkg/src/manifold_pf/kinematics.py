"""Serial revolute chains: forward kinematics, sensor placement, Jacobians.

Planar chains are handled with the same machinery as spatial ones: every
joint rotates about +z and all translations live in the xy-plane, and the
results are truncated to two coordinates on the way out.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MAX_JOINTS = 32


def _skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def rotation_about(axis, angle):
    """Rodrigues rotation matrix (3x3) for a unit ``axis``."""
    K = _skew(axis)
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def _as3(v, dim):
    v = np.asarray(v, dtype=float).ravel()
    if v.size not in (dim, 3):
        raise ValueError(f"expected a {dim}-vector, got shape {v.shape}")
    if v.size == 3:
        return v.copy()
    out = np.zeros(3)
    out[:dim] = v
    return out


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray


@dataclass(frozen=True)
class SensorSpec:
    """A sphere rigidly attached to joint frame ``link_index``.

    ``radius == 0`` is a point sensor.  The same type describes
    non-sensing collision spheres (``sensing=False``).
    """

    link_index: int
    local_offset: tuple
    radius: float = 0.0
    id: int = 0
    sensing: bool = True

    def __post_init__(self):
        if self.link_index < 0:
            raise ValueError("link_index must be nonnegative")
        if self.radius < 0:
            raise ValueError("sensor radius must be >= 0")


@dataclass(frozen=True, eq=False)
class ChainModel:
    """An open chain of revolute joints.

    Joint ``j``'s frame is its parent frame, translated by ``offsets[j]``
    and then rotated by ``q[j]`` about ``axes[j]`` (expressed in the
    translated parent frame).  Joint 0's parent is the base.
    """

    dimension: int
    offsets: np.ndarray
    axes: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    base: np.ndarray = field(default_factory=lambda: np.zeros(3))
    tip: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        d = self.dimension
        if d not in (2, 3):
            raise ValueError("dimension must be 2 or 3")
        offsets = np.array([_as3(o, d) for o in np.atleast_2d(self.offsets)])
        n = len(offsets)
        if n < 1 or n > MAX_JOINTS:
            raise ValueError(f"chain must have 1..{MAX_JOINTS} joints")
        if d == 2:
            axes = np.tile([0.0, 0.0, 1.0], (n, 1))
            if self.axes is not None and np.size(self.axes):
                given = np.atleast_2d(np.asarray(self.axes, dtype=float))
                if given.shape[1] == 3 and not np.allclose(given, axes):
                    raise ValueError("planar chains rotate about +z only")
        else:
            axes = np.atleast_2d(np.asarray(self.axes, dtype=float))
            if axes.shape != (n, 3):
                raise ValueError(f"axes must have shape ({n}, 3)")
            norms = np.linalg.norm(axes, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-9):
                raise ValueError("joint axes must be unit length")
        lower = np.broadcast_to(np.asarray(self.lower, dtype=float), (n,)).copy()
        upper = np.broadcast_to(np.asarray(self.upper, dtype=float), (n,)).copy()
        if np.any(lower > upper):
            raise ValueError("joint limits need lower <= upper")
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "base", _as3(self.base, d))
        object.__setattr__(self, "tip", _as3(self.tip, d))
        for arr in (offsets, axes, lower, upper, self.base, self.tip):
            arr.flags.writeable = False

    @property
    def n_joints(self) -> int:
        return len(self.offsets)

    def translated(self, shift) -> "ChainModel":
        return ChainModel(
            self.dimension,
            self.offsets,
            self.axes,
            self.lower,
            self.upper,
            base=self.base + _as3(shift, self.dimension),
            tip=self.tip,
        )


def _check_q(chain, q):
    q = np.asarray(q, dtype=float)
    if q.shape[-1] != chain.n_joints:
        raise ValueError(
            f"configuration has {q.shape[-1]} entries, chain has {chain.n_joints} joints"
        )
    return q


def forward_kinematics(chain: ChainModel, q) -> list[Pose]:
    """Poses of every joint frame, root to tip, followed by the tip frame."""
    q = _check_q(chain, q)
    d = chain.dimension
    R = np.eye(3)
    o = chain.base.copy()
    poses = []
    for j in range(chain.n_joints):
        o = o + R @ chain.offsets[j]
        R = R @ rotation_about(chain.axes[j], q[j])
        poses.append(Pose(R[:d, :d].copy(), o[:d].copy()))
    tip = o + R @ chain.tip
    poses.append(Pose(R[:d, :d].copy(), tip[:d].copy()))
    return poses


def batch_frames(chain: ChainModel, Q):
    """Vectorized FK over a batch ``Q`` of shape (B, n).

    Returns rotations (B, n, 3, 3), origins (B, n, 3) and world-frame joint
    axes (B, n, 3).
    """
    Q = np.atleast_2d(_check_q(chain, Q))
    B, n = Q.shape
    R = np.broadcast_to(np.eye(3), (B, 3, 3)).copy()
    o = np.broadcast_to(chain.base, (B, 3)).copy()
    Rs = np.empty((B, n, 3, 3))
    os = np.empty((B, n, 3))
    axs = np.empty((B, n, 3))
    eye = np.eye(3)
    for j in range(n):
        o = o + R @ chain.offsets[j]
        a = chain.axes[j]
        axs[:, j] = R @ a
        K = _skew(a)
        s = np.sin(Q[:, j])[:, None, None]
        c = np.cos(Q[:, j])[:, None, None]
        Rj = eye + s * K + (1.0 - c) * (K @ K)
        R = R @ Rj
        Rs[:, j] = R
        os[:, j] = o
    return Rs, os, axs


def pack_spheres(sensors, chain: ChainModel | None = None):
    """Flatten sphere specs into (link_index, local_offset (m, 3), radius)."""
    sensors = list(sensors)
    links = np.array([s.link_index for s in sensors], dtype=np.int32)
    local = np.zeros((len(sensors), 3))
    for i, s in enumerate(sensors):
        off = np.asarray(s.local_offset, dtype=float).ravel()
        local[i, : off.size] = off
    radius = np.array([s.radius for s in sensors], dtype=float)
    if chain is not None and len(links) and links.max() >= chain.n_joints:
        raise ValueError(
            f"sensor link_index {int(links.max())} out of range for {chain.n_joints} joints"
        )
    return links, local, radius


def batch_centers(chain: ChainModel, Q, links, local, frames=None):
    """Sphere centers (B, m, 3) for a batch of configurations."""
    Rs, os, _ = frames if frames is not None else batch_frames(chain, Q)
    return os[:, links] + np.einsum("bmij,mj->bmi", Rs[:, links], local)


def batch_jacobians(chain: ChainModel, Q, links, local, frames=None):
    """Linear Jacobians (B, m, 3, n) of sphere centers."""
    frames = frames if frames is not None else batch_frames(chain, Q)
    Rs, os, axs = frames
    p = batch_centers(chain, Q, links, local, frames)
    n = chain.n_joints
    lever = p[:, :, None, :] - os[:, None, :, :]  # (B, m, n, 3)
    cols = np.cross(np.broadcast_to(axs[:, None], lever.shape), lever)
    downstream = np.arange(n)[None, :] > links[:, None]  # (m, n)
    cols[:, downstream] = 0.0
    return np.swapaxes(cols, 2, 3)


def sensor_centers(chain: ChainModel, q, sensors) -> np.ndarray:
    q = _check_q(chain, q)
    links, local, _ = pack_spheres(sensors, chain)
    if len(links) == 0:
        return np.zeros((0, chain.dimension))
    return batch_centers(chain, q[None], links, local)[0, :, : chain.dimension]


def linear_jacobian(chain: ChainModel, q, sensor: SensorSpec) -> np.ndarray:
    """d x n matrix of d p_i / d q for one sensor."""
    q = _check_q(chain, q)
    links, local, _ = pack_spheres([sensor], chain)
    J = batch_jacobians(chain, q[None], links, local)[0, 0]
    return J[: chain.dimension]
