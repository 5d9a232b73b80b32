"""Core domain types shared by every module: semantic Gaussian primitives,
rigid transforms, voxel grids, and the quaternion algebra they rely on.

Conventions fixed here and used everywhere else:
  - quaternions are stored (w, x, y, z), unit norm, canonical sign w >= 0
    (ties broken by making the first nonzero component positive);
  - `scale` holds per-axis standard-deviation-like extents, so the
    covariance is R * diag(scale)^2 * R^T;
  - the last semantic channel (index C-1) is the empty class.

All types are immutable values; every operation is pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NUM_CLASSES = 13          # 12 semantic classes + 1 empty class
EMPTY_CLASS = NUM_CLASSES - 1

_QUAT_NORM_TOL = 1e-6
_DEGENERATE_CONDITION = 1e12


class DegenerateGaussianError(ValueError):
    """Covariance too ill-conditioned to evaluate (condition number > 1e12)."""


# ---------------------------------------------------------------------------
# quaternion algebra
# ---------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Scale a quaternion (or batch of them, last axis 4) to unit norm."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise ValueError("cannot normalize a zero quaternion")
    return q / norm


def canonicalize_quaternion(q: np.ndarray) -> np.ndarray:
    """Return the unit quaternion with non-negative scalar part.

    If w is exactly zero the sign is fixed by making the first nonzero of
    (x, y, z) positive, so every rotation has exactly one representative.
    """
    q = quat_normalize(q)
    if q.ndim == 1:
        return q * _canonical_sign(q[None, :])[0]
    return q * _canonical_sign(q)


def _canonical_sign(q: np.ndarray) -> np.ndarray:
    """Per-row sign (+-1, shape (N,1)) that makes each quaternion canonical."""
    n = q.shape[0]
    sign = np.zeros(n)
    undecided = np.ones(n, dtype=bool)
    for comp in range(4):
        col = q[:, comp]
        sign = np.where(undecided & (col > 0), 1.0, sign)
        sign = np.where(undecided & (col < 0), -1.0, sign)
        undecided = undecided & (col == 0)
    # all-zero rows are rejected upstream by quat_normalize
    return sign[:, None]


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a * b; composes rotations so R(a*b) = R(a) R(b)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion.

    Accepts a single (4,) quaternion or a batch (N, 4); rejects inputs whose
    norm deviates from 1 by more than 1e-6. q and -q map to the same matrix.
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1)
    if np.any(np.abs(norm - 1.0) > _QUAT_NORM_TOL):
        raise ValueError("quaternion is not unit norm within 1e-6")
    return _quat_to_rotmat_unchecked(q)


def _quat_to_rotmat_unchecked(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    row0 = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], axis=-1)
    row1 = np.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], axis=-1)
    row2 = np.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def quat_to_rotmat_jacobian(q: np.ndarray) -> np.ndarray:
    """d(rotmat)/d(quaternion components) for the formula in quat_to_rotmat.

    Returns shape (..., 4, 3, 3): entry [p] is dR/dq_p treating the four
    components as free variables (the caller is responsible for chaining
    through any normalization).
    """
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    zero = np.zeros_like(w)

    def m(a, b, c, d, e, f, g, h, i):
        return np.stack(
            [np.stack([a, b, c], axis=-1),
             np.stack([d, e, f], axis=-1),
             np.stack([g, h, i], axis=-1)],
            axis=-2,
        )

    dw = m(zero, -2 * z, 2 * y,
           2 * z, zero, -2 * x,
           -2 * y, 2 * x, zero)
    dx = m(zero, 2 * y, 2 * z,
           2 * y, -4 * x, -2 * w,
           2 * z, 2 * w, -4 * x)
    dy = m(-4 * y, 2 * x, 2 * w,
           2 * x, zero, 2 * z,
           -2 * w, 2 * z, -4 * y)
    dz = m(-4 * z, -2 * w, 2 * x,
           2 * w, -4 * z, 2 * y,
           2 * x, 2 * y, zero)
    return np.stack([dw, dx, dy, dz], axis=-3)


def random_unit_quaternion(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=4)
    while np.linalg.norm(v) < 1e-12:
        v = rng.normal(size=4)
    return canonicalize_quaternion(v)


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SemanticGaussian:
    """One anisotropic semantic Gaussian primitive.

    mean      (3,) meters
    scale     (3,) meters, > 0, per-axis standard-deviation-like extents
    rotation  (4,) unit quaternion (w, x, y, z), canonical sign
    opacity   scalar in [0, 1]
    semantics (C,) non-negative class weights, last channel = empty class

    The constructor canonicalizes the quaternion sign and absorbs norm
    drift up to 1e-6; gross invariant violations raise ValueError.
    """

    mean: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    semantics: np.ndarray

    def __post_init__(self):
        mean = _frozen(self.mean)
        scale = _frozen(self.scale)
        rotation = np.asarray(self.rotation, dtype=np.float64)
        semantics = _frozen(self.semantics)
        if mean.shape != (3,) or scale.shape != (3,) or rotation.shape != (4,):
            raise ValueError("bad field shapes for SemanticGaussian")
        if semantics.ndim != 1:
            raise ValueError("semantics must be a 1-d class-weight vector")
        if not np.all(scale > 0.0):
            raise ValueError("scale components must be strictly positive")
        norm = np.linalg.norm(rotation)
        if abs(norm - 1.0) > _QUAT_NORM_TOL:
            raise ValueError("rotation quaternion is not unit norm within 1e-6")
        op = float(self.opacity)
        if not (0.0 <= op <= 1.0):
            raise ValueError("opacity must lie in [0, 1]")
        if np.any(semantics < 0.0):
            raise ValueError("semantics components must be non-negative")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(scale))
                and np.all(np.isfinite(rotation)) and np.all(np.isfinite(semantics))):
            raise ValueError("non-finite field in SemanticGaussian")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "rotation", _frozen(canonicalize_quaternion(rotation)))
        object.__setattr__(self, "opacity", op)
        object.__setattr__(self, "semantics", semantics)

    @property
    def num_classes(self) -> int:
        return self.semantics.shape[0]


@dataclass
class GaussianSet:
    """Structure-of-arrays batch of semantic Gaussians.

    means (N,3), scales (N,3), rotations (N,4), opacities (N,),
    semantics (N,C). The batch form is what splatting, packaging and
    fusion operate on; convert with from_gaussians / to_gaussians when a
    single primitive is needed.
    """

    means: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    semantics: np.ndarray

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(-1, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 4)
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(-1)
        sem = np.asarray(self.semantics, dtype=np.float64)
        if sem.ndim != 2:
            sem = sem.reshape(len(self.means), -1)
        self.semantics = sem

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def num_classes(self) -> int:
        return self.semantics.shape[1]

    def validate(self) -> None:
        """Raise ValueError unless every row satisfies the type invariants."""
        if not np.all(self.scales > 0.0):
            raise ValueError("scale components must be strictly positive")
        norms = np.linalg.norm(self.rotations, axis=1)
        if np.any(np.abs(norms - 1.0) > _QUAT_NORM_TOL):
            raise ValueError("rotation quaternions must be unit norm within 1e-6")
        if np.any((self.opacities < 0.0) | (self.opacities > 1.0)):
            raise ValueError("opacities must lie in [0, 1]")
        if np.any(self.semantics < 0.0):
            raise ValueError("semantics must be non-negative")
        for a in (self.means, self.scales, self.rotations, self.opacities, self.semantics):
            if not np.all(np.isfinite(a)):
                raise ValueError("non-finite value in GaussianSet")

    def canonicalized(self) -> "GaussianSet":
        """Copy with all rotation quaternions normalized to canonical sign."""
        rot = quat_normalize(self.rotations)
        rot = rot * _canonical_sign(rot)
        return GaussianSet(self.means.copy(), self.scales.copy(), rot,
                           self.opacities.copy(), self.semantics.copy())

    def take(self, idx) -> "GaussianSet":
        return GaussianSet(self.means[idx], self.scales[idx], self.rotations[idx],
                           self.opacities[idx], self.semantics[idx])

    def copy(self) -> "GaussianSet":
        return GaussianSet(self.means.copy(), self.scales.copy(), self.rotations.copy(),
                           self.opacities.copy(), self.semantics.copy())

    @staticmethod
    def empty(num_classes: int = NUM_CLASSES) -> "GaussianSet":
        return GaussianSet(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)),
                           np.zeros(0), np.zeros((0, num_classes)))

    @staticmethod
    def concat(sets: list["GaussianSet"]) -> "GaussianSet":
        sets = [s for s in sets]
        if not sets:
            return GaussianSet.empty()
        return GaussianSet(
            np.concatenate([s.means for s in sets]),
            np.concatenate([s.scales for s in sets]),
            np.concatenate([s.rotations for s in sets]),
            np.concatenate([s.opacities for s in sets]),
            np.concatenate([s.semantics for s in sets]),
        )

    @staticmethod
    def from_gaussians(gaussians: list[SemanticGaussian]) -> "GaussianSet":
        if not gaussians:
            return GaussianSet.empty()
        return GaussianSet(
            np.stack([g.mean for g in gaussians]),
            np.stack([g.scale for g in gaussians]),
            np.stack([g.rotation for g in gaussians]),
            np.array([g.opacity for g in gaussians]),
            np.stack([g.semantics for g in gaussians]),
        )

    def to_gaussians(self) -> list[SemanticGaussian]:
        return [
            SemanticGaussian(self.means[i], self.scales[i], self.rotations[i],
                             float(self.opacities[i]), self.semantics[i])
            for i in range(len(self))
        ]


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) pose: x -> R(rotation_q) x + translation."""

    rotation_q: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.rotation_q, dtype=np.float64)
        t = _frozen(self.translation)
        if q.shape != (4,) or t.shape != (3,):
            raise ValueError("bad field shapes for RigidTransform")
        if abs(np.linalg.norm(q) - 1.0) > _QUAT_NORM_TOL:
            raise ValueError("rotation_q is not unit norm within 1e-6")
        object.__setattr__(self, "rotation_q", _frozen(canonicalize_quaternion(q)))
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_rotmat(self.rotation_q)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one (3,) point or a batch (N,3)."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation_matrix().T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self o other: apply `other` first, then `self`."""
        q = quat_multiply(self.rotation_q, other.rotation_q)
        t = self.apply(other.translation)
        return RigidTransform(quat_normalize(q), t)

    def inverse(self) -> "RigidTransform":
        qinv = quat_conjugate(self.rotation_q)
        rinv = quat_to_rotmat(quat_normalize(qinv))
        return RigidTransform(qinv / np.linalg.norm(qinv), -(rinv @ self.translation))


@dataclass(frozen=True)
class Roi:
    """Axis-aligned box (closed bounds) in the owning agent's frame."""

    center: np.ndarray
    half_extents: np.ndarray

    def __post_init__(self):
        c = _frozen(self.center)
        h = _frozen(self.half_extents)
        if c.shape != (3,) or h.shape != (3,):
            raise ValueError("bad field shapes for Roi")
        if not np.all(h > 0.0):
            raise ValueError("half_extents must be strictly positive")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "half_extents", h)

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Closed-box membership for one point (returns bool) or (N,3) batch."""
        pts = np.asarray(points, dtype=np.float64)
        d = np.abs(pts - self.center)
        inside = np.all(d <= self.half_extents, axis=-1)
        return inside


@dataclass(frozen=True)
class GridGeometry:
    """Placement of a dense voxel grid: corner origin, cube size, counts."""

    origin: np.ndarray
    voxel_size: float
    dims: tuple[int, int, int]
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        o = _frozen(self.origin)
        if o.shape != (3,):
            raise ValueError("origin must be a 3-vector")
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise ValueError("dims must be three positive counts")
        if self.num_classes <= 0:
            raise ValueError("num_classes must be positive")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        object.__setattr__(self, "dims", dims)

    @property
    def num_voxels(self) -> int:
        x, y, z = self.dims
        return x * y * z

    def voxel_centers(self) -> np.ndarray:
        """Centers of every voxel, shape (X, Y, Z, 3)."""
        x, y, z = self.dims
        h = self.voxel_size
        ax = self.origin[0] + (np.arange(x) + 0.5) * h
        ay = self.origin[1] + (np.arange(y) + 0.5) * h
        az = self.origin[2] + (np.arange(z) + 0.5) * h
        gx, gy, gz = np.meshgrid(ax, ay, az, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)

    def point_to_index(self, points: np.ndarray) -> np.ndarray:
        """Integer voxel index of each point (may fall outside the grid)."""
        pts = np.asarray(points, dtype=np.float64)
        return np.floor((pts - self.origin) / self.voxel_size).astype(np.int64)

    def index_inside(self, idx: np.ndarray) -> np.ndarray:
        idx = np.asarray(idx)
        return np.all((idx >= 0) & (idx < np.array(self.dims)), axis=-1)


@dataclass
class VoxelGrid:
    """Dense grid holding either per-class channels or hard labels.

    channels: (X, Y, Z, C) non-negative aggregated evidence, or None.
    labels:   (X, Y, Z) integer class ids in [0, C-1], or None.
    """

    geometry: GridGeometry
    channels: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        x, y, z = self.geometry.dims
        c = self.geometry.num_classes
        if self.channels is not None:
            self.channels = np.asarray(self.channels, dtype=np.float64)
            if self.channels.shape != (x, y, z, c):
                raise ValueError("channel buffer does not match geometry")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape != (x, y, z):
                raise ValueError("label buffer does not match geometry")
            self.labels = self.labels.astype(np.uint8)

    @staticmethod
    def zeros_channels(geometry: GridGeometry) -> "VoxelGrid":
        x, y, z = geometry.dims
        return VoxelGrid(geometry, channels=np.zeros((x, y, z, geometry.num_classes)))

    @staticmethod
    def empty_labels(geometry: GridGeometry) -> "VoxelGrid":
        x, y, z = geometry.dims
        lbl = np.full((x, y, z), geometry.num_classes - 1, dtype=np.uint8)
        return VoxelGrid(geometry, labels=lbl)


# ---------------------------------------------------------------------------
# Gaussian evaluation
# ---------------------------------------------------------------------------

def covariance(g: SemanticGaussian) -> np.ndarray:
    """3x3 covariance R diag(scale)^2 R^T; eigenvalues are scale**2."""
    r = quat_to_rotmat(g.rotation)
    return (r * g.scale**2) @ r.T


def _check_conditioning(scale: np.ndarray) -> None:
    smax = float(np.max(scale))
    smin = float(np.min(scale))
    if smin <= 0.0 or (smax / smin) ** 2 > _DEGENERATE_CONDITION:
        raise DegenerateGaussianError(
            f"covariance condition number {(smax / max(smin, 1e-300))**2:.3e} exceeds 1e12"
        )


def density(g: SemanticGaussian, x: np.ndarray) -> np.ndarray:
    """Semantic contribution of one Gaussian at a point.

    Returns opacity * exp(-0.5 * mahalanobis^2) * semantics as a C-vector.
    The covariance solve goes through a Cholesky factor with a 1e-12
    diagonal jitter fallback; near-singular covariances (condition number
    above 1e12) raise DegenerateGaussianError.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (3,):
        raise ValueError("x must be a 3-vector")
    _check_conditioning(g.scale)
    cov = covariance(g)
    delta = x - g.mean
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        chol = np.linalg.cholesky(cov + 1e-12 * np.eye(3))
    y = np.linalg.solve(chol, delta)
    q = float(y @ y)
    return g.opacity * np.exp(-0.5 * q) * g.semantics


def mahalanobis_sq(means: np.ndarray, scales: np.ndarray, rotations: np.ndarray,
                   points: np.ndarray) -> np.ndarray:
    """Squared Mahalanobis distance of (M,3) points under (N,...) Gaussians.

    Broadcast form used by the splatting inner loop: returns (N, M) when
    given batch Gaussians, (M,) for a single one.
    """
    single = rotations.ndim == 1
    means = np.atleast_2d(means)
    scales = np.atleast_2d(scales)
    rots = _quat_to_rotmat_unchecked(np.atleast_2d(rotations))
    pts = np.atleast_2d(points)
    delta = pts[None, :, :] - means[:, None, :]          # (N, M, 3)
    local = np.einsum("nmk,nkj->nmj", delta, rots)       # R^T delta per gaussian
    q = np.sum((local / scales[:, None, :]) ** 2, axis=-1)
    return q[0] if single else q
