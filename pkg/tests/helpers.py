"""Independent oracles and fixture builders shared by the test modules.

Everything here is deliberately written from scratch against the math,
not by calling the library paths it checks.
"""

import numpy as np

from gsfusion.core import GaussianSet, SemanticGaussian


def inv3x3(m):
    """Explicit cofactor inverse of a 3x3 matrix."""
    a, b, c = m[0]
    d, e, f = m[1]
    g, h, i = m[2]
    det = a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)
    adj = np.array([
        [e * i - f * h, c * h - b * i, b * f - c * e],
        [f * g - d * i, a * i - c * g, c * d - a * f],
        [d * h - e * g, b * g - a * h, a * e - b * d],
    ])
    return adj / det


def rotmat_from_quat(q):
    """Quaternion to rotation matrix, written out independently."""
    w, x, y, z = q
    return np.array([
        [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
    ])


def density_oracle(g: SemanticGaussian, x):
    """Direct density evaluation through an explicit 3x3 inverse."""
    r = rotmat_from_quat(g.rotation)
    cov = r @ np.diag(g.scale**2) @ r.T
    delta = np.asarray(x, dtype=float) - g.mean
    q = delta @ inv3x3(cov) @ delta
    return g.opacity * np.exp(-0.5 * q) * g.semantics


def dense_splat_oracle(gaussians: GaussianSet, geometry):
    """Untruncated brute-force double loop over (voxel, gaussian) pairs."""
    x, y, z = geometry.dims
    out = np.zeros((x, y, z, gaussians.num_classes))
    centers = geometry.voxel_centers()
    singles = gaussians.to_gaussians()
    for ix in range(x):
        for iy in range(y):
            for iz in range(z):
                p = centers[ix, iy, iz]
                for g in singles:
                    out[ix, iy, iz] += density_oracle(g, p)
    return out


def channels_at_points_oracle(gaussians: GaussianSet, points):
    """Untruncated semantic field evaluated at arbitrary (M,3) points."""
    points = np.asarray(points, dtype=float)
    out = np.zeros((points.shape[0], gaussians.num_classes))
    for g in gaussians.to_gaussians():
        for m in range(points.shape[0]):
            out[m] += density_oracle(g, points[m])
    return out


def linear_scan_neighborhood(query_mean, means, rho, max_neighbors=None):
    """Brute-force radius search: indices with ||m_j - q|| <= rho.

    When max_neighbors is given, keeps the nearest ones, ties broken by
    lower index. Returned indices are sorted ascending.
    """
    d = np.linalg.norm(means - np.asarray(query_mean), axis=1)
    idx = np.nonzero(d <= rho)[0]
    if max_neighbors is not None and idx.size > max_neighbors:
        order = np.argsort(d[idx], kind="stable")
        idx = idx[order[:max_neighbors]]
    return np.sort(idx)


def pairwise_feature_oracle(ego: SemanticGaussian, nbr: SemanticGaussian):
    """Element-by-element reassembly of the 45-dim pair feature."""
    f_ego = np.concatenate([ego.mean, ego.scale, ego.rotation,
                            [ego.opacity], ego.semantics])
    cos = abs(float(np.dot(nbr.rotation, ego.rotation)))
    f_rel = np.concatenate([nbr.mean - ego.mean, nbr.scale - ego.scale,
                            [cos, nbr.opacity], nbr.semantics])
    return np.concatenate([f_ego, f_rel])


def jaccard_by_counting(pred_mask, gt_mask):
    """1 - |A n B| / |A u B| via explicit set counting; None if both empty."""
    inter = int(np.sum(pred_mask & gt_mask))
    union = int(np.sum(pred_mask | gt_mask))
    if union == 0:
        return None
    return 1.0 - inter / union


def central_difference(f, x0, eps=1e-6):
    """Dense central finite-difference gradient of a scalar function."""
    x0 = np.asarray(x0, dtype=float)
    grad = np.zeros_like(x0)
    flat = x0.ravel()
    g = grad.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f(x0)
        flat[i] = old - eps
        fm = f(x0)
        flat[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return grad


def rel_err(a, b, floor=1e-10):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.max(np.abs(a - b) / scale)


def random_gaussian(rng, num_classes=13, center_span=4.0, scale_lo=0.2, scale_hi=1.5):
    from gsfusion.core import random_unit_quaternion

    return SemanticGaussian(
        mean=rng.uniform(-center_span, center_span, size=3),
        scale=rng.uniform(scale_lo, scale_hi, size=3),
        rotation=random_unit_quaternion(rng),
        opacity=float(rng.uniform(0.05, 1.0)),
        semantics=rng.uniform(0.0, 1.0, size=num_classes),
    )


def random_gaussian_set(rng, n, num_classes=13, center_span=4.0, scale_lo=0.2, scale_hi=1.5):
    from gsfusion.core import canonicalize_quaternion

    rot = rng.normal(size=(n, 4))
    rot = canonicalize_quaternion(rot) if n else rot
    return GaussianSet(
        means=rng.uniform(-center_span, center_span, size=(n, 3)),
        scales=rng.uniform(scale_lo, scale_hi, size=(n, 3)),
        rotations=rot,
        opacities=rng.uniform(0.05, 1.0, size=n),
        semantics=rng.uniform(0.0, 1.0, size=(n, num_classes)),
    )


def random_rigid_transform(rng, span=5.0):
    from gsfusion.core import RigidTransform, random_unit_quaternion

    return RigidTransform(random_unit_quaternion(rng), rng.uniform(-span, span, size=3))
