"""Batched unit-quaternion helpers.

Quaternions are stored scalar-last, ``(x, y, z, w)``, in arrays of shape
``(..., 4)``. All functions broadcast over leading dimensions.
"""

import numpy as np

IDENTITY = np.array([0.0, 0.0, 0.0, 1.0])


def conj(q):
    out = np.array(q, dtype=float, copy=True)
    out[..., :3] *= -1.0
    return out


def mul(a, b):
    """Hamilton product ``a * b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    av, aw = a[..., :3], a[..., 3:4]
    bv, bw = b[..., :3], b[..., 3:4]
    vec = aw * bv + bw * av + np.cross(av, bv)
    sca = aw * bw - np.sum(av * bv, axis=-1, keepdims=True)
    return np.concatenate([vec, sca], axis=-1)


def normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def exp(theta):
    """Unit quaternion of the rotation vector ``theta``."""
    theta = np.asarray(theta, dtype=float)
    angle = np.linalg.norm(theta, axis=-1, keepdims=True)
    half = 0.5 * angle
    # sin(x/2)/x -> 1/2 as x -> 0
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(angle > 1e-12, np.sin(half) / np.where(angle > 1e-12, angle, 1.0), 0.5)
    return np.concatenate([k * theta, np.cos(half)], axis=-1)


def log(q):
    """Rotation vector of a unit quaternion (shortest arc)."""
    q = np.asarray(q, dtype=float)
    q = np.where(q[..., 3:4] < 0.0, -q, q)
    v = q[..., :3]
    sin_half = np.linalg.norm(v, axis=-1, keepdims=True)
    angle = 2.0 * np.arctan2(sin_half, q[..., 3:4])
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(sin_half > 1e-12, angle / np.where(sin_half > 1e-12, sin_half, 1.0), 2.0)
    return k * v


def rotate(q, v):
    """Rotate vectors ``v`` by unit quaternions ``q``."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    qv, qw = q[..., :3], q[..., 3:4]
    t = 2.0 * np.cross(qv, v)
    return v + qw * t + np.cross(qv, t)


def to_matrix(q):
    """Rotation matrices ``(..., 3, 3)``; columns are the frame axes u, v, w."""
    q = np.asarray(q, dtype=float)
    x, y, z, w = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - z * w)
    m[..., 0, 2] = 2 * (x * z + y * w)
    m[..., 1, 0] = 2 * (x * y + z * w)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - x * w)
    m[..., 2, 0] = 2 * (x * z - y * w)
    m[..., 2, 1] = 2 * (y * z + x * w)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def third_axis(q):
    """The w (tangent) column of ``to_matrix(q)`` without building the matrix."""
    q = np.asarray(q, dtype=float)
    x, y, z, w = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack([2 * (x * z + y * w), 2 * (y * z - x * w), 1 - 2 * (x * x + y * y)], axis=-1)


def from_matrix(m):
    from scipy.spatial.transform import Rotation

    m = np.asarray(m, dtype=float)
    flat = m.reshape(-1, 3, 3)
    q = Rotation.from_matrix(flat).as_quat()
    return q.reshape(m.shape[:-2] + (4,))


def align_hemisphere(reference, q):
    """Flip ``q`` so that ``dot(reference, q) >= 0`` (same rotation)."""
    q = np.asarray(q, dtype=float)
    d = np.sum(np.asarray(reference) * q, axis=-1, keepdims=True)
    return np.where(d < 0.0, -q, q)


def canonicalize_chain(q):
    """Sign-align a sequence of frames so consecutive dots are non-negative."""
    q = np.array(q, dtype=float, copy=True)
    for i in range(1, len(q)):
        if np.dot(q[i - 1], q[i]) < 0.0:
            q[i] = -q[i]
    return q


def skew(v):
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def random_unit(rng, n=None):
    shape = (4,) if n is None else (n, 4)
    return normalize(rng.normal(size=shape))
