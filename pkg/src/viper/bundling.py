"""Scale-invariant shape matching of rod cross-sections and slice combing."""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from viper import kernels
from viper import quaternion as quat
from viper.rod import InvalidInput


@dataclass
class SimilarityFit:
    rotation: np.ndarray  # (3, 3)
    scale: float
    translation: np.ndarray
    residual: float
    degenerate: bool = False

    def matrix(self):
        t = np.eye(4)
        t[:3, :3] = self.scale * self.rotation
        t[:3, 3] = self.translation
        return t


@dataclass
class BundleGroup:
    """Members are (vertex, element) pairs of global DOF indices with rest transforms."""

    vertices: np.ndarray
    elements: np.ndarray
    rest_centers: np.ndarray
    rest_scales: np.ndarray
    rest_rotations: np.ndarray  # (n, 3, 3)
    rest_frames: np.ndarray = None  # (n, 4), kept to write quaternions back
    allow_scale: bool = True
    warm_rotation: np.ndarray = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=int)
        self.elements = np.asarray(self.elements, dtype=int)
        self.rest_centers = np.asarray(self.rest_centers, dtype=float)
        self.rest_scales = np.asarray(self.rest_scales, dtype=float)
        self.rest_rotations = np.asarray(self.rest_rotations, dtype=float)
        if len(self.rest_centers) < 2:
            raise InvalidInput("a bundle needs at least two members")
        if np.any(self.rest_scales <= 0.0):
            raise InvalidInput("bundle rest scales must be positive")
        if self.rest_frames is None:
            self.rest_frames = quat.from_matrix(self.rest_rotations)

    @property
    def rest_centroid(self):
        return self.rest_centers.mean(axis=0)

    @classmethod
    def from_members(cls, layout, members, allow_scale=True):
        """Group from ``(rod, vertex)`` pairs; each vertex uses its element's frame,
        the last vertex sharing the last element."""
        verts, elems, c, s, q = [], [], [], [], []
        for rod, v in members:
            rest = layout.rests[rod]
            if not 0 <= v < rest.vertex_count:
                raise InvalidInput(f"bundle member vertex {v} out of range for rod {rod}")
            e = min(v, rest.element_count - 1)
            verts.append(layout.vertex_offsets[rod] + v)
            elems.append(layout.element_offsets[rod] + e)
            c.append(rest.centers[v])
            s.append(rest.scales[v])
            q.append(rest.frames[e])
        q = np.array(q)
        return cls(verts, elems, np.array(c), np.array(s), quat.to_matrix(q), q, allow_scale)


def validate_groups(groups):
    seen = set()
    for g in groups:
        vs = set(np.asarray(g.vertices).tolist())
        if vs & seen:
            raise InvalidInput("bundle groups must not share members")
        seen |= vs


def _blocks(scales, rotations, centers):
    """Stack [s R, c − μ] as (n, 3, 4)."""
    return np.concatenate([scales[:, None, None] * rotations, (centers - centers.mean(axis=0))[:, :, None]], axis=2)


def extract_rotation(a, warm=None, tol=1e-9, max_iter=100):
    """Rotation closest to ``a`` by iterating the torque of its columns.

    Each iteration rotates R by ω = Σ rₖ × aₖ / |Σ rₖ · aₖ| until ‖ω‖ < tol.
    """
    q = quat.IDENTITY.copy() if warm is None else quat.from_matrix(warm)
    for _ in range(max_iter):
        r = quat.to_matrix(q)
        num = np.sum(np.cross(r.T, a.T), axis=0)
        den = abs(np.sum(r * a)) + 1e-300
        omega = num / den
        if np.linalg.norm(omega) < tol:
            break
        q = quat.normalize(quat.mul(quat.exp(omega), q))
    return quat.to_matrix(q)


def fit_similarity(group, centers, scales, rotations, allow_scale=None):
    """Similarity T* minimizing Σ ‖T* T̄ᵢ − Tᵢ‖² over the members.

    ``centers``, ``scales`` and ``rotations`` are the current member transforms.
    With ``allow_scale`` False the fit is rigid (s* = 1).
    """
    allow_scale = group.allow_scale if allow_scale is None else allow_scale
    centers = np.asarray(centers, dtype=float)
    scales = np.asarray(scales, dtype=float)
    rotations = np.asarray(rotations, dtype=float)
    cur = _blocks(scales, rotations, centers)
    ref = _blocks(group.rest_scales, group.rest_rotations, group.rest_centers)
    cov = np.einsum("nij,nkj->ik", cur, ref)
    degenerate = np.abs(cov).max() < 1e-14
    if degenerate:
        rot = np.eye(3)
        s = 1.0
    else:
        rot = extract_rotation(cov, group.warm_rotation)
        group.warm_rotation = rot
        rotated = np.einsum("ij,njk->nik", rot, ref)
        s = float(np.sum(cur * rotated) / np.sum(ref * ref)) if allow_scale else 1.0
        if not s > 0.0:
            s, degenerate = 1.0, True
    trans = centers.mean(axis=0) - s * rot @ group.rest_centroid
    err = s * np.einsum("ij,njk->nik", rot, ref) - cur
    return SimilarityFit(rot, s, trans, float(np.sum(err * err)), bool(degenerate))


def apply_shape_match(group, fit):
    """Member transforms T* T̄ᵢ as ``(centers, scales, rotations)``."""
    rot = fit.rotation
    centers = fit.scale * group.rest_centers @ rot.T + fit.translation
    scales = fit.scale * group.rest_scales
    rotations = np.einsum("ij,njk->nik", rot, group.rest_rotations)
    return centers, scales, rotations


def shape_energy(group, centers, scales, rotations, fit):
    c, s, r = apply_shape_match(group, fit)
    t_fit = np.concatenate([s[:, None, None] * r, c[:, :, None]], axis=2)
    t_cur = np.concatenate([np.asarray(scales)[:, None, None] * rotations, np.asarray(centers)[:, :, None]], axis=2)
    return float(np.sum((t_fit - t_cur) ** 2))


def shape_match_state(state, group, layout):
    """Fit ``group`` on ``state`` and write T* T̄ᵢ back, skipping pinned DOFs."""
    v, e = group.vertices, group.elements
    fit = fit_similarity(group, state.centers[v], state.scales[v], quat.to_matrix(state.frames[e]))
    centers, scales, _ = apply_shape_match(group, fit)
    free_c = ~layout.center_pinned[v]
    state.centers[v[free_c]] = centers[free_c]
    free_s = ~layout.scale_pinned[v]
    state.scales[v[free_s]] = scales[free_s]
    free_f = ~layout.frame_pinned[e]
    q = quat.mul(quat.from_matrix(fit.rotation), group.rest_frames)
    state.frames[e[free_f]] = quat.normalize(q[free_f])
    return fit


def extract_rotations(a, warm, tol=1e-9, max_iter=100):
    """Batched :func:`extract_rotation` over ``a`` (G, 3, 3) from quaternions ``warm`` (G, 4).

    Reference for the compiled :func:`viper.kernels.extract_rotations`.
    """
    q = warm.copy()
    active = np.ones(len(a), dtype=bool)
    for _ in range(max_iter):
        r = quat.to_matrix(q[active])
        aa = a[active]
        num = np.sum(np.cross(np.swapaxes(r, 1, 2), np.swapaxes(aa, 1, 2)), axis=1)
        den = np.abs(np.sum(r * aa, axis=(1, 2))) + 1e-300
        omega = num / den[:, None]
        done = np.linalg.norm(omega, axis=1) < tol
        idx = np.nonzero(active)[0]
        step = idx[~done]
        q[step] = quat.normalize(quat.mul(quat.exp(omega[~done]), q[step]))
        active[idx[done]] = False
        if not active.any():
            break
    return q


class BundleBatch:
    """All groups of one member count, fitted and applied together.

    Equivalent to calling :func:`shape_match_state` on each group in turn when
    groups share no elements. Groups at a rod's last two vertices share the
    last element frame; the batch reads every frame from one snapshot, so the
    result does not depend on group order. The batch keeps its own warm-start
    rotations.
    """

    def __init__(self, groups):
        self.groups = list(groups)
        self.vertices = np.array([g.vertices for g in groups])
        self.elements = np.array([g.elements for g in groups])
        self.allow_scale = np.array([g.allow_scale for g in groups])
        self.ref = np.array([_blocks(g.rest_scales, g.rest_rotations, g.rest_centers) for g in groups])
        self.ref_sq = np.sum(self.ref**2, axis=(1, 2, 3))
        self.rest_centers = np.array([g.rest_centers for g in groups])
        self.rest_scales = np.array([g.rest_scales for g in groups])
        self.rest_frames = np.array([g.rest_frames for g in groups])
        self.warm = np.array([quat.IDENTITY if g.warm_rotation is None else quat.from_matrix(g.warm_rotation)
                              for g in groups])

    @staticmethod
    def build(groups):
        sizes = {}
        for g in groups:
            sizes.setdefault(len(g.vertices), []).append(g)
        return [BundleBatch(v) for _, v in sorted(sizes.items())]

    def apply(self, state, layout):
        v, e = self.vertices, self.elements
        c, s = state.centers[v], state.scales[v]
        rot = quat.to_matrix(state.frames[e])
        mu = c.mean(axis=1)
        cur = np.concatenate([s[..., None, None] * rot, (c - mu[:, None])[..., None]], axis=3)
        cov = np.einsum("gnij,gnkj->gik", cur, self.ref)
        degenerate = np.abs(cov).max(axis=(1, 2)) < 1e-14
        q = np.ascontiguousarray(self.warm.copy())
        kernels.extract_rotations(np.ascontiguousarray(cov), q, 1e-9, 100)
        q[degenerate] = quat.IDENTITY
        self.warm = np.where(degenerate[:, None], self.warm, q)
        r_star = quat.to_matrix(q)
        rotated = np.einsum("gij,gnjk->gnik", r_star, self.ref)
        scale = np.sum(cur * rotated, axis=(1, 2, 3)) / self.ref_sq
        scale = np.where(self.allow_scale & ~degenerate & (scale > 0.0), scale, 1.0)
        trans = mu - scale[:, None] * np.einsum("gij,gj->gi", r_star, self.rest_centers.mean(axis=1))
        centers = scale[:, None, None] * np.einsum("gnj,gij->gni", self.rest_centers, r_star) + trans[:, None]
        scales = scale[:, None] * self.rest_scales
        frames = quat.normalize(quat.mul(q[:, None, :], self.rest_frames))
        free_c = ~layout.center_pinned[v]
        state.centers[v[free_c]] = centers[free_c]
        free_s = ~layout.scale_pinned[v]
        state.scales[v[free_s]] = scales[free_s]
        free_f = ~layout.frame_pinned[e]
        state.frames[e[free_f]] = frames[free_f]


# --- combing -----------------------------------------------------------------


@dataclass
class CombResult:
    rods: np.ndarray  # (K, M, 3)
    assignments: list  # per adjacent pair: perm with slice[i+1][perm[k]] following rod k
    total_length: float


def comb(slices):
    """Chain K points per slice into K polylines by sequential optimal matching."""
    slices = [np.asarray(s, dtype=float).reshape(-1, 3) for s in slices]
    if not slices:
        raise InvalidInput("comb needs at least one slice")
    k = len(slices[0])
    if any(len(s) != k for s in slices):
        raise InvalidInput("every slice must contain the same number of points")
    rods = np.empty((k, len(slices), 3))
    rods[:, 0] = slices[0]
    assignments = []
    for i in range(1, len(slices)):
        cost = np.linalg.norm(rods[:, i - 1, None, :] - slices[i][None], axis=-1)
        rows, cols = linear_sum_assignment(cost)
        perm = cols[np.argsort(rows)]
        assignments.append(perm)
        rods[:, i] = slices[i][perm]
    total = float(np.linalg.norm(np.diff(rods, axis=1), axis=-1).sum())
    return CombResult(rods, assignments, total)


def read_slices(text):
    """Parse blank-line separated blocks of ``x y z`` lines."""
    slices, cur = [], []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            if cur:
                slices.append(np.array(cur))
                cur = []
            continue
        parts = line.split()
        if len(parts) != 3:
            raise InvalidInput(f"expected 'x y z', got {line!r}")
        cur.append([float(p) for p in parts])
    if cur:
        slices.append(np.array(cur))
    return slices


def write_slices(slices):
    return "\n\n".join("\n".join(f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in s) for s in slices) + "\n"
