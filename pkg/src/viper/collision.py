"""Tapered-capsule collision: grid broad phase, point-to-pill projection and
deepest-penetration search, plus the unilateral contact constraint blocks.

A pill is the convex hull of two spheres (c1, r1) and (c2, r2). Its
interpolated sphere at ``t`` in [0, 1] is ``c1 + t (c2 - c1)`` with radius
``r1 + t (r2 - r1)``.
"""

from dataclasses import dataclass

import numpy as np

from viper.constraints import ConstraintBlock, Kind, half_plane_constraint  # noqa: F401
from viper.rod import InvalidInput

ALL_GROUPS = 0xFFFFFFFF


@dataclass
class Pill:
    c1: np.ndarray
    r1: float
    c2: np.ndarray
    r2: float
    owner: int = 0
    element: int = 0
    group: int = 1
    mask: int = ALL_GROUPS
    kinematic: bool = False

    def __post_init__(self):
        self.c1 = np.asarray(self.c1, dtype=float)
        self.c2 = np.asarray(self.c2, dtype=float)
        if not (self.r1 > 0 and self.r2 > 0):
            raise InvalidInput("pill radii must be positive")
        if not (np.all(np.isfinite(self.c1)) and np.all(np.isfinite(self.c2))):
            raise InvalidInput("pill centers must be finite")

    def sphere(self, t):
        return self.c1 + t * (self.c2 - self.c1), self.r1 + t * (self.r2 - self.r1)


@dataclass
class PillSet:
    """Struct-of-arrays view of many pills, used by the vectorized passes."""

    c1: np.ndarray
    r1: np.ndarray
    c2: np.ndarray
    r2: np.ndarray
    owner: np.ndarray
    element: np.ndarray
    group: np.ndarray
    mask: np.ndarray
    kinematic: np.ndarray

    @classmethod
    def from_pills(cls, pills):
        def col(name, dtype=float):
            return np.array([getattr(p, name) for p in pills], dtype=dtype)

        if not pills:
            z3, z = np.zeros((0, 3)), np.zeros(0)
            zi = np.zeros(0, dtype=np.int64)
            return cls(z3, z, z3.copy(), z.copy(), zi, zi.copy(), zi.copy(), zi.copy(), np.zeros(0, bool))
        return cls(
            col("c1").reshape(-1, 3), col("r1"), col("c2").reshape(-1, 3), col("r2"),
            col("owner", np.int64), col("element", np.int64), col("group", np.int64),
            col("mask", np.int64), col("kinematic", bool),
        )

    def __len__(self):
        return len(self.r1)

    def __getitem__(self, i):
        return Pill(
            self.c1[i], float(self.r1[i]), self.c2[i], float(self.r2[i]), int(self.owner[i]),
            int(self.element[i]), int(self.group[i]), int(self.mask[i]), bool(self.kinematic[i]),
        )

    def bounding_spheres(self):
        center = 0.5 * (self.c1 + self.c2)
        radius = 0.5 * np.linalg.norm(self.c2 - self.c1, axis=1) + np.maximum(self.r1, self.r2)
        return center, radius


@dataclass
class ContactData:
    alpha: float
    beta: float
    depth: float
    normal: np.ndarray


# --- point projection --------------------------------------------------------


def project_points(x, c1, r1, c2, r2):
    """Vectorized closest interpolated sphere of pills to points.

    All arguments broadcast over a leading axis. Returns ``(t, d, fallback)``
    where ``d`` is the signed distance to the pill surface and ``fallback``
    marks pills where one end sphere swallows the other, handled as the
    closer of the two end spheres.
    """
    x, c1, c2 = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (x, c1, c2)))
    r1 = np.asarray(r1, dtype=float)
    r2 = np.asarray(r2, dtype=float)
    axis = c1 - c2
    l = np.linalg.norm(axis, axis=-1)
    fallback = np.abs(r1 - r2) >= l
    safe_l = np.where(fallback, 1.0, l)
    j_hat = axis / safe_l[..., None]
    a = np.sum((x - c1) * j_hat, axis=-1)
    radial = np.linalg.norm(x - (c1 + a[..., None] * j_hat), axis=-1)
    sin_t = np.clip((r1 - r2) / safe_l, -1.0, 1.0)
    tan_t = sin_t / np.sqrt(np.maximum(1.0 - sin_t**2, 1e-300))
    t = np.clip(-(a + radial * tan_t) / safe_l, 0.0, 1.0)
    d = np.linalg.norm(x - (c1 + t[..., None] * (c2 - c1)), axis=-1) - (r1 + t * (r2 - r1))
    if np.any(fallback):
        d1 = np.linalg.norm(x - c1, axis=-1) - r1
        d2 = np.linalg.norm(x - c2, axis=-1) - r2
        t = np.where(fallback, np.where(d2 < d1, 1.0, 0.0), t)
        d = np.where(fallback, np.minimum(d1, d2), d)
    return t, d, fallback


def pill_project(x, pill):
    """Closest interpolated sphere of ``pill`` to point ``x``: ``(t, d)``.

    ``d`` is negative inside the pill. Pills whose end spheres nest are
    treated as the closer end sphere; see :func:`project_points`.
    """
    t, d, _ = project_points(np.asarray(x, dtype=float), pill.c1, pill.r1, pill.c2, pill.r2)
    return float(t), float(d)


# --- deepest penetration -----------------------------------------------------


def _gap(alpha, a1, ar1, a2, ar2, b1, br1, b2, br2):
    ca = a1 + alpha[:, None] * (a2 - a1)
    ra = ar1 + alpha * (ar2 - ar1)
    beta, d, _ = project_points(ca, b1, br1, b2, br2)
    return d - ra, beta


def _dichotomous(args, iterations, lo, hi):
    """Shrink [lo, hi] around the minimum of the convex gap along pill a."""
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        delta = 1e-3 * (hi - lo)
        f1, _ = _gap(mid - delta, *args)
        f2, _ = _gap(mid + delta, *args)
        left = f1 <= f2
        hi = np.where(left, mid + delta, hi)
        lo = np.where(left, lo, mid - delta)
    alpha = 0.5 * (lo + hi)
    f, beta = _gap(alpha, *args)
    # The end points are cheap to check and catch minima sitting on the boundary.
    for edge in (0.0, 1.0):
        fe, be = _gap(np.full_like(alpha, edge), *args)
        better = fe < f
        alpha = np.where(better, edge, alpha)
        beta = np.where(better, be, beta)
        f = np.where(better, fe, f)
    return alpha, beta, f


def _bracket(args, warm, width=1.0 / 32.0):
    n = len(args[1])
    lo, hi = np.zeros(n), np.ones(n)
    if warm is None:
        return lo, hi
    warm = np.asarray(warm, dtype=float)
    has = np.isfinite(warm)
    w = np.where(has, warm, 0.5)
    left = np.clip(w - width, 0.0, 1.0)
    right = np.clip(w + width, 0.0, 1.0)
    f0, _ = _gap(w, *args)
    fl, _ = _gap(left, *args)
    fr, _ = _gap(right, *args)
    # By convexity the minimum lies inside [left, right] when the center is lowest.
    inside = has & (f0 <= fl) & (f0 <= fr)
    return np.where(inside, left, lo), np.where(inside, right, hi)


def search_pairs(pa, pb, iterations=10, warm_alpha=None, warm_beta=None):
    """Vectorized deepest-penetration search for pill pairs.

    ``pa`` and ``pb`` are tuples ``(c1, r1, c2, r2)`` of arrays. The search
    runs along each pill of the pair and keeps the lower gap, which makes the
    result symmetric in the argument order. Returns ``(alpha, beta, gap)``.
    """
    args_ab = (*pa, *pb)
    args_ba = (*pb, *pa)
    al, be, f_ab = _dichotomous(args_ab, iterations, *_bracket(args_ab, warm_alpha))
    be2, al2, f_ba = _dichotomous(args_ba, iterations, *_bracket(args_ba, warm_beta))
    use_ba = f_ba < f_ab
    return np.where(use_ba, al2, al), np.where(use_ba, be2, be), np.where(use_ba, f_ba, f_ab)


def _contact_normal(ca, cb, fallback):
    d = ca - cb
    n = np.linalg.norm(d, axis=-1, keepdims=True)
    return np.where(n > 1e-12, d / np.where(n > 1e-12, n, 1.0), fallback)


def _any_perpendicular(u):
    helper = np.where(np.abs(u[..., :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    return np.cross(u, helper)


def _pill_axis_normal(pa, pb):
    """Fallback normal for coincident closest centers: perpendicular to both axes."""
    ua = pa[2] - pa[0]
    n = np.cross(ua, pb[2] - pb[0])
    n = np.where(np.linalg.norm(n, axis=-1, keepdims=True) < 1e-12, _any_perpendicular(ua), n)
    n = np.where(np.linalg.norm(n, axis=-1, keepdims=True) < 1e-12, [[0.0, 0.0, 1.0]], n)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def contact_normals(pa, pb, alpha, beta):
    """Unit normals from pill b's closest sphere to pill a's, per pair."""
    ca = pa[0] + alpha[:, None] * (pa[2] - pa[0])
    cb = pb[0] + beta[:, None] * (pb[2] - pb[0])
    return _contact_normal(ca, cb, _pill_axis_normal(pa, pb))


def deepest_penetration(pill_a, pill_b, iterations=10, warm_alpha=None, warm_beta=None):
    """Deepest inter-penetration of two pills, or ``None`` if they are apart."""
    pa = tuple(np.atleast_1d(np.asarray(v, dtype=float)) for v in (pill_a.c1, pill_a.r1, pill_a.c2, pill_a.r2))
    pb = tuple(np.atleast_1d(np.asarray(v, dtype=float)) for v in (pill_b.c1, pill_b.r1, pill_b.c2, pill_b.r2))
    pa = (pa[0][None], pa[1], pa[2][None], pa[3])
    pb = (pb[0][None], pb[1], pb[2][None], pb[3])
    wa = None if warm_alpha is None else [warm_alpha]
    wb = None if warm_beta is None else [warm_beta]
    al, be, gap = search_pairs(pa, pb, iterations, wa, wb)
    if not gap[0] < 0.0:
        return None
    normal = contact_normals(pa, pb, al, be)[0]
    return ContactData(float(al[0]), float(be[0]), float(-gap[0]), normal)


# --- broad phase -------------------------------------------------------------

_NEIGHBORS = np.array([(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)], dtype=np.int64)
_HASH = np.array([73856093, 19349663, 83492791], dtype=np.int64)


def _cell_keys(cells):
    h = cells * _HASH
    return h[..., 0] ^ h[..., 1] ^ h[..., 2]


class UniformGrid:
    """Cell table over bounding spheres, rebuilt as a sorted key array.

    The cell width is twice the largest bounding radius, padded by 10% so it is
    only recomputed after the largest radius grows past that margin.
    """

    GROWTH = 1.1

    def __init__(self, cell_width=None):
        self.cell_width = cell_width
        self.keys = np.zeros(0, dtype=np.int64)
        self.order = np.zeros(0, dtype=np.int64)
        self.cells = np.zeros((0, 3), dtype=np.int64)

    def build(self, centers, radii):
        max_r = float(np.max(radii)) if len(radii) else 0.0
        if self.cell_width is None or 2.0 * max_r > self.cell_width:
            self.cell_width = max(2.0 * max_r * self.GROWTH, 1e-12)
        self.cells = np.floor(centers / self.cell_width).astype(np.int64)
        keys = _cell_keys(self.cells)
        self.order = np.argsort(keys, kind="stable")
        self.keys = keys[self.order]
        return self

    def neighbor_pairs(self):
        """Candidate pairs (i, j), i < j, with j in one of i's 27 neighbor cells."""
        n = len(self.cells)
        if n < 2:
            return np.zeros((0, 2), dtype=np.int64)
        nb = _cell_keys(self.cells[:, None, :] + _NEIGHBORS[None])  # (n, 27)
        # A hashed key may repeat among the 27 offsets; look each distinct key up once.
        nb = np.sort(nb, axis=1)
        dup = np.zeros_like(nb, dtype=bool)
        dup[:, 1:] = nb[:, 1:] == nb[:, :-1]
        lo = np.searchsorted(self.keys, nb, side="left")
        hi = np.searchsorted(self.keys, nb, side="right")
        counts = np.where(dup, 0, hi - lo).ravel()
        # count -> prefix sum -> fill
        total = int(counts.sum())
        starts = np.repeat(lo.ravel(), counts)
        within = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
        first = np.repeat(np.repeat(np.arange(n), nb.shape[1]), counts)
        second = self.order[starts + within]
        keep = first < second
        # each distinct key is looked up once, so pairs are already unique; sort for a stable order
        code = np.sort(first[keep] * n + second[keep])
        return np.column_stack([code // n, code % n])


def broad_phase(pills, intra_rod=True, grid=None):
    """Candidate colliding pill pairs as an (n, 2) index array.

    Pairs are kept when their bounding spheres overlap. Adjacent elements of
    the same rod and kinematic-kinematic pairs are always dropped; pairs of the
    same owner are dropped unless ``intra_rod``. Group/mask filtering requires
    each pill's group to be in the other's mask.
    """
    ps = pills if isinstance(pills, PillSet) else PillSet.from_pills(list(pills))
    if len(ps) < 2:
        return np.zeros((0, 2), dtype=np.int64)
    centers, radii = ps.bounding_spheres()
    grid = grid or UniformGrid()
    pairs = grid.build(centers, radii).neighbor_pairs()
    if not len(pairs):
        return pairs
    i, j = pairs[:, 0], pairs[:, 1]
    gap = np.linalg.norm(centers[i] - centers[j], axis=1) - radii[i] - radii[j]
    keep = gap <= 0.0
    same = ps.owner[i] == ps.owner[j]
    keep &= ~(same & (np.abs(ps.element[i] - ps.element[j]) <= 1))
    if not intra_rod:
        keep &= ~same
    keep &= ~(ps.kinematic[i] & ps.kinematic[j])
    keep &= ((ps.group[i] & ps.mask[j]) != 0) & ((ps.group[j] & ps.mask[i]) != 0)
    return pairs[keep]


def all_pairs_overlaps(pills):
    """O(n²) reference: every pair whose bounding spheres overlap."""
    ps = pills if isinstance(pills, PillSet) else PillSet.from_pills(list(pills))
    c, r = ps.bounding_spheres()
    d = np.linalg.norm(c[:, None] - c[None], axis=-1) - r[:, None] - r[None]
    i, j = np.nonzero(np.triu(d <= 0.0, k=1))
    return np.column_stack([i, j])


# --- constraint blocks -------------------------------------------------------


def collision_block(vertices, rest_radii, alpha, beta, normals, stiffness=np.inf):
    """Unilateral contact rows.

    ``vertices`` is (n, 4): global indices of pill a's two ends then pill b's.
    ``rest_radii`` is the matching (n, 4) array of rest radii, so that the
    world radius of each end is ``s · r̄``.
    """
    vertices = np.asarray(vertices, dtype=int).reshape(-1, 4)
    n = len(vertices)
    return ConstraintBlock(
        Kind.COLLISION,
        vertices,
        vertices,
        [],
        np.full((n, 1), stiffness),
        {
            "alpha": np.asarray(alpha, dtype=float).reshape(n),
            "beta": np.asarray(beta, dtype=float).reshape(n),
            "rest_radii": np.asarray(rest_radii, dtype=float).reshape(n, 4),
            "normal": np.asarray(normals, dtype=float).reshape(n, 3),
        },
        unilateral=True,
    )


def make_collision_constraint(contact, pill_a, pill_b, vertices=(0, 1, 2, 3), scales=(1.0, 1.0, 1.0, 1.0), stiffness=np.inf):
    """Contact block for one detected pair.

    ``vertices`` are the global indices of (a.c1, a.c2, b.c1, b.c2) and
    ``scales`` their current scales, used to recover the rest radii.
    """
    if contact is None or not contact.depth > 0.0:
        raise InvalidInput("a collision constraint needs a penetrating contact")
    radii = np.array([pill_a.r1, pill_a.r2, pill_b.r1, pill_b.r2]) / np.asarray(scales, dtype=float)
    return collision_block([vertices], [radii], [contact.alpha], [contact.beta], [contact.normal], stiffness)
