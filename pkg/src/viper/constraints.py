"""Residuals, stiffness blocks and analytic Jacobians of the rod potentials.

Each potential is written as ``½ Kᵢ ‖Wᵢ(X)‖²`` with a 1- or 3-dimensional
residual ``Wᵢ``. Constraints of one kind are evaluated together as a
:class:`ConstraintBlock`; the stiffness stored per row already carries the
πr² / πr⁴ disc factors and the element-length weight.

Orientation derivatives are taken with respect to a body-frame increment
``θ`` applied as ``Q ← Q ⊗ exp(θ)`` (that is ``R ← R exp([θ]ₓ)``).
"""

import enum
from dataclasses import dataclass, field

import numpy as np

from viper import quaternion as quat
from viper.rod import InvalidInput, _check_element, _check_interior, darboux

# Second moment of area of a unit disc, π r⁴ / 4, used by every r⁴ term.
DISC_MOMENT = 0.25 * np.pi


class Kind(enum.Enum):
    STRETCH_Z = "stretch_z"
    CROSS_SECTION = "cross_section"
    SURFACE_STRETCH = "surface_stretch"
    BEND_TWIST = "bend_twist"
    SURFACE_BENDING = "surface_bending"
    VOLUME_STRETCH = "volume_stretch"
    VOLUME_BEND_U = "volume_bend_u"
    VOLUME_BEND_V = "volume_bend_v"
    COLLISION = "collision"
    HALF_PLANE = "half_plane"
    PIN = "pin"


ELASTIC_KINDS = (
    Kind.STRETCH_Z,
    Kind.CROSS_SECTION,
    Kind.SURFACE_STRETCH,
    Kind.BEND_TWIST,
    Kind.SURFACE_BENDING,
    Kind.VOLUME_STRETCH,
    Kind.VOLUME_BEND_U,
    Kind.VOLUME_BEND_V,
)
VOLUME_KINDS = (Kind.VOLUME_STRETCH, Kind.VOLUME_BEND_U, Kind.VOLUME_BEND_V)
SCALE_ONLY_KINDS = (Kind.CROSS_SECTION, Kind.SURFACE_STRETCH, Kind.SURFACE_BENDING)


def _idx(a, n, k):
    a = np.asarray(a, dtype=int)
    return a.reshape(n, k) if a.size else np.zeros((n, k), dtype=int)


@dataclass
class ConstraintBlock:
    """A batch of ``n`` constraints of the same kind.

    ``centers``, ``scales`` and ``frames`` hold global DOF indices, one row per
    constraint. ``stiffness`` is the diagonal of Kᵢ per row; ``inf`` means a
    rigid constraint. ``lam`` is the accumulated multiplier of the current step.
    """

    kind: Kind
    centers: np.ndarray
    scales: np.ndarray
    frames: np.ndarray
    stiffness: np.ndarray
    params: dict = field(default_factory=dict)
    unilateral: bool = False
    lam: np.ndarray = None

    def __post_init__(self):
        self.stiffness = np.atleast_2d(np.asarray(self.stiffness, dtype=float))
        n = self.stiffness.shape[0]
        self.centers = _idx(self.centers, n, len(self.centers[0]) if n and len(self.centers) else 0)
        self.scales = _idx(self.scales, n, len(self.scales[0]) if n and len(self.scales) else 0)
        self.frames = _idx(self.frames, n, len(self.frames[0]) if n and len(self.frames) else 0)
        if np.any(self.stiffness < 0.0):
            raise InvalidInput("stiffness must be non-negative")
        if self.lam is None:
            self.lam = np.zeros_like(self.stiffness)

    @property
    def count(self):
        return self.stiffness.shape[0]

    @property
    def dim(self):
        return self.stiffness.shape[1]

    @property
    def compliance(self):
        with np.errstate(divide="ignore"):
            return 1.0 / self.stiffness

    def reset(self):
        self.lam[...] = 0.0

    def take(self, rows):
        rows = np.asarray(rows, dtype=int)
        return ConstraintBlock(
            self.kind,
            self.centers[rows],
            self.scales[rows],
            self.frames[rows],
            self.stiffness[rows],
            {k: v[rows] for k, v in self.params.items()},
            self.unilateral,
            self.lam[rows].copy(),
        )


@dataclass
class ResidualEval:
    """Residual rows and their Jacobians for a block.

    ``value`` is (n, d); ``d_centers`` (n, d, nc, 3); ``d_scales`` (n, d, ns);
    ``d_frames`` (n, d, nf, 3).
    """

    value: np.ndarray
    d_centers: np.ndarray
    d_scales: np.ndarray
    d_frames: np.ndarray


def concatenate(blocks):
    """Merge blocks of one kind into a single block."""
    blocks = [b for b in blocks if b.count]
    if not blocks:
        return None
    first = blocks[0]
    return ConstraintBlock(
        first.kind,
        np.concatenate([b.centers for b in blocks]),
        np.concatenate([b.scales for b in blocks]),
        np.concatenate([b.frames for b in blocks]),
        np.concatenate([b.stiffness for b in blocks]),
        {k: np.concatenate([b.params[k] for b in blocks]) for k in first.params},
        first.unilateral,
    )


# --- kernels -----------------------------------------------------------------


def _eye_blocks(n, coef):
    out = np.zeros((n, 3, 3))
    out[:, 0, 0] = out[:, 1, 1] = out[:, 2, 2] = coef
    return out


def _tangent_axis_jacobian(q):
    """∂w/∂θ for the body-frame increment: columns (−v, u, 0)."""
    m = quat.to_matrix(q)
    out = np.zeros_like(m)
    out[..., :, 0] = -m[..., :, 1]
    out[..., :, 1] = m[..., :, 0]
    return m[..., :, 2], out


def _relative_rotation(qa, qb):
    """p = conj(qa) qb with qb on qa's hemisphere, plus ∂Im(p)/∂θ_a and ∂Im(p)/∂θ_b."""
    qb = quat.align_hemisphere(qa, qb)
    p = quat.mul(quat.conj(qa), qb)
    pv, pw = p[:, :3], p[:, 3]
    sk = quat.skew(pv)
    eye = np.eye(3)[None]
    da = 0.5 * (-pw[:, None, None] * eye + sk)
    db = 0.5 * (pw[:, None, None] * eye + sk)
    return pv, da, db


def _stretch_z(block, c, s, q):
    p = block.params
    n = block.count
    i0, i1 = block.centers[:, 0], block.centers[:, 1]
    g = (c[i1] - c[i0]) * p["inv_len"][:, None]
    w, dw = _tangent_axis_jacobian(q[block.frames[:, 0]])
    tgt = p["target"]
    val = g - w * tgt[:, None]
    jc = np.zeros((n, 3, 2, 3))
    jc[:, :, 0, :] = _eye_blocks(n, -p["inv_len"])
    jc[:, :, 1, :] = _eye_blocks(n, p["inv_len"])
    jf = (-tgt[:, None, None] * dw)[:, :, None, :]
    return ResidualEval(val, jc, np.zeros((n, 3, 0)), jf)


def _cross_section(block, c, s, q):
    n = block.count
    sm = 0.5 * (s[block.scales[:, 0]] + s[block.scales[:, 1]])
    val = (sm - block.params["rest_mid"])[:, None]
    js = np.full((n, 1, 2), 0.5)
    return ResidualEval(val, np.zeros((n, 1, 0, 3)), js, np.zeros((n, 1, 0, 3)))


def _surface_stretch(block, c, s, q):
    n = block.count
    il = block.params["inv_len"]
    val = ((s[block.scales[:, 1]] - s[block.scales[:, 0]]) * il - block.params["rest_grad"])[:, None]
    js = np.stack([-il, il], axis=-1)[:, None, :]
    return ResidualEval(val, np.zeros((n, 1, 0, 3)), js, np.zeros((n, 1, 0, 3)))


def _darboux_terms(block, q):
    coef = block.params["coef"]
    pv, da, db = _relative_rotation(q[block.frames[:, 0]], q[block.frames[:, 1]])
    omega = coef[:, None] * pv
    return omega, coef[:, None, None] * da, coef[:, None, None] * db


def _bend_twist(block, c, s, q):
    n = block.count
    sv = s[block.scales[:, 0]]
    omega, da, db = _darboux_terms(block, q)
    val = sv[:, None] * omega - block.params["rest_term"]
    js = omega[:, :, None]
    jf = np.stack([da, db], axis=2) * sv[:, None, None, None]
    return ResidualEval(val, np.zeros((n, 3, 0, 3)), js, jf)


def _surface_bending(block, c, s, q):
    n = block.count
    a, b = block.params["inv_len_a"], block.params["inv_len_b"]
    s0, s1, s2 = (s[block.scales[:, k]] for k in range(3))
    val = ((s2 - s1) * b - (s1 - s0) * a - block.params["rest_lap"])[:, None]
    js = np.stack([a, -a - b, b], axis=-1)[:, None, :]
    return ResidualEval(val, np.zeros((n, 1, 0, 3)), js, np.zeros((n, 1, 0, 3)))


def _volume_stretch(block, c, s, q):
    p = block.params
    n = block.count
    i0, i1 = block.centers[:, 0], block.centers[:, 1]
    il = p["inv_len"]
    g = (c[i1] - c[i0]) * il[:, None]
    sm = 0.5 * (s[block.scales[:, 0]] + s[block.scales[:, 1]])
    w, dw = _tangent_axis_jacobian(q[block.frames[:, 0]])
    tgt = p["target"]
    val = sm[:, None] ** 2 * g - w * tgt[:, None]
    jc = np.zeros((n, 3, 2, 3))
    jc[:, :, 0, :] = _eye_blocks(n, -(sm**2) * il)
    jc[:, :, 1, :] = _eye_blocks(n, sm**2 * il)
    ds = sm[:, None] * g
    js = np.stack([ds, ds], axis=-1)
    jf = (-tgt[:, None, None] * dw)[:, :, None, :]
    return ResidualEval(val, jc, js, jf)


def _volume_bend(block, c, s, q):
    n = block.count
    axis = 0 if block.kind is Kind.VOLUME_BEND_U else 1
    sv = s[block.scales[:, 0]]
    omega, da, db = _darboux_terms(block, q)
    val = (sv**3 * omega[:, axis] - block.params["rest_term"])[:, None]
    js = (3.0 * sv**2 * omega[:, axis])[:, None, None]
    jf = np.stack([da[:, axis, :], db[:, axis, :]], axis=1)[:, None, :, :] * (sv**3)[:, None, None, None]
    return ResidualEval(val, np.zeros((n, 1, 0, 3)), js, jf)


def _collision(block, c, s, q):
    p = block.params
    n = block.count
    al, be = p["alpha"], p["beta"]
    rb = p["rest_radii"]
    ci = block.centers
    si = block.scales
    ca = (1 - al)[:, None] * c[ci[:, 0]] + al[:, None] * c[ci[:, 1]]
    cb = (1 - be)[:, None] * c[ci[:, 2]] + be[:, None] * c[ci[:, 3]]
    ra = (1 - al) * s[si[:, 0]] * rb[:, 0] + al * s[si[:, 1]] * rb[:, 1]
    rbb = (1 - be) * s[si[:, 2]] * rb[:, 2] + be * s[si[:, 3]] * rb[:, 3]
    d = ca - cb
    dist = np.linalg.norm(d, axis=1)
    ok = dist > 1e-12
    nrm = np.where(ok[:, None], d / np.where(ok, dist, 1.0)[:, None], p["normal"])
    val = (dist - ra - rbb)[:, None]
    wts = np.stack([1 - al, al, -(1 - be), -be], axis=1)
    jc = (wts[:, :, None] * nrm[:, None, :])[:, None, :, :]
    js = -(np.abs(wts) * rb)[:, None, :]
    return ResidualEval(val, jc, js, np.zeros((n, 1, 0, 3)))


def _half_plane(block, c, s, q):
    p = block.params
    n = block.count
    v = block.centers[:, 0]
    val = (np.sum(p["normal"] * c[v], axis=1) - p["offset"] - s[block.scales[:, 0]] * p["rest_radius"])[:, None]
    jc = p["normal"][:, None, None, :]
    js = -p["rest_radius"][:, None, None]
    return ResidualEval(val, jc, js, np.zeros((n, 1, 0, 3)))


def _pin(block, c, s, q):
    n = block.count
    val = c[block.centers[:, 0]] - block.params["target"]
    jc = _eye_blocks(n, 1.0)[:, :, None, :]
    return ResidualEval(val, jc, np.zeros((n, 3, 0)), np.zeros((n, 3, 0, 3)))


_KERNELS = {
    Kind.STRETCH_Z: _stretch_z,
    Kind.CROSS_SECTION: _cross_section,
    Kind.SURFACE_STRETCH: _surface_stretch,
    Kind.BEND_TWIST: _bend_twist,
    Kind.SURFACE_BENDING: _surface_bending,
    Kind.VOLUME_STRETCH: _volume_stretch,
    Kind.VOLUME_BEND_U: _volume_bend,
    Kind.VOLUME_BEND_V: _volume_bend,
    Kind.COLLISION: _collision,
    Kind.HALF_PLANE: _half_plane,
    Kind.PIN: _pin,
}


def jacobian(block, state, rest=None):
    """Residuals and analytic Jacobians of every row of ``block`` at ``state``.

    ``state`` is any object with ``centers``, ``scales`` and ``frames`` arrays
    indexed by the block's global DOF indices. ``rest`` is accepted for
    symmetry with the per-element functions; rest data lives in the block.
    """
    return _KERNELS[block.kind](block, state.centers, state.scales, state.frames)


evaluate = jacobian


# --- assembly ----------------------------------------------------------------


def rod_constraints(rest, material, vertex_offset=0, element_offset=0, kinds=ELASTIC_KINDS):
    """Elastic constraint blocks of one rod, skipping kinds with zero stiffness."""
    m = rest.element_count
    l = rest.element_lengths
    il = 1.0 / l
    r_mid = rest.midpoint_radii()
    kx, ky, kz = material.stretch
    kbx, kby = material.bending
    kv = material.volume
    e = np.arange(m)
    ev = np.column_stack([e, e + 1]) + vertex_offset
    ef = (e + element_offset)[:, None]
    s_bar = rest.scales
    s_mid_bar = 0.5 * (s_bar[:-1] + s_bar[1:])
    tau = rest.tangent_terms

    iv = np.arange(1, m)
    la, lb = l[iv - 1], l[iv]
    lv = 0.5 * (la + lb)
    r_v = rest.radii[iv]
    coef = 4.0 / (la + lb)
    vf = np.column_stack([iv - 1, iv]) + element_offset
    vs = (iv + vertex_offset)[:, None]

    out = []

    def add(kind, stiff, centers, scales, frames, **params):
        stiff = np.asarray(stiff, dtype=float)
        if kind not in kinds or not np.any(stiff > 0.0) or len(stiff) == 0:
            return
        out.append(ConstraintBlock(kind, centers, scales, frames, stiff, params))

    a2 = np.pi * r_mid**2 * l
    add(Kind.STRETCH_Z, np.repeat((a2 * kz)[:, None], 3, 1), ev, [], ef, inv_len=il, target=tau * rest.fiber_ratio)
    add(Kind.CROSS_SECTION, (a2 * (kx + ky))[:, None], [], ev, [], inv_len=il, rest_mid=s_mid_bar)
    add(
        Kind.SURFACE_STRETCH,
        (DISC_MOMENT * r_mid**4 * (kx + ky) * l)[:, None],
        [], ev, [],
        inv_len=il, rest_grad=np.diff(s_bar) * il,
    )
    if m >= 2:
        a4 = DISC_MOMENT * r_v**4 * lv
        add(
            Kind.BEND_TWIST,
            np.column_stack([a4 * kz, a4 * kz, a4 * (kx + ky)]),
            [], vs, vf,
            coef=coef, rest_term=s_bar[iv, None] * rest.darboux,
        )
        lap_bar = (s_bar[iv + 1] - s_bar[iv]) / lb - (s_bar[iv] - s_bar[iv - 1]) / la
        add(
            Kind.SURFACE_BENDING,
            (a4 * (kbx + kby))[:, None],
            [], np.column_stack([iv - 1, iv, iv + 1]) + vertex_offset, [],
            inv_len_a=1.0 / la, inv_len_b=1.0 / lb, rest_lap=lap_bar,
        )
    add(
        Kind.VOLUME_STRETCH,
        np.repeat((a2 * kv)[:, None], 3, 1),
        ev, ev, ef,
        inv_len=il, target=s_mid_bar**2 * tau,
    )
    if m >= 2:
        a4v = 0.5 * np.pi * r_v**4 * kv * lv
        for kind, axis in ((Kind.VOLUME_BEND_U, 0), (Kind.VOLUME_BEND_V, 1)):
            add(kind, a4v[:, None], [], vs, vf, coef=coef, rest_term=s_bar[iv] ** 3 * rest.darboux[:, axis])
    return out


def half_plane_constraint(vertices, rest_radii, normal, offset, stiffness=np.inf):
    """Unilateral floor rows keeping spheres (c, s·r̄) on the positive side."""
    normal = np.asarray(normal, dtype=float)
    if abs(np.linalg.norm(normal) - 1.0) > 1e-9:
        raise InvalidInput("half-plane normal must be unit length")
    vertices = np.atleast_1d(np.asarray(vertices, dtype=int))
    n = len(vertices)
    return ConstraintBlock(
        Kind.HALF_PLANE,
        vertices[:, None],
        vertices[:, None],
        [],
        np.full((n, 1), stiffness),
        {
            "normal": np.tile(normal, (n, 1)),
            "offset": np.full(n, float(offset)),
            "rest_radius": np.broadcast_to(np.asarray(rest_radii, dtype=float), (n,)).copy(),
        },
        unilateral=True,
    )


def pin_constraint(vertices, targets, stiffness):
    vertices = np.atleast_1d(np.asarray(vertices, dtype=int))
    n = len(vertices)
    return ConstraintBlock(
        Kind.PIN, vertices[:, None], [], [], np.full((n, 3), float(stiffness)),
        {"target": np.asarray(targets, dtype=float).reshape(n, 3)},
    )


# --- per-element residuals (single-rod, local indices) ------------------------


def _w(q):
    return quat.third_axis(q)


def stretch_z_residual(state, rest, j):
    _check_element(rest, j)
    g = (state.centers[j + 1] - state.centers[j]) / rest.element_lengths[j]
    return g - _w(state.frames[j]) * rest.tangent_terms[j] * rest.fiber_ratio[j]


def cross_section_residual(state, rest, j):
    _check_element(rest, j)
    s_mid = 0.5 * (state.scales[j] + state.scales[j + 1])
    return s_mid - 0.5 * (rest.scales[j] + rest.scales[j + 1])


def surface_stretch_residual(state, rest, j):
    _check_element(rest, j)
    l = rest.element_lengths[j]
    return (state.scales[j + 1] - state.scales[j]) / l - (rest.scales[j + 1] - rest.scales[j]) / l


def _vertex_darboux(state, rest, j):
    l = rest.element_lengths
    return darboux(state.frames[j - 1], state.frames[j], l[j - 1], l[j], canonical=True)


def bend_twist_residual(state, rest, j):
    _check_interior(rest, j)
    return state.scales[j] * _vertex_darboux(state, rest, j) - rest.scales[j] * rest.darboux[j - 1]


def surface_bending_residual(state, rest, j):
    _check_interior(rest, j)
    l = rest.element_lengths

    def lap(s):
        return (s[j + 1] - s[j]) / l[j] - (s[j] - s[j - 1]) / l[j - 1]

    return lap(state.scales) - lap(rest.scales)


def volume_residuals(state, rest, j):
    """(3-vector at element ``j``, u-term, v-term at vertex ``j``).

    The bend terms need an interior vertex; for ``j`` = 0 they are returned as
    ``None``.
    """
    _check_element(rest, j)
    s_mid = 0.5 * (state.scales[j] + state.scales[j + 1])
    sb_mid = 0.5 * (rest.scales[j] + rest.scales[j + 1])
    g = (state.centers[j + 1] - state.centers[j]) / rest.element_lengths[j]
    vec = s_mid**2 * g - sb_mid**2 * _w(state.frames[j]) * rest.tangent_terms[j]
    if j == 0:
        return vec, None, None
    om = _vertex_darboux(state, rest, j)
    s, sb, ob = state.scales[j], rest.scales[j], rest.darboux[j - 1]
    return vec, s**3 * om[0] - sb**3 * ob[0], s**3 * om[1] - sb**3 * ob[1]
