"""Discretized rod geometry: staggered layout, rest pose, state and DOF layout.

A rod with ``m`` elements has ``m + 1`` vertices carrying a center and an
isotropic scale, and ``m`` elements carrying a material frame stored at the
element midpoint. Element ``e`` joins vertices ``e`` and ``e + 1``; all
indices are zero-based.
"""

from dataclasses import dataclass, field

import numpy as np

from viper import quaternion as quat

MIN_SCALE = 1e-4
UNIT_TOL = 1e-6


class InvalidInput(ValueError):
    """Raised when an input violates an operation's precondition."""


@dataclass
class MaterialParams:
    """Stiffness and density of a rod material.

    ``stretch`` holds (k_x, k_y, k_z), ``bending`` holds (k_x, k_y).
    """

    stretch: tuple = (1e3, 1e3, 1e5)
    bending: tuple = (0.0, 0.0)
    volume: float = 1e6
    density: float = 1000.0

    def __post_init__(self):
        self.stretch = tuple(float(k) for k in self.stretch)
        self.bending = tuple(float(k) for k in self.bending)
        self.volume = float(self.volume)
        self.density = float(self.density)
        if len(self.stretch) != 3 or len(self.bending) != 2:
            raise InvalidInput("stretch needs 3 stiffnesses and bending 2")
        if min(self.stretch + self.bending + (self.volume,)) < 0.0:
            raise InvalidInput("stiffnesses must be non-negative")
        if not self.density > 0.0:
            raise InvalidInput("density must be positive")


@dataclass
class RodRestPose:
    centers: np.ndarray  # (m+1, 3)
    scales: np.ndarray  # (m+1,)
    radii: np.ndarray  # (m+1,)
    element_lengths: np.ndarray  # (m,)
    frames: np.ndarray  # (m, 4)
    darboux: np.ndarray  # (m-1, 3), interior vertices 1..m-1
    tangent_terms: np.ndarray  # (m,), w̄ᵀ ∇_z c̄ per element
    fiber_ratio: np.ndarray = None  # (m,), activation shortening of the stretch target

    def __post_init__(self):
        if self.fiber_ratio is None:
            self.fiber_ratio = np.ones(len(self.element_lengths))

    @property
    def vertex_count(self):
        return len(self.centers)

    @property
    def element_count(self):
        return len(self.element_lengths)

    @property
    def rest_fiber_lengths(self):
        """Target element lengths of the stretch term (shortened by activation)."""
        return self.element_lengths * self.fiber_ratio

    def validate(self):
        if np.any(self.element_lengths <= 0.0):
            raise InvalidInput("element lengths must be positive")
        if np.any(self.radii <= 0.0):
            raise InvalidInput("rest radii must be positive")
        if np.any(self.scales <= 0.0):
            raise InvalidInput("rest scales must be positive")
        if np.any(np.abs(np.linalg.norm(self.frames, axis=1) - 1.0) > 1e-9):
            raise InvalidInput("rest frames must be unit quaternions")
        if len(self.centers) != len(self.element_lengths) + 1:
            raise InvalidInput("a rod needs m+1 vertices for m elements")

    def midpoint_radii(self):
        return 0.5 * (self.radii[:-1] + self.radii[1:])

    def vertex_lengths(self):
        """Half the summed lengths of the elements incident to each vertex."""
        l = self.element_lengths
        out = np.zeros(len(l) + 1)
        out[:-1] += 0.5 * l
        out[1:] += 0.5 * l
        return out


@dataclass
class RodState:
    centers: np.ndarray
    scales: np.ndarray
    frames: np.ndarray
    velocities: np.ndarray = None
    scale_velocities: np.ndarray = None
    angular_velocities: np.ndarray = None

    def __post_init__(self):
        self.centers = np.array(self.centers, dtype=float)
        self.scales = np.array(self.scales, dtype=float)
        self.frames = np.array(self.frames, dtype=float)
        if self.velocities is None:
            self.velocities = np.zeros_like(self.centers)
        if self.scale_velocities is None:
            self.scale_velocities = np.zeros_like(self.scales)
        if self.angular_velocities is None:
            self.angular_velocities = np.zeros((len(self.frames), 3))

    def copy(self):
        return RodState(
            self.centers.copy(),
            self.scales.copy(),
            self.frames.copy(),
            self.velocities.copy(),
            self.scale_velocities.copy(),
            self.angular_velocities.copy(),
        )

    @classmethod
    def at_rest(cls, rest):
        return cls(rest.centers.copy(), rest.scales.copy(), rest.frames.copy())


def parallel_transport_frames(centers, first_normal=None):
    """Midpoint frames whose third axis follows the polyline tangent."""
    centers = np.asarray(centers, dtype=float)
    tangents = np.diff(centers, axis=0)
    tangents /= np.linalg.norm(tangents, axis=1, keepdims=True)
    t0 = tangents[0]
    if first_normal is None:
        helper = np.array([1.0, 0.0, 0.0]) if abs(t0[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        u = helper - np.dot(helper, t0) * t0
    else:
        u = np.asarray(first_normal, dtype=float) - np.dot(first_normal, t0) * t0
    u /= np.linalg.norm(u)
    mats = np.empty((len(tangents), 3, 3))
    for e, t in enumerate(tangents):
        if e > 0:
            prev = tangents[e - 1]
            axis = np.cross(prev, t)
            s = np.linalg.norm(axis)
            c = np.clip(np.dot(prev, t), -1.0, 1.0)
            if s > 1e-12:
                axis /= s
                ang = np.arctan2(s, c)
                u = quat.rotate(quat.exp(axis * ang), u)
            u = u - np.dot(u, t) * t
            u /= np.linalg.norm(u)
        v = np.cross(t, u)
        mats[e] = np.column_stack([u, v, t])
    return quat.canonicalize_chain(quat.from_matrix(mats))


def make_rest_pose(centers, radii, scales=None, frames=None):
    """Build a rest pose with arc-length parametrization.

    ``radii`` may be a scalar or one value per vertex. Frames default to
    parallel-transported tangent frames.
    """
    centers = np.array(centers, dtype=float)
    if centers.ndim != 2 or centers.shape[1] != 3 or len(centers) < 2:
        raise InvalidInput("rod centers must be an (m+1, 3) array with m >= 1")
    n = len(centers)
    radii = np.broadcast_to(np.asarray(radii, dtype=float), (n,)).copy()
    scales = np.ones(n) if scales is None else np.broadcast_to(np.asarray(scales, dtype=float), (n,)).copy()
    lengths = np.linalg.norm(np.diff(centers, axis=0), axis=1)
    if np.any(lengths <= 0.0):
        raise InvalidInput("coincident consecutive rod vertices")
    if frames is None:
        frames = parallel_transport_frames(centers)
    else:
        frames = quat.canonicalize_chain(quat.normalize(frames))
    tangents = np.diff(centers, axis=0) / lengths[:, None]
    tangent_terms = np.sum(quat.third_axis(frames) * tangents, axis=1)
    darb = darboux(frames[:-1], frames[1:], lengths[:-1], lengths[1:], canonical=True)
    rest = RodRestPose(
        centers=centers,
        scales=scales,
        radii=radii,
        element_lengths=lengths,
        frames=frames,
        darboux=np.asarray(darb).reshape(-1, 3),
        tangent_terms=tangent_terms,
    )
    rest.validate()
    return rest


def straight_rest_pose(length=1.0, elements=20, radius=0.05, origin=(0.0, 0.0, 0.0), direction=(1.0, 0.0, 0.0)):
    d = np.asarray(direction, dtype=float)
    d /= np.linalg.norm(d)
    t = np.linspace(0.0, length, elements + 1)
    centers = np.asarray(origin, dtype=float) + t[:, None] * d
    return make_rest_pose(centers, radius)


def _check_element(rest, j):
    if not 0 <= j < rest.element_count:
        raise InvalidInput(f"element index {j} out of range [0, {rest.element_count})")


def _check_interior(rest, j):
    if not 1 <= j < rest.element_count:
        raise InvalidInput(f"vertex {j} is not interior (valid: 1..{rest.element_count - 1})")


def midpoint_state(state, rest, j):
    _check_element(rest, j)
    c = 0.5 * (state.centers[j] + state.centers[j + 1])
    s = 0.5 * (state.scales[j] + state.scales[j + 1])
    return c, s


def grad_z_center(state, rest, j):
    _check_element(rest, j)
    return (state.centers[j + 1] - state.centers[j]) / rest.element_lengths[j]


def grad_z_scale(state, rest, j):
    _check_element(rest, j)
    return (state.scales[j + 1] - state.scales[j]) / rest.element_lengths[j]


def laplacian_z_scale(state, rest, j):
    """Difference of the two incident first differences at interior vertex ``j``.

    Not divided by a length again; this is the discrete operator used by the
    surface-bending term.
    """
    _check_interior(rest, j)
    s, l = state.scales, rest.element_lengths
    return (s[j + 1] - s[j]) / l[j] - (s[j] - s[j - 1]) / l[j - 1]


def darboux(q_a, q_b, l_a, l_b, canonical=False):
    """Body-frame Darboux vector between two adjacent frames.

    Evaluates ``4 / (l_a + l_b) * Im(conj(q_a) q_b)``. With ``canonical`` the
    second quaternion is first moved to the hemisphere of the first. Batched
    over leading dimensions.
    """
    q_a = np.asarray(q_a, dtype=float)
    q_b = np.asarray(q_b, dtype=float)
    for q in (q_a, q_b):
        if np.any(np.abs(np.linalg.norm(q, axis=-1) - 1.0) > UNIT_TOL):
            raise InvalidInput("darboux expects unit quaternions")
    l_a = np.asarray(l_a, dtype=float)
    l_b = np.asarray(l_b, dtype=float)
    if np.any(l_a <= 0.0) or np.any(l_b <= 0.0):
        raise InvalidInput("element lengths must be positive")
    if canonical:
        q_b = quat.align_hemisphere(q_a, q_b)
    p = quat.mul(quat.conj(q_a), q_b)
    return (4.0 / (l_a + l_b))[..., None] * p[..., :3]


@dataclass
class DofLayout:
    """Global indexing of all rod DOFs plus their lumped inertia weights.

    Vertices and elements of all rods are concatenated; ``vertex_offsets[k]``
    and ``element_offsets[k]`` locate rod ``k``. Trailing vertices past the
    last rod belong to kinematic bodies. Pinned DOFs have infinite weight.
    """

    rests: list
    materials: list
    vertex_offsets: np.ndarray
    element_offsets: np.ndarray
    vertex_counts: np.ndarray
    n_vertices: int
    n_elements: int
    center_weight: np.ndarray = field(repr=False)
    scale_weight: np.ndarray = field(repr=False)
    frame_weight: np.ndarray = field(repr=False)  # (E, 3) body-frame diagonal
    element_vertices: np.ndarray = field(repr=False)  # (E, 2)
    center_pinned: np.ndarray = field(repr=False)
    scale_pinned: np.ndarray = field(repr=False)
    frame_pinned: np.ndarray = field(repr=False)
    density: np.ndarray = field(repr=False, default=None)  # (N,) per vertex
    frame_base: np.ndarray = field(repr=False, default=None)  # (E,) π r⁴ ρ l per element

    @classmethod
    def build(cls, rests, materials, extra_vertices=0):
        """Layout for ``rests`` followed by ``extra_vertices`` kinematic vertices.

        Kinematic vertices start pinned; rod DOFs start free.
        """
        counts = np.array([r.vertex_count for r in rests], dtype=int)
        e_counts = counts - 1
        v_off = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(int) if len(rests) else np.zeros(0, int)
        e_off = np.concatenate([[0], np.cumsum(e_counts)[:-1]]).astype(int) if len(rests) else np.zeros(0, int)
        n_v = int(counts.sum()) + extra_vertices
        n_e = int(e_counts.sum())
        cw = np.full(n_v, np.inf)
        sw = np.full(n_v, np.inf)
        ev = np.zeros((n_e, 2), dtype=int)
        rho = np.ones(n_v)
        fb = np.zeros(n_e)
        for k, (rest, mat) in enumerate(zip(rests, materials)):
            vs = slice(v_off[k], v_off[k] + counts[k])
            lv = rest.vertex_lengths()
            r = rest.radii
            cw[vs] = np.pi * r**2 * mat.density * lv
            sw[vs] = 0.5 * np.pi * r**4 * mat.density * lv
            rho[vs] = mat.density
            fb[e_off[k] : e_off[k] + e_counts[k]] = np.pi * rest.midpoint_radii() ** 4 * mat.density * rest.element_lengths
            idx = np.arange(e_counts[k]) + v_off[k]
            ev[e_off[k] : e_off[k] + e_counts[k]] = np.column_stack([idx, idx + 1])
        center_pinned = np.zeros(n_v, dtype=bool)
        center_pinned[n_v - extra_vertices :] = True
        layout = cls(
            list(rests), list(materials), v_off, e_off, counts, n_v, n_e,
            cw, sw, np.ones((n_e, 3)), ev,
            center_pinned, center_pinned.copy(), np.zeros(n_e, dtype=bool), rho, fb,
        )
        layout.update_frame_weights(np.concatenate([r.scales for r in rests] + [np.ones(extra_vertices)]))
        return layout

    def update_frame_weights(self, scales):
        """Rotational inertia s² ρ 𝓘 l per element, from the current midpoint scales."""
        ev = self.element_vertices
        s_mid = 0.5 * (scales[ev[:, 0]] + scales[ev[:, 1]])
        base = self.frame_base * s_mid**2
        self.frame_weight = np.column_stack([0.25 * base, 0.25 * base, 0.5 * base])

    def inverse_weights(self):
        """A⁻¹ diagonals for centers, scales and frames (zero for pinned DOFs)."""
        inv_c = np.where(self.center_pinned, 0.0, 1.0 / self.center_weight)
        inv_s = np.where(self.scale_pinned, 0.0, 1.0 / self.scale_weight)
        inv_f = np.where(self.frame_pinned[:, None], 0.0, 1.0 / self.frame_weight)
        return inv_c, inv_s, inv_f

    def flat_slots(self, rod):
        """Offsets of each DOF of ``rod`` in the interleaved vector [c0, s0, θ.5, c1, ...].

        Returns ``(center_slots, scale_slots, frame_slots)`` relative to the rod's
        own block; centers and frames occupy 3 consecutive entries.
        """
        n = int(self.vertex_counts[rod])
        base = 7 * np.arange(n)
        return base, base + 3, base[:-1] + 4

    def dof_count(self, rod=None):
        if rod is None:
            return sum(self.dof_count(k) for k in range(len(self.rests)))
        n = int(self.vertex_counts[rod])
        return 4 * n + 3 * (n - 1)

    def rod_vertices(self, rod):
        return self.vertex_offsets[rod] + np.arange(self.vertex_counts[rod])

    def rod_elements(self, rod):
        return self.element_offsets[rod] + np.arange(self.vertex_counts[rod] - 1)
