"""Runtime scene: rods, kinematic bodies, bundles and schedules on one global DOF layout."""

from dataclasses import dataclass, field

import numpy as np

from viper import quaternion as quat
from viper.bundling import BundleBatch, BundleGroup, validate_groups
from viper.collision import ALL_GROUPS, PillSet, UniformGrid
from viper.constraints import Kind, concatenate, half_plane_constraint, rod_constraints
from viper.rod import DofLayout, InvalidInput, MaterialParams, RodState
from viper.solver import SolverSettings, apply_activation, warm_start_lbs


@dataclass
class RodSpec:
    rest: object
    material: MaterialParams = field(default_factory=MaterialParams)
    initial: RodState = None
    pinned: tuple = ()
    collide: bool = True
    group: int = 1
    mask: int = ALL_GROUPS
    name: str = ""


@dataclass
class KinematicBody:
    """A chain of spheres moved by keyframed rigid transforms.

    ``keyframes`` holds ``(time, translation, quaternion)`` triples; poses are
    interpolated linearly in translation and by slerp in rotation, and held
    constant outside the keyed range.
    """

    points: np.ndarray
    radii: np.ndarray
    keyframes: list = field(default_factory=lambda: [(0.0, np.zeros(3), quat.IDENTITY)])
    group: int = 1
    mask: int = ALL_GROUPS
    name: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.radii = np.broadcast_to(np.asarray(self.radii, dtype=float), (len(self.points),)).copy()
        if np.any(self.radii <= 0.0):
            raise InvalidInput("kinematic radii must be positive")
        self.keyframes = sorted(
            ((float(t), np.asarray(x, dtype=float), quat.normalize(np.asarray(q, dtype=float))) for t, x, q in self.keyframes),
            key=lambda k: k[0],
        )
        if not self.keyframes:
            raise InvalidInput("a kinematic body needs at least one keyframe")

    def pose(self, t):
        keys = self.keyframes
        if t <= keys[0][0]:
            return keys[0][1], keys[0][2]
        if t >= keys[-1][0]:
            return keys[-1][1], keys[-1][2]
        for (ta, xa, qa), (tb, xb, qb) in zip(keys, keys[1:]):
            if ta <= t <= tb:
                u = (t - ta) / (tb - ta)
                rel = quat.log(quat.mul(quat.conj(qa), quat.align_hemisphere(qa, qb)))
                return xa + u * (xb - xa), quat.mul(qa, quat.exp(u * rel))
        return keys[-1][1], keys[-1][2]

    def matrix(self, t):
        x, q = self.pose(t)
        m = np.eye(4)
        m[:3, :3] = quat.to_matrix(q)
        m[:3, 3] = x
        return m

    def world_points(self, t):
        x, q = self.pose(t)
        return quat.rotate(q, self.points) + x


@dataclass
class ActivationSchedule:
    rod: int
    factor: float
    times: np.ndarray
    values: np.ndarray
    elements: np.ndarray = None

    def value(self, t):
        return float(np.interp(t, self.times, self.values))


@dataclass
class LbsRig:
    """Bone weights of rod vertices; bones are kinematic bodies."""

    bones: list
    weights: np.ndarray  # (n_vertices_total, B), zero rows are not warm-started


class Scene:
    def __init__(self, rods, kinematic=(), half_planes=(), bundles=(), activations=(), settings=None, lbs=None, name="scene"):
        self.name = name
        self.settings = settings or SolverSettings()
        self.rods = list(rods)
        self.kinematic = list(kinematic)
        rests = [r.rest for r in self.rods]
        mats = [r.material for r in self.rods]
        n_kin = sum(len(b.points) for b in self.kinematic)
        self.layout = layout = DofLayout.build(rests, mats, extra_vertices=n_kin)
        n_rod_v = layout.n_vertices - n_kin
        self.kinematic_offsets = list(n_rod_v + np.cumsum([0] + [len(b.points) for b in self.kinematic])[:-1])

        states = [r.initial if r.initial is not None else RodState.at_rest(r.rest) for r in self.rods]
        for spec, st in zip(self.rods, states):
            if len(st.centers) != spec.rest.vertex_count or len(st.frames) != spec.rest.element_count:
                raise InvalidInput(f"initial state of rod {spec.name or '?'} does not match its rest pose")
        kin_pts = [b.world_points(0.0) for b in self.kinematic]
        self.state = RodState(
            np.concatenate([s.centers for s in states] + kin_pts + [np.zeros((0, 3))]),
            np.concatenate([s.scales for s in states] + [np.ones(n_kin), np.zeros(0)]),
            np.concatenate([s.frames for s in states] + [np.zeros((0, 4))]),
            np.concatenate([s.velocities for s in states] + [np.zeros((n_kin, 3)), np.zeros((0, 3))]),
            np.concatenate([s.scale_velocities for s in states] + [np.zeros(n_kin), np.zeros(0)]),
            np.concatenate([s.angular_velocities for s in states] + [np.zeros((0, 3))]),
        )
        self.rest_radii = np.concatenate([r.radii for r in rests] + [b.radii for b in self.kinematic] + [np.zeros(0)])
        self.rest_scales = np.concatenate([r.scales for r in rests] + [np.ones(n_kin), np.zeros(0)])
        self.rest_lengths = np.concatenate([r.element_lengths for r in rests] + [np.zeros(0)])
        for k, spec in enumerate(self.rods):
            for v in spec.pinned:
                if not 0 <= v < spec.rest.vertex_count:
                    raise InvalidInput(f"pinned vertex {v} out of range for rod {k}")
                layout.center_pinned[layout.vertex_offsets[k] + v] = True

        per_kind = {}
        self._stretch_rows = {}
        for k, (rest, mat) in enumerate(zip(rests, mats)):
            for b in rod_constraints(rest, mat, layout.vertex_offsets[k], layout.element_offsets[k]):
                rows = per_kind.setdefault(b.kind, [])
                if b.kind is Kind.STRETCH_Z:
                    start = sum(x.count for x in rows)
                    self._stretch_rows[k] = slice(start, start + b.count)
                rows.append(b)
        self.blocks = [concatenate(v) for v in per_kind.values()]
        self.blocks = [b for b in self.blocks if b is not None]
        self.half_planes = [(np.asarray(n, dtype=float), float(o)) for n, o in half_planes]
        rod_vertices = np.arange(n_rod_v)
        for n, o in self.half_planes:
            if len(rod_vertices):
                self.blocks.append(half_plane_constraint(rod_vertices, self.rest_radii[rod_vertices], n / np.linalg.norm(n), o))

        self.bundles = [m if isinstance(m, BundleGroup) else BundleGroup.from_members(layout, m) for m in bundles]
        validate_groups(self.bundles)
        self.activations = list(activations)
        self.lbs = None
        if lbs is not None:
            self.lbs = _LbsRuntime(self, lbs)
        self.loads = None
        self.time = 0.0
        self.step_index = 0
        self.contact_cache = {}
        self.grid = UniformGrid()
        self.skin = None
        self._build_pill_topology()

    # --- per-step hooks used by the solver ---------------------------------

    def animate(self, t):
        for body, off in zip(self.kinematic, self.kinematic_offsets):
            idx = slice(off, off + len(body.points))
            new = body.world_points(t)
            self.state.velocities[idx] = 0.0
            self.state.centers[idx] = new
        if self.lbs is not None:
            self.lbs.advance(t)

    def update_activation(self, t):
        for sched in self.activations:
            rest = self.layout.rests[sched.rod]
            a = sched.value(t)
            new = apply_activation(rest, a, sched.factor)
            if sched.elements is not None:
                ratio = np.ones(rest.element_count)
                ratio[sched.elements] = new.fiber_ratio[sched.elements]
                new.fiber_ratio = ratio
            self.layout.rests[sched.rod] = new
            block = self.block(Kind.STRETCH_Z)
            rows = self._stretch_rows.get(sched.rod)
            if block is not None and rows is not None:
                block.params["target"][rows] = new.tangent_terms * new.fiber_ratio

    def bundle_batches(self):
        key = tuple(id(g) for g in self.bundles)
        if getattr(self, "_batch_key", None) != key:
            self._batches = BundleBatch.build(self.bundles)
            self._batch_key = key
        return self._batches

    def block(self, kind):
        for b in self.blocks:
            if b.kind is kind:
                return b
        return None

    def post_scale(self, centers):
        """Scales restored from element stretch: s̄ · mean over incident elements of √(l̄/l)."""
        ev = self.layout.element_vertices
        s = self.state.scales.copy()
        if not len(ev):
            return s
        l = np.linalg.norm(centers[ev[:, 1]] - centers[ev[:, 0]], axis=1)
        factor = np.sqrt(self.rest_lengths / np.maximum(l, 1e-12))
        n = self.layout.n_vertices
        total = np.bincount(ev.ravel(), weights=np.repeat(factor, 2), minlength=n)
        count = np.bincount(ev.ravel(), minlength=n)
        rod = count > 0
        s[rod] = self.rest_scales[rod] * total[rod] / count[rod]
        return s

    def _build_pill_topology(self):
        ends, owner, elem, group, mask, kin = [], [], [], [], [], []
        for k, spec in enumerate(self.rods):
            if not spec.collide:
                continue
            ev = self.layout.element_vertices[self.layout.rod_elements(k)]
            ends.append(ev)
            m = len(ev)
            owner.append(np.full(m, k))
            elem.append(np.arange(m))
            group.append(np.full(m, spec.group))
            mask.append(np.full(m, spec.mask))
            kin.append(np.zeros(m, bool))
        for b, (body, off) in enumerate(zip(self.kinematic, self.kinematic_offsets)):
            m = len(body.points) - 1
            if m < 1:
                # a single sphere is a pill with coincident ends
                idx = np.array([[off, off]])
                m = 1
            else:
                idx = off + np.column_stack([np.arange(m), np.arange(m) + 1])
            ends.append(idx)
            owner.append(np.full(m, len(self.rods) + b))
            elem.append(np.arange(m))
            group.append(np.full(m, body.group))
            mask.append(np.full(m, body.mask))
            kin.append(np.ones(m, bool))
        cat = lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dt)  # noqa: E731
        self._pill_ends = np.concatenate(ends).astype(int) if ends else np.zeros((0, 2), int)
        self._pill_meta = (cat(owner, np.int64), cat(elem, np.int64), cat(group, np.int64), cat(mask, np.int64), cat(kin, bool))

    def pill_set(self, state=None):
        """Current pills of collidable rods and kinematic bodies, with their end vertices."""
        st = state or self.state
        e = self._pill_ends
        r = st.scales * self.rest_radii
        owner, elem, group, mask, kin = self._pill_meta
        pills = PillSet(st.centers[e[:, 0]], r[e[:, 0]], st.centers[e[:, 1]], r[e[:, 1]], owner, elem, group, mask, kin)
        return pills, e

    # --- summaries ----------------------------------------------------------

    @property
    def rod_vertex_count(self):
        return int(self.layout.vertex_counts.sum()) if len(self.rods) else 0

    def dof_count(self):
        return self.layout.dof_count() if len(self.rods) else 0

    def rod_state(self, k):
        v = self.layout.rod_vertices(k)
        e = self.layout.rod_elements(k)
        st = self.state
        return RodState(
            st.centers[v], st.scales[v], st.frames[e], st.velocities[v], st.scale_velocities[v], st.angular_velocities[e]
        )


class _LbsRuntime:
    def __init__(self, scene, rig):
        self.scene = scene
        self.rig = rig
        self.weights = np.asarray(rig.weights, dtype=float)
        if self.weights.shape != (scene.layout.n_vertices, len(rig.bones)):
            raise InvalidInput("LBS weights must be (vertices, bones)")
        self.active = self.weights.sum(axis=1) > 0.0
        self.current = np.array([scene.kinematic[b].matrix(0.0) for b in rig.bones])
        self.previous = self.current.copy()

    def advance(self, t):
        self.previous = self.current
        self.current = np.array([self.scene.kinematic[b].matrix(t) for b in self.rig.bones])

    def warm_start(self, prev_centers, predicted, accel, h):
        """Predicted centers from the bones' motion plus the load term."""
        out = predicted.copy()
        a = self.active & ~self.scene.layout.center_pinned
        if np.any(a):
            moved = warm_start_lbs(prev_centers[a], self.previous, self.current, self.weights[a])
            out[a] = moved + h * h * accel[a]
        return out
