"""Variational implicit Euler stepping with compliant constraints.

Each step predicts every DOF from its velocity and external loads, then runs
a fixed number of Jacobi sweeps. A sweep evaluates every constraint on the
same snapshot, computes the multiplier increment

    Δλ = β (h² J A⁻¹ Jᵀ + K⁻¹)⁻¹ (W − K⁻¹ λ)

and accumulates ΔX = −h² A⁻¹ Jᵀ Δλ into per-DOF buffers. Each DOF's total is
divided by the number of constraints that moved it before it is applied.
"""

import time
from dataclasses import dataclass, field, replace

import numpy as np

from viper import kernels
from viper import quaternion as quat
from viper.collision import broad_phase, collision_block, contact_normals
from viper.constraints import SCALE_ONLY_KINDS, VOLUME_KINDS, Kind, jacobian
from viper.rod import MIN_SCALE, InvalidInput

SCALE_MODES = ("dynamic", "post_scale")


class SimulationError(RuntimeError):
    """A step produced non-finite values; the message names the constraint."""


@dataclass
class SolverSettings:
    dt: float = 1.0 / 60.0
    iterations: int = 20
    relaxation: float = 0.75
    substeps: int = 1
    gravity: tuple = (0.0, 0.0, -9.81)
    dichotomous_iterations: int = 10
    shape_match_period: int = 2
    scale_mode: str = "dynamic"
    contact_stiffness: float = np.inf
    contact_margin: float = 0.0
    collisions: bool = True
    intra_rod_collisions: bool = False
    record_iterations: bool = False

    def __post_init__(self):
        self.gravity = tuple(float(g) for g in self.gravity)
        if not self.dt > 0.0:
            raise InvalidInput("time step must be positive")
        if self.iterations < 1 or self.substeps < 1:
            raise InvalidInput("iterations and substeps must be at least 1")
        if not 0.0 < self.relaxation <= 1.0:
            raise InvalidInput("relaxation must lie in (0, 1]")
        if self.scale_mode not in SCALE_MODES:
            raise InvalidInput(f"scale_mode must be one of {SCALE_MODES}")
        if self.shape_match_period < 1:
            raise InvalidInput("shape_match_period must be at least 1")


@dataclass
class ExternalLoads:
    """Per-vertex force density (force/volume), per-element torque and per-vertex
    scale load, both per unit length."""

    force_density: np.ndarray = None
    torque: np.ndarray = None
    scale_load: np.ndarray = None

    def validate(self):
        for name in ("force_density", "torque", "scale_load"):
            v = getattr(self, name)
            if v is not None and not np.all(np.isfinite(v)):
                raise InvalidInput(f"external {name} must be finite")


class SweepResult:
    """Per-kind norms of one sweep, ‖W‖₂ and ‖W − K⁻¹λ‖₂, taken on its snapshot."""

    def __init__(self, residual, dual, max_update, skipped):
        self._residual = residual
        self._dual = dual
        self.max_update = max_update
        self.skipped = skipped

    @staticmethod
    def _named(v):
        if isinstance(v, dict):
            return v
        sq, present = v
        return {kernels.KIND_ORDER[k].value: float(np.sqrt(sq[k])) for k in present}

    @property
    def residual(self):
        return self._named(self._residual)

    @property
    def dual(self):
        return self._named(self._dual)


@dataclass
class StepReport:
    step: int
    time: float
    residual: dict
    collisions: int
    skipped: int
    max_penetration: float
    wall_ms: float
    phases: dict = field(default_factory=dict)
    iterations: list = field(default_factory=list)


# --- prediction and velocities ----------------------------------------------


def predict(state, layout, loads=None, h=1.0 / 60.0):
    """Inertial prediction of all DOFs; the input state is not modified.

    Pinned DOFs keep their positions. Frames advance by the body-frame
    increment ``h θ̇`` (plus the torque term) and are renormalized.
    """
    if not h > 0.0:
        raise InvalidInput("time step must be positive")
    loads = loads or ExternalLoads()
    loads.validate()
    out = state.copy()
    h2 = h * h
    dc = h * state.velocities
    if loads.force_density is not None:
        dc = dc + h2 * np.broadcast_to(loads.force_density, dc.shape) / layout.density[:, None]
    out.centers = state.centers + np.where(layout.center_pinned[:, None], 0.0, dc)
    ds = h * state.scale_velocities
    if loads.scale_load is not None:
        ds = ds + h2 * loads.scale_load * _vertex_length(layout) / layout.scale_weight
    out.scales = np.maximum(state.scales + np.where(layout.scale_pinned, 0.0, ds), MIN_SCALE)
    if len(state.frames):
        dth = h * state.angular_velocities
        if loads.torque is not None:
            lengths = np.concatenate([r.element_lengths for r in layout.rests])
            dth = dth + h2 * loads.torque * lengths[:, None] / layout.frame_weight
        dth = np.where(layout.frame_pinned[:, None], 0.0, dth)
        out.frames = quat.normalize(quat.mul(state.frames, quat.exp(dth)))
    return out


def _vertex_length(layout):
    out = np.ones(layout.n_vertices)
    for k, rest in enumerate(layout.rests):
        out[layout.rod_vertices(k)] = rest.vertex_lengths()
    return out


def finalize_velocities(prev, nxt, h):
    """Set velocities of ``nxt`` from the change since ``prev`` and return it."""
    nxt.velocities = (nxt.centers - prev.centers) / h
    nxt.scale_velocities = (nxt.scales - prev.scales) / h
    if len(nxt.frames):
        q = quat.align_hemisphere(prev.frames, nxt.frames)
        nxt.angular_velocities = 2.0 * quat.mul(quat.conj(prev.frames), q)[:, :3] / h
    return nxt


# --- one Jacobi sweep --------------------------------------------------------


def _effective_mass(ev, block, inv_c, inv_s, inv_f):
    d = block.dim
    m = np.zeros((block.count, d, d))
    if block.centers.shape[1]:
        mc = inv_c[block.centers]
        m += np.einsum("ndak,na,neak->nde", ev.d_centers, mc, ev.d_centers)
    if block.scales.shape[1]:
        ms = inv_s[block.scales]
        m += np.einsum("nda,na,nea->nde", ev.d_scales, ms, ev.d_scales)
    if block.frames.shape[1]:
        mf = inv_f[block.frames]
        m += np.einsum("ndak,nak,neak->nde", ev.d_frames, mf, ev.d_frames)
    return m


def _scatter(acc, count, index, values, moved):
    """Add ``values`` (n, a[, 3]) into ``acc`` at ``index`` (n, a) in row order."""
    flat = index.ravel()
    size = len(count)
    if values.ndim == 3:
        v = values.reshape(-1, 3)
        for k in range(3):
            acc[:, k] += np.bincount(flat, weights=v[:, k], minlength=size)
    else:
        acc += np.bincount(flat, weights=values.ravel(), minlength=size)
    count += np.bincount(flat, weights=moved.ravel().astype(float), minlength=size)


def _diagnose(block, ev, dl, row_ok):
    bad = np.nonzero(~np.all(np.isfinite(dl), axis=1) & row_ok)[0]
    if not len(bad):
        bad = np.nonzero(~np.all(np.isfinite(ev.value), axis=1))[0]
    r = int(bad[0]) if len(bad) else 0
    return SimulationError(
        f"non-finite correction in {block.kind.value} constraint row {r} "
        f"(centers {block.centers[r].tolist()}, scales {block.scales[r].tolist()}, "
        f"frames {block.frames[r].tolist()}): residual {ev.value[r].tolist()}"
    )


def correct(state, blocks, inv_weights, h, relaxation):
    """One Jacobi sweep over ``blocks``; updates ``state`` and each block's λ in place.

    ``inv_weights`` is ``(inv_c, inv_s, inv_f)`` as returned by
    :meth:`DofLayout.inverse_weights`. Returns a :class:`SweepResult`.
    """
    inv_c, inv_s, inv_f = inv_weights
    n_v, n_e = len(state.scales), len(state.frames)
    acc_c, cnt_c = np.zeros((n_v, 3)), np.zeros(n_v)
    acc_s, cnt_s = np.zeros(n_v), np.zeros(n_v)
    acc_f, cnt_f = np.zeros((n_e, 3)), np.zeros(n_e)
    h2 = h * h
    residual, dual = {}, {}
    skipped = 0
    for block in blocks:
        if block.count == 0:
            continue
        ev = jacobian(block, state)
        w = ev.value
        stiff = block.stiffness
        live = stiff > 0.0  # rows with zero stiffness carry no potential
        comp = np.where(live, 1.0 / np.where(live, stiff, 1.0), 0.0)
        w = np.where(live, w, 0.0)
        rhs = w - comp * block.lam
        _accumulate_norms(residual, dual, block.kind, w, rhs)
        lhs = h2 * _effective_mass(ev, block, inv_c, inv_s, inv_f)
        d = block.dim
        idx = np.arange(d)
        lhs[:, idx, idx] += comp
        dead = ~live
        lhs = np.where(dead[:, :, None] | dead[:, None, :], 0.0, lhs)
        lhs[:, idx, idx] = np.where(dead, 1.0, lhs[:, idx, idx])
        if d == 1:
            diag = lhs[:, 0, 0]
            row_ok = np.abs(diag) > 1e-300
            dl = (relaxation * rhs[:, 0] / np.where(row_ok, diag, 1.0))[:, None]
        else:
            det = np.linalg.det(lhs)
            scale = np.prod(np.abs(lhs[:, idx, idx]), axis=1)
            row_ok = np.abs(det) > 1e-12 * np.maximum(scale, 1e-300)
            safe = np.where(row_ok[:, None, None], lhs, np.eye(d)[None])
            dl = relaxation * np.linalg.solve(safe, rhs[..., None])[..., 0]
        if not np.all(np.isfinite(dl[row_ok])):
            raise _diagnose(block, ev, dl, row_ok)
        dl = np.where(row_ok[:, None], dl, 0.0)
        skipped += int(np.count_nonzero(~row_ok))
        if block.unilateral:
            new = np.minimum(block.lam + dl, 0.0)
            dl = new - block.lam
        block.lam += dl
        moved = row_ok & np.any(dl != 0.0, axis=1)
        if block.unilateral:
            active = moved | np.any(block.lam != 0.0, axis=1)
        else:
            active = row_ok
        # rows with no stiff component move nothing and are not averaged in
        active = active & np.any(live, axis=1)
        if block.centers.shape[1]:
            mc = inv_c[block.centers]
            dc = -h2 * mc[..., None] * np.einsum("ndak,nd->nak", ev.d_centers, dl)
            _scatter(acc_c, cnt_c, block.centers, dc, active[:, None] & (mc > 0.0))
        if block.scales.shape[1]:
            ms = inv_s[block.scales]
            dsc = -h2 * ms * np.einsum("nda,nd->na", ev.d_scales, dl)
            _scatter(acc_s, cnt_s, block.scales, dsc, active[:, None] & (ms > 0.0))
        if block.frames.shape[1]:
            mf = inv_f[block.frames]
            df = -h2 * mf * np.einsum("ndak,nd->nak", ev.d_frames, dl)
            _scatter(acc_f, cnt_f, block.frames, df, active[:, None] & np.any(mf > 0.0, axis=-1))
    dc = acc_c / np.maximum(cnt_c, 1.0)[:, None]
    ds = acc_s / np.maximum(cnt_s, 1.0)
    df = acc_f / np.maximum(cnt_f, 1.0)[:, None]
    state.centers += dc
    state.scales = np.maximum(state.scales + ds, MIN_SCALE)
    if n_e:
        state.frames = quat.normalize(quat.mul(state.frames, quat.exp(df)))
    max_update = max(
        float(np.abs(dc).max(initial=0.0)), float(np.abs(ds).max(initial=0.0)), float(np.abs(df).max(initial=0.0))
    )
    return SweepResult(residual, dual, max_update, skipped)


def correct_packed(state, packed, inv_weights, h, relaxation):
    """Compiled equivalent of :func:`correct` over pre-packed rows (see :mod:`viper.kernels`)."""
    inv_c, inv_s, inv_f = inv_weights
    norms = np.zeros((kernels.N_KINDS, 2))
    state.scales = np.ascontiguousarray(state.scales)
    skipped, bad, biggest = kernels.sweep(
        packed.kind, packed.centers, packed.scales, packed.frames, packed.stiffness, packed.params,
        packed.unilateral, packed.lam, state.centers, state.scales, state.frames,
        inv_c, inv_s, np.ascontiguousarray(inv_f), h, relaxation, norms,
    )
    if bad >= 0:
        start = 0
        for block in packed.blocks:
            if bad < start + block.count:
                sub = block.take([bad - start])
                raise _diagnose(sub, jacobian(sub, state), np.full((1, sub.dim), np.nan), np.ones(1, bool))
            start += block.count
    present = packed.present
    return SweepResult((norms[:, 0], present), (norms[:, 1], present), float(biggest), int(skipped))


def _accumulate_norms(residual, dual, kind, w, rhs):
    key = kind.value
    residual[key] = float(np.sqrt(residual.get(key, 0.0) ** 2 + np.sum(w * w)))
    dual[key] = float(np.sqrt(dual.get(key, 0.0) ** 2 + np.sum(rhs * rhs)))


# --- warm start and activation ----------------------------------------------


def warm_start_lbs(centers, previous, current, weights):
    """Blend the per-bone motion since the last frame into ``centers``.

    ``previous`` and ``current`` are (B, 4, 4) bone transforms; ``weights`` is
    (n, B) with rows summing to one. Returns the displaced (n, 3) centers.
    """
    weights = np.asarray(weights, dtype=float)
    centers = np.asarray(centers, dtype=float)
    if np.any(np.abs(weights.sum(axis=1) - 1.0) > 1e-6) or np.any(weights < 0.0):
        raise InvalidInput("bone weights must be non-negative and sum to 1 per vertex")
    rel = np.asarray(current, dtype=float) @ np.linalg.inv(np.asarray(previous, dtype=float))
    homo = np.concatenate([centers, np.ones((len(centers), 1))], axis=1)
    moved = np.einsum("bij,nj->bni", rel, homo)[..., :3]  # (B, n, 3)
    return np.einsum("nb,bni->ni", weights, moved)


def apply_activation(rest, activation, factor):
    """Rest pose whose fiber target lengths are shortened by ``activation · factor``.

    Only the stretch target changes; rest scales and the volume reference stay,
    so a free rod bulges to keep its volume.
    """
    if not 0.0 <= activation <= 1.0:
        raise InvalidInput("activation must lie in [0, 1]")
    ratio = 1.0 - activation * factor
    if not ratio > 0.0:
        raise InvalidInput("activation would make fiber lengths non-positive")
    return replace(rest, fiber_ratio=np.full(rest.element_count, ratio))


# --- full step ---------------------------------------------------------------


def active_kinds(settings):
    if settings.scale_mode == "post_scale":
        return lambda kind: kind not in VOLUME_KINDS and kind not in SCALE_ONLY_KINDS
    return lambda kind: True


def step(scene, settings=None):
    """Advance ``scene`` by one frame (``settings.substeps`` solver steps)."""
    settings = settings or scene.settings
    h = settings.dt / settings.substeps
    reports = [_substep(scene, settings, h) for _ in range(settings.substeps)]
    if len(reports) == 1:
        return reports[0]
    last = reports[-1]
    last.wall_ms = sum(r.wall_ms for r in reports)
    last.collisions = sum(r.collisions for r in reports)
    last.skipped = sum(r.skipped for r in reports)
    for r in reports[:-1]:
        for k, v in r.phases.items():
            last.phases[k] += v
    return last


def _substep(scene, settings, h):
    clock = time.perf_counter
    phases = {"predict": 0.0, "broad": 0.0, "narrow": 0.0, "solve": 0.0, "finalize": 0.0}
    t_start = clock()
    layout = scene.layout
    t_new = scene.time + h

    scene.animate(t_new)
    scene.update_activation(t_new)
    prev = scene.state.copy()
    if settings.scale_mode == "post_scale":
        prev.scale_velocities[:] = 0.0
        scene.state.scale_velocities[:] = 0.0
    layout.update_frame_weights(scene.state.scales)
    gravity = np.asarray(settings.gravity)
    loads = scene.loads if scene.loads is not None else ExternalLoads()
    force = layout.density[:, None] * gravity[None, :]
    if loads.force_density is not None:
        force = force + loads.force_density
    pred = predict(scene.state, layout, ExternalLoads(force, loads.torque, loads.scale_load), h)
    if scene.lbs is not None:
        pred.centers = scene.lbs.warm_start(prev.centers, pred.centers, force / layout.density[:, None], h)
    pred.centers[layout.center_pinned] = scene.state.centers[layout.center_pinned]
    scene.state = pred
    t1 = clock()
    phases["predict"] = t1 - t_start

    contacts = collision_block_for(scene, settings, phases) if settings.collisions else None
    t2 = clock()

    keep = active_kinds(settings)
    blocks = [b for b in scene.blocks if keep(b.kind)]
    if contacts is not None:
        blocks.append(contacts)
    for b in blocks:
        b.reset()
    packed = kernels.PackedRows.pack(blocks)
    inv = layout.inverse_weights()
    if settings.scale_mode == "post_scale":
        inv = (inv[0], np.zeros_like(inv[1]), inv[2])
    log = []
    skipped = 0
    for it in range(settings.iterations):
        res = correct_packed(scene.state, packed, inv, h, settings.relaxation)
        skipped += res.skipped
        if settings.record_iterations:
            log.append(res)
        if scene.bundles and (it + 1) % settings.shape_match_period == 0:
            for batch in scene.bundle_batches():
                batch.apply(scene.state, layout)
    if scene.bundles and settings.iterations % settings.shape_match_period != 0:
        for batch in scene.bundle_batches():
            batch.apply(scene.state, layout)
    packed.unpack_multipliers()
    t3 = clock()
    phases["solve"] = t3 - t2

    if settings.scale_mode == "post_scale":
        scene.state.scales = scene.post_scale(scene.state.centers)
    finalize_velocities(prev, scene.state, h)
    norm, low = kernels.residual_rows(packed, scene.state)
    sq = np.bincount(packed.kind, weights=norm**2, minlength=kernels.N_KINDS)
    final = {kernels.KIND_ORDER[k].value: float(np.sqrt(sq[k])) for k in packed.present}
    contact = (packed.kind == kernels.KIND_CODE[Kind.COLLISION]) | (packed.kind == kernels.KIND_CODE[Kind.HALF_PLANE])
    max_pen = float(max(0.0, -low[contact].min(initial=0.0)))
    scene.time = t_new
    scene.step_index += 1
    st = scene.state
    if not all(np.all(np.isfinite(a)) for a in (st.centers, st.scales, st.frames, st.velocities, st.scale_velocities)):
        raise SimulationError(f"non-finite state after step {scene.step_index}")
    phases["finalize"] = clock() - t3
    return StepReport(
        scene.step_index,
        scene.time,
        final,
        0 if contacts is None else contacts.count,
        skipped,
        max_pen,
        1e3 * (clock() - t_start),
        phases,
        log,
    )


def collision_block_for(scene, settings, phases):
    """Detect pill contacts on the predicted state and build their block."""
    clock = time.perf_counter
    t0 = clock()
    pills, ends = scene.pill_set()
    if len(pills) < 2:
        phases["broad"] += clock() - t0
        return None
    pairs = broad_phase(pills, settings.intra_rod_collisions, scene.grid)
    t1 = clock()
    phases["broad"] += t1 - t0
    if not len(pairs):
        scene.contact_cache = {}
        return None
    i, j = pairs[:, 0], pairs[:, 1]
    warm_a = np.full(len(pairs), np.nan)
    warm_b = np.full(len(pairs), np.nan)
    cache = scene.contact_cache
    for n, key in enumerate(zip(i.tolist(), j.tolist())):
        if key in cache:
            warm_a[n], warm_b[n] = cache[key]
    pa = (pills.c1[i], pills.r1[i], pills.c2[i], pills.r2[i])
    pb = (pills.c1[j], pills.r1[j], pills.c2[j], pills.r2[j])
    al, be, gap = kernels.search_pill_pairs(pa, pb, settings.dichotomous_iterations, warm_a, warm_b)
    hit = gap < settings.contact_margin
    scene.contact_cache = {
        (int(a), int(b)): (float(x), float(y)) for a, b, x, y in zip(i[hit], j[hit], al[hit], be[hit])
    }
    phases["narrow"] += clock() - t1
    if not np.any(hit):
        return None
    i, j, al, be = i[hit], j[hit], al[hit], be[hit]
    verts = np.concatenate([ends[i], ends[j]], axis=1)
    radii = scene.rest_radii[verts]
    pa = tuple(v[hit] for v in pa)
    pb = tuple(v[hit] for v in pb)
    normals = contact_normals(pa, pb, al, be)
    return collision_block(verts, radii, al, be, normals, settings.contact_stiffness)
