"""End-to-end acceptance checks, one test per property.

Each test records a one-line summary through ``record_property("detail", ...)``
before asserting; ``conftest.py`` prints a PASS/FAIL line per test at the end
of the session.
"""

import copy
import itertools
import time

import numpy as np
import pytest

from viper import kernels, scenarios
from viper import quaternion as quat
from viper.bundling import BundleGroup, apply_shape_match, comb, fit_similarity, shape_energy
from viper.cli import bench_scene, main
from viper.collision import Pill, PillSet, broad_phase, collision_block, project_points, search_pairs
from viper.constraints import ELASTIC_KINDS, Kind, half_plane_constraint, jacobian, pin_constraint, rod_constraints
from viper.metrics import relative_violations, rod_volumes
from viper.rod import DofLayout, MaterialParams, make_rest_pose
from viper.scenefile import build
from viper.solver import correct, step

from conftest import helix_centers, perturbed_state
from fdcheck import numeric_jacobian_global, relative_error

ALL_STIFF = MaterialParams(stretch=(1e3, 2e3, 1e5), bending=(10.0, 20.0), volume=1e6)


def _documents():
    out = []
    for name in scenarios.BUILTINS:
        d = scenarios.builtin(name)
        out += list(d.items()) if scenarios.is_paired(d) else [(name, d)]
    return out


def _contact_rows():
    col = collision_block([[0, 1, 2, 3]], [[0.05, 0.06, 0.04, 0.05]], [0.3], [0.6], [[0.0, 0.0, 1.0]])
    hp = half_plane_constraint([1, 2], [0.05, 0.05], [0.0, 0.6, 0.8], 0.1)
    pin = pin_constraint([0], [[0.1, 0.2, 0.3]], 1e4)
    return [col, hp, pin]


def test_jacobians_match_central_differences(record_property):
    rest = make_rest_pose(helix_centers(n=6), np.linspace(0.05, 0.08, 6), scales=np.linspace(0.9, 1.2, 6))
    blocks = rod_constraints(rest, ALL_STIFF) + _contact_rows()
    assert {b.kind for b in blocks} == set(ELASTIC_KINDS) | {Kind.COLLISION, Kind.HALF_PLANE, Kind.PIN}
    rng = np.random.default_rng(7)
    worst = {b.kind.value: 0.0 for b in blocks}
    start = time.perf_counter()
    for _ in range(100):
        state = perturbed_state(rest, rng)
        for block in blocks:
            ev = jacobian(block, state)
            for a, n in zip((ev.d_centers, ev.d_scales, ev.d_frames), numeric_jacobian_global(block, state)):
                worst[block.kind.value] = max(worst[block.kind.value], relative_error(a, n))
    elapsed = time.perf_counter() - start
    top = max(worst, key=worst.get)
    record_property("detail", f"{len(worst)} kinds x 100 states, worst rel err {worst[top]:.1e} ({top}), {elapsed:.1f} s")
    assert max(worst.values()) < 1e-5 and elapsed < 10.0


def _at_rest(doc):
    doc = copy.deepcopy(doc)
    doc["gravity"] = [0.0, 0.0, 0.0]
    doc.pop("activations", None)
    for rod in doc["rods"]:
        rod.pop("initial", None)
    return doc


def _drift(state, ref):
    turn = quat.log(quat.mul(quat.conj(ref.frames), state.frames))
    return max(np.abs(state.centers - ref.centers).max(), np.abs(state.scales - ref.scales).max(),
               np.abs(turn).max(initial=0.0))


def test_rest_scenes_do_not_drift(record_property):
    worst = {}
    for label, doc in _documents():
        sc = build(_at_rest(doc)).scene
        ref = sc.state.copy()
        for _ in range(1000):
            step(sc)
        worst[label] = _drift(sc.state, ref)
    top = max(worst, key=worst.get)
    record_property("detail", f"{len(worst)} scenes x 1000 steps, max drift {worst[top]:.1e} ({top})")
    assert max(worst.values()) < 1e-6


def test_stretched_rod_becomes_incompressible(record_property):
    start = time.perf_counter()
    sc = build(scenarios.stretch()).scene
    # every interior element is held at twice its rest length
    target = 1.0 / np.sqrt(2.0)
    for _ in range(30):
        step(sc)
    err = np.abs(sc.state.scales[1:-1] - target).max()
    elapsed = time.perf_counter() - start
    record_property("detail", f"interior s within {err:.2e} of 1/sqrt(2) after 30 steps, {elapsed:.1f} s")
    assert err < 0.02 and elapsed < 5.0


def _volume_run(doc, steps):
    sc = build(doc).scene
    vol, stretch = [], []
    for _ in range(steps):
        step(sc)
        cur, rest = rod_volumes(sc)
        vol.append(abs(cur - rest) / rest)
        stretch.append(relative_violations(sc)["stretch_z"])
    return np.array(vol), np.array(stretch)


def test_volume_is_kept_under_dynamics(record_property):
    # step 0 holds the imposed stretch itself, so the record starts after the first step
    s_vol, s_stretch = _volume_run(scenarios.stretch(), 300)
    w_vol, _ = _volume_run(scenarios.dynamic_wave(), 600)
    ratio = s_stretch.max() / s_vol.max()
    record_property("detail", f"max volume error stretch {s_vol.max():.2e}, wave {w_vol.max():.2e}; "
                              f"stretch violation {ratio:.0f}x volume error")
    assert s_vol.max() < 0.02 and w_vol.max() < 0.02 and ratio > 10.0


def test_residual_converges_linearly(record_property):
    sc = build(scenarios.stretch()).scene
    report = step(sc)
    k = np.arange(1, len(report.iterations) + 1)
    r = np.array([it.residual["volume_stretch"] for it in report.iterations])
    sel = (k >= 10) & (k <= 200)
    slope = -np.polyfit(np.log(k[sel]), np.log(r[sel]), 1)[0]
    record_property("detail", f"log-log slope {slope:.3f} over iterations 10-200")
    assert 0.7 <= slope <= 1.3


def _sampled_distance(x, c1, r1, c2, r2, samples=100_000):
    """Minimum over γ of ‖x − c(γ)‖ − r(γ) on a dense γ grid, for each point in ``x``."""
    g = np.linspace(0.0, 1.0, samples)
    c = c1 + g[:, None] * (c2 - c1)
    r = r1 + g * (r2 - r1)
    best = np.full(len(x), np.inf)
    for chunk in np.array_split(np.arange(samples), 10):
        d = np.linalg.norm(x[:, None] - c[chunk][None], axis=-1) - r[chunk][None]
        best = np.minimum(best, d.min(axis=1))
    return best


def test_pill_projection_matches_dense_sampling(record_property):
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(1000):
        c1 = rng.uniform(-1.0, 1.0, 3)
        axis = rng.normal(size=3)
        c2 = c1 + rng.uniform(0.5, 1.5) * axis / np.linalg.norm(axis)
        r1, r2 = rng.uniform(0.1, 0.5, 2)
        x = 0.5 * (c1 + c2) + rng.uniform(-1.5, 1.5, (10, 3))
        _, d, fallback = project_points(x, c1, r1, c2, r2)
        assert not fallback.any()
        worst = max(worst, np.abs(d - _sampled_distance(x, c1, r1, c2, r2)).max())
    record_property("detail", f"10^4 queries, max |dd| {worst:.1e}")
    assert worst < 1e-4


def _grid_gap(a, b, n=1000):
    """Minimum pill-pair gap over an n×n (α, β) grid."""
    t = np.linspace(0.0, 1.0, n)
    ca, ra = a.c1 + t[:, None] * (a.c2 - a.c1), a.r1 + t * (a.r2 - a.r1)
    cb, rb = b.c1 + t[:, None] * (b.c2 - b.c1), b.r1 + t * (b.r2 - b.r1)
    best = np.inf
    for i in range(0, n, 200):
        d = np.linalg.norm(ca[i : i + 200, None] - cb[None], axis=-1) - ra[i : i + 200, None] - rb[None]
        best = min(best, d.min())
    return best


def _random_pill(rng):
    c1 = rng.uniform(-0.3, 0.3, 3)
    return Pill(c1, rng.uniform(0.05, 0.5), c1 + rng.normal(size=3), rng.uniform(0.05, 0.5))


def test_deepest_penetration_matches_brute_force_grid(record_property):
    rng = np.random.default_rng(13)
    pills = [(_random_pill(rng), _random_pill(rng)) for _ in range(1000)]
    as_arrays = [tuple(np.array([getattr(p[k], f) for p in pills]) for f in ("c1", "r1", "c2", "r2")) for k in (0, 1)]
    _, _, gap_numpy = search_pairs(*as_arrays, iterations=10)
    _, _, gap_compiled = kernels.search_pill_pairs(*as_arrays, iterations=10)
    ref = np.array([_grid_gap(a, b) for a, b in pills])
    depth = lambda g: np.maximum(-g, 0.0)  # noqa: E731
    err = max(np.abs(depth(gap_numpy) - depth(ref)).max(), np.abs(depth(gap_compiled) - depth(ref)).max())
    record_property("detail", f"1000 pairs ({np.count_nonzero(ref < 0)} penetrating), max depth error {err:.1e}")
    assert err < 1e-3


def _overlapping_pairs(ps):
    c, r = ps.bounding_spheres()
    i, j = np.triu_indices(len(c), k=1)
    hit = np.linalg.norm(c[i] - c[j], axis=1) <= r[i] + r[j]
    return set(zip(i[hit].tolist(), j[hit].tolist()))


def test_broad_phase_misses_no_overlap(record_property):
    misses = found = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        starts = rng.uniform(-2.0, 2.0, (200, 3))
        ends = starts + rng.normal(scale=0.3, size=(200, 3))
        radii = rng.uniform(0.01, 0.2, (200, 2))
        ps = PillSet.from_pills([Pill(s, ra, e, rb, owner=k) for k, (s, e, (ra, rb)) in enumerate(zip(starts, ends, radii))])
        ref = _overlapping_pairs(ps)
        got = {tuple(p) for p in broad_phase(ps).tolist()}
        misses += len(ref - got)
        found += len(ref)
    record_property("detail", f"100 seeds x 200 pills, {found} overlaps, {misses} missed")
    assert misses == 0


def _random_group(rng, n):
    return BundleGroup(np.arange(n), np.arange(n), rng.normal(size=(n, 3)), rng.uniform(0.5, 1.5, n),
                       quat.to_matrix(quat.random_unit(rng, n)))


def test_shape_matching_recovers_and_separates_scale(record_property):
    rng = np.random.default_rng(17)
    param_err = energy = after = 0.0
    separated = True
    for _ in range(100):
        g = _random_group(rng, int(rng.integers(2, 8)))
        rot, sigma, shift = quat.to_matrix(quat.random_unit(rng)), rng.uniform(0.5, 2.0), rng.normal(size=3)
        c = sigma * g.rest_centers @ rot.T + shift
        s = sigma * g.rest_scales
        r = np.einsum("ij,njk->nik", rot, g.rest_rotations)
        fit = fit_similarity(g, c, s, r)
        energy = max(energy, shape_energy(g, c, s, r, fit))
        param_err = max(param_err, np.abs(fit.rotation - rot).max(), abs(fit.scale - sigma),
                        np.abs(fit.translation - shift).max())
        # any pose, once matched, carries no shape energy
        g.warm_rotation = None
        noisy = (c + 0.1 * rng.normal(size=c.shape), s * rng.uniform(0.8, 1.2, len(s)),
                 quat.to_matrix(quat.random_unit(rng, len(s))))
        fit = fit_similarity(g, *noisy)
        after = max(after, shape_energy(g, *apply_shape_match(g, fit), fit))
        # a uniform scaling is free for the similarity fit but costs the rigid fit its full amount
        g.warm_rotation = None
        uc, us, ur = sigma * g.rest_centers, sigma * g.rest_scales, g.rest_rotations
        mu = g.rest_centers.mean(axis=0)
        ref = np.concatenate([g.rest_scales[:, None, None] * ur, (g.rest_centers - mu)[:, :, None]], axis=2)
        scaled = fit_similarity(g, uc, us, ur)
        rigid = fit_similarity(g, uc, us, ur, allow_scale=False)
        separated &= scaled.residual < 1e-12 and rigid.residual >= (sigma - 1) ** 2 * np.sum(ref**2) - 1e-9
    record_property("detail", f"100 groups: E {energy:.1e}, params {param_err:.1e}, post-apply E {after:.1e}, "
                              f"scale separation {'holds' if separated else 'fails'}")
    assert energy < 1e-12 and param_err < 1e-6 and after == 0.0 and separated


def test_combing_matches_factorial_search(record_property):
    rng = np.random.default_rng(19)
    worst = 0.0
    for _ in range(100):
        k = int(rng.integers(1, 7))
        slices = rng.normal(size=(int(rng.integers(2, 6)), k, 3))
        res = comb(slices)
        for i, perm in enumerate(res.assignments):
            cost = np.linalg.norm(res.rods[:, i][:, None] - slices[i + 1][None], axis=-1)
            best = min(cost[np.arange(k), list(p)].sum() for p in itertools.permutations(range(k)))
            worst = max(worst, cost[np.arange(k), perm].sum() - best)
    record_property("detail", f"100 instances with K <= 6, max excess cost {worst:.1e}")
    assert worst < 1e-12


def _pbd_projection(block, state, inv):
    """Classic PBD step for one rigid row: ΔX = −A⁻¹Jᵀ(J A⁻¹ Jᵀ)⁻¹ C."""
    ev = jacobian(block, state)
    inv_c, inv_s, inv_f = inv
    parts = []
    if block.centers.shape[1]:
        parts.append((ev.d_centers[0].reshape(block.dim, -1), np.repeat(inv_c[block.centers[0]], 3)))
    if block.scales.shape[1]:
        parts.append((ev.d_scales[0], inv_s[block.scales[0]]))
    if block.frames.shape[1]:
        parts.append((ev.d_frames[0].reshape(block.dim, -1), inv_f[block.frames[0]].ravel()))
    j = np.concatenate([p[0] for p in parts], axis=1)
    w = np.concatenate([p[1] for p in parts])
    dx = -w * (j.T @ np.linalg.solve((j * w) @ j.T, ev.value[0]))
    out, at = {}, 0
    for name, idx, width in (("centers", block.centers[0], 3), ("scales", block.scales[0], 1), ("frames", block.frames[0], 3)):
        n = len(idx) * width
        out[name] = (idx, dx[at : at + n].reshape(len(idx), width) if width == 3 else dx[at : at + n])
        at += n
    return out


def test_rigid_limit_is_pbd_and_momentum_is_kept(record_property):
    rng = np.random.default_rng(23)
    rest = make_rest_pose(helix_centers(n=6), 0.05)
    lay = DofLayout.build([rest], [MaterialParams()])
    inv = lay.inverse_weights()
    blocks = rod_constraints(rest, ALL_STIFF)
    pbd_err = momentum = 0.0
    for block in blocks:
        for row in range(block.count):
            state = perturbed_state(rest, rng, 0.02)
            rigid = block.take([row])
            rigid.stiffness[:] = np.inf
            expected = _pbd_projection(rigid, state, inv)
            moved = state.copy()
            correct(moved, [rigid], inv, 1 / 60, 1.0)
            idx, dc = expected["centers"]
            if len(idx):
                pbd_err = max(pbd_err, np.abs(moved.centers[idx] - state.centers[idx] - dc).max())
            idx, ds = expected["scales"]
            if len(idx):
                pbd_err = max(pbd_err, np.abs(moved.scales[idx] - state.scales[idx] - ds).max())
            idx, df = expected["frames"]
            if len(idx):
                turn = quat.log(quat.mul(quat.conj(state.frames[idx]), moved.frames[idx]))
                pbd_err = max(pbd_err, np.abs(turn - df).max())
            # internal rows move no net inertia-weighted center mass, compliant or not
            soft = state.copy()
            correct(soft, [block.take([row])], inv, 1 / 60, 0.75)
            p = np.sum(lay.center_weight[:, None] * (soft.centers - state.centers), axis=0)
            momentum = max(momentum, np.abs(p).max())
    record_property("detail", f"rigid rows vs PBD {pbd_err:.1e}, net momentum {momentum:.1e}")
    assert pbd_err < 1e-12 and momentum < 1e-9


def test_only_scale_dynamics_propagate_a_scale_perturbation(record_property):
    pair = scenarios.bergou_compare()
    far = {}
    for label, doc in pair.items():
        sc = build(doc).scene
        # the last vertex is pinned; the one before it is the far free end
        start = sc.state.scales[-2]
        dev = 0.0
        for _ in range(2000):
            step(sc)
            dev = max(dev, abs(sc.state.scales[-2] - start))
        far[label] = dev
    perturbation = 0.2
    record_property("detail", f"far-end scale change: baseline {far['baseline']:.1e}, "
                              f"dynamic {far['viper']:.2e} ({100 * far['viper'] / perturbation:.1f}% of perturbation)")
    assert far["baseline"] < 1e-6 and far["viper"] > 0.01 * perturbation


def test_bench_reports_phase_timings(record_property, capsys):
    assert main(["bench", "builtin:rod_grid", "--steps", "5"]) == 0
    out = capsys.readouterr().out
    phases = ("predict", "broad", "narrow", "solve", "finalize")
    assert all(f"phase_ms.{p}:" in out for p in phases)
    sc = build(scenarios.rod_grid()).scene
    rate, ms = bench_scene(sc, 5)
    per_10k = 1e3 / rate * 1e4 / sc.dof_count()
    record_property("detail", f"{sc.dof_count()} DOFs at {1e3 / rate:.0f} ms/step "
                              f"(~{per_10k:.0f} ms per 10k DOFs; soft target 100 ms, informational); "
                              + ", ".join(f"{p} {ms[p]:.0f}" for p in phases))


@pytest.mark.parametrize("name", list(scenarios.BUILTINS))
def test_deterministic_metrics_are_byte_identical(name, tmp_path, record_property):
    files = []
    for tag in "ab":
        assert main(["run", f"builtin:{name}", "--steps", "30", "--out", str(tmp_path / tag), "--deterministic"]) == 0
        files.append(sorted((tmp_path / tag).rglob("metrics.csv")))
    same = len(files[0]) > 0 and all(a.read_bytes() == b.read_bytes() for a, b in zip(*files))
    record_property("detail", f"{len(files[0])} metrics.csv over 30 steps {'identical' if same else 'differ'}")
    assert same
