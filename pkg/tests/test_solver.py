import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from viper import quaternion as quat
from viper.collision import collision_block
from viper.constraints import Kind, jacobian, pin_constraint, rod_constraints
from viper.rod import DofLayout, InvalidInput, MaterialParams, RodState, make_rest_pose, straight_rest_pose
from viper.scene import RodSpec, Scene
from viper.solver import (
    ExternalLoads,
    SimulationError,
    SolverSettings,
    apply_activation,
    correct,
    finalize_velocities,
    predict,
    step,
    warm_start_lbs,
)

from conftest import helix_centers, perturbed_state

INERT = MaterialParams(stretch=(0, 0, 0), bending=(0, 0), volume=0)


def _layout(rest, material=None):
    return DofLayout.build([rest], [material or MaterialParams()])


def test_settings_validation():
    for kw in ({"dt": 0.0}, {"iterations": 0}, {"relaxation": 0.0}, {"relaxation": 1.5}, {"scale_mode": "x"}):
        with pytest.raises(InvalidInput):
            SolverSettings(**kw)
    s = SolverSettings()
    assert (s.dt, s.iterations, s.relaxation, s.substeps, s.dichotomous_iterations) == (1 / 60, 20, 0.75, 1, 10)


def test_predict_examples():
    rest = straight_rest_pose(1.0, 4)
    lay = _layout(rest)
    st_ = RodState.at_rest(rest)
    out = predict(st_, lay, None, 0.1)
    assert np.array_equal(out.centers, st_.centers) and np.array_equal(out.frames, st_.frames)

    g = np.array([0.0, 0.0, -9.81])
    st_.velocities[:] = [1.0, 0.0, 0.0]
    out = predict(st_, lay, ExternalLoads(force_density=lay.density[:, None] * g), 0.1)
    assert np.allclose(out.centers - st_.centers, 0.1 * st_.velocities + 0.01 * g, atol=1e-15)

    st_ = RodState.at_rest(rest)
    st_.scale_velocities[:] = 0.1
    assert np.allclose(predict(st_, lay, None, 0.1).scales, rest.scales + 0.01)
    with pytest.raises(InvalidInput):
        predict(st_, lay, ExternalLoads(force_density=np.full((5, 3), np.nan)), 0.1)
    with pytest.raises(InvalidInput):
        predict(st_, lay, None, 0.0)


def test_predict_keeps_pinned_and_normalizes_frames(rng):
    rest = straight_rest_pose(1.0, 4)
    lay = _layout(rest)
    lay.center_pinned[0] = True
    st_ = RodState.at_rest(rest)
    st_.velocities[:] = 1.0
    st_.angular_velocities = rng.normal(size=(4, 3))
    out = predict(st_, lay, None, 0.1)
    assert np.array_equal(out.centers[0], st_.centers[0])
    assert np.allclose(np.linalg.norm(out.frames, axis=1), 1.0, atol=1e-12)


def test_finalize_velocities_examples():
    rest = straight_rest_pose(1.0, 2)
    prev = RodState.at_rest(rest)
    nxt = finalize_velocities(prev, prev.copy(), 0.1)
    assert not nxt.velocities.any() and not nxt.scale_velocities.any() and not nxt.angular_velocities.any()
    moved = prev.copy()
    moved.centers += [0.0, 0.0, 0.1]
    assert np.allclose(finalize_velocities(prev, moved, 0.1).velocities, [0, 0, 1])
    turned = prev.copy()
    turned.frames = quat.mul(prev.frames, quat.exp(np.array([0.02, 0.0, 0.0])))
    w = finalize_velocities(prev, turned, 0.01).angular_velocities
    assert np.allclose(w, [2.0, 0, 0], atol=1e-4)


def _two_point_contact(gap):
    """Two unit spheres (vertices 0 and 2) overlapping by ``-gap`` along z, via a collision row."""
    rest = make_rest_pose(np.array([[0.0, 0, 0], [1.0, 0, 0]]), 1.0)
    lay = DofLayout.build([rest, rest], [MaterialParams()] * 2)
    c = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 0, 2.0 + gap], [1.0, 0, 2.0 + gap]])
    st_ = RodState(c, np.ones(4), np.tile(quat.IDENTITY, (2, 1)))
    block = collision_block([[0, 1, 2, 3]], [[1.0] * 4], [0.0], [0.0], [[0.0, 0, -1.0]])
    return lay, st_, block


def test_rigid_limit_matches_pbd_projection():
    lay, st_, block = _two_point_contact(-0.3)
    inv_c, _, inv_f = lay.inverse_weights()
    inv_s = np.zeros(lay.n_vertices)
    before = st_.centers.copy()
    correct(st_, [block], (inv_c, inv_s, inv_f), 1 / 60, 1.0)
    # classic PBD: Δx_i = -w_i C ∇C_i / Σ w_j |∇C_j|², with C = -0.3 and n = -z from sphere b to a
    c_val = -0.3
    n = np.array([0.0, 0.0, -1.0])
    w_a, w_b = inv_c[0], inv_c[2]
    denom = w_a + w_b
    assert np.allclose(st_.centers[0] - before[0], -w_a * c_val * n / denom, atol=1e-12, rtol=0)
    assert np.allclose(st_.centers[2] - before[2], w_b * c_val * n / denom, atol=1e-12, rtol=0)
    # equal inertia: each side moves half the violation
    assert np.allclose(st_.centers[0] - before[0], [0, 0, -0.15], atol=1e-12)


def test_converged_constraint_is_fixed_point(helix_rest):
    lay = _layout(helix_rest)
    st_ = RodState.at_rest(helix_rest)
    blocks = rod_constraints(helix_rest, MaterialParams(bending=(1, 1)))
    res = correct(st_, blocks, lay.inverse_weights(), 1 / 60, 0.75)
    # rest residuals are round-off sized, so the update is too
    assert res.max_update < 1e-14
    assert max(np.abs(b.lam).max() for b in blocks) < 1e-12


def test_compliant_limit_is_inert():
    lay, st_, block = _two_point_contact(-0.3)
    block.stiffness[:] = 1e-30
    before = st_.centers.copy()
    correct(st_, [block], lay.inverse_weights(), 1 / 60, 1.0)
    assert np.abs(st_.centers - before).max() < 1e-20


def test_unilateral_row_inactive_when_separated():
    lay, st_, block = _two_point_contact(0.2)
    before = st_.centers.copy()
    correct(st_, [block], lay.inverse_weights(), 1 / 60, 1.0)
    assert np.array_equal(st_.centers, before) and block.lam[0, 0] == 0.0


def test_contact_with_scales_shrinks_both_radii():
    lay, st_, block = _two_point_contact(-0.3)
    correct(st_, [block], lay.inverse_weights(), 1 / 60, 1.0)
    assert st_.scales[0] < 1.0 and st_.scales[2] < 1.0


@pytest.mark.parametrize("kind", [Kind.STRETCH_Z, Kind.VOLUME_STRETCH])
def test_single_row_update_conserves_momentum(kind, rng):
    rest = make_rest_pose(helix_centers(), 0.05)
    lay = _layout(rest)
    blocks = {b.kind: b for b in rod_constraints(rest, MaterialParams())}
    for row in range(rest.element_count):
        st_ = perturbed_state(rest, rng, 0.1)
        before = st_.centers.copy()
        correct(st_, [blocks[kind].take([row])], lay.inverse_weights(), 1 / 60, 0.75)
        p = np.sum(lay.center_weight[:, None] * (st_.centers - before), axis=0)
        assert np.abs(p).max() < 1e-9


def test_collision_update_is_equal_and_opposite():
    lay, st_, block = _two_point_contact(-0.3)
    before = st_.centers.copy()
    correct(st_, [block], lay.inverse_weights(), 1 / 60, 0.75)
    d = st_.centers - before
    assert np.allclose(d[0], -d[2], atol=1e-15) and np.allclose(d[0, :2], 0.0)


def test_singular_row_is_skipped():
    rest = straight_rest_pose(1.0, 2)
    lay = _layout(rest)
    lay.center_pinned[0] = True
    pin = pin_constraint([0], [[5.0, 0, 0]], np.inf)
    st_ = RodState.at_rest(rest)
    res = correct(st_, [pin], lay.inverse_weights(), 1 / 60, 0.75)
    assert res.skipped == 1 and np.array_equal(st_.centers, rest.centers)


def test_frames_stay_unit_after_sweeps(helix_rest, rng):
    lay = _layout(helix_rest)
    st_ = perturbed_state(helix_rest, rng, 0.2)
    blocks = rod_constraints(helix_rest, MaterialParams(bending=(1, 1)))
    for _ in range(10):
        correct(st_, blocks, lay.inverse_weights(), 1 / 60, 0.75)
        assert np.abs(np.linalg.norm(st_.frames, axis=1) - 1).max() < 1e-12


def _rod_scene(rest, material=None, **kw):
    settings = SolverSettings(gravity=kw.pop("gravity", (0.0, 0.0, 0.0)), collisions=False, **kw)
    return Scene([RodSpec(rest, material or MaterialParams())], settings=settings)


def test_free_fall_velocity():
    sc = _rod_scene(straight_rest_pose(1.0, 4), INERT, gravity=(0.0, 0.0, -9.81))
    n = 50
    for _ in range(n):
        step(sc)
    assert np.allclose(sc.state.velocities[:, 2], n * (1 / 60) * -9.81, atol=1e-9, rtol=0)


def test_rest_scene_does_not_drift():
    rest = make_rest_pose(helix_centers(), 0.05)
    sc = _rod_scene(rest, MaterialParams(bending=(10, 10)))
    for _ in range(200):
        step(sc)
    assert np.abs(sc.state.centers - rest.centers).max() < 1e-12
    assert np.abs(sc.state.scales - rest.scales).max() < 1e-12


def test_step_is_bitwise_deterministic(rng):
    rest = make_rest_pose(helix_centers(), 0.05)

    def run():
        sc = _rod_scene(rest, gravity=(0, 0, -9.81))
        sc.layout.center_pinned[0] = True
        for _ in range(30):
            step(sc)
        return sc.state.centers.tobytes() + sc.state.scales.tobytes() + sc.state.frames.tobytes()

    assert run() == run()


def test_non_finite_state_aborts_with_diagnostic():
    sc = _rod_scene(straight_rest_pose(1.0, 4))
    sc.state.velocities[2] = np.nan
    with pytest.raises(SimulationError, match="constraint|non-finite"):
        step(sc)


def test_warm_start_lbs_examples():
    c = np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]])
    eye = np.eye(4)
    moved = eye.copy()
    moved[:3, 3] = [2.0, 0.0, 0.0]
    assert np.allclose(warm_start_lbs(c, [eye], [eye], [[1.0], [1.0]]), c)
    assert np.allclose(warm_start_lbs(c, [eye], [moved], [[1.0], [1.0]]), c + [2, 0, 0])
    out = warm_start_lbs(c, [eye, eye], [eye, moved], [[0.5, 0.5], [0.5, 0.5]])
    assert np.allclose(out, c + [1, 0, 0])
    with pytest.raises(InvalidInput):
        warm_start_lbs(c, [eye], [eye], [[0.9], [1.0]])


def test_apply_activation_examples():
    rest = straight_rest_pose(1.0, 4)
    assert np.array_equal(apply_activation(rest, 0.0, 0.2).rest_fiber_lengths, rest.element_lengths)
    act = apply_activation(rest, 1.0, 0.2)
    assert np.allclose(act.rest_fiber_lengths, 0.8 * rest.element_lengths)
    assert np.array_equal(act.scales, rest.scales)
    with pytest.raises(InvalidInput):
        apply_activation(rest, 1.5, 0.2)
    with pytest.raises(InvalidInput):
        apply_activation(rest, 1.0, 1.0)


def test_activated_free_rod_bulges_to_incompressible_scale():
    # incompressibility: s² · (0.8 l̄) = l̄  →  s = 1/√0.8
    rest = straight_rest_pose(1.0, 10)
    sc = _rod_scene(rest, iterations=40)
    sc.layout.rests[0] = apply_activation(rest, 1.0, 0.2)
    sc.block(Kind.STRETCH_Z).params["target"][:] = 0.8
    for _ in range(300):
        step(sc)
    s_mid = sc.state.scales[3:8]
    assert np.allclose(s_mid, 1 / np.sqrt(0.8), rtol=0.05)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_scales_stay_positive_under_compression(seed):
    rng = np.random.default_rng(seed)
    rest = straight_rest_pose(1.0, 6)
    init = RodState.at_rest(rest)
    init.centers = rest.centers * rng.uniform(0.05, 0.3)
    init.scale_velocities = rng.normal(scale=50.0, size=7)
    sc = Scene([RodSpec(rest, MaterialParams(), init)], settings=SolverSettings(gravity=(0, 0, 0), collisions=False))
    for _ in range(20):
        step(sc)
    assert np.all(sc.state.scales >= 1e-4) and np.all(np.isfinite(sc.state.centers))


def test_step_report_fields():
    sc = _rod_scene(straight_rest_pose(1.0, 4), record_iterations=True, iterations=5, substeps=2)
    r = step(sc)
    assert r.step == 2 and r.time == pytest.approx(1 / 60)
    assert len(r.iterations) == 5 and set(r.phases) == {"predict", "broad", "narrow", "solve", "finalize"}
    assert r.wall_ms > 0 and r.max_penetration == 0.0
    assert "stretch_z" in r.residual
    ev = jacobian(sc.block(Kind.STRETCH_Z), sc.state)
    assert r.residual["stretch_z"] == pytest.approx(np.linalg.norm(ev.value), abs=1e-12)
