import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from viper import quaternion as quat
from viper.collision import Pill, PillSet
from viper.rod import InvalidInput
from viper.skinning import PillTransforms, SkinnedMesh, compute_weights, deform


def _pills(specs):
    """Pills from (c1, r1, c2, r2) tuples and their identity rest transforms."""
    ps = PillSet.from_pills([Pill(*s) for s in specs])
    rest = PillTransforms(0.5 * (ps.c1 + ps.c2), np.ones(len(ps)), np.tile(np.eye(3), (len(ps), 1, 1)))
    return ps, rest


def _cloud(rng, n=40):
    return SkinnedMesh(rng.uniform(-1.5, 1.5, (n, 3)), np.zeros((0, 3), dtype=int))


def _three_pills():
    return _pills([([0, 0, 0], 0.1, [1, 0, 0], 0.1), ([0, 1, 0], 0.1, [1, 1, 0], 0.1), ([0, 0, 1], 0.2, [0, 1, 1], 0.15)])


def _dense(binding, n_pills):
    w = np.zeros((len(binding.weights), n_pills))
    np.put_along_axis(w, binding.indices, binding.weights, axis=1)
    return w


def test_equidistant_vertex_gets_equal_weights():
    ps, rest = _pills([([0, 0, 0], 0.1, [1, 0, 0], 0.1), ([0, 1, 0], 0.1, [1, 1, 0], 0.1)])
    b = compute_weights(SkinnedMesh([[0.5, 0.5, 0.0]], []), ps, rest)
    assert np.allclose(np.sort(b.weights[0]), [0.5, 0.5])


def test_inverse_square_weights_example():
    # surface distances 1, 2, 2 give weights ∝ 1, 1/4, 1/4
    ps, rest = _pills([([1.5, -1, 0], 0.5, [1.5, 1, 0], 0.5), ([-2.5, -1, 0], 0.5, [-2.5, 1, 0], 0.5),
                       ([0, -1, 2.5], 0.5, [0, 1, 2.5], 0.5)])
    b = compute_weights(SkinnedMesh([[0.0, 0.0, 0.0]], []), ps, rest)
    w = _dense(b, 3)[0]
    assert np.allclose(w, [4 / 6, 1 / 6, 1 / 6], atol=1e-12)


def test_on_surface_vertex_is_bound_to_its_pill():
    ps, rest = _three_pills()
    b = compute_weights(SkinnedMesh([[0.5, 0.1, 0.0]], []), ps, rest)
    assert _dense(b, 3)[0, 0] > 1 - 1e-6


def test_inside_vertices_are_counted():
    ps, rest = _three_pills()
    b = compute_weights(SkinnedMesh([[0.5, 0.0, 0.0], [5, 5, 5]], []), ps, rest)
    assert b.clamped == 1 and _dense(b, 3)[0, 0] > 1 - 1e-5


def test_weights_form_partition_of_unity(rng):
    ps, rest = _three_pills()
    b = compute_weights(_cloud(rng, 200), ps, rest, max_influences=2)
    assert b.indices.shape == (200, 2)
    assert np.allclose(b.weights.sum(axis=1), 1.0) and np.all(b.weights >= 0)


def test_weights_are_continuous(rng):
    ps, rest = _three_pills()
    line = np.linspace([-1, -0.5, 0.4], [2, 1.5, 1.6], 2001)
    w = _dense(compute_weights(SkinnedMesh(line, []), ps, rest), 3)
    assert np.abs(np.diff(w, axis=0)).max() < 0.02


def test_rest_pose_reproduces_mesh(rng):
    ps, rest = _three_pills()
    mesh = _cloud(rng)
    b = compute_weights(mesh, ps, rest)
    assert np.allclose(deform(b, mesh, rest), mesh.vertices, atol=1e-12)


def test_rigid_translation_moves_every_vertex(rng):
    ps, rest = _three_pills()
    mesh = _cloud(rng)
    b = compute_weights(mesh, ps, rest)
    t = np.array([0.3, -1.0, 2.0])
    cur = PillTransforms(rest.centers + t, rest.scales, rest.rotations)
    assert np.allclose(deform(b, mesh, cur), mesh.vertices + t, atol=1e-12)


def test_single_influence_scales_about_center(rng):
    ps, rest = _pills([([0, 0, 0], 0.2, [1, 0, 0], 0.2)])
    mesh = _cloud(rng)
    b = compute_weights(mesh, ps, rest)
    cur = PillTransforms(rest.centers, 1.3 * rest.scales, rest.rotations)
    c = rest.centers[0]
    assert np.allclose(deform(b, mesh, cur), c + 1.3 * (mesh.vertices - c), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_deform_is_rigid_equivariant(seed):
    rng = np.random.default_rng(seed)
    ps, rest = _three_pills()
    mesh = _cloud(rng, 20)
    b = compute_weights(mesh, ps, rest)
    cur = PillTransforms(rest.centers + 0.1 * rng.normal(size=(3, 3)), rng.uniform(0.8, 1.2, 3),
                         quat.to_matrix(quat.random_unit(rng, 3)))
    base = deform(b, mesh, cur).copy()
    g, t = quat.to_matrix(quat.random_unit(rng)), rng.normal(size=3)
    moved = PillTransforms(cur.centers @ g.T + t, cur.scales, np.einsum("ij,njk->nik", g, cur.rotations))
    assert np.allclose(deform(b, mesh, moved), base @ g.T + t, atol=1e-10)


def test_input_validation():
    ps, rest = _three_pills()
    with pytest.raises(InvalidInput):
        SkinnedMesh([[0, 0, 0]], [[0, 1, 2]])
    with pytest.raises(InvalidInput):
        compute_weights(SkinnedMesh([[0, 0, 0]], []), PillSet.from_pills([]), rest)
    with pytest.raises(InvalidInput):
        compute_weights(SkinnedMesh([[0, 0, 0]], []), ps, rest, epsilon=0.0)


def test_smoothing_keeps_partition(rng):
    ps, rest = _three_pills()
    verts = rng.uniform(-1, 1, (4, 3))
    mesh = SkinnedMesh(verts, [[0, 1, 2], [0, 2, 3]])
    b = compute_weights(mesh, ps, rest, smoothing=3)
    assert np.allclose(b.weights.sum(axis=1), 1.0)
