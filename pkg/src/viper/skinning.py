"""Binding a surface mesh to pills and deforming it by linear blend skinning."""

from dataclasses import dataclass

import numpy as np

from viper import quaternion as quat
from viper.collision import project_points
from viper.rod import InvalidInput


@dataclass
class SkinnedMesh:
    vertices: np.ndarray
    faces: np.ndarray
    deformed: np.ndarray = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=int).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise InvalidInput("face index out of range")
        if self.deformed is None:
            self.deformed = self.vertices.copy()


@dataclass
class PillTransforms:
    """Per-pill similarity (center, scale, rotation matrix)."""

    centers: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray

    @classmethod
    def from_elements(cls, centers, scales, frames, element_vertices):
        """Midpoint transforms of rod elements from global DOF arrays."""
        ev = np.asarray(element_vertices, dtype=int)
        c = 0.5 * (centers[ev[:, 0]] + centers[ev[:, 1]])
        s = 0.5 * (scales[ev[:, 0]] + scales[ev[:, 1]])
        return cls(c, s, quat.to_matrix(frames))


@dataclass
class SkinBinding:
    indices: np.ndarray  # (n, k) pill ids, -1 for unused slots
    weights: np.ndarray  # (n, k)
    rest: PillTransforms
    max_influences: int = 8
    clamped: int = 0  # vertices that were inside a pill


def compute_weights(mesh, pills, rest, max_influences=8, epsilon=None, smoothing=0):
    """Inverse-square surface-distance weights, truncated and renormalized.

    ``pills`` is a :class:`~viper.collision.PillSet` in rest configuration and
    ``rest`` the matching :class:`PillTransforms`. ``epsilon`` defaults to
    1e-4 times the mesh bounding-box diagonal.
    """
    if len(pills) == 0:
        raise InvalidInput("skinning needs at least one pill")
    v = mesh.vertices
    if epsilon is None:
        extent = np.linalg.norm(v.max(axis=0) - v.min(axis=0)) if len(v) else 1.0
        epsilon = 1e-4 * max(extent, 1e-12)
    if not epsilon > 0.0:
        raise InvalidInput("epsilon must be positive")
    _, d, _ = project_points(v[:, None, :], pills.c1[None], pills.r1[None], pills.c2[None], pills.r2[None])
    clamped = int(np.count_nonzero(np.any(d < 0.0, axis=1)))
    w = 1.0 / np.maximum(d, epsilon) ** 2
    if smoothing:
        w = _smooth(w, mesh.faces, smoothing)
    k = min(max_influences, w.shape[1])
    order = np.argsort(-w, axis=1, kind="stable")[:, :k]
    top = np.take_along_axis(w, order, axis=1)
    top /= top.sum(axis=1, keepdims=True)
    return SkinBinding(order, top, rest, max_influences, clamped)


def _smooth(w, faces, iterations):
    """Uniform one-ring averaging of per-vertex weight rows."""
    n = len(w)
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    edges = np.unique(np.sort(edges, axis=1), axis=0)
    deg = np.bincount(edges.ravel(), minlength=n).astype(float)
    for _ in range(iterations):
        acc = np.zeros_like(w)
        np.add.at(acc, edges[:, 0], w[edges[:, 1]])
        np.add.at(acc, edges[:, 1], w[edges[:, 0]])
        w = np.where(deg[:, None] > 0, 0.5 * w + 0.5 * acc / np.maximum(deg, 1.0)[:, None], w)
    return w


def relative_transforms(rest, current):
    """Affine maps x ↦ A x + b taking each rest pill frame to its current one."""
    ratio = current.scales / rest.scales
    a = ratio[:, None, None] * np.einsum("nij,nkj->nik", current.rotations, rest.rotations)
    b = current.centers - np.einsum("nij,nj->ni", a, rest.centers)
    return a, b


def deform(binding, mesh, current):
    """Blend the per-pill rest-to-current similarities over the mesh vertices."""
    a, b = relative_transforms(binding.rest, current)
    idx = binding.indices
    moved = np.einsum("nkij,nj->nki", a[idx], mesh.vertices) + b[idx]
    mesh.deformed = np.einsum("nk,nki->ni", binding.weights, moved)
    return mesh.deformed
