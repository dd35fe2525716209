"""OBJ text I/O and tapered-capsule tessellation for frame output."""

import numpy as np

from viper.rod import InvalidInput

AROUND = 16
CAP_RINGS = 9


def read_obj(text):
    """Vertices and triangular faces of an OBJ document (normals ignored).

    Polygons with more than three corners are fan-triangulated.
    """
    verts, faces = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            if len(parts) < 4:
                raise InvalidInput(f"line {lineno}: vertex needs three coordinates")
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    return np.array(verts, dtype=float).reshape(-1, 3), np.array(faces, dtype=int).reshape(-1, 3)


def vertex_normals(vertices, faces):
    n = np.zeros_like(vertices)
    if len(faces):
        fn = np.cross(vertices[faces[:, 1]] - vertices[faces[:, 0]], vertices[faces[:, 2]] - vertices[faces[:, 0]])
        for k in range(3):
            np.add.at(n, faces[:, k], fn)
    length = np.linalg.norm(n, axis=1, keepdims=True)
    return np.where(length > 0, n / np.where(length > 0, length, 1.0), 0.0)


def write_obj(vertices, faces, normals=True):
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in vertices]
    if normals:
        lines += [f"vn {x:.6g} {y:.6g} {z:.6g}" for x, y, z in vertex_normals(vertices, faces)]
        lines += [f"f {a + 1}//{a + 1} {b + 1}//{b + 1} {c + 1}//{c + 1}" for a, b, c in faces]
    else:
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in faces]
    return "\n".join(lines) + "\n"


def _basis(u):
    helper = np.array([1.0, 0.0, 0.0]) if abs(u[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(u, helper)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(u, e1)


def pill_mesh(c1, r1, c2, r2, around=AROUND, cap_rings=CAP_RINGS):
    """Surface of a tapered capsule: two caps joined along their tangent circles."""
    c1, c2 = np.asarray(c1, dtype=float), np.asarray(c2, dtype=float)
    axis = c2 - c1
    l = np.linalg.norm(axis)
    u = axis / l if l > 1e-12 else np.array([0.0, 0.0, 1.0])
    e1, e2 = _basis(u)
    tilt = np.arcsin(np.clip((r1 - r2) / l, -1.0, 1.0)) if l > 1e-12 else 0.0
    phi = 2 * np.pi * np.arange(around) / around
    ring_dir = np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2
    rings = []
    for k in range(1, cap_rings + 1):
        psi = -0.5 * np.pi + (tilt + 0.5 * np.pi) * k / cap_rings
        rings.append(c1 + r1 * (np.cos(psi) * ring_dir + np.sin(psi) * u))
    for k in range(cap_rings):
        psi = tilt + (0.5 * np.pi - tilt) * k / cap_rings
        rings.append(c2 + r2 * (np.cos(psi) * ring_dir + np.sin(psi) * u))
    verts = np.concatenate([[c1 - r1 * u], np.concatenate(rings), [c2 + r2 * u]])
    faces = []
    nr = len(rings)
    top = len(verts) - 1
    for i in range(around):
        j = (i + 1) % around
        faces.append([0, 1 + j, 1 + i])
        for r in range(nr - 1):
            a, b = 1 + r * around, 1 + (r + 1) * around
            faces.append([a + i, a + j, b + j])
            faces.append([a + i, b + j, b + i])
        last = 1 + (nr - 1) * around
        faces.append([last + i, last + j, top])
    return verts, np.array(faces, dtype=int)


def pills_obj(pills):
    """One OBJ document holding the tessellated surface of every pill."""
    all_v, all_f, offset = [], [], 0
    for i in range(len(pills)):
        v, f = pill_mesh(pills.c1[i], pills.r1[i], pills.c2[i], pills.r2[i])
        all_v.append(v)
        all_f.append(f + offset)
        offset += len(v)
    if not all_v:
        return "# empty\n"
    return write_obj(np.concatenate(all_v), np.concatenate(all_f))
