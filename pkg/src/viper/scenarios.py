"""Built-in scene documents.

Every builtin uses a 1 m rod of 20 elements with rest radius 0.05 and
density 1000 unless stated otherwise. Stiffnesses make volume preservation
dominant (k_v = 1e6 against a fiber stiffness of 1e5).
"""

import numpy as np

LENGTH = 1.0
ELEMENTS = 20
RADIUS = 0.05
PULSE = 2.0
MATERIAL = {"stretch": [1e3, 1e3, 1e5], "bending": [0.0, 0.0], "volume": 1e6, "density": 1000.0}


def _straight(length=LENGTH, elements=ELEMENTS, origin=(0.0, 0.0, 0.0), direction=(1.0, 0.0, 0.0)):
    return {"length": length, "elements": elements, "origin": list(origin), "direction": list(direction)}


def _line(length=LENGTH, elements=ELEMENTS, origin=(0.0, 0.0, 0.0)):
    t = np.linspace(0.0, length, elements + 1)
    return np.asarray(origin, dtype=float) + t[:, None] * np.array([1.0, 0.0, 0.0])


def _doc(name, rods, gravity=(0.0, 0.0, 0.0), **extra):
    doc = {"schema": 1, "name": name, "gravity": list(gravity), "materials": {"muscle": dict(MATERIAL)}, "rods": rods}
    doc.update(extra)
    return doc


def stretch():
    """Both ends jump to twice the rest separation at t = 0; all segments start at 2×.

    Each step runs 200 solver iterations so one step holds the full
    per-iteration convergence record.
    """
    centers = 2.0 * _line()
    rod = {
        "name": "rod",
        "material": "muscle",
        "straight": _straight(),
        "radii": RADIUS,
        "pinned": [0, ELEMENTS],
        "initial": {"centers": centers.tolist()},
    }
    return _doc("stretch", [rod], settings={"iterations": 200, "collisions": False, "record_iterations": True})


def _bergou(mode):
    scales = np.ones(ELEMENTS + 1)
    scales[:2] = 1.2
    rod = {
        "name": "rod",
        "material": "muscle",
        "straight": _straight(),
        "radii": RADIUS,
        "pinned": [0, ELEMENTS],
        "initial": {"scales": scales.tolist()},
    }
    return _doc(f"bergou_{'viper' if mode == 'dynamic' else 'baseline'}", [rod],
                settings={"scale_mode": mode, "collisions": False})


def bergou_compare():
    """The same scale-perturbed rod, once with scale dynamics and once with per-step post-scaling."""
    return {"viper": _bergou("dynamic"), "baseline": _bergou("post_scale")}


def dynamic_wave():
    """Endpoints pinned at rest; a scale-velocity pulse near one end travels along the rod."""
    i = np.arange(ELEMENTS + 1)
    pulse = PULSE * np.exp(-(((i - 3) / 1.5) ** 2))
    rod = {
        "name": "rod",
        "material": "muscle",
        "straight": _straight(),
        "radii": RADIUS,
        "pinned": [0, ELEMENTS],
        "initial": {"scale_velocities": pulse.tolist()},
    }
    return _doc("dynamic_wave", [rod], settings={"collisions": False})


def floor_drop():
    """A horizontal rod released 5 cm above the floor z = 0 falls and settles on it.

    Four substeps per frame keep the impact from squashing the radii.
    """
    rod = {"name": "rod", "material": "muscle", "straight": _straight(origin=(0.0, 0.0, 0.1)), "radii": RADIUS}
    return _doc("floor_drop", [rod], gravity=(0.0, 0.0, -9.81), settings={"substeps": 4},
                half_planes=[{"normal": [0.0, 0.0, 1.0], "offset": 0.0}])


def activation():
    """One end held; fiber lengths shorten by 20 % over half a second and the rod bulges."""
    rod = {"name": "rod", "material": "muscle", "straight": _straight(), "radii": RADIUS, "pinned": [0]}
    sched = {"rod": "rod", "factor": 0.2, "times": [0.0, 0.5], "values": [0.0, 1.0]}
    return _doc("activation", [rod], activations=[sched], settings={"collisions": False})


def _tube(radius, length, around=12, rings=11):
    phi = 2 * np.pi * np.arange(around) / around
    x = np.linspace(0.0, length, rings)
    verts = np.array([[xi, radius * np.cos(p), radius * np.sin(p)] for xi in x for p in phi])
    faces = []
    for r in range(rings - 1):
        for k in range(around):
            a, b = r * around + k, r * around + (k + 1) % around
            faces += [[a, b, b + around], [a, b + around, a + around]]
    return verts, np.array(faces)


def band(rods=3, elements=10):
    """A bundle of parallel fibers held at one end contracts under activation.

    The bundle shortens and bulges, and a tube mesh skinned to its pills
    follows.
    """
    offsets = 0.06 * np.array([[np.cos(a), np.sin(a)] for a in 2 * np.pi * np.arange(rods) / rods])
    docs = []
    for k, (y, z) in enumerate(offsets):
        docs.append({
            "name": f"fiber{k}",
            "material": "muscle",
            "straight": _straight(elements=elements, origin=(0.0, y, z)),
            "radii": 0.04,
            "pinned": [0],
            "group": 1,
            "mask": 0,
        })
    bundles = [{"members": [{"rod": k, "vertex": v} for k in range(rods)]} for v in range(1, elements + 1)]
    activations = [{"rod": k, "factor": 0.2, "times": [0.0, 0.5, 1.0, 1.5], "values": [0.0, 1.0, 1.0, 0.0]}
                   for k in range(rods)]
    verts, faces = _tube(0.12, LENGTH)
    skin = {"mesh": {"vertices": verts.tolist(), "faces": faces.tolist()}, "max_influences": 8}
    return _doc("band", docs, bundles=bundles, activations=activations, skin=skin, settings={"collisions": False},
                outputs={"skin_frames": True})


def rod_grid(rows=5, per_row=10, elements=10):
    """Two crossed mats of rods resting on the floor; the throughput benchmark scene.

    The lower mat tiles ``rows`` × ``per_row`` rods along x on the floor, the
    upper one the same number along y laid just above it, so contacts are
    sustained from the first step. The default is 100 rods of 10 elements,
    7400 DOFs. Four substeps keep the contact squash of the scale DOFs, and so
    the volume error, small.
    """
    radius = 0.04
    low, up = radius, 3 * radius + 0.001
    width = rows * (LENGTH + 0.1)
    rods = []
    for a in range(rows):
        for b in range(per_row):
            rods.append({"origin": (a * (LENGTH + 0.1), (b + 0.5) * 0.1, low), "direction": (1.0, 0.0, 0.0)})
    count = rows * per_row
    for b in range(count):
        rods.append({"origin": ((b + 0.5) * width / count, 0.0, up), "direction": (0.0, 1.0, 0.0)})
    docs = [
        {"material": "muscle", "straight": _straight(length=per_row * 0.1, elements=elements, **r), "radii": radius}
        if r["direction"][1] else
        {"material": "muscle", "straight": _straight(elements=elements, **r), "radii": radius}
        for r in rods
    ]
    return _doc("rod_grid", docs, gravity=(0.0, 0.0, -9.81),
                half_planes=[{"normal": [0.0, 0.0, 1.0], "offset": 0.0}], settings={"substeps": 4})


BUILTINS = {
    "stretch": stretch,
    "bergou_compare": bergou_compare,
    "dynamic_wave": dynamic_wave,
    "floor_drop": floor_drop,
    "activation": activation,
    "band": band,
    "rod_grid": rod_grid,
}


def builtin(name):
    """Scene document(s) of a builtin; a dict of named documents for paired runs."""
    try:
        return BUILTINS[name]()
    except KeyError:
        raise KeyError(f"unknown builtin '{name}'; choose from {', '.join(BUILTINS)}") from None


def is_paired(doc):
    return "schema" not in doc
