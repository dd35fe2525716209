"""JSON scene documents: validation and construction of runtime scenes.

The document layout is described by ``scene.schema.json`` next to this
module. Validation errors carry the JSON path of the offending field.
"""

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from viper import quaternion as quat
from viper.bundling import BundleGroup, validate_groups
from viper.collision import PillSet
from viper.meshio import read_obj
from viper.rod import InvalidInput, MaterialParams, RodState, make_rest_pose, straight_rest_pose
from viper.scene import ActivationSchedule, KinematicBody, LbsRig, RodSpec, Scene
from viper.skinning import PillTransforms, SkinnedMesh, compute_weights, deform
from viper.solver import SolverSettings

SCHEMA_VERSION = 1


class SceneError(InvalidInput):
    """A scene document that cannot be turned into a scene."""


def schema():
    return json.loads(resources.files("viper").joinpath("scene.schema.json").read_text())


def _path(parts):
    out = ""
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out or "<document>"


def validate(doc):
    """Raise :class:`SceneError` naming the first invalid field."""
    validator = jsonschema.Draft202012Validator(schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if errors:
        err = errors[0]
        where = _path(err.absolute_path)
        if err.validator == "required":
            missing = [f for f in err.validator_value if isinstance(err.instance, dict) and f not in err.instance]
            name = missing[0] if missing else "?"
            loc = f"{where}.{name}" if err.absolute_path else name
            raise SceneError(f"missing required field '{loc}'")
        raise SceneError(f"invalid field '{where}': {err.message}")


def parse(text, source="<string>"):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}") from None


@dataclass
class SkinRuntime:
    mesh: SkinnedMesh
    binding: object
    element_vertices: np.ndarray

    def update(self, state):
        ev = self.element_vertices
        current = PillTransforms.from_elements(state.centers, state.scales, state.frames, ev)
        return deform(self.binding, self.mesh, current)


@dataclass
class SceneFile:
    doc: dict
    scene: Scene
    skin: SkinRuntime = None
    outputs: dict = field(default_factory=dict)

    @property
    def name(self):
        return self.scene.name


def _material(spec, named, where):
    if spec is None:
        return MaterialParams()
    if isinstance(spec, str):
        if spec not in named:
            raise SceneError(f"{where}: unknown material '{spec}'")
        return named[spec]
    return _material_params(spec)


def _material_params(m):
    base = MaterialParams()
    return MaterialParams(
        stretch=tuple(m.get("stretch", base.stretch)),
        bending=tuple(m.get("bending", base.bending)),
        volume=float(m.get("volume", base.volume)),
        density=float(m.get("density", base.density)),
    )


def _resolve(ref, names, what, where):
    if isinstance(ref, int):
        if not 0 <= ref < len(names):
            raise SceneError(f"{where}: {what} index {ref} out of range")
        return ref
    if ref not in names:
        raise SceneError(f"{where}: unknown {what} '{ref}'")
    return names.index(ref)


def _array(values, shape, where):
    a = np.asarray(values, dtype=float)
    if a.shape != shape:
        raise SceneError(f"{where}: expected shape {shape}, got {a.shape}")
    return a


def _rod(spec, named, where):
    if "centers" in spec:
        centers = np.asarray(spec["centers"], dtype=float)
        rest = make_rest_pose(centers, 1.0)
    else:
        s = spec["straight"]
        rest = straight_rest_pose(
            s["length"], s["elements"], 1.0, s.get("origin", (0.0, 0.0, 0.0)), s.get("direction", (1.0, 0.0, 0.0))
        )
    n = rest.vertex_count
    radii = np.asarray(spec["radii"], dtype=float)
    if radii.ndim and radii.shape != (n,):
        raise SceneError(f"{where}.radii: expected {n} values, got {radii.shape[0]}")
    rest.radii = np.broadcast_to(radii, (n,)).copy()
    if "scales" in spec:
        scales = np.asarray(spec["scales"], dtype=float)
        if scales.ndim and scales.shape != (n,):
            raise SceneError(f"{where}.scales: expected {n} values, got {scales.shape[0]}")
        rest.scales = np.broadcast_to(scales, (n,)).copy()
    rest.validate()

    init = RodState.at_rest(rest)
    ini = spec.get("initial", {})
    if "centers" in ini:
        init.centers = _array(ini["centers"], (n, 3), f"{where}.initial.centers")
    if "scales" in ini:
        init.scales = _array(ini["scales"], (n,), f"{where}.initial.scales")
    if "velocities" in ini:
        init.velocities = _array(ini["velocities"], (n, 3), f"{where}.initial.velocities")
    if "scale_velocities" in ini:
        init.scale_velocities = _array(ini["scale_velocities"], (n,), f"{where}.initial.scale_velocities")

    for v in spec.get("pinned", []):
        if not 0 <= v < n:
            raise SceneError(f"{where}.pinned: vertex {v} out of range")
    kw = {k: spec[k] for k in ("collide", "group", "mask") if k in spec}
    return RodSpec(rest, _material(spec.get("material"), named, f"{where}.material"), init,
                   tuple(spec.get("pinned", ())), name=spec.get("name", ""), **kw)


def _kinematic(spec):
    keys = [
        (k["t"], k.get("translation", (0.0, 0.0, 0.0)), k.get("rotation", tuple(quat.IDENTITY)))
        for k in spec.get("keyframes", [{"t": 0.0}])
    ]
    kw = {k: spec[k] for k in ("group", "mask") if k in spec}
    return KinematicBody(spec["points"], spec["radii"], keys, name=spec.get("name", ""), **kw)


def _settings(doc):
    s = dict(doc.get("settings", {}))
    if s.get("contact_stiffness", 0) is None:
        s["contact_stiffness"] = np.inf
    if "gravity" in doc:
        s["gravity"] = tuple(doc["gravity"])
    return SolverSettings(**s)


def build(doc, base_dir="."):
    """Validate ``doc`` and construct its :class:`SceneFile`."""
    validate(doc)
    try:
        return _build(doc, Path(base_dir))
    except SceneError:
        raise
    except InvalidInput as exc:
        raise SceneError(str(exc)) from None


def _build(doc, base_dir):
    named = {k: _material_params(v) for k, v in doc.get("materials", {}).items()}
    rods = [_rod(r, named, f"rods[{i}]") for i, r in enumerate(doc["rods"])]
    rod_names = [r.name for r in rods]
    kinematic = [_kinematic(k) for k in doc.get("kinematic", [])]
    kin_names = [k.name for k in kinematic]

    bundles = []
    for g, b in enumerate(doc.get("bundles", [])):
        members = []
        for i, mem in enumerate(b["members"]):
            where = f"bundles[{g}].members[{i}]"
            k = _resolve(mem["rod"], rod_names, "rod", where)
            if mem["vertex"] >= rods[k].rest.vertex_count:
                raise SceneError(f"{where}.vertex: out of range")
            members.append((k, mem["vertex"]))
        bundles.append((members, b.get("allow_scale", True)))

    activations = []
    for i, a in enumerate(doc.get("activations", [])):
        where = f"activations[{i}]"
        k = _resolve(a["rod"], rod_names, "rod", where)
        if len(a["times"]) != len(a["values"]):
            raise SceneError(f"{where}: times and values differ in length")
        elements = None
        if "elements" in a:
            elements = np.asarray(a["elements"], dtype=int)
            if np.any(elements >= rods[k].rest.element_count):
                raise SceneError(f"{where}.elements: out of range")
        activations.append(ActivationSchedule(k, a["factor"], np.asarray(a["times"], float), np.asarray(a["values"], float), elements))

    lbs = None
    if "lbs" in doc:
        bones = [_resolve(b, kin_names, "kinematic body", f"lbs.bones[{i}]") for i, b in enumerate(doc["lbs"]["bones"])]
        lbs = LbsRig(bones, np.asarray(doc["lbs"]["weights"], dtype=float))

    half_planes = [(h["normal"], h["offset"]) for h in doc.get("half_planes", [])]
    for i, (n, _) in enumerate(half_planes):
        if np.linalg.norm(n) == 0.0:
            raise SceneError(f"half_planes[{i}].normal: must be nonzero")

    scene = Scene(rods, kinematic, half_planes, [], activations, _settings(doc), lbs, doc.get("name", "scene"))
    if bundles:
        scene.bundles = [BundleGroup.from_members(scene.layout, m, allow_scale=s) for m, s in bundles]
        validate_groups(scene.bundles)

    skin = _skin(doc["skin"], scene, base_dir) if "skin" in doc else None
    scene.skin = skin
    return SceneFile(doc, scene, skin, dict(doc.get("outputs", {})))


def rest_pills(scene):
    """Pills and element transforms of all rod elements in their rest pose."""
    lay = scene.layout
    centers = np.concatenate([r.centers for r in lay.rests])
    scales = np.concatenate([r.scales for r in lay.rests])
    radii = np.concatenate([r.radii for r in lay.rests])
    frames = np.concatenate([r.frames for r in lay.rests])
    ev = lay.element_vertices
    r = scales * radii
    z = np.zeros(len(ev), dtype=np.int64)
    pills = PillSet(centers[ev[:, 0]], r[ev[:, 0]], centers[ev[:, 1]], r[ev[:, 1]], z, z, z, z, z.astype(bool))
    return pills, PillTransforms.from_elements(centers, scales, frames, ev)


def _skin(spec, scene, base_dir):
    if "obj" in spec:
        path = base_dir / spec["obj"]
        try:
            verts, faces = read_obj(path.read_text())
        except OSError as exc:
            raise SceneError(f"skin.obj: cannot read {path}: {exc.strerror}") from None
    else:
        verts, faces = spec["mesh"]["vertices"], spec["mesh"]["faces"]
    mesh = SkinnedMesh(verts, faces)
    if not len(scene.layout.element_vertices):
        raise SceneError("skin: scene has no rod elements to bind to")
    pills, rest = rest_pills(scene)
    binding = compute_weights(mesh, pills, rest, spec.get("max_influences", 8), spec.get("epsilon"), spec.get("smoothing", 0))
    return SkinRuntime(mesh, binding, scene.layout.element_vertices.copy())


def load(path):
    """Read, validate and build the scene stored at ``path``."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise SceneError(f"cannot read {path}: {exc.strerror}") from None
    return build(parse(text, str(path)), path.parent)


def dumps(doc):
    return json.dumps(doc, indent=1, sort_keys=False) + "\n"
