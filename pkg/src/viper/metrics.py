"""Per-step scene metrics and their CSV encoding."""

import csv
import io
from dataclasses import dataclass

import numpy as np

from viper import kernels
from viper.constraints import ELASTIC_KINDS, Kind

# Kinds whose residual carries units of 1/length; scaled by the rest radius.
_INVERSE_LENGTH = (Kind.SURFACE_STRETCH, Kind.BEND_TWIST, Kind.SURFACE_BENDING, Kind.VOLUME_BEND_U, Kind.VOLUME_BEND_V)

COLUMNS = (
    ["step", "time"]
    + [f"viol_{k.value}" for k in ELASTIC_KINDS]
    + ["total_volume", "rest_volume", "volume_rel_error", "kinetic_energy", "max_penetration", "wall_ms"]
)


@dataclass
class MetricsRow:
    step: int
    time: float
    violations: dict
    total_volume: float
    rest_volume: float
    kinetic_energy: float
    max_penetration: float
    wall_ms: float

    @property
    def volume_rel_error(self):
        return abs(self.total_volume - self.rest_volume) / self.rest_volume if self.rest_volume > 0 else 0.0

    def values(self):
        return (
            [self.step, self.time]
            + [self.violations.get(k.value, 0.0) for k in ELASTIC_KINDS]
            + [self.total_volume, self.rest_volume, self.volume_rel_error, self.kinetic_energy, self.max_penetration, self.wall_ms]
        )


def _row_lengths(block):
    p = block.params
    if "inv_len" in p:
        return 1.0 / p["inv_len"]
    if "coef" in p:
        return 2.0 / p["coef"]
    return 0.5 * (1.0 / p["inv_len_a"] + 1.0 / p["inv_len_b"])


def relative_violations(scene, state=None):
    """Length-weighted mean residual norm per elastic kind, made dimensionless.

    A uniform 2× stretch of a straight rod gives 1.0 for the stretch kind.
    """
    st = state or scene.state
    out = {}
    blocks = [b for b in scene.blocks if b.kind in ELASTIC_KINDS and b.count]
    packed = kernels.PackedRows.pack(blocks)
    all_norms, _ = kernels.residual_rows(packed, st)
    start = 0
    for block in blocks:
        norms = all_norms[start : start + block.count]
        start += block.count
        if block.kind in _INVERSE_LENGTH:
            norms = norms * scene.rest_radii[block.scales].mean(axis=1)
        w = _row_lengths(block)
        out[block.kind.value] = float(np.sum(norms * w) / np.sum(w))
    return out


def rod_volumes(scene, state=None):
    """(current, rest) total volume Σ π (s_mid r_mid)² l over all rod elements."""
    st = state or scene.state
    ev = scene.layout.element_vertices
    if not len(ev):
        return 0.0, 0.0
    r_mid = 0.5 * (scene.rest_radii[ev[:, 0]] + scene.rest_radii[ev[:, 1]])
    s_mid = 0.5 * (st.scales[ev[:, 0]] + st.scales[ev[:, 1]])
    sb_mid = 0.5 * (scene.rest_scales[ev[:, 0]] + scene.rest_scales[ev[:, 1]])
    l = np.linalg.norm(st.centers[ev[:, 1]] - st.centers[ev[:, 0]], axis=1)
    cur = float(np.sum(np.pi * (s_mid * r_mid) ** 2 * l))
    rest = float(np.sum(np.pi * (sb_mid * r_mid) ** 2 * scene.rest_lengths))
    return cur, rest


def kinetic_energy(scene, state=None):
    st = state or scene.state
    lay = scene.layout
    free_c = ~lay.center_pinned
    e = 0.5 * np.sum(lay.center_weight[free_c] * np.sum(st.velocities[free_c] ** 2, axis=1))
    free_s = ~lay.scale_pinned
    e += 0.5 * np.sum(lay.scale_weight[free_s] * st.scale_velocities[free_s] ** 2)
    if len(st.frames):
        e += 0.5 * np.sum(lay.frame_weight * st.angular_velocities**2)
    return float(e)


def collect(scene, report, deterministic=False):
    cur, rest = rod_volumes(scene)
    return MetricsRow(
        report.step,
        report.time,
        relative_violations(scene),
        cur,
        rest,
        kinetic_energy(scene),
        report.max_penetration,
        0.0 if deterministic else report.wall_ms,
    )


def initial_row(scene):
    cur, rest = rod_volumes(scene)
    return MetricsRow(0, scene.time, relative_violations(scene), cur, rest, kinetic_energy(scene), 0.0, 0.0)


class MetricsWriter:
    """CSV with a header row, comma separators and LF line endings."""

    def __init__(self, stream):
        self.stream = stream
        self.writer = csv.writer(stream, lineterminator="\n")
        self.writer.writerow(COLUMNS)

    def write(self, row):
        self.writer.writerow([_fmt(v) for v in row.values()])


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def to_csv(rows):
    buf = io.StringIO()
    w = MetricsWriter(buf)
    for r in rows:
        w.write(r)
    return buf.getvalue()
