"""Compiled Jacobi sweep over packed constraint rows.

Blocks of every kind are packed into padded row arrays once per step; one
sweep then evaluates each row's residual and Jacobian, solves its 1×1 or 3×3
system and scatters the corrections in row order, so results do not depend
on thread scheduling. :func:`viper.solver.correct` is the vectorized numpy
version of the same update and serves as its reference.
"""

from dataclasses import dataclass
from functools import cached_property

import numba
import numpy as np

from viper.constraints import Kind
from viper.rod import MIN_SCALE

KIND_ORDER = list(Kind)
KIND_CODE = {k: i for i, k in enumerate(KIND_ORDER)}
N_KINDS = len(KIND_ORDER)
N_PARAMS = 9

(STRETCH_Z, CROSS_SECTION, SURFACE_STRETCH, BEND_TWIST, SURFACE_BENDING, VOLUME_STRETCH,
 VOLUME_BEND_U, VOLUME_BEND_V, COLLISION, HALF_PLANE, PIN) = range(11)  # fmt: skip


def _param_columns(block):
    p = block.params
    n = block.count
    k = block.kind
    if k in (Kind.STRETCH_Z, Kind.VOLUME_STRETCH):
        cols = [p["inv_len"], p["target"]]
    elif k is Kind.CROSS_SECTION:
        cols = [p["rest_mid"]]
    elif k is Kind.SURFACE_STRETCH:
        cols = [p["inv_len"], p["rest_grad"]]
    elif k is Kind.BEND_TWIST:
        cols = [p["coef"], *p["rest_term"].T]
    elif k is Kind.SURFACE_BENDING:
        cols = [p["inv_len_a"], p["inv_len_b"], p["rest_lap"]]
    elif k in (Kind.VOLUME_BEND_U, Kind.VOLUME_BEND_V):
        cols = [p["coef"], p["rest_term"]]
    elif k is Kind.COLLISION:
        cols = [p["alpha"], p["beta"], *p["rest_radii"].T, *p["normal"].T]
    elif k is Kind.HALF_PLANE:
        cols = [*p["normal"].T, p["offset"], p["rest_radius"]]
    else:
        cols = [*p["target"].T]
    out = np.zeros((n, N_PARAMS))
    for i, c in enumerate(cols):
        out[:, i] = c
    return out


def _pad(idx, width):
    out = np.full((idx.shape[0], width), -1, dtype=np.int64)
    out[:, : idx.shape[1]] = idx
    return out


@dataclass
class PackedRows:
    blocks: list
    kind: np.ndarray
    centers: np.ndarray
    scales: np.ndarray
    frames: np.ndarray
    stiffness: np.ndarray
    params: np.ndarray
    unilateral: np.ndarray
    lam: np.ndarray

    @classmethod
    def pack(cls, blocks):
        blocks = [b for b in blocks if b.count]
        if not blocks:
            z = np.zeros(0, dtype=np.int64)
            return cls([], z, np.zeros((0, 4), np.int64), np.zeros((0, 4), np.int64), np.zeros((0, 2), np.int64),
                       np.zeros((0, 3)), np.zeros((0, N_PARAMS)), np.zeros(0, bool), np.zeros((0, 3)))
        stiff = np.zeros((sum(b.count for b in blocks), 3))
        rows = 0
        for b in blocks:
            stiff[rows : rows + b.count, : b.dim] = b.stiffness
            rows += b.count
        return cls(
            blocks,
            np.concatenate([np.full(b.count, KIND_CODE[b.kind], dtype=np.int64) for b in blocks]),
            np.concatenate([_pad(b.centers, 4) for b in blocks]),
            np.concatenate([_pad(b.scales, 4) for b in blocks]),
            np.concatenate([_pad(b.frames, 2) for b in blocks]),
            stiff,
            np.concatenate([_param_columns(b) for b in blocks]),
            np.concatenate([np.full(b.count, b.unilateral) for b in blocks]),
            np.zeros((rows, 3)),
        )

    @cached_property
    def present(self):
        return np.unique(self.kind).tolist()

    def unpack_multipliers(self):
        rows = 0
        for b in self.blocks:
            b.lam[...] = self.lam[rows : rows + b.count, : b.dim]
            rows += b.count


# --- scalar quaternion helpers ------------------------------------------------

_jit = numba.njit(cache=True, fastmath=False, nogil=True)


@_jit
def _rotation(q, e, m):
    """Rotation matrix of quaternion row ``q[e]``; takes the index to avoid a view."""
    x, y, z, w = q[e, 0], q[e, 1], q[e, 2], q[e, 3]
    m[0, 0] = 1 - 2 * (y * y + z * z)
    m[0, 1] = 2 * (x * y - z * w)
    m[0, 2] = 2 * (x * z + y * w)
    m[1, 0] = 2 * (x * y + z * w)
    m[1, 1] = 1 - 2 * (x * x + z * z)
    m[1, 2] = 2 * (y * z - x * w)
    m[2, 0] = 2 * (x * z - y * w)
    m[2, 1] = 2 * (y * z + x * w)
    m[2, 2] = 1 - 2 * (x * x + y * y)


@_jit
def _darboux_row(q, ea, eb, coef, omega, da, db):
    """Ω = coef · Im(conj(qa) qb) for rows ``ea``, ``eb`` of ``q`` and its derivatives
    w.r.t. both body increments."""
    dot = q[ea, 0] * q[eb, 0] + q[ea, 1] * q[eb, 1] + q[ea, 2] * q[eb, 2] + q[ea, 3] * q[eb, 3]
    sg = -1.0 if dot < 0.0 else 1.0
    bx, by, bz, bw = sg * q[eb, 0], sg * q[eb, 1], sg * q[eb, 2], sg * q[eb, 3]
    ax, ay, az, aw = -q[ea, 0], -q[ea, 1], -q[ea, 2], q[ea, 3]
    px = aw * bx + bw * ax + ay * bz - az * by
    py = aw * by + bw * ay + az * bx - ax * bz
    pz = aw * bz + bw * az + ax * by - ay * bx
    pw = aw * bw - ax * bx - ay * by - az * bz
    omega[0] = coef * px
    omega[1] = coef * py
    omega[2] = coef * pz
    h = 0.5 * coef
    # skew(p_v)
    da[0, 0] = -h * pw
    da[0, 1] = -h * pz
    da[0, 2] = h * py
    da[1, 0] = h * pz
    da[1, 1] = -h * pw
    da[1, 2] = -h * px
    da[2, 0] = -h * py
    da[2, 1] = h * px
    da[2, 2] = -h * pw
    for i in range(3):
        for j in range(3):
            db[i, j] = da[i, j]
        db[i, i] = h * pw


@_jit
def _eval_row(code, r, cidx, sidx, fidx, par, c, s, q, W, Jc, Js, Jf, m, om, da, db):
    """Residual and Jacobian of packed row ``r``; returns the residual dimension."""
    for i in range(3):
        W[i] = 0.0
        for a in range(4):
            Js[i, a] = 0.0
            for k in range(3):
                Jc[i, a, k] = 0.0
        for a in range(2):
            for k in range(3):
                Jf[i, a, k] = 0.0
    if code == STRETCH_Z or code == VOLUME_STRETCH:
        i0, i1, e = cidx[r, 0], cidx[r, 1], fidx[r, 0]
        il, tgt = par[r, 0], par[r, 1]
        _rotation(q, e, m)
        sm2 = 1.0
        if code == VOLUME_STRETCH:
            sm = 0.5 * (s[sidx[r, 0]] + s[sidx[r, 1]])
            sm2 = sm * sm
        for i in range(3):
            g = (c[i1, i] - c[i0, i]) * il
            W[i] = sm2 * g - m[i, 2] * tgt
            Jc[i, 0, i] = -sm2 * il
            Jc[i, 1, i] = sm2 * il
            Jf[i, 0, 0] = tgt * m[i, 1]
            Jf[i, 0, 1] = -tgt * m[i, 0]
            if code == VOLUME_STRETCH:
                Js[i, 0] = sm * g
                Js[i, 1] = sm * g
        return 3
    if code == CROSS_SECTION:
        W[0] = 0.5 * (s[sidx[r, 0]] + s[sidx[r, 1]]) - par[r, 0]
        Js[0, 0] = 0.5
        Js[0, 1] = 0.5
        return 1
    if code == SURFACE_STRETCH:
        il = par[r, 0]
        W[0] = (s[sidx[r, 1]] - s[sidx[r, 0]]) * il - par[r, 1]
        Js[0, 0] = -il
        Js[0, 1] = il
        return 1
    if code == SURFACE_BENDING:
        a, b = par[r, 0], par[r, 1]
        s0, s1, s2 = s[sidx[r, 0]], s[sidx[r, 1]], s[sidx[r, 2]]
        W[0] = (s2 - s1) * b - (s1 - s0) * a - par[r, 2]
        Js[0, 0] = a
        Js[0, 1] = -a - b
        Js[0, 2] = b
        return 1
    if code == BEND_TWIST:
        sv = s[sidx[r, 0]]
        _darboux_row(q, fidx[r, 0], fidx[r, 1], par[r, 0], om, da, db)
        for i in range(3):
            W[i] = sv * om[i] - par[r, 1 + i]
            Js[i, 0] = om[i]
            for k in range(3):
                Jf[i, 0, k] = sv * da[i, k]
                Jf[i, 1, k] = sv * db[i, k]
        return 3
    if code == VOLUME_BEND_U or code == VOLUME_BEND_V:
        ax = 0 if code == VOLUME_BEND_U else 1
        sv = s[sidx[r, 0]]
        _darboux_row(q, fidx[r, 0], fidx[r, 1], par[r, 0], om, da, db)
        sv3 = sv * sv * sv
        W[0] = sv3 * om[ax] - par[r, 1]
        Js[0, 0] = 3.0 * sv * sv * om[ax]
        for k in range(3):
            Jf[0, 0, k] = sv3 * da[ax, k]
            Jf[0, 1, k] = sv3 * db[ax, k]
        return 1
    if code == COLLISION:
        al, be = par[r, 0], par[r, 1]
        w0, w1, w2, w3 = 1.0 - al, al, -(1.0 - be), -be
        dist2 = 0.0
        for i in range(3):
            om[i] = w0 * c[cidx[r, 0], i] + w1 * c[cidx[r, 1], i] + w2 * c[cidx[r, 2], i] + w3 * c[cidx[r, 3], i]
            dist2 += om[i] * om[i]
        dist = np.sqrt(dist2)
        ra = (1.0 - al) * s[sidx[r, 0]] * par[r, 2] + al * s[sidx[r, 1]] * par[r, 3]
        rb = (1.0 - be) * s[sidx[r, 2]] * par[r, 4] + be * s[sidx[r, 3]] * par[r, 5]
        W[0] = dist - ra - rb
        for i in range(3):
            n_i = om[i] / dist if dist > 1e-12 else par[r, 6 + i]
            Jc[0, 0, i] = w0 * n_i
            Jc[0, 1, i] = w1 * n_i
            Jc[0, 2, i] = w2 * n_i
            Jc[0, 3, i] = w3 * n_i
        Js[0, 0] = -(1.0 - al) * par[r, 2]
        Js[0, 1] = -al * par[r, 3]
        Js[0, 2] = -(1.0 - be) * par[r, 4]
        Js[0, 3] = -be * par[r, 5]
        return 1
    if code == HALF_PLANE:
        v = cidx[r, 0]
        W[0] = par[r, 0] * c[v, 0] + par[r, 1] * c[v, 1] + par[r, 2] * c[v, 2] - par[r, 3] - s[sidx[r, 0]] * par[r, 4]
        for i in range(3):
            Jc[0, 0, i] = par[r, i]
        Js[0, 0] = -par[r, 4]
        return 1
    # PIN
    v = cidx[r, 0]
    for i in range(3):
        W[i] = c[v, i] - par[r, i]
        Jc[i, 0, i] = 1.0
    return 3


@_jit
def _solve3(S, b, x):
    """Cramer's rule; returns False for a (relatively) singular system."""
    det = (S[0, 0] * (S[1, 1] * S[2, 2] - S[1, 2] * S[2, 1])
           - S[0, 1] * (S[1, 0] * S[2, 2] - S[1, 2] * S[2, 0])
           + S[0, 2] * (S[1, 0] * S[2, 1] - S[1, 1] * S[2, 0]))  # fmt: skip
    scale = abs(S[0, 0] * S[1, 1] * S[2, 2])
    if not abs(det) > 1e-12 * max(scale, 1e-300):
        return False
    inv = 1.0 / det
    x[0] = inv * (b[0] * (S[1, 1] * S[2, 2] - S[1, 2] * S[2, 1])
                  - S[0, 1] * (b[1] * S[2, 2] - S[1, 2] * b[2])
                  + S[0, 2] * (b[1] * S[2, 1] - S[1, 1] * b[2]))  # fmt: skip
    x[1] = inv * (S[0, 0] * (b[1] * S[2, 2] - S[1, 2] * b[2])
                  - b[0] * (S[1, 0] * S[2, 2] - S[1, 2] * S[2, 0])
                  + S[0, 2] * (S[1, 0] * b[2] - b[1] * S[2, 0]))  # fmt: skip
    x[2] = inv * (S[0, 0] * (S[1, 1] * b[2] - b[1] * S[2, 1])
                  - S[0, 1] * (S[1, 0] * b[2] - b[1] * S[2, 0])
                  + b[0] * (S[1, 0] * S[2, 1] - S[1, 1] * S[2, 0]))  # fmt: skip
    return True


@_jit
def sweep(kind, cidx, sidx, fidx, stiff, par, unilateral, lam, c, s, q, inv_c, inv_s, inv_f, h, beta, norms):
    """One Jacobi sweep in place. ``norms`` (N_KINDS, 2) receives Σ‖W‖² and
    Σ‖W − K⁻¹λ‖² per kind. Returns (skipped rows, first non-finite row or -1,
    largest applied update)."""
    n_v = c.shape[0]
    n_e = q.shape[0]
    acc_c = np.zeros((n_v, 3))
    acc_s = np.zeros(n_v)
    acc_f = np.zeros((n_e, 3))
    cnt_c = np.zeros(n_v)
    cnt_s = np.zeros(n_v)
    cnt_f = np.zeros(n_e)
    W = np.zeros(3)
    Jc = np.zeros((3, 4, 3))
    Js = np.zeros((3, 4))
    Jf = np.zeros((3, 2, 3))
    m = np.zeros((3, 3))
    om = np.zeros(3)
    da = np.zeros((3, 3))
    db = np.zeros((3, 3))
    S = np.zeros((3, 3))
    rhs = np.zeros(3)
    dl = np.zeros(3)
    comp = np.zeros(3)
    live = np.zeros(3, dtype=np.bool_)
    h2 = h * h
    skipped = 0
    bad = -1
    for r in range(kind.shape[0]):
        code = kind[r]
        d = _eval_row(code, r, cidx, sidx, fidx, par, c, s, q, W, Jc, Js, Jf, m, om, da, db)
        for i in range(d):
            live[i] = stiff[r, i] > 0.0
            comp[i] = 1.0 / stiff[r, i] if live[i] else 0.0
            if not live[i]:
                W[i] = 0.0
            if not np.isfinite(comp[i]):
                comp[i] = 0.0
            rhs[i] = W[i] - comp[i] * lam[r, i]
            norms[code, 0] += W[i] * W[i]
            norms[code, 1] += rhs[i] * rhs[i]
        any_live = False
        for i in range(d):
            any_live = any_live or live[i]
        if not any_live:
            continue
        for i in range(d):
            for j in range(d):
                acc = 0.0
                for a in range(4):
                    vi = cidx[r, a]
                    if vi >= 0:
                        ic = inv_c[vi]
                        for k in range(3):
                            acc += Jc[i, a, k] * ic * Jc[j, a, k]
                    si = sidx[r, a]
                    if si >= 0:
                        acc += Js[i, a] * inv_s[si] * Js[j, a]
                for a in range(2):
                    ei = fidx[r, a]
                    if ei >= 0:
                        for k in range(3):
                            acc += Jf[i, a, k] * inv_f[ei, k] * Jf[j, a, k]
                S[i, j] = h2 * acc
            S[i, i] += comp[i]
        for i in range(d):
            if not live[i]:
                for j in range(d):
                    S[i, j] = 0.0
                    S[j, i] = 0.0
                S[i, i] = 1.0
        ok = True
        if d == 1:
            if abs(S[0, 0]) > 1e-300:
                dl[0] = beta * rhs[0] / S[0, 0]
            else:
                ok = False
        else:
            ok = _solve3(S, rhs, dl)
            if ok:
                for i in range(3):
                    dl[i] *= beta
        if not ok:
            skipped += 1
            continue
        finite = True
        for i in range(d):
            if not np.isfinite(dl[i]):
                finite = False
        if not finite:
            if bad < 0:
                bad = r
            continue
        moved = False
        held = False
        for i in range(d):
            if unilateral[r]:
                new = min(lam[r, i] + dl[i], 0.0)
                dl[i] = new - lam[r, i]
            lam[r, i] += dl[i]
            if dl[i] != 0.0:
                moved = True
            if lam[r, i] != 0.0:
                held = True
        if unilateral[r] and not (moved or held):
            continue
        for a in range(4):
            vi = cidx[r, a]
            if vi >= 0 and inv_c[vi] > 0.0:
                for k in range(3):
                    g = 0.0
                    for i in range(d):
                        g += Jc[i, a, k] * dl[i]
                    acc_c[vi, k] -= h2 * inv_c[vi] * g
                cnt_c[vi] += 1.0
            si = sidx[r, a]
            if si >= 0 and inv_s[si] > 0.0:
                g = 0.0
                for i in range(d):
                    g += Js[i, a] * dl[i]
                acc_s[si] -= h2 * inv_s[si] * g
                cnt_s[si] += 1.0
        for a in range(2):
            ei = fidx[r, a]
            if ei >= 0 and (inv_f[ei, 0] > 0.0 or inv_f[ei, 1] > 0.0 or inv_f[ei, 2] > 0.0):
                for k in range(3):
                    g = 0.0
                    for i in range(d):
                        g += Jf[i, a, k] * dl[i]
                    acc_f[ei, k] -= h2 * inv_f[ei, k] * g
                cnt_f[ei] += 1.0
    if bad >= 0:
        return skipped, bad, 0.0
    biggest = 0.0
    for v in range(n_v):
        nc = max(cnt_c[v], 1.0)
        for k in range(3):
            u = acc_c[v, k] / nc
            c[v, k] += u
            biggest = max(biggest, abs(u))
        u = acc_s[v] / max(cnt_s[v], 1.0)
        s[v] = max(s[v] + u, MIN_SCALE)
        biggest = max(biggest, abs(u))
    for e in range(n_e):
        nf = max(cnt_f[e], 1.0)
        tx, ty, tz = acc_f[e, 0] / nf, acc_f[e, 1] / nf, acc_f[e, 2] / nf
        biggest = max(biggest, abs(tx), abs(ty), abs(tz))
        ang = np.sqrt(tx * tx + ty * ty + tz * tz)
        if ang == 0.0:
            continue
        k = np.sin(0.5 * ang) / ang
        ex, ey, ez, ew = k * tx, k * ty, k * tz, np.cos(0.5 * ang)
        x, y, z, w = q[e, 0], q[e, 1], q[e, 2], q[e, 3]
        nx = w * ex + ew * x + y * ez - z * ey
        ny = w * ey + ew * y + z * ex - x * ez
        nz = w * ez + ew * z + x * ey - y * ex
        nw = w * ew - x * ex - y * ey - z * ez
        norm = np.sqrt(nx * nx + ny * ny + nz * nz + nw * nw)
        q[e, 0] = nx / norm
        q[e, 1] = ny / norm
        q[e, 2] = nz / norm
        q[e, 3] = nw / norm
    return skipped, bad, biggest


@_jit
def row_residuals(kind, cidx, sidx, fidx, par, c, s, q, norm, low):
    """Per-row residual norm and smallest residual component, without updating."""
    W = np.zeros(3)
    Jc = np.zeros((3, 4, 3))
    Js = np.zeros((3, 4))
    Jf = np.zeros((3, 2, 3))
    m = np.zeros((3, 3))
    om = np.zeros(3)
    da = np.zeros((3, 3))
    db = np.zeros((3, 3))
    for r in range(kind.shape[0]):
        d = _eval_row(kind[r], r, cidx, sidx, fidx, par, c, s, q, W, Jc, Js, Jf, m, om, da, db)
        acc = 0.0
        lo = W[0]
        for i in range(d):
            acc += W[i] * W[i]
            lo = min(lo, W[i])
        norm[r] = np.sqrt(acc)
        low[r] = lo


def residual_rows(packed, state):
    n = len(packed.kind)
    norm, low = np.zeros(n), np.zeros(n)
    if n:
        row_residuals(packed.kind, packed.centers, packed.scales, packed.frames, packed.params,
                      state.centers, np.ascontiguousarray(state.scales), state.frames, norm, low)
    return norm, low


@_jit
def _qmul(a, b, out):
    ax, ay, az, aw = a[0], a[1], a[2], a[3]
    bx, by, bz, bw = b[0], b[1], b[2], b[3]
    out[0] = aw * bx + bw * ax + ay * bz - az * by
    out[1] = aw * by + bw * ay + az * bx - ax * bz
    out[2] = aw * bz + bw * az + ax * by - ay * bx
    out[3] = aw * bw - ax * bx - ay * by - az * bz


@_jit
def extract_rotations(a, q, tol, max_iter):
    """Torque-iteration rotation extraction for each 3×3 in ``a``; ``q`` (G, 4) is the
    warm start and is overwritten with the result."""
    m = np.zeros((3, 3))
    e = np.zeros(4)
    t = np.zeros(4)
    for g in range(a.shape[0]):
        for _ in range(max_iter):
            _rotation(q, g, m)
            wx = wy = wz = 0.0
            den = 0.0
            for k in range(3):
                rx, ry, rz = m[0, k], m[1, k], m[2, k]
                ax, ay, az = a[g, 0, k], a[g, 1, k], a[g, 2, k]
                wx += ry * az - rz * ay
                wy += rz * ax - rx * az
                wz += rx * ay - ry * ax
                den += rx * ax + ry * ay + rz * az
            den = abs(den) + 1e-300
            wx, wy, wz = wx / den, wy / den, wz / den
            ang = np.sqrt(wx * wx + wy * wy + wz * wz)
            if ang < tol:
                break
            half = 0.5 * ang
            sn = np.sin(half) / ang
            e[0], e[1], e[2], e[3] = sn * wx, sn * wy, sn * wz, np.cos(half)
            _qmul(e, q[g], t)
            nrm = np.sqrt(t[0] * t[0] + t[1] * t[1] + t[2] * t[2] + t[3] * t[3])
            for i in range(4):
                q[g, i] = t[i] / nrm


# --- deepest-penetration search ---------------------------------------------


@_jit
def _project(x0, x1, x2, p, o):
    """Signed distance of point x to pill ``p[o:o+8]`` = (c1, r1, c2, r2) and its t."""
    c10, c11, c12, r1 = p[o], p[o + 1], p[o + 2], p[o + 3]
    c20, c21, c22, r2 = p[o + 4], p[o + 5], p[o + 6], p[o + 7]
    a0, a1, a2 = c10 - c20, c11 - c21, c12 - c22
    l = np.sqrt(a0 * a0 + a1 * a1 + a2 * a2)
    if abs(r1 - r2) >= l:
        d1 = np.sqrt((x0 - c10) ** 2 + (x1 - c11) ** 2 + (x2 - c12) ** 2) - r1
        d2 = np.sqrt((x0 - c20) ** 2 + (x1 - c21) ** 2 + (x2 - c22) ** 2) - r2
        if d2 < d1:
            return 1.0, d2
        return 0.0, min(d1, d2)
    j0, j1, j2 = a0 / l, a1 / l, a2 / l
    a = (x0 - c10) * j0 + (x1 - c11) * j1 + (x2 - c12) * j2
    q0, q1, q2 = x0 - (c10 + a * j0), x1 - (c11 + a * j1), x2 - (c12 + a * j2)
    radial = np.sqrt(q0 * q0 + q1 * q1 + q2 * q2)
    sin_t = min(max((r1 - r2) / l, -1.0), 1.0)
    tan_t = sin_t / np.sqrt(max(1.0 - sin_t * sin_t, 1e-300))
    t = min(max(-(a + radial * tan_t) / l, 0.0), 1.0)
    e0 = x0 - (c10 + t * (c20 - c10))
    e1 = x1 - (c11 + t * (c21 - c11))
    e2 = x2 - (c12 + t * (c22 - c12))
    return t, np.sqrt(e0 * e0 + e1 * e1 + e2 * e2) - (r1 + t * (r2 - r1))


@_jit
def _pair_gap(alpha, p, oa, ob):
    """Gap between the interpolated sphere at ``alpha`` on pill a and pill b, and b's t."""
    x0 = p[oa] + alpha * (p[oa + 4] - p[oa])
    x1 = p[oa + 1] + alpha * (p[oa + 5] - p[oa + 1])
    x2 = p[oa + 2] + alpha * (p[oa + 6] - p[oa + 2])
    ra = p[oa + 3] + alpha * (p[oa + 7] - p[oa + 3])
    beta, d = _project(x0, x1, x2, p, ob)
    return d - ra, beta


@_jit
def _search_along(p, oa, ob, iterations, warm, width):
    lo, hi = 0.0, 1.0
    if np.isfinite(warm):
        left = min(max(warm - width, 0.0), 1.0)
        right = min(max(warm + width, 0.0), 1.0)
        f0, _ = _pair_gap(warm, p, oa, ob)
        fl, _ = _pair_gap(left, p, oa, ob)
        fr, _ = _pair_gap(right, p, oa, ob)
        if f0 <= fl and f0 <= fr:
            lo, hi = left, right
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        delta = 1e-3 * (hi - lo)
        f1, _ = _pair_gap(mid - delta, p, oa, ob)
        f2, _ = _pair_gap(mid + delta, p, oa, ob)
        if f1 <= f2:
            hi = mid + delta
        else:
            lo = mid - delta
    alpha = 0.5 * (lo + hi)
    f, beta = _pair_gap(alpha, p, oa, ob)
    for edge in (0.0, 1.0):
        fe, be = _pair_gap(edge, p, oa, ob)
        if fe < f:
            alpha, beta, f = edge, be, fe
    return alpha, beta, f


@_jit
def pair_search(pills, iterations, warm_a, warm_b, width, alpha, beta, gap):
    """Compiled :func:`viper.collision.search_pairs`; ``pills`` is (n, 16) rows of both pills."""
    for k in range(pills.shape[0]):
        p = pills[k]
        al, be, f_ab = _search_along(p, 0, 8, iterations, warm_a[k], width)
        be2, al2, f_ba = _search_along(p, 8, 0, iterations, warm_b[k], width)
        if f_ba < f_ab:
            alpha[k], beta[k], gap[k] = al2, be2, f_ba
        else:
            alpha[k], beta[k], gap[k] = al, be, f_ab


def search_pill_pairs(pa, pb, iterations=10, warm_alpha=None, warm_beta=None, width=1.0 / 32.0):
    """Pack ``(c1, r1, c2, r2)`` tuples and run the compiled pair search."""
    n = len(pa[1])
    rows = np.empty((n, 16))
    for o, (c1, r1, c2, r2) in ((0, pa), (8, pb)):
        rows[:, o : o + 3] = c1
        rows[:, o + 3] = r1
        rows[:, o + 4 : o + 7] = c2
        rows[:, o + 7] = r2
    nan = np.full(n, np.nan)
    wa = nan if warm_alpha is None else np.asarray(warm_alpha, dtype=float)
    wb = nan if warm_beta is None else np.asarray(warm_beta, dtype=float)
    alpha, beta, gap = np.empty(n), np.empty(n), np.empty(n)
    pair_search(rows, iterations, wa, wb, width, alpha, beta, gap)
    return alpha, beta, gap
