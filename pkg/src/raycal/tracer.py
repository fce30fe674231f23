"""Deterministic path tracing: specular reflections, wedge diffractions and
single-bounce diffuse scattering, with field evaluation.

Specular search uses the image method for reflection runs; sequences
containing diffractions fix the element order and solve the stationary-length
point on each edge with a damped Newton iteration (the length is convex in
the edge parameters, so the interior stationary point is the minimum).
All candidate classes are solved as flat numpy batches.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import antenna, geom, utd
from .scene import Material, Scene, RadioNode, material_permittivity

C = geom.C_VACUUM


class InteractionKind(str, Enum):
    REFLECTION = "reflection"
    DIFFRACTION = "diffraction"
    SCATTERING = "scattering"
    TRANSMISSION = "transmission"


@dataclass
class Interaction:
    kind: InteractionKind
    target: str
    point: np.ndarray
    wedge: object = field(default=None, repr=False)  # set for diffractions


@dataclass
class TraceConfig:
    max_reflections: int = 2
    max_diffractions: int = 2
    max_total_interactions: int = 4
    enable_diffuse: bool = True
    diffuse_tile_area: float = 0.25      # m^2
    min_path_gain_db: float = -60.0      # relative to free space at the direct distance
    frequency_ghz: float = 28.0
    enable_transmission: bool = False
    diffuse_seed: int = 0
    max_order4_candidates: int = 3000    # per arrangement class, nearest-first
    order4_diffraction_bound_db: float = 6.0

    def validate(self):
        if self.max_reflections < 0 or self.max_diffractions < 0:
            raise ValueError("interaction budgets must be non-negative")
        if self.max_total_interactions < max(self.max_reflections, self.max_diffractions):
            raise ValueError("max_total_interactions below a per-kind budget")


@dataclass
class PropPath:
    """One traced ray from tx to rx.

    ``jones`` couples the (V, H) field components at the departure direction
    to those at the arrival direction, normalized to the 1/L spherical
    spreading convention used by :func:`path_gain`; it is antenna independent.
    """

    interactions: list
    points: np.ndarray          # (m+2, 3) polyline including endpoints
    delay: float                # s
    length: float               # m
    aod: tuple                  # (az_deg, el_deg) at tx
    aoa: tuple                  # (az_deg, el_deg) at rx, toward the incoming ray
    jones: np.ndarray           # 2x2 complex
    is_diffuse: bool
    env_db: float
    tx_id: str
    rx_id: str

    @property
    def n_reflections(self):
        return sum(1 for i in self.interactions if i.kind == InteractionKind.REFLECTION)

    @property
    def n_diffractions(self):
        return sum(1 for i in self.interactions if i.kind == InteractionKind.DIFFRACTION)

    def signature(self):
        pts = ";".join(f"{i.kind.value[0]}:{i.target}" for i in self.interactions)
        return f"{self.tx_id}>{pts}>{self.rx_id}"


# ---------------------------------------------------------------------------
# coefficients
# ---------------------------------------------------------------------------

def reflect_coeff(m: Material, theta_i: float, f_ghz: float):
    """Fresnel reflection pair (gamma_TE, gamma_TM) for incidence from air.

    theta_i is measured from the surface normal.  The sign convention makes a
    perfect conductor (-1, +1); at normal incidence both polarizations have
    magnitude |(1 - sqrt(eps)) / (1 + sqrt(eps))|.
    """
    if m.is_pec:
        return complex(-1.0), complex(1.0)
    eps = material_permittivity(m, f_ghz)
    ct = np.cos(theta_i)
    st2 = np.sin(theta_i) ** 2
    root = np.sqrt(eps - st2)
    gamma_te = (ct - root) / (ct + root)
    gamma_tm = (eps * ct - root) / (eps * ct + root)
    return complex(gamma_te), complex(gamma_tm)


def diffract_coeff(wedge, s_in, s_out, dist_in, dist_out, f_ghz, scene: Scene = None):
    """2x2 (V, H) coupling of a single edge diffraction, spreading included.

    The returned matrix is normalized so a one-diffraction path contributes
    amplitude (lambda / 4 pi L) * coupling with L = dist_in + dist_out.
    Returns None for geometry off the Keller cone or inside the solid.
    """
    k = 2.0 * np.pi * f_ghz * 1e9 / C
    sin_b2 = max(1e-12, 1.0 - np.dot(s_in, wedge.edge_dir) ** 2)
    dist_param = dist_in * dist_out / (dist_in + dist_out) * sin_b2

    def face_refl(face_az, grazing):
        mat = scene.materials[wedge.material] if scene is not None else None
        if mat is None or mat.is_pec:
            return -1.0, 1.0
        theta = np.clip(np.pi / 2 - grazing, 0.0, np.pi / 2 - 1e-9)
        return reflect_coeff(mat, theta, f_ghz)

    dy = utd.diffraction_dyadic(wedge, s_in, s_out, dist_param, k, face_refl)
    if dy is None:
        return None
    spread = np.sqrt((dist_in + dist_out) / (dist_in * dist_out))
    b_in = np.column_stack(geom.pol_basis(-s_in))   # basis at the approach direction
    b_out = np.column_stack(geom.pol_basis(s_out))
    return spread * (b_out.T @ dy @ b_in)


# ---------------------------------------------------------------------------
# field assembly along a validated polyline
# ---------------------------------------------------------------------------

def _reflection_dyadic(s_i, s_r, normal, gamma_te, gamma_tm):
    cross = np.cross(s_i, normal)
    nc = np.linalg.norm(cross)
    if nc < 1e-9:
        e_perp = geom.pol_basis(s_i)[1]
    else:
        e_perp = cross / nc
    e_par_i = np.cross(e_perp, s_i)
    e_par_r = np.cross(e_perp, s_r)
    return (gamma_te * np.outer(e_perp, e_perp)
            + gamma_tm * np.outer(e_par_r, e_par_i))


def _assemble_jones(scene: Scene, pts, inters, f_ghz, wood_crossings=()):
    """Cumulative 2x2 coupling for a specular polyline; None when a
    diffraction is geometrically invalid."""
    k = 2.0 * np.pi * f_ghz * 1e9 / C
    legs = np.diff(pts, axis=0)
    leg_len = np.linalg.norm(legs, axis=1)
    dirs = legs / leg_len[:, None]
    total = float(leg_len.sum())

    prop = np.eye(3, dtype=complex)
    spread = 1.0
    cum = 0.0
    last_diff_cum = None
    for idx, inter in enumerate(inters):
        cum += leg_len[idx]
        s_i = dirs[idx]
        s_r = dirs[idx + 1]
        if inter.kind == InteractionKind.REFLECTION:
            surf = scene.surface(inter.target)
            mat = scene.material_of(surf)
            ct = abs(float(np.dot(s_i, surf.normal)))
            theta = np.arccos(np.clip(ct, 0.0, 1.0))
            g_te, g_tm = reflect_coeff(mat, theta, f_ghz)
            if surf.scatters:
                s_c = mat.scattering_coeff
                g_te *= np.sqrt(1.0 - s_c ** 2)
                g_tm *= np.sqrt(1.0 - s_c ** 2)
            prop = _reflection_dyadic(s_i, s_r, surf.normal, g_te, g_tm) @ prop
        elif inter.kind == InteractionKind.DIFFRACTION:
            wedge = inter.wedge
            rho = cum if last_diff_cum is None else cum - last_diff_cum
            s_next = _next_anchor_distance(leg_len, inters, idx, total, cum)
            sin_b2 = max(1e-12, 1.0 - float(np.dot(s_i, wedge.edge_dir)) ** 2)
            dist_param = rho * s_next / (rho + s_next) * sin_b2

            def face_refl(face_az, grazing, _m=wedge.material):
                mat = scene.materials[_m]
                if mat.is_pec:
                    return -1.0, 1.0
                theta = np.clip(np.pi / 2 - grazing, 0.0, np.pi / 2 - 1e-9)
                return reflect_coeff(mat, theta, f_ghz)

            dy = utd.diffraction_dyadic(wedge, s_i, s_r, dist_param, k, face_refl)
            if dy is None:
                return None
            prop = dy @ prop
            spread *= np.sqrt(rho / (s_next * (rho + s_next)))
            if last_diff_cum is None:
                spread *= total / cum   # swap 1/L for 1/rho_1 up to the first edge
            last_diff_cum = cum
    for theta, mat, thickness, s_dir, s_norm in wood_crossings:
        g_te, g_tm = reflect_coeff(mat, theta, f_ghz)
        eps = material_permittivity(mat, f_ghz)
        alpha = k * abs(np.imag(np.sqrt(eps)))
        t_te = np.sqrt(max(0.0, 1.0 - abs(g_te) ** 2)) * np.exp(-alpha * thickness)
        t_tm = np.sqrt(max(0.0, 1.0 - abs(g_tm) ** 2)) * np.exp(-alpha * thickness)
        # thin slab: TE/TM scaling about the crossing plane, direction unchanged
        prop = _reflection_dyadic(s_dir, s_dir, s_norm, t_te, t_tm) @ prop

    u_dep = dirs[0]
    u_arr = -dirs[-1]
    b_t = np.column_stack(geom.pol_basis(u_dep))
    b_r = np.column_stack(geom.pol_basis(u_arr))
    return spread * (b_r.T @ prop @ b_t)


def _any_perp(v):
    a = np.array([1.0, 0.0, 0.0]) if abs(v[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    return geom.unit(np.cross(v, a))


def _fresnel_batch(eps, pec_mask, theta):
    """Batched Fresnel pair for per-candidate complex permittivities."""
    ct = np.cos(theta)
    st2 = np.sin(theta) ** 2
    root = np.sqrt(eps - st2)
    g_te = (ct - root) / (ct + root)
    g_tm = (eps * ct - root) / (eps * ct + root)
    g_te = np.where(pec_mask, -1.0 + 0j, g_te)
    g_tm = np.where(pec_mask, 1.0 + 0j, g_tm)
    return g_te, g_tm


def _outer_batch(a, b):
    return a[:, :, None] * b[:, None, :]


def _batch_jones(scene: Scene, kinds: str, element_ids, polys, f_ghz):
    """Vectorized 2x2 couplings for all candidates of one class.

    Returns (jones (c,2,2), valid (c,)); invalid rows have out-of-region
    diffraction geometry.
    """
    g = scene.geometry
    t = _scene_tables(scene)
    c = len(polys)
    k = 2.0 * np.pi * f_ghz * 1e9 / C
    legs = np.diff(polys, axis=1)
    lens = np.linalg.norm(legs, axis=2)
    dirs = legs / np.maximum(lens, 1e-12)[:, :, None]
    total = lens.sum(axis=1)

    mats = list(scene.materials.values())
    mat_index = {m.name: i for i, m in enumerate(mats)}
    eps_by_mat = np.array([1.0 + 0j if m.is_pec else material_permittivity(m, f_ghz)
                           for m in mats])
    pec_by_mat = np.array([m.is_pec for m in mats])
    s_by_mat = np.array([m.scattering_coeff for m in mats])
    surf_mat = np.array([mat_index[s.material] for s in scene.surfaces], dtype=int) \
        if scene.surfaces else np.zeros(0, dtype=int)
    surf_scatters = g.scatters
    wedge_mat = np.array([mat_index[w.material] for w in scene.wedges], dtype=int) \
        if scene.wedges else np.zeros(0, dtype=int)
    wedge_metal = np.array([w.is_metal for w in scene.wedges], dtype=bool) \
        if scene.wedges else np.zeros(0, dtype=bool)

    prop = np.broadcast_to(np.eye(3, dtype=complex), (c, 3, 3)).copy()
    spread = np.ones(c)
    valid = np.ones(c, dtype=bool)

    wedge_cols = [i for i, kk in enumerate(kinds) if kk == "D"]
    cum = np.cumsum(lens, axis=1)
    prev_diff_cum = None

    for col, kind in enumerate(kinds):
        idx = element_ids[:, col]
        d_in = dirs[:, col]
        d_out = dirs[:, col + 1]
        if kind == "R":
            n = g.normals[idx]
            ct = np.abs(np.einsum("ck,ck->c", d_in, n))
            theta = np.arccos(np.clip(ct, 0.0, 1.0))
            mi = surf_mat[idx]
            g_te, g_tm = _fresnel_batch(eps_by_mat[mi], pec_by_mat[mi], theta)
            scat = surf_scatters[idx]
            f_s = np.where(scat, np.sqrt(1.0 - s_by_mat[mi] ** 2), 1.0)
            g_te = g_te * f_s
            g_tm = g_tm * f_s
            e_perp = np.cross(d_in, n)
            nrm = np.linalg.norm(e_perp, axis=1)
            fallback = geom.pol_basis_batch(d_in)[1]
            e_perp = np.where(nrm[:, None] > 1e-9, e_perp / np.maximum(nrm, 1e-12)[:, None],
                              fallback)
            e_par_i = np.cross(e_perp, d_in)
            e_par_r = np.cross(e_perp, d_out)
            dy = (g_te[:, None, None] * _outer_batch(e_perp, e_perp)
                  + g_tm[:, None, None] * _outer_batch(e_par_r, e_par_i))
            prop = np.einsum("cij,cjk->cik", dy, prop)
        else:
            e = t["w_dir"][idx]
            t0 = t["w_t0"][idx]
            waxis = t["w_axis"][idx]
            ext = t["w_ext"][idx]
            npar = ext / np.pi
            ci = np.einsum("ck,ck->c", d_in, e)
            sin_b = np.sqrt(np.clip(1.0 - ci ** 2, 1e-12, None))
            beta0 = np.arccos(np.clip(ci, -1.0, 1.0))

            def face_az(v):
                p = v - np.einsum("ck,ck->c", v, e)[:, None] * e
                nn = np.maximum(np.linalg.norm(p, axis=1), 1e-12)
                p = p / nn[:, None]
                return np.arctan2(np.einsum("ck,ck->c", p, waxis),
                                  np.einsum("ck,ck->c", p, t0)) % (2 * np.pi)

            phi_in = face_az(-d_in)
            phi_out = face_az(d_out)
            valid &= (phi_in > 1e-9) & (phi_in < ext - 1e-9)
            valid &= (phi_out > 1e-9) & (phi_out < ext - 1e-9)

            rho = cum[:, col] if prev_diff_cum is None else cum[:, col] - prev_diff_cum
            # unfolded distance to the next diffraction point or the receiver
            nxt = [cc for cc in wedge_cols if cc > col]
            s_next = (cum[:, nxt[0]] - cum[:, col]) if nxt else (total - cum[:, col])
            dist_param = rho * s_next / (rho + s_next) * sin_b ** 2

            mw = wedge_mat[idx]
            metal = wedge_metal[idx]
            g_sym = 0.5 * (phi_in + phi_out)   # reciprocal under direction swap
            th0 = np.clip(np.pi / 2 - g_sym, 0.0, np.pi / 2 - 1e-9)
            thn = np.clip(np.pi / 2 - (ext - g_sym), 0.0, np.pi / 2 - 1e-9)
            r0s, r0h = _fresnel_batch(eps_by_mat[mw], pec_by_mat[mw] | metal, th0)
            rns, rnh = _fresnel_batch(eps_by_mat[mw], pec_by_mat[mw] | metal, thn)
            d_soft, d_hard = utd.scalar_coefficients(
                npar, phi_in, phi_out, beta0, k, np.maximum(dist_param, 1e-12),
                r0_soft=r0s, rn_soft=rns, r0_hard=r0h, rn_hard=rnh)

            phi_hat_in = -np.cross(e, d_in)
            phi_hat_in /= np.maximum(np.linalg.norm(phi_hat_in, axis=1), 1e-12)[:, None]
            beta_hat_in = np.cross(phi_hat_in, d_in)
            phi_hat_out = np.cross(e, d_out)
            phi_hat_out /= np.maximum(np.linalg.norm(phi_hat_out, axis=1), 1e-12)[:, None]
            beta_hat_out = np.cross(phi_hat_out, d_out)
            dy = -(d_soft[:, None, None] * _outer_batch(beta_hat_out, beta_hat_in)
                   + d_hard[:, None, None] * _outer_batch(phi_hat_out, phi_hat_in))
            prop = np.einsum("cij,cjk->cik", dy, prop)

            spread = spread * np.sqrt(rho / (s_next * (rho + s_next)))
            if prev_diff_cum is None:
                spread = spread * total / cum[:, col]
            prev_diff_cum = cum[:, col]

    u_dep = dirs[:, 0]
    u_arr = -dirs[:, -1]
    vt, ht = geom.pol_basis_batch(u_dep)
    vr, hr = geom.pol_basis_batch(u_arr)
    b_t = np.stack([vt, ht], axis=2)          # (c, 3, 2)
    b_r = np.stack([vr, hr], axis=2)
    jones = np.einsum("cim,cij,cjn->cmn", b_r, prop, b_t)
    return spread[:, None, None] * jones, valid


def _next_anchor_distance(leg_len, inters, idx, total, cum):
    """Unfolded distance from the current diffraction point to the next
    diffraction point, or to the receiver if none follows."""
    run = 0.0
    for j in range(idx + 1, len(inters)):
        run += leg_len[j]
        if inters[j].kind == InteractionKind.DIFFRACTION:
            return run
    return total - cum


def path_gain(p: PropPath, f_ghz: float, tx_antenna="isotropic", rx_antenna="isotropic"):
    """Complex V-port to V-port amplitude at f (GHz): Friis spreading, the
    path coupling, envelope loss and the propagation phase."""
    lam = C / (f_ghz * 1e9)
    e_t = antenna.pattern(tx_antenna)(*p.aod) if isinstance(tx_antenna, str) else tx_antenna(*p.aod)
    e_r = antenna.pattern(rx_antenna)(*p.aoa) if isinstance(rx_antenna, str) else rx_antenna(*p.aoa)
    coupling = e_r @ (p.jones @ e_t)
    phase = np.exp(-2j * np.pi * f_ghz * 1e9 * p.delay)
    return (lam / (4.0 * np.pi * p.length)) * coupling * phase * 10.0 ** (-p.env_db / 20.0)


def path_power_dbm(p: PropPath, f_ghz, tx_power_dbm, tx_antenna, rx_antenna, lna_db=0.0):
    a = path_gain(p, f_ghz, tx_antenna, rx_antenna)
    mag = abs(a)
    if mag == 0.0:
        return -np.inf
    return tx_power_dbm + lna_db + 20.0 * np.log10(mag)


# ---------------------------------------------------------------------------
# candidate enumeration + batched stationary-point solvers
# ---------------------------------------------------------------------------

def _scene_tables(scene: Scene):
    if "trace_tables" in scene._cache:
        return scene._cache["trace_tables"]
    g = scene.geometry
    ns = g.n
    front = np.zeros((ns, ns), dtype=bool)   # front[i, j]: surface j has a vertex in front of i
    for i in range(ns):
        sd = (g.verts @ g.normals[i]) - g.plane_d[i]
        front[i] = (sd.max(axis=1) > 1e-9)
    facing = front & front.T
    np.fill_diagonal(facing, False)

    wedges = scene.wedges
    nw = len(wedges)
    w_start = np.array([w.edge_start for w in wedges]).reshape(nw, 3) if nw else np.zeros((0, 3))
    w_end = np.array([w.edge_end for w in wedges]).reshape(nw, 3) if nw else np.zeros((0, 3))
    w_dir = np.array([w.edge_dir for w in wedges]).reshape(nw, 3) if nw else np.zeros((0, 3))
    w_len = np.linalg.norm(w_end - w_start, axis=1) if nw else np.zeros(0)
    w_f0 = np.array([scene.surface_idx(w.face0_id) for w in wedges], dtype=int) if nw else np.zeros(0, int)
    w_f1 = np.array([scene.surface_idx(w.face1_id) for w in wedges], dtype=int) if nw else np.zeros(0, int)

    def behind_both(points):
        """(q, nw) mask: point strictly inside the solid of each wedge."""
        pts = np.atleast_2d(points)
        b0 = (pts @ g.normals[w_f0].T) - g.plane_d[w_f0][None, :] < -1e-9
        b1 = (pts @ g.normals[w_f1].T) - g.plane_d[w_f1][None, :] < -1e-9
        return b0 & b1

    # wedge edge vs surface front side: some part of the edge in front of the plane
    if nw and ns:
        d0 = (w_start @ g.normals.T) - g.plane_d[None, :]
        d1 = (w_end @ g.normals.T) - g.plane_d[None, :]
        edge_front = np.maximum(d0, d1) > 1e-9        # (nw, ns)
    else:
        edge_front = np.zeros((nw, ns), dtype=bool)

    # wedge/wedge: edge of b not fully inside the solid of a
    if nw:
        in_a0 = behind_both(w_start)
        in_a1 = behind_both(w_end)
        ww_ok = ~(in_a0 & in_a1)                      # (nw edges, nw solids) -> transpose care
        ww_ok = ww_ok.T & ww_ok                        # symmetric necessary condition
        np.fill_diagonal(ww_ok, False)
    else:
        ww_ok = np.zeros((0, 0), dtype=bool)

    w_t0 = np.array([w.t0 for w in wedges]).reshape(nw, 3) if nw else np.zeros((0, 3))
    w_ext = np.array([w.exterior_angle for w in wedges]) if nw else np.zeros(0)
    tables = {
        "facing": facing, "front": front,
        "w_start": w_start, "w_end": w_end, "w_dir": w_dir, "w_len": w_len,
        "w_f0": w_f0, "w_f1": w_f1, "behind_both": behind_both,
        "edge_front": edge_front, "ww_ok": ww_ok,
        "w_t0": w_t0, "w_axis": np.cross(w_dir, w_t0) if nw else np.zeros((0, 3)),
        "w_ext": w_ext,
        "centroids": np.array([s.centroid for s in scene.surfaces]).reshape(ns, 3) if ns else np.zeros((0, 3)),
        "w_mid": 0.5 * (w_start + w_end),
    }
    scene._cache["trace_tables"] = tables
    return tables


def _mirror_batch(points, surf_idx, g):
    n = g.normals[surf_idx]
    d = g.plane_d[surf_idx]
    h = np.einsum("ck,ck->c", points, n) - d
    return points - 2.0 * h[:, None] * n


def _row_norm(x):
    return np.sqrt(np.einsum("ck,ck->c", x, x))


def _newton_edge_1d(a_pts, b_pts, e0, e_dir, e_len):
    """Batched minimizer of |A - P(t)| + |P(t) - B| on segments P = e0 + t*e_dir."""
    t = np.clip(np.einsum("ck,ck->c", 0.5 * (a_pts + b_pts) - e0, e_dir), 0.0, e_len)
    for it in range(30):
        p = e0 + t[:, None] * e_dir
        u = p - a_pts
        v = p - b_pts
        du = np.maximum(_row_norm(u), 1e-12)
        dv = np.maximum(_row_norm(v), 1e-12)
        ue = np.einsum("ck,ck->c", u, e_dir)
        ve = np.einsum("ck,ck->c", v, e_dir)
        g1 = ue / du + ve / dv
        h = (du ** 2 - ue ** 2) / du ** 3 + (dv ** 2 - ve ** 2) / dv ** 3
        step = g1 / np.maximum(h, 1e-12)
        np.clip(step, -0.5 * (e_len + 1.0), 0.5 * (e_len + 1.0), out=step)
        t = np.clip(t - step, -0.2, e_len + 0.2)
        if it >= 7 and it % 2 and float(np.max(np.abs(step))) < 1e-11:
            break
    p = e0 + t[:, None] * e_dir
    u = p - a_pts
    v = p - b_pts
    du = np.maximum(_row_norm(u), 1e-12)
    dv = np.maximum(_row_norm(v), 1e-12)
    grad = np.einsum("ck,ck->c", u, e_dir) / du + np.einsum("ck,ck->c", v, e_dir) / dv
    ok = (t > 1e-6) & (t < e_len - 1e-6) & (np.abs(grad) < 1e-8) & (du > 1e-6) & (dv > 1e-6)
    return t, ok


def _newton_edge_2d(a_pts, e10, e1d, e1len, q0, qd, e20, e2d, e2len, b_pts):
    """Batched minimizer of |A-P1| + |P1-L2(t2)| + |P2(t2)-B| over two edges,
    where L2 = q0 + t2*qd is edge 2 seen through the mirrors separating the
    edges and P2 = e20 + t2*e2d is edge 2 in world coordinates.

    Runs a first pass on everything, then keeps refining only candidates whose
    minimum is strictly interior on both edges (boundary minima are not valid
    stationary paths)."""
    full = len(a_pts)
    t1_out = np.zeros(full)
    t2_out = np.zeros(full)
    ok_out = np.zeros(full, dtype=bool)

    t1 = np.full(full, 0.5) * e1len
    t2 = np.full(full, 0.5) * e2len
    live = None
    for it in range(34):
        if it == 10:
            live = ((t1 > 1e-4) & (t1 < e1len - 1e-4)
                    & (t2 > 1e-4) & (t2 < e2len - 1e-4))
            if not np.any(live):
                return t1_out, t2_out, ok_out
            (a_pts, e10, e1d, q0, qd, e20, e2d, b_pts) = (
                a_pts[live], e10[live], e1d[live], q0[live], qd[live],
                e20[live], e2d[live], b_pts[live])
            e1len, e2len, t1, t2 = e1len[live], e2len[live], t1[live], t2[live]
        p1 = e10 + t1[:, None] * e1d
        l2 = q0 + t2[:, None] * qd
        p2 = e20 + t2[:, None] * e2d
        u = p1 - a_pts
        w = p1 - l2
        v = p2 - b_pts
        du = np.maximum(_row_norm(u), 1e-12)
        dm = np.maximum(_row_norm(w), 1e-12)
        dv = np.maximum(_row_norm(v), 1e-12)
        ue = np.einsum("ck,ck->c", u, e1d)
        we1 = np.einsum("ck,ck->c", w, e1d)
        wq = np.einsum("ck,ck->c", w, qd)
        ve = np.einsum("ck,ck->c", v, e2d)
        g1 = ue / du + we1 / dm
        g2 = -wq / dm + ve / dv
        h11 = (du ** 2 - ue ** 2) / du ** 3 + (dm ** 2 - we1 ** 2) / dm ** 3
        h22 = (dm ** 2 - wq ** 2) / dm ** 3 + (dv ** 2 - ve ** 2) / dv ** 3
        e1q = np.einsum("ck,ck->c", e1d, qd)
        h12 = -e1q / dm + we1 * wq / dm ** 3
        det = h11 * h22 - h12 ** 2
        bad = det < 1e-12
        det = np.where(bad, 1.0, det)
        s1 = (-g1 * h22 + g2 * h12) / det
        s2 = (-g2 * h11 + g1 * h12) / det
        # coordinate fallback where the hessian is degenerate
        s1 = np.where(bad, -g1 / np.maximum(h11, 1e-9), s1)
        s2 = np.where(bad, -g2 / np.maximum(h22, 1e-9), s2)
        lim1 = 0.5 * (e1len + 1.0)
        lim2 = 0.5 * (e2len + 1.0)
        st1 = np.clip(s1, -lim1, lim1)
        st2 = np.clip(s2, -lim2, lim2)
        t1 = np.clip(t1 + st1, -0.2, e1len + 0.2)
        t2 = np.clip(t2 + st2, -0.2, e2len + 0.2)
        if it >= 9 and it % 2 and max(float(np.max(np.abs(st1))),
                                      float(np.max(np.abs(st2)))) < 1e-11:
            break
    p1 = e10 + t1[:, None] * e1d
    l2 = q0 + t2[:, None] * qd
    p2 = e20 + t2[:, None] * e2d
    u = p1 - a_pts
    w = p1 - l2
    v = p2 - b_pts
    du = np.maximum(_row_norm(u), 1e-12)
    dm = np.maximum(_row_norm(w), 1e-12)
    dv = np.maximum(_row_norm(v), 1e-12)
    g1 = np.einsum("ck,ck->c", u, e1d) / du + np.einsum("ck,ck->c", w, e1d) / dm
    g2 = -np.einsum("ck,ck->c", w, qd) / dm + np.einsum("ck,ck->c", v, e2d) / dv
    ok = ((t1 > 1e-6) & (t1 < e1len - 1e-6) & (t2 > 1e-6) & (t2 < e2len - 1e-6)
          & (np.abs(g1) < 1e-8) & (np.abs(g2) < 1e-8) & (dm > 1e-3))
    if live is None:
        return t1, t2, ok
    idx = np.nonzero(live)[0]
    t1_out[idx] = t1
    t2_out[idx] = t2
    ok_out[idx] = ok
    return t1_out, t2_out, ok_out


def _arrangements(max_r, max_d, max_total):
    """All interaction-kind strings within the budgets, deterministic order."""
    out = []
    for total in range(1, max_total + 1):
        def rec(prefix, nr, nd):
            if len(prefix) == total:
                out.append(prefix)
                return
            if nr < max_r:
                rec(prefix + "R", nr + 1, nd)
            if nd < max_d:
                rec(prefix + "D", nr, nd + 1)
        rec("", 0, 0)
    return [a for a in out if ("D" in a) or len(a) <= max_r]


class _Tracer:
    def __init__(self, scene: Scene, tx: RadioNode, rx: RadioNode, cfg: TraceConfig):
        cfg.validate()
        self.scene = scene
        self.g = scene.geometry
        self.t = _scene_tables(scene)
        self.tx = np.asarray(tx.position, dtype=float)
        self.rx = np.asarray(rx.position, dtype=float)
        self.tx_node = tx
        self.rx_node = rx
        self.cfg = cfg
        g = self.g
        if g.n:
            self.tx_front = (g.normals @ self.tx) - g.plane_d > 1e-9
            self.rx_front = (g.normals @ self.rx) - g.plane_d > 1e-9
        else:
            self.tx_front = np.zeros(0, dtype=bool)
            self.rx_front = np.zeros(0, dtype=bool)
        bb = self.t["behind_both"]
        self.tx_air = ~bb(self.tx)[0] if len(scene.wedges) else np.zeros(0, dtype=bool)
        self.rx_air = ~bb(self.rx)[0] if len(scene.wedges) else np.zeros(0, dtype=bool)

    # -- occlusion with optional wood transmission ------------------------

    def _leg_clear(self, a, b, exclude):
        idx, t = self.g.hits(a, b)
        if len(idx):
            keep = ~np.isin(idx, list(exclude)) if exclude else np.ones(len(idx), bool)
            idx, t = idx[keep], t[keep]
        if len(idx) == 0:
            return True, []
        if self.cfg.enable_transmission and np.all(self.g.wood[idx]):
            order = np.argsort(t)
            return True, [(int(i), float(tt)) for i, tt in zip(idx[order], t[order])]
        return False, []

    # -- candidate solving -------------------------------------------------

    def solve_class(self, kinds: str, element_ids: np.ndarray):
        """element_ids: (c, m) int array; columns are surface or wedge indices
        following ``kinds``.  Returns a list of validated raw paths."""
        if len(element_ids) == 0:
            return []
        g = self.g
        t = self.t
        c = len(element_ids)
        wedge_cols = [i for i, k in enumerate(kinds) if k == "D"]
        n_w = len(wedge_cols)

        if n_w == 0:
            edge_pts = []
        else:
            # tx image through reflections before the first wedge
            a_img = np.repeat(self.tx[None, :], c, axis=0)
            for col in range(wedge_cols[0]):
                a_img = _mirror_batch(a_img, element_ids[:, col], g)
            # rx image through reflections after the last wedge, reverse order
            b_img = np.repeat(self.rx[None, :], c, axis=0)
            for col in range(len(kinds) - 1, wedge_cols[-1], -1):
                b_img = _mirror_batch(b_img, element_ids[:, col], g)

            w1 = element_ids[:, wedge_cols[0]]
            e10, e1d, e1len = t["w_start"][w1], t["w_dir"][w1], t["w_len"][w1]

            if n_w == 1:
                tt, ok = _newton_edge_1d(a_img, b_img, e10, e1d, e1len)
                element_ids = element_ids[ok]
                edge_pts = [e10[ok] + tt[ok][:, None] * e1d[ok]]
            else:
                w2 = element_ids[:, wedge_cols[1]]
                e20, e2d, e2len = t["w_start"][w2], t["w_dir"][w2], t["w_len"][w2]
                # edge 2 viewed through the mirrors between the wedges
                q0 = e20.copy()
                q1 = e20 + e2d
                for col in range(wedge_cols[1] - 1, wedge_cols[0], -1):
                    q0 = _mirror_batch(q0, element_ids[:, col], g)
                    q1 = _mirror_batch(q1, element_ids[:, col], g)
                qd = q1 - q0
                t1, t2, ok = _newton_edge_2d(a_img, e10, e1d, e1len, q0, qd,
                                             e20, e2d, e2len, b_img)
                element_ids = element_ids[ok]
                w2 = element_ids[:, wedge_cols[1]]
                edge_pts = [e10[ok] + t1[ok][:, None] * e1d[ok],
                            t["w_start"][w2] + t2[ok][:, None] * t["w_dir"][w2]]
            if len(element_ids) == 0:
                return []

        polys, ok = self._rebuild_polylines(kinds, element_ids, wedge_cols, edge_pts)
        element_ids = element_ids[ok]
        polys = polys[ok]
        if len(polys) == 0:
            return []
        keep = self._geometric_checks(kinds, element_ids, polys)
        element_ids = element_ids[keep]
        polys = polys[keep]
        if len(polys) == 0:
            return []
        return self._occlusion_checks(kinds, element_ids, polys)

    def build_paths(self, kinds: str, survivors):
        """Batched field assembly for the surviving candidates of one class."""
        if not survivors:
            return []
        scene = self.scene
        f = self.cfg.frequency_ghz
        element_ids = np.array([s[0] for s in survivors], dtype=int).reshape(len(survivors), len(kinds))
        polys = np.array([s[1] for s in survivors])
        woods = [s[2] for s in survivors]
        jones_all, valid = _batch_jones(scene, kinds, element_ids, polys, f)
        out = []
        for i in range(len(survivors)):
            if not valid[i]:
                continue
            poly = polys[i]
            inters = []
            for col, kk in enumerate(kinds):
                idx = int(element_ids[i, col])
                if kk == "R":
                    inters.append(Interaction(InteractionKind.REFLECTION,
                                              scene.surfaces[idx].id, poly[col + 1]))
                else:
                    inters.append(Interaction(InteractionKind.DIFFRACTION,
                                              scene.wedges[idx].id, poly[col + 1],
                                              wedge=scene.wedges[idx]))
            jones = jones_all[i]
            if woods[i]:
                # slab factors need the full 3D chain; redo this path scalar-wise
                jones = _assemble_jones(scene, poly, inters, f,
                                        _pair_slabs(poly, woods[i], scene))
                if jones is None:
                    continue
                for legj, sidx, tt in woods[i]:
                    a, b = poly[legj], poly[legj + 1]
                    inters.append(Interaction(InteractionKind.TRANSMISSION,
                                              scene.surfaces[sidx].id, a + tt * (b - a)))
            length = float(np.linalg.norm(np.diff(poly, axis=0), axis=1).sum())
            env = sum(scene.path_attenuation_db(poly[j], poly[j + 1])
                      for j in range(len(poly) - 1))
            u_dep = geom.unit(poly[1] - poly[0])
            u_arr = geom.unit(poly[-2] - poly[-1])
            out.append(PropPath(
                interactions=inters, points=poly, delay=length / C, length=length,
                aod=geom.angles_from_direction(u_dep), aoa=geom.angles_from_direction(u_arr),
                jones=jones, is_diffuse=False, env_db=env,
                tx_id=self.tx_node.id, rx_id=self.rx_node.id))
        return out

    def _inside_surface(self, pts, surf_idx):
        g = self.g
        rel = pts[:, None, :] - g.verts[surf_idx]
        cr = np.cross(g.edge_vec[surf_idx], rel)
        s = np.einsum("cvk,ck->cv", cr, g.normals[surf_idx])
        return np.all(s >= -1e-9, axis=1)

    def _rebuild_polylines(self, kinds, element_ids, wedge_cols, edge_pts):
        """Batched image-walk reconstruction of the candidate polylines.

        Returns (polys, ok): polys is (c, m+2, 3) with interaction points in
        sequence order; ok flags candidates whose specular points exist and
        lie inside their surfaces.
        """
        g = self.g
        c, m = element_ids.shape
        polys = np.zeros((c, m + 2, 3))
        polys[:, 0] = self.tx
        polys[:, -1] = self.rx
        ok = np.ones(c, dtype=bool)

        # anchor positions in polyline order: tx, wedge points, rx
        anchor_cols = [-1] + wedge_cols + [m]
        for wn, col in enumerate(wedge_cols):
            polys[:, col + 1] = edge_pts[wn]

        for run in range(len(anchor_cols) - 1):
            lo, hi = anchor_cols[run], anchor_cols[run + 1]
            mirrors = list(range(lo + 1, hi))     # reflection columns in this run
            if not mirrors:
                continue
            a = polys[:, lo + 1] if lo >= 0 else polys[:, 0]
            b = polys[:, hi + 1] if hi < m else polys[:, m + 1]
            imgs = [a]
            for col in mirrors:
                imgs.append(_mirror_batch(imgs[-1], element_ids[:, col], g))
            cur = b
            for mi in range(len(mirrors) - 1, -1, -1):
                col = mirrors[mi]
                si = element_ids[:, col]
                n = g.normals[si]
                d = g.plane_d[si]
                av = imgs[mi + 1]
                dv = cur - av
                denom = np.einsum("ck,ck->c", n, dv)
                numer = d - np.einsum("ck,ck->c", n, av)
                with np.errstate(divide="ignore", invalid="ignore"):
                    tt = np.where(np.abs(denom) > 1e-14, numer / denom, -1.0)
                q = av + tt[:, None] * dv
                ok &= (tt > 1e-9) & (tt < 1.0 - 1e-9)
                ok &= self._inside_surface(q, si)
                polys[:, col + 1] = q
                cur = q
        return polys, ok

    def _geometric_checks(self, kinds, element_ids, polys):
        """Vectorized per-interaction validity: minimum leg length, front-face
        incidence for reflections, Keller cone and air-region membership for
        diffractions."""
        g = self.g
        t = self.t
        legs = np.diff(polys, axis=1)
        lens = np.linalg.norm(legs, axis=2)
        keep = np.all(lens > 1e-6, axis=1)
        dirs = legs / np.maximum(lens, 1e-12)[:, :, None]

        for col, kind in enumerate(kinds):
            idx = element_ids[:, col]
            d_in = dirs[:, col]
            d_out = dirs[:, col + 1]
            if kind == "R":
                n = g.normals[idx]
                keep &= np.einsum("ck,ck->c", d_in, n) < -1e-12
            else:
                e = t["w_dir"][idx]
                ci = np.einsum("ck,ck->c", d_in, e)
                co = np.einsum("ck,ck->c", d_out, e)
                keep &= np.abs(ci - co) < 1e-6
                keep &= np.abs(ci) < 1.0 - 1e-9
                t0 = t["w_t0"][idx]
                waxis = t["w_axis"][idx]
                ext = t["w_ext"][idx]

                def face_az(v):
                    p = v - np.einsum("ck,ck->c", v, e)[:, None] * e
                    nn = np.linalg.norm(p, axis=1)
                    p = p / np.maximum(nn, 1e-12)[:, None]
                    ang = np.arctan2(np.einsum("ck,ck->c", p, waxis),
                                     np.einsum("ck,ck->c", p, t0)) % (2 * np.pi)
                    return ang, nn > 1e-9

                phi_in, ok_in = face_az(-d_in)
                phi_out, ok_out = face_az(d_out)
                keep &= ok_in & ok_out
                margin = 1e-9
                keep &= (phi_in > margin) & (phi_in < ext - margin)
                keep &= (phi_out > margin) & (phi_out < ext - margin)
        return keep

    def _occlusion_checks(self, kinds, element_ids, polys):
        """Batched occlusion of every leg; returns the surviving raw paths as
        (seq, poly, wood_crossings) tuples."""
        scene = self.scene
        g = self.g
        c, npts, _ = polys.shape
        nlegs = npts - 1

        # per-column excluded surfaces (wedges exclude both faces)
        excl_a = np.full((c, len(kinds)), -1, dtype=int)
        excl_b = np.full((c, len(kinds)), -1, dtype=int)
        for col, kind in enumerate(kinds):
            if kind == "R":
                excl_a[:, col] = element_ids[:, col]
            else:
                excl_a[:, col] = self.t["w_f0"][element_ids[:, col]]
                excl_b[:, col] = self.t["w_f1"][element_ids[:, col]]

        A = polys[:, :-1].reshape(-1, 3)
        B = polys[:, 1:].reshape(-1, 3)
        e0 = np.full((c, nlegs), -1, dtype=int)
        e1 = np.full((c, nlegs), -1, dtype=int)
        e2 = np.full((c, nlegs), -1, dtype=int)
        e3 = np.full((c, nlegs), -1, dtype=int)
        for j in range(nlegs):
            if j > 0:
                e0[:, j] = excl_a[:, j - 1]
                e1[:, j] = excl_b[:, j - 1]
            if j < len(kinds):
                e2[:, j] = excl_a[:, j]
                e3[:, j] = excl_b[:, j]
        blocked = g.blocked_many_multi(A, B, [e0.ravel(), e1.ravel(), e2.ravel(), e3.ravel()],
                                       skip_wood=self.cfg.enable_transmission)
        ok = ~np.any(blocked.reshape(c, nlegs), axis=1)

        out = []
        for i in np.nonzero(ok)[0]:
            poly = polys[i]
            wood = []
            if self.cfg.enable_transmission and g.wood.any():
                bad = False
                for j in range(nlegs):
                    exclude = {int(e0[i, j]), int(e1[i, j]), int(e2[i, j]), int(e3[i, j])} - {-1}
                    clear, crossings = self._leg_clear(poly[j], poly[j + 1], exclude)
                    if not clear:
                        bad = True
                        break
                    wood.extend((j, sidx, tt) for sidx, tt in crossings)
                if bad:
                    continue
            out.append((element_ids[i], poly, wood))
        return out

    # -- enumeration -------------------------------------------------------

    def _sampled_vis(self):
        """Element midpoint-to-midpoint visibility, used only to pre-filter the
        order-4 classes (a sampling approximation, not an exact test)."""
        cache = self.scene._cache
        if "sampled_vis" in cache:
            return cache["sampled_vis"]
        g = self.g
        t = self.t
        ns, nw = g.n, len(self.scene.wedges)
        mids = np.concatenate([
            t["centroids"] + 1e-4 * g.normals,
            t["w_mid"],
        ]) if nw else t["centroids"] + 1e-4 * g.normals
        ne = len(mids)
        vis = np.zeros((ne, ne), dtype=bool)
        excl = []
        for i in range(ns):
            excl.append((i, -1))
        for w in self.scene.wedges:
            excl.append((self.scene.surface_idx(w.face0_id), self.scene.surface_idx(w.face1_id)))
        ii, jj = np.triu_indices(ne, k=1)
        e0a = np.array([excl[i][0] for i in ii])
        e1a = np.array([excl[i][1] for i in ii])
        e0b = np.array([excl[j][0] for j in jj])
        e1b = np.array([excl[j][1] for j in jj])
        blocked = np.ones(len(ii), dtype=bool)
        for lo in range(0, len(ii), 20000):
            sl = slice(lo, lo + 20000)
            b = g.blocked_many(mids[ii[sl]], mids[jj[sl]], excl0=e0a[sl], excl1=e1a[sl])
            # also ignore the far endpoint's own faces
            b2 = g.blocked_many(mids[ii[sl]], mids[jj[sl]], excl0=e0b[sl], excl1=e1b[sl])
            blocked[sl] = b & b2
        vis[ii, jj] = ~blocked
        vis[jj, ii] = ~blocked
        cache["sampled_vis"] = vis
        return vis

    def candidates_for(self, kinds: str):
        t = self.t
        g = self.g
        ns = g.n
        nw = len(self.scene.wedges)
        use_sampled = len(kinds) >= 4
        vis = self._sampled_vis() if use_sampled and (ns + nw) else None

        pools = []
        for pos, k in enumerate(kinds):
            if k == "R":
                pool = np.arange(ns)
                if pos == 0:
                    pool = pool[self.tx_front[pool]]
                if pos == len(kinds) - 1:
                    pool = pool[self.rx_front[pool]]
            else:
                pool = np.arange(nw)
                if pos == 0:
                    pool = pool[self.tx_air[pool]]
                if pos == len(kinds) - 1:
                    pool = pool[self.rx_air[pool]]
            if len(pool) == 0:
                return np.zeros((0, len(kinds)), dtype=int)
            pools.append(pool)

        # incremental join with pairwise structural filters, so large classes
        # never materialize the full cartesian product
        cand = pools[0][:, None]
        for pos in range(1, len(kinds)):
            ka, kb = kinds[pos - 1], kinds[pos]
            nxt = pools[pos]
            ia = np.repeat(cand[:, -1], len(nxt))
            ib = np.tile(nxt, len(cand))
            if ka == "R" and kb == "R":
                ok = t["facing"][ia, ib]
            elif ka == "R" and kb == "D":
                ok = t["edge_front"][ib, ia]
            elif ka == "D" and kb == "R":
                ok = t["edge_front"][ia, ib]
            else:
                ok = t["ww_ok"][ia, ib]
            if ka == kb:
                ok &= ia != ib
            if use_sampled and vis is not None:
                ea = ia + (0 if ka == "R" else ns)
                eb = ib + (0 if kb == "R" else ns)
                ok &= vis[ea, eb]
            rows = np.repeat(np.arange(len(cand)), len(nxt))[ok]
            cand = np.column_stack([cand[rows], ib[ok]])
            if len(cand) == 0:
                return cand
            if use_sampled and len(cand) > 500_000:
                cand = self._cap_by_chain(kinds[: pos + 1], cand, 500_000)

        if use_sampled and len(cand):
            cand = self._prefilter_order4(kinds, cand)
        return cand

    def _cap_by_chain(self, kinds, cand, cap):
        mids = self._element_mids(kinds, cand)
        chain = np.linalg.norm(mids[:, 0] - self.tx, axis=1)
        for a in range(len(kinds) - 1):
            chain = chain + np.linalg.norm(mids[:, a + 1] - mids[:, a], axis=1)
        order = np.argsort(chain, kind="stable")[:cap]
        order.sort()
        return cand[order]

    def _element_mids(self, kinds, cand):
        t = self.t
        cols = []
        for pos, k in enumerate(kinds):
            src = t["centroids"] if k == "R" else t["w_mid"]
            cols.append(src[cand[:, pos]])
        return np.stack(cols, axis=1)

    def _prefilter_order4(self, kinds, cand):
        """Nearest-first cap plus a crude power bound for the heaviest classes."""
        mids = self._element_mids(kinds, cand)
        chain = np.linalg.norm(mids[:, 0] - self.tx, axis=1)
        for a in range(len(kinds) - 1):
            chain = chain + np.linalg.norm(mids[:, a + 1] - mids[:, a], axis=1)
        chain = chain + np.linalg.norm(self.rx - mids[:, -1], axis=1)

        n_d = kinds.count("D")
        d0 = max(np.linalg.norm(self.rx - self.tx), 0.1)
        bound = -20.0 * np.log10(np.maximum(chain, d0) / d0) - self.cfg.order4_diffraction_bound_db * n_d
        keep = bound >= self.cfg.min_path_gain_db
        cand = cand[keep]
        chain = chain[keep]

        if len(cand) > self.cfg.max_order4_candidates:
            order = np.argsort(chain, kind="stable")[: self.cfg.max_order4_candidates]
            order.sort()
            cand = cand[order]
        return cand

    # -- main --------------------------------------------------------------

    def run(self):
        cfg = self.cfg
        scene = self.scene
        found = []

        clear, crossings = self._leg_clear(self.tx, self.rx, set())
        if clear:
            found.append(((), np.array([self.tx, self.rx]), [(0, s, t) for s, t in crossings]))

        paths = []
        for seq, poly, wood in found:   # the direct path, when clear
            inters = []
            jones = _assemble_jones(scene, poly, [], cfg.frequency_ghz,
                                    _pair_slabs(poly, wood, scene))
            for legj, sidx, tt in wood:
                a, b = poly[legj], poly[legj + 1]
                inters.append(Interaction(InteractionKind.TRANSMISSION,
                                          scene.surfaces[sidx].id, a + tt * (b - a)))
            length = float(np.linalg.norm(self.rx - self.tx))
            env = scene.path_attenuation_db(self.tx, self.rx)
            u_dep = geom.unit(self.rx - self.tx)
            paths.append(PropPath(
                interactions=inters, points=poly, delay=length / C, length=length,
                aod=geom.angles_from_direction(u_dep),
                aoa=geom.angles_from_direction(-u_dep),
                jones=jones, is_diffuse=False, env_db=env,
                tx_id=self.tx_node.id, rx_id=self.rx_node.id))

        seen = set()
        for kinds in _arrangements(cfg.max_reflections, cfg.max_diffractions,
                                   cfg.max_total_interactions):
            cand = self.candidates_for(kinds)
            survivors = self.solve_class(kinds, cand)
            for p in self.build_paths(kinds, survivors):
                sig = (tuple(i.target for i in p.interactions),
                       tuple(np.round(p.points.ravel(), 6)))
                if sig in seen:
                    continue
                seen.add(sig)
                paths.append(p)
        return paths


def _pair_slabs(poly, wood, scene):
    """(theta, material, thickness, dir, normal) per wood slab, entry/exit paired."""
    if not wood:
        return []
    out = []
    by_leg = {}
    for legj, sidx, tt in wood:
        by_leg.setdefault(legj, []).append((tt, sidx))
    for legj, items in sorted(by_leg.items()):
        items.sort()
        a, b = poly[legj], poly[legj + 1]
        leg_len = float(np.linalg.norm(b - a))
        u = geom.unit(b - a)

        def slab(s_in, thickness):
            surf = scene.surfaces[s_in]
            mat = scene.material_of(surf)
            theta = np.arccos(np.clip(abs(float(u @ surf.normal)), 0, 1))
            return (theta, mat, thickness, u, surf.normal)

        for k in range(0, len(items) - 1, 2):
            (t_in, s_in), (t_out, _) = items[k], items[k + 1]
            out.append(slab(s_in, (t_out - t_in) * leg_len))
        if len(items) % 2:
            out.append(slab(items[-1][1], 0.0))
    return out


# ---------------------------------------------------------------------------
# diffuse scattering
# ---------------------------------------------------------------------------

def _tile_cache(scene: Scene, tile_area: float):
    key = ("tiles", tile_area)
    if key in scene._cache:
        return scene._cache[key]
    centers, areas, surf_idx = [], [], []
    step = np.sqrt(tile_area)
    for si, s in enumerate(scene.surfaces):
        if not s.scatters:
            continue
        v = s.vertices
        u_ax = geom.unit(v[1] - v[0])
        w_ax = np.cross(s.normal, u_ax)
        uu = (v - v[0]) @ u_ax
        ww = (v - v[0]) @ w_ax
        nu = max(1, int(round((uu.max() - uu.min()) / step)))
        nw = max(1, int(round((ww.max() - ww.min()) / step)))
        du = (uu.max() - uu.min()) / nu
        dw = (ww.max() - ww.min()) / nw
        if du <= 0 or dw <= 0:
            continue
        cu = uu.min() + (np.arange(nu) + 0.5) * du
        cw = ww.min() + (np.arange(nw) + 0.5) * dw
        gu, gw = np.meshgrid(cu, cw, indexing="ij")
        pts = v[0] + gu.ravel()[:, None] * u_ax + gw.ravel()[:, None] * w_ax
        if len(v) > 4:
            raise ValueError("scatter tiling expects triangles or quads")
        if len(v) == 3:
            rel = pts[:, None, :] - v[None, :, :]
            edge = np.roll(v, -1, axis=0) - v
            cr = np.cross(edge[None, :, :], rel)
            inside = np.all(np.einsum("tvk,k->tv", cr, s.normal) >= -1e-9, axis=1)
            pts = pts[inside]
        centers.append(pts)
        areas.append(np.full(len(pts), du * dw))
        surf_idx.append(np.full(len(pts), si, dtype=int))
    if centers:
        cache = (np.concatenate(centers), np.concatenate(areas), np.concatenate(surf_idx))
    else:
        cache = (np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=int))
    scene._cache[key] = cache
    return cache


def _stable_hash64(text: str) -> int:
    return int.from_bytes(hashlib.blake2s(text.encode(), digest_size=8).digest(), "little")


def scatter_paths(scene: Scene, tx: RadioNode, rx: RadioNode, cfg: TraceConfig):
    """Single-bounce diffuse paths: one per visible tile of each scattering
    surface, Lambertian effective-roughness power and a seeded uniform phase."""
    if not cfg.enable_diffuse:
        return []
    centers, areas, surf_idx = _tile_cache(scene, cfg.diffuse_tile_area)
    if len(centers) == 0:
        return []
    g = scene.geometry
    txp = np.asarray(tx.position, dtype=float)
    rxp = np.asarray(rx.position, dtype=float)

    n = g.normals[surf_idx]
    to_tx = txp[None, :] - centers
    to_rx = rxp[None, :] - centers
    r1 = np.linalg.norm(to_tx, axis=1)
    r2 = np.linalg.norm(to_rx, axis=1)
    ok = (r1 > 1e-3) & (r2 > 1e-3)
    cos_i = np.einsum("tk,tk->t", n, to_tx) / np.maximum(r1, 1e-12)
    cos_s = np.einsum("tk,tk->t", n, to_rx) / np.maximum(r2, 1e-12)
    ok &= (cos_i > 1e-6) & (cos_s > 1e-6)
    s_coeff = np.array([scene.material_of(scene.surfaces[si]).scattering_coeff
                        for si in surf_idx])
    ok &= s_coeff > 0.0
    idx = np.nonzero(ok)[0]
    if len(idx) == 0:
        return []
    blocked_up = g.blocked_many(np.repeat(txp[None, :], len(idx), 0), centers[idx],
                                excl0=surf_idx[idx])
    blocked_dn = g.blocked_many(centers[idx], np.repeat(rxp[None, :], len(idx), 0),
                                excl0=surf_idx[idx])
    idx = idx[~(blocked_up | blocked_dn)]
    if len(idx) == 0:
        return []

    rx_key = _stable_hash64(rx.id)
    bitgen = np.random.Philox(key=(int(cfg.diffuse_seed) << 64) | rx_key)
    phases = np.random.Generator(bitgen).uniform(0.0, 2.0 * np.pi, len(centers))

    paths = []
    for t_i in idx:
        c = centers[t_i]
        sfac = (s_coeff[t_i]
                * np.sqrt(areas[t_i] * cos_i[t_i] * cos_s[t_i] / np.pi)
                * (r1[t_i] + r2[t_i]) / (r1[t_i] * r2[t_i])
                * np.exp(1j * phases[t_i]))
        length = float(r1[t_i] + r2[t_i])
        env = scene.path_attenuation_db(txp, c) + scene.path_attenuation_db(c, rxp)
        sid = scene.surfaces[int(surf_idx[t_i])].id
        paths.append(PropPath(
            interactions=[Interaction(InteractionKind.SCATTERING, f"{sid}#{t_i}", c)],
            points=np.array([txp, c, rxp]),
            delay=length / C, length=length,
            aod=geom.angles_from_direction(geom.unit(c - txp)),
            aoa=geom.angles_from_direction(geom.unit(c - rxp)),
            jones=np.eye(2, dtype=complex) * sfac,
            is_diffuse=True, env_db=float(env), tx_id=tx.id, rx_id=rx.id))
    return paths


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def trace(scene: Scene, tx: RadioNode, rx: RadioNode, cfg: TraceConfig = None):
    """All propagation paths within the interaction budgets, occlusion tested,
    sorted by (delay, descending power), pruned at min_path_gain_db below the
    free-space level at the direct distance."""
    cfg = cfg or TraceConfig()
    paths = _Tracer(scene, tx, rx, cfg).run()
    if cfg.enable_diffuse:
        paths.extend(scatter_paths(scene, tx, rx, cfg))

    f = cfg.frequency_ghz
    lam = C / (f * 1e9)
    d0 = max(float(np.linalg.norm(np.asarray(rx.position) - np.asarray(tx.position))), 1e-3)
    ref_db = 20.0 * np.log10(lam / (4.0 * np.pi * d0))

    def rel_gain_db(p):
        s = np.linalg.svd(p.jones, compute_uv=False)[0]
        if s <= 0:
            return -np.inf
        return (20.0 * np.log10(s * lam / (4.0 * np.pi * p.length)) - p.env_db) - ref_db

    paths = [p for p in paths if rel_gain_db(p) >= cfg.min_path_gain_db]

    def sort_key(p):
        power = path_power_dbm(p, f, 0.0, tx.antenna, rx.antenna)
        return (round(p.delay * 1e12), -power, p.signature())

    paths.sort(key=sort_key)
    return paths
