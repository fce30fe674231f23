"""Uniform-theory wedge diffraction coefficients.

Implements the Kouyoumjian-Pathak coefficient with the Fresnel transition
function and a heuristic material correction: the two reflection-boundary
terms are weighted by the Fresnel reflection coefficients of the wedge faces
(soft terms with the TE coefficient, hard with TM), which reduces to the
classic PEC form for metal wedges.
"""

from __future__ import annotations

import numpy as np
from scipy.special import fresnel as _fresnel_integrals

from . import geom
from .scene import Wedge


def transition_function(x):
    """UTD transition function F(x) = 2j sqrt(x) e^{jx} int_sqrt(x)^inf e^{-j t^2} dt."""
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    out = np.empty(x.shape, dtype=complex)
    tiny = x < 1e-12
    out[tiny] = np.sqrt(np.pi * x[tiny]) * np.exp(1j * np.pi / 4)
    xi = x[~tiny]
    w = np.sqrt(2.0 * xi / np.pi)
    s, c = _fresnel_integrals(w)
    integral = np.sqrt(np.pi / 2.0) * ((0.5 - c) - 1j * (0.5 - s))
    out[~tiny] = 2j * np.sqrt(xi) * np.exp(1j * xi) * integral
    return out[0] if scalar else out


def _cot_f_term(beta, sign, n, k_l):
    """cot((pi + sign*beta) / 2n) * F(kL * a(beta)) with the boundary limit.

    Near a shadow/reflection boundary the cotangent diverges while F -> 0;
    the finite limit keeps the total field continuous there.  Broadcasts.
    """
    beta, n, k_l = np.broadcast_arrays(np.asarray(beta, float),
                                       np.asarray(n, float),
                                       np.asarray(k_l, float))
    two_pi_n = 2.0 * np.pi * n
    big_n = np.round((beta + sign * np.pi) / two_pi_n)
    eps = beta + sign * np.pi - two_pi_n * big_n if sign > 0 else beta - np.pi - two_pi_n * big_n
    # both branches reduce to a = 2 sin^2(eps/2)
    a = 2.0 * np.sin(0.5 * eps) ** 2
    near = np.abs(eps) < 1e-3
    sgn = np.where(eps >= 0, 1.0, -1.0)
    lim = n * np.exp(1j * np.pi / 4) * (
        np.sqrt(2.0 * np.pi * k_l) * sgn - 2.0 * k_l * eps * np.exp(1j * np.pi / 4))
    if sign < 0:
        lim = -lim
    arg = (np.pi + sign * beta) / (2.0 * n)
    sin_arg = np.sin(arg)
    safe_sin = np.where(np.abs(sin_arg) < 1e-12, 1.0, sin_arg)
    exact = (np.cos(arg) / safe_sin) * transition_function(k_l * a)
    out = np.where(near, lim, exact)
    return out if out.ndim else complex(out)


def scalar_coefficients(n, phi_in, phi_out, beta0, k, dist_param,
                        r0_soft=-1.0, rn_soft=-1.0, r0_hard=1.0, rn_hard=1.0):
    """(D_soft, D_hard) for a wedge of parameter n (exterior angle n*pi).

    phi_in / phi_out are the face-0 referenced azimuths of the incidence and
    diffraction directions in (0, n*pi); beta0 is the angle to the edge.
    dist_param is the usual L = rho*s/(rho+s) * sin(beta0)^2.  Broadcasts
    over arrays of geometries.
    """
    k_l = k * np.asarray(dist_param, float)
    common = -np.exp(-1j * np.pi / 4) / (2.0 * n * np.sqrt(2.0 * np.pi * k) * np.sin(beta0))
    bm = phi_out - phi_in
    bp = phi_out + phi_in
    d1 = _cot_f_term(bm, +1, n, k_l)
    d2 = _cot_f_term(bm, -1, n, k_l)
    d3 = _cot_f_term(bp, +1, n, k_l)
    d4 = _cot_f_term(bp, -1, n, k_l)
    d_soft = common * (d1 + d2 + r0_soft * d4 + rn_soft * d3)
    d_hard = common * (d1 + d2 + r0_hard * d4 + rn_hard * d3)
    return d_soft, d_hard


def edge_frame_angles(wedge: Wedge, s_in, s_out):
    """Face-0 azimuths (phi_in, phi_out) and edge angle beta0 for a geometry.

    s_in points from the source toward the edge point, s_out from the edge
    point toward the observer.  Returns None when the geometry is invalid
    (ray along the edge, or a direction inside the solid).
    """
    e = wedge.edge_dir
    t0 = wedge.t0
    w_axis = np.cross(e, t0)

    def face_azimuth(v):
        p = v - np.dot(v, e) * e
        nrm = np.linalg.norm(p)
        if nrm < 1e-9:
            return None
        p = p / nrm
        return np.arctan2(np.dot(p, w_axis), np.dot(p, t0)) % (2.0 * np.pi)

    cos_b_in = np.dot(s_in, e)
    cos_b_out = np.dot(s_out, e)
    sin_b = np.sqrt(max(0.0, 1.0 - cos_b_in ** 2))
    if sin_b < 1e-6:
        return None
    phi_in = face_azimuth(-s_in)
    phi_out = face_azimuth(s_out)
    if phi_in is None or phi_out is None:
        return None
    nphi = wedge.exterior_angle
    margin = 1e-9
    if not (margin < phi_in < nphi - margin) or not (margin < phi_out < nphi - margin):
        return None
    return phi_in, phi_out, float(np.arccos(np.clip(cos_b_in, -1.0, 1.0))), cos_b_in, cos_b_out


def diffraction_dyadic(wedge: Wedge, s_in, s_out, dist_param, k,
                       face_refl) -> np.ndarray | None:
    """3x3 complex dyadic mapping the incident field vector to the diffracted one.

    ``face_refl(face_azimuth_rad, grazing_rad)`` returns (gamma_te, gamma_tm)
    for a wedge face; metal wedges use the exact (-1, +1) pair.
    """
    frame = edge_frame_angles(wedge, s_in, s_out)
    if frame is None:
        return None
    phi_in, phi_out, beta0, cos_b_in, cos_b_out = frame
    if abs(cos_b_in - cos_b_out) > 1e-6:
        return None  # off the Keller cone

    e = wedge.edge_dir
    n = wedge.n_param
    if wedge.is_metal:
        r0s = rns = -1.0
        r0h = rnh = 1.0
    else:
        # mean grazing angle of the incident and diffracted rays: keeps the
        # material-weighted coefficient reciprocal under source/observer swap
        g_sym = 0.5 * (phi_in + phi_out)
        r0s, r0h = face_refl(0.0, g_sym)
        rns, rnh = face_refl(wedge.exterior_angle, wedge.exterior_angle - g_sym)
    d_soft, d_hard = scalar_coefficients(
        n, phi_in, phi_out, beta0, k, dist_param,
        r0_soft=r0s, rn_soft=rns, r0_hard=r0h, rn_hard=rnh)

    phi_hat_in = -np.cross(e, s_in)
    phi_hat_in /= np.linalg.norm(phi_hat_in)
    beta_hat_in = np.cross(phi_hat_in, s_in)
    phi_hat_out = np.cross(e, s_out)
    phi_hat_out /= np.linalg.norm(phi_hat_out)
    beta_hat_out = np.cross(phi_hat_out, s_out)

    return -(d_soft * np.outer(beta_hat_out, beta_hat_in)
             + d_hard * np.outer(phi_hat_out, phi_hat_in))
