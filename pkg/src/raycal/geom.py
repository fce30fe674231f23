"""Small 3D geometry helpers shared by the scene and tracing code.

Conventions used throughout the package:

* coordinates are meters, right-handed, z up;
* azimuth is degrees counter-clockwise from +x in [0, 360);
* elevation is degrees above the horizontal plane in [-90, 90];
* a direction always means a unit vector.
"""

from __future__ import annotations

import numpy as np

C_VACUUM = 299_792_458.0  # m/s


def unit(v):
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("cannot normalize zero vector")
    return v / n


def direction_from_angles(az_deg, el_deg):
    """Unit vector(s) for (azimuth, elevation) in degrees; broadcasts."""
    az = np.deg2rad(np.asarray(az_deg, dtype=float))
    el = np.deg2rad(np.asarray(el_deg, dtype=float))
    az, el = np.broadcast_arrays(az, el)
    out = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)
    return out if out.ndim > 1 else out.reshape(3)


def angles_from_direction(u):
    """(azimuth [0,360), elevation [-90,90]) in degrees for a unit vector."""
    u = np.asarray(u, dtype=float)
    az = np.degrees(np.arctan2(u[1], u[0])) % 360.0
    el = np.degrees(np.arcsin(np.clip(u[2], -1.0, 1.0)))
    return az, el


def pol_basis(u):
    """Vertical/horizontal field basis (v_hat, h_hat) for direction u.

    v_hat points toward increasing elevation, h_hat toward increasing
    azimuth.  At the poles the azimuth is taken as 0 so the basis stays
    defined.
    """
    u = np.asarray(u, dtype=float)
    ce = np.hypot(u[0], u[1])
    if ce < 1e-12:
        az = 0.0
    else:
        az = np.arctan2(u[1], u[0])
    el = np.arcsin(np.clip(u[2], -1.0, 1.0))
    v_hat = np.array([-np.sin(el) * np.cos(az), -np.sin(el) * np.sin(az), np.cos(el)])
    h_hat = np.array([-np.sin(az), np.cos(az), 0.0])
    return v_hat, h_hat


def pol_basis_batch(u):
    """Batched :func:`pol_basis` for (..., 3) direction arrays."""
    u = np.asarray(u, dtype=float)
    ce = np.hypot(u[..., 0], u[..., 1])
    az = np.where(ce < 1e-12, 0.0, np.arctan2(u[..., 1], u[..., 0]))
    el = np.arcsin(np.clip(u[..., 2], -1.0, 1.0))
    v_hat = np.stack([-np.sin(el) * np.cos(az), -np.sin(el) * np.sin(az), np.cos(el)], axis=-1)
    h_hat = np.stack([-np.sin(az), np.cos(az), np.zeros_like(az)], axis=-1)
    return v_hat, h_hat


def mirror_point(p, normal, offset):
    """Mirror point(s) across the plane n.x = offset. Works on (...,3) arrays."""
    p = np.asarray(p, dtype=float)
    normal = np.asarray(normal, dtype=float)
    d = p @ normal - offset
    return p - 2.0 * d[..., None] * normal


def polygon_normal(vertices):
    """Newell normal of a 3D polygon (not normalized)."""
    v = np.asarray(vertices, dtype=float)
    nxt = np.roll(v, -1, axis=0)
    n = np.array([
        np.sum((v[:, 1] - nxt[:, 1]) * (v[:, 2] + nxt[:, 2])),
        np.sum((v[:, 2] - nxt[:, 2]) * (v[:, 0] + nxt[:, 0])),
        np.sum((v[:, 0] - nxt[:, 0]) * (v[:, 1] + nxt[:, 1])),
    ])
    return n


def planarity_deviation(vertices):
    """Largest distance of any vertex from the best-fit plane, meters."""
    v = np.asarray(vertices, dtype=float)
    c = v.mean(axis=0)
    n = polygon_normal(v)
    nn = np.linalg.norm(n)
    if nn == 0.0:
        return np.inf
    n = n / nn
    return float(np.max(np.abs((v - c) @ n)))


def is_convex_polygon(vertices, normal, tol=1e-9):
    v = np.asarray(vertices, dtype=float)
    m = len(v)
    for i in range(m):
        a = v[(i + 1) % m] - v[i]
        b = v[(i + 2) % m] - v[(i + 1) % m]
        if np.dot(np.cross(a, b), normal) < -tol:
            return False
    return True


def _project_2d(vertices, normal):
    # pick the two axes least aligned with the normal
    k = int(np.argmax(np.abs(normal)))
    idx = [i for i in range(3) if i != k]
    return np.asarray(vertices, dtype=float)[:, idx], (1.0 if normal[k] >= 0 else -1.0), k


def ear_clip(vertices, normal):
    """Triangulate a simple planar 3D polygon; returns list of index triples."""
    pts2, sign, k = _project_2d(vertices, normal)
    if k != 2 and (k == 0 or k == 1):
        # keep the projected polygon orientation consistent with the normal
        order_fix = normal[k]
        sign = 1.0 if order_fix >= 0 else -1.0
        if k == 1:
            sign = -sign
    idx = list(range(len(vertices)))

    def cross2(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    # ensure CCW in projection
    area = 0.0
    for i in range(len(idx)):
        a, b = pts2[idx[i]], pts2[idx[(i + 1) % len(idx)]]
        area += a[0] * b[1] - b[0] * a[1]
    ccw = area > 0

    tris = []
    guard = 0
    while len(idx) > 3 and guard < 10000:
        guard += 1
        ear_found = False
        for i in range(len(idx)):
            o, a, b = idx[i - 1], idx[i], idx[(i + 1) % len(idx)]
            c = cross2(pts2[o], pts2[a], pts2[b])
            if (c <= 1e-15) if ccw else (c >= -1e-15):
                continue
            # no other vertex inside the candidate ear
            ok = True
            for j in idx:
                if j in (o, a, b):
                    continue
                d1 = cross2(pts2[o], pts2[a], pts2[j])
                d2 = cross2(pts2[a], pts2[b], pts2[j])
                d3 = cross2(pts2[b], pts2[o], pts2[j])
                if ccw and min(d1, d2, d3) > -1e-15:
                    ok = False
                    break
                if not ccw and max(d1, d2, d3) < 1e-15:
                    ok = False
                    break
            if ok:
                tris.append((o, a, b))
                idx.pop(i)
                ear_found = True
                break
        if not ear_found:
            raise ValueError("polygon triangulation failed (self-intersecting?)")
    tris.append(tuple(idx))
    return tris


def segment_box_overlap(a, b, box_min, box_max):
    """Length of the part of segment a->b inside an axis-aligned box (slab clip)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d = b - a
    t0, t1 = 0.0, 1.0
    for k in range(3):
        if abs(d[k]) < 1e-15:
            if a[k] < box_min[k] or a[k] > box_max[k]:
                return 0.0
        else:
            ta = (box_min[k] - a[k]) / d[k]
            tb = (box_max[k] - a[k]) / d[k]
            if ta > tb:
                ta, tb = tb, ta
            t0 = max(t0, ta)
            t1 = min(t1, tb)
            if t0 >= t1:
                return 0.0
    return float((t1 - t0) * np.linalg.norm(d))
