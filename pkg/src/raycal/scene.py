"""Digital environment: geometry, materials, attenuation envelopes, radio nodes.

A scene is loaded from a JSON document (schema version 1) with top-level
arrays ``materials``, ``surfaces``, ``envelopes`` and ``nodes`` plus optional
``room_bounds``.  Units are meters / degrees / dB.  After loading the scene
is immutable and safe to share across workers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import geom

PLANARITY_TOL = 1e-3  # m
WELD_TOL = 1e-3       # m
MIN_WEDGE_EDGE = 0.45  # m, shorter edges contribute negligibly and are skipped

PEC_SENTINEL = complex(float("inf"), 0.0)


class SceneError(Exception):
    pass


class SceneParseError(SceneError):
    pass


class SceneValidationError(SceneError):
    pass


@dataclass(frozen=True)
class Material:
    """Frequency-dependent dielectric: eps' = a*f^b, sigma = c*f^d (f in GHz)."""

    name: str
    eps_a: float = 1.0
    eps_b: float = 0.0
    sigma_c: float = 0.0
    sigma_d: float = 0.0
    scattering_coeff: float = 0.0
    is_pec: bool = False

    def validate(self):
        if not (0.0 <= self.scattering_coeff <= 1.0):
            raise SceneValidationError(f"material {self.name}: scattering_coeff outside [0,1]")
        if not self.is_pec and self.eps_a < 1.0:
            raise SceneValidationError(f"material {self.name}: eps_a < 1 for a non-conductor")
        if self.sigma_c < 0.0:
            raise SceneValidationError(f"material {self.name}: sigma_c < 0")


def material_permittivity(m: Material, f_ghz: float) -> complex:
    """Complex relative permittivity eps' - j*17.98*sigma/f at f (GHz).

    Perfect conductors return ``PEC_SENTINEL``; reflection code branches on it
    instead of pushing a huge conductivity through the Fresnel formulas.
    """
    if f_ghz <= 0:
        raise ValueError("frequency must be positive")
    if m.is_pec:
        return PEC_SENTINEL
    eps_re = m.eps_a * f_ghz ** m.eps_b
    sigma = m.sigma_c * f_ghz ** m.sigma_d
    return complex(eps_re, -17.98 * sigma / f_ghz)


@dataclass(frozen=True)
class Surface:
    """Planar convex polygon with an outward normal (right-hand vertex order)."""

    id: str
    vertices: np.ndarray          # (n, 3)
    material: str
    scatters: bool = False
    normal: np.ndarray = field(default=None, repr=False)
    plane_d: float = field(default=0.0, repr=False)

    @staticmethod
    def build(id, vertices, material, scatters=False):
        v = np.asarray(vertices, dtype=float)
        n = geom.polygon_normal(v)
        nn = np.linalg.norm(n)
        if nn < 1e-12:
            raise SceneValidationError(f"surface {id}: degenerate polygon (no normal)")
        n = n / nn
        v.setflags(write=False)
        n.setflags(write=False)
        return Surface(id=id, vertices=v, material=material, scatters=scatters,
                       normal=n, plane_d=float(n @ v[0]))

    @property
    def centroid(self):
        return self.vertices.mean(axis=0)

    @property
    def area(self):
        v = self.vertices
        s = np.zeros(3)
        for i in range(1, len(v) - 1):
            s += np.cross(v[i] - v[0], v[i + 1] - v[0])
        return 0.5 * float(np.linalg.norm(s))


@dataclass(frozen=True)
class Wedge:
    """Exterior edge shared by two non-coplanar faces.

    ``exterior_angle`` is the opening of the air region around the edge
    (in (pi, 2*pi]); the usual wedge parameter is n = exterior_angle / pi.
    ``t0`` is the unit vector along face0 away from the edge and ``edge_dir``
    is oriented so that rotating t0 about it by the exterior angle sweeps the
    air region and lands on the face1 tangent.
    """

    edge_start: np.ndarray
    edge_end: np.ndarray
    face0_id: str
    face1_id: str
    exterior_angle: float
    edge_dir: np.ndarray
    t0: np.ndarray
    material: str
    is_metal: bool

    @property
    def n_param(self) -> float:
        return self.exterior_angle / np.pi

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.edge_end - self.edge_start))

    @property
    def id(self) -> str:
        return f"{self.face0_id}|{self.face1_id}"


@dataclass(frozen=True)
class Envelope:
    """Axis-aligned box adding a fixed dB-per-meter loss to crossing rays."""

    id: str
    box_min: np.ndarray
    box_max: np.ndarray
    db_per_m: float

    def validate(self):
        if self.db_per_m < 0:
            raise SceneValidationError(f"envelope {self.id}: negative attenuation rate")
        if np.any(self.box_max <= self.box_min):
            raise SceneValidationError(f"envelope {self.id}: empty box")


def envelope_attenuation(e: Envelope, seg_a, seg_b) -> float:
    """dB loss of a segment: rate times the clipped in-box length."""
    return e.db_per_m * geom.segment_box_overlap(seg_a, seg_b, e.box_min, e.box_max)


@dataclass(frozen=True)
class RadioNode:
    id: str
    position: np.ndarray
    role: str                    # 'tx' | 'rx'
    visibility_class: str = "los"  # declared: 'los' | 'olos' | 'nlos'
    antenna: str = "monopole"


class Visibility(NamedTuple):
    los: bool
    blocker: Optional[str]       # first blocking surface id when not LoS


class Scene:
    """Immutable container for the environment plus compiled numeric views."""

    def __init__(self, name, materials, surfaces, wedges, envelopes, nodes,
                 room_bounds=None, validation_report=None):
        self.name = name
        self.materials = materials            # dict name -> Material
        self.surfaces = surfaces              # list[Surface]
        self.wedges = wedges                  # list[Wedge]
        self.envelopes = envelopes            # list[Envelope]
        self.nodes = nodes                    # dict id -> RadioNode
        self.room_bounds = room_bounds        # (min, max) or None
        self.validation_report = validation_report or []
        self._surface_index = {s.id: i for i, s in enumerate(self.surfaces)}
        self._geometry = None
        self._cache = {}

    # -- lookups ---------------------------------------------------------

    def surface(self, sid: str) -> Surface:
        return self.surfaces[self._surface_index[sid]]

    def surface_idx(self, sid: str) -> int:
        return self._surface_index[sid]

    def material_of(self, surf: Surface) -> Material:
        return self.materials[surf.material]

    def node(self, node_id: str) -> RadioNode:
        return self.nodes[node_id]

    def tx_node(self) -> RadioNode:
        txs = [n for n in self.nodes.values() if n.role == "tx"]
        if len(txs) != 1:
            raise SceneValidationError(f"scene must have exactly one tx node, found {len(txs)}")
        return txs[0]

    def rx_nodes(self):
        return sorted((n for n in self.nodes.values() if n.role == "rx"), key=lambda n: n.id)

    def rx_by_class(self, cls: str):
        return [n for n in self.rx_nodes() if n.visibility_class == cls]

    # -- compiled geometry ------------------------------------------------

    @property
    def geometry(self):
        if self._geometry is None:
            self._geometry = _SceneGeometry(self)
        return self._geometry

    def path_attenuation_db(self, seg_a, seg_b) -> float:
        return sum(envelope_attenuation(e, seg_a, seg_b) for e in self.envelopes)


class _SceneGeometry:
    """Padded-array view of the surfaces for vectorized ray queries."""

    def __init__(self, scene: Scene):
        surfs = scene.surfaces
        self.n = len(surfs)
        vmax = max((len(s.vertices) for s in surfs), default=3)
        self.verts = np.zeros((self.n, vmax, 3))
        self.nvert = np.zeros(self.n, dtype=int)
        self.normals = np.zeros((self.n, 3))
        self.plane_d = np.zeros(self.n)
        for i, s in enumerate(surfs):
            k = len(s.vertices)
            self.verts[i, :k] = s.vertices
            self.verts[i, k:] = s.vertices[-1]  # padding repeats last vertex
            self.nvert[i] = k
            self.normals[i] = s.normal
            self.plane_d[i] = s.plane_d
        # precomputed edge data for inside tests
        nxt = np.roll(self.verts, -1, axis=1)
        self.edge_vec = nxt - self.verts                      # (n, vmax, 3)
        mats = [scene.materials[s.material] for s in surfs]
        self.pec = np.array([m.is_pec for m in mats], dtype=bool)
        self.wood = np.array([s.material == "wood" for s in surfs], dtype=bool)
        self.scatters = np.array([s.scatters for s in surfs], dtype=bool)
        self.ids = [s.id for s in surfs]

    def hits(self, a, b, eps=1e-9, inside_tol=1e-9):
        """Surface indices and params t of intersections of open segment a->b."""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        if self.n == 0:
            return np.empty(0, dtype=int), np.empty(0)
        d = b - a
        denom = self.normals @ d
        num = self.plane_d - self.normals @ a
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(np.abs(denom) > 1e-14, num / denom, np.inf)
        cand = (t > eps) & (t < 1.0 - eps)
        if not np.any(cand):
            return np.empty(0, dtype=int), np.empty(0)
        idx = np.nonzero(cand)[0]
        p = a + t[idx, None] * d                              # (m, 3)
        rel = p[:, None, :] - self.verts[idx]                 # (m, vmax, 3)
        cr = np.cross(self.edge_vec[idx], rel)                # (m, vmax, 3)
        s = np.einsum("mvk,mk->mv", cr, self.normals[idx])
        inside = np.all(s >= -inside_tol, axis=1)
        return idx[inside], t[idx][inside]

    def first_hit(self, a, b, exclude=()):
        idx, t = self.hits(a, b)
        if exclude is not None and len(idx):
            mask = ~np.isin(idx, np.asarray(list(exclude), dtype=int)) if exclude else np.ones(len(idx), bool)
            idx, t = idx[mask], t[mask]
        if len(idx) == 0:
            return None, None
        k = int(np.argmin(t))
        return int(idx[k]), float(t[k])

    def blocked(self, a, b, exclude=()):
        return self.first_hit(a, b, exclude)[0] is not None

    def blocked_many(self, A, B, excl0=None, excl1=None, eps=1e-9):
        """Vectorized occlusion for Q segments, each with up to two excluded surfaces."""
        excl = []
        if excl0 is not None:
            excl.append(excl0)
        if excl1 is not None:
            excl.append(excl1)
        return self.blocked_many_multi(A, B, excl, eps=eps)

    def blocked_many_multi(self, A, B, excl_cols=(), skip_wood=False, eps=1e-9):
        """Occlusion for Q segments with any number of per-segment exclusion
        columns (index arrays, -1 meaning none)."""
        A = np.asarray(A, dtype=float)
        B = np.asarray(B, dtype=float)
        q = len(A)
        if self.n == 0 or q == 0:
            return np.zeros(q, dtype=bool)
        d = B - A                                            # (q,3)
        denom = d @ self.normals.T                           # (q,n)
        num = self.plane_d[None, :] - A @ self.normals.T
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(np.abs(denom) > 1e-14, num / denom, np.inf)
        cand = (t > eps) & (t < 1.0 - eps)
        cols = np.arange(self.n)[None, :]
        for exc in excl_cols:
            cand &= cols != np.asarray(exc)[:, None]
        if skip_wood and self.wood.any():
            cand &= ~self.wood[None, :]
        out = np.zeros(q, dtype=bool)
        qi, si = np.nonzero(cand)
        if len(qi) == 0:
            return out
        p = A[qi] + t[qi, si, None] * d[qi]
        rel = p[:, None, :] - self.verts[si]
        cr = np.cross(self.edge_vec[si], rel)
        s = np.einsum("mvk,mk->mv", cr, self.normals[si])
        inside = np.all(s >= -1e-9, axis=1)
        out[qi[inside]] = True
        return out


# ---------------------------------------------------------------------------
# visibility classification
# ---------------------------------------------------------------------------

def classify_visibility(scene: Scene, tx: RadioNode, rx: RadioNode) -> Visibility:
    """LoS iff the open tx->rx segment is unobstructed; else first blocker."""
    if np.allclose(tx.position, rx.position):
        raise ValueError("tx and rx coincide")
    idx, t = scene.geometry.hits(tx.position, rx.position)
    if len(idx) == 0:
        return Visibility(True, None)
    k = int(np.argmin(t))
    return Visibility(False, scene.geometry.ids[idx[k]])


# ---------------------------------------------------------------------------
# loading / validation
# ---------------------------------------------------------------------------

def _decompose_if_concave(sid, vertices, material, scatters, report):
    v = np.asarray(vertices, dtype=float)
    n = geom.polygon_normal(v)
    nn = np.linalg.norm(n)
    if nn < 1e-12:
        raise SceneValidationError(f"surface {sid}: degenerate polygon")
    n = n / nn
    if geom.is_convex_polygon(v, n):
        return [Surface.build(sid, v, material, scatters)]
    tris = geom.ear_clip(v, n)
    report.append(f"surface {sid}: concave, split into {len(tris)} triangles")
    return [Surface.build(f"{sid}~{k}", v[list(tri)], material, scatters)
            for k, tri in enumerate(tris)]


def _derive_wedges(surfaces, materials, report):
    """Wedges are exactly the exterior edges implied by surface adjacency."""

    def key(p):
        return tuple(np.round(np.asarray(p, dtype=float) / WELD_TOL).astype(int))

    edge_map = {}
    for si, s in enumerate(surfaces):
        v = s.vertices
        for i in range(len(v)):
            a, b = v[i], v[(i + 1) % len(v)]
            ka, kb = key(a), key(b)
            if ka == kb:
                continue
            ek = (min(ka, kb), max(ka, kb))
            edge_map.setdefault(ek, []).append((si, np.array(a), np.array(b)))

    wedges = []
    for ek, owners in sorted(edge_map.items()):
        if len(owners) != 2:
            continue
        (i0, a0, b0), (i1, _, _) = owners
        s0, s1 = surfaces[i0], surfaces[i1]
        n0, n1 = s0.normal, s1.normal
        if abs(abs(np.dot(n0, n1)) - 1.0) < 1e-9:
            continue  # coplanar pieces of a split polygon
        if np.linalg.norm(b0 - a0) < MIN_WEDGE_EDGE:
            continue
        e = geom.unit(b0 - a0)
        # in-face tangents perpendicular to the edge, pointing into each face
        def tangent(s):
            w = s.centroid - a0
            t = w - np.dot(w, e) * e
            return geom.unit(t)
        t0 = tangent(s0)
        t1 = tangent(s1)
        # sweep from t0 toward the air side (where n0 points); measure the
        # rotation about +-e that reaches t1 through the air region
        w_axis = np.cross(e, t0)
        if np.dot(n0, w_axis) < 0:
            e = -e
            a0, b0 = b0, a0   # keep edge_dir == unit(edge_end - edge_start)
            w_axis = np.cross(e, t0)
        phi1 = np.arctan2(np.dot(t1, w_axis), np.dot(t1, t0)) % (2 * np.pi)
        exterior = phi1
        if exterior <= np.pi + 1e-9:
            continue  # interior corner: no diffracting wedge
        m0, m1 = materials[s0.material], materials[s1.material]
        is_metal = m0.is_pec and m1.is_pec
        if is_metal:
            mat = s0.material
        else:
            # carry the lossier material of the two faces
            def loss(m):
                if m.is_pec:
                    return float("inf")
                return m.sigma_c * 28.0 ** m.sigma_d
            mat = s0.material if loss(m0) >= loss(m1) else s1.material
        wedges.append(Wedge(edge_start=a0, edge_end=b0, face0_id=s0.id, face1_id=s1.id,
                            exterior_angle=float(exterior), edge_dir=e, t0=t0,
                            material=mat, is_metal=is_metal))
    report.append(f"derived {len(wedges)} wedges")
    return wedges


def scene_from_dict(doc: dict, name="scene") -> Scene:
    if doc.get("schema") != 1:
        raise SceneParseError(f"unsupported schema version {doc.get('schema')!r}")
    report = []

    materials = {}
    for md in doc.get("materials", []):
        m = Material(
            name=md["name"],
            eps_a=float(md.get("eps_a", 1.0)),
            eps_b=float(md.get("eps_b", 0.0)),
            sigma_c=float(md.get("sigma_c", 0.0)),
            sigma_d=float(md.get("sigma_d", 0.0)),
            scattering_coeff=float(md.get("scattering_coeff", 0.0)),
            is_pec=bool(md.get("pec", False)),
        )
        m.validate()
        materials[m.name] = m

    surfaces = []
    for sd in doc.get("surfaces", []):
        sid = sd["id"]
        verts = np.asarray(sd["vertices"], dtype=float)
        if verts.ndim != 2 or verts.shape[1] != 3 or len(verts) < 3:
            raise SceneValidationError(f"surface {sid}: needs >= 3 xyz vertices")
        if sd["material"] not in materials:
            raise SceneValidationError(f"surface {sid}: unknown material {sd['material']!r}")
        dev = geom.planarity_deviation(verts)
        if dev > PLANARITY_TOL:
            raise SceneValidationError(
                f"surface {sid}: not planar (deviation {dev * 1e3:.2f} mm > {PLANARITY_TOL * 1e3:.0f} mm)")
        surfaces.extend(_decompose_if_concave(sid, verts, sd["material"],
                                              bool(sd.get("scatters", False)), report))
    seen = set()
    for s in surfaces:
        if s.id in seen:
            raise SceneValidationError(f"duplicate surface id {s.id}")
        seen.add(s.id)

    envelopes = []
    for ed in doc.get("envelopes", []):
        e = Envelope(id=ed["id"], box_min=np.asarray(ed["min"], dtype=float),
                     box_max=np.asarray(ed["max"], dtype=float), db_per_m=float(ed["db_per_m"]))
        e.validate()
        envelopes.append(e)

    bounds = None
    if "room_bounds" in doc:
        bounds = (np.asarray(doc["room_bounds"]["min"], dtype=float),
                  np.asarray(doc["room_bounds"]["max"], dtype=float))

    nodes = {}
    for nd in doc.get("nodes", []):
        node = RadioNode(id=nd["id"], position=np.asarray(nd["xyz"], dtype=float),
                         role=nd["role"], visibility_class=nd.get("class", "los"),
                         antenna=nd.get("antenna", "monopole"))
        if node.role not in ("tx", "rx"):
            raise SceneValidationError(f"node {node.id}: role must be tx or rx")
        if node.visibility_class not in ("los", "olos", "nlos"):
            raise SceneValidationError(f"node {node.id}: bad class {node.visibility_class!r}")
        if bounds is not None:
            if np.any(node.position < bounds[0] - 1e-9) or np.any(node.position > bounds[1] + 1e-9):
                raise SceneValidationError(f"node {node.id}: outside room bounds")
        if node.id in nodes:
            raise SceneValidationError(f"duplicate node id {node.id}")
        nodes[node.id] = node

    wedges = _derive_wedges(surfaces, materials, report)
    return Scene(name=doc.get("name", name), materials=materials, surfaces=surfaces,
                 wedges=wedges, envelopes=envelopes, nodes=nodes, room_bounds=bounds,
                 validation_report=report)


def load_scene(path) -> Scene:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SceneParseError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise SceneParseError(f"{path}: {exc}") from exc
    return scene_from_dict(doc, name=str(path))
