import json

import numpy as np
import pytest

from raycal import (
    Envelope,
    Material,
    bundled_scene_path,
    classify_visibility,
    envelope_attenuation,
    load_scene,
    material_permittivity,
    scene_from_dict,
)
from raycal.scene import PEC_SENTINEL, SceneParseError, SceneValidationError


def free_space_doc():
    return {
        "schema": 1,
        "materials": [],
        "surfaces": [],
        "nodes": [
            {"id": "TX", "xyz": [0, 0, 1], "role": "tx"},
            {"id": "RX", "xyz": [3, 0, 1], "role": "rx"},
        ],
    }


# -- materials ---------------------------------------------------------------

def test_pec_sentinel():
    m = Material("metal", is_pec=True)
    assert material_permittivity(m, 28.0) == PEC_SENTINEL


def test_lossless_dielectric():
    m = Material("glass", eps_a=4.0)
    assert material_permittivity(m, 17.3) == 4.0 - 0j


def test_concrete_at_28ghz():
    # independent evaluation of eps' = a f^b and eps'' = 17.98 c f^d / f
    a, b, c, d = 5.31, 0.0, 0.0326, 0.8095
    f = 28.0
    sigma = c * f ** d
    expected = complex(a * f ** b, -17.98 * sigma / f)
    m = Material("concrete", eps_a=a, eps_b=b, sigma_c=c, sigma_d=d)
    got = material_permittivity(m, f)
    assert got == pytest.approx(expected)
    assert got.real == pytest.approx(5.31, abs=1e-9)
    assert got.imag == pytest.approx(-0.31, abs=5e-3)


def test_passive_materials_have_nonpositive_imag():
    rng = np.random.default_rng(7)
    for _ in range(200):
        m = Material("x", eps_a=1 + 9 * rng.random(), eps_b=rng.uniform(-0.2, 0.2),
                     sigma_c=rng.random(), sigma_d=rng.uniform(0, 1.5))
        f = rng.uniform(1.0, 100.0)
        assert material_permittivity(m, f).imag <= 0.0


# -- envelopes ---------------------------------------------------------------

def brute_overlap(a, b, lo, hi, n=200001):
    t = np.linspace(0, 1, n)
    pts = np.asarray(a) + t[:, None] * (np.asarray(b) - np.asarray(a))
    inside = np.all((pts >= lo) & (pts <= hi), axis=1)
    return inside.mean() * np.linalg.norm(np.asarray(b) - np.asarray(a))


def test_envelope_partial_crossing():
    e = Envelope("env", np.array([0.0, -1, -1]), np.array([0.5, 1, 1]), 20.0)
    # crosses 0.5 m of the box
    assert envelope_attenuation(e, [-1, 0, 0], [1, 0, 0]) == pytest.approx(10.0)


def test_envelope_disjoint():
    e = Envelope("env", np.array([10.0, 10, 10]), np.array([11.0, 11, 11]), 20.0)
    assert envelope_attenuation(e, [0, 0, 0], [1, 0, 0]) == 0.0


def test_envelope_inside_2m_box_against_sampling():
    e = Envelope("env", np.array([0.0, 0, 0]), np.array([2.0, 2, 2]), 20.0)
    a, b = [0.2, 0.3, 0.4], [1.9, 1.2, 1.7]
    got = envelope_attenuation(e, a, b)
    assert got == pytest.approx(20.0 * brute_overlap(a, b, e.box_min, e.box_max), rel=1e-3)
    assert got == pytest.approx(20.0 * np.linalg.norm(np.subtract(b, a)))


def test_envelope_additive_and_reversible():
    rng = np.random.default_rng(3)
    e = Envelope("env", np.array([-1.0, -1, -1]), np.array([1.0, 1, 1]), 13.0)
    for _ in range(50):
        a, b = rng.uniform(-3, 3, 3), rng.uniform(-3, 3, 3)
        mid = a + rng.random() * (b - a)
        full = envelope_attenuation(e, a, b)
        assert full == pytest.approx(envelope_attenuation(e, a, mid)
                                     + envelope_attenuation(e, mid, b), abs=1e-9)
        assert full == pytest.approx(envelope_attenuation(e, b, a), abs=1e-12)


# -- loading / validation -----------------------------------------------------

def test_free_space_scene_is_valid():
    s = scene_from_dict(free_space_doc())
    assert len(s.surfaces) == 0
    assert s.tx_node().id == "TX"


def test_nonplanar_polygon_rejected():
    doc = free_space_doc()
    doc["materials"] = [{"name": "m", "eps_a": 2.0}]
    doc["surfaces"] = [{
        "id": "bad",
        "vertices": [[0, 0, 0], [1, 0, 0], [1, 1, 0.005], [0, 1, 0]],  # 5 mm lift
        "material": "m",
    }]
    with pytest.raises(SceneValidationError, match="planar"):
        scene_from_dict(doc)


def test_dangling_material_rejected():
    doc = free_space_doc()
    doc["surfaces"] = [{"id": "s", "vertices": [[0, 0, 0], [1, 0, 0], [0, 1, 0]],
                        "material": "nope"}]
    with pytest.raises(SceneValidationError, match="material"):
        scene_from_dict(doc)


def test_parse_error_on_garbage(tmp_path):
    p = tmp_path / "x.json"
    p.write_text("{not json")
    with pytest.raises(SceneParseError):
        load_scene(p)


def test_schema_version_checked():
    with pytest.raises(SceneParseError, match="schema"):
        scene_from_dict({"schema": 2})


def test_concave_polygon_decomposed():
    doc = free_space_doc()
    doc["materials"] = [{"name": "m", "eps_a": 2.0}]
    doc["surfaces"] = [{
        "id": "ell",
        "vertices": [[0, 0, 0], [2, 0, 0], [2, 1, 0], [1, 1, 0], [1, 2, 0], [0, 2, 0]],
        "material": "m",
    }]
    s = scene_from_dict(doc)
    assert len(s.surfaces) == 4  # 6-gon -> 4 triangles
    assert sum(t.area for t in s.surfaces) == pytest.approx(3.0)


# -- wedges -------------------------------------------------------------------

def make_wedge_scene(angle_deg=90.0):
    """Two faces of a 'pillar' corner with the given interior angle."""
    a = np.deg2rad(angle_deg)
    doc = free_space_doc()
    doc["materials"] = [{"name": "m", "pec": True}]
    doc["surfaces"] = [
        {"id": "f0", "vertices": [[0, 0, 0], [0, 0, 2], [-1, 0, 2], [-1, 0, 0]],
         "material": "m"},
        {"id": "f1", "vertices": [[0, 0, 0], [-np.cos(a), np.sin(a), 0],
                                  [-np.cos(a), np.sin(a), 2], [0, 0, 2]],
         "material": "m"},
    ]
    return scene_from_dict(doc)


def test_wedge_exterior_angle_square_corner():
    s = make_wedge_scene(90.0)
    assert len(s.wedges) == 1
    assert s.wedges[0].exterior_angle == pytest.approx(1.5 * np.pi)
    assert s.wedges[0].n_param == pytest.approx(1.5)
    assert s.wedges[0].is_metal


def test_wedge_symmetric_under_face_swap():
    s = make_wedge_scene(60.0)
    doc_swapped = free_space_doc()
    doc_swapped["materials"] = [{"name": "m", "pec": True}]
    a = np.deg2rad(60.0)
    doc_swapped["surfaces"] = [
        {"id": "f1", "vertices": [[0, 0, 0], [-np.cos(a), np.sin(a), 0],
                                  [-np.cos(a), np.sin(a), 2], [0, 0, 2]], "material": "m"},
        {"id": "f0", "vertices": [[0, 0, 0], [0, 0, 2], [-1, 0, 2], [-1, 0, 0]],
         "material": "m"},
    ]
    s2 = scene_from_dict(doc_swapped)
    assert s.wedges[0].n_param == pytest.approx(s2.wedges[0].n_param)


def test_interior_corner_has_no_wedge():
    # both normals point into the same quadrant: the air region spans 90 degrees
    doc = free_space_doc()
    doc["materials"] = [{"name": "m", "pec": True}]
    doc["surfaces"] = [
        {"id": "wall", "vertices": [[0, 0, 0], [0, 1, 0], [0, 1, 2], [0, 0, 2]],
         "material": "m"},   # normal +x
        {"id": "floor2", "vertices": [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]],
         "material": "m"},   # normal +z
    ]
    s = scene_from_dict(doc)
    assert len(s.wedges) == 0


# -- visibility ---------------------------------------------------------------

def test_visibility_free_space():
    s = scene_from_dict(free_space_doc())
    v = classify_visibility(s, s.node("TX"), s.node("RX"))
    assert v.los and v.blocker is None


def test_visibility_single_wall():
    doc = free_space_doc()
    doc["materials"] = [{"name": "m", "pec": True}]
    doc["surfaces"] = [{"id": "wall", "vertices": [[1.5, -2, -2], [1.5, 2, -2],
                                                   [1.5, 2, 2], [1.5, -2, 2]],
                        "material": "m"}]
    s = scene_from_dict(doc)
    v = classify_visibility(s, s.node("TX"), s.node("RX"))
    assert not v.los
    assert v.blocker == "wall"


def test_visibility_symmetric():
    s = load_scene(bundled_scene_path())
    tx = s.tx_node()
    for rx in s.rx_nodes():
        a = classify_visibility(s, tx, rx)
        b = classify_visibility(s, rx, tx)
        assert a.los == b.los


# -- bundled scenario ----------------------------------------------------------

@pytest.fixture(scope="module")
def machine_room():
    return load_scene(bundled_scene_path())


def test_bundled_counts_and_spacing(machine_room):
    s = machine_room
    lo, hi = s.room_bounds
    assert np.allclose(hi - lo, [16.0, 35.0, 3.5])
    groups = {c: s.rx_by_class(c) for c in ("los", "olos", "nlos")}
    assert [len(groups[c]) for c in ("los", "olos", "nlos")] == [10, 7, 3]
    for grp in groups.values():
        for a, b in zip(grp, grp[1:]):
            assert np.linalg.norm(a.position - b.position) == pytest.approx(1.0, abs=0.1)
        for n in grp:
            assert n.position[2] == pytest.approx(1.52)


def test_bundled_declared_classes_match_geometry(machine_room):
    s = machine_room
    tx = s.tx_node()
    for rx in s.rx_nodes():
        v = classify_visibility(s, tx, rx)
        if rx.visibility_class == "los":
            assert v.los, rx.id
        else:
            assert not v.los, rx.id


def test_rx11_blocked_first_by_pillar(machine_room):
    s = machine_room
    v = classify_visibility(s, s.tx_node(), s.node("RX11"))
    assert not v.los
    assert v.blocker.startswith("pillar")


def test_bundled_file_declares_units_and_schema():
    with open(bundled_scene_path()) as fh:
        doc = json.load(fh)
    assert doc["schema"] == 1
    names = {m["name"] for m in doc["materials"]}
    assert {"metal", "concrete", "wood"} <= names
    assert any(e["db_per_m"] == 20.0 for e in doc["envelopes"])
