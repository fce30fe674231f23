#!/usr/bin/env python3
"""Generate the bundled machine-room scenario file.

The layout is a plausible reconstruction of a metal-heavy machine room
(16 x 35 m floor, 3.5 m ceiling): metal contour walls and ceiling, concrete
floor and pillars, metal machines / pipes / cabinets, wooden doors, one long
ceiling pipe over the obstructed corridor, and a 20 dB/m attenuation envelope
around the dense pipe region above the main aisle.  Exact clutter dimensions
are not survey data; they are chosen so the documented propagation properties
of the scenario hold and are marked unverified in the file.

Run from the repo root:  python tools/build_machine_room.py
"""

import json
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from raycal import scene as sc  # noqa: E402

ROOM = (16.0, 35.0, 3.5)
RX_HEIGHT = 1.52
TX = (7.5, 21.0, 1.52)


def box_faces(name, x0, x1, y0, y1, z0, z1, material, scatters):
    """Six axis-aligned faces with outward normals; faces flush with the room
    shell (floor z=0, walls, ceiling) are omitted."""
    faces = []

    def f(suffix, verts):
        faces.append({"id": f"{name}:{suffix}", "vertices": verts,
                      "material": material, "scatters": scatters})

    if x0 > 0.0:
        f("-x", [[x0, y0, z0], [x0, y0, z1], [x0, y1, z1], [x0, y1, z0]])
    if x1 < ROOM[0]:
        f("+x", [[x1, y0, z0], [x1, y1, z0], [x1, y1, z1], [x1, y0, z1]])
    if y0 > 0.0:
        f("-y", [[x0, y0, z0], [x1, y0, z0], [x1, y0, z1], [x0, y0, z1]])
    if y1 < ROOM[1]:
        f("+y", [[x0, y1, z0], [x0, y1, z1], [x1, y1, z1], [x1, y1, z0]])
    if z0 > 0.0:
        f("-z", [[x0, y0, z0], [x0, y1, z0], [x1, y1, z0], [x1, y0, z0]])
    if z1 < ROOM[2]:
        f("+z", [[x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1]])
    return faces


def room_shell():
    """Inward-facing walls, floor and ceiling."""
    X, Y, Z = ROOM
    return [
        {"id": "floor", "vertices": [[0, 0, 0], [X, 0, 0], [X, Y, 0], [0, Y, 0]],
         "material": "concrete", "scatters": False},
        {"id": "ceiling", "vertices": [[0, 0, Z], [0, Y, Z], [X, Y, Z], [X, 0, Z]],
         "material": "metal", "scatters": False},
        {"id": "wall_w", "vertices": [[0, 0, 0], [0, Y, 0], [0, Y, Z], [0, 0, Z]],
         "material": "metal", "scatters": False},
        {"id": "wall_e", "vertices": [[X, 0, 0], [X, 0, Z], [X, Y, Z], [X, Y, 0]],
         "material": "metal", "scatters": False},
        {"id": "wall_s", "vertices": [[0, 0, 0], [0, 0, Z], [X, 0, Z], [X, 0, 0]],
         "material": "metal", "scatters": False},
        {"id": "wall_n", "vertices": [[0, Y, 0], [X, Y, 0], [X, Y, Z], [0, Y, Z]],
         "material": "metal", "scatters": False},
    ]


BOXES = [
    # name, x0, x1, y0, y1, z0, z1, material, scatters
    ("pillar_a",   9.0,  9.4, 19.35, 19.7, 0.0, 3.5, "concrete", False),
    ("pillar_b",   3.0,  3.4,  9.0,   9.4, 0.0, 3.5, "concrete", False),
    ("pillar_c",  12.6, 13.0, 25.0,  25.4, 0.0, 3.5, "concrete", False),
    ("pillar_d",   3.0,  3.4, 26.0,  26.4, 0.0, 3.5, "metal",    True),
    ("cabinet",    9.8, 10.4, 13.5,  18.0, 0.0, 2.2, "metal",    True),
    ("shaft",     10.6, 11.6, 18.6,  20.4, 0.0, 3.2, "metal",    True),
    ("machine_w1", 1.5,  5.5, 12.0,  15.2, 0.0, 2.8, "metal",    True),
    ("machine_w2", 1.5,  5.5, 16.0,  19.2, 0.0, 2.8, "metal",    True),
    ("machine_e1", 13.2, 15.2, 15.5, 19.5, 0.0, 2.5, "metal",    True),
    ("machine_e2", 13.2, 15.2, 10.5, 14.5, 0.0, 2.5, "metal",    True),
    ("machine_n1", 2.0,  6.0, 24.0,  30.0, 0.0, 2.5, "metal",    True),
    ("machine_n2", 10.0, 14.0, 24.0, 29.0, 0.0, 2.2, "metal",    True),
    ("pipe_aisle_w", 6.9, 7.2, 9.0,  22.0, 3.15, 3.45, "metal",  True),
    ("pipe_aisle_e", 8.8, 9.1, 9.0,  22.0, 3.15, 3.45, "metal",  True),
    ("bar_cross",  6.0, 10.0, 15.0,  15.3, 2.9, 3.1, "metal",    True),
    ("pipe_olos", 11.2, 11.8, 10.0,  21.0, 3.0, 3.3, "metal",    True),
    ("door_s",     7.0,  9.0,  0.0,  0.08, 0.0, 2.1, "wood",     False),
    ("door_n",     3.0,  4.8, 34.92, 35.0, 0.0, 2.1, "wood",     False),
]


def nodes():
    out = [{"id": "TX", "xyz": list(TX), "role": "tx", "class": "los", "antenna": "monopole"}]
    # 10 LoS points straight down the aisle, 1..10 m from the Tx
    for i in range(1, 11):
        out.append({"id": f"RX{i:02d}", "xyz": [7.5, 21.0 - i, RX_HEIGHT],
                    "role": "rx", "class": "los", "antenna": "monopole"})
    # 7 obstructed points in the corridor east of the cabinet
    for j in range(7):
        out.append({"id": f"RX{11 + j:02d}", "xyz": [11.5, 17.5 - j, RX_HEIGHT],
                    "role": "rx", "class": "olos", "antenna": "monopole"})
    # 3 shadowed points behind the ventilation shaft
    for k in range(3):
        out.append({"id": f"RX{18 + k:02d}", "xyz": [12.5, 19.6 - k, RX_HEIGHT],
                    "role": "rx", "class": "nlos", "antenna": "monopole"})
    return out


def build():
    surfaces = room_shell()
    for b in BOXES:
        surfaces.extend(box_faces(*b))
    doc = {
        "schema": 1,
        "name": "machine_room",
        "notes": "clutter dimensions are plausible but unverified scenario data",
        "room_bounds": {"min": [0, 0, 0], "max": list(ROOM)},
        "materials": [
            {"name": "metal", "pec": True, "scattering_coeff": 0.4},
            {"name": "concrete", "eps_a": 5.31, "eps_b": 0.0,
             "sigma_c": 0.0326, "sigma_d": 0.8095, "scattering_coeff": 0.0},
            {"name": "wood", "eps_a": 1.99, "eps_b": 0.0,
             "sigma_c": 0.0047, "sigma_d": 1.0718, "scattering_coeff": 0.0},
        ],
        "envelopes": [
            {"id": "pipe_vicinity", "min": [6.7, 9.0, 3.05], "max": [9.3, 22.0, 3.5],
             "db_per_m": 20.0},
        ],
        "surfaces": surfaces,
        "nodes": nodes(),
    }
    return doc


def check(doc):
    s = sc.scene_from_dict(doc)
    tx = s.tx_node()
    by_class = {"los": [], "olos": [], "nlos": []}
    for rx in s.rx_nodes():
        by_class[rx.visibility_class].append(rx)
    assert [len(by_class[c]) for c in ("los", "olos", "nlos")] == [10, 7, 3]

    for cls, group in by_class.items():
        for a, b in zip(group, group[1:]):
            step = np.linalg.norm(a.position - b.position)
            assert abs(step - 1.0) <= 0.1, (cls, a.id, b.id, step)

    for rx in by_class["los"]:
        v = sc.classify_visibility(s, tx, rx)
        assert v.los, (rx.id, v)
    for rx in by_class["olos"] + by_class["nlos"]:
        v = sc.classify_visibility(s, tx, rx)
        assert not v.los, rx.id

    v11 = sc.classify_visibility(s, tx, s.node("RX11"))
    assert v11.blocker.startswith("pillar"), v11

    # the east-wall bounce toward RX18 must be clear (departure azimuth ~353 deg)
    rx18 = s.node("RX18").position
    img = np.array([2 * ROOM[0] - TX[0], TX[1], TX[2]])
    t = (ROOM[0] - TX[0]) / (img[0] - rx18[0]) if img[0] != rx18[0] else 0.5
    t = (ROOM[0] - img[0]) / (rx18[0] - img[0])
    q = img + t * (rx18 - img)
    wall_e = s.surface_idx("wall_e")
    assert s.geometry.first_hit(np.array(TX), q, exclude=(wall_e,))[0] is None
    assert s.geometry.first_hit(q, rx18, exclude=(wall_e,))[0] is None
    az = np.degrees(np.arctan2(q[1] - TX[1], q[0] - TX[0])) % 360
    assert 330 <= az < 360, az

    print(f"scene ok: {len(s.surfaces)} surfaces, {len(s.wedges)} wedges, "
          f"{len(s.nodes)} nodes; east-bounce departure az {az:.1f} deg")
    for line in s.validation_report:
        print(" ", line)


def main():
    doc = build()
    check(doc)
    out = Path(__file__).resolve().parents[1] / "src" / "raycal" / "scenes" / "machine_room.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
