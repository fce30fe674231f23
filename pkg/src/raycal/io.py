"""File formats owned by the pipeline: ray dumps, component lists, summary
tables and the binary path cache.

CSV files use '.' decimals, LF line endings, angles in degrees, delays in ns
and powers in dBm.  Every file starts with a provenance comment carrying the
configuration hash and seed; readers skip '#' lines.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from .lsp import LspSet
from .tracer import PropPath


def fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if x is None:
        return ""
    v = float(x)
    if np.isnan(v):
        return "nan"
    if np.isinf(v):
        return "-inf" if v < 0 else "inf"
    return f"{v:.10g}"


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _open_out(path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return open(path, "w", newline="\n")


def write_csv(path, header, rows, provenance=""):
    with _open_out(path) as fh:
        if provenance:
            fh.write(f"# {provenance}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_csv(path):
    with open(path) as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    return rows[0], rows[1:]


# -- ray dumps -------------------------------------------------------------------

RAY_HEADER = ["path_id", "n_R", "n_D", "is_diffuse", "delay_ns", "length_m",
              "aod_az_deg", "aod_el_deg", "aoa_az_deg", "aoa_el_deg",
              "power_dbm", "interactions"]


def interactions_field(p: PropPath) -> str:
    parts = []
    for it in p.interactions:
        x, y, z = it.point
        parts.append(f"{it.kind.value}:{it.target}:{fmt(x)}:{fmt(y)}:{fmt(z)}")
    return ";".join(parts)


def write_rays_csv(path, paths, powers_dbm, provenance=""):
    rows = []
    for i, (p, pw) in enumerate(zip(paths, powers_dbm)):
        rows.append([i, p.n_reflections, p.n_diffractions, p.is_diffuse,
                     p.delay * 1e9, p.length,
                     p.aod[0], p.aod[1], p.aoa[0], p.aoa[1],
                     pw, interactions_field(p)])
    write_csv(path, RAY_HEADER, rows, provenance)


def write_path_cache(path, paths, tx_id, rx_id):
    """Binary cache with everything needed to resynthesize without retracing."""
    n = len(paths)
    np.savez_compressed(
        Path(path),
        jones=np.array([p.jones for p in paths]).reshape(n, 2, 2),
        delay=np.array([p.delay for p in paths]),
        length=np.array([p.length for p in paths]),
        aod=np.array([p.aod for p in paths]).reshape(n, 2),
        aoa=np.array([p.aoa for p in paths]).reshape(n, 2),
        env_db=np.array([p.env_db for p in paths]),
        is_diffuse=np.array([p.is_diffuse for p in paths], dtype=bool),
        n_r=np.array([p.n_reflections for p in paths], dtype=int),
        n_d=np.array([p.n_diffractions for p in paths], dtype=int),
        inter=np.array([interactions_field(p) for p in paths], dtype=object),
        ids=np.array([tx_id, rx_id]),
    )


def _parse_interactions(field_text):
    from .tracer import Interaction, InteractionKind
    out = []
    if not field_text:
        return out
    for part in field_text.split(";"):
        pieces = part.split(":")
        kind = pieces[0]
        target = ":".join(pieces[1:-3])
        point = np.array([float(v) for v in pieces[-3:]])
        out.append(Interaction(InteractionKind(kind), target, point))
    return out


def read_path_cache(path):
    z = np.load(Path(path), allow_pickle=True)
    n = len(z["delay"])
    tx_id, rx_id = (str(x) for x in z["ids"])
    out = []
    for i in range(n):
        out.append(PropPath(
            interactions=_parse_interactions(str(z["inter"][i])),
            points=None,
            delay=float(z["delay"][i]), length=float(z["length"][i]),
            aod=tuple(z["aod"][i]), aoa=tuple(z["aoa"][i]),
            jones=z["jones"][i], is_diffuse=bool(z["is_diffuse"][i]),
            env_db=float(z["env_db"][i]), tx_id=tx_id, rx_id=rx_id))
    return out


# -- component lists ---------------------------------------------------------------

MPC_HEADER = ["rx_id", "idx", "delay_ns", "az_deg", "el_deg", "power_dbm",
              "amp_re", "amp_im"]


def write_mpcs_csv(path, rx_id, mpcs, provenance=""):
    rows = []
    for i, m in enumerate(mpcs):
        rows.append([rx_id, i, m.delay_s * 1e9, m.az_deg, m.el_deg,
                     m.power_dbm, m.amplitude.real, m.amplitude.imag])
    write_csv(path, MPC_HEADER, rows, provenance)


def read_mpcs_csv(path):
    from .sage import Mpc
    _, rows = read_csv(path)
    out = []
    for r in rows:
        out.append(Mpc(delay_s=float(r[2]) * 1e-9, az_deg=float(r[3]),
                       el_deg=float(r[4]),
                       amplitude=complex(float(r[6]), float(r[7]))))
    return out


# -- LSP tables ---------------------------------------------------------------------

LSP_HEADER = ["rx_id", "class"] + list(LspSet.FIELDS) + ["total_power_mw", "source"]


def write_lsp_csv(path, entries, provenance=""):
    """entries: (rx_id, cls, LspSet, total_power_mw, source) tuples."""
    rows = []
    for rx_id, cls, s, total_mw, source in entries:
        rows.append([rx_id, cls, *s.as_tuple(), total_mw, source])
    write_csv(path, LSP_HEADER, rows, provenance)


def read_lsp_csv(path):
    _, rows = read_csv(path)
    out = []
    for r in rows:
        vals = [float(x) for x in r[2:8]]
        out.append({
            "rx_id": r[0], "class": r[1],
            "lsp": LspSet(*vals, empty=any(np.isnan(vals))),
            "total_power_mw": float(r[8]), "source": r[9],
        })
    return out


STATS_HEADER = ["lsp", "group", "stage", "mean_error", "std_dev", "rmse",
                "correlation", "constant_series"]


def write_stats_csv(path, stats_by_stage, provenance=""):
    """stats_by_stage: stage -> group -> lsp -> ErrorStats"""
    rows = []
    for stage in sorted(stats_by_stage):
        groups = stats_by_stage[stage]
        for group in sorted(groups):
            for lsp_name, st in groups[group].items():
                rows.append([lsp_name, group, stage, st.mean_error, st.std_dev,
                             st.rmse, st.correlation, st.constant_series])
    write_csv(path, STATS_HEADER, rows, provenance)


HEATMAP_HEADER = ["refl_offset_db", "diff_offset_db", "objective"]


def write_heatmap_csv(path, result, provenance=""):
    write_csv(path, HEATMAP_HEADER, list(result.grid_rows()), provenance)


def write_calibration_json(path, result, extra=None):
    doc = {
        "best": {"refl_db": result.best.refl_db, "diff_db": result.best.diff_db},
        "refl_axis": [float(x) for x in result.refl_axis],
        "diff_axis": [float(x) for x in result.diff_axis],
        "objective_min": float(result.objective_grid.min()),
        "stats": {
            stage: {
                group: {
                    lsp_name: {
                        "mean_error": round(st.mean_error, 10),
                        "std_dev": round(st.std_dev, 10),
                        "rmse": round(st.rmse, 10),
                        "correlation": (None if np.isnan(st.correlation)
                                        else round(st.correlation, 10)),
                    }
                    for lsp_name, st in groups.items()
                }
                for group, groups in by_group.items()
            }
            for stage, by_group in result.per_lsp_stats.items()
        },
    }
    if extra:
        doc.update(extra)
    with _open_out(path) as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
