"""Command-line pipeline: trace, synth, sage, lsp, calibrate, compare, oracle.

Every command is idempotent for a given scene, configuration and seed, and all
randomness (noise, diffuse phases) derives from the single --seed value.  Exit
codes: 0 success, 1 internal error, 2 bad input.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import io
from .calib import (
    OffsetPair,
    RayTable,
    RxEval,
    ScenarioEval,
    adjusted_lsps,
    apply_offsets,
    calibrate,
    offset_scales,
)
from .lsp import error_stats, lsps_from_mpcs
from .sage import SageConfig, extract
from .scene import Scene, load_scene
from .sounder import (
    FrequencyGrid,
    SounderConfig,
    VirtualArray,
    add_noise,
    padp,
    pdp,
    read_tensor,
    synthesize_ctf,
    write_tensor,
)
from .tracer import TraceConfig, path_power_dbm, trace


class InputError(Exception):
    pass


_SCENES: dict = {}


def _scene(path) -> Scene:
    key = str(path)
    if key not in _SCENES:
        if not Path(path).exists():
            raise InputError(f"scene file not found: {path}")
        _SCENES[key] = load_scene(path)
    return _SCENES[key]


def _select_rx(scene: Scene, spec: str):
    nodes = scene.rx_nodes()
    if spec in (None, "all"):
        return nodes
    wanted = [x.strip() for x in spec.split(",") if x.strip()]
    by_id = {n.id: n for n in nodes}
    missing = [w for w in wanted if w not in by_id]
    if missing:
        raise InputError(f"unknown receivers: {', '.join(missing)}")
    return [by_id[w] for w in wanted]


def _lna_for(rx) -> float:
    return 0.0 if rx.visibility_class == "los" else 20.0


# ---------------------------------------------------------------------------
# effective configuration
# ---------------------------------------------------------------------------

def build_configs(args):
    file_cfg = {}
    if getattr(args, "config", None):
        p = Path(args.config)
        if not p.exists():
            raise InputError(f"config file not found: {p}")
        file_cfg = json.loads(p.read_text())

    trace_cfg = TraceConfig(**file_cfg.get("trace", {}))
    sound = SounderConfig(**file_cfg.get("sounder", {}))
    sage_cfg = SageConfig(**file_cfg.get("sage", {}))
    calib_cfg = dict({"box": [[-6.0, 3.0], [-6.0, 3.0]], "step": 0.5},
                     **file_cfg.get("calib", {}))

    seed = args.seed if getattr(args, "seed", None) is not None \
        else file_cfg.get("seed", 0)
    trace_cfg.diffuse_seed = seed
    sound.noise_seed = seed
    if getattr(args, "noise_floor", None) is not None:
        sound.noise_floor_dbm = args.noise_floor
    for name in ("max_reflections", "max_diffractions"):
        v = getattr(args, name.replace("reflections", "refl").replace("diffractions", "diff"), None)
        if v is not None:
            setattr(trace_cfg, name, v)
    if getattr(args, "max_mpcs", None) is not None:
        sage_cfg.max_mpcs = args.max_mpcs

    eff = {"trace": asdict(trace_cfg), "sounder": asdict(sound),
           "sage": asdict(sage_cfg), "calib": calib_cfg, "seed": seed}
    return trace_cfg, sound, sage_cfg, calib_cfg, seed, io.config_hash(eff)


def _provenance(kind, chash, seed):
    return f"raycal {kind} config_hash={chash} seed={seed}"


# ---------------------------------------------------------------------------
# per-receiver stage workers (module level: picklable for worker processes)
# ---------------------------------------------------------------------------

def _trace_one(scene_path, rx_id, trace_cfg: TraceConfig, sound: SounderConfig,
               out_dir, chash, seed):
    scene = _scene(scene_path)
    tx = scene.tx_node()
    rx = scene.node(rx_id)
    paths = trace(scene, tx, rx, trace_cfg)
    powers = [path_power_dbm(p, trace_cfg.frequency_ghz, sound.tx_power_dbm,
                             tx.antenna, rx.antenna) for p in paths]
    rays_dir = Path(out_dir) / "rays"
    rays_dir.mkdir(parents=True, exist_ok=True)
    io.write_rays_csv(rays_dir / f"{rx_id}.csv", paths, powers,
                      _provenance("rays", chash, seed))
    io.write_path_cache(rays_dir / f"{rx_id}.npz", paths, tx.id, rx_id)
    return rx_id, len(paths)


def _synth_one(scene_path, rx_id, trace_cfg, sound: SounderConfig, offsets,
               out_dir, chash, seed):
    scene = _scene(scene_path)
    rx = scene.node(rx_id)
    cache = Path(out_dir) / "rays" / f"{rx_id}.npz"
    if not cache.exists():
        raise InputError(f"missing trace stage output: {cache}")
    paths = io.read_path_cache(cache)
    if offsets is not None:
        # ground-truth synthesis scales the interaction coefficients; the
        # specular/diffuse power balance is a calibration-side rule only
        paths = apply_offsets(paths, OffsetPair(*offsets),
                              f_ghz=trace_cfg.frequency_ghz,
                              tx_antenna=sound.tx_antenna,
                              rx_antenna=sound.rx_antenna, balance=False)
    cfg = SounderConfig(**{**asdict(sound), "lna_db": _lna_for(rx)})
    tensor = synthesize_ctf(paths, FrequencyGrid(), VirtualArray(), cfg, rx_id=rx_id)
    tensor = add_noise(tensor, cfg)
    tensor.metadata["config_hash"] = chash
    tensor.metadata["seed"] = seed
    if offsets is not None:
        tensor.metadata["applied_offsets_db"] = list(offsets)
    tdir = Path(out_dir) / "tensors"
    tdir.mkdir(parents=True, exist_ok=True)
    write_tensor(tdir / f"{rx_id}.ct", tensor)
    return rx_id, float(tensor.mean_power_mw())


def _sage_one(rx_id, sage_cfg: SageConfig, out_dir, chash, seed):
    tpath = Path(out_dir) / "tensors" / f"{rx_id}.ct"
    if not tpath.exists():
        raise InputError(f"missing synth stage output: {tpath}")
    tensor = read_tensor(tpath)
    res = extract(tensor, sage_cfg)
    lna = float(tensor.metadata.get("lna_db", 0.0))
    de_embed = 10.0 ** (-lna / 20.0)
    for m in res.mpcs:
        m.amplitude *= de_embed
    mdir = Path(out_dir) / "mpcs"
    mdir.mkdir(parents=True, exist_ok=True)
    io.write_mpcs_csv(mdir / f"{rx_id}.csv", rx_id, res.mpcs,
                      _provenance("mpcs", chash, seed))
    noise_mw = 0.0 if res.noise_floor_dbm == -np.inf \
        else 10 ** (res.noise_floor_dbm / 10.0)
    total_mw = max(tensor.mean_power_mw() - noise_mw, 0.0) * de_embed ** 2
    summary = {
        "rx_id": rx_id,
        "n_mpcs": len(res.mpcs),
        "captured_power_fraction": round(res.captured_power_fraction, 9),
        "noise_floor_dbm": (None if res.noise_floor_dbm == -np.inf
                            else round(res.noise_floor_dbm, 6)),
        "residual_power_dbm": (None if res.residual_power_dbm == -np.inf
                               else round(res.residual_power_dbm, 6)),
        "signal_power_mw": total_mw,
        "lna_db": lna,
        "em_cycles": res.iterations_run,
        "converged": res.converged,
        "flags": res.flags,
    }
    with open(mdir / f"{rx_id}.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return rx_id, len(res.mpcs)


def _run_stage(worker, jobs, workers):
    results = {}
    if workers <= 1:
        for job in jobs:
            rx_id, info = worker(*job)
            results[rx_id] = info
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for rx_id, info in pool.map(worker, *zip(*jobs)):
                results[rx_id] = info
    return results


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_trace(args):
    trace_cfg, sound, _, _, seed, chash = build_configs(args)
    scene = _scene(args.scene)
    rxs = _select_rx(scene, args.rx)
    jobs = [(args.scene, rx.id, trace_cfg, sound, args.out, chash, seed) for rx in rxs]
    results = _run_stage(_trace_one, jobs, args.workers)
    for rx_id in sorted(results):
        print(f"{rx_id}: {results[rx_id]} paths")
    return 0


def cmd_synth(args):
    trace_cfg, sound, _, _, seed, chash = build_configs(args)
    scene = _scene(args.scene)
    rxs = _select_rx(scene, args.rx)
    offsets = tuple(args.offsets) if args.offsets else None
    jobs = [(args.scene, rx.id, trace_cfg, sound, offsets, args.out, chash, seed)
            for rx in rxs]
    results = _run_stage(_synth_one, jobs, args.workers)
    for rx_id in sorted(results):
        print(f"{rx_id}: tensor mean power {10 * np.log10(max(results[rx_id], 1e-300)):.2f} dBm")
    return 0


def cmd_sage(args):
    _, _, sage_cfg, _, seed, chash = build_configs(args)
    scene = _scene(args.scene)
    rxs = _select_rx(scene, args.rx)
    jobs = [(rx.id, sage_cfg, args.out, chash, seed) for rx in rxs]
    results = _run_stage(_sage_one, jobs, args.workers)
    for rx_id in sorted(results):
        print(f"{rx_id}: {results[rx_id]} components")
    return 0


def _measured_entries(scene, rxs, out_dir):
    entries = []
    for rx in rxs:
        mdir = Path(out_dir) / "mpcs"
        cpath = mdir / f"{rx.id}.csv"
        jpath = mdir / f"{rx.id}.json"
        if not cpath.exists() or not jpath.exists():
            raise InputError(f"missing sage stage output for {rx.id}")
        mpcs = io.read_mpcs_csv(cpath)
        summary = json.loads(jpath.read_text())
        total_mw = float(summary["signal_power_mw"])
        entries.append((rx.id, rx.visibility_class,
                        lsps_from_mpcs(mpcs, total_power_mw=total_mw),
                        total_mw, "measured"))
    return entries


def _predicted_entries(scene, rxs, out_dir, sound, trace_cfg, offsets, label):
    entries = []
    for rx in rxs:
        cache = Path(out_dir) / "rays" / f"{rx.id}.npz"
        if not cache.exists():
            raise InputError(f"missing trace stage output for {rx.id}")
        paths = io.read_path_cache(cache)
        t = RayTable.from_paths(paths, trace_cfg.frequency_ghz, sound.tx_power_dbm,
                                sound.tx_antenna, sound.rx_antenna)
        s = adjusted_lsps(t, OffsetPair(*offsets))
        scales, _ = offset_scales(t, OffsetPair(*offsets))
        total = float((t.power_mw * scales ** 2).sum())
        entries.append((rx.id, rx.visibility_class, s, total, label))
    return entries


def cmd_lsp(args):
    trace_cfg, sound, _, _, seed, chash = build_configs(args)
    scene = _scene(args.scene)
    rxs = _select_rx(scene, args.rx)
    prov = _provenance("lsp", chash, seed)
    if args.source == "measured":
        entries = _measured_entries(scene, rxs, args.out)
        io.write_lsp_csv(Path(args.out) / "lsp_measured.csv", entries, prov)
        print(f"wrote lsp_measured.csv ({len(entries)} positions)")
    else:
        offsets = tuple(args.offsets) if args.offsets else (0.0, 0.0)
        label = args.stage_label or ("initial" if offsets == (0.0, 0.0) else "predicted")
        entries = _predicted_entries(scene, rxs, args.out, sound, trace_cfg,
                                     offsets, label)
        name = f"lsp_predicted_{label}.csv"
        io.write_lsp_csv(Path(args.out) / name, entries, prov)
        print(f"wrote {name} ({len(entries)} positions)")
    return 0


def cmd_calibrate(args):
    trace_cfg, sound, _, calib_cfg, seed, chash = build_configs(args)
    scene = _scene(args.scene)
    rxs = _select_rx(scene, args.rx)
    measured_path = Path(args.out) / "lsp_measured.csv"
    if not measured_path.exists():
        raise InputError(f"missing lsp stage output: {measured_path}")
    measured = {e["rx_id"]: e for e in io.read_lsp_csv(measured_path)}

    positions = []
    for rx in rxs:
        cache = Path(args.out) / "rays" / f"{rx.id}.npz"
        if not cache.exists():
            raise InputError(f"missing trace stage output for {rx.id}")
        if rx.id not in measured:
            raise InputError(f"no measured statistics for {rx.id}")
        paths = io.read_path_cache(cache)
        t = RayTable.from_paths(paths, trace_cfg.frequency_ghz, sound.tx_power_dbm,
                                sound.tx_antenna, sound.rx_antenna)
        positions.append(RxEval(rx_id=rx.id, visibility_class=rx.visibility_class,
                                rays=t, measured=measured[rx.id]["lsp"]))
    ev = ScenarioEval(positions=positions)

    box = args.box if args.box else calib_cfg["box"]
    step = args.step if args.step else calib_cfg["step"]
    box = ((box[0], box[1]), (box[0], box[1])) if np.ndim(box) == 1 else tuple(map(tuple, box))
    result = calibrate(ev, box=box, step=step)

    prov = _provenance("calibration", chash, seed)
    io.write_heatmap_csv(Path(args.out) / "calibration_heatmap.csv", result, prov)
    io.write_calibration_json(Path(args.out) / "calibration.json", result,
                              extra={"config_hash": chash, "seed": seed,
                                     "step_db": step})
    # stage tables for comparison plots
    for stage, off in (("initial", OffsetPair(0.0, 0.0)), ("final", result.best)):
        entries = _predicted_entries(scene, rxs, args.out, sound, trace_cfg,
                                     (off.refl_db, off.diff_db), stage)
        io.write_lsp_csv(Path(args.out) / f"lsp_predicted_{stage}.csv", entries, prov)
    print(f"best offsets: refl {result.best.refl_db:+.1f} dB, "
          f"diff {result.best.diff_db:+.1f} dB")
    return 0


def cmd_compare(args):
    _, _, _, _, seed, chash = build_configs(args)
    for p in (args.measured, args.predicted):
        if not Path(p).exists():
            raise InputError(f"missing input file: {p}")
    measured = io.read_lsp_csv(args.measured)
    predicted = io.read_lsp_csv(args.predicted)
    pb = {e["rx_id"]: e for e in predicted}
    common = [e for e in measured if e["rx_id"] in pb]
    if len(common) < 2:
        raise InputError("need at least two common positions")

    stage = predicted[0]["source"]
    from .calib import GROUPS, STAT_LSPS
    stats = {stage: {}}
    for gname, classes in GROUPS.items():
        rows = [e for e in common if e["class"] in classes]
        if len(rows) < 2:
            continue
        per = {}
        for name in STAT_LSPS:
            mvals = [getattr(e["lsp"], name) for e in rows]
            pvals = [getattr(pb[e["rx_id"]]["lsp"], name) for e in rows]
            per[name] = error_stats(mvals, pvals, circular=(name == "mean_azimuth_deg"))
        stats[stage][gname] = per
    out = Path(args.out)
    prov = _provenance("compare", chash, seed)
    io.write_stats_csv(out / f"stats_{stage}.csv", stats, prov)

    table_rows = []
    for e in common:
        for name in STAT_LSPS:
            table_rows.append([e["rx_id"], e["class"], name,
                               getattr(e["lsp"], name),
                               getattr(pb[e["rx_id"]]["lsp"], name)])
    io.write_csv(out / f"lsp_table_{stage}.csv",
                 ["rx_id", "class", "lsp", "measured", "predicted"],
                 table_rows, prov)

    if args.pdp_rx:
        _write_pdp_csv(args, out, prov)
    if args.padp_rx:
        _write_padp_csv(args, out, prov)
    print(f"wrote stats_{stage}.csv and lsp_table_{stage}.csv")
    return 0


def _write_pdp_csv(args, out, prov):
    """Stem-style distance profile: extracted components next to predicted rays."""
    rx_id = args.pdp_rx
    run = Path(args.run or args.out)
    mpath = run / "mpcs" / f"{rx_id}.csv"
    rpath = run / "rays" / f"{rx_id}.csv"
    if not mpath.exists() or not rpath.exists():
        raise InputError(f"missing mpcs/rays for {rx_id} under {run}")
    rows = []
    for m in io.read_mpcs_csv(mpath):
        rows.append(["measured", m.delay_s * 299792458.0, m.power_dbm])
    _, rrows = io.read_csv(rpath)
    for r in rrows:
        if r[3] == "1":
            continue  # specular only
        rows.append(["predicted", float(r[5]), float(r[10])])
    io.write_csv(out / f"pdp_{rx_id}.csv", ["source", "distance_m", "power_dbm"],
                 rows, prov)


def _write_padp_csv(args, out, prov):
    rx_id = args.padp_rx
    run = Path(args.run or args.out)
    mpath = run / "mpcs" / f"{rx_id}.csv"
    if not mpath.exists():
        raise InputError(f"missing mpcs for {rx_id} under {run}")
    mpcs = io.read_mpcs_csv(mpath)
    az_edges = np.arange(0.0, 360.1, 5.0)
    max_ns = max((m.delay_s for m in mpcs), default=1e-9) * 1e9
    d_edges = np.arange(0.0, max(max_ns * 1.1, 10.0) + 2.0, 2.0)
    grid = padp([(m.az_deg, m.delay_s * 1e9, m.power_dbm) for m in mpcs],
                az_edges, d_edges)
    rows = []
    for i in range(len(az_edges) - 1):
        for j in range(len(d_edges) - 1):
            if grid[i, j] > 0:
                rows.append([0.5 * (az_edges[i] + az_edges[i + 1]),
                             0.5 * (d_edges[j] + d_edges[j + 1]),
                             10 * np.log10(grid[i, j])])
    io.write_csv(out / f"padp_{rx_id}.csv", ["az_deg", "delay_ns", "power_dbm"],
                 rows, prov)


def cmd_oracle(args):
    """Build the synthetic acceptance scenario: trace every receiver, apply
    the truth offsets, synthesize noisy tensors and extract components."""
    rc = cmd_trace(args)
    if rc:
        return rc
    args.offsets = list(args.truth_offsets)
    rc = cmd_synth(args)
    if rc:
        return rc
    rc = cmd_sage(args)
    if rc:
        return rc
    args.source = "measured"
    args.stage_label = None
    rc = cmd_lsp(args)
    if rc:
        return rc
    with open(Path(args.out) / "oracle.json", "w") as fh:
        json.dump({"truth_offsets_db": list(args.truth_offsets),
                   "seed": args.seed or 0}, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"oracle scenario complete under {args.out}")
    return 0


# ---------------------------------------------------------------------------

def _add_common(p, scene=True):
    if scene:
        p.add_argument("--scene", required=True, help="scene JSON file")
    p.add_argument("--out", required=True, help="output run directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", help="run configuration JSON")
    p.add_argument("--rx", default="all", help="receiver selection: all or id list")
    p.add_argument("--workers", type=int, default=1)


def make_parser():
    ap = argparse.ArgumentParser(prog="raycal",
                                 description="indoor mmWave ray-tracing channel pipeline")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("trace", help="trace propagation paths per receiver")
    _add_common(p)
    p.add_argument("--max-refl", type=int, default=None)
    p.add_argument("--max-diff", type=int, default=None)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("synth", help="synthesize sounder tensors from traced rays")
    _add_common(p)
    p.add_argument("--offsets", type=float, nargs=2, metavar=("REFL", "DIFF"),
                   default=None, help="apply offsets before synthesis")
    p.add_argument("--noise-floor", type=float, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sage", help="extract components from tensors")
    _add_common(p)
    p.add_argument("--max-mpcs", type=int, default=None)
    p.set_defaults(func=cmd_sage)

    p = sub.add_parser("lsp", help="summarize link statistics")
    _add_common(p)
    p.add_argument("--source", choices=("measured", "predicted"), required=True)
    p.add_argument("--offsets", type=float, nargs=2, default=None)
    p.add_argument("--stage-label", default=None)
    p.set_defaults(func=cmd_lsp)

    p = sub.add_parser("calibrate", help="search the offset grid")
    _add_common(p)
    p.add_argument("--box", type=float, nargs=2, default=None,
                   metavar=("LO", "HI"), help="search box on both axes, dB")
    p.add_argument("--step", type=float, default=None)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("compare", help="measured vs predicted tables")
    p.add_argument("--measured", required=True)
    p.add_argument("--predicted", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--run", default=None, help="run directory for pdp/padp inputs")
    p.add_argument("--pdp-rx", default=None)
    p.add_argument("--padp-rx", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("oracle", help="build the synthetic measurement scenario")
    _add_common(p)
    p.add_argument("--truth-offsets", type=float, nargs=2, default=(-3.0, -2.0))
    p.add_argument("--noise-floor", type=float, default=None)
    p.add_argument("--max-mpcs", type=int, default=None)
    p.set_defaults(func=cmd_oracle)
    return ap


def main(argv=None):
    ap = make_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:          # noqa: BLE001
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
