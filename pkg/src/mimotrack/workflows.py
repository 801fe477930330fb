"""File-level workflows behind the service endpoints and CLI subcommands.

Each function reads/writes the on-disk interchange formats (CSIR containers,
params JSON, trajectory/truth CSV, report JSON) and returns a JSON-friendly
summary dict.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import replace

import numpy as np

from . import calibration as cal
from .active_tracking import PfConfig, subcarrier_column, track_active
from .core import Grid2D
from .csiio import CsiWriter, load_csi, load_csi_all, save_csi
from .gmphd import GmphdConfig
from .pipeline import (LatencyReport, PipelineConfig, Tracker, default_grid,
                       evaluate, latency_benchmark)
from .simulator import (Scene, Target, advance_scene, impair_frame, scene_from_config,
                        simulate_active_frames, simulate_window)


def _interp_positions(target: Target, t_rel: np.ndarray) -> np.ndarray:
    return target.position[None, :] + target.velocity[None, :] * t_rel[:, None]


def simulate_to_files(scene_cfg: dict, out_dir: str, seed: int | None = None) -> dict:
    """Render a scene to CSIR containers plus a frame-rate truth CSV."""
    cfg = dict(scene_cfg)
    if seed is not None:
        cfg["seed"] = seed
    scene, array, extras = scene_from_config(cfg)
    os.makedirs(out_dir, exist_ok=True)
    window_s = extras["window_s"]
    n_t = int(round(window_s * array.sample_rate))
    n_windows = int(round(extras["duration_s"] / window_s))
    impair = extras["impairments"]

    ue0_path = os.path.join(out_dir, "ue0.csir")
    truth_path = os.path.join(out_dir, "truth.csv")
    writers = {0: CsiWriter(ue0_path, array, ue_id=0)}
    active_paths: dict[int, str] = {}
    for tgt in scene.targets:
        if tgt.active_ue_id is not None:
            path = os.path.join(out_dir, f"ue{tgt.active_ue_id}.csir")
            writers[tgt.active_ue_id] = CsiWriter(path, array, ue_id=tgt.active_ue_id)
            active_paths[tgt.active_ue_id] = path

    n_frames = 0
    with open(truth_path, "w", newline="") as tf:
        tw = csv.writer(tf)
        tw.writerow(["t", "target_id", "x", "y", "vx", "vy"])
        current = scene
        for w in range(n_windows):
            t0 = w * window_s
            window = simulate_window(current, array, t0, n_t)
            for frame in window.frames:
                if impair is not None:
                    frame = impair_frame(frame, impair)
                writers[0].write(frame)
                n_frames += 1
            t_rel = np.arange(n_t) / array.sample_rate
            for tgt in current.targets:
                pts = _interp_positions(tgt, t_rel)
                for k in range(n_t):
                    tw.writerow([f"{t0 + t_rel[k]:.6f}", tgt.id,
                                 f"{pts[k, 0]:.6f}", f"{pts[k, 1]:.6f}",
                                 f"{tgt.velocity[0]:.6f}", f"{tgt.velocity[1]:.6f}"])
                if tgt.active_ue_id is not None:
                    frames = simulate_active_frames(current, array, tgt, t0, n_t)
                    for frame in frames:
                        if impair is not None:
                            frame = impair_frame(frame, impair)
                        writers[tgt.active_ue_id].write(frame)
            current = advance_scene(current, window_s)
    for wtr in writers.values():
        wtr.close()

    rp_manifest_path = None
    rps = extras["calibration_rps"]
    if rps:
        bare = replace(current, targets=())
        manifest = []
        for i, rp in enumerate(rps):
            tgt = Target(id=9000 + i, position=np.asarray(rp[:2]), velocity=np.zeros(2),
                         torso_radius=0.0, height=float(rp[2]), active_ue_id=900 + i)
            frames = simulate_active_frames(bare, array, tgt, 0.0, extras["rp_frames"])
            if impair is not None:
                frames = [impair_frame(f, impair) for f in frames]
            path = os.path.join(out_dir, f"rp{i:02d}.csir")
            save_csi(path, array, frames, ue_id=900 + i)
            manifest.append({"path": path, "position": list(map(float, rp))})
        rp_manifest_path = os.path.join(out_dir, "rp_manifest.json")
        with open(rp_manifest_path, "w") as f:
            json.dump({"reference_points": manifest}, f, indent=1)

    return {
        "ue0_path": ue0_path,
        "active_paths": {str(k): v for k, v in active_paths.items()},
        "truth_path": truth_path,
        "rp_manifest_path": rp_manifest_path,
        "n_frames": n_frames,
        "duration_s": extras["duration_s"],
        "n_antennas": array.n_antennas,
    }


def calibrate_from_manifest(manifest_path: str, out_params_path: str) -> dict:
    """Fit calibration parameters from reference-point recordings."""
    with open(manifest_path) as f:
        manifest = json.load(f)
    entries = manifest["reference_points"]
    if not entries:
        raise ValueError("manifest lists no reference points")
    array = None
    recordings = []
    for entry in entries:
        arr, frames = load_csi_all(entry["path"])
        array = array or arr
        recordings.append((np.asarray(entry["position"], dtype=float), frames))
    dataset = cal.build_dataset(array, recordings)
    params = cal.fit_calibration(dataset)
    cal.save_params(out_params_path, params)

    calibrated, positions = [], []
    for (pos, frames) in recordings:
        mean_h = np.mean([f.h for f in frames], axis=0)
        frame = cal.apply_calibration(
            type(frames[0])(timestamp=0.0, h=mean_h, ue_id=frames[0].ue_id), params)
        calibrated.append(frame)
        positions.append(pos)
    residual = cal.mean_phase_residual(calibrated, array, positions)
    return {"output_path": out_params_path, "params": params.to_dict(),
            "mean_residual_rad": residual, "n_reference_points": len(entries)}


def _grid_from_dict(d: dict | None, array) -> Grid2D | None:
    if d is None:
        return None
    return Grid2D(x_min=float(d["x_min"]), x_max=float(d["x_max"]),
                  y_min=float(d["y_min"]), y_max=float(d["y_max"]),
                  cell=float(d.get("cell", 0.05)),
                  target_height=float(d.get("target_height", 1.0)))


def pipeline_config_from_dict(cfg: dict | None, array) -> PipelineConfig:
    cfg = dict(cfg or {})
    grid = _grid_from_dict(cfg.get("grid"), array)
    gm = None
    if any(k in cfg for k in ("clutter_density", "p_detection", "sigma_v",
                              "measurement_std", "merge_dist")):
        grid_eff = grid or default_grid(array)
        area = max((grid_eff.x_max - grid_eff.x_min) * (grid_eff.y_max - grid_eff.y_min), 1.0)
        std = float(cfg.get("measurement_std", 0.05))
        gm = GmphdConfig(
            dt=float(cfg.get("window_s", 0.1)),
            p_detection=float(cfg.get("p_detection", 0.95)),
            sigma_v=float(cfg.get("sigma_v", 0.3)),
            clutter_density=float(cfg.get("clutter_density", 2.0 / area)),
            measurement_cov=np.diag([std ** 2, std ** 2]),
            merge_dist=float(cfg.get("merge_dist", 0.2)),
        )
    return PipelineConfig(
        window_s=float(cfg.get("window_s", 0.1)),
        avg_window_s=float(cfg.get("avg_window_s", 1.0)),
        grid=grid,
        fast_path=bool(cfg.get("fast_path", False)),
        antenna_mode=cfg.get("antenna_mode"),
        antenna_count=cfg.get("antenna_count"),
        n_doppler=int(cfg.get("n_doppler", 128)),
        n_range=int(cfg.get("n_range", 100)),
        power_stop_db=float(cfg.get("power_stop_db", 30.0)),
        sicar_max_iterations=int(cfg.get("sicar_max_iterations", 32)),
        magnitude_floor=float(cfg.get("magnitude_floor", 0.3)),
        cbcs_tol=float(cfg.get("cbcs_tol", 1e-3)),
        cbcs_max_actions=int(cfg.get("cbcs_max_actions", 1000)),
        gmphd=gm,
        latency_budget_ms=float(cfg.get("latency_budget_ms", 100.0)),
    )


def track_file(csi_path: str, out_csv: str, params_path: str | None = None,
               config: dict | None = None) -> dict:
    """Run the contact-free tracker over a recording; writes a tracks CSV."""
    array, stream = load_csi(csi_path)
    params = cal.load_params(params_path) if params_path else None
    pipe_cfg = pipeline_config_from_dict(config, array)
    tracker = Tracker(array, pipe_cfg, params)
    n_windows = 0
    n_rows = 0
    latencies = []
    with open(out_csv, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "label", "x", "y", "vx", "vy"])
        for frame in stream:
            result = tracker.push_frame(frame)
            if result is None:
                continue
            tracks, latency = result
            n_windows += 1
            if all(s in latency for s in ("sicar", "cbcs", "gmphd")):
                latencies.append(sum(latency.values()))
            for lab, state in zip(tracks.labels, tracks.states):
                w.writerow([f"{tracks.timestamp:.6f}", lab] +
                           [f"{v:.6f}" for v in state])
                n_rows += 1
    summary = {"output_path": out_csv, "n_windows": n_windows, "n_rows": n_rows}
    if latencies:
        summary["mean_window_ms"] = float(np.mean(latencies))
    if tracker.last_error is not None:
        summary["last_error"] = f"{tracker.last_error[0]}: {tracker.last_error[1]}"
    if tracker.iteration_counts:
        summary["mean_sicar_iterations"] = float(np.mean(tracker.iteration_counts))
    return summary


def benchmark_track_file(csi_path: str, out_csv: str, params_path: str | None = None,
                         seed: int = 0, n_particles: int = 1000,
                         known_height: float = 1.0, start=None,
                         sigma_v: float = 0.3) -> dict:
    """Active (device-based) tracking of the UE recorded in ``csi_path``."""
    array, stream = load_csi(csi_path)
    params = cal.load_params(params_path) if params_path else None
    pos = array.positions
    cfg = PfConfig(n_particles=n_particles, known_height=known_height,
                   sigma_v=sigma_v, dt=1.0 / array.sample_rate,
                   area=(float(pos[:, 0].min()), float(pos[:, 0].max()),
                         float(pos[:, 1].min()), float(pos[:, 1].max())))

    def calibrated():
        for frame in stream:
            yield cal.apply_calibration(frame, params) if params else frame

    n = 0
    with open(out_csv, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "x", "y"])
        for t, x, y in track_active(calibrated(), array, cfg, seed=seed, start=start):
            w.writerow([f"{t:.6f}", f"{x:.6f}", f"{y:.6f}"])
            n += 1
    return {"output_path": out_csv, "n_frames": n}


def _read_points_csv(path: str):
    """Group a trajectory CSV into [(t, (n, 2) positions)] sorted by time."""
    groups: dict[float, list] = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        for row in reader:
            t = round(float(row["t"]), 6)
            groups.setdefault(t, []).append([float(row["x"]), float(row["y"])])
    return [(t, np.asarray(pts)) for t, pts in sorted(groups.items())]


def evaluate_files(tracks_path: str, truth_path: str, report_path: str,
                   cdf_path: str | None = None, torso_radius: float = 0.2,
                   time_tolerance: float = 0.05) -> dict:
    """Score a tracks CSV against a truth CSV; writes report JSON (+ CDF CSV)."""
    estimates = _read_points_csv(tracks_path)
    truth = _read_points_csv(truth_path)
    report = evaluate(estimates, truth, torso_radius=torso_radius,
                      time_tolerance=time_tolerance)
    out = report.to_dict()
    with open(report_path, "w") as f:
        json.dump(out, f, indent=1)
    if cdf_path:
        err = np.sort(report.errors)
        with open(cdf_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["error_m", "cdf"])
            for i, e in enumerate(err):
                w.writerow([f"{e:.6f}", f"{(i + 1) / len(err):.6f}"])
    out["report_path"] = report_path
    if cdf_path:
        out["cdf_path"] = cdf_path
    return out


def bench_latency_run(scene_cfg: dict, config: dict | None = None,
                      n_windows: int = 50, warmup: int = 5,
                      params_path: str | None = None,
                      seed: int | None = None) -> dict:
    """Measure per-window latency on freshly simulated data (not written out)."""
    cfg = dict(scene_cfg)
    if seed is not None:
        cfg["seed"] = seed
    scene, array, extras = scene_from_config(cfg)
    params = cal.load_params(params_path) if params_path else None
    pipe_cfg = pipeline_config_from_dict(config, array)
    tracker = Tracker(array, pipe_cfg, params)
    window_s = pipe_cfg.window_s
    n_t = int(round(window_s * array.sample_rate))
    warm_windows = math.ceil(pipe_cfg.avg_window_s / window_s)

    def windows():
        current = scene
        for w in range(n_windows + warm_windows):
            yield simulate_window(current, array, w * window_s, n_t)
            current = advance_scene(current, window_s)

    report: LatencyReport = latency_benchmark(tracker, windows(), warmup=warmup)
    return report.to_dict()
