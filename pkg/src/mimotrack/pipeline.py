"""End-to-end contact-free tracking: calibrate, purify, locate, track.

:class:`Tracker` holds everything that persists across windows (calibration
parameters, the trailing background average, the PHD mixture and the location
dictionary) and converts each 0.1-s window of raw frames into a
:class:`~mimotrack.gmphd.TrackSet` plus per-stage wall-clock latencies.
Evaluation compensates errors for the torso radius and scores multi-target
frames through an optimal assignment.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from .calibration import CalibrationParams, apply_calibration
from .cbcs import Dictionary, MeasurementSet, build_dictionary, cbcs_solve, extract_locations
from .core import AntennaArray, CsiFrame, CsiWindow, Grid2D
from .gmphd import GmphdConfig, GmphdFilter, TrackSet
from .toi import BackgroundRemover, DftPlans, ToiMatrix, build_plans, sicar_extract_batch

log = logging.getLogger(__name__)

STAGES = ("calibrate", "background", "sicar", "cbcs", "gmphd")

# Distributed antenna subsets (0-based) for an 8x8 sub-array layout: the
# middle pair of every second sub-array, then of the remaining sub-arrays.
DISTRIBUTED_8 = (3, 4, 19, 20, 35, 36, 51, 52)
DISTRIBUTED_16 = tuple(sorted(DISTRIBUTED_8 + (11, 12, 27, 28, 43, 44, 59, 60)))


def antenna_subset(mode: str, count: int, n_total: int) -> np.ndarray:
    """Antenna index selection: consecutive elements or spread over the array."""
    if count > n_total:
        raise ValueError("subset larger than the array")
    if mode == "sequential":
        return np.arange(count)
    if mode == "distributed":
        if (count, n_total) == (8, 64):
            return np.array(DISTRIBUTED_8)
        if (count, n_total) == (16, 64):
            return np.array(DISTRIBUTED_16)
        return np.unique(np.round(np.linspace(0, n_total - 1, count)).astype(int))
    raise ValueError(f"unknown antenna selection mode {mode!r}")


@dataclass(frozen=True)
class PipelineConfig:
    window_s: float = 0.1
    avg_window_s: float = 1.0
    grid: Grid2D | None = None         # defaults to the antenna bounding box
    fast_path: bool = False            # average subcarriers, skip range DFT
    antenna_mode: str | None = None
    antenna_count: int | None = None
    n_doppler: int = 128
    n_range: int = 100
    power_stop_db: float = 30.0
    sicar_max_iterations: int = 32
    magnitude_floor: float = 0.3
    cbcs_tol: float = 1e-3
    cbcs_max_actions: int = 1000
    gmphd: GmphdConfig | None = None
    latency_budget_ms: float = 100.0


def default_grid(array: AntennaArray, cell: float = 0.05,
                 target_height: float = 1.0) -> Grid2D:
    pos = array.positions
    return Grid2D(x_min=float(pos[:, 0].min()), x_max=float(pos[:, 0].max()),
                  y_min=float(pos[:, 1].min()), y_max=float(pos[:, 1].max()),
                  cell=cell, target_height=target_height)


def _empty_tracks(timestamp: float) -> TrackSet:
    return TrackSet(timestamp=timestamp, labels=(), states=np.zeros((0, 4)),
                    weights=np.zeros(0))


class Tracker:
    """Stateful window-by-window tracker (the full processing loop).

    Feed frames with :meth:`push_frame` or whole windows with
    :meth:`run_window`.  Any stage failure skips the window, preserves state
    and logs the stage name; it never raises mid-stream.
    """

    def __init__(self, array: AntennaArray, config: PipelineConfig,
                 params: CalibrationParams | None = None):
        self.config = config
        self.subset = None
        if config.antenna_mode is not None and config.antenna_count is not None \
                and config.antenna_count < array.n_antennas:
            self.subset = antenna_subset(config.antenna_mode,
                                         config.antenna_count, array.n_antennas)
            array = array.subset(self.subset)
            if params is not None and params.ant_offsets.size > array.n_antennas:
                params = replace(params, ant_offsets=params.ant_offsets[self.subset])
        self.array = array
        self.params = params
        self.n_t = int(round(config.window_s * array.sample_rate))
        if self.n_t < 2:
            raise ValueError("window must span at least 2 samples")
        avg_samples = max(2, int(round(config.avg_window_s * array.sample_rate)))
        self.remover = BackgroundRemover(avg_samples)
        grid = config.grid or default_grid(array)
        self.grid = grid
        self.dictionary: Dictionary = build_dictionary(grid, array)
        n_f = 1 if config.fast_path else array.n_subcarriers
        self.plans: DftPlans = build_plans(
            n_time=self.n_t, n_subcarriers=n_f,
            n_doppler=max(config.n_doppler, self.n_t),
            n_range=max(config.n_range, n_f) if not config.fast_path else 1,
            power_stop_db=config.power_stop_db)
        gm_cfg = config.gmphd
        if gm_cfg is None:
            area = max((grid.x_max - grid.x_min) * (grid.y_max - grid.y_min), 1.0)
            gm_cfg = GmphdConfig(dt=config.window_s, clutter_density=2.0 / area)
        self.filter = GmphdFilter(gm_cfg)
        self._buffer: list[CsiFrame] = []
        self.last_error: tuple[str, Exception] | None = None
        self.iteration_counts: list[float] = []   # mean SICAR iterations per window

    # -- streaming ------------------------------------------------------------

    def push_frame(self, frame: CsiFrame):
        """Returns (TrackSet, latencies) once per full window, else None."""
        self._buffer.append(frame)
        if len(self._buffer) < self.n_t:
            return None
        window = CsiWindow.from_frames(self._buffer, self.array.sample_rate)
        self._buffer = []
        return self.run_window(window)

    # -- one window through the whole chain ------------------------------------

    def run_window(self, window: CsiWindow):
        t0 = window.frames[0].timestamp
        latency: dict[str, float] = {}
        stage = "calibrate"
        try:
            tic = time.perf_counter()
            frames = window.frames
            if self.subset is not None and frames[0].h.shape[0] != self.array.n_antennas:
                frames = [CsiFrame(f.timestamp, f.h[self.subset], f.ue_id) for f in frames]
            if self.params is not None:
                frames = [apply_calibration(f, self.params) for f in frames]
            latency["calibrate"] = (time.perf_counter() - tic) * 1e3

            stage = "background"
            tic = time.perf_counter()
            removed = [self.remover.push(f) for f in frames]
            latency["background"] = (time.perf_counter() - tic) * 1e3
            if any(r is None for r in removed):
                return _empty_tracks(t0), latency   # still warming up

            stage = "sicar"
            tic = time.perf_counter()
            toi = ToiMatrix.from_frames(removed)
            if self.config.fast_path:
                toi = toi.averaged_subcarriers()
            vector = sicar_extract_batch(toi, self.plans,
                                         max_iterations=self.config.sicar_max_iterations)
            self.iteration_counts.append(float(np.mean(vector.iteration_counts)))
            latency["sicar"] = (time.perf_counter() - tic) * 1e3

            stage = "cbcs"
            tic = time.perf_counter()
            if np.any(np.abs(vector.values) > 0):
                u = cbcs_solve(vector.values, self.dictionary.phi,
                               tol=self.config.cbcs_tol,
                               max_actions=self.config.cbcs_max_actions)
                measurements = extract_locations(u, self.grid,
                                                 magnitude_floor=self.config.magnitude_floor,
                                                 timestamp=t0)
            else:
                measurements = MeasurementSet(points=np.zeros((0, 2)),
                                              magnitudes=np.zeros(0), timestamp=t0)
            latency["cbcs"] = (time.perf_counter() - tic) * 1e3

            stage = "gmphd"
            tic = time.perf_counter()
            tracks = self.filter.step(measurements, timestamp=t0)
            latency["gmphd"] = (time.perf_counter() - tic) * 1e3
            return tracks, latency
        except Exception as exc:   # noqa: BLE001 - stage isolation is the contract
            self.last_error = (stage, exc)
            log.error("window at t=%.3f skipped: stage %r failed: %s", t0, stage, exc)
            return _empty_tracks(t0), latency


def compensated_error(estimate, truth, torso_radius: float) -> float:
    """Distance from the estimate to the torso periphery around the truth."""
    if torso_radius < 0:
        raise ValueError("torso radius must be non-negative")
    d = float(np.linalg.norm(np.asarray(estimate, dtype=float)
                             - np.asarray(truth, dtype=float)))
    return max(0.0, d - torso_radius)


@dataclass
class EvaluationReport:
    n_frames: int
    errors: np.ndarray             # all assigned per-target errors, meters
    percentiles: dict              # {"p50": .., "p75": .., "p95": ..}
    missed: int
    false_tracks: int
    n_assigned: int
    cardinality_accuracy: float    # fraction of frames with correct count
    mean_cardinality_error: float

    def to_dict(self) -> dict:
        return {
            "n_frames": self.n_frames,
            "percentiles": self.percentiles,
            "missed": self.missed,
            "false_tracks": self.false_tracks,
            "n_assigned": self.n_assigned,
            "cardinality_accuracy": self.cardinality_accuracy,
            "mean_cardinality_error": self.mean_cardinality_error,
        }


def evaluate(estimates, truth, torso_radius: float = 0.2,
             time_tolerance: float = 0.05) -> EvaluationReport:
    """Score estimated positions against ground truth, frame by frame.

    ``estimates`` and ``truth`` are sequences of (timestamp, (n, 2) array).
    Each estimate frame is matched to the nearest truth frame; a gap larger
    than ``time_tolerance`` is an error.  Within a frame the assignment
    minimising the total compensated distance is used; unassigned truths
    count as missed detections and unassigned estimates as false tracks.
    """
    truth = sorted(truth, key=lambda x: x[0])
    truth_times = np.array([t for t, _ in truth])
    errors: list[float] = []
    missed = false_tracks = assigned = 0
    card_correct = 0
    card_err = []
    n_frames = 0
    for t_est, pts in estimates:
        idx = int(np.argmin(np.abs(truth_times - t_est)))
        if abs(truth_times[idx] - t_est) > time_tolerance:
            raise ValueError(
                f"no truth within {time_tolerance}s of estimate at t={t_est}")
        tru = np.asarray(truth[idx][1], dtype=float).reshape(-1, 2)
        est = np.asarray(pts, dtype=float).reshape(-1, 2)
        n_frames += 1
        card_err.append(abs(len(est) - len(tru)))
        card_correct += int(len(est) == len(tru))
        if len(est) and len(tru):
            cost = np.array([[compensated_error(e, g, torso_radius) for g in tru]
                             for e in est])
            rows, cols = linear_sum_assignment(cost)
            errors.extend(cost[rows, cols].tolist())
            assigned += len(rows)
            missed += len(tru) - len(rows)
            false_tracks += len(est) - len(rows)
        else:
            missed += len(tru)
            false_tracks += len(est)
    err = np.asarray(errors)
    if err.size:
        p50, p75, p95 = np.percentile(err, [50, 75, 95])
    else:
        p50 = p75 = p95 = float("nan")
    return EvaluationReport(
        n_frames=n_frames, errors=err,
        percentiles={"p50": float(p50), "p75": float(p75), "p95": float(p95)},
        missed=missed, false_tracks=false_tracks, n_assigned=assigned,
        cardinality_accuracy=card_correct / n_frames if n_frames else float("nan"),
        mean_cardinality_error=float(np.mean(card_err)) if card_err else float("nan"))


@dataclass
class LatencyReport:
    per_window_ms: np.ndarray      # total latency of complete windows
    stage_ms: dict                 # stage -> np.ndarray
    budget_ms: float

    @property
    def mean_ms(self) -> float:
        return float(np.mean(self.per_window_ms)) if self.per_window_ms.size else float("nan")

    @property
    def p99_ms(self) -> float:
        return float(np.percentile(self.per_window_ms, 99)) if self.per_window_ms.size else float("nan")

    @property
    def violations(self) -> int:
        return int(np.sum(self.per_window_ms > self.budget_ms))

    @property
    def dominant_stage(self) -> str:
        means = {k: float(np.mean(v)) for k, v in self.stage_ms.items() if v.size}
        return max(means, key=means.get) if means else ""

    def to_dict(self) -> dict:
        return {
            "mean_ms": self.mean_ms,
            "p99_ms": self.p99_ms,
            "violations": self.violations,
            "n_windows": int(self.per_window_ms.size),
            "budget_ms": self.budget_ms,
            "stage_mean_ms": {k: float(np.mean(v)) for k, v in self.stage_ms.items() if v.size},
            "dominant_stage": self.dominant_stage,
        }


def latency_benchmark(tracker: Tracker, windows, warmup: int = 5) -> LatencyReport:
    """Wall-clock statistics of :meth:`Tracker.run_window` over a window stream.

    Windows that end before the full chain runs (background warm-up) and the
    first ``warmup`` complete windows are excluded from the statistics.
    """
    complete: list[dict] = []
    for window in windows:
        _, latency = tracker.run_window(window)
        if all(s in latency for s in STAGES):
            complete.append(latency)
    kept = complete[warmup:]
    stage_ms = {s: np.array([c[s] for c in kept]) for s in STAGES}
    totals = np.array([sum(c.values()) for c in kept])
    return LatencyReport(per_window_ms=totals, stage_ms=stage_ms,
                         budget_ms=tracker.config.latency_budget_ms)
