"""Device-based benchmark tracker.

A carried transmitter is located by coherently combining the calibrated CSI
of all antennas against the geometric phase of a candidate position (a
synthetic-aperture matching score in (0, 1]), and tracked by a particle
filter under a constant-velocity motion model.  A coarse grid search is only
used for initialisation; per-step updates stay local to the particle cloud.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import AntennaArray


@dataclass(frozen=True)
class PfConfig:
    n_particles: int = 1000
    sigma_v: float = 0.3           # m/s velocity noise per step
    sigma_c: float = 0.1           # fallback matching-score std
    resample_threshold: float = 0.5   # of n_particles, effective sample size
    known_height: float = 1.0      # m, transmitter altitude
    dt: float = 0.01               # s between frames
    area: tuple = (0.0, 6.5, 0.0, 10.0)   # x_min, x_max, y_min, y_max
    adaptive_sigma_c: bool = True

    def __post_init__(self):
        if self.n_particles < 100:
            raise ValueError("need at least 100 particles")
        if self.sigma_c <= 0:
            raise ValueError("sigma_c must be positive")


@dataclass
class ParticleSet:
    """Particle states [x, y, vx, vy] with normalised weights."""

    states: np.ndarray             # (K, 4)
    weights: np.ndarray            # (K,)

    def estimate(self) -> np.ndarray:
        return self.weights @ self.states[:, :2]


def matching_scores(points: np.ndarray, values: np.ndarray, array: AntennaArray,
                    height: float) -> np.ndarray:
    """Coherence of the measured per-antenna phases with candidate positions.

    ``values`` is the calibrated per-antenna complex CSI (one column);
    ``points`` is (n, 2).  Scores are normalised by the total amplitude so a
    perfect phase match scores exactly 1.
    """
    values = np.asarray(values).reshape(-1)
    total_amp = float(np.sum(np.abs(values)))
    if total_amp <= 0.0:
        raise ValueError("zero total amplitude, matching undefined")
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    p3 = np.column_stack([pts, np.full(len(pts), height)])
    d = np.linalg.norm(array.positions[:, None, :] - p3[None, :, :], axis=2)
    phase = 2.0 * np.pi * d / array.wavelength
    coherent = np.abs(values.conj() @ np.exp(1j * phase))
    return coherent / total_amp


def matching_function(point, values, array: AntennaArray, height: float) -> float:
    return float(matching_scores(np.asarray(point, dtype=float).reshape(1, 2),
                                 values, array, height)[0])


def particle_weight(scores: np.ndarray, sigma_c: float) -> np.ndarray:
    """Scores -> normalised weights; the best score always dominates."""
    pw = (1.0 - np.asarray(scores, dtype=float)) ** 2
    log_w = (pw.min() - pw) / (2.0 * sigma_c ** 2)
    w = np.exp(log_w)
    return w / w.sum()


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    k = len(weights)
    positions = (rng.random() + np.arange(k)) / k
    return np.searchsorted(np.cumsum(weights), positions)


def init_particles(cfg: PfConfig, rng: np.random.Generator,
                   start=None) -> ParticleSet:
    """Uniform over the area, or a Gaussian cloud around a supplied start."""
    k = cfg.n_particles
    if start is None:
        x = rng.uniform(cfg.area[0], cfg.area[1], k)
        y = rng.uniform(cfg.area[2], cfg.area[3], k)
    else:
        x = start[0] + rng.normal(0.0, 0.3, k)
        y = start[1] + rng.normal(0.0, 0.3, k)
    v = rng.normal(0.0, cfg.sigma_v, (k, 2))
    states = np.column_stack([x, y, v])
    return ParticleSet(states=states, weights=np.full(k, 1.0 / k))


def coarse_init(values, array: AntennaArray, cfg: PfConfig,
                cell: float = 0.25) -> np.ndarray:
    """One coarse grid sweep of the matching score; returns the best cell."""
    xs = np.arange(cfg.area[0], cfg.area[1] + 1e-9, cell)
    ys = np.arange(cfg.area[2], cfg.area[3] + 1e-9, cell)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    scores = matching_scores(pts, values, array, cfg.known_height)
    return pts[int(np.argmax(scores))]


def pf_step(particles: ParticleSet, values, array: AntennaArray, cfg: PfConfig,
            rng: np.random.Generator) -> tuple[ParticleSet, np.ndarray, bool]:
    """One predict/weigh/estimate/resample cycle.

    Returns (particles, position estimate, reinitialised flag).  Weights come
    straight from the matching scores of the propagated particles; systematic
    resampling kicks in when the effective sample size drops below the
    configured fraction.
    """
    k = cfg.n_particles
    states = particles.states.copy()
    if cfg.dt > 0:
        n_v = rng.normal(0.0, cfg.sigma_v, (k, 2))
        states[:, 0] += cfg.dt * (states[:, 2] + n_v[:, 0])
        states[:, 1] += cfg.dt * (states[:, 3] + n_v[:, 1])
        states[:, 2] += n_v[:, 0]
        states[:, 3] += n_v[:, 1]
    scores = matching_scores(states[:, :2], values, array, cfg.known_height)
    sigma_c = cfg.sigma_c
    if cfg.adaptive_sigma_c:
        spread = float(np.std(scores))
        if spread > 1e-9:
            sigma_c = spread
    weights = particle_weight(scores, sigma_c)
    reinitialised = False
    if not np.all(np.isfinite(weights)) or weights.sum() <= 0:
        out = init_particles(cfg, rng)
        return out, out.estimate(), True
    estimate = weights @ states[:, :2]
    ess = 1.0 / float(weights @ weights)
    if ess < cfg.resample_threshold * k:
        idx = systematic_resample(weights, rng)
        states = states[idx]
        weights = np.full(k, 1.0 / k)
    return ParticleSet(states=states, weights=weights), estimate, reinitialised


def subcarrier_column(frame_h: np.ndarray) -> np.ndarray:
    """Per-antenna complex value: coherent mean over subcarriers."""
    return np.asarray(frame_h).mean(axis=1)


def track_active(frames, array: AntennaArray, cfg: PfConfig, seed: int = 0,
                 start=None):
    """Track a transmitter through a frame stream; yields (t, x, y) rows.

    ``start=None`` triggers a coarse grid initialisation on the first frame.
    """
    rng = np.random.default_rng(seed)
    particles = None
    for frame in frames:
        values = subcarrier_column(frame.h)
        if particles is None:
            anchor = coarse_init(values, array, cfg) if start is None else np.asarray(start, dtype=float)
            particles = init_particles(cfg, rng, start=anchor)
        particles, estimate, _ = pf_step(particles, values, array, cfg, rng)
        yield frame.timestamp, float(estimate[0]), float(estimate[1])
