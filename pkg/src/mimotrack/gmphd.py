"""Gaussian-mixture PHD filter over the CBCS location estimates.

The filter propagates the first moment of the multi-target posterior as a
weighted Gaussian mixture: constant-velocity prediction, per-measurement
Kalman updates with clutter in the weight normalisation, then pruning,
merging and capping of the mixture.  States with weight above 0.5 are
reported as targets.  No association between measurements and tracks is ever
formed; the persistent labels attached to the output are plain
nearest-neighbour continuity for plotting and scoring, outside the filter's
guarantees.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cbcs import MeasurementSet


@dataclass(frozen=True)
class GaussianComponent:
    """One mixture term: weight, 4-D mean [x, y, vx, vy] and covariance."""

    weight: float
    mean: np.ndarray               # (4,)
    cov: np.ndarray                # (4, 4)

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=float).reshape(4)
        p = np.asarray(self.cov, dtype=float).reshape(4, 4)
        m.flags.writeable = False
        p.flags.writeable = False
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "cov", p)
        if not (np.isfinite(self.weight) and self.weight >= 0):
            raise ValueError("weight must be finite and non-negative")

    @property
    def position(self) -> np.ndarray:
        return self.mean[:2]


@dataclass(frozen=True)
class GmphdConfig:
    p_survival: float = 0.99
    p_detection: float = 0.95
    sigma_v: float = 0.3           # process noise, m/s
    dt: float = 0.1                # seconds between measurement sets
    clutter_density: float = 2.0 / 65.0   # kappa(z), per m^2 per frame
    measurement_cov: np.ndarray = field(
        default_factory=lambda: np.diag([0.05 ** 2, 0.05 ** 2]))
    weight_min: float = 1e-5       # pruning threshold
    merge_dist: float = 0.2        # m
    max_components: int = 50
    extraction_threshold: float = 0.5
    birth_weight: float = 0.1
    birth_cov: np.ndarray = field(default_factory=lambda: np.diag([0.25] * 4))
    birth_gate: float = 0.4        # m; measurements nearer an existing component spawn nothing
    merge_metric: str = "euclidean"   # or "mahalanobis"

    def __post_init__(self):
        if not (0 < self.p_survival <= 1 and 0 < self.p_detection <= 1):
            raise ValueError("survival/detection probabilities must be in (0, 1]")
        if self.merge_dist <= 0:
            raise ValueError("merge distance must be positive")


def motion_matrices(dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Constant-velocity transition F and per-axis noise input G (4x2)."""
    f = np.eye(4)
    f[0, 2] = f[1, 3] = dt
    g = np.zeros((4, 2))
    g[0, 0] = g[1, 1] = dt
    g[2, 0] = g[3, 1] = 1.0
    return f, g


OBSERVATION = np.zeros((2, 4))
OBSERVATION[0, 0] = OBSERVATION[1, 1] = 1.0
OBSERVATION.flags.writeable = False


def predict(components, births, cfg: GmphdConfig) -> list:
    """Survival thinning + constant-velocity displacement, births appended."""
    f, g = motion_matrices(cfg.dt)
    q = cfg.sigma_v ** 2 * (g @ g.T)
    out = [GaussianComponent(weight=cfg.p_survival * c.weight,
                             mean=f @ c.mean,
                             cov=q + f @ c.cov @ f.T)
           for c in components]
    out.extend(births)
    return out


def update(predicted, measurements, cfg: GmphdConfig) -> list:
    """Posterior mixture: missed-detection copies plus per-measurement updates."""
    z_list = measurements.points if isinstance(measurements, MeasurementSet) \
        else np.asarray(measurements, dtype=float).reshape(-1, 2)
    out = [GaussianComponent(weight=(1.0 - cfg.p_detection) * c.weight,
                             mean=c.mean, cov=c.cov)
           for c in predicted]
    if len(z_list) == 0 or not predicted:
        return out

    h = OBSERVATION
    r = np.asarray(cfg.measurement_cov, dtype=float)
    gains, posts, innov_cov_inv, norms = [], [], [], []
    for c in predicted:
        s = h @ c.cov @ h.T + r
        det = np.linalg.det(s)
        if det <= 0 or not np.isfinite(det):
            raise ValueError("innovation covariance not positive definite")
        s_inv = np.linalg.inv(s)
        k = c.cov @ h.T @ s_inv
        gains.append(k)
        posts.append((np.eye(4) - k @ h) @ c.cov)
        innov_cov_inv.append(s_inv)
        norms.append(1.0 / (2.0 * np.pi * np.sqrt(det)))

    for z in z_list:
        likes = np.empty(len(predicted))
        for i, c in enumerate(predicted):
            innov = z - h @ c.mean
            likes[i] = norms[i] * np.exp(-0.5 * innov @ innov_cov_inv[i] @ innov)
        weights = np.array([c.weight for c in predicted])
        denom = cfg.clutter_density + cfg.p_detection * float(likes @ weights)
        for i, c in enumerate(predicted):
            w = cfg.p_detection * c.weight * likes[i] / denom
            m = c.mean + gains[i] @ (z - h @ c.mean)
            out.append(GaussianComponent(weight=w, mean=m, cov=posts[i]))
    return out


def prune_merge_cap(components, cfg: GmphdConfig) -> list:
    """Drop weak terms, merge near-coincident ones, keep the heaviest J_max."""
    comps = [c for c in components if c.weight >= cfg.weight_min]
    merged = []
    remaining = sorted(comps, key=lambda c: -c.weight)
    while remaining:
        seed = remaining[0]
        cluster, rest = [], []
        for c in remaining:
            if cfg.merge_metric == "mahalanobis":
                d2 = float((c.position - seed.position)
                           @ np.linalg.inv(c.cov[:2, :2])
                           @ (c.position - seed.position))
                close = d2 <= cfg.merge_dist ** 2
            else:
                close = np.linalg.norm(c.position - seed.position) <= cfg.merge_dist
            (cluster if close else rest).append(c)
        w = sum(c.weight for c in cluster)
        m = sum(c.weight * c.mean for c in cluster) / w
        p = sum(c.weight * (c.cov + np.outer(m - c.mean, m - c.mean))
                for c in cluster) / w
        merged.append(GaussianComponent(weight=w, mean=m, cov=p))
        remaining = rest
    merged.sort(key=lambda c: -c.weight)
    return merged[:cfg.max_components]


def make_births(measurements, components, cfg: GmphdConfig) -> list:
    """Birth terms at measurements not explained by any existing component."""
    if measurements is None:
        return []
    z_list = measurements.points if isinstance(measurements, MeasurementSet) \
        else np.asarray(measurements, dtype=float).reshape(-1, 2)
    births = []
    positions = np.array([c.position for c in components]) if components else None
    for z in z_list:
        if positions is not None and len(positions):
            if np.min(np.linalg.norm(positions - z[None, :], axis=1)) <= cfg.birth_gate:
                continue
        births.append(GaussianComponent(
            weight=cfg.birth_weight,
            mean=np.array([z[0], z[1], 0.0, 0.0]),
            cov=cfg.birth_cov))
    return births


@dataclass(frozen=True)
class TrackSet:
    """Extracted multi-target states with persistent plotting labels."""

    timestamp: float
    labels: tuple                  # one int per state
    states: np.ndarray             # (n, 4)
    weights: np.ndarray            # (n,)

    @property
    def cardinality(self) -> int:
        return len(self.labels)

    def positions(self) -> np.ndarray:
        return self.states[:, :2] if len(self.labels) else np.zeros((0, 2))


def extract_states(components, cfg: GmphdConfig):
    """Means (and weights) of components heavier than the extraction threshold."""
    chosen = [c for c in components if c.weight > cfg.extraction_threshold]
    if not chosen:
        return np.zeros((0, 4)), np.zeros(0)
    return np.array([c.mean for c in chosen]), np.array([c.weight for c in chosen])


class _Labeler:
    """Greedy nearest-neighbour label continuity between extractions."""

    def __init__(self, gate: float):
        self.gate = gate
        self._next = 1
        self._prev: dict[int, np.ndarray] = {}

    def assign(self, states: np.ndarray) -> tuple:
        labels = [-1] * len(states)
        if len(states) and self._prev:
            prev_items = list(self._prev.items())
            pairs = []
            for i, s in enumerate(states):
                for j, (lab, pos) in enumerate(prev_items):
                    d = np.linalg.norm(s[:2] - pos)
                    if d <= self.gate:
                        pairs.append((d, i, j))
            pairs.sort()
            used_i, used_j = set(), set()
            for d, i, j in pairs:
                if i in used_i or j in used_j:
                    continue
                labels[i] = prev_items[j][0]
                used_i.add(i)
                used_j.add(j)
        for i in range(len(states)):
            if labels[i] == -1:
                labels[i] = self._next
                self._next += 1
        self._prev = {lab: states[i][:2].copy() for i, lab in enumerate(labels)}
        return tuple(labels)


class GmphdFilter:
    """Stateful filter: feed one measurement set per window, get tracks back.

    Births are seeded from the previous window's unexplained measurements, so
    a fresh target needs two sightings before it can reach the extraction
    threshold.
    """

    def __init__(self, cfg: GmphdConfig):
        self.cfg = cfg
        self.components: list = []
        self._prev_measurements = None
        self._labeler = _Labeler(gate=2.0 * cfg.merge_dist)

    def step(self, measurements, timestamp: float = 0.0) -> TrackSet:
        births = make_births(self._prev_measurements, self.components, self.cfg)
        predicted = predict(self.components, births, self.cfg)
        updated = update(predicted, measurements, self.cfg)
        self.components = prune_merge_cap(updated, self.cfg)
        self._prev_measurements = measurements
        states, weights = extract_states(self.components, self.cfg)
        labels = self._labeler.assign(states)
        return TrackSet(timestamp=timestamp, labels=labels, states=states,
                        weights=weights)
