"""Phase calibration of raw CSI.

Raw CSI carries frequency-dependent phase errors (sampling-frequency /
symbol-timing offset, IQ imbalance, carrier phase offset) plus a constant
per-antenna offset.  Both are fitted once from recordings of a transmitter at
known reference positions and then reused verbatim for every later recording
("one-fits-all").  Calibration is phase-only: amplitudes are never touched.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import least_squares

from .core import SPEED_OF_LIGHT, AntennaArray, CsiFrame


class CalibrationError(RuntimeError):
    """Fit failed; ``best`` carries the best parameters found so far."""

    def __init__(self, message: str, best=None):
        super().__init__(message)
        self.best = best


def wrap_angle(a):
    """Wrap angles to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    out = -np.mod(-a + np.pi, 2 * np.pi) + np.pi
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class CalibrationParams:
    """Fitted error model: IQ terms, linear slope, constant and antenna offsets."""

    eps_g: float = 1.0             # IQ gain mismatch
    eps_t: float = 0.0             # IQ time offset (rad / subcarrier)
    eps_p: float = 0.0             # IQ phase mismatch (rad)
    sfo_sto: float = 0.0           # linear slope (rad / subcarrier)
    cpo: float = 0.0               # constant offset (rad)
    ant_offsets: np.ndarray = None  # (n_antennas,) rad, wrapped to (-pi, pi]

    def __post_init__(self):
        offs = np.zeros(0) if self.ant_offsets is None else np.asarray(self.ant_offsets, dtype=float)
        vals = [self.eps_g, self.eps_t, self.eps_p, self.sfo_sto, self.cpo]
        if not (np.all(np.isfinite(vals)) and np.all(np.isfinite(offs))):
            raise ValueError("calibration parameters must be finite")
        offs = wrap_angle(offs)
        offs = np.atleast_1d(offs)
        offs.flags.writeable = False
        object.__setattr__(self, "ant_offsets", offs)

    def to_dict(self) -> dict:
        return {
            "eps_g": self.eps_g, "eps_t": self.eps_t, "eps_p": self.eps_p,
            "sfo_sto": self.sfo_sto, "cpo": self.cpo,
            "ant_offsets": self.ant_offsets.tolist(),
        }

    @staticmethod
    def from_dict(d: dict) -> "CalibrationParams":
        return CalibrationParams(
            eps_g=float(d["eps_g"]), eps_t=float(d["eps_t"]), eps_p=float(d["eps_p"]),
            sfo_sto=float(d["sfo_sto"]), cpo=float(d["cpo"]),
            ant_offsets=np.asarray(d["ant_offsets"], dtype=float),
        )


def save_params(path, params: CalibrationParams):
    with open(path, "w") as f:
        json.dump(params.to_dict(), f, indent=1)


def load_params(path) -> CalibrationParams:
    with open(path) as f:
        return CalibrationParams.from_dict(json.load(f))


def iq_phase(n_f, eps_g: float, eps_t: float, eps_p: float):
    """IQ-imbalance phase error at subcarrier index ``n_f`` (1-based).

    Raises when ``cos(n_f * eps_t)`` is singular; callers must keep
    ``|eps_t|`` below ``pi / (2 * n_f_max)``.
    """
    n_f = np.asarray(n_f, dtype=float)
    c = np.cos(n_f * eps_t)
    if np.any(np.abs(c) < 1e-12):
        raise ValueError("cos(n_f * eps_t) singular; eps_t out of range")
    out = np.arctan(eps_g * np.sin(n_f * eps_t + eps_p) / c)
    return out if out.ndim else float(out)


def frequency_phase_curve(params: CalibrationParams, n_subcarriers: int) -> np.ndarray:
    """Total frequency-dependent phase error over subcarriers 1..n_subcarriers."""
    n_f = np.arange(1, n_subcarriers + 1, dtype=float)
    return iq_phase(n_f, params.eps_g, params.eps_t, params.eps_p) \
        + n_f * params.sfo_sto + params.cpo


def phase_error_matrix(params: CalibrationParams, n_antennas: int,
                       n_subcarriers: int) -> np.ndarray:
    """Full (n_antennas, n_subcarriers) phase-error matrix incl. antenna offsets."""
    curve = frequency_phase_curve(params, n_subcarriers)
    offs = params.ant_offsets
    if offs.size == 0:
        offs = np.zeros(n_antennas)
    if offs.size != n_antennas:
        raise ValueError("ant_offsets length does not match antenna count")
    return offs[:, None] + curve[None, :]


@dataclass(frozen=True)
class CalibrationDataset:
    """Residual phases of a transmitter observed at known reference positions.

    ``delta_phi`` holds one row per (reference point, antenna): the raw phase
    minus the geometric line-of-sight phase.  ``row_antenna`` maps each row to
    its antenna index for the per-antenna offset fit.
    """

    delta_phi: np.ndarray          # (n_rp * n_antennas, n_subcarriers) rad
    row_antenna: np.ndarray        # (n_rp * n_antennas,) int
    n_antennas: int
    n_reference_points: int


def los_phase(array: AntennaArray, position) -> np.ndarray:
    """Expected line-of-sight phase (n_antennas, n_subcarriers) for a tx at ``position``."""
    p = np.asarray(position, dtype=float).reshape(3)
    d = np.linalg.norm(array.positions - p[None, :], axis=1)
    freqs = array.carrier_frequency + array.subcarrier_offsets()
    return -2.0 * np.pi * d[:, None] * freqs[None, :] / SPEED_OF_LIGHT


def build_dataset(array: AntennaArray, recordings) -> CalibrationDataset:
    """Assemble a dataset from ``recordings``: iterable of (position, frames).

    Frames at the same reference point are averaged coherently before the
    line-of-sight phase is removed.
    """
    rows = []
    row_ant = []
    n_rp = 0
    for position, frames in recordings:
        frames = list(frames)
        if not frames:
            continue
        mean_h = np.mean([f.h for f in frames], axis=0)
        delta = wrap_angle(np.angle(mean_h) - los_phase(array, position))
        rows.append(delta)
        row_ant.append(np.arange(array.n_antennas))
        n_rp += 1
    if n_rp == 0:
        raise ValueError("no usable reference-point recordings")
    return CalibrationDataset(
        delta_phi=np.vstack(rows),
        row_antenna=np.concatenate(row_ant),
        n_antennas=array.n_antennas,
        n_reference_points=n_rp,
    )


def _model_curve(theta, n_f):
    eps_g, eps_t, eps_p, slope, cpo = theta
    return np.arctan(eps_g * np.sin(n_f * eps_t + eps_p) / np.cos(n_f * eps_t)) \
        + n_f * slope + cpo


def _wrapped_cost(theta, n_f, target):
    return float(np.sum(wrap_angle(target - _model_curve(theta, n_f)) ** 2))


def fit_frequency_errors(dataset: CalibrationDataset, n_starts: int = 5,
                         max_iter: int = 400) -> CalibrationParams:
    """Fit the frequency-dependent error terms by damped least squares.

    The per-row unwrapped residual phases are averaged into a single curve
    (constant per-row offsets -- antenna offsets and 2*pi branches -- are
    absorbed by the constant term and later refitted per antenna).  The fit is
    restarted from a coarse grid of IQ time offsets and the winner is chosen
    by the wrap-aware objective.
    """
    n_sub = dataset.delta_phi.shape[1]
    if n_sub < 5:
        raise ValueError("need at least 5 subcarriers to fit 5 unknowns")
    n_f = np.arange(1, n_sub + 1, dtype=float)
    unwrapped = np.unwrap(dataset.delta_phi, axis=1)
    target = unwrapped.mean(axis=0)
    target = target - 2 * np.pi * np.round(np.mean(target) / (2 * np.pi))

    if np.allclose(dataset.delta_phi, 0.0):
        return CalibrationParams(eps_g=1.0)

    # keep cos(n_f * eps_t) well away from zero over the fitted band
    eps_t_max = 0.95 * np.pi / (2 * n_sub)
    slope0, cpo0 = np.polyfit(n_f, target, 1)
    lo = [0.2, -eps_t_max, -np.pi / 2, slope0 - 0.5, cpo0 - 2 * np.pi]
    hi = [5.0, eps_t_max, np.pi / 2, slope0 + 0.5, cpo0 + 2 * np.pi]

    best = None
    best_cost = np.inf
    converged = False
    for eps_t0 in np.linspace(-0.7, 0.7, n_starts) * eps_t_max:
        theta0 = np.array([1.0, eps_t0, 0.0, slope0, cpo0])
        res = least_squares(
            lambda th: target - _model_curve(th, n_f), theta0,
            bounds=(lo, hi), method="trf", max_nfev=max_iter)
        cost = _wrapped_cost(res.x, n_f, target)
        # prefer the smaller-|eps_t| solution among near-ties
        better = cost < best_cost - 1e-12 or (
            abs(cost - best_cost) <= 1e-12 and best is not None
            and abs(res.x[1]) < abs(best[1]))
        if better:
            best, best_cost = res.x, cost
        converged = converged or res.status > 0

    params = CalibrationParams(eps_g=best[0], eps_t=best[1], eps_p=best[2],
                               sfo_sto=best[3], cpo=best[4])
    zero_cost = _wrapped_cost(np.array([1.0, 0, 0, 0, 0]), n_f, target)
    if not converged:
        raise CalibrationError("frequency fit did not converge", best=params)
    if best_cost > zero_cost + 1e-9:
        # regression must not be worse than doing nothing
        return CalibrationParams(eps_g=1.0)
    return params


def fit_antenna_offsets(dataset: CalibrationDataset,
                        params: CalibrationParams) -> np.ndarray:
    """Per-antenna constant offsets from the post-frequency-fit residuals.

    The circular minimiser of ``|sum(e^{j dPsi} - e^{j phi})|^2`` is the angle
    of the mean residual phasor.
    """
    if dataset.n_reference_points < 2:
        raise ValueError("need at least 2 reference points for antenna offsets")
    n_sub = dataset.delta_phi.shape[1]
    curve = frequency_phase_curve(params, n_sub)
    delta_psi = wrap_angle(dataset.delta_phi - curve[None, :])
    offsets = np.zeros(dataset.n_antennas)
    for n_r in range(dataset.n_antennas):
        rows = delta_psi[dataset.row_antenna == n_r]
        s = np.sum(np.exp(1j * rows))
        if abs(s) < 1e-12 * rows.size:
            raise CalibrationError(f"antenna {n_r}: residual phasors cancel, offset undefined")
        offsets[n_r] = np.angle(s)
    return offsets


def fit_calibration(dataset: CalibrationDataset) -> CalibrationParams:
    """Full fit: frequency-domain terms, then per-antenna offsets."""
    params = fit_frequency_errors(dataset)
    offsets = fit_antenna_offsets(dataset, params)
    return replace(params, ant_offsets=offsets)


def apply_calibration(frame: CsiFrame, params: CalibrationParams) -> CsiFrame:
    """Remove the fitted phase errors; exact inverse of the impairment model."""
    n_r, n_f = frame.h.shape
    err = phase_error_matrix(params, n_r, n_f)
    return CsiFrame(timestamp=frame.timestamp,
                    h=frame.h * np.exp(-1j * err),
                    ue_id=frame.ue_id)


def mean_phase_residual(frames, array: AntennaArray, positions) -> float:
    """Mean |wrapped phase error| of calibrated frames vs. their LoS geometry."""
    errs = []
    for frame, pos in zip(frames, positions):
        ideal = los_phase(array, pos)
        errs.append(np.abs(wrap_angle(np.angle(frame.h) - ideal)))
    return float(np.mean(errs))
