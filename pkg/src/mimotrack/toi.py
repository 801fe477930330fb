"""Target-of-interest isolation.

Two steps turn raw calibrated CSI into one complex value per antenna per
window:

1. background removal -- subtract the trailing moving-average CSI so only
   moving scatterers survive;
2. serial interference cancellation and reconstruction -- iteratively locate
   the strongest range/Doppler component of the windowed residual, strip its
   phase ramps, and accumulate its no-Doppler contribution.  Iteration stops
   once a component falls ``power_stop_db`` below the strongest one (that
   final weak component is discarded).

The per-antenna extraction is independent across antennas;
:func:`sicar_extract_batch` runs all antennas of a window through the same
recursion with rank-1 updates of the range-Doppler profile, which is what the
real-time pipeline uses.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .core import CsiFrame


@dataclass(frozen=True)
class DftPlans:
    """Phase-shifted DFT matrices plus derotation tables for the SICAR loop.

    ``doppler`` is (n_time, n_doppler), ``range_`` is (n_subcarriers,
    n_range).  Entries carry a 1/sqrt(N) scaling and the zero-shift column
    sits at index N/2 (0-based) of each transform.
    """

    doppler: np.ndarray
    range_: np.ndarray
    n_doppler: int
    n_range: int
    power_stop_db: float
    derot_range: np.ndarray        # (n_range, n_subcarriers) e^{+j phase ramp}
    derot_doppler: np.ndarray      # (n_doppler, n_time)
    profile_range: np.ndarray      # (n_range bins, n_range) columns T^H a_b
    profile_doppler: np.ndarray    # (n_doppler bins, n_doppler) rows b_d^T D

    @property
    def n_subcarriers(self) -> int:
        return self.range_.shape[0]

    @property
    def n_time(self) -> int:
        return self.doppler.shape[0]

    @property
    def stop_factor(self) -> float:
        return 10.0 ** (-self.power_stop_db / 20.0)


def _ramp(peak_bins: np.ndarray, n_bins: int, length: int) -> np.ndarray:
    """Phase ramps 2*pi*(i-1)*((b-1)/N - 0.5) for every peak bin (1-based b)."""
    i = np.arange(length, dtype=float)
    frac = peak_bins[:, None] / n_bins - 0.5
    return 2.0 * np.pi * i[None, :] * frac


def build_plans(n_time: int, n_subcarriers: int, n_doppler: int = 128,
                n_range: int = 100, power_stop_db: float = 30.0) -> DftPlans:
    """Construct the Doppler/range transforms used by the SICAR recursion."""
    if n_doppler < n_time:
        raise ValueError("n_doppler must be >= window length")
    if n_range < n_subcarriers:
        raise ValueError("n_range must be >= subcarrier count")
    t_idx = np.arange(n_time, dtype=float)
    d_idx = np.arange(n_doppler, dtype=float) - n_doppler / 2.0
    doppler = np.exp(-2j * np.pi / n_doppler * np.outer(t_idx, d_idx)) / np.sqrt(n_doppler)
    f_idx = np.arange(n_subcarriers, dtype=float)
    r_idx = np.arange(n_range, dtype=float) - n_range / 2.0
    range_ = np.exp(-2j * np.pi / n_range * np.outer(f_idx, r_idx)) / np.sqrt(n_range)

    bins_r = np.arange(n_range, dtype=float)
    bins_d = np.arange(n_doppler, dtype=float)
    derot_range = np.exp(1j * _ramp(bins_r, n_range, n_subcarriers))
    derot_doppler = np.exp(1j * _ramp(bins_d, n_doppler, n_time))
    # profile response of a unit atom: columns T^H a_b, rows b_d^T D
    profile_range = range_.conj().T @ derot_range.conj().T     # (n_range, n_range bins)
    profile_doppler = derot_doppler.conj() @ doppler           # (n_doppler bins, n_doppler)
    return DftPlans(doppler=doppler, range_=range_, n_doppler=n_doppler,
                    n_range=n_range, power_stop_db=power_stop_db,
                    derot_range=derot_range, derot_doppler=derot_doppler,
                    profile_range=profile_range, profile_doppler=profile_doppler)


@dataclass(frozen=True)
class ToiMatrix:
    """Background-removed CSI of one window: (n_antennas, n_subcarriers, n_time)."""

    values: np.ndarray

    @staticmethod
    def from_frames(frames) -> "ToiMatrix":
        return ToiMatrix(values=np.stack([f.h for f in frames], axis=-1))

    def averaged_subcarriers(self) -> "ToiMatrix":
        return ToiMatrix(values=self.values.mean(axis=1, keepdims=True))


@dataclass(frozen=True)
class ToiVector:
    """One purified no-Doppler complex value per antenna."""

    values: np.ndarray             # (n_antennas,) complex
    iteration_counts: np.ndarray   # (n_antennas,) int


class BackgroundRemover:
    """Streaming trailing-mean subtraction over a fixed number of samples.

    ``push`` returns ``None`` for the first ``window_samples - 1`` frames
    (warm-up, output invalid) and the background-removed frame afterwards.
    """

    def __init__(self, window_samples: int):
        if window_samples < 2:
            raise ValueError("averaging window must span at least 2 samples")
        self.window_samples = int(window_samples)
        self._buf: deque = deque()
        self._sum = None
        self._pushes = 0

    @property
    def warmed_up(self) -> bool:
        return len(self._buf) >= self.window_samples

    def push(self, frame: CsiFrame) -> CsiFrame | None:
        h = frame.h
        if self._sum is None:
            self._sum = np.zeros_like(h)
        self._buf.append(h)
        self._sum = self._sum + h
        if len(self._buf) > self.window_samples:
            self._sum = self._sum - self._buf.popleft()
        self._pushes += 1
        if self._pushes % 1024 == 0:
            # running sum drifts by ~n*eps; refresh it occasionally
            self._sum = np.sum(self._buf, axis=0)
        if not self.warmed_up:
            return None
        mean = self._sum / len(self._buf)
        return CsiFrame(timestamp=frame.timestamp, h=h - mean, ue_id=frame.ue_id)


def remove_background(frames, window_samples: int):
    """Generator over background-removed frames (warm-up frames are dropped)."""
    remover = BackgroundRemover(window_samples)
    for frame in frames:
        out = remover.push(frame)
        if out is not None:
            yield out


def average_subcarriers(h_toi: np.ndarray) -> np.ndarray:
    """Per-time-sample mean over subcarriers of one antenna's (n_f, n_t) block."""
    h_toi = np.asarray(h_toi)
    return h_toi.mean(axis=0)


def sicar_extract(h_toi: np.ndarray, plans: DftPlans,
                  max_iterations: int = 32) -> tuple[complex, int]:
    """Reference single-antenna extraction; returns (value, iteration count).

    Follows the recursion verbatim: profile, peak, phase, ramp derotation,
    amplitude as the plain mean of the derotated block, subtraction, and the
    reconstruction sum |alpha| e^{j phase}.
    """
    x = np.array(h_toi, dtype=np.complex128)
    if x.shape != (plans.n_subcarriers, plans.n_time):
        raise ValueError(f"expected {(plans.n_subcarriers, plans.n_time)} block, got {x.shape}")
    if not np.any(x):
        return 0.0 + 0.0j, 0
    n_cells = x.size
    h_hat = 0.0 + 0.0j
    alpha_max = 0.0
    t_h = plans.range_.conj().T
    iterations = 0
    for l in range(1, max_iterations + 1):
        iterations = l
        profile = t_h @ x @ plans.doppler
        flat = np.abs(profile)
        b_r, b_d = np.unravel_index(np.argmax(flat), flat.shape)
        phase = np.angle(profile[b_r, b_d])
        derot = plans.derot_range[b_r][:, None] * plans.derot_doppler[b_d][None, :]
        alpha = np.sum(derot * x) / n_cells
        x = x - alpha * derot.conj()
        contrib = abs(alpha) * np.exp(1j * phase)
        h_hat += contrib
        if l == 1:
            alpha_max = abs(alpha)
            if alpha_max == 0.0:
                h_hat -= contrib
                break
        elif abs(alpha) < plans.stop_factor * alpha_max:
            h_hat -= contrib
            break
    return complex(h_hat), iterations


def sicar_extract_batch(toi: ToiMatrix, plans: DftPlans,
                        max_iterations: int = 32) -> ToiVector:
    """All-antenna extraction sharing one vectorised recursion.

    Numerically equivalent to mapping :func:`sicar_extract` over antennas;
    the range-Doppler profile is updated rank-1 per iteration instead of
    being recomputed from the residual.
    """
    x = np.array(toi.values, dtype=np.complex128)
    n_r, n_f, n_t = x.shape
    if (n_f, n_t) != (plans.n_subcarriers, plans.n_time):
        raise ValueError("block shape does not match plans")
    n_cells = n_f * n_t
    values = np.zeros(n_r, dtype=np.complex128)
    iters = np.zeros(n_r, dtype=int)
    alpha_max = np.zeros(n_r)
    energy = np.einsum("rft,rft->r", x, x.conj()).real
    active = np.flatnonzero(energy > 0.0)
    if active.size == 0:
        return ToiVector(values=values, iteration_counts=iters)

    # initial profile G = T^H X D for every antenna
    t_h = plans.range_.conj().T
    tmp = np.tensordot(t_h, x, axes=([1], [1]))          # (n_range, n_r, n_t)
    profile = np.transpose(tmp, (1, 0, 2)) @ plans.doppler  # (n_r, n_range, n_doppler)

    for l in range(1, max_iterations + 1):
        g = profile[active]
        flat = np.abs(g).reshape(len(active), -1)
        peaks = np.argmax(flat, axis=1)
        b_r, b_d = np.unravel_index(peaks, (plans.n_range, plans.n_doppler))
        phase = np.angle(g[np.arange(len(active)), b_r, b_d])
        dr = plans.derot_range[b_r]                      # (n_active, n_f)
        dd = plans.derot_doppler[b_d]                    # (n_active, n_t)
        alpha = np.einsum("rf,rft,rt->r", dr, x[active], dd) / n_cells
        x[active] -= alpha[:, None, None] * dr.conj()[:, :, None] * dd.conj()[:, None, :]
        profile[active] -= alpha[:, None, None] \
            * plans.profile_range[:, b_r].T[:, :, None] \
            * plans.profile_doppler[b_d][:, None, :]
        contrib = np.abs(alpha) * np.exp(1j * phase)
        values[active] += contrib
        iters[active] = l
        if l == 1:
            alpha_max[active] = np.abs(alpha)
            stop = np.abs(alpha) == 0.0
        else:
            stop = np.abs(alpha) < plans.stop_factor * alpha_max[active]
        if np.any(stop):
            values[active[stop]] -= contrib[stop]
            active = active[~stop]
        if active.size == 0:
            break
    return ToiVector(values=values, iteration_counts=iters)
