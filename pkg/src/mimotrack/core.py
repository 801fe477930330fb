"""Domain types shared by every stage of the tracking chain.

All types are immutable after construction (arrays are marked read-only), so
instances can be shared freely across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SPEED_OF_LIGHT = 299792458.0  # m/s

# Tolerance used when counting grid cells: guards floor() against the usual
# 2.0/0.05 = 39.999... binary-representation trap.
_GRID_EPS = 1e-9


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class AntennaArray:
    """Receive-array geometry plus the OFDM numerology of the link.

    ``positions`` holds one 3-D coordinate (meters) per receive antenna;
    ``tx_position`` is the illuminating transmitter (UE0).
    """

    positions: np.ndarray          # (n_antennas, 3) meters
    tx_position: np.ndarray        # (3,) meters
    wavelength: float              # meters
    carrier_frequency: float       # Hz
    bandwidth: float               # Hz
    n_subcarriers: int
    sample_rate: float             # Hz (CSI snapshot rate)

    def __post_init__(self):
        pos = _readonly(np.asarray(self.positions, dtype=float).reshape(-1, 3))
        tx = _readonly(np.asarray(self.tx_position, dtype=float).reshape(3))
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "tx_position", tx)
        if pos.shape[0] < 1:
            raise ValueError("array needs at least one antenna")
        expected = SPEED_OF_LIGHT / self.carrier_frequency
        if abs(self.wavelength - expected) > 1e-3 * expected:
            raise ValueError(
                f"wavelength {self.wavelength} inconsistent with carrier "
                f"{self.carrier_frequency} Hz (expected {expected:.6g} m)"
            )
        # pairwise-distinct positions
        if pos.shape[0] > 1:
            d = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
            d[np.diag_indices_from(d)] = np.inf
            if np.min(d) <= 0.0:
                raise ValueError("antenna positions must be pairwise distinct")

    @property
    def n_antennas(self) -> int:
        return self.positions.shape[0]

    def subcarrier_offsets(self) -> np.ndarray:
        """Baseband subcarrier frequencies, evenly spaced over the bandwidth.

        Returns an array of length ``n_subcarriers`` spanning [-B/2, +B/2]
        (a single subcarrier sits at 0 Hz).
        """
        if self.n_subcarriers == 1:
            return np.zeros(1)
        return np.linspace(-self.bandwidth / 2.0, self.bandwidth / 2.0,
                           self.n_subcarriers)

    def subset(self, indices) -> "AntennaArray":
        """Array restricted to the given antenna indices (order preserved)."""
        idx = np.asarray(indices, dtype=int)
        return AntennaArray(
            positions=self.positions[idx],
            tx_position=self.tx_position,
            wavelength=self.wavelength,
            carrier_frequency=self.carrier_frequency,
            bandwidth=self.bandwidth,
            n_subcarriers=self.n_subcarriers,
            sample_rate=self.sample_rate,
        )


def make_array(carrier_frequency: float, bandwidth: float, n_subcarriers: int,
               sample_rate: float, positions, tx_position) -> AntennaArray:
    """Build an :class:`AntennaArray` deriving the wavelength from the carrier."""
    return AntennaArray(
        positions=np.asarray(positions, dtype=float),
        tx_position=np.asarray(tx_position, dtype=float),
        wavelength=SPEED_OF_LIGHT / carrier_frequency,
        carrier_frequency=carrier_frequency,
        bandwidth=bandwidth,
        n_subcarriers=n_subcarriers,
        sample_rate=sample_rate,
    )


@dataclass(frozen=True)
class CsiFrame:
    """One CSI snapshot: complex channel gain over antennas x subcarriers."""

    timestamp: float               # seconds
    h: np.ndarray                  # (n_antennas, n_subcarriers) complex
    ue_id: int = 0

    def __post_init__(self):
        h = np.asarray(self.h, dtype=np.complex128)
        if h.ndim != 2:
            raise ValueError("CSI matrix must be 2-D (antennas x subcarriers)")
        if not np.all(np.isfinite(h.view(float))):
            raise ValueError("CSI matrix contains non-finite entries")
        object.__setattr__(self, "h", _readonly(h))

    def matches(self, array: AntennaArray) -> bool:
        return self.h.shape == (array.n_antennas, array.n_subcarriers)


@dataclass(frozen=True)
class CsiWindow:
    """A uniformly sampled run of frames covering ``window_duration`` seconds."""

    frames: tuple                  # tuple of CsiFrame
    window_duration: float         # seconds

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        ts = np.array([f.timestamp for f in self.frames])
        if len(ts) >= 2:
            dt = np.diff(ts)
            if np.any(dt <= 0):
                raise ValueError("frame timestamps must be strictly increasing")
            if np.max(dt) - np.min(dt) > 1e-6:
                raise ValueError("frame spacing must be uniform within 1 us")

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def stack(self) -> np.ndarray:
        """Frames stacked to a (n_antennas, n_subcarriers, n_frames) tensor."""
        return np.stack([f.h for f in self.frames], axis=-1)

    @staticmethod
    def from_frames(frames, sample_rate: float) -> "CsiWindow":
        frames = tuple(frames)
        duration = len(frames) / sample_rate
        w = CsiWindow(frames=frames, window_duration=duration)
        if round(duration * sample_rate) != len(frames):
            raise ValueError("frame count inconsistent with window duration")
        return w


@dataclass(frozen=True)
class Grid2D:
    """Row-major candidate grid over the monitoring area.

    Point ``m`` sits at ``(x_min + (m % n_x) * cell, y_min + (m // n_x) * cell)``
    so the dictionary column index <-> location map is reproducible across runs.
    """

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    cell: float
    target_height: float = 1.0

    def __post_init__(self):
        if self.cell <= 0:
            raise ValueError("cell size must be positive")
        if self.x_max < self.x_min or self.y_max < self.y_min:
            raise ValueError("grid bounds are inverted")

    @property
    def n_x(self) -> int:
        return int(np.floor((self.x_max - self.x_min) / self.cell + _GRID_EPS)) + 1

    @property
    def n_y(self) -> int:
        return int(np.floor((self.y_max - self.y_min) / self.cell + _GRID_EPS)) + 1

    @property
    def n_points(self) -> int:
        return self.n_x * self.n_y

    def points(self) -> np.ndarray:
        """All candidate locations as an (n_points, 2) array, row-major in y."""
        xs = self.x_min + self.cell * np.arange(self.n_x)
        ys = self.y_min + self.cell * np.arange(self.n_y)
        gx, gy = np.meshgrid(xs, ys)          # rows indexed by y
        return np.column_stack([gx.ravel(), gy.ravel()])

    def points3d(self) -> np.ndarray:
        """Candidate locations lifted to 3-D at the configured target height."""
        p = self.points()
        return np.column_stack([p, np.full(len(p), self.target_height)])

    def contains(self, xy) -> bool:
        x, y = float(xy[0]), float(xy[1])
        return (self.x_min - _GRID_EPS <= x <= self.x_max + _GRID_EPS
                and self.y_min - _GRID_EPS <= y <= self.y_max + _GRID_EPS)


def bistatic_path_length(tx, rx, p) -> float:
    """Total propagation path tx -> p -> rx in meters.

    Symmetric in tx/rx and never shorter than the tx-rx baseline.
    """
    tx = np.asarray(tx, dtype=float)
    rx = np.asarray(rx, dtype=float)
    p = np.asarray(p, dtype=float)
    return float(np.linalg.norm(p - tx) + np.linalg.norm(p - rx))


def bistatic_path_lengths(tx: np.ndarray, rx: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Vectorised bistatic lengths for many receivers and many points.

    ``rx`` is (n_rx, 3), ``pts`` is (n_pts, 3); returns (n_rx, n_pts).
    """
    tx = np.asarray(tx, dtype=float).reshape(3)
    rx = np.asarray(rx, dtype=float).reshape(-1, 3)
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    d_tx = np.linalg.norm(pts - tx[None, :], axis=1)           # (n_pts,)
    d_rx = np.linalg.norm(rx[:, None, :] - pts[None, :, :], axis=2)
    return d_rx + d_tx[None, :]
