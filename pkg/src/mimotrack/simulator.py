"""Physics-grounded CSI synthesis for tracking experiments.

The channel is modelled as a static multipath field plus one first-order
scattering path per moving person: the signal bounces off the torso surface
facing the transmitter, picks up a bistatic phase, a 1/d amplitude and a
Doppler ramp.  Within one window a target is frozen and only the Doppler ramp
advances the phase; targets move between windows via :func:`advance_scene`.
Everything is a pure function of (scene, seed, time range), so disjoint
windows can be generated concurrently.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace

import numpy as np

from .calibration import CalibrationParams, phase_error_matrix
from .core import SPEED_OF_LIGHT, AntennaArray, CsiFrame, CsiWindow, make_array

MAX_TORSO_RADIUS = 0.40   # m; paper regime is 0.15-0.30
MAX_SPEED = 3.0           # m/s, pedestrian regime


@dataclass(frozen=True)
class Target:
    """A moving person: 2-D kinematics plus a cylindrical torso."""

    id: int
    position: np.ndarray           # (2,) m
    velocity: np.ndarray           # (2,) m/s
    torso_radius: float = 0.20    # m
    rcs_gain: float = 1.0         # dimensionless amplitude scale
    height: float = 1.0           # scatter height, m
    waypoints: tuple = ()         # optional loop of 2-D points
    speed: float = 1.0            # m/s used in waypoint mode
    waypoint_index: int = 0
    active_ue_id: int | None = None  # carried transmitter for benchmarking

    def __post_init__(self):
        p = np.asarray(self.position, dtype=float).reshape(2)
        v = np.asarray(self.velocity, dtype=float).reshape(2)
        p.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "velocity", v)
        object.__setattr__(self, "waypoints",
                           tuple(tuple(map(float, w)) for w in self.waypoints))
        if not 0.0 <= self.torso_radius <= MAX_TORSO_RADIUS:
            raise ValueError(f"torso radius {self.torso_radius} outside [0, {MAX_TORSO_RADIUS}] m")
        if np.linalg.norm(v) > MAX_SPEED + 1e-9:
            raise ValueError(f"speed {np.linalg.norm(v):.2f} exceeds {MAX_SPEED} m/s")

    @property
    def position3d(self) -> np.ndarray:
        return np.array([self.position[0], self.position[1], self.height])


@dataclass(frozen=True)
class Scene:
    """Everything needed to regenerate a CSI stream deterministically."""

    targets: tuple = ()
    noise_std: float = 0.0
    rng_seed: int = 0
    n_static_reflectors: int = 5
    static_field: np.ndarray | None = None   # explicit (n_r, n_f) override
    velocity_noise_std: float = 0.0           # sigma_v for advance_scene
    bounds: tuple | None = None               # (x_min, x_max, y_min, y_max)
    step: int = 0

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))
        if self.static_field is not None:
            sf = np.asarray(self.static_field, dtype=np.complex128)
            sf.flags.writeable = False
            object.__setattr__(self, "static_field", sf)


def scatter_point(target: Target, toward) -> np.ndarray:
    """Point on the torso surface nearest ``toward`` (at the target's height).

    With a zero torso radius this is the body centre itself.  Raises when the
    observer sits inside the torso (horizontally).
    """
    toward = np.asarray(toward, dtype=float).reshape(-1)
    center = target.position
    d2 = toward[:2] - center
    dist = np.linalg.norm(d2)
    if target.torso_radius == 0.0:
        return target.position3d
    if dist <= target.torso_radius:
        raise ValueError("observer lies inside the torso cylinder")
    offset = center + target.torso_radius * d2 / dist
    return np.array([offset[0], offset[1], target.height])


def doppler_path_delta(target: Target, rx, tx, t: float) -> float:
    """Bistatic path-length change after ``t`` seconds of constant velocity.

    Computed from the unit vectors pointing from receiver and transmitter
    toward the scatter point; positive when the path lengthens.
    """
    rx = _pad3(rx)
    tx = _pad3(tx)
    sp = scatter_point(target, tx) if target.torso_radius > 0 else target.position3d
    u_rx = sp - rx
    u_tx = sp - tx
    n_rx, n_tx = np.linalg.norm(u_rx), np.linalg.norm(u_tx)
    if n_rx < 1e-9 or n_tx < 1e-9:
        raise ValueError("target coincides with an antenna")
    u = u_rx / n_rx + u_tx / n_tx
    return float(-(u[:2] @ target.velocity) * t)


def _pad3(p) -> np.ndarray:
    p = np.asarray(p, dtype=float).reshape(-1)
    if p.size == 2:
        return np.array([p[0], p[1], 0.0])
    return p[:3]


def _rng(seed: int, *key) -> np.random.Generator:
    # crc32 keeps the stream keys stable across processes (hash() is salted)
    digest = [seed & 0xFFFFFFFF] + [zlib.crc32(repr(k).encode()) for k in key]
    return np.random.default_rng(np.random.SeedSequence(digest))


def _reflectors(scene: Scene, array: AntennaArray):
    """Static reflector positions/gains, drawn once per scene seed."""
    if scene.n_static_reflectors <= 0:
        return np.zeros((0, 3)), np.zeros(0, dtype=complex)
    rng = _rng(scene.rng_seed, "static")
    if scene.bounds is not None:
        x0, x1, y0, y1 = scene.bounds
    else:
        pos = array.positions
        x0, x1 = pos[:, 0].min() - 1.0, pos[:, 0].max() + 1.0
        y0, y1 = pos[:, 1].min() - 1.0, pos[:, 1].max() + 1.0
    n = scene.n_static_reflectors
    pts = np.column_stack([
        rng.uniform(x0, x1, n), rng.uniform(y0, y1, n), rng.uniform(0.2, 2.5, n)])
    gains = rng.normal(1.0, 0.3, n) * np.exp(2j * np.pi * rng.random(n))
    return pts, gains


def static_field(scene: Scene, array: AntennaArray,
                 tx_position=None) -> np.ndarray:
    """Static channel component: LoS plus the scene's fixed reflectors.

    ``tx_position`` defaults to the array's UE0; benchmarking passes the
    carried transmitter's position instead.
    """
    if scene.static_field is not None and tx_position is None:
        return scene.static_field
    tx = array.tx_position if tx_position is None else _pad3(tx_position)
    freqs = array.carrier_frequency + array.subcarrier_offsets()
    d_los = np.linalg.norm(array.positions - tx[None, :], axis=1)
    d_los = np.maximum(d_los, 1e-6)
    out = (1.0 / d_los[:, None]) * np.exp(-2j * np.pi * d_los[:, None] * freqs[None, :] / SPEED_OF_LIGHT)
    pts, gains = _reflectors(scene, array)
    for p, g in zip(pts, gains):
        d = np.linalg.norm(p - tx) + np.linalg.norm(array.positions - p[None, :], axis=1)
        out += (g / d[:, None]) * np.exp(-2j * np.pi * d[:, None] * freqs[None, :] / SPEED_OF_LIGHT)
    return out


def target_response(target: Target, array: AntennaArray) -> tuple[np.ndarray, np.ndarray]:
    """Per-antenna scattered response of one frozen target.

    Returns ``(h0, doppler)``: the (n_r, n_f) complex response at the window
    start and the per-antenna Doppler frequency in Hz.
    """
    sp = scatter_point(target, array.tx_position) if target.torso_radius > 0 \
        else target.position3d
    d_tx = np.linalg.norm(sp - array.tx_position)
    d_rx = np.linalg.norm(array.positions - sp[None, :], axis=1)
    if d_tx < 1e-9 or np.any(d_rx < 1e-9):
        raise ValueError("target coincides with an antenna")
    d = d_rx + d_tx
    freqs = array.carrier_frequency + array.subcarrier_offsets()
    amp = target.rcs_gain / d
    h0 = amp[:, None] * np.exp(-2j * np.pi * d[:, None] * freqs[None, :] / SPEED_OF_LIGHT)
    u_rx = (sp[None, :] - array.positions)
    u_rx /= np.linalg.norm(u_rx, axis=1, keepdims=True)
    u_tx = (sp - array.tx_position) / d_tx
    radial = (u_rx[:, :2] + u_tx[None, :2]) @ target.velocity
    doppler = radial / array.wavelength     # Hz; phase term e^{-j 2 pi nu t}
    return h0, doppler


def simulate_window(scene: Scene, array: AntennaArray, t0: float, n_t: int) -> CsiWindow:
    """Synthesise ``n_t`` frames starting at ``t0`` for the scene as it stands."""
    if n_t < 1:
        raise ValueError("need at least one frame")
    dt = 1.0 / array.sample_rate
    t_rel = np.arange(n_t) * dt
    h = np.broadcast_to(static_field(scene, array)[:, :, None],
                        (array.n_antennas, array.n_subcarriers, n_t)).copy()
    for target in scene.targets:
        h0, doppler = target_response(target, array)
        ramp = np.exp(-2j * np.pi * doppler[:, None] * t_rel[None, :])
        h += h0[:, :, None] * ramp[:, None, :]
    if scene.noise_std > 0:
        rng = _rng(scene.rng_seed, "window", int(round(t0 * array.sample_rate)))
        shape = h.shape
        h = h + (scene.noise_std / np.sqrt(2.0)) * (
            rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
    frames = [CsiFrame(timestamp=t0 + k * dt, h=h[:, :, k], ue_id=0)
              for k in range(n_t)]
    return CsiWindow.from_frames(frames, array.sample_rate)


def simulate_active_frames(scene: Scene, array: AntennaArray, target: Target,
                           t0: float, n_t: int) -> list[CsiFrame]:
    """CSI of the transmitter carried by ``target`` (line of sight dominant).

    The carried UE moves smoothly inside the window; reflections off the
    scene's fixed reflectors move with it and are included.
    """
    if target.active_ue_id is None:
        raise ValueError("target carries no active UE")
    dt = 1.0 / array.sample_rate
    freqs = array.carrier_frequency + array.subcarrier_offsets()
    pts, gains = _reflectors(scene, array)
    frames = []
    rng = None
    if scene.noise_std > 0:
        rng = _rng(scene.rng_seed, "active", target.active_ue_id,
                   int(round(t0 * array.sample_rate)))
    for k in range(n_t):
        pos2 = target.position + target.velocity * (k * dt)
        p = np.array([pos2[0], pos2[1], target.height])
        d = np.linalg.norm(array.positions - p[None, :], axis=1)
        d = np.maximum(d, 1e-6)
        h = (1.0 / d[:, None]) * np.exp(-2j * np.pi * d[:, None] * freqs[None, :] / SPEED_OF_LIGHT)
        for rp, g in zip(pts, gains):
            dr = np.linalg.norm(rp - p) + np.linalg.norm(array.positions - rp[None, :], axis=1)
            h += (g / dr[:, None]) * np.exp(-2j * np.pi * dr[:, None] * freqs[None, :] / SPEED_OF_LIGHT)
        if rng is not None:
            h = h + (scene.noise_std / np.sqrt(2.0)) * (
                rng.standard_normal(h.shape) + 1j * rng.standard_normal(h.shape))
        frames.append(CsiFrame(timestamp=t0 + k * dt, h=h, ue_id=target.active_ue_id))
    return frames


def impair_frame(frame: CsiFrame, params: CalibrationParams) -> CsiFrame:
    """Forward hardware-impairment model: rotate each entry by the error phase."""
    err = phase_error_matrix(params, frame.h.shape[0], frame.h.shape[1])
    return CsiFrame(timestamp=frame.timestamp, h=frame.h * np.exp(1j * err),
                    ue_id=frame.ue_id)


def apply_impairments(window: CsiWindow, params: CalibrationParams) -> CsiWindow:
    return CsiWindow(frames=[impair_frame(f, params) for f in window.frames],
                     window_duration=window.window_duration)


def _advance_target(target: Target, dt: float, noise: np.ndarray | None) -> Target:
    if target.waypoints:
        wps = np.asarray(target.waypoints, dtype=float)
        idx = target.waypoint_index % len(wps)
        goal = wps[idx]
        to_goal = goal - target.position
        dist = np.linalg.norm(to_goal)
        reach = target.speed * dt
        if dist <= max(reach, 1e-9):
            idx = (idx + 1) % len(wps)
            goal = wps[idx]
            to_goal = goal - target.position
            dist = np.linalg.norm(to_goal)
        v = target.speed * to_goal / dist if dist > 1e-9 else np.zeros(2)
        return replace(target, position=target.position + v * dt,
                       velocity=v, waypoint_index=idx)
    v = target.velocity if noise is None else target.velocity + noise
    speed = np.linalg.norm(v)
    if speed > MAX_SPEED:
        v = v * (MAX_SPEED / speed)
    return replace(target, position=target.position + v * dt, velocity=v)


def advance_scene(scene: Scene, dt: float) -> Scene:
    """Move every target forward by ``dt``; velocity noise std is sigma_v * dt."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    if dt == 0.0:
        return scene
    noise = None
    if scene.velocity_noise_std > 0:
        rng = _rng(scene.rng_seed, "advance", scene.step)
        noise = rng.normal(0.0, scene.velocity_noise_std * dt,
                           size=(len(scene.targets), 2))
    targets = tuple(
        _advance_target(t, dt, None if noise is None else noise[i])
        for i, t in enumerate(scene.targets))
    return replace(scene, targets=targets, step=scene.step + 1)


def make_distributed_array(n_arrays: int = 8, n_per_array: int = 8,
                           room_x: float = 6.5, room_y: float = 10.0,
                           element_spacing: float = 0.07,
                           height: float = 1.205,
                           carrier_frequency: float = 2.61e9,
                           bandwidth: float = 18e6,
                           n_subcarriers: int = 100,
                           sample_rate: float = 100.0,
                           tx_position=None) -> AntennaArray:
    """Uniform linear sub-arrays spread along the four walls of a room.

    Antennas are indexed sub-array by sub-array, so "sequential" subsets pick
    consecutive elements of one wall while "distributed" subsets can span the
    whole perimeter.
    """
    walls = [
        ((0.0, 0.0), (room_x, 0.0)),          # bottom, along +x
        ((room_x, 0.0), (room_x, room_y)),    # right, along +y
        ((room_x, room_y), (0.0, room_y)),    # top, along -x
        ((0.0, room_y), (0.0, 0.0)),          # left, along -y
    ]
    per_wall = max(1, n_arrays // 4)
    centers = []
    for (a, b) in walls:
        a, b = np.asarray(a), np.asarray(b)
        for i in range(per_wall):
            frac = (i + 1) / (per_wall + 1)
            centers.append((a + frac * (b - a), (b - a) / np.linalg.norm(b - a)))
    centers = centers[:n_arrays]
    positions = []
    for center, direction in centers:
        offsets = (np.arange(n_per_array) - (n_per_array - 1) / 2.0) * element_spacing
        for o in offsets:
            p = center + o * direction
            positions.append([p[0], p[1], height])
    if tx_position is None:
        tx_position = [room_x / 2.0, room_y / 2.0, 0.8]
    return make_array(carrier_frequency, bandwidth, n_subcarriers, sample_rate,
                      positions=np.asarray(positions), tx_position=tx_position)


def scene_from_config(cfg: dict) -> tuple[Scene, AntennaArray, dict]:
    """Build (scene, array, extras) from a scene-description JSON document."""
    arr_cfg = dict(cfg.get("array", {}))
    if "positions" in arr_cfg:
        array = make_array(
            carrier_frequency=float(arr_cfg.get("carrier_hz", 2.61e9)),
            bandwidth=float(arr_cfg.get("bandwidth_hz", 18e6)),
            n_subcarriers=int(arr_cfg.get("n_subcarriers", 100)),
            sample_rate=float(arr_cfg.get("sample_rate_hz", 100.0)),
            positions=np.asarray(arr_cfg["positions"], dtype=float),
            tx_position=np.asarray(arr_cfg.get("tx_position", [0, 0, 0.8]), dtype=float),
        )
    else:
        array = make_distributed_array(
            n_arrays=int(arr_cfg.get("n_arrays", 8)),
            n_per_array=int(arr_cfg.get("n_per_array", 8)),
            room_x=float(arr_cfg.get("room_x", 6.5)),
            room_y=float(arr_cfg.get("room_y", 10.0)),
            carrier_frequency=float(arr_cfg.get("carrier_hz", 2.61e9)),
            bandwidth=float(arr_cfg.get("bandwidth_hz", 18e6)),
            n_subcarriers=int(arr_cfg.get("n_subcarriers", 100)),
            sample_rate=float(arr_cfg.get("sample_rate_hz", 100.0)),
            tx_position=arr_cfg.get("tx_position"),
        )
    height = float(cfg.get("target_height", 1.0))
    targets = []
    for i, t in enumerate(cfg.get("targets", [])):
        targets.append(Target(
            id=int(t.get("id", i + 1)),
            position=np.asarray(t["position"], dtype=float),
            velocity=np.asarray(t.get("velocity", [0.0, 0.0]), dtype=float),
            torso_radius=float(t.get("torso_radius", 0.20)),
            rcs_gain=float(t.get("rcs_gain", 1.0)),
            height=float(t.get("height", height)),
            waypoints=tuple(tuple(w) for w in t.get("waypoints", [])),
            speed=float(t.get("speed", 1.0)),
            active_ue_id=t.get("active_ue_id"),
        ))
    room_x = float(arr_cfg.get("room_x", 6.5))
    room_y = float(arr_cfg.get("room_y", 10.0))
    scene = Scene(
        targets=tuple(targets),
        noise_std=float(cfg.get("noise_std", 0.0)),
        rng_seed=int(cfg.get("seed", 0)),
        n_static_reflectors=int(cfg.get("static_reflectors", 5)),
        velocity_noise_std=float(cfg.get("velocity_noise_std", 0.0)),
        bounds=(0.0, room_x, 0.0, room_y),
    )
    impair = None
    if cfg.get("impairments"):
        imp = cfg["impairments"]
        n_r = array.n_antennas
        offs = imp.get("ant_offsets")
        if offs == "random":
            offs = _rng(scene.rng_seed, "impair").uniform(-np.pi, np.pi, n_r)
        elif offs is None:
            offs = np.zeros(n_r)
        impair = CalibrationParams(
            eps_g=float(imp.get("eps_g", 1.0)), eps_t=float(imp.get("eps_t", 0.0)),
            eps_p=float(imp.get("eps_p", 0.0)), sfo_sto=float(imp.get("sfo_sto", 0.0)),
            cpo=float(imp.get("cpo", 0.0)), ant_offsets=np.asarray(offs, dtype=float))
    extras = {
        "duration_s": float(cfg.get("duration_s", 10.0)),
        "window_s": float(cfg.get("window_s", 0.1)),
        "impairments": impair,
        "calibration_rps": [tuple(map(float, p)) for p in cfg.get("calibration_rps", [])],
        "rp_frames": int(cfg.get("rp_frames", 10)),
    }
    return scene, array, extras
