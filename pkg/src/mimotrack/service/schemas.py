"""Request/response models of the tracking service."""

from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, Field


class SimulateRequest(BaseModel):
    scene: Optional[dict] = None          # inline scene description
    scene_path: Optional[str] = None      # or a JSON file with one
    output_dir: str
    seed: Optional[int] = None


class SimulateResponse(BaseModel):
    ue0_path: str
    active_paths: dict = Field(default_factory=dict)
    truth_path: str
    rp_manifest_path: Optional[str] = None
    n_frames: int
    duration_s: float
    n_antennas: int


class CalibrateRequest(BaseModel):
    rp_manifest_path: str
    output_path: str


class CalibrateResponse(BaseModel):
    output_path: str
    params: dict
    mean_residual_rad: float
    n_reference_points: int


class TrackRequest(BaseModel):
    csi_path: str
    output_path: str
    params_path: Optional[str] = None
    config: Optional[dict] = None         # PipelineConfig overrides


class TrackResponse(BaseModel):
    output_path: str
    n_windows: int
    n_rows: int
    mean_window_ms: Optional[float] = None
    mean_sicar_iterations: Optional[float] = None
    last_error: Optional[str] = None


class BenchmarkTrackRequest(BaseModel):
    csi_path: str
    output_path: str
    params_path: Optional[str] = None
    seed: int = 0
    n_particles: int = 1000
    known_height: float = 1.0
    sigma_v: float = 0.3
    start: Optional[list[float]] = None


class BenchmarkTrackResponse(BaseModel):
    output_path: str
    n_frames: int


class EvaluateRequest(BaseModel):
    tracks_path: str
    truth_path: str
    report_path: str
    cdf_path: Optional[str] = None
    torso_radius: float = 0.2
    time_tolerance: float = 0.05


class EvaluateResponse(BaseModel):
    report_path: str
    cdf_path: Optional[str] = None
    percentiles: dict
    n_frames: int
    missed: int
    false_tracks: int
    n_assigned: int
    cardinality_accuracy: float
    mean_cardinality_error: float


class BenchLatencyRequest(BaseModel):
    scene: Optional[dict] = None
    scene_path: Optional[str] = None
    config: Optional[dict] = None
    n_windows: int = 50
    warmup: int = 5
    params_path: Optional[str] = None
    seed: Optional[int] = None


class BenchLatencyResponse(BaseModel):
    mean_ms: float
    p99_ms: float
    violations: int
    n_windows: int
    budget_ms: float
    stage_mean_ms: dict
    dominant_stage: str


class ArraySpec(BaseModel):
    carrier_hz: float = 2.61e9
    bandwidth_hz: float = 18e6
    n_subcarriers: int = 100
    sample_rate_hz: float = 100.0
    positions: list[list[float]]
    tx_position: list[float]


class SessionCreateRequest(BaseModel):
    array: Optional[ArraySpec] = None
    csi_path: Optional[str] = None        # borrow geometry from a recording
    params_path: Optional[str] = None
    config: Optional[dict] = None


class SessionCreateResponse(BaseModel):
    session_id: str
    n_antennas: int
    window_frames: int


class FramePayload(BaseModel):
    timestamp: float
    # base64 float32 little-endian interleaved (re, im), antenna-major;
    # identical to the frame payload layout of the CSIR container
    data_b64: str


class SessionWindowRequest(BaseModel):
    frames: list[FramePayload]


class TrackState(BaseModel):
    label: int
    x: float
    y: float
    vx: float
    vy: float
    weight: float


class SessionWindowResponse(BaseModel):
    timestamp: float
    tracks: list[TrackState]
    stage_latency_ms: dict
    warmed_up: bool


class SessionInfo(BaseModel):
    session_id: str
    n_windows: int
    n_antennas: int
    warmed_up: bool
