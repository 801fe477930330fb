"""FastAPI application exposing the toolkit.

Batch endpoints operate on files local to the service process (requests carry
paths, responses carry summaries).  The session endpoints keep a stateful
tracker per client so live CSI windows can be streamed in and tracks streamed
back.
"""

from __future__ import annotations

import base64
import json
import threading
import uuid

import numpy as np
from fastapi import FastAPI, HTTPException

from .. import workflows
from ..calibration import load_params
from ..core import CsiFrame, CsiWindow, make_array
from ..csiio import load_csi
from ..pipeline import Tracker
from . import schemas


class _Session:
    def __init__(self, tracker: Tracker):
        self.tracker = tracker
        self.lock = threading.Lock()
        self.n_windows = 0


def _load_scene(req) -> dict:
    if req.scene is not None:
        return req.scene
    if req.scene_path:
        with open(req.scene_path) as f:
            return json.load(f)
    raise HTTPException(status_code=422, detail="provide scene or scene_path")


def create_app() -> FastAPI:
    app = FastAPI(title="mimotrack", version="0.1.0")
    sessions: dict[str, _Session] = {}
    sessions_lock = threading.Lock()

    @app.get("/health")
    def health():
        return {"status": "ok"}

    @app.post("/simulate", response_model=schemas.SimulateResponse)
    def simulate(req: schemas.SimulateRequest):
        scene = _load_scene(req)
        try:
            out = workflows.simulate_to_files(scene, req.output_dir, seed=req.seed)
        except (ValueError, KeyError) as e:
            raise HTTPException(status_code=422, detail=f"simulate: {e}")
        return schemas.SimulateResponse(**out)

    @app.post("/calibrate", response_model=schemas.CalibrateResponse)
    def calibrate(req: schemas.CalibrateRequest):
        try:
            out = workflows.calibrate_from_manifest(req.rp_manifest_path, req.output_path)
        except (ValueError, FileNotFoundError) as e:
            raise HTTPException(status_code=422, detail=f"calibrate: {e}")
        return schemas.CalibrateResponse(**out)

    @app.post("/track", response_model=schemas.TrackResponse)
    def track(req: schemas.TrackRequest):
        try:
            out = workflows.track_file(req.csi_path, req.output_path,
                                       params_path=req.params_path, config=req.config)
        except (ValueError, FileNotFoundError) as e:
            raise HTTPException(status_code=422, detail=f"track: {e}")
        return schemas.TrackResponse(**out)

    @app.post("/benchmark-track", response_model=schemas.BenchmarkTrackResponse)
    def benchmark_track(req: schemas.BenchmarkTrackRequest):
        try:
            out = workflows.benchmark_track_file(
                req.csi_path, req.output_path, params_path=req.params_path,
                seed=req.seed, n_particles=req.n_particles,
                known_height=req.known_height, sigma_v=req.sigma_v, start=req.start)
        except (ValueError, FileNotFoundError) as e:
            raise HTTPException(status_code=422, detail=f"benchmark-track: {e}")
        return schemas.BenchmarkTrackResponse(**out)

    @app.post("/evaluate", response_model=schemas.EvaluateResponse)
    def evaluate(req: schemas.EvaluateRequest):
        try:
            out = workflows.evaluate_files(
                req.tracks_path, req.truth_path, req.report_path,
                cdf_path=req.cdf_path, torso_radius=req.torso_radius,
                time_tolerance=req.time_tolerance)
        except (ValueError, FileNotFoundError) as e:
            raise HTTPException(status_code=422, detail=f"evaluate: {e}")
        return schemas.EvaluateResponse(**out)

    @app.post("/bench-latency", response_model=schemas.BenchLatencyResponse)
    def bench_latency(req: schemas.BenchLatencyRequest):
        scene = _load_scene(req)
        try:
            out = workflows.bench_latency_run(
                scene, config=req.config, n_windows=req.n_windows,
                warmup=req.warmup, params_path=req.params_path, seed=req.seed)
        except (ValueError, FileNotFoundError) as e:
            raise HTTPException(status_code=422, detail=f"bench-latency: {e}")
        return schemas.BenchLatencyResponse(**out)

    # -- streaming sessions ---------------------------------------------------

    @app.post("/sessions", response_model=schemas.SessionCreateResponse)
    def create_session(req: schemas.SessionCreateRequest):
        if req.array is not None:
            array = make_array(
                carrier_frequency=req.array.carrier_hz,
                bandwidth=req.array.bandwidth_hz,
                n_subcarriers=req.array.n_subcarriers,
                sample_rate=req.array.sample_rate_hz,
                positions=np.asarray(req.array.positions, dtype=float),
                tx_position=np.asarray(req.array.tx_position, dtype=float))
        elif req.csi_path:
            array, stream = load_csi(req.csi_path)
            stream.close()
        else:
            raise HTTPException(status_code=422, detail="provide array or csi_path")
        params = load_params(req.params_path) if req.params_path else None
        try:
            cfg = workflows.pipeline_config_from_dict(req.config, array)
            tracker = Tracker(array, cfg, params)
        except ValueError as e:
            raise HTTPException(status_code=422, detail=f"session: {e}")
        session_id = uuid.uuid4().hex[:12]
        with sessions_lock:
            sessions[session_id] = _Session(tracker)
        return schemas.SessionCreateResponse(session_id=session_id,
                                             n_antennas=array.n_antennas,
                                             window_frames=tracker.n_t)

    def _get_session(session_id: str) -> _Session:
        with sessions_lock:
            session = sessions.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail="unknown session")
        return session

    @app.post("/sessions/{session_id}/windows",
              response_model=schemas.SessionWindowResponse)
    def push_window(session_id: str, req: schemas.SessionWindowRequest):
        session = _get_session(session_id)
        tracker = session.tracker
        frames = []
        for payload in req.frames:
            raw = base64.b64decode(payload.data_b64)
            flat = np.frombuffer(raw, dtype="<f4").astype(np.float64)
            if flat.size % 2:
                raise HTTPException(status_code=422, detail="odd payload length")
            h = flat[0::2] + 1j * flat[1::2]
            n_f = tracker.array.n_subcarriers
            if h.size % n_f:
                raise HTTPException(status_code=422,
                                    detail=f"payload not divisible by {n_f} subcarriers")
            frames.append(CsiFrame(timestamp=payload.timestamp,
                                   h=h.reshape(-1, n_f), ue_id=0))
        if len(frames) != tracker.n_t:
            raise HTTPException(status_code=422,
                                detail=f"expected {tracker.n_t} frames per window")
        with session.lock:
            window = CsiWindow.from_frames(frames, tracker.array.sample_rate)
            tracks, latency = tracker.run_window(window)
            session.n_windows += 1
        states = [schemas.TrackState(label=lab, x=s[0], y=s[1], vx=s[2], vy=s[3],
                                     weight=float(wt))
                  for lab, s, wt in zip(tracks.labels, tracks.states, tracks.weights)]
        return schemas.SessionWindowResponse(
            timestamp=tracks.timestamp, tracks=states,
            stage_latency_ms=latency, warmed_up=tracker.remover.warmed_up)

    @app.get("/sessions/{session_id}", response_model=schemas.SessionInfo)
    def session_info(session_id: str):
        session = _get_session(session_id)
        return schemas.SessionInfo(
            session_id=session_id, n_windows=session.n_windows,
            n_antennas=session.tracker.array.n_antennas,
            warmed_up=session.tracker.remover.warmed_up)

    @app.delete("/sessions/{session_id}")
    def delete_session(session_id: str):
        with sessions_lock:
            if sessions.pop(session_id, None) is None:
                raise HTTPException(status_code=404, detail="unknown session")
        return {"deleted": session_id}

    return app


app = create_app()
