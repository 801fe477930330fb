"""Bit-exact CSI container ("CSIR") used to exchange recordings between tools.

Layout, all little-endian:

    bytes 0-3    magic ``CSIR``
    bytes 4-7    version u32 (currently 1)
    bytes 8-11   header_len u32
    ...          header_len bytes of UTF-8 JSON (geometry + numerology + ue_id)
    frames       each frame: f64 timestamp, then n_antennas*n_subcarriers
                 interleaved (re, im) f32 pairs in antenna-major order

Samples are stored as float32 pairs; in memory CSI is complex128.  A frame
whose values are float32-representable round-trips bit-exactly; arbitrary
float64 data round-trips bit-exactly from the second save/load on.
"""

from __future__ import annotations

import json
import struct
from typing import Iterable, Iterator

import numpy as np

from .core import AntennaArray, CsiFrame, make_array

MAGIC = b"CSIR"
VERSION = 1

_HEADER_FIELDS = ("n_antennas", "n_subcarriers", "sample_rate_hz", "carrier_hz",
                  "bandwidth_hz", "tx_position", "antenna_positions", "ue_id")


class CsiFormatError(ValueError):
    """Container violates the CSIR format; ``offset`` is the failing byte."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class MalformedHeaderError(CsiFormatError):
    pass


class TruncatedPayloadError(CsiFormatError):
    pass


class DimensionMismatchError(CsiFormatError):
    pass


class CsiWriter:
    """Incremental CSIR writer; use as a context manager for streaming output."""

    def __init__(self, path, array: AntennaArray, ue_id: int = 0):
        self.array = array
        header = {
            "n_antennas": array.n_antennas,
            "n_subcarriers": array.n_subcarriers,
            "sample_rate_hz": array.sample_rate,
            "carrier_hz": array.carrier_frequency,
            "bandwidth_hz": array.bandwidth,
            "tx_position": array.tx_position.tolist(),
            "antenna_positions": array.positions.tolist(),
            "ue_id": int(ue_id),
        }
        header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
        self._f = open(path, "wb")
        self._f.write(MAGIC)
        self._f.write(struct.pack("<II", VERSION, len(header_bytes)))
        self._f.write(header_bytes)
        self._offset = 12 + len(header_bytes)
        self.count = 0

    def write(self, frame: CsiFrame):
        if not frame.matches(self.array):
            raise DimensionMismatchError(
                f"frame {self.count} has shape {frame.h.shape}, header says "
                f"({self.array.n_antennas}, {self.array.n_subcarriers})",
                self._offset)
        self._f.write(struct.pack("<d", frame.timestamp))
        interleaved = np.empty(frame.h.size * 2, dtype="<f4")
        interleaved[0::2] = frame.h.real.ravel()
        interleaved[1::2] = frame.h.imag.ravel()
        self._f.write(interleaved.tobytes())
        self._offset += 8 + interleaved.nbytes
        self.count += 1

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def save_csi(path, array: AntennaArray, frames: Iterable[CsiFrame], ue_id: int | None = None) -> int:
    """Write ``frames`` to ``path``; returns the number of frames written.

    ``ue_id`` defaults to the id of the first frame (0 for an empty stream).
    """
    frames = iter(frames)
    first = next(frames, None)
    if ue_id is None:
        ue_id = first.ue_id if first is not None else 0
    with CsiWriter(path, array, ue_id=ue_id) as w:
        if first is not None:
            w.write(first)
            for frame in frames:
                w.write(frame)
        return w.count


def load_csi(path) -> tuple[AntennaArray, Iterator[CsiFrame]]:
    """Open a CSIR container; returns the geometry and a lazy frame stream."""
    f = open(path, "rb")
    prefix = f.read(12)
    if len(prefix) < 12 or prefix[:4] != MAGIC:
        f.close()
        raise MalformedHeaderError("missing or wrong magic", 0)
    version, header_len = struct.unpack("<II", prefix[4:12])
    if version != VERSION:
        f.close()
        raise MalformedHeaderError(f"unsupported version {version}", 4)
    header_bytes = f.read(header_len)
    if len(header_bytes) < header_len:
        f.close()
        raise TruncatedPayloadError("header shorter than header_len", 12 + len(header_bytes))
    try:
        header = json.loads(header_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        f.close()
        raise MalformedHeaderError("header is not valid UTF-8 JSON", 12)
    missing = [k for k in _HEADER_FIELDS if k not in header]
    if missing:
        f.close()
        raise MalformedHeaderError(f"header missing fields {missing}", 12)
    n_r, n_f = int(header["n_antennas"]), int(header["n_subcarriers"])
    if n_r < 1 or n_f < 1:
        f.close()
        raise DimensionMismatchError(f"non-positive dimensions ({n_r}, {n_f})", 12)
    array = make_array(
        carrier_frequency=float(header["carrier_hz"]),
        bandwidth=float(header["bandwidth_hz"]),
        n_subcarriers=n_f,
        sample_rate=float(header["sample_rate_hz"]),
        positions=header["antenna_positions"],
        tx_position=header["tx_position"],
    )
    ue_id = int(header["ue_id"])
    frame_bytes = n_r * n_f * 2 * 4
    data_start = 12 + header_len

    def frame_stream() -> Iterator[CsiFrame]:
        offset = data_start
        try:
            while True:
                ts_raw = f.read(8)
                if not ts_raw:
                    return
                if len(ts_raw) < 8:
                    raise TruncatedPayloadError("frame timestamp cut short", offset)
                payload = f.read(frame_bytes)
                if len(payload) < frame_bytes:
                    raise TruncatedPayloadError(
                        f"frame payload has {len(payload)} of {frame_bytes} bytes",
                        offset + 8)
                (ts,) = struct.unpack("<d", ts_raw)
                flat = np.frombuffer(payload, dtype="<f4").astype(np.float64)
                h = (flat[0::2] + 1j * flat[1::2]).reshape(n_r, n_f)
                yield CsiFrame(timestamp=ts, h=h, ue_id=ue_id)
                offset += 8 + frame_bytes
        finally:
            f.close()

    return array, frame_stream()


def load_csi_all(path) -> tuple[AntennaArray, list[CsiFrame]]:
    """Eager variant of :func:`load_csi`."""
    array, stream = load_csi(path)
    return array, list(stream)
