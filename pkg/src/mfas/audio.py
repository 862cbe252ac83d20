"""Waveform segmentation and log-magnitude spectrograms."""

from __future__ import annotations

import hashlib
import os
import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
SEGMENT_SAMPLES = 48000
WIN_LENGTH = 640  # 40 ms
HOP_LENGTH = 160  # 10 ms
N_FFT = 800
SPEC_FRAMES = 300
SPEC_BINS = 200

CACHE_ENV = "MFAS_CACHE_DIR"
_CACHE_MAGIC = b"MFSA"


class AudioInputError(ValueError):
    pass


@dataclass
class Segment:
    samples: np.ndarray
    parent_id: str = ""
    index: int = 0


def segment_utterance(
    samples: np.ndarray,
    segment_seconds: float = 3.0,
    sample_rate: int = SAMPLE_RATE,
    parent_id: str = "",
) -> list[Segment]:
    """Cut an utterance into consecutive fixed windows, zero-padding the last one."""
    samples = np.asarray(samples, dtype=np.float32)
    if sample_rate != SAMPLE_RATE:
        raise AudioInputError(f"expected {SAMPLE_RATE} Hz audio, got {sample_rate}")
    if samples.ndim != 1 or samples.size == 0:
        raise AudioInputError("waveform must be a non-empty 1-D sequence")
    seg_len = int(round(segment_seconds * sample_rate))
    n_seg = -(-samples.size // seg_len)
    padded = np.zeros(n_seg * seg_len, dtype=np.float32)
    padded[: samples.size] = samples
    return [
        Segment(padded[i * seg_len : (i + 1) * seg_len].copy(), parent_id, i)
        for i in range(n_seg)
    ]


def frame_count(n_samples: int, win: int = WIN_LENGTH, hop: int = HOP_LENGTH) -> int:
    return (n_samples - win) // hop + 1


def compute_spectrogram(segment: Segment | np.ndarray, normalize: bool = False) -> np.ndarray:
    """Return the 300x200 log1p-magnitude spectrogram of a 3 s segment.

    297 Hamming-windowed frames are zero-padded to an 800-point DFT, giving
    401 bins. The Nyquist bin is dropped and adjacent bin pairs averaged down
    to 200; three zero frames are appended to reach 300 time steps.
    """
    x = segment.samples if isinstance(segment, Segment) else segment
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (SEGMENT_SAMPLES,):
        raise AudioInputError(f"segment must have {SEGMENT_SAMPLES} samples, got {x.shape}")

    n_frames = frame_count(x.size)
    frames = np.lib.stride_tricks.sliding_window_view(x, WIN_LENGTH)[::HOP_LENGTH][:n_frames]
    frames = frames * np.hamming(WIN_LENGTH)
    mag = np.abs(np.fft.rfft(frames, n=N_FFT, axis=1))  # (297, 401)
    mag = mag[:, : 2 * SPEC_BINS].reshape(n_frames, SPEC_BINS, 2).mean(axis=2)
    spec = np.log1p(mag)

    out = np.zeros((SPEC_FRAMES, SPEC_BINS), dtype=np.float32)
    keep = min(n_frames, SPEC_FRAMES)
    out[:keep] = spec[:keep]
    if normalize:
        std = out.std()
        out = (out - out.mean()) / (std if std > 0 else 1.0)
    return out


def read_wav(path: str | os.PathLike) -> np.ndarray:
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1:
            raise AudioInputError(f"{path}: expected mono audio")
        if fh.getframerate() != SAMPLE_RATE:
            raise AudioInputError(f"{path}: expected {SAMPLE_RATE} Hz, got {fh.getframerate()}")
        if fh.getsampwidth() != 2:
            raise AudioInputError(f"{path}: expected 16-bit PCM")
        raw = fh.readframes(fh.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0


def write_wav(path: str | os.PathLike, samples: np.ndarray) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(SAMPLE_RATE)
        fh.writeframes(pcm.tobytes())


# -- binary array cache ------------------------------------------------------
# Layout: magic, uint32 ndim, ndim x uint32 dims, little-endian float32 payload.


def save_array(path: str | os.PathLike, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = _CACHE_MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes())
    os.replace(tmp, path)


def load_array(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _CACHE_MAGIC:
        raise AudioInputError(f"{path}: not a spectrogram cache file")
    (ndim,) = struct.unpack_from("<I", data, 4)
    shape = struct.unpack_from(f"<{ndim}I", data, 8)
    offset = 8 + 4 * ndim
    return np.frombuffer(data, dtype="<f4", offset=offset).reshape(shape).copy()


def cached_spectrogram(
    audio_path: str | os.PathLike, index: int, segment: Segment, normalize: bool = False
) -> np.ndarray:
    """Spectrogram lookup keyed by (file, segment index) under $MFAS_CACHE_DIR."""
    cache_dir = os.environ.get(CACHE_ENV)
    if not cache_dir:
        return compute_spectrogram(segment, normalize)
    p = Path(audio_path).resolve()
    key = f"{p}:{p.stat().st_mtime_ns}:{index}:{int(normalize)}"
    fname = Path(cache_dir) / (hashlib.sha1(key.encode()).hexdigest() + ".spec")
    if fname.exists():
        return load_array(fname)
    Path(cache_dir).mkdir(parents=True, exist_ok=True)
    spec = compute_spectrogram(segment, normalize)
    save_array(fname, spec)
    return spec
