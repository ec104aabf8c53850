"""Frame-level pitch and energy extraction from raw waveforms.

Framing defaults to 25 ms windows with a 20 ms hop so the prosody frames line
up 1:1 with the acoustic front end. Pitch comes from normalized
autocorrelation with parabolic lag interpolation; unvoiced frames carry 0.
Both channels are z-normalized per utterance at the `extract_prosody` level
(raw values below that).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile

ENERGY_FLOOR = 1e-10
VOICING_THRESHOLD = 0.3

DEFAULT_FRAME_MS = 25.0
DEFAULT_HOP_MS = 20.0
DEFAULT_F_MIN = 80.0
DEFAULT_F_MAX = 400.0


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray        # float64/float32 in [-1, 1]
    sample_rate_hz: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", samples)
        if samples.ndim != 1 or samples.size == 0:
            raise ValueError("waveform must be a non-empty 1-D array")
        if self.sample_rate_hz < 8000:
            raise ValueError(f"sample_rate_hz must be >= 8000, got {self.sample_rate_hz}")

    def __len__(self):
        return self.samples.size


@dataclass(frozen=True)
class ProsodyConfig:
    frame_ms: float = DEFAULT_FRAME_MS
    hop_ms: float = DEFAULT_HOP_MS
    f_min_hz: float = DEFAULT_F_MIN
    f_max_hz: float = DEFAULT_F_MAX


@dataclass(frozen=True)
class ProsodyFrames:
    """(pitch, log_energy) per frame, z-normalized per utterance."""

    frames: np.ndarray         # (T, 2)

    def __len__(self):
        return self.frames.shape[0]


def load_wav(path) -> Waveform:
    """Read a mono RIFF WAV (16-bit PCM or 32-bit float)."""
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.ndim} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype} (want int16 or float32)")
    return Waveform(samples=samples, sample_rate_hz=int(rate))


def save_wav(path, w: Waveform) -> None:
    data = np.clip(w.samples, -1.0, 1.0)
    wavfile.write(path, w.sample_rate_hz, (data * 32767.0).astype(np.int16))


def frame_lengths(w: Waveform, frame_ms: float, hop_ms: float) -> tuple[int, int]:
    frame = int(round(w.sample_rate_hz * frame_ms / 1000.0))
    hop = int(round(w.sample_rate_hz * hop_ms / 1000.0))
    return frame, hop


def frame_count(n_samples: int, frame: int, hop: int) -> int:
    return 1 + (n_samples - frame) // hop


def frame_signal(w: Waveform, frame_ms: float, hop_ms: float) -> np.ndarray:
    """Slice the waveform into overlapping frames, shape (T, frame_len)."""
    if not (frame_ms >= hop_ms > 0):
        raise ValueError(f"need frame_ms >= hop_ms > 0, got {frame_ms}, {hop_ms}")
    frame, hop = frame_lengths(w, frame_ms, hop_ms)
    n = len(w)
    if n < frame:
        raise ValueError(f"waveform of {n} samples shorter than one {frame}-sample frame")
    t = frame_count(n, frame, hop)
    idx = np.arange(frame)[None, :] + hop * np.arange(t)[:, None]
    return w.samples[idx]


def extract_energy(w: Waveform, frame_ms: float = DEFAULT_FRAME_MS,
                   hop_ms: float = DEFAULT_HOP_MS) -> np.ndarray:
    """Per-frame log(1e-10 + mean square amplitude)."""
    frames = frame_signal(w, frame_ms, hop_ms)
    return np.log(ENERGY_FLOOR + np.mean(frames ** 2, axis=1))


def extract_pitch(w: Waveform, frame_ms: float = DEFAULT_FRAME_MS,
                  hop_ms: float = DEFAULT_HOP_MS,
                  f_min_hz: float = DEFAULT_F_MIN,
                  f_max_hz: float = DEFAULT_F_MAX) -> np.ndarray:
    """Per-frame f0 via normalized autocorrelation; 0 marks unvoiced frames.

    Lags from fs/f_max to fs/f_min are scored by
    r(tau) = sum(x[n] x[n+tau]) / sqrt(sum x[n]^2 * sum x[n+tau]^2); the peak
    is refined by parabolic interpolation, and frames whose peak falls below
    0.3 are unvoiced.
    """
    fs = w.sample_rate_hz
    if not (0.0 < f_min_hz < f_max_hz <= fs / 2):
        raise ValueError(f"need 0 < f_min < f_max <= fs/2, got {f_min_hz}, {f_max_hz} at fs={fs}")
    frames = frame_signal(w, frame_ms, hop_ms)
    frame_len = frames.shape[1]
    lag_min = max(1, int(np.floor(fs / f_max_hz)))
    lag_max = int(np.ceil(fs / f_min_hz))
    if lag_max * 2 > frame_len:
        raise ValueError(
            f"frame of {frame_len} samples too short for two periods of {f_min_hz} Hz"
        )

    # normalized cross-correlation per lag, vectorized over frames
    lags = np.arange(lag_min - 1, lag_max + 2)  # one extra on each side for interpolation
    t = frames.shape[0]
    scores = np.zeros((t, lags.size))
    for j, lag in enumerate(lags):
        a = frames[:, : frame_len - lag]
        b = frames[:, lag:]
        num = np.sum(a * b, axis=1)
        den = np.sqrt(np.sum(a * a, axis=1) * np.sum(b * b, axis=1))
        scores[:, j] = np.where(den > 0.0, num / np.maximum(den, 1e-30), 0.0)

    inner = scores[:, 1:-1]                     # the [lag_min, lag_max] window
    peak = inner.max(axis=1)

    pitch = np.zeros(t)
    for i in range(t):
        if peak[i] < VOICING_THRESHOLD:
            continue
        # every multiple of the true period scores ~equally on a periodic
        # signal; take the smallest LOCAL peak within tolerance of the global
        # max so the tracker cannot lock onto a subharmonic
        row = scores[i]
        j = int(np.argmax(inner[i])) + 1       # fallback: global argmax
        for c in np.flatnonzero(inner[i] >= peak[i] - 0.01):
            cj = int(c) + 1                    # index into the padded score row
            if row[cj] >= row[cj - 1] and row[cj] >= row[cj + 1]:
                j = cj
                break
        r_prev, r_mid, r_next = row[j - 1], row[j], row[j + 1]
        denom = r_prev - 2.0 * r_mid + r_next
        delta = 0.5 * (r_prev - r_next) / denom if abs(denom) > 1e-12 else 0.0
        delta = float(np.clip(delta, -0.5, 0.5))
        pitch[i] = fs / (lags[j] + delta)
    return pitch


def znorm(x: np.ndarray, rel_tol: float = 1e-4) -> np.ndarray:
    """Zero-mean unit-sd per channel; constant channels become all-zero.

    Constancy is numerical: sd <= rel_tol * max(1, |mean|), so e.g. the
    sub-0.01 Hz jitter of parabolic interpolation on a fixed-f0 tone still
    counts as constant instead of being blown up to unit variance.
    """
    mean = x.mean(axis=0, keepdims=True)
    sd = x.std(axis=0, keepdims=True)
    constant = sd <= rel_tol * np.maximum(1.0, np.abs(mean))
    out = np.where(constant, 0.0, (x - mean) / np.where(constant, 1.0, sd))
    return out


def extract_prosody(w: Waveform, cfg: ProsodyConfig = ProsodyConfig(),
                    n_frames: int | None = None) -> ProsodyFrames:
    """Stack pitch and log-energy with shared framing, z-normalized per channel.

    `n_frames` forces the acoustic front end's frame count: the (identically
    framed) prosody track is truncated or zero-padded to match exactly.
    """
    energy = extract_energy(w, cfg.frame_ms, cfg.hop_ms)
    pitch = extract_pitch(w, cfg.frame_ms, cfg.hop_ms, cfg.f_min_hz, cfg.f_max_hz)
    raw = np.stack([pitch, energy], axis=1)
    normed = znorm(raw)
    if n_frames is not None:
        t = normed.shape[0]
        if t > n_frames:
            normed = normed[:n_frames]
        elif t < n_frames:
            normed = np.vstack([normed, np.zeros((n_frames - t, 2))])
    return ProsodyFrames(frames=normed)
