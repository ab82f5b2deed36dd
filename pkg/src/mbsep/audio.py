"""Audio container and 16-bit PCM WAV persistence.

All in-memory audio is float64 in nominal range [-1, 1]; on disk it is
mono 16-bit little-endian PCM (RIFF/WAVE format tag 1). Quantization uses
a symmetric 32767 scale, so a write/read round trip moves any sample by
at most 0.5/32767 < 1/32768.
"""

from __future__ import annotations

import wave
from pathlib import Path

import numpy as np

PCM_SCALE = 32767


class WavFormatError(ValueError):
    """Raised for malformed or unsupported WAV files."""


class Signal:
    """A finite mono sample sequence plus its sample rate in Hz."""

    __slots__ = ("samples", "sample_rate")

    def __init__(self, samples, sample_rate: int):
        samples = np.asarray(samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"signal samples must be 1-D, got shape {samples.shape}")
        if samples.size == 0:
            raise ValueError("signal must contain at least one sample")
        if not np.all(np.isfinite(samples)):
            raise ValueError("signal contains non-finite samples")
        if sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {sample_rate}")
        self.samples = samples
        self.sample_rate = int(sample_rate)

    def __repr__(self) -> str:
        return f"Signal({self.samples.size} samples @ {self.sample_rate} Hz)"

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate

    def energy(self) -> float:
        return float(np.dot(self.samples, self.samples))


def wav_write(sig: Signal, path) -> int:
    """Write a signal as mono 16-bit PCM. Returns the number of clamped samples.

    Samples outside [-1, 1] are clamped; the count is returned so callers
    can surface a warning.
    """
    x = sig.samples
    clamped = int(np.count_nonzero((x < -1.0) | (x > 1.0)))
    if clamped:
        x = np.clip(x, -1.0, 1.0)
    pcm = np.round(x * PCM_SCALE).astype("<i2")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sig.sample_rate)
        wf.writeframes(pcm.tobytes())
    return clamped


def wav_read(path) -> Signal:
    """Read a mono 16-bit PCM WAV file written by :func:`wav_write`."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            n = wf.getnframes()
            raw = wf.readframes(n)
    except (wave.Error, EOFError) as exc:
        raise WavFormatError(f"{path}: malformed WAV file ({exc})") from exc
    if channels != 1:
        raise WavFormatError(f"{path}: expected mono audio, found {channels} channels")
    if width != 2:
        raise WavFormatError(f"{path}: expected 16-bit samples, found {8 * width}-bit")
    if n == 0:
        raise WavFormatError(f"{path}: file contains no samples")
    pcm = np.frombuffer(raw, dtype="<i2")
    return Signal(pcm.astype(np.float64) / PCM_SCALE, rate)
