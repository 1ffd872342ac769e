"""16-bit PCM WAV encoding and measurement."""

from __future__ import annotations

import io
import wave

import numpy as np

DEFAULT_SAMPLE_RATE = 24_000


def encode_wav(samples: np.ndarray, sample_rate: int = DEFAULT_SAMPLE_RATE) -> bytes:
    """Encode mono float samples in [-1, 1] as 16-bit PCM."""
    pcm = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    pcm = np.round(pcm * 32767).astype("<i2")
    buf = io.BytesIO()
    with wave.open(buf, "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())
    return buf.getvalue()


def decode_wav(data: bytes) -> tuple[np.ndarray, int]:
    """Return mono float samples and the sample rate; channels are averaged."""
    with wave.open(io.BytesIO(data), "rb") as w:
        if w.getsampwidth() != 2:
            raise ValueError("only 16-bit PCM WAV is supported")
        channels, rate, n = w.getnchannels(), w.getframerate(), w.getnframes()
        raw = np.frombuffer(w.readframes(n), dtype="<i2").astype(np.float64) / 32767
    if channels > 1:
        raw = raw.reshape(-1, channels).mean(axis=1)
    return raw, rate


def wav_duration(data: bytes) -> float:
    samples, rate = decode_wav(data)
    return len(samples) / rate


def wav_peak(data: bytes) -> float:
    samples, _ = decode_wav(data)
    return float(np.max(np.abs(samples))) if len(samples) else 0.0


def silence(duration_s: float, sample_rate: int = DEFAULT_SAMPLE_RATE) -> np.ndarray:
    return np.zeros(int(round(duration_s * sample_rate)))


def tone(duration_s: float, freq_hz: float, amplitude: float = 0.3, sample_rate: int = DEFAULT_SAMPLE_RATE) -> np.ndarray:
    t = np.arange(int(round(duration_s * sample_rate))) / sample_rate
    return amplitude * np.sin(2 * np.pi * freq_hz * t)
