"""WAV input/output; samples are handled as floats in [-1, 1]."""
from __future__ import annotations

import numpy as np
from scipy.io import wavfile


def write_wav(path, signals, fs: int = 16000) -> None:
    """Write ``(channels, samples)`` (or 1-D) data as 32-bit float PCM."""
    x = np.asarray(signals, dtype=np.float32)
    wavfile.write(path, int(fs), x.T if x.ndim == 2 else x)


def read_wav(path) -> tuple[np.ndarray, int]:
    """Return ``(signals (channels, samples), fs)``; integer formats are rescaled."""
    fs, data = wavfile.read(path)
    if data.dtype == np.uint8:
        x = (data.astype(float) - 128.0) / 128.0
    elif np.issubdtype(data.dtype, np.integer):
        x = data.astype(float) / float(-np.iinfo(data.dtype).min)
    else:
        x = data.astype(float)
    x = np.atleast_2d(x.T) if x.ndim == 2 else x[None, :]
    return x, int(fs)
