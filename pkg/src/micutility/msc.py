"""Ground-truth source-to-microphone magnitude-squared coherence.

Recursively smoothed (cross-)periodograms of the dry source and each
microphone signal give a per-bin coherence, which is averaged over the
non-redundant bins into one value per channel and frame.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .features import BLOCK_LEN, BLOCK_SHIFT, _window, frame_matrix

PSD_SMOOTHING = 0.9
_DENOM_FLOOR = 1e-12


class ConfigurationError(ValueError):
    pass


@dataclass
class PsdState:
    n_channels: int
    block_len: int = BLOCK_LEN
    beta: float = PSD_SMOOTHING
    cross: np.ndarray = field(init=False)
    src_auto: np.ndarray = field(init=False)
    mic_auto: np.ndarray = field(init=False)
    n_updates: int = field(default=0, init=False)

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ConfigurationError(f"smoothing factor {self.beta} outside [0, 1)")
        bins = self.block_len // 2 + 1
        self.cross = np.zeros((self.n_channels, bins), dtype=complex)
        self.src_auto = np.zeros(bins)
        self.mic_auto = np.zeros((self.n_channels, bins))


def _spectrum(blocks: np.ndarray) -> np.ndarray:
    return np.fft.rfft(blocks * _window(blocks.shape[-1]), axis=-1)


def _accumulate(state: PsdState, s: np.ndarray, x: np.ndarray) -> None:
    b = state.beta
    state.cross = b * state.cross + (1 - b) * (s[None, :] * np.conj(x))
    state.src_auto = b * state.src_auto + (1 - b) * np.abs(s) ** 2
    state.mic_auto = b * state.mic_auto + (1 - b) * np.abs(x) ** 2
    state.n_updates += 1


def update_psd(state: PsdState, source_block, mic_blocks) -> PsdState:
    """One recursive update from a source block and the N aligned mic blocks."""
    src = np.asarray(getattr(source_block, "samples", source_block), dtype=float)
    mics = np.array([getattr(b, "samples", b) for b in mic_blocks], dtype=float)
    if mics.shape != (state.n_channels, state.block_len) or src.shape != (state.block_len,):
        raise ConfigurationError(
            f"expected source ({state.block_len},) and mics "
            f"({state.n_channels}, {state.block_len}); got {src.shape} and {mics.shape}"
        )
    _accumulate(state, _spectrum(src), _spectrum(mics))
    return state


def per_bin_msc(state: PsdState) -> np.ndarray:
    """``(N, bins)`` coherence, clamped to [0, 1]; silent bins give 0."""
    den = state.src_auto[None, :] * state.mic_auto
    ok = (state.src_auto[None, :] >= _DENOM_FLOOR) & (state.mic_auto >= _DENOM_FLOOR)
    ratio = np.divide(np.abs(state.cross) ** 2, den, out=np.zeros_like(den), where=ok)
    return np.clip(ratio, 0.0, 1.0)


def msc_vector(state: PsdState) -> np.ndarray:
    return per_bin_msc(state).mean(axis=1)


def msc_track(source, mics, block_len: int = BLOCK_LEN, shift: int = BLOCK_SHIFT,
              beta: float = PSD_SMOOTHING) -> np.ndarray:
    """Frequency-averaged MSC for every frame, shape ``(frames, N)``."""
    mics = np.atleast_2d(np.asarray(mics, dtype=float))
    s = _spectrum(frame_matrix(source, block_len, shift))
    x = np.stack([_spectrum(frame_matrix(m, block_len, shift)) for m in mics], axis=1)
    state = PsdState(mics.shape[0], block_len, beta)
    out = np.empty((s.shape[0], mics.shape[0]))
    for ell in range(s.shape[0]):
        _accumulate(state, s[ell], x[ell])
        out[ell] = msc_vector(state)
    return out
