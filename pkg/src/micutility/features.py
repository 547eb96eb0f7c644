"""Single-channel block features.

Every microphone node reduces its signal to a handful of scalars per block:
time-domain shape descriptors, magnitude-spectrum descriptors, the block
energy, and a slowly updated (negated) differential entropy.

The batch routine :func:`block_features` works on a ``(frames, Lb)`` array
and is what the pipeline uses; :func:`extract_features` is the per-block
interface built on top of it.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.signal import get_window

BLOCK_LEN = 1024
BLOCK_SHIFT = 512
ENTROPY_BLOCK_LEN = 32000
ENTROPY_BINS = 64
ENTROPY_FLOOR = -20.0
ROLLOFF_FRACTION = 0.85

_TINY = 1e-300


class InsufficientInput(ValueError):
    """Raised when a signal cannot fill a single block."""


class FeatureId(enum.IntEnum):
    TD_ENVELOPE = 0
    TD_ZCR = 1
    TD_CENTROID = 2
    TD_SPREAD = 3
    TD_SKEWNESS = 4
    TD_KURTOSIS = 5
    SD_SLOPE = 6
    SD_FLATNESS = 7
    SD_AMPFLATNESS = 8
    SD_ROLLOFF = 9
    SD_FLUX = 10
    SD_VARIATION = 11
    SD_CENTROID = 12
    SD_SPREAD = 13
    SD_SKEWNESS = 14
    SD_KURTOSIS = 15
    SD_FLUXNORM = 16
    ENTROPY = 17

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_label(cls, label: str) -> "FeatureId":
        try:
            return cls[label.upper()]
        except KeyError:
            raise ValueError(f"unknown feature {label!r}") from None


NUM_FEATURES = len(FeatureId)

DEFAULT_ACTIVE = (
    FeatureId.TD_SKEWNESS,
    FeatureId.SD_SLOPE,
    FeatureId.SD_KURTOSIS,
    FeatureId.SD_FLUXNORM,
)


@dataclass(frozen=True)
class SignalBlock:
    samples: np.ndarray
    channel_index: int = 0
    frame_index: int = 0
    sample_rate: float = 16000.0

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")


@dataclass
class FeatureFrame:
    values: np.ndarray  # length NUM_FEATURES, indexed by FeatureId
    energy: float
    entropy_neg: float

    def __getitem__(self, fid: FeatureId) -> float:
        return float(self.values[int(fid)])


def num_frames(n_samples: int, block_len: int = BLOCK_LEN, shift: int = BLOCK_SHIFT) -> int:
    if n_samples < block_len:
        return 0
    return 1 + (n_samples - block_len) // shift


def frame_matrix(signal, block_len: int = BLOCK_LEN, shift: int = BLOCK_SHIFT) -> np.ndarray:
    """Return a read-only ``(frames, block_len)`` view; frame l starts at l*shift."""
    x = np.asarray(signal, dtype=float)
    if block_len < 2 or not 1 <= shift <= block_len:
        raise ValueError(f"invalid framing block_len={block_len} shift={shift}")
    if x.ndim != 1 or x.size < block_len:
        raise InsufficientInput(
            f"signal of {x.size} samples is shorter than one block of {block_len}"
        )
    view = np.lib.stride_tricks.sliding_window_view(x, block_len)
    return view[::shift][: num_frames(x.size, block_len, shift)]


def frame_signal(signal, block_len: int = BLOCK_LEN, shift: int = BLOCK_SHIFT,
                 channel_index: int = 0, sample_rate: float = 16000.0) -> list[SignalBlock]:
    frames = frame_matrix(signal, block_len, shift)
    return [
        SignalBlock(np.array(f), channel_index, idx, sample_rate)
        for idx, f in enumerate(frames)
    ]


def frame_energy(block) -> float:
    x = np.asarray(getattr(block, "samples", block), dtype=float)
    return float(np.dot(x, x))


def _window(block_len: int) -> np.ndarray:
    # periodic Hann, so a bin-centred sine leaks symmetrically into 3 bins
    return get_window("hann", block_len)


def magnitude_spectrum(blocks: np.ndarray) -> np.ndarray:
    blocks = np.atleast_2d(blocks)
    return np.abs(np.fft.rfft(blocks * _window(blocks.shape[-1]), axis=-1))


def _moments(weights: np.ndarray, axis_values: np.ndarray):
    """Centroid, spread, skewness, kurtosis of ``axis_values`` under row weights.

    Rows with zero total weight produce all-zero moments.
    """
    total = weights.sum(axis=1, keepdims=True)
    ok = total[:, 0] > 0
    p = np.divide(weights, total, out=np.zeros_like(weights), where=total > 0)
    centroid = p @ axis_values
    dev = axis_values[None, :] - centroid[:, None]
    var = np.einsum("ij,ij->i", p, dev**2)
    spread = np.sqrt(np.maximum(var, 0.0))
    m3 = np.einsum("ij,ij->i", p, dev**3)
    m4 = np.einsum("ij,ij->i", p, dev**4)
    has_spread = ok & (spread > 1e-12)
    safe = np.where(has_spread, spread, 1.0)
    skew = np.where(has_spread, m3 / safe**3, 0.0)
    kurt = np.where(has_spread, m4 / safe**4, 0.0)
    centroid = np.where(ok, centroid, 0.0)
    spread = np.where(ok, spread, 0.0)
    return centroid, spread, skew, kurt


def spectral_flatness(power: np.ndarray) -> np.ndarray:
    """Geometric over arithmetic mean along the last axis; 1 for silent rows."""
    power = np.atleast_2d(power)
    am = power.mean(axis=-1)
    with np.errstate(divide="ignore"):
        gm = np.exp(np.log(power).mean(axis=-1))
    out = np.divide(gm, am, out=np.ones_like(am), where=am > 0)
    return np.clip(out, 0.0, 1.0)


def _flux_terms(spec: np.ndarray, prev: np.ndarray, valid: np.ndarray):
    norm_c = np.linalg.norm(spec, axis=1)
    norm_p = np.linalg.norm(prev, axis=1)
    ok = valid & (norm_c > 0) & (norm_p > 0)
    nc = np.where(ok, norm_c, 1.0)
    np_ = np.where(ok, norm_p, 1.0)
    flux = np.where(ok, np.linalg.norm(spec - prev, axis=1), 0.0)
    fluxnorm = np.where(
        ok, np.linalg.norm(spec / nc[:, None] - prev / np_[:, None], axis=1), 0.0
    )
    cos = np.einsum("ij,ij->i", spec, prev) / (nc * np_)
    variation = np.where(ok, np.clip(1.0 - cos, 0.0, 2.0), 0.0)
    return flux, variation, fluxnorm


def block_features(blocks, prev_spectrum=None, entropy_neg=0.0):
    """Compute all features for consecutive blocks of one channel.

    ``prev_spectrum`` is the magnitude spectrum of the block preceding
    ``blocks[0]`` (``None`` at stream start). ``entropy_neg`` fills the
    ENTROPY slot; it may be a scalar or one value per block.

    Returns ``(values, energies, spectra)`` with shapes ``(F, 18)``, ``(F,)``
    and ``(F, Lb//2 + 1)``.
    """
    x = np.atleast_2d(np.asarray(blocks, dtype=float))
    n_frames, lb = x.shape
    half = lb // 2
    out = np.zeros((n_frames, NUM_FEATURES))

    energies = np.einsum("ij,ij->i", x, x)

    # time domain
    out[:, FeatureId.TD_ENVELOPE] = np.sqrt(energies / lb)
    nonneg = x >= 0
    out[:, FeatureId.TD_ZCR] = np.count_nonzero(nonneg[:, 1:] != nonneg[:, :-1], axis=1) / (lb - 1)
    t = np.arange(lb) / (lb - 1)
    c, s, sk, ku = _moments(x * x, t)
    out[:, FeatureId.TD_CENTROID] = c
    out[:, FeatureId.TD_SPREAD] = s
    out[:, FeatureId.TD_SKEWNESS] = sk
    out[:, FeatureId.TD_KURTOSIS] = ku

    # magnitude spectrum
    spec = magnitude_spectrum(x)
    power = spec * spec
    kappa = np.arange(half + 1, dtype=float)
    kc = kappa - kappa.mean()
    out[:, FeatureId.SD_SLOPE] = (spec @ kc) / np.dot(kc, kc)
    out[:, FeatureId.SD_FLATNESS] = spectral_flatness(power)
    out[:, FeatureId.SD_AMPFLATNESS] = spectral_flatness(spec)

    cum = np.cumsum(power, axis=1)
    total = cum[:, -1]
    reached = cum >= ROLLOFF_FRACTION * total[:, None]
    roll = np.argmax(reached, axis=1) / half
    out[:, FeatureId.SD_ROLLOFF] = np.where(total > 0, roll, 0.0)

    c, s, sk, ku = _moments(spec, kappa / half)
    out[:, FeatureId.SD_CENTROID] = c
    out[:, FeatureId.SD_SPREAD] = s
    out[:, FeatureId.SD_SKEWNESS] = sk
    out[:, FeatureId.SD_KURTOSIS] = ku

    prev = np.empty_like(spec)
    valid = np.ones(n_frames, dtype=bool)
    if prev_spectrum is None:
        prev[0] = 0.0
        valid[0] = False
    else:
        prev_spectrum = np.asarray(prev_spectrum, dtype=float)
        if prev_spectrum.shape != (half + 1,):
            raise ValueError(
                f"previous spectrum has {prev_spectrum.shape} bins, expected {half + 1}"
            )
        prev[0] = prev_spectrum
    prev[1:] = spec[:-1]
    flux, variation, fluxnorm = _flux_terms(spec, prev, valid)
    out[:, FeatureId.SD_FLUX] = flux
    out[:, FeatureId.SD_VARIATION] = variation
    out[:, FeatureId.SD_FLUXNORM] = fluxnorm

    out[:, FeatureId.ENTROPY] = entropy_neg
    return out, energies, spec


def extract_features(block, prev_mag_spectrum=None, active=None, entropy_neg=0.0):
    """Features of a single block.

    Returns ``(FeatureFrame, magnitude_spectrum)``; the spectrum is meant to
    be passed back as ``prev_mag_spectrum`` for the next block. Inactive
    features (when ``active`` is given) are zeroed.
    """
    samples = np.asarray(getattr(block, "samples", block), dtype=float)
    values, energies, spec = block_features(samples[None, :], prev_mag_spectrum, entropy_neg)
    values = values[0]
    if active is not None:
        mask = np.zeros(NUM_FEATURES, dtype=bool)
        mask[[int(f) for f in active]] = True
        values = np.where(mask, values, 0.0)
    return FeatureFrame(values, float(energies[0]), float(entropy_neg)), spec[0]


def differential_entropy(samples, bins: int = ENTROPY_BINS, floor: float = ENTROPY_FLOOR) -> float:
    """Histogram estimate of differential entropy in nats.

    Equal-width bins span the sample range, so the estimate is translation
    invariant. Constant input has no defined density and returns ``floor``.
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 2:
        return floor
    lo, hi = x.min(), x.max()
    if not hi > lo:
        return floor
    width = (hi - lo) / bins
    idx = np.minimum(((x - lo) / width).astype(np.int64), bins - 1)
    p = np.bincount(idx, minlength=bins) / x.size
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)) + np.log(width))


def normalized_entropy(samples, bins: int = ENTROPY_BINS, floor: float = ENTROPY_FLOOR) -> float:
    """Differential entropy of the block after scaling it to unit variance."""
    x = np.asarray(samples, dtype=float)
    sd = x.std()
    if not sd > 0:
        return floor
    return differential_entropy(x / sd, bins, floor)


def entropy_track(signal, n_frames: int, block_len: int = BLOCK_LEN, shift: int = BLOCK_SHIFT,
                  entropy_len: int = ENTROPY_BLOCK_LEN, normalize: bool = True,
                  bins: int = ENTROPY_BINS, floor: float = ENTROPY_FLOOR) -> np.ndarray:
    """Negated entropy held per frame.

    Frame l sees the most recent complete, non-overlapping entropy block that
    ends at or before the end of frame l. Before the first complete block the
    estimate is taken over everything received so far.
    """
    x = np.asarray(signal, dtype=float)
    est = normalized_entropy if normalize else differential_entropy
    out = np.empty(n_frames)
    cache: dict[int, float] = {}
    for ell in range(n_frames):
        end = ell * shift + block_len
        j = end // entropy_len
        if j == 0:
            out[ell] = -est(x[:end], bins, floor)
            continue
        if j not in cache:
            cache[j] = -est(x[(j - 1) * entropy_len: j * entropy_len], bins, floor)
        out[ell] = cache[j]
    return out
