"""Shoebox room simulation with the image-source method.

A single source moves along a piecewise trajectory; every 512-sample hop the
room impulse responses to all (cardioid) microphones are evaluated at the
current source position and the hop's input partition is convolved and
overlap-added. Spatially white noise of equal level is added to reach the
requested SNR at the channel with the strongest source image.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.signal import butter, fftconvolve, sosfilt

SPEED_OF_SOUND = 343.0
SAMPLE_RATE = 16000
HOP = 512
EYRING_CONSTANT = 0.161
HIGHPASS_HZ = 50.0


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class RoomSpec:
    dims: tuple[float, float, float]
    t60: float
    speed_of_sound: float = SPEED_OF_SOUND
    name: str = ""

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) <= 0:
            raise SimulationError(f"room dimensions must be positive, got {self.dims}")
        if self.t60 <= 0:
            raise SimulationError("t60 must be positive")

    @property
    def volume(self) -> float:
        x, y, z = self.dims
        return x * y * z

    @property
    def surface(self) -> float:
        x, y, z = self.dims
        return 2 * (x * y + x * z + y * z)

    def contains(self, pos, margin: float = 0.0) -> bool:
        pos = np.asarray(pos, dtype=float)
        return bool(np.all(pos > margin) and np.all(pos < np.asarray(self.dims) - margin))


ROOMS = {
    "A": RoomSpec((5.0, 5.2, 3.0), 0.5, name="A"),
    "B": RoomSpec((6.2, 5.0, 2.5), 0.7, name="B"),
    "C": RoomSpec((4.8, 4.2, 2.3), 0.35, name="C"),
}


@dataclass(frozen=True)
class MicSpec:
    position: tuple[float, float, float]
    orientation: tuple[float, float, float] = (1.0, 0.0, 0.0)

    @classmethod
    def from_azimuth(cls, position, azimuth: float) -> "MicSpec":
        return cls(tuple(map(float, position)), (math.cos(azimuth), math.sin(azimuth), 0.0))


def reflection_from_t60(room: RoomSpec) -> float:
    """Uniform wall reflection coefficient from Eyring's formula."""
    alpha = 1.0 - math.exp(-EYRING_CONSTANT * room.volume / (room.surface * room.t60))
    if alpha >= 1.0:
        raise SimulationError(f"room cannot achieve T60={room.t60}s")
    return math.sqrt(1.0 - alpha)


def cardioid_gain(orientation, direction) -> np.ndarray:
    """0.5 (1 + cos theta) for arrival ``direction`` rows (unnormalized)."""
    o = np.asarray(orientation, dtype=float)
    o = o / np.linalg.norm(o)
    direction = np.atleast_2d(direction)
    cos = direction @ o / np.linalg.norm(direction, axis=1)
    return 0.5 * (1.0 + np.clip(cos, -1.0, 1.0))


@dataclass
class ImageLattice:
    """Image-source bookkeeping independent of the source position.

    An image of source ``s`` is ``signs * s + offsets``; ``orders`` counts the
    wall reflections it represents.
    """

    signs: np.ndarray
    offsets: np.ndarray
    orders: np.ndarray

    def images(self, src) -> np.ndarray:
        return self.signs * np.asarray(src, dtype=float) + self.offsets


@functools.lru_cache(maxsize=8)
def image_lattice(room: RoomSpec, radius: float | None = None,
                  max_order: int | None = None) -> ImageLattice:
    """Enumerate images that can lie within ``radius`` of any point in the room."""
    dims = np.asarray(room.dims, dtype=float)
    if radius is None and max_order is None:
        raise ValueError("need a radius or a maximum order")
    axes = []
    for ax in range(3):
        length = dims[ax]
        if max_order is not None:
            lmax = max_order // 2 + 1
        else:
            lmax = int(math.ceil(radius / (2 * length))) + 1
        ls = np.arange(-lmax, lmax + 1)
        entries = []
        for u in (0, 1):
            for l in ls:
                lo = 2 * l * length - u * length
                hi = lo + length
                # gap between the image cell [lo, hi] and the room [0, length]
                gap = max(0.0, lo - length, -hi)
                entries.append((1 - 2 * u, 2 * l * length, abs(2 * l - u), gap))
        axes.append(np.array(entries))
    gx, gy, gz = np.meshgrid(np.arange(len(axes[0])), np.arange(len(axes[1])),
                             np.arange(len(axes[2])), indexing="ij")
    gx, gy, gz = gx.ravel(), gy.ravel(), gz.ravel()
    ex, ey, ez = axes[0][gx], axes[1][gy], axes[2][gz]
    orders = (ex[:, 2] + ey[:, 2] + ez[:, 2]).astype(np.int64)
    keep = np.ones(orders.size, dtype=bool)
    if radius is not None:
        keep &= ex[:, 3] ** 2 + ey[:, 3] ** 2 + ez[:, 3] ** 2 <= radius**2
    if max_order is not None:
        keep &= orders <= max_order
    signs = np.stack([ex[keep, 0], ey[keep, 0], ez[keep, 0]], axis=1)
    offsets = np.stack([ex[keep, 1], ey[keep, 1], ez[keep, 1]], axis=1)
    return ImageLattice(signs, offsets, orders[keep])


def rir_length(room: RoomSpec, fs: float) -> int:
    return int(math.ceil(room.t60 * fs))


@numba.njit(cache=True)
def _accumulate_images(images, weights, mic_pos, mic_dir, scale, length, out):
    for k in range(mic_pos.shape[0]):
        px, py, pz = mic_pos[k, 0], mic_pos[k, 1], mic_pos[k, 2]
        ox, oy, oz = mic_dir[k, 0], mic_dir[k, 1], mic_dir[k, 2]
        for i in range(images.shape[0]):
            dx = images[i, 0] - px
            dy = images[i, 1] - py
            dz = images[i, 2] - pz
            dist = math.sqrt(dx * dx + dy * dy + dz * dz)
            if dist == 0.0:
                return False
            delay = int(math.floor(dist * scale + 0.5))
            if delay >= length:
                continue
            cos = (dx * ox + dy * oy + dz * oz) / dist
            cos = min(1.0, max(-1.0, cos))
            out[k, delay] += weights[i] * 0.5 * (1.0 + cos) / (4.0 * math.pi * dist)
    return True


def _rirs_from_images(images, weights, mics, fs, c, length) -> np.ndarray:
    pos = np.array([m.position for m in mics], dtype=float).reshape(-1, 3)
    dirs = np.array([m.orientation for m in mics], dtype=float).reshape(-1, 3)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    out = np.zeros((len(mics), length))
    ok = _accumulate_images(np.ascontiguousarray(images, dtype=float),
                            np.ascontiguousarray(weights, dtype=float),
                            pos, dirs, fs / c, length, out)
    if not ok:
        raise SimulationError("source coincides with a microphone")
    return out


def dc_highpass(rirs, fs: float = SAMPLE_RATE, cutoff: float = HIGHPASS_HZ) -> np.ndarray:
    """Second-order Butterworth high-pass removing the DC build-up of the image sum."""
    sos = butter(2, cutoff, "highpass", fs=fs, output="sos")
    return sosfilt(sos, rirs, axis=-1)


def rir_image_source(room: RoomSpec, src_pos, mic: MicSpec, fs: float = SAMPLE_RATE,
                     beta: float | None = None, max_order: int | None = None,
                     length: int | None = None, highpass: bool = False) -> np.ndarray:
    """Impulse response from ``src_pos`` to one cardioid microphone.

    Delays are rounded to the nearest sample. Without ``max_order`` every image
    arriving within ``length`` samples (default: T60 * fs) is included. The
    default ``beta`` is the calibrated wall reflection of the room.
    """
    if beta is None:
        beta = wall_reflection(room, fs)
    if length is None:
        length = rir_length(room, fs)
    src = np.asarray(src_pos, dtype=float)
    if not room.contains(src) or not room.contains(mic.position):
        raise SimulationError("source and microphone must lie inside the room")
    radius = length * room.speed_of_sound / fs
    lattice = image_lattice(room, radius=radius, max_order=max_order)
    weights = np.power(float(beta), lattice.orders)
    h = _rirs_from_images(lattice.images(src), weights, [mic], fs, room.speed_of_sound, length)[0]
    return dc_highpass(h, fs) if highpass else h


class RirBank:
    """Cached lattice for repeated RIR evaluation in one room.

    RIRs come out high-passed (see :func:`dc_highpass`) unless ``highpass``
    is False.
    """

    def __init__(self, room: RoomSpec, mics, fs: float = SAMPLE_RATE,
                 beta: float | None = None, length: int | None = None,
                 highpass: bool = True):
        self.room = room
        self.mics = list(mics)
        self.fs = fs
        self.highpass = highpass
        self.length = rir_length(room, fs) if length is None else length
        self.lattice = image_lattice(room, radius=self.length * room.speed_of_sound / fs)
        for mic in self.mics:
            if not room.contains(mic.position):
                raise SimulationError(f"microphone {mic.position} outside room")
        self.set_beta(wall_reflection(room, fs) if beta is None else beta)

    def set_beta(self, beta: float) -> None:
        self.beta = float(beta)
        self.weights = np.power(self.beta, self.lattice.orders)

    def rirs(self, src_pos) -> np.ndarray:
        if not self.room.contains(src_pos):
            raise SimulationError(f"source {tuple(src_pos)} outside room")
        h = _rirs_from_images(self.lattice.images(src_pos), self.weights, self.mics,
                              self.fs, self.room.speed_of_sound, self.length)
        return dc_highpass(h, self.fs) if self.highpass else h


def schroeder_t60(rir, fs: float = SAMPLE_RATE, lo_db: float = -5.0, hi_db: float = -25.0) -> float:
    """Reverberation time from a line fit to the Schroeder decay between two levels."""
    h = np.asarray(rir, dtype=float)
    edc = np.cumsum((h * h)[::-1])[::-1]
    edc_db = 10 * np.log10(edc / edc[0] + 1e-300)
    idx = np.flatnonzero((edc_db <= lo_db) & (edc_db >= hi_db))
    if idx.size < 2:
        raise SimulationError("decay range not covered by the impulse response")
    t = idx / fs
    slope, _ = np.polyfit(t, edc_db[idx], 1)
    return float(-60.0 / slope)


# source/mic pairs as fractions of the room dimensions; mics face the source
_CALIBRATION_PAIRS = (
    ((0.30, 0.35, 0.45), (0.70, 0.60, 0.55)),
    ((0.25, 0.70, 0.50), (0.65, 0.25, 0.40)),
    ((0.60, 0.40, 0.35), (0.20, 0.75, 0.60)),
)


def measured_t60(room: RoomSpec, beta: float, fs: float = SAMPLE_RATE) -> float:
    """Mean in-band Schroeder T60 over the fixed calibration geometries."""
    dims = np.asarray(room.dims, dtype=float)
    srcs = [dims * np.array(s) for s, _ in _CALIBRATION_PAIRS]
    mics = [MicSpec(tuple(dims * np.array(m)), tuple((s - dims * np.array(m)) * [1, 1, 0]))
            for s, (_, m) in zip(srcs, _CALIBRATION_PAIRS)]
    vals = []
    for src, mic in zip(srcs, mics):
        bank = RirBank(room, [mic], fs, beta=beta)
        vals.append(schroeder_t60(bank.rirs(src)[0], fs))
    return float(np.mean(vals))


def wall_reflection(room: RoomSpec, fs: float = SAMPLE_RATE) -> float:
    """Reflection coefficient whose simulated T60 matches the room's target.

    Starts from the Eyring value and rescales the per-reflection log loss by
    the ratio of measured to target T60 until they agree within 1 %.
    """
    return _calibrated_reflection(room, float(fs))


@functools.lru_cache(maxsize=None)
def _calibrated_reflection(room: RoomSpec, fs: float, tol: float = 0.01,
                           max_iter: int = 12) -> float:
    beta = reflection_from_t60(room)
    for _ in range(max_iter):
        ratio = measured_t60(room, beta, fs) / room.t60
        if abs(ratio - 1.0) < tol:
            break
        beta = math.exp(math.log(beta) * ratio)
    return beta


@dataclass
class Trajectory:
    """Source path: held waypoints, linear motion inside move windows."""

    waypoints: list[tuple[float, tuple[float, float, float]]]
    rest_jitter: float = 0.02
    move_windows: list[tuple[float, float]] = field(default_factory=list)

    def __post_init__(self):
        times = [t for t, _ in self.waypoints]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise SimulationError("waypoint times must be strictly increasing")
        self._times = np.array(times)
        self._pos = np.array([p for _, p in self.waypoints], dtype=float)

    def _held(self, t: float) -> np.ndarray:
        k = int(np.searchsorted(self._times, t, side="right")) - 1
        return self._pos[max(k, 0)]

    def position_at(self, t: float) -> np.ndarray:
        for start, end in self.move_windows:
            if start <= t < end:
                a = self._held(start)
                b = self._held(end)
                frac = (t - start) / (end - start)
                return a + frac * (b - a)
        return self._held(t)


CANONICAL_MOVE_WINDOWS = ((8.0, 10.0), (18.0, 20.0))


def synth_trajectory(room: RoomSpec, seed, duration: float,
                     move_windows=None, margin: float = 1.0,
                     jitter: float = 0.02, jitter_period: float = 0.5) -> Trajectory:
    """Random resting positions joined by rapid moves.

    With the canonical windows and a duration shorter than 28 s the windows
    are scaled by ``duration / 28``.
    """
    rng = np.random.default_rng(seed)
    if move_windows is None:
        scale = min(1.0, duration / 28.0)
        move_windows = [(a * scale, b * scale) for a, b in CANONICAL_MOVE_WINDOWS]
    move_windows = [tuple(map(float, w)) for w in move_windows if w[0] < duration]
    dims = np.asarray(room.dims, dtype=float)
    lo = np.full(3, margin)
    hi = dims - margin
    if np.any(hi <= lo):
        raise SimulationError(f"room {room.dims} too small for a {margin} m margin")
    rests = [rng.uniform(lo, hi) for _ in range(len(move_windows) + 1)]

    def jittered(p):
        return tuple(np.clip(p + rng.normal(0.0, jitter, 3), lo, hi))

    # rest segment k runs from the end of window k-1 to the start of window k;
    # during a window the source glides from the last waypoint of segment k
    # to the first waypoint of segment k+1
    edges = [0.0] + [w for win in move_windows for w in win] + [duration]
    waypoints: list[tuple[float, tuple]] = []
    for k in range(len(rests)):
        t, seg_end = edges[2 * k], edges[2 * k + 1]
        while True:
            waypoints.append((t, jittered(rests[k])))
            t += jitter_period
            if t >= seg_end - 1e-9:
                break
    return Trajectory(waypoints, jitter, list(move_windows))


@dataclass
class Scene:
    room: RoomSpec
    mics: list[MicSpec]
    trajectory: Trajectory
    source_signal: np.ndarray
    snr_db: float = 10.0
    rng_seed: int = 0
    fs: float = SAMPLE_RATE


def random_mics(room: RoomSpec, n: int, seed, margin: float = 0.5) -> list[MicSpec]:
    rng = np.random.default_rng(seed)
    dims = np.asarray(room.dims, dtype=float)
    return [
        MicSpec.from_azimuth(rng.uniform(margin, dims - margin), rng.uniform(0, 2 * np.pi))
        for _ in range(n)
    ]


def source_images(scene: Scene, hop: int = HOP) -> np.ndarray:
    """Noise-free microphone signals, shape ``(N, len(source))``."""
    s = np.asarray(scene.source_signal, dtype=float)
    bank = RirBank(scene.room, scene.mics, scene.fs)
    n_hops = int(math.ceil(s.size / hop))
    positions = np.array([scene.trajectory.position_at(h * hop / scene.fs) for h in range(n_hops)])
    out = np.zeros((len(scene.mics), s.size + bank.length - 1))
    h = 0
    while h < n_hops:
        # consecutive hops at the same position share one RIR; the convolution
        # of their concatenated partitions equals the partition-wise overlap-add
        h_end = h + 1
        while h_end < n_hops and np.array_equal(positions[h_end], positions[h]):
            h_end += 1
        seg = s[h * hop: h_end * hop]
        if np.any(seg):
            y = fftconvolve(seg[None, :], bank.rirs(positions[h]), axes=1)
            out[:, h * hop: h * hop + y.shape[1]] += y
        h = h_end
    return out[:, : s.size]


def render_scene(scene: Scene, hop: int = HOP):
    """Return ``(mic_signals, dry_source)``; mic_signals has shape ``(N, T)``."""
    s = np.asarray(scene.source_signal, dtype=float)
    if not np.any(s):
        raise SimulationError("silent source signal; cannot calibrate SNR")
    images = source_images(scene, hop)
    peak_power = np.max(np.mean(images * images, axis=1))
    if not peak_power > 0:
        raise SimulationError("source images are silent; cannot calibrate SNR")
    noise_sd = math.sqrt(peak_power / 10 ** (scene.snr_db / 10))
    rng = np.random.default_rng([scene.rng_seed, 0x5EED])
    noise = rng.normal(0.0, noise_sd, images.shape)
    return images + noise, s.copy()


def pink_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    spec = np.fft.rfft(rng.normal(size=n))
    f = np.arange(spec.size, dtype=float)
    f[0] = 1.0
    return np.fft.irfft(spec / np.sqrt(f), n)


def _speech_envelope(n: int, fs: float, rng: np.random.Generator) -> np.ndarray:
    env = np.zeros(n)
    pos = 0
    next_pause = int(rng.uniform(1.0, 3.0) * fs)
    while pos < n:
        if pos >= next_pause:
            pos += int(rng.uniform(0.2, 0.5) * fs)
            next_pause = pos + int(rng.uniform(1.0, 3.0) * fs)
            continue
        syl = int(fs / rng.uniform(2.0, 8.0))
        shape = np.hanning(syl) * rng.uniform(0.3, 1.0)
        end = min(n, pos + syl)
        env[pos:end] = shape[: end - pos]
        pos = end
    return env


def test_signal(kind: str, duration: float, seed, fs: float = SAMPLE_RATE,
                freq: float = 440.0) -> np.ndarray:
    """Unit-peak stand-in source signal: ``speechlike``, ``white`` or ``tone``."""
    if duration <= 0:
        raise ValueError("duration must be positive")
    n = int(round(duration * fs))
    rng = np.random.default_rng(seed)
    if kind == "white":
        x = rng.normal(size=n)
    elif kind == "tone":
        x = np.sin(2 * np.pi * freq * np.arange(n) / fs)
    elif kind == "speechlike":
        x = pink_noise(n, rng) * _speech_envelope(n, fs, rng)
    else:
        raise ValueError(f"unknown signal kind {kind!r}")
    return x / np.max(np.abs(x))


test_signal.__test__ = False  # keep pytest from collecting it
