import itertools
import math

import numpy as np
import pytest
from scipy.signal import hilbert

from micutility import sim
from micutility.features import FeatureId, block_features, frame_matrix
from micutility.msc import msc_track

FS = 16000
C = sim.SPEED_OF_SOUND


def gain(orientation, src, mic):
    d = np.asarray(src, float) - np.asarray(mic, float)
    o = np.asarray(orientation, float)
    return 0.5 * (1 + d @ o / (np.linalg.norm(d) * np.linalg.norm(o)))


# --- rooms and reflection coefficients --------------------------------------------------

def test_room_validation():
    with pytest.raises(sim.SimulationError):
        sim.RoomSpec((1.0, 0.0, 2.0), 0.5)
    with pytest.raises(sim.SimulationError):
        sim.RoomSpec((1.0, 1.0, 2.0), 0.0)
    a = sim.ROOMS["A"]
    assert (a.dims, a.t60) == ((5.0, 5.2, 3.0), 0.5)
    assert (sim.ROOMS["B"].dims, sim.ROOMS["B"].t60) == ((6.2, 5.0, 2.5), 0.7)
    assert (sim.ROOMS["C"].dims, sim.ROOMS["C"].t60) == ((4.8, 4.2, 2.3), 0.35)


def test_eyring_inversion():
    room = sim.ROOMS["A"]
    beta = sim.reflection_from_t60(room)
    alpha = 1 - math.exp(-0.161 * room.volume / (room.surface * room.t60))
    assert beta == pytest.approx(math.sqrt(1 - alpha))
    assert 0 < beta < 1
    longer = sim.RoomSpec(room.dims, 2 * room.t60)
    assert sim.reflection_from_t60(longer) > beta
    assert sim.reflection_from_t60(sim.RoomSpec(room.dims, 1e6)) > 0.999999
    with pytest.raises(sim.SimulationError):
        sim.reflection_from_t60(sim.RoomSpec(room.dims, 1e-4))


# --- impulse responses ------------------------------------------------------------

def test_anechoic_single_pulse():
    room = sim.ROOMS["A"]
    src = (1.2, 2.0, 1.4)
    mic = sim.MicSpec((3.1, 3.3, 1.7), (0.3, -0.8, 0.0))
    h = sim.rir_image_source(room, src, mic, FS, beta=0.0)
    d = math.dist(src, mic.position)
    k = round(FS * d / C)
    expected = np.zeros_like(h)
    expected[k] = gain(mic.orientation, src, mic.position) / (4 * math.pi * d)
    assert np.array_equal(np.flatnonzero(h), [k])
    assert h[k] == pytest.approx(expected[k], rel=1e-14)
    assert h.size >= room.t60 * FS


def test_cardioid_null():
    room = sim.ROOMS["B"]
    src = (1.0, 2.5, 1.2)
    front = sim.MicSpec((3.0, 2.5, 1.2), (-1.0, 0.0, 0.0))
    back = sim.MicSpec((3.0, 2.5, 1.2), (1.0, 0.0, 0.0))
    e_front = np.sum(sim.rir_image_source(room, src, front, FS, beta=0.0) ** 2)
    e_back = np.sum(sim.rir_image_source(room, src, back, FS, beta=0.0) ** 2)
    assert e_back <= e_front * 1e-4


def test_distance_doubling_is_six_db():
    room = sim.RoomSpec((20.0, 20.0, 20.0), 0.5)
    src = (5.0, 10.0, 10.0)
    near = sim.MicSpec((7.0, 10.0, 10.0), (-1.0, 0.0, 0.0))
    far = sim.MicSpec((9.0, 10.0, 10.0), (-1.0, 0.0, 0.0))
    a = sim.rir_image_source(room, src, near, FS, beta=0.0).max()
    b = sim.rir_image_source(room, src, far, FS, beta=0.0).max()
    assert 20 * math.log10(a / b) == pytest.approx(20 * math.log10(2), abs=1e-9)


def test_first_order_cube_images():
    L = 4.0
    room = sim.RoomSpec((L, L, L), 0.5)
    src = np.array([0.7, 1.7, 2.3])
    mic = sim.MicSpec((2.9, 2.2, 1.4), (0.6, 0.5, 0.62))
    beta = 0.7
    h = sim.rir_image_source(room, src, mic, FS, beta=beta, max_order=1, length=2000)
    images = [src]
    for ax in range(3):
        for wall in (0.0, L):
            img = src.copy()
            img[ax] = 2 * wall - src[ax]
            images.append(img)
    expected = np.zeros(2000)
    for k, img in enumerate(images):
        d = np.linalg.norm(img - mic.position)
        w = 1.0 if k == 0 else beta
        expected[round(FS * d / C)] += w * gain(mic.orientation, img, mic.position) / (4 * math.pi * d)
    assert np.count_nonzero(h) == 7
    np.testing.assert_allclose(h, expected, rtol=1e-12, atol=0)


def test_lattice_matches_brute_force_enumeration():
    room = sim.RoomSpec((3.0, 4.0, 2.5), 0.4)
    lat = sim.image_lattice(room, max_order=2)
    src = np.array([0.7, 1.9, 1.1])
    got = {tuple(np.round(p, 9)) + (o,) for p, o in zip(lat.images(src), lat.orders)}
    want = set()
    for l, u in itertools.product(itertools.product(range(-2, 3), repeat=3),
                                  itertools.product((0, 1), repeat=3)):
        order = sum(abs(2 * li - ui) for li, ui in zip(l, u))
        if order <= 2:
            pos = [(1 - 2 * ui) * s + 2 * li * d for li, ui, s, d in zip(l, u, src, room.dims)]
            want.add(tuple(np.round(pos, 9)) + (order,))
    assert got == want


def test_coincident_source_and_mic_rejected():
    room = sim.ROOMS["C"]
    with pytest.raises(sim.SimulationError):
        sim.rir_image_source(room, (1.0, 1.0, 1.0), sim.MicSpec((1.0, 1.0, 1.0)), FS, beta=0.0)
    with pytest.raises(sim.SimulationError):
        sim.rir_image_source(room, (9.0, 1.0, 1.0), sim.MicSpec((1.0, 1.0, 1.0)), FS, beta=0.0)


@pytest.mark.parametrize("name", ["A", "B", "C"])
def test_t60_at_random_geometries(name):
    room = sim.ROOMS[name]
    rng = np.random.default_rng(7)
    for _ in range(3):
        src = rng.uniform(1.0, np.array(room.dims) - 1.0)
        mic = sim.MicSpec.from_azimuth(rng.uniform(0.5, np.array(room.dims) - 0.5),
                                       rng.uniform(0, 2 * np.pi))
        h = sim.RirBank(room, [mic], FS).rirs(src)[0]
        assert abs(sim.schroeder_t60(h, FS) / room.t60 - 1) <= 0.2


def test_schroeder_decay_is_linear():
    room = sim.ROOMS["A"]
    h = sim.RirBank(room, [sim.MicSpec((3.5, 3.0, 1.6), (-1, -1, 0))], FS).rirs((1.5, 2.0, 1.4))[0]
    edc = np.cumsum((h * h)[::-1])[::-1]
    db = 10 * np.log10(edc / edc[0])
    idx = np.flatnonzero((db <= -5) & (db >= -25))
    fit = np.polyval(np.polyfit(idx, db[idx], 1), idx)
    assert np.max(np.abs(fit - db[idx])) < 2.0


def test_schroeder_t60_on_exponential_decay():
    t60 = 0.4
    n = np.arange(int(FS * 0.6))
    h = np.random.default_rng(0).normal(size=n.size) * 10 ** (-3 * n / (FS * t60))
    assert sim.schroeder_t60(h, FS) == pytest.approx(t60, rel=0.05)


# --- trajectories ------------------------------------------------------------------

def test_trajectory_determinism_and_containment():
    for name, room in sim.ROOMS.items():
        for seed in range(1000 if name == "A" else 200):
            traj = sim.synth_trajectory(room, seed, 20.0, move_windows=[(8, 10)])
            pos = np.array([p for _, p in traj.waypoints])
            assert np.all(pos >= 1.0 - 1e-12)
            assert np.all(pos <= np.array(room.dims) - 1.0 + 1e-12)
    a = sim.synth_trajectory(sim.ROOMS["B"], 5, 28.0)
    b = sim.synth_trajectory(sim.ROOMS["B"], 5, 28.0)
    assert a.waypoints == b.waypoints
    assert a.move_windows == [(8.0, 10.0), (18.0, 20.0)]


def test_trajectory_continuity():
    room = sim.ROOMS["B"]
    hop = 512 / FS
    for seed in range(50):
        traj = sim.synth_trajectory(room, seed, 28.0)
        pts = np.array([traj.position_at(k * hop) for k in range(int(28.0 / hop))])
        assert np.max(np.linalg.norm(np.diff(pts, axis=0), axis=1)) < 0.5


def test_trajectory_moves_only_in_windows():
    traj = sim.synth_trajectory(sim.ROOMS["A"], 3, 20.0, move_windows=[(8, 10)])
    before = traj.position_at(7.99)
    after = traj.position_at(10.0)
    assert np.linalg.norm(after - before) > 0.1
    # jitter at rest stays small
    rest = np.array([traj.position_at(t) for t in np.arange(0, 8, 0.25)])
    assert np.max(np.linalg.norm(rest - rest.mean(axis=0), axis=1)) < 0.15
    short = sim.synth_trajectory(sim.ROOMS["A"], 3, 14.0)
    assert short.move_windows[0] == pytest.approx((4.0, 5.0))


def test_trajectory_rejects_unordered_times():
    with pytest.raises(sim.SimulationError):
        sim.Trajectory([(1.0, (1, 1, 1)), (0.5, (1, 1, 1))])


# --- rendering -------------------------------------------------------------------

def static_scene(mics, snr_db=10.0, beta_room=None, seed=0, signal=None, duration=2.0):
    room = beta_room or sim.RoomSpec((8.0, 8.0, 4.0), 0.4)
    src = (2.0, 4.0, 2.0)
    traj = sim.Trajectory([(0.0, src)])
    s = sim.test_signal("white", duration, seed) if signal is None else signal
    return sim.Scene(room, mics, traj, s, snr_db, seed)


def test_render_snr_calibration(monkeypatch):
    monkeypatch.setattr(sim, "wall_reflection", lambda room, fs=FS: 0.0)
    scene = static_scene([sim.MicSpec((4.0, 4.0, 2.0), (-1, 0, 0))])
    x, s = sim.render_scene(scene)
    clean = sim.source_images(scene)
    noise = x - clean
    snr = 10 * np.log10(np.mean(clean ** 2) / np.mean(noise ** 2))
    assert abs(snr - 10.0) < 0.5
    # the clean image is the delayed, scaled source (high-passed)
    d = 2.0
    k = round(FS * d / C)
    ref = np.zeros_like(s)
    ref[k:] = s[:-k] / (4 * math.pi * d)
    ref = sim.dc_highpass(ref, FS)
    np.testing.assert_allclose(clean[0], ref, atol=1e-12)


def test_nearer_mic_is_more_coherent(monkeypatch):
    monkeypatch.setattr(sim, "wall_reflection", lambda room, fs=FS: 0.0)
    mics = [sim.MicSpec((3.0, 4.0, 2.0), (-1, 0, 0)), sim.MicSpec((6.0, 4.0, 2.0), (-1, 0, 0))]
    x, s = sim.render_scene(static_scene(mics, duration=4.0))
    g = msc_track(s, x)
    assert g[50:, 0].mean() > g[50:, 1].mean()


def test_render_determinism():
    room = sim.ROOMS["C"]
    mics = sim.random_mics(room, 3, 1)
    traj = sim.synth_trajectory(room, 2, 3.0)
    s = sim.test_signal("speechlike", 3.0, 4)
    a = sim.render_scene(sim.Scene(room, mics, traj, s, 10.0, 9))[0]
    b = sim.render_scene(sim.Scene(room, mics, traj, s, 10.0, 9))[0]
    assert np.array_equal(a, b)
    c = sim.render_scene(sim.Scene(room, mics, traj, s, 10.0, 10))[0]
    assert not np.array_equal(a, c)


def test_silent_source_rejected():
    scene = static_scene([sim.MicSpec((4.0, 4.0, 2.0))], signal=np.zeros(8000))
    with pytest.raises(sim.SimulationError):
        sim.render_scene(scene)


def test_noise_channels_uncorrelated(monkeypatch):
    monkeypatch.setattr(sim, "wall_reflection", lambda room, fs=FS: 0.0)
    mics = sim.random_mics(sim.RoomSpec((8.0, 8.0, 4.0), 0.4), 4, 3)
    scene = static_scene(mics, duration=10.0)
    x, _ = sim.render_scene(scene)
    noise = x - sim.source_images(scene)
    r = np.corrcoef(noise)
    assert np.max(np.abs(r - np.eye(4))) < 0.05


def test_partitioned_convolution_matches_direct():
    # a held source: hop-wise overlap-add equals one long convolution
    room = sim.ROOMS["C"]
    mics = [sim.MicSpec((3.0, 3.0, 1.2))]
    s = sim.test_signal("white", 1.0, 0)
    traj = sim.Trajectory([(0.0, (1.5, 1.5, 1.2))])
    scene = sim.Scene(room, mics, traj, s)
    h = sim.RirBank(room, mics, FS).rirs((1.5, 1.5, 1.2))[0]
    np.testing.assert_allclose(sim.source_images(scene)[0], np.convolve(s, h)[: s.size], atol=1e-12)


# --- test signals -------------------------------------------------------------------

def test_white_signal():
    a = sim.test_signal("white", 1.0, 3)
    assert np.array_equal(a, sim.test_signal("white", 1.0, 3))
    assert a.size == FS and np.max(np.abs(a)) == 1.0
    with pytest.raises(ValueError):
        sim.test_signal("white", 0.0, 3)
    with pytest.raises(ValueError):
        sim.test_signal("chirp", 1.0, 3)


def test_speechlike_signal():
    x = sim.test_signal("speechlike", 10.0, 1)
    assert np.max(np.abs(x)) == 1.0
    spec = np.abs(np.fft.rfft(x)) ** 2
    f = np.fft.rfftfreq(x.size, 1 / FS)
    band = (f > 50) & (f < 7000)
    slope = np.polyfit(np.log10(f[band]), 10 * np.log10(spec[band] + 1e-30), 1)[0]
    assert slope < 0
    env = np.abs(hilbert(x))
    frames = frame_matrix(env, 1600, 1600).mean(axis=1)
    depth = 10 * np.log10(np.percentile(frames, 90) / max(np.percentile(frames, 10), 1e-12))
    assert depth > 6


def test_tone_centroid():
    x = sim.test_signal("tone", 1.0, 0, freq=440.0)
    v = block_features(frame_matrix(x))[0][:, FeatureId.SD_CENTROID]
    assert np.all(np.abs(v - 440 / (FS / 2)) <= 1 / 512)
