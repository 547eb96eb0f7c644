"""Trial pipeline: scene -> features -> tracker -> utility -> rho, plus batch tools."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import features as feat
from . import sim
from .estimator import SimilarityGraph, UtilityEstimator, UtilityVector
from .features import FeatureId
from .lasso import LassoProblem
from .msc import msc_track
from .stats import pearson
from .tracker import FeatureTracker, KfConfig
from .wire import FeatureWireFrame, iter_frames, write_frames

log = logging.getLogger(__name__)

UNDEFINED = float("nan")
CSV_UNDEFINED = "."


class ConfigError(ValueError):
    """Schema violation; ``path`` names the offending field."""

    code = "config-error"

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
        self.message = message


@dataclass
class RunConfig:
    rooms: list = field(default_factory=lambda: ["A", "B", "C"])
    n_mics: int = 10
    snr_db: float = 10.0
    duration: float = 20.0
    move_windows: list = field(default_factory=lambda: [[8.0, 10.0]])
    signal: str = "speechlike"
    seed: int = 0
    trials: int = 10
    fs: int = sim.SAMPLE_RATE
    block_len: int = feat.BLOCK_LEN
    shift: int = feat.BLOCK_SHIFT
    entropy_len: int = feat.ENTROPY_BLOCK_LEN
    normalize_entropy: bool = True
    active: list = field(default_factory=lambda: [f.label for f in feat.DEFAULT_ACTIVE])
    kf: KfConfig = field(default_factory=KfConfig)
    out_dir: str = "results"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for i, name in enumerate(self.rooms):
            if name not in sim.ROOMS:
                raise ConfigError(f"rooms[{i}]", f"unknown room {name!r}")
        if not self.rooms:
            raise ConfigError("rooms", "at least one room required")
        for name in ("n_mics", "trials", "block_len", "shift", "entropy_len", "fs"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be positive")
        if self.n_mics < 2:
            raise ConfigError("n_mics", "need at least two microphones")
        if self.duration <= 0:
            raise ConfigError("duration", "must be positive")
        for i, win in enumerate(self.move_windows):
            if len(win) != 2 or not 0 <= win[0] < win[1]:
                raise ConfigError(f"move_windows[{i}]", "expected [start, end] with start < end")
        if self.signal not in ("speechlike", "white", "tone"):
            raise ConfigError("signal", f"unknown signal kind {self.signal!r}")
        if not self.active:
            raise ConfigError("active", "at least one feature required")
        for i, label in enumerate(self.active):
            try:
                FeatureId.from_label(label)
            except (KeyError, ValueError):
                raise ConfigError(f"active[{i}]", f"unknown feature {label!r}") from None

    @property
    def active_ids(self) -> list[int]:
        return [int(FeatureId.from_label(lbl)) for lbl in self.active]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict, path: str = "") -> "RunConfig":
        return _build(cls, data, path)


def _check_type(value, kind, path):
    ok = {
        int: isinstance(value, int) and not isinstance(value, bool),
        float: isinstance(value, (int, float)) and not isinstance(value, bool),
        bool: isinstance(value, bool),
        str: isinstance(value, str),
        list: isinstance(value, list),
    }[kind]
    if not ok:
        raise ConfigError(path, f"expected {kind.__name__}, got {type(value).__name__}")
    return float(value) if kind is float else value


_FIELD_TYPES = {
    "rooms": list, "n_mics": int, "snr_db": float, "duration": float, "move_windows": list,
    "signal": str, "seed": int, "trials": int, "fs": int, "block_len": int, "shift": int,
    "entropy_len": int, "normalize_entropy": bool, "active": list, "out_dir": str,
    "alpha": float, "sigma_q": float, "sigma_r": float, "epsilon": float,
}


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(path, "expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        if key not in names:
            raise ConfigError(sub, "unknown key")
        if key == "kf":
            kwargs[key] = _build(KfConfig, value, sub)
            continue
        value = _check_type(value, _FIELD_TYPES[key], sub)
        if key in ("rooms", "active"):
            for i, v in enumerate(value):
                _check_type(v, str, f"{sub}[{i}]")
        elif key == "move_windows":
            value = [[_check_type(t, float, f"{sub}[{i}][{j}]") for j, t in
                      enumerate(_check_type(w, list, f"{sub}[{i}]"))] for i, w in enumerate(value)]
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{path}.{exc.path}" if path else exc.path, exc.message) from None
    except ValueError as exc:
        raise ConfigError(path or cls.__name__, str(exc)) from None


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"malformed JSON: {exc}") from None
    return RunConfig.from_dict(data)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")


def config_hash(cfg: RunConfig, room: str, seed: int) -> str:
    blob = json.dumps({"config": cfg.to_dict(), "room": room, "seed": seed}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# --- scene -------------------------------------------------------------------

def build_scene(cfg: RunConfig, room: str, seed: int) -> sim.Scene:
    """Every random draw of a trial derives from ``(seed, room)``."""
    spec = sim.ROOMS[room]
    ss = np.random.SeedSequence([seed, sorted(sim.ROOMS).index(room)])
    mic_seed, traj_seed, sig_seed, noise_seed = ss.spawn(4)
    mics = sim.random_mics(spec, cfg.n_mics, mic_seed)
    traj = sim.synth_trajectory(spec, traj_seed, cfg.duration, move_windows=cfg.move_windows)
    source = sim.test_signal(cfg.signal, cfg.duration, sig_seed, cfg.fs)
    return sim.Scene(spec, mics, traj, source, cfg.snr_db,
                     int(noise_seed.generate_state(1)[0]), cfg.fs)


# --- node side ----------------------------------------------------------------

@dataclass
class ChannelFeatures:
    """Per-frame node outputs: values ``(F, N, 18)``, energy and entropy ``(F, N)``."""

    values: np.ndarray
    energy: np.ndarray
    entropy_neg: np.ndarray

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    def quantized(self) -> "ChannelFeatures":
        """Round-trip every value through binary32."""
        q = lambda a: a.astype(np.float32).astype(float)  # noqa: E731
        return ChannelFeatures(q(self.values), q(self.energy), q(self.entropy_neg))


def extract_channels(mics, cfg: RunConfig) -> ChannelFeatures:
    mics = np.atleast_2d(np.asarray(mics, dtype=float))
    n_frames = feat.num_frames(mics.shape[1], cfg.block_len, cfg.shift)
    vals, ens, ents = [], [], []
    for ch in mics:
        ent = feat.entropy_track(ch, n_frames, cfg.block_len, cfg.shift, cfg.entropy_len,
                                 normalize=cfg.normalize_entropy)
        v, e, _ = feat.block_features(feat.frame_matrix(ch, cfg.block_len, cfg.shift), None, ent)
        vals.append(v)
        ens.append(e)
        ents.append(ent)
    return ChannelFeatures(np.stack(vals, 1), np.stack(ens, 1), np.stack(ents, 1))


def to_wire_frames(cf: ChannelFeatures):
    for ell in range(cf.n_frames):
        for node in range(cf.values.shape[1]):
            yield FeatureWireFrame(node, ell, tuple(cf.values[ell, node]),
                                   cf.energy[ell, node], cf.entropy_neg[ell, node])


def from_wire_frames(frames) -> ChannelFeatures:
    """Reassemble node frames; every (node, frame) pair must be present once."""
    frames = list(frames)
    if not frames:
        raise ValueError("no frames")
    n_nodes = max(f.node_id for f in frames) + 1
    n_frames = max(f.frame_index for f in frames) + 1
    n_feat = frames[0].feature_count
    vals = np.full((n_frames, n_nodes, n_feat), np.nan)
    ens = np.full((n_frames, n_nodes), np.nan)
    ents = np.full((n_frames, n_nodes), np.nan)
    seen = np.zeros((n_frames, n_nodes), dtype=bool)
    for f in frames:
        if f.feature_count != n_feat:
            raise ValueError(f"frame {f.frame_index} node {f.node_id}: feature count differs")
        if seen[f.frame_index, f.node_id]:
            raise ValueError(f"duplicate frame {f.frame_index} for node {f.node_id}")
        seen[f.frame_index, f.node_id] = True
        vals[f.frame_index, f.node_id] = f.features
        ens[f.frame_index, f.node_id] = f.energy
        ents[f.frame_index, f.node_id] = f.entropy_neg
    if not seen.all():
        missing = np.argwhere(~seen)[0]
        raise ValueError(f"missing frame {missing[0]} for node {missing[1]}")
    return ChannelFeatures(vals, ens, ents)


def wire_roundtrip(cf: ChannelFeatures, path=None) -> ChannelFeatures:
    """Encode, optionally through a file, and decode again."""
    if path is None:
        buf = io.BytesIO()
        write_frames(to_wire_frames(cf), buf)
        data = buf.getvalue()
    else:
        with open(path, "wb") as fh:
            write_frames(to_wire_frames(cf), fh)
        data = Path(path).read_bytes()
    errors: list = []
    out = from_wire_frames(iter_frames(data, errors))
    if errors:
        raise errors[0][1]
    return out


# --- access point side -------------------------------------------------------------

@dataclass
class Estimates:
    utility: np.ndarray          # (F, N)
    fiedler: np.ndarray          # (F, N)
    flip_corr: np.ndarray        # (F,)
    pcc: np.ndarray | None = None  # (F, N, N, 18) when requested


def estimate_utilities(cf: ChannelFeatures, cfg: RunConfig, observer=None,
                       keep_pcc: bool = False) -> Estimates:
    """Track all features, fuse the active ones frame by frame.

    ``observer(frame, graph, utility)`` is called after every frame. The
    per-feature filters are independent, so tracking the full set does not
    change the active features' correlations.
    """
    n_frames, n, n_feat = cf.values.shape
    tracker = FeatureTracker(n, n_feat, cfg.kf)
    est = UtilityEstimator(n)
    active = cfg.active_ids
    u = np.empty((n_frames, n))
    fied = np.empty((n_frames, n))
    flips = np.empty(n_frames)
    pccs = np.empty((n_frames, n, n, n_feat)) if keep_pcc else None
    for ell in range(n_frames):
        pcc = tracker.update(cf.values[ell].T, cf.energy[ell])
        uv: UtilityVector = est.step(pcc[:, :, active], cf.entropy_neg[ell])
        u[ell], fied[ell], flips[ell] = uv.u, uv.fiedler, uv.flip_corr
        if keep_pcc:
            pccs[ell] = pcc
        if observer is not None:
            graph: SimilarityGraph = est.last_graph
            observer(ell, graph, uv)
    return Estimates(u, fied, flips, pccs)


def rho_metric(u, gamma) -> float:
    """PCC of utility and MSC vectors; NaN marks an undefined frame."""
    r = pearson(u, gamma)
    return UNDEFINED if math.isnan(r) else r


def rho_track(utility, gamma) -> np.ndarray:
    return np.array([rho_metric(a, b) for a, b in zip(utility, gamma)])


# --- trials -----------------------------------------------------------------

@dataclass
class TrialResult:
    rho: np.ndarray
    utility: np.ndarray
    msc: np.ndarray
    config_hash: str
    room: str = ""
    seed: int = 0
    frame_times: np.ndarray | None = None
    pcc: np.ndarray | None = None


@dataclass
class TrialFailure:
    room: str
    seed: int
    error: str


def frame_times(n_frames: int, cfg: RunConfig) -> np.ndarray:
    """Time in seconds of the last sample of each frame."""
    return (np.arange(n_frames) * cfg.shift + cfg.block_len) / cfg.fs


def run_trial(cfg: RunConfig, room: str | None = None, seed: int | None = None,
              framed: bool = False, frame_file=None, observer=None,
              keep_pcc: bool = False, quantize: bool = False) -> TrialResult:
    """One deterministic trial.

    ``framed`` sends the node features through the binary frame codec (and
    ``frame_file`` if given); ``quantize`` applies the same binary32 rounding
    in memory instead.
    """
    room = cfg.rooms[0] if room is None else room
    seed = cfg.seed if seed is None else seed
    scene = build_scene(cfg, room, seed)
    mics, source = sim.render_scene(scene)
    cf = extract_channels(mics, cfg)
    if framed:
        cf = wire_roundtrip(cf, frame_file)
    elif quantize:
        cf = cf.quantized()
    gamma = msc_track(source, mics, cfg.block_len, cfg.shift)
    est = estimate_utilities(cf, cfg, observer, keep_pcc)
    return TrialResult(rho_track(est.utility, gamma), est.utility, gamma,
                       config_hash(cfg, room, seed), room, seed,
                       frame_times(cf.n_frames, cfg), est.pcc)


def trial_plan(cfg: RunConfig) -> list[tuple[str, int]]:
    return [(room, cfg.seed + k) for room in cfg.rooms for k in range(cfg.trials)]


def _run_safe(args):
    cfg, room, seed, keep_pcc = args
    try:
        return run_trial(cfg, room, seed, keep_pcc=keep_pcc)
    except Exception as exc:  # a failed trial is reported, the batch goes on
        log.error("trial room=%s seed=%d failed: %s", room, seed, exc)
        return TrialFailure(room, seed, f"{type(exc).__name__}: {exc}")


def run_batch(cfg: RunConfig, workers: int = 1, keep_pcc: bool = False):
    """Run every (room, seed) trial; results come back in plan order."""
    jobs = [(cfg, room, seed, keep_pcc) for room, seed in trial_plan(cfg)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            out = list(pool.map(_run_safe, jobs))
    else:
        out = [_run_safe(j) for j in jobs]
    results = [r for r in out if isinstance(r, TrialResult)]
    failures = [r for r in out if isinstance(r, TrialFailure)]
    return results, failures


@dataclass
class BatchSummary:
    q25: np.ndarray
    median: np.ndarray
    q75: np.ndarray
    count: np.ndarray


def batch_summary(results) -> BatchSummary:
    """Per-frame quartiles over trials (linear interpolation), ignoring undefined frames."""
    results = list(results)
    if not results:
        raise ValueError("empty batch")
    lengths = {np.asarray(r.rho).size for r in results}
    if len(lengths) != 1:
        raise ValueError(f"trials have differing frame counts {sorted(lengths)}")
    rho = np.stack([np.asarray(r.rho, dtype=float) for r in results])
    count = np.sum(~np.isnan(rho), axis=0)
    q = np.full((3, rho.shape[1]), np.nan)
    ok = count > 0
    if ok.any():
        q[:, ok] = np.nanpercentile(rho[:, ok], [25, 50, 75], axis=0, method="linear")
    return BatchSummary(q[0], q[1], q[2], count)


def lasso_problem(results, mu: float = 0.0) -> LassoProblem:
    """Regression data from trials run with ``keep_pcc``."""
    results = list(results)
    if not results or any(r.pcc is None for r in results):
        raise ValueError("trials must carry their PCC tensors")
    prob = LassoProblem(results[0].pcc.shape[-1], mu=mu)
    for r in results:
        prob.add_trial(r.pcc, r.msc)
    return prob


# --- CSV ----------------------------------------------------------------------

def _fmt(v) -> str:
    v = float(v)
    return CSV_UNDEFINED if math.isnan(v) else repr(v)


def write_csv(result: TrialResult, path, cfg: RunConfig | None = None) -> None:
    n_frames, n = result.utility.shape
    times = result.frame_times
    if times is None:
        times = frame_times(n_frames, cfg or RunConfig())
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["frame", "time_s", "rho"] + [f"u_{i + 1}" for i in range(n)]
                     + [f"gamma_{i + 1}" for i in range(n)])
        for ell in range(n_frames):
            out.writerow([ell, _fmt(times[ell]), _fmt(result.rho[ell])]
                         + [_fmt(v) for v in result.utility[ell]]
                         + [_fmt(v) for v in result.msc[ell]])


def read_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    cols = {h: np.array([math.nan if r[i] == CSV_UNDEFINED else float(r[i]) for r in body])
            for i, h in enumerate(header)}
    return cols


def write_summary_csv(summary: BatchSummary, times, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["frame", "time_s", "q25", "median", "q75", "n_defined"])
        for ell, t in enumerate(times):
            out.writerow([ell, _fmt(t), _fmt(summary.q25[ell]), _fmt(summary.median[ell]),
                          _fmt(summary.q75[ell]), int(summary.count[ell])])
