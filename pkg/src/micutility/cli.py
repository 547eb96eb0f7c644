"""Command-line entry point: ``python -m micutility <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness as H
from . import sim
from .features import FeatureId
from .lasso import LAMBDA_GRID, lambda_sweep, write_weights_csv
from .msc import msc_track
from .wavio import read_wav, write_wav
from .wire import FrameError

log = logging.getLogger("micutility")


def _config(args) -> H.RunConfig:
    cfg = H.load_config(args.config) if args.config else H.RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.trials is not None:
        cfg.trials = args.trials
    if args.out is not None:
        cfg.out_dir = args.out
    cfg.validate()
    return cfg


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, default=float))


def cmd_simulate(args, cfg):
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    room = args.room or cfg.rooms[0]
    scene = H.build_scene(cfg, room, cfg.seed)
    mics, source = sim.render_scene(scene)
    write_wav(out / "mics.wav", mics, cfg.fs)
    write_wav(out / "source.wav", source, cfg.fs)
    meta = {
        "room": room, "seed": cfg.seed, "dims": scene.room.dims, "t60": scene.room.t60,
        "mics": [{"position": list(m.position), "orientation": list(m.orientation)}
                 for m in scene.mics],
    }
    (out / "scene.json").write_text(json.dumps(meta, indent=2, default=float) + "\n")
    _emit({"status": "ok", "mics": str(out / "mics.wav"), "source": str(out / "source.wav")})


def cmd_extract(args, cfg):
    mics, fs = read_wav(args.mics)
    if fs != cfg.fs:
        raise H.ConfigError("fs", f"WAV rate {fs} differs from configured {cfg.fs}")
    cf = H.extract_channels(mics, cfg)
    path = Path(args.frames or Path(cfg.out_dir) / "frames.csff")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        n = H.write_frames(H.to_wire_frames(cf), fh)
    _emit({"status": "ok", "frames": n, "path": str(path)})


def cmd_estimate(args, cfg):
    data = Path(args.frames).read_bytes()
    errors: list = []
    frames = list(H.iter_frames(data, errors))
    if errors:
        raise errors[0][1]
    cf = H.from_wire_frames(frames)
    est = H.estimate_utilities(cf, cfg)
    if args.mics and args.source:
        mics, _ = read_wav(args.mics)
        source, _ = read_wav(args.source)
        gamma = msc_track(source[0], mics, cfg.block_len, cfg.shift)[: cf.n_frames]
        rho = H.rho_track(est.utility, gamma)
    else:
        gamma = np.full(est.utility.shape, np.nan)
        rho = np.full(cf.n_frames, np.nan)
    result = H.TrialResult(rho, est.utility, gamma, "", frame_times=H.frame_times(cf.n_frames, cfg))
    path = Path(args.csv or Path(cfg.out_dir) / "utility.csv")
    path.parent.mkdir(parents=True, exist_ok=True)
    H.write_csv(result, path)
    _emit({"status": "ok", "frames": cf.n_frames, "path": str(path),
           "median_rho": None if np.all(np.isnan(rho)) else float(np.nanmedian(rho))})


def cmd_evaluate(args, cfg):
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results, failures = H.run_batch(cfg, workers=args.workers)
    for r in results:
        H.write_csv(r, out / f"trial_{r.room}_{r.seed}.csv")
    report = {"status": "ok" if results else "error", "trials": len(results),
              "failures": [vars(f) for f in failures]}
    if results:
        summary = H.batch_summary(results)
        times = results[0].frame_times
        H.write_summary_csv(summary, times, out / "summary.csv")
        tail = times > times[-1] - 5.0
        report["median_rho_final_5s"] = float(np.nanmedian(summary.median[tail]))
        report["summary"] = str(out / "summary.csv")
    _emit(report)
    return 0 if results else 1


def cmd_lasso(args, cfg):
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results, failures = H.run_batch(cfg, workers=args.workers, keep_pcc=True)
    if not results:
        raise RuntimeError("every trial failed")
    prob = H.lasso_problem(results)
    sweep = lambda_sweep(prob, LAMBDA_GRID)
    write_weights_csv(sweep, out / "lasso_weights.csv")
    _emit({
        "status": "ok", "trials": len(results), "failures": [vars(f) for f in failures],
        "mu_max": prob.mu_max,
        "support": {repr(mu): sorted(FeatureId(i).label for i in res.support)
                    for mu, res in sweep.items()},
        "converged": all(res.converged for res in sweep.values()),
        "path": str(out / "lasso_weights.csv"),
    })


def rir_report(fs: int = sim.SAMPLE_RATE, tolerance: float = 0.2) -> dict:
    rooms = {}
    for name, room in sorted(sim.ROOMS.items()):
        beta = sim.wall_reflection(room, fs)
        t60 = sim.measured_t60(room, beta, fs)
        rooms[name] = {"target_t60": room.t60, "measured_t60": t60, "beta": beta,
                       "ok": abs(t60 / room.t60 - 1) <= tolerance}
    room = sim.ROOMS["A"]
    src = np.array([1.0, 2.6, 1.5])
    front = sim.MicSpec((3.0, 2.6, 1.5), (-1.0, 0.0, 0.0))
    back = sim.MicSpec(front.position, (1.0, 0.0, 0.0))
    h_front = sim.rir_image_source(room, src, front, fs, beta=0.0)
    h_back = sim.rir_image_source(room, src, back, fs, beta=0.0)
    # an exact null is reported as 300 dB
    null_db = min(300.0, 10 * np.log10(np.sum(h_front ** 2) / max(np.sum(h_back ** 2), 1e-300)))
    d = 2.0
    k = int(round(fs * d / room.speed_of_sound))
    expected = np.zeros_like(h_front)
    expected[k] = 1.0 / (4 * np.pi * d)
    anechoic_ok = bool(np.allclose(h_front, expected, rtol=0, atol=1e-15))
    ok = all(r["ok"] for r in rooms.values()) and null_db >= 40 and anechoic_ok
    return {"status": "ok" if ok else "fail", "rooms": rooms, "cardioid_null_db": null_db,
            "anechoic_pulse_exact": anechoic_ok}


def cmd_rir_check(args, cfg):
    report = rir_report(cfg.fs)
    _emit(report)
    return 0 if report["status"] == "ok" else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="base seed (overrides config)")
    common.add_argument("--out", help="output directory (overrides config)")
    common.add_argument("--trials", type=int, help="trials per room (overrides config)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="micutility", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="render one scene to WAV")
    p.add_argument("--room", choices=sorted(sim.ROOMS))
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("extract", parents=[common], help="node side: WAV -> .csff frames")
    p.add_argument("--mics", required=True, help="multichannel WAV")
    p.add_argument("--frames", help="output frame file (default OUT/frames.csff)")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("estimate", parents=[common], help="AP side: .csff frames -> utility CSV")
    p.add_argument("--frames", required=True)
    p.add_argument("--mics", help="mic WAV, with --source enables the MSC reference")
    p.add_argument("--source", help="dry source WAV")
    p.add_argument("--csv", help="output CSV (default OUT/utility.csv)")
    p.set_defaults(func=cmd_estimate)

    for name, func, text in (("evaluate", cmd_evaluate, "batch of trials, per-frame quartiles"),
                             ("lasso", cmd_lasso, "feature-weight lambda sweep")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--workers", type=int, default=1)
        p.set_defaults(func=func)

    p = sub.add_parser("rir-check", parents=[common], help="T60, anechoic and cardioid checks")
    p.set_defaults(func=cmd_rir_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        return args.func(args, cfg) or 0
    except Exception as exc:
        err = {"status": "error", "code": getattr(exc, "code", type(exc).__name__),
               "message": str(exc)}
        if isinstance(exc, H.ConfigError):
            err["path"] = exc.path
        print(json.dumps(err), file=sys.stderr)
        return 2 if isinstance(exc, (H.ConfigError, FrameError, OSError)) else 1
