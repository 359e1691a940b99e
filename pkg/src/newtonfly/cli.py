"""Command-line entry point: ``newtonfly <command> [options]``."""
from __future__ import annotations

import os

# BLAS reductions must not depend on the machine's core count
for _var in ("OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "OMP_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import csv
import json
import logging
import math
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .config import ConfigError, ExperimentConfig, dump_config, load_config

log = logging.getLogger("newtonfly")


class CLIError(RuntimeError):
    pass


# ----------------------------------------------------------------------------- helpers

def _setup_logging() -> None:
    level = os.environ.get("NF_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def revision() -> str:
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "rev-parse", "--short=12", "HEAD"], cwd=here, capture_output=True,
                             text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            dirty = subprocess.run(["git", "status", "--porcelain", "--untracked-files=no"], cwd=here,
                                   capture_output=True, text=True, timeout=5).stdout.strip()
            return out.stdout.strip() + ("-dirty" if dirty else "")
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _run_dir(cfg: ExperimentConfig, out: str | None) -> Path:
    path = Path(out or cfg.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_manifest(path: Path, cfg: ExperimentConfig, command: str, **extra) -> None:
    dump_config(cfg, path / "config.yaml")
    manifest = {"command": command, "name": cfg.name, "seed": cfg.seed, "config_sha256": cfg.digest(),
                "revision": revision(), "version": __version__, "kernel_backend": kernels.BACKEND}
    manifest.update(extra)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _parse_speeds(text: str) -> list[float]:
    try:
        speeds = [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--speeds: cannot parse {text!r}") from None
    if not speeds or min(speeds) <= 0:
        raise ConfigError("--speeds: need positive comma-separated values")
    return speeds


def _parse_axis(text: str):
    from .sysid import Axis

    try:
        lo, hi, step = (float(x) for x in text.split(":"))
    except ValueError:
        raise ConfigError(f"grid axis must be lo:hi:step, got {text!r}") from None
    if step <= 0 or hi < lo:
        raise ConfigError(f"grid axis {text!r}: need step > 0 and hi >= lo")
    return Axis(lo, hi, step)


# ----------------------------------------------------------------------------- commands

def cmd_train(args) -> int:
    from .policy import save_checkpoint
    from .train import Trainer

    cfg = _load(args)
    if args.iterations is not None:
        cfg.train.iterations = args.iterations
    out = _run_dir(cfg, args.out)
    write_manifest(out, cfg, "train", threads=kernels.get_num_threads())
    trainer = Trainer(cfg, out)
    trainer.run()
    save_checkpoint(trainer.params, out / "final.nwt")
    last = trainer.rows[-1] if trainer.rows else {}
    print(f"trained {trainer.iteration} iterations; final loss {last.get('loss', float('nan')):.5f}; "
          f"overflow guard fired {trainer.overflow_count} times; outputs in {out}")
    return 0


def cmd_ppo(args) -> int:
    from .policy import save_checkpoint
    from .ppo import PPOTrainer

    cfg = _load(args)
    if args.iterations is not None:
        cfg.ppo.iterations = args.iterations
    out = _run_dir(cfg, args.out)
    write_manifest(out, cfg, "ppo", threads=kernels.get_num_threads())
    trainer = PPOTrainer(cfg, out)
    trainer.run()
    save_checkpoint(trainer.params, out / "final.nwt")
    print(f"ppo trained {trainer.iteration} iterations ({trainer.env_steps} env steps); outputs in {out}")
    return 0


def cmd_eval(args) -> int:
    from .policy import CheckpointError, load_checkpoint
    from .train import Simulator, eval_suite, evaluate, hover_controller, straight_line_controller

    cfg = _load(args)
    if args.scenario is not None:
        cfg.scene.kind = args.scenario
        cfg.train.agents = 2 if args.scenario == "swap" else 1
    if args.episodes is not None:
        cfg.eval.episodes = args.episodes
    if args.goal_radius is not None:
        cfg.eval.goal_radius = args.goal_radius
    cfg.validate()
    speeds = _parse_speeds(args.speeds) if args.speeds else list(cfg.eval.speeds)
    sim = Simulator(cfg)
    controller = None
    params = None
    if args.controller == "straight":
        controller = straight_line_controller(g=sim.dyn.gravity, drag=sim.dyn.drag)
    elif args.controller == "hover":
        controller = hover_controller(sim.dyn.gravity)
    else:
        if args.checkpoint is None:
            raise ConfigError("--checkpoint is required for the policy controller")
        try:
            params = load_checkpoint(args.checkpoint, sim.policy.sizes)
        except (CheckpointError, OSError) as e:
            raise CLIError(f"cannot load checkpoint: {e}") from None
        params = {k: v.astype(sim.dtype) for k, v in params.items() if k in sim.policy.sizes.shapes()}
    reports = evaluate(params, eval_suite(cfg), cfg, speeds, sim, controller)
    fields = ["speed", "success_rate", "mean_speed", "peak_speed", "collision_rate", "reward"]
    lines = [f"{'speed':>7} {'success':>8} {'mean_v':>8} {'peak_v':>8} {'collide':>8}"]
    for r in reports:
        lines.append(f"{r.speed:7.2f} {r.success_rate:8.3f} {r.mean_speed:8.3f} {r.peak_speed:8.3f} "
                     f"{r.collision_rate:8.3f}")
    print("\n".join(lines))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "eval.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(fields)
            for r in reports:
                row = r.row()
                w.writerow([repr(float(row[f])) for f in fields])
        (out / "eval.txt").write_text("\n".join(lines) + "\n")
    return 0


def cmd_calibrate(args) -> int:
    from .dynamics import LatencyParams
    from .sysid import FlightLog, GridSpec, SysIdError, fit_drag, fit_latency, write_fragment

    try:
        flight = FlightLog.load(args.log)
    except (SysIdError, OSError) as e:
        raise ConfigError(f"--log: {e}") from None
    grid = GridSpec(_parse_axis(args.first), _parse_axis(args.second))
    if args.kind == "drag":
        res = fit_drag(flight, grid, LatencyParams(args.lam, args.tau))
        values = {"drag_quadratic": res.first, "drag_linear": res.second}
    else:
        res = fit_latency(flight, grid)
        values = {"lam": res.first, "tau": res.second}
    text = " ".join(f"{k}={v!r}" for k, v in values.items())
    print(f"{text} rms={res.rms!r}")
    if args.out:
        write_fragment(args.out, values)
    return 0


def cmd_render_demo(args) -> int:
    from .dynamics import attitude_from_thrust
    from .geometry import load_scene
    from .render import CameraIntrinsics, preprocess, render_depth, write_pgm
    from .train import sample_scenarios

    if args.scene:
        world = load_scene(args.scene)
    else:
        cfg = _load(args)
        world = sample_scenarios(cfg, 1, np.random.default_rng(cfg.seed))[0].world
    cam = load_config(args.config).camera.intrinsics() if args.config else CameraIntrinsics()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start, goal = np.array(world.start), np.array(world.goal)
    for i in range(args.frames):
        frac = i / max(args.frames - 1, 1) * 0.5
        pos = start + frac * (goal - start)
        att = attitude_from_thrust(np.array([0.0, 0.0, 9.81]), goal - pos)
        depth = render_depth(world, [], pos, att, cam)
        write_pgm(out / f"depth_{i:03d}.pgm", depth, cam.min_depth, cam.max_depth)
        write_pgm(out / f"inverse_{i:03d}.pgm", preprocess(depth, cam), 0.0, 1.0)
    print(f"wrote {2 * args.frames} images to {out}")
    return 0


def cmd_scene_gen(args) -> int:
    from .geometry import save_scene
    from .train import sample_scenarios

    cfg = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    for i, sc in enumerate(sample_scenarios(cfg, args.count, rng)):
        save_scene(sc.world, out / f"scene_{i:04d}.json")
    print(f"wrote {args.count} scenes to {out}")
    return 0


# ----------------------------------------------------------------------------- plotting

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]


def read_series(path: Path, x: str, y: str) -> list[tuple[float, float]]:
    pts = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or x not in reader.fieldnames or y not in reader.fieldnames:
            return pts
        for i, row in enumerate(reader, start=2):
            try:
                xv, yv = float(row[x]), row[y]
                if yv in ("", None):
                    continue
                yv = float(yv)
            except (TypeError, ValueError):
                log.warning("%s:%d: malformed row skipped", path, i)
                continue
            if math.isfinite(xv) and math.isfinite(yv):
                pts.append((xv, yv))
    return pts


def render_svg(series: list[tuple[str, list]], x_label: str, y_label: str, width: int = 640,
               height: int = 400) -> str:
    xs = [p[0] for _, s in series for p in s]
    ys = [p[1] for _, s in series for p in s]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    ml, mr, mt, mb = 70, 20, 20, 50
    pw, ph = width - ml - mr, height - mt - mb

    def sx(v):
        return ml + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return mt + ph - (v - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for i in range(5):
        xv = x0 + (x1 - x0) * i / 4
        yv = y0 + (y1 - y0) * i / 4
        out.append(f'<text x="{sx(xv):.2f}" y="{height - mb + 18}" font-size="11" '
                   f'text-anchor="middle">{xv:.4g}</text>')
        out.append(f'<text x="{ml - 6}" y="{sy(yv) + 4:.2f}" font-size="11" text-anchor="end">{yv:.4g}</text>')
    out.append(f'<text x="{ml + pw / 2:.2f}" y="{height - 10}" font-size="12" text-anchor="middle">{x_label}</text>')
    out.append(f'<text x="14" y="{mt + ph / 2:.2f}" font-size="12" text-anchor="middle" '
               f'transform="rotate(-90 14 {mt + ph / 2:.2f})">{y_label}</text>')
    for i, (name, pts) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        path = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in pts)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{path}"/>')
        ly = mt + 14 + 16 * i
        out.append(f'<line x1="{ml + 10}" y1="{ly - 4}" x2="{ml + 30}" y2="{ly - 4}" stroke="{color}" '
                   f'stroke-width="2"/>')
        out.append(f'<text x="{ml + 36}" y="{ly}" font-size="11">{_xml(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _xml(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _series_name(path: Path) -> str:
    manifest = path.parent / "manifest.json"
    if manifest.exists():
        try:
            m = json.loads(manifest.read_text())
            return f"{m.get('name', path.parent.name)} ({m.get('command', '')})"
        except (ValueError, OSError):
            pass
    return path.parent.name or path.stem


def cmd_plot(args) -> int:
    series, used = [], []
    for p in args.metrics:
        path = Path(p)
        if not path.exists():
            raise CLIError(f"{path}: no such file")
        y = args.y
        pts = read_series(path, args.x, y)
        if not pts and y == "eval_reward":
            pts = read_series(path, args.x, "loss")
            y = "loss"
        if not pts:
            raise CLIError(f"{path}: no plottable rows")
        series.append((_series_name(path), pts))
        used.append(y)
    svg = render_svg(series, args.x, " / ".join(dict.fromkeys(used)))
    Path(args.out).write_text(svg)
    print(f"wrote {args.out} ({len(series)} series)")
    return 0


# ----------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="newtonfly", description="Differentiable-physics quadrotor policy training.")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--threads", type=int, default=1, help="worker threads for rendering and distance queries")
    p.add_argument("--version", action="version", version=f"newtonfly {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a policy through the differentiable simulator")
    t.add_argument("config")
    t.add_argument("--iterations", type=int)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a fixed scenario suite")
    e.add_argument("config")
    e.add_argument("--checkpoint")
    e.add_argument("--speeds", help="comma-separated target speeds, e.g. 4,7,10")
    e.add_argument("--scenario", choices=["random", "empty", "swap"])
    e.add_argument("--episodes", type=int)
    e.add_argument("--goal-radius", type=float)
    e.add_argument("--controller", choices=["policy", "straight", "hover"], default="policy")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plot", help="SVG learning curves from metrics CSV files")
    pl.add_argument("metrics", nargs="+")
    pl.add_argument("--out", required=True)
    pl.add_argument("--x", default="env_steps")
    pl.add_argument("--y", default="eval_reward")
    pl.set_defaults(func=cmd_plot)

    c = sub.add_parser("calibrate", help="fit drag or latency parameters from a flight log")
    c.add_argument("--log", required=True)
    c.add_argument("--kind", choices=["drag", "latency"], required=True)
    c.add_argument("--first", required=True, help="lo:hi:step for theta1 (drag) or lambda (latency)")
    c.add_argument("--second", required=True, help="lo:hi:step for theta2 (drag) or tau (latency)")
    c.add_argument("--lam", type=float, default=12.0, help="latency rate used while fitting drag")
    c.add_argument("--tau", type=float, default=1.0 / 15.0, help="latency delay used while fitting drag")
    c.add_argument("--out", help="write a dynamics config fragment here")
    c.set_defaults(func=cmd_calibrate)

    pp = sub.add_parser("ppo", help="train the PPO baseline")
    pp.add_argument("config")
    pp.add_argument("--iterations", type=int)
    pp.add_argument("--out")
    pp.set_defaults(func=cmd_ppo)

    r = sub.add_parser("render-demo", help="dump depth images along a straight path")
    r.add_argument("--config")
    r.add_argument("--scene")
    r.add_argument("--frames", type=int, default=4)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render_demo)

    s = sub.add_parser("scene-gen", help="write random scenes as JSON")
    s.add_argument("config")
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_scene_gen)
    return p


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        kernels.set_num_threads(args.threads)
        if args.command == "render-demo" and not (args.scene or args.config):
            raise ConfigError("render-demo needs --scene or --config")
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - top-level guard maps failures to exit code 1
        log.debug("failure", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
