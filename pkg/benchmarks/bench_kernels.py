"""Compare the compiled and numpy kernel backends on desk-scale batches.

    python benchmarks/bench_kernels.py [--lanes 16] [--repeat 5] [--threads 1]
"""
import argparse
import time

import numpy as np

from newtonfly import kernels
from newtonfly.config import load_config
from newtonfly.dynamics import attitude_from_thrust
from newtonfly.geometry import generate_env, pack
from newtonfly.render import CameraIntrinsics, lane_tables, pixel_directions


def batch(lanes: int, seed: int = 0):
    cfg = load_config("desk")
    rng = np.random.default_rng(seed)
    worlds = [generate_env(cfg.scene.env_spec(seed=seed + i)) for i in range(lanes)]
    table, offsets = lane_tables([pack(w.primitives) for w in worlds])
    starts = np.array([w.start for w in worlds])
    goals = np.array([w.goal for w in worlds])
    pos = starts + rng.uniform(0.2, 0.6, (lanes, 1)) * (goals - starts)
    axes = attitude_from_thrust(np.tile([0.0, 0.0, 9.81], (lanes, 1)), goals - pos).axes()
    return table, offsets, pos, np.ascontiguousarray(axes)


def timed(fn, repeat: int) -> float:
    fn()
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lanes", type=int, default=16)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    kernels.set_num_threads(args.threads)
    table, offsets, pos, axes = batch(args.lanes)
    cam_dirs = pixel_directions(CameraIntrinsics())
    pts = pos + np.random.default_rng(1).normal(0, 1, pos.shape)
    backends = ["python"] + (["compiled"] if kernels.BACKEND == "compiled" else [])
    cases = {
        "render": lambda b: kernels.render(table, offsets, pos, axes, cam_dirs, backend=b),
        "closest": lambda b: kernels.closest(table, offsets, pts, backend=b),
    }
    print(f"{args.lanes} lanes, {len(cam_dirs)} pixels per lane, {len(table)} primitives, "
          f"{args.threads} thread(s)")
    print(f"{'kernel':<10}" + "".join(f"{b:>14}" for b in backends) + f"{'speedup':>10}")
    for name, fn in cases.items():
        ref = fn("python")
        times = {b: timed(lambda: fn(b), args.repeat) for b in backends}
        if "compiled" in times:
            out = fn("compiled")
            pairs = zip(ref, out) if isinstance(ref, tuple) else [(ref, out)]
            same = all(np.allclose(a, c, atol=1e-9, equal_nan=True) for a, c in pairs)
            speed = f"{times['python'] / times['compiled']:9.1f}x" + ("" if same else " MISMATCH")
        else:
            speed = "-"
        print(f"{name:<10}" + "".join(f"{1e3 * times[b]:12.2f}ms" for b in backends) + f"{speed:>10}")


if __name__ == "__main__":
    main()
