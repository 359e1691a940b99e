"""Calibration of drag and latency parameters by grid search against flight logs."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dynamics import (GRAVITY, DragParams, LatencyParams, delay_slots, integrate, latency_update,
                       smoothing_gain, total_accel)

log = logging.getLogger("newtonfly.sysid")

LOG_COLUMNS = ("t", "cmd_x", "cmd_y", "cmd_z", "meas")


class SysIdError(ValueError):
    pass


@dataclass
class FlightLog:
    """Timestamped commands and a scalar measurement.

    For speed logs ``cmd`` is the desired thrust acceleration (m/s^2, world frame) and
    ``meas`` the speed (m/s). For attitude logs ``cmd[:, 0]`` is the commanded angle and
    ``meas`` the measured angle, both in radians.
    """

    t: np.ndarray
    cmd: np.ndarray
    meas: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.cmd = np.asarray(self.cmd, dtype=np.float64).reshape(len(self.t), 3)
        self.meas = np.asarray(self.meas, dtype=np.float64)
        if len(self.t) < 2:
            raise SysIdError("log needs at least two samples")
        if len(self.meas) != len(self.t):
            raise SysIdError("measurement count differs from timestamp count")
        if np.any(np.diff(self.t) <= 0):
            raise SysIdError("timestamps must be strictly increasing")

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for i in range(len(self.t)):
                w.writerow([repr(float(x)) for x in (self.t[i], *self.cmd[i], self.meas[i])])

    @classmethod
    def load(cls, path) -> "FlightLog":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or tuple(c.strip() for c in rows[0]) != LOG_COLUMNS:
            raise SysIdError(f"log header must be {','.join(LOG_COLUMNS)}")
        try:
            data = np.array([[float(x) for x in r] for r in rows[1:] if r], dtype=np.float64)
        except ValueError as e:
            raise SysIdError(f"malformed log row: {e}") from None
        if data.ndim != 2 or data.shape[1] != 5:
            raise SysIdError("each log row needs 5 values")
        return cls(data[:, 0], data[:, 1:4], data[:, 4])


@dataclass(frozen=True)
class Axis:
    lo: float
    hi: float
    step: float

    def values(self) -> np.ndarray:
        if self.step <= 0 or self.hi < self.lo:
            raise SysIdError("grid axis needs step > 0 and hi >= lo")
        n = int(math.floor((self.hi - self.lo) / self.step + 1e-9)) + 1
        return self.lo + self.step * np.arange(n)


@dataclass(frozen=True)
class GridSpec:
    """Two grid axes: (theta1, theta2) for drag or (lam, tau) for latency."""

    first: Axis
    second: Axis

    def values(self) -> tuple[np.ndarray, np.ndarray]:
        a, b = np.sort(self.first.values()), np.sort(self.second.values())
        if not len(a) or not len(b):
            raise SysIdError("empty grid")
        return a, b


@dataclass
class FitResult:
    first: float
    second: float
    rms: float
    table: np.ndarray  # (len(first), len(second)) rms per cell


def _argmin(table: np.ndarray) -> tuple[int, int]:
    # row-major scan over sorted axes: the first minimum is the lexicographically smallest
    flat = int(np.argmin(table))
    return divmod(flat, table.shape[1])


def _command_at(log_: FlightLog, times: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(log_.t, times, side="right") - 1
    return log_.cmd[np.clip(idx, 0, len(log_.t) - 1)]


def _check_gaps(log_: FlightLog) -> None:
    gaps = np.diff(log_.t)
    if np.any(gaps > 1.0):
        log.warning("log has %d gaps longer than 1 s; holding the last command", int(np.sum(gaps > 1.0)))


def simulate_speeds(log_: FlightLog, theta1, theta2, latency: LatencyParams, dt: float = 1 / 120,
                    g: float = GRAVITY) -> np.ndarray:
    """Speed traces (K, N) for K drag settings, sampled at the log timestamps.

    Commands are held piecewise constant; the vehicle starts at rest in steady hover.
    """
    theta1 = np.atleast_1d(np.asarray(theta1, dtype=np.float64))
    theta2 = np.atleast_1d(np.asarray(theta2, dtype=np.float64))
    K = len(theta1)
    drag = DragParams(theta1[:, None], theta2[:, None])
    t0, t1 = log_.t[0], log_.t[-1]
    n = int(math.ceil((t1 - t0) / dt - 1e-9))
    times = t0 + dt * np.arange(n + 1)
    cmds = _command_at(log_, times)
    hover = np.tile([0.0, 0.0, g], (K, 1))
    line = [hover] * delay_slots(latency.tau, dt)
    gain = smoothing_gain(latency.lam, dt)
    uhat = hover
    p = np.zeros((K, 3))
    v = np.zeros((K, 3))
    a_prev = total_accel(uhat, v, drag, g)
    speeds = np.empty((n + 1, K))
    speeds[0] = 0.0
    for k in range(n):
        line.append(np.broadcast_to(cmds[k], (K, 3)))
        uhat = latency_update(uhat, line.pop(0), gain)
        a = total_accel(uhat, v, drag, g)
        p, v = integrate(p, v, a_prev, a, dt)
        a_prev = a
        speeds[k + 1] = np.linalg.norm(v, axis=-1)
    return np.stack([np.interp(log_.t, times, speeds[:, j]) for j in range(K)])


def simulate_speed(log_: FlightLog, drag: DragParams, latency: LatencyParams, dt: float = 1 / 120) -> np.ndarray:
    """Speed trace (N,) aligned to the log timestamps."""
    _check_gaps(log_)
    return simulate_speeds(log_, drag.quadratic, drag.linear, latency, dt)[0]


def fit_drag(log_: FlightLog, grid: GridSpec, latency: LatencyParams, dt: float = 1 / 120) -> FitResult:
    """Exhaustive grid search for (theta1, theta2) minimizing the speed RMS error."""
    _check_gaps(log_)
    a, b = grid.values()
    A, Bm = np.meshgrid(a, b, indexing="ij")
    sim = simulate_speeds(log_, A.ravel(), Bm.ravel(), latency, dt)
    rms = np.sqrt(np.mean((sim - log_.meas) ** 2, axis=1)).reshape(A.shape)
    i, j = _argmin(rms)
    return FitResult(float(a[i]), float(b[j]), float(rms[i, j]), rms)


def simulate_attitude(log_: FlightLog, lam, tau: float, dt: float = 1 / 300) -> np.ndarray:
    """Delayed first-order-lag response (K, N) to the commanded angle ``cmd[:, 0]``."""
    lam = np.atleast_1d(np.asarray(lam, dtype=np.float64))
    t0, t1 = log_.t[0], log_.t[-1]
    n = int(math.ceil((t1 - t0) / dt - 1e-9))
    times = t0 + dt * np.arange(n + 1)
    cmds = _command_at(log_, times)[:, 0]
    gain = -np.expm1(-lam * dt)
    y = np.full(len(lam), cmds[0])
    line = [cmds[0]] * delay_slots(tau, dt)
    out = np.empty((n + 1, len(lam)))
    out[0] = y
    for k in range(n):
        line.append(cmds[k])
        y = latency_update(y, line.pop(0), gain)
        out[k + 1] = y
    return np.stack([np.interp(log_.t, times, out[:, j]) for j in range(len(lam))])


def fit_latency(log_: FlightLog, grid: GridSpec, dt: float = 1 / 300) -> FitResult:
    """Grid search for (lam, tau) minimizing the attitude RMS error."""
    _check_gaps(log_)
    lams, taus = grid.values()
    rms = np.empty((len(lams), len(taus)))
    for j, tau in enumerate(taus):
        sim = simulate_attitude(log_, lams, float(tau), dt)
        rms[:, j] = np.sqrt(np.mean((sim - log_.meas) ** 2, axis=1))
    i, j = _argmin(rms)
    return FitResult(float(lams[i]), float(taus[j]), float(rms[i, j]), rms)


# ----------------------------------------------------------------------------- synthetic logs

SPEED_TEST_LEVELS = (0.2, 0.4, 0.8, 0.0, 1.5, 0.0, 3.0, 0.0, 6.0, 0.0)


def speed_test_commands(levels=SPEED_TEST_LEVELS, hold: float = 4.0, rate: float = 30.0,
                        g: float = GRAVITY) -> FlightLog:
    """Level-flight forward-acceleration steps with coast-downs; ``meas`` is left at zero.

    Low levels keep the vehicle below the speed where the two drag terms cross, and each
    coast sweeps the whole speed range, so theta1 and theta2 are separately identifiable.
    """
    n = int(round(hold * rate * len(levels)))
    t = np.arange(n) / rate
    cmd = np.zeros((n, 3))
    cmd[:, 2] = g
    cmd[:, 0] = np.asarray(levels)[np.minimum((t // hold).astype(int), len(levels) - 1)]
    return FlightLog(t, cmd, np.zeros(n))


def synthetic_speed_log(drag: DragParams, latency: LatencyParams, noise: float = 0.0, rng=None,
                        commands: FlightLog | None = None, dt: float = 1 / 120) -> FlightLog:
    base = commands or speed_test_commands()
    meas = simulate_speeds(base, drag.quadratic, drag.linear, latency, dt)[0]
    if noise > 0:
        meas = meas + np.random.default_rng(rng).normal(0.0, noise, size=meas.shape)
    return FlightLog(base.t, base.cmd, meas)


def synthetic_attitude_log(lam: float, tau: float, noise: float = 0.0, rng=None, amplitude: float = 0.3,
                           period: float = 1.0, cycles: int = 6, rate: float = 100.0,
                           dt: float = 1 / 300) -> FlightLog:
    """Square-wave angle steps (rad) and the simulated response plus Gaussian noise (rad)."""
    n = int(round(period * cycles * rate))
    t = np.arange(n) / rate
    cmd = np.zeros((n, 3))
    cmd[:, 0] = np.where((t // (0.5 * period)) % 2 == 0, amplitude, -amplitude)
    cmd[t < 0.25 * period, 0] = 0.0
    base = FlightLog(t, cmd, np.zeros(n))
    meas = simulate_attitude(base, lam, tau, dt)[0]
    if noise > 0:
        meas = meas + np.random.default_rng(rng).normal(0.0, noise, size=meas.shape)
    return FlightLog(t, cmd, meas)


def write_fragment(path, values: dict) -> None:
    """Config fragment mergeable under the ``dynamics`` section."""
    import yaml

    Path(path).write_text(yaml.safe_dump({"dynamics": {k: float(v) for k, v in values.items()}}, sort_keys=True))
