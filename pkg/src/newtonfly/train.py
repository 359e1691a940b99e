"""Batched rollouts through the differentiable simulator, policy training and evaluation."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .config import ExperimentConfig
from .dynamics import (ActuatorState, DragParams, attitude_from_thrust, init_actuator, integrate,
                       latency_step, soft_clamp_thrust, total_accel)
from .geometry import (Cuboid, EnvSpec, GeometryError, World, _sample_start_goal, direction_to,
                       generate_env, ground_plane, pack, sphere_rows)
from . import kernels
from .objective import (StepRecord, make_vset, obstacle_loss, smoothness_losses, step_costs,
                        velocity_estimate_loss, velocity_loss)
from .optim import AdamW, cosine_lr
from .policy import Observation, Policy, init_params, save_checkpoint, sizes_for
from .render import lane_tables, preprocess, render_batch

log = logging.getLogger("newtonfly.train")

FAR = 1e6  # closest distance reported when a lane has no obstacles


class RolloutError(RuntimeError):
    pass


# ----------------------------------------------------------------------------- scenarios

@dataclass
class Scenario:
    """A world shared by ``M`` agents, each with its own start and goal."""

    world: World
    starts: np.ndarray  # (M, 3)
    goals: np.ndarray   # (M, 3)

    def __post_init__(self):
        self.starts = np.asarray(self.starts, dtype=np.float64).reshape(-1, 3)
        self.goals = np.asarray(self.goals, dtype=np.float64).reshape(-1, 3)
        if self.starts.shape != self.goals.shape:
            raise ValueError("starts and goals must pair up")

    @property
    def agents(self) -> int:
        return len(self.starts)

    @classmethod
    def single(cls, world: World) -> "Scenario":
        return cls(world, np.array([world.start]), np.array([world.goal]))


def _extra_agents(world: World, count: int, spacing: float, clearance: float) -> tuple[np.ndarray, np.ndarray]:
    """Agents 1..count-1 fly parallel routes offset sideways from the world's route."""
    s, g = np.array(world.start), np.array(world.goal)
    axis = g[:2] - s[:2]
    side = np.array([-axis[1], axis[0], 0.0]) / max(np.linalg.norm(axis), 1e-9)
    starts, goals = [s], [g]
    table = world.table()
    for m in range(1, count):
        off = side * spacing * ((m + 1) // 2) * (1 if m % 2 else -1)
        for p in (s + off, g + off):
            if len(table):
                offsets = np.array([0, len(table)], dtype=np.int64)
                d = kernels.closest(table, offsets, p.reshape(1, 3))[0][0]
                if d < clearance:
                    raise GeometryError("extra agent too close to an obstacle")
        starts.append(s + off)
        goals.append(g + off)
    return np.array(starts), np.array(goals)


def swap_scenario(length: float, gate_width: float, altitude: tuple[float, float],
                  rng: np.random.Generator) -> Scenario:
    """Two agents trading places through a gate of ``gate_width`` at the arena center.

    The gate is virtual: it constrains where agents start and finish (inside the gate
    corridor) so their routes cross head-on, but it is not an obstacle.
    """
    half = 0.5 * length
    x = half - 1.0
    y = rng.uniform(-0.5 * gate_width, 0.5 * gate_width, size=2)
    z = rng.uniform(*altitude, size=2)
    a = np.array([-x, y[0], z[0]])
    b = np.array([x, y[1], z[1]])
    world = World((ground_plane(),), (-half, -half, 0.0), (half, half, 8.0), a, b)
    return Scenario(world, np.array([a, b]), np.array([b, a]))


def sample_scenarios(cfg: ExperimentConfig, count: int, rng: np.random.Generator) -> list[Scenario]:
    scene, agents = cfg.scene, cfg.train.agents
    spec = scene.env_spec()
    out = []
    for _ in range(count):
        if scene.kind == "swap":
            out.append(swap_scenario(scene.swap_length, scene.gate_width, scene.altitude, rng))
            continue
        for _attempt in range(spec.max_retries):
            if scene.kind == "empty":
                sx, sy, sz = spec.arena_size
                lo, hi = np.array([-sx / 2, -sy / 2, 0.0]), np.array([sx / 2, sy / 2, sz])
                st, gl = _sample_start_goal(spec, rng, lo, hi)
                world = World((ground_plane(),), lo, hi, st, gl)
            else:
                world = generate_env(spec, rng)
            try:
                starts, goals = _extra_agents(world, agents, 2.0, spec.clearance)
            except GeometryError:
                continue
            out.append(Scenario(world, starts, goals))
            break
        else:
            raise GeometryError("cannot place agents with the requested clearance")
    return out


def eval_suite(cfg: ExperimentConfig, episodes: int | None = None) -> list[Scenario]:
    """Fixed evaluation scenarios drawn from the eval seed (independent of the training seed)."""
    n = cfg.eval.episodes if episodes is None else episodes
    return sample_scenarios(cfg, n, np.random.default_rng(cfg.eval.seed))


# ----------------------------------------------------------------------------- rollout

@dataclass
class LaneSetup:
    """Per-rollout physical settings."""

    dt: float
    steps: int
    v_max: np.ndarray         # (B,)
    drag_quadratic: np.ndarray  # (B, 1)
    drag_linear: np.ndarray     # (B, 1)

    def drag(self) -> DragParams:
        return DragParams(self.drag_quadratic, self.drag_linear)


def sample_setup(cfg: ExperimentConfig, lanes: int, rng: np.random.Generator, evaluation: bool = False,
                 v_max: float | None = None, steps: int | None = None) -> LaneSetup:
    t, dyn = cfg.train, cfg.dynamics
    if evaluation:
        dt = t.dt
        speed = np.full(lanes, t.v_max[1] if v_max is None else v_max)
        scale_q = scale_l = np.ones((lanes, 1))
    else:
        dt = t.dt * (1.0 + rng.uniform(-t.dt_jitter, t.dt_jitter)) if t.dt_jitter > 0 else t.dt
        speed = rng.uniform(t.v_max[0], t.v_max[1], size=lanes) if v_max is None else np.full(lanes, v_max)
        f = t.drag_randomization
        scale_q = 1.0 + rng.uniform(-f, f, size=(lanes, 1)) if f > 0 else np.ones((lanes, 1))
        scale_l = 1.0 + rng.uniform(-f, f, size=(lanes, 1)) if f > 0 else np.ones((lanes, 1))
    n = (cfg.eval.steps if evaluation else t.steps) if steps is None else steps
    return LaneSetup(float(dt), int(n), speed.astype(np.float64),
                     dyn.drag_quadratic * scale_q, dyn.drag_linear * scale_l)


@dataclass
class StepContext:
    """Gradient-stopped inputs of one step, sufficient to replay it."""

    image: np.ndarray      # (B, 12, 16)
    frame: np.ndarray      # (B, 3, 3) yaw frame, columns = world coords of (forward, left, up)
    vset: np.ndarray       # (B, 3) world frame
    attitude: np.ndarray   # (B, 6) yaw frame
    velocity: np.ndarray   # (B, 3) yaw frame
    others: list           # per-lane sphere rows of other agents after the step
    n_hat: np.ndarray | None = None
    v_c: np.ndarray | None = None


@dataclass
class RolloutBatch:
    records: StepRecord
    hidden: list                 # per-step hidden state values (B, H)
    contexts: list[StepContext]
    positions: np.ndarray        # (T+1, B, 3)
    velocities: np.ndarray       # (T+1, B, 3)
    collided: np.ndarray         # (B,) bool
    collision_step: np.ndarray   # (B,) first step with d < r_q, -1 if none
    goal_step: np.ndarray        # (B,) first step within goal radius, -1 if none
    min_distance: np.ndarray     # (B,) min closest distance over steps
    agent_distance: np.ndarray   # (B,) min center distance to any other agent (inf if alone)
    goals: np.ndarray            # (B, 3)
    dt: float
    setup: LaneSetup
    agents: int
    tape: ad.Tape | None = None
    param_nodes: dict | None = None
    actions: list | None = None  # yaw-frame commands actually applied (sampled for PPO)

    @property
    def lanes(self) -> int:
        return len(self.goals)

    @property
    def success(self) -> np.ndarray:
        """Per lane: goal reached before any collision."""
        ok = self.goal_step >= 0
        return ok & ((self.collision_step < 0) | (self.goal_step < self.collision_step))


def yaw_frames(forward: np.ndarray, prev: np.ndarray | None = None) -> np.ndarray:
    """Gravity-aligned frames (B, 3, 3) whose heading follows the horizontal part of ``forward``."""
    h = np.array(forward, dtype=np.float64, copy=True)
    h[:, 2] = 0.0
    n = np.linalg.norm(h, axis=-1, keepdims=True)
    if prev is not None:
        h = np.where(n > 1e-6, h, prev)
        n = np.linalg.norm(h, axis=-1, keepdims=True)
    h = np.where(n > 1e-6, h / np.where(n > 1e-6, n, 1.0), np.array([1.0, 0.0, 0.0]))
    up = np.broadcast_to(np.array([0.0, 0.0, 1.0]), h.shape)
    left = np.cross(up, h)
    return np.stack([h, left, up], axis=-1)


def _to_frame(frame, x):
    return np.einsum("bji,bj->bi", frame, x)


class Simulator:
    """Owns everything a rollout needs that is fixed by the experiment configuration."""

    def __init__(self, cfg: ExperimentConfig, policy: Policy | None = None):
        self.cfg = cfg
        self.cam = cfg.camera.intrinsics()
        self.noise = cfg.camera.noise_model()
        self.dyn = cfg.dynamics.params()
        self.barrier = cfg.barrier.params()
        self.weights = cfg.loss.weights()
        self.policy = policy or Policy(sizes_for(cfg.policy.preset), cfg.policy.use_velocity)
        self.dtype = np.dtype(cfg.train.dtype)

    def init_params(self, rng) -> dict:
        return init_params(rng, self.policy.sizes, scale=self.cfg.policy.init_scale,
                           hover_bias=self.dyn.gravity, dtype=self.dtype)

    # -- helpers shared with the PPO baseline

    def observe(self, tables, lanes_env, p, uhat, goals, v, v_max, prev_fwd, prev_heading, rng):
        """Render and assemble the policy observation for every lane (no gradient)."""
        att = attitude_from_thrust(uhat, goals - p, prev_fwd)
        others = self._other_rows(p, lanes_env)
        table, offsets = lane_tables(tables, others)
        depth = render_batch(table, offsets, p, att.axes(), self.cam)
        image = preprocess(depth, self.cam, self.noise, rng)
        frame = yaw_frames(att.forward, prev_heading)
        vset = make_vset(p, goals, v_max[:, None])
        attitude = np.concatenate([_to_frame(frame, att.forward), _to_frame(frame, att.up)], axis=-1)
        return att, frame, image, vset, attitude, _to_frame(frame, v)

    def _other_rows(self, p: np.ndarray, lanes_env: np.ndarray) -> list:
        m = self.agents_per_env
        if m == 1:
            return [np.zeros((0, 13))] * len(p)
        rows = []
        for lane in range(len(p)):
            e = lanes_env[lane]
            idx = [e * m + j for j in range(m) if e * m + j != lane]
            rows.append(sphere_rows(p[idx], self.cfg.train.agent_radius))
        return rows

    def closest(self, tables, others, p):
        table, offsets = lane_tables(tables, others)
        d, q, _ = kernels.closest(table, offsets, np.ascontiguousarray(p, dtype=np.float64))
        empty = ~np.isfinite(d)
        n_hat = direction_to(q, p, d)
        n_hat[empty] = 0.0
        return np.where(empty, FAR, d), n_hat

    # -- rollout

    def rollout(self, params: dict, scenarios: list[Scenario], setup: LaneSetup, rng=None,
                record_tape: bool = False, replay: list[StepContext] | None = None,
                controller: Callable | None = None, sampler: Callable | None = None,
                goal_radius: float | None = None) -> RolloutBatch:
        """Simulate all lanes for ``setup.steps`` steps.

        ``replay`` reuses recorded gradient-stopped inputs (observations, frames, v_set,
        approach speeds) so only differentiable quantities are recomputed.
        ``controller(k, p, v, goals, v_max) -> u_world`` replaces the policy.
        ``sampler(k, mean_yaw) -> action_yaw`` perturbs the policy output (no tape).
        """
        if not scenarios:
            raise RolloutError("no scenarios")
        m = scenarios[0].agents
        if any(s.agents != m for s in scenarios):
            raise RolloutError("all scenarios must have the same agent count")
        self.agents_per_env = m
        rng = rng if rng is not None else np.random.default_rng(0)
        B = len(scenarios) * m
        if len(setup.v_max) != B:
            raise RolloutError(f"setup has {len(setup.v_max)} lanes, scenarios need {B}")
        tables = [pack(s.world.primitives) for s in scenarios for _ in range(m)]
        lanes_env = np.repeat(np.arange(len(scenarios)), m)
        goals = np.concatenate([s.goals for s in scenarios])
        starts = np.concatenate([s.starts for s in scenarios])
        dt, T = setup.dt, setup.steps
        drag = setup.drag()
        g = self.dyn.gravity
        radius = self.cfg.eval.goal_radius if goal_radius is None else goal_radius

        tape = ad.Tape() if record_tape else None
        if tape is not None:
            pnodes = {k: tape.param(k, v) for k, v in params.items()}
            pol_params = pnodes
        else:
            pnodes = None
            pol_params = params

        p = starts.copy()
        v = np.zeros((B, 3))
        uhat0 = np.tile(np.array([0.0, 0.0, g]), (B, 1))
        act = init_actuator(uhat0, v, dt, self.dyn)
        act = ActuatorState(act.delay, act.uhat, total_accel(uhat0, v, drag, g))
        h = self.policy.initial_state(B, self.dtype)
        prev_fwd = None
        prev_heading = None

        recs = {k: [] for k in ("p", "v", "a", "u", "v_hat")}
        d_list, n_list, vset_list, vobs_list, hidden, contexts, actions = [], [], [], [], [], [], []
        positions = [p.copy()]
        velocities = [v.copy()]
        coll_step = np.full(B, -1)
        goal_step = np.full(B, -1)
        min_d = np.full(B, np.inf)
        agent_d = np.full(B, np.inf)

        for k in range(T):
            if k > 0 and tape is not None:
                p, v = ad.carry(p, "kin"), ad.carry(v, "kin")
                act = ActuatorState([ad.carry(x, "actuator") for x in act.delay],
                                    ad.carry(act.uhat, "actuator"), ad.carry(act.a_prev, "kin"))
            pv, vv = ad.val(p), ad.val(v)
            if replay is None:
                att, frame, image, vset, attitude, vel = self.observe(
                    tables, lanes_env, pv, ad.val(act.uhat), goals, vv, setup.v_max, prev_fwd, prev_heading, rng)
                prev_fwd, prev_heading = att.forward, frame[:, :, 0]
                ctx = StepContext(image, frame, vset, attitude, vel, [])
            else:
                ctx = replay[k]
                frame, vset = ctx.frame, ctx.vset

            if controller is not None:
                u_world = controller(k, pv, vv, goals, setup.v_max)
                vhat = np.zeros((B, 3))
                actions.append(None)
            else:
                obs = Observation(ctx.image, _to_frame(frame, vset), ctx.attitude,
                                  ctx.velocity if self.policy.use_velocity else None)
                u_yaw, vhat, h = self.policy.forward(pol_params, obs, h)
                if sampler is not None:
                    u_yaw = sampler(k, ad.val(u_yaw))
                    actions.append(np.array(u_yaw))
                u_world = ad.rotate(frame, u_yaw)
                hidden.append(np.array(ad.val(h)))
            u_c = soft_clamp_thrust(u_world, self.dyn.max_thrust, self.dyn.clamp_sharpness)
            uhat, act = latency_step(act, u_c, dt, self.dyn.latency)
            a = total_accel(uhat, v, drag, g)
            p, v = integrate(p, v, act.a_prev, a, dt)
            act = ActuatorState(act.delay, uhat, a)

            pv, vv = ad.val(p), ad.val(v)
            if not (np.all(np.isfinite(pv)) and np.all(np.isfinite(vv))):
                bad = int(np.nonzero(~np.all(np.isfinite(np.concatenate([pv, vv], -1)), axis=-1))[0][0])
                raise RolloutError(f"non-finite state in lane {bad} at step {k}")
            if replay is None:
                ctx.others = self._other_rows(pv, lanes_env)
            d, n_hat = self.closest(tables, ctx.others, pv)
            if replay is None:
                ctx.n_hat = n_hat
                ctx.v_c = np.maximum(0.0, np.sum(vv * n_hat, axis=-1))
                contexts.append(ctx)
            else:
                n_hat = ctx.n_hat

            hit = (d < self.barrier.drone_radius) & (coll_step < 0)
            coll_step[hit] = k
            reach = (np.linalg.norm(pv - goals, axis=-1) <= radius) & (goal_step < 0)
            goal_step[reach] = k
            min_d = np.minimum(min_d, d)
            if m > 1:
                for lane in range(B):
                    e = lanes_env[lane]
                    for j in range(m):
                        other = e * m + j
                        if other != lane:
                            agent_d[lane] = min(agent_d[lane], float(np.linalg.norm(pv[lane] - pv[other])))

            recs["p"].append(p)
            recs["v"].append(v)
            recs["a"].append(a)
            recs["u"].append(u_c)
            recs["v_hat"].append(vhat)
            d_list.append(d)
            n_list.append(n_hat)
            vset_list.append(vset)
            vobs_list.append(ctx.velocity)
            positions.append(pv.copy())
            velocities.append(vv.copy())

        records = StepRecord(ad.stack(recs["p"]), ad.stack(recs["v"]), ad.stack(recs["a"]),
                             np.stack(d_list), np.stack(n_list), np.stack(vset_list),
                             u=ad.stack(recs["u"]), v_hat=ad.stack(recs["v_hat"]), v_obs=np.stack(vobs_list),
                             v_c=np.stack([c.v_c for c in (replay if replay is not None else contexts)]))
        contexts = replay if replay is not None else contexts
        return RolloutBatch(records, hidden, contexts, np.stack(positions), np.stack(velocities),
                            coll_step >= 0, coll_step, goal_step, min_d, agent_d, goals, dt, setup, m,
                            tape, pnodes, actions if sampler is not None else None)

    # -- loss

    def losses(self, batch: RolloutBatch) -> dict:
        r = batch.records
        window = self.cfg.train.velocity_window
        lv = velocity_loss(r, batch.dt, window)
        lc = obstacle_loss(r, self.barrier)
        la, lj = smoothness_losses(r, batch.dt)
        w = self.weights
        total = (ad.mul(lv, w.velocity) + ad.mul(lc, w.collision)
                 + ad.mul(la, w.accel) + ad.mul(lj, w.jerk))
        out = {"velocity": lv, "collision": lc, "accel": la, "jerk": lj}
        if self.cfg.loss.aux_velocity > 0 and batch.hidden:
            aux = velocity_estimate_loss(r)
            total = total + ad.mul(aux, self.cfg.loss.aux_velocity)
            out["aux"] = aux
        for name, term in out.items():
            if not np.isfinite(float(ad.val(term))):
                raise RolloutError(f"non-finite {name} loss")
        out["total"] = total
        return out

    def rewards(self, batch: RolloutBatch, penalty: float | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Per-step rewards (T, B) mirroring the loss, and the alive mask.

        A collision adds ``-penalty`` at its step and ends the episode there.
        """
        penalty = self.cfg.ppo.collision_penalty if penalty is None else penalty
        cost = step_costs(batch.records, self.weights, self.barrier, batch.dt, self.cfg.train.velocity_window)
        rew = -cost
        T = rew.shape[0]
        steps = np.arange(T)[:, None]
        cs = batch.collision_step[None, :]
        alive = (cs < 0) | (steps <= cs)
        rew = np.where(steps == cs, rew - penalty, rew)
        return np.where(alive, rew, 0.0), alive


def rollout(params, scenarios, cfg: ExperimentConfig, rng, record_tape: bool = False, **kw) -> RolloutBatch:
    sim = Simulator(cfg)
    setup = kw.pop("setup", None) or sample_setup(cfg, sum(s.agents for s in scenarios), rng)
    return sim.rollout(params, scenarios, setup, rng, record_tape, **kw)


# ----------------------------------------------------------------------------- scripted controllers

def straight_line_controller(gain: float = 2.0, g: float = 9.81, drag: DragParams | None = None):
    """Track v_set directly: u = -gravity + gain*(v_set - v) + drag compensation."""
    drag = drag or DragParams()

    def ctrl(k, p, v, goals, v_max):
        vset = make_vset(p, goals, v_max[:, None])
        s = np.linalg.norm(v, axis=-1, keepdims=True)
        comp = drag.quadratic * s * v + drag.linear * v
        return np.array([0.0, 0.0, g]) + gain * (vset - v) + comp

    return ctrl


def hover_controller(g: float = 9.81, damping: float = 2.0):
    def ctrl(k, p, v, goals, v_max):
        return np.array([0.0, 0.0, g]) - damping * v

    return ctrl


# ----------------------------------------------------------------------------- evaluation

@dataclass
class EvalReport:
    speed: float
    success_rate: float
    mean_speed: float
    peak_speed: float
    collision_rate: float
    reward: float
    losses: dict = field(default_factory=dict)
    episode_success: np.ndarray | None = None
    agent_distance: np.ndarray | None = None

    def row(self) -> dict:
        out = {"speed": self.speed, "success_rate": self.success_rate, "mean_speed": self.mean_speed,
               "peak_speed": self.peak_speed, "collision_rate": self.collision_rate, "reward": self.reward}
        out.update({f"loss_{k}": v for k, v in self.losses.items()})
        return out


def summarize(sim: Simulator, batch: RolloutBatch, speed: float) -> EvalReport:
    m = batch.agents
    lane_ok = batch.success
    episode_ok = lane_ok.reshape(-1, m).all(axis=1)
    speeds = np.linalg.norm(batch.velocities[1:], axis=-1)  # (T, B)
    T = speeds.shape[0]
    end = np.where(batch.goal_step >= 0, batch.goal_step + 1, T)
    mask = np.arange(T)[:, None] < end[None, :]
    mean_speed = float(np.sum(speeds * mask) / max(mask.sum(), 1))
    peak = float(np.max(np.where(mask, speeds, 0.0)))
    rew, _ = sim.rewards(batch)
    losses = {k: float(ad.val(v)) for k, v in sim.losses(batch).items() if k != "total"}
    return EvalReport(float(speed), float(episode_ok.mean()), mean_speed, peak, float(batch.collided.mean()),
                      float(rew.sum(axis=0).mean()), losses, episode_ok,
                      batch.agent_distance.reshape(-1, m).min(axis=1) if m > 1 else None)


def evaluate(params, suite: list[Scenario], cfg: ExperimentConfig, speeds=None, sim: Simulator | None = None,
             controller: Callable | None = None) -> list[EvalReport]:
    """Noise-free, jitter-free rollouts on a fixed scenario suite, one report per target speed."""
    sim = sim or Simulator(cfg)
    saved = sim.noise
    sim.noise = None
    try:
        reports = []
        for speed in (cfg.eval.speeds if speeds is None else speeds):
            lanes = sum(s.agents for s in suite)
            setup = sample_setup(cfg, lanes, None, evaluation=True, v_max=float(speed))
            batch = sim.rollout(params, suite, setup, np.random.default_rng(0), controller=controller)
            reports.append(summarize(sim, batch, speed))
        return reports
    finally:
        sim.noise = saved


# ----------------------------------------------------------------------------- training

class DivergenceGuard:
    """Flags losses far above the running median of recent accepted losses."""

    def __init__(self, factor: float = 1e3, window: int = 100, warmup: int = 5):
        self.factor, self.window, self.warmup = factor, window, warmup
        self.history: list[float] = []

    def check(self, loss: float) -> bool:
        if not np.isfinite(loss):
            return True
        if len(self.history) >= self.warmup and loss > self.factor * float(np.median(self.history)):
            return True
        self.history.append(loss)
        del self.history[:-self.window]
        return False


METRIC_FIELDS = ["iteration", "env_steps", "dt", "lr", "loss", "loss_velocity", "loss_collision",
                 "loss_accel", "loss_jerk", "loss_aux", "grad_norm", "collision_rate", "skipped", "overflow",
                 "eval_success", "eval_mean_speed", "eval_peak_speed", "eval_reward"]


def iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, iteration]))


def train_step(params: dict, opt: AdamW, cfg: ExperimentConfig, rng: np.random.Generator, iteration: int,
               sim: Simulator, guard: DivergenceGuard | None = None):
    """One iteration: fresh scenarios, taped rollout, decayed backward, AdamW update."""
    t = cfg.train
    scenarios = sample_scenarios(cfg, t.envs, rng)
    setup = sample_setup(cfg, t.envs * t.agents, rng)
    batch = sim.rollout(params, scenarios, setup, rng, record_tape=True)
    terms = sim.losses(batch)
    loss = float(ad.val(terms["total"]))
    lr = cosine_lr(iteration, t.iterations, t.lr) if t.schedule == "cosine" else t.lr
    metrics = {"iteration": iteration, "env_steps": (iteration + 1) * setup.steps * len(setup.v_max),
               "dt": setup.dt, "lr": lr, "loss": loss,
               "collision_rate": float(batch.collided.mean()), "skipped": 0, "overflow": 0}
    for k in ("velocity", "collision", "accel", "jerk", "aux"):
        metrics[f"loss_{k}"] = float(ad.val(terms[k])) if k in terms else 0.0
    if guard is not None and guard.check(loss):
        log.warning("iteration %d: loss %.4g exceeds divergence threshold; update skipped", iteration, loss)
        metrics.update(skipped=1, grad_norm=float("nan"))
        return params, metrics
    decay = ad.DecayConfig(t.alpha, setup.dt, t.decay_mode, t.decay_actuator)
    batch.tape.finalize()
    try:
        grads = ad.backward(batch.tape, terms["total"], decay)
        gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    except (ad.AutodiffError, FloatingPointError, OverflowError) as e:
        log.warning("iteration %d: %s", iteration, e)
        gnorm = float("inf")
    metrics["grad_norm"] = gnorm
    if not np.isfinite(gnorm) or gnorm > t.overflow_threshold:
        log.warning("iteration %d: gradient overflow (norm %.4g); update skipped", iteration, gnorm)
        metrics.update(skipped=1, overflow=1)
        return params, metrics
    if t.grad_clip > 0 and gnorm > t.grad_clip:
        grads = {k: g * (t.grad_clip / gnorm) for k, g in grads.items()}
    return opt.step(params, grads, lr), metrics


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


class Trainer:
    """Training loop with metrics CSV, periodic evaluation and checkpoints."""

    def __init__(self, cfg: ExperimentConfig, out_dir=None, params: dict | None = None):
        self.cfg = cfg
        self.sim = Simulator(cfg)
        self.params = params if params is not None else self.sim.init_params(np.random.default_rng(cfg.seed))
        self.sim.policy.check(self.params)
        t = cfg.train
        self.opt = AdamW(t.lr, t.betas, t.adam_eps, t.weight_decay)
        self.guard = DivergenceGuard(t.divergence_factor)
        self.iteration = 0
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.rows: list[dict] = []
        self._suite = None
        self.overflow_count = 0

    def suite(self):
        if self._suite is None:
            self._suite = eval_suite(self.cfg)
        return self._suite

    def run(self, iterations: int | None = None, callback: Callable | None = None) -> list[dict]:
        n = self.cfg.train.iterations if iterations is None else iterations
        writer = fh = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            fh = open(self.out_dir / "metrics.csv", "w", newline="")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(METRIC_FIELDS)
        try:
            for _ in range(n):
                row = self.step()
                if writer is not None:
                    writer.writerow([_fmt(row.get(k, "")) for k in METRIC_FIELDS])
                    fh.flush()
                if callback is not None:
                    callback(row)
        finally:
            if fh is not None:
                fh.close()
        return self.rows

    def step(self) -> dict:
        it = self.iteration
        rng = iteration_rng(self.cfg.seed, it)
        self.params, row = train_step(self.params, self.opt, self.cfg, rng, it, self.sim, self.guard)
        self.overflow_count += row["overflow"]
        every = self.cfg.eval.every
        if every > 0 and (it + 1) % every == 0:
            rep = evaluate(self.params, self.suite(), self.cfg, self.cfg.eval.speeds[:1], self.sim)[0]
            row.update(eval_success=rep.success_rate, eval_mean_speed=rep.mean_speed,
                       eval_peak_speed=rep.peak_speed, eval_reward=rep.reward)
        ck = self.cfg.train.checkpoint_every
        if ck > 0 and self.out_dir is not None and (it + 1) % ck == 0:
            save_checkpoint(self.params, self.out_dir / f"ckpt_{it + 1:06d}.nwt")
        self.rows.append(row)
        self.iteration += 1
        log.info("iter %d loss %.5f grad %.3g coll %.2f", it, row["loss"], row["grad_norm"], row["collision_rate"])
        return row
