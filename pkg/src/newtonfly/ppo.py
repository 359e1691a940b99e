"""Model-free PPO baseline on the same simulator, network trunk and scenarios."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .config import ExperimentConfig
from .optim import AdamW
from .policy import Observation
from .train import (METRIC_FIELDS, Simulator, _fmt, eval_suite, evaluate, iteration_rng, sample_scenarios,
                    sample_setup)

log = logging.getLogger("newtonfly.ppo")

LOG_2PI = math.log(2.0 * math.pi)
PPO_FIELDS = METRIC_FIELDS + ["reward_mean", "entropy", "clip_fraction", "value_loss"]


def compute_gae(rewards, values, gamma: float, lam: float, dones=None, last_value=None,
                normalize: bool = False):
    """Generalized advantage estimation over axis 0.

    ``dones[k]`` ends the episode after step k (no bootstrap past it). ``last_value``
    bootstraps the final step of unfinished sequences. Returns (advantages, returns).
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if r.shape != v.shape:
        raise ValueError("rewards and values must align")
    T = r.shape[0]
    d = np.zeros_like(r) if dones is None else np.asarray(dones, dtype=np.float64)
    nxt = np.zeros_like(r[0]) if last_value is None else np.asarray(last_value, dtype=np.float64)
    adv = np.zeros_like(r)
    acc = np.zeros_like(r[0])
    for k in range(T - 1, -1, -1):
        keep = 1.0 - d[k]
        v_next = v[k + 1] if k + 1 < T else nxt
        delta = r[k] + gamma * v_next * keep - v[k]
        acc = delta + gamma * lam * keep * acc
        adv[k] = acc
    ret = adv + v
    if normalize:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return adv, ret


def clipped_surrogate(ratio, adv: np.ndarray, clip: float):
    """Elementwise min(ratio*A, clip(ratio, 1-eps, 1+eps)*A)."""
    rv = ad.val(ratio)
    a = np.asarray(adv, dtype=rv.dtype)
    unclipped = rv * a
    rc = np.clip(rv, 1.0 - clip, 1.0 + clip)
    clipped = rc * a
    out = np.minimum(unclipped, clipped)
    use_unclipped = unclipped <= clipped
    inside = (rv >= 1.0 - clip) & (rv <= 1.0 + clip)
    grad = np.where(use_unclipped | inside, a, 0.0)
    return ad.record("clipped_surrogate", out, (ratio,), lambda g: (g * grad,))


def gaussian_logp(mean, log_std, action: np.ndarray):
    """Diagonal Gaussian log-density summed over the last axis."""
    z = ad.div(ad.sub(np.asarray(action, dtype=ad.val(mean).dtype), mean), ad.exp(log_std))
    n = np.shape(ad.val(z))[-1]
    return ad.sub(ad.mul(ad.sum(ad.square(z), axis=-1), -0.5), ad.sum(log_std) + 0.5 * LOG_2PI * n)


def gaussian_entropy(log_std):
    n = np.shape(ad.val(log_std))[-1]
    return ad.sum(log_std) + 0.5 * n * (1.0 + LOG_2PI)


def init_agent(sim: Simulator, rng, log_std: float) -> dict:
    params = sim.init_params(rng)
    H = sim.policy.sizes.hidden
    params["value_w"] = np.zeros((H, 1), dtype=sim.dtype)
    params["value_b"] = np.zeros((1,), dtype=sim.dtype)
    params["log_std"] = np.full((3,), log_std, dtype=sim.dtype)
    return params


@dataclass
class PPOBatch:
    contexts: list
    actions: np.ndarray     # (T, B, 3)
    logp: np.ndarray        # (T, B)
    advantages: np.ndarray  # (T, B)
    returns: np.ndarray     # (T, B)
    mask: np.ndarray        # (T, B) bool, steps inside the episode
    rewards: np.ndarray     # (T, B)


def sequence_forward(sim: Simulator, params: dict, contexts: list, lanes=None):
    """Re-run the recurrent policy over stored observations. Returns per-step (mean, value) lists."""
    pol = sim.policy
    sel = slice(None) if lanes is None else lanes
    B = len(contexts[0].image[sel])
    h = pol.initial_state(B, sim.dtype)
    means, values = [], []
    for ctx in contexts:
        frame = ctx.frame[sel]
        obs = Observation(ctx.image[sel], np.einsum("bji,bj->bi", frame, ctx.vset[sel]), ctx.attitude[sel],
                          ctx.velocity[sel] if pol.use_velocity else None)
        mean, _, h = pol.forward(params, obs, h)
        means.append(mean)
        values.append(ad.reshape(ad.affine(h, params["value_w"], params["value_b"]), (B,)))
    return means, values


def ppo_loss(sim: Simulator, params: dict, batch: PPOBatch, cfg, lanes=None):
    """Returns (loss node, stats). Advantages are used as given."""
    sel = slice(None) if lanes is None else lanes
    means, values = sequence_forward(sim, params, batch.contexts, lanes)
    mean = ad.stack(means)
    value = ad.stack(values)
    mask = batch.mask[:, sel].astype(sim.dtype)
    count = max(float(mask.sum()), 1.0)
    logp = gaussian_logp(mean, params["log_std"], batch.actions[:, sel])
    ratio = ad.exp(ad.sub(logp, batch.logp[:, sel].astype(sim.dtype)))
    rv = ad.val(ratio)
    if not np.all(np.isfinite(rv)):
        return None, {"nan": True}
    surr = clipped_surrogate(ratio, batch.advantages[:, sel], cfg.clip)
    policy_loss = ad.mul(ad.sum(ad.mul(surr, mask)), -1.0 / count)
    err = ad.sub(value, batch.returns[:, sel].astype(sim.dtype))
    value_loss = ad.mul(ad.sum(ad.mul(ad.square(err), mask)), 0.5 / count)
    ent = gaussian_entropy(params["log_std"])
    loss = policy_loss + ad.mul(value_loss, cfg.value_coef) - ad.mul(ent, cfg.entropy_coef)
    clip_frac = float(np.sum((np.abs(rv - 1.0) > cfg.clip) * mask) / count)
    return loss, {"policy_loss": float(ad.val(policy_loss)), "value_loss": float(ad.val(value_loss)),
                  "entropy": float(ad.val(ent)), "clip_fraction": clip_frac, "nan": False}


def ppo_update(sim: Simulator, params: dict, batch: PPOBatch, cfg, opt: AdamW, lr: float | None = None):
    """Clipped-surrogate epochs over lane-chunk minibatches. Returns (params', stats)."""
    T, B = batch.advantages.shape
    per = max(1, min(B, cfg.minibatch // max(T, 1)))
    chunks = [np.arange(i, min(i + per, B)) for i in range(0, B, per)]
    stats = {}
    for _epoch in range(cfg.epochs):
        for lanes in chunks:
            tape = ad.Tape()
            nodes = {k: tape.param(k, v) for k, v in params.items()}
            loss, st = ppo_loss(sim, nodes, batch, cfg, None if len(lanes) == B else lanes)
            if loss is None:
                log.warning("non-finite probability ratio; minibatch skipped")
                continue
            tape.finalize()
            grads = ad.backward(tape, loss)
            gn = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if cfg.max_grad_norm > 0 and gn > cfg.max_grad_norm:
                grads = {k: g * (cfg.max_grad_norm / gn) for k, g in grads.items()}
            params = opt.step(params, grads, lr)
            stats = dict(st, grad_norm=gn)
    return params, stats


class PPOTrainer:
    """Collect stochastic rollouts, estimate advantages, update; logs the shared metrics schema."""

    def __init__(self, cfg: ExperimentConfig, out_dir=None, params: dict | None = None):
        self.cfg = cfg
        self.sim = Simulator(cfg)
        rng = np.random.default_rng(cfg.seed)
        self.params = params if params is not None else init_agent(self.sim, rng, math.log(cfg.ppo.init_std))
        if "value_w" not in self.params:
            H = self.sim.policy.sizes.hidden
            self.params = dict(self.params, value_w=np.zeros((H, 1), self.sim.dtype),
                               value_b=np.zeros((1,), self.sim.dtype),
                               log_std=np.full((3,), math.log(cfg.ppo.init_std), self.sim.dtype))
        p = cfg.ppo
        self.opt = AdamW(p.lr, cfg.train.betas, cfg.train.adam_eps, p.weight_decay)
        self.iteration = 0
        self.env_steps = 0
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.rows: list[dict] = []
        self._suite = None

    def policy_params(self) -> dict:
        return {k: v for k, v in self.params.items() if k not in ("value_w", "value_b", "log_std")}

    def suite(self):
        if self._suite is None:
            self._suite = eval_suite(self.cfg)
        return self._suite

    def collect(self, rng: np.random.Generator) -> tuple[PPOBatch, object]:
        cfg, sim = self.cfg, self.sim
        envs = cfg.ppo.envs
        scenarios = sample_scenarios(cfg, envs, rng)
        setup = sample_setup(cfg, envs * cfg.train.agents, rng)
        std = np.exp(self.params["log_std"].astype(np.float64))
        noise_rng = np.random.default_rng(rng.integers(2**63))

        def sampler(k, mean):
            return mean + std * noise_rng.standard_normal(mean.shape)

        batch = sim.rollout(self.params, scenarios, setup, rng, sampler=sampler)
        actions = np.stack(batch.actions)
        means, values = sequence_forward(sim, self.params, batch.contexts)
        mean = np.stack([np.asarray(m, dtype=np.float64) for m in means])
        value = np.stack([np.asarray(v, dtype=np.float64) for v in values])
        logp = gaussian_logp(mean, self.params["log_std"].astype(np.float64), actions)
        rewards, alive = sim.rewards(batch)
        T = rewards.shape[0]
        dones = (np.arange(T)[:, None] == batch.collision_step[None, :]).astype(float)
        adv, ret = compute_gae(rewards, value, cfg.ppo.gamma, cfg.ppo.gae_lambda, dones, value[-1])
        m = alive
        adv = np.where(m, (adv - adv[m].mean()) / (adv[m].std() + 1e-8), 0.0)
        return PPOBatch(batch.contexts, actions, logp, adv, ret, m, rewards), batch

    def step(self) -> dict:
        cfg = self.cfg
        it = self.iteration
        rng = iteration_rng(cfg.seed, it)
        batch, roll = self.collect(rng)
        self.env_steps += int(batch.mask.sum())
        self.params, st = ppo_update(self.sim, self.params, batch, cfg.ppo, self.opt)
        ep_reward = float(batch.rewards.sum(axis=0).mean())
        row = {"iteration": it, "env_steps": self.env_steps, "dt": roll.dt, "lr": cfg.ppo.lr,
               "loss": st.get("policy_loss", float("nan")), "grad_norm": st.get("grad_norm", float("nan")),
               "collision_rate": float(roll.collided.mean()), "skipped": 0, "overflow": 0,
               "reward_mean": ep_reward, "entropy": st.get("entropy", float("nan")),
               "clip_fraction": st.get("clip_fraction", float("nan")),
               "value_loss": st.get("value_loss", float("nan"))}
        every = cfg.eval.every
        if every > 0 and (it + 1) % every == 0:
            rep = evaluate(self.policy_params(), self.suite(), cfg, cfg.eval.speeds[:1], self.sim)[0]
            row.update(eval_success=rep.success_rate, eval_mean_speed=rep.mean_speed,
                       eval_peak_speed=rep.peak_speed, eval_reward=rep.reward)
        self.rows.append(row)
        self.iteration += 1
        log.info("ppo iter %d reward %.3f", it, ep_reward)
        return row

    def run(self, iterations: int | None = None, callback: Callable | None = None,
            max_env_steps: int | None = None) -> list[dict]:
        n = self.cfg.ppo.iterations if iterations is None else iterations
        fh = writer = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            fh = open(self.out_dir / "metrics.csv", "w", newline="")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(PPO_FIELDS)
        try:
            for _ in range(n):
                row = self.step()
                if writer is not None:
                    writer.writerow([_fmt(row.get(k, "")) for k in PPO_FIELDS])
                    fh.flush()
                if callback is not None:
                    callback(row)
                if max_env_steps is not None and self.env_steps >= max_env_steps:
                    break
        finally:
            if fh is not None:
                fh.close()
        return self.rows
