"""Group-relative clipped policy optimization for the policy and the generator.

Stage 1 updates the prompt policy with per-token ratios while the generator
and detectors stay frozen. Stage 2 updates the flow generator with per-step
Gaussian transition ratios inside a short stochastic window, routing a
fraction of prompts through the frozen policy.
"""
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, TrainingAbort
from .flowgen import check_window, gaussian_logpdf, run_trajectories, sample_ode_batch
from .numkit import Adam
from .promptpolicy import T_GEN, rollout_tokens
from .rewardcore import REWARD_DIMS, group_advantages, score_batch
from .synthworld import user_prompt_tokens

REWARD_PRESETS = {
    "detector": (1.0, 1.0, 1.0),
    "alignment-only": (0.0, 0.0, 1.0),
    "feature-only": (0.0, 1.0, 0.0),
}


@dataclass
class GrpoConfig:
    group_size: int = 8
    clip_eps: float = 0.2
    kl_beta: float = 0.01
    lr: float = 1e-4
    groups_per_step: int = 32
    steps: int = 230
    window: int = 5
    rewrite_fraction: float = 0.5
    advantage_scope: str = "group"
    inner_epochs: int = 1
    reward_weights: tuple = (1.0, 1.0, 1.0)
    resample_noise: bool = False
    record_wallclock: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise ConfigError("clip_eps must lie in (0, 1)")
        if self.kl_beta < 0:
            raise ConfigError("kl_beta must be >= 0")
        if self.group_size < 2:
            raise ConfigError("group_size must be >= 2")
        if not 0.0 <= self.rewrite_fraction <= 1.0:
            raise ConfigError("rewrite_fraction must lie in [0, 1]")
        if self.advantage_scope not in ("group", "batch"):
            raise ConfigError("advantage_scope must be 'group' or 'batch'")
        if min(self.groups_per_step, self.inner_epochs, self.window) < 1 or self.steps < 0 or self.lr <= 0:
            raise ConfigError("groups_per_step, inner_epochs and window must be >= 1, lr > 0")
        self.reward_weights = tuple(float(w) for w in self.reward_weights)
        if len(self.reward_weights) != len(REWARD_DIMS):
            raise ConfigError("reward_weights needs one weight per reward dimension")

    @classmethod
    def stage1(cls, **kw):
        return cls(**{"lr": 1e-4, "groups_per_step": 32, **kw})

    @classmethod
    def stage2(cls, **kw):
        # larger batch and step size than stage 1: the window signal is noisy at desk scale
        return cls(**{"lr": 3e-4, "groups_per_step": 48, "group_size": 16, "steps": 600, **kw})

    def to_dict(self):
        d = asdict(self)
        d["reward_weights"] = list(self.reward_weights)
        return d


@dataclass
class PolicySnapshot:
    """A parameter copy tagged ``current``, ``old`` or ``ref``."""

    tag: str
    model: object
    step: int = 0


def clipped_surrogate(ratio, adv, eps):
    ratio = np.asarray(ratio, dtype=np.float64)
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv)


def surrogate_active(ratio, adv, eps):
    """True where the unclipped branch is the minimum (gradient flows through ratio)."""
    ratio = np.asarray(ratio, dtype=np.float64)
    return ratio * adv <= np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv


def categorical_kl(logp, logq):
    """KL(p || q) along the last axis for log-prob arrays; -inf entries in p are skipped."""
    p = np.exp(logp)
    live = p > 0
    terms = np.where(live, p * (np.where(live, logp, 0.0) - np.where(live, logq, 0.0)), 0.0)
    return terms.sum(axis=-1)


def kl_token(policy, ref, trajectory, position):
    """Exact KL(pi_theta || pi_ref) at generated position ``position`` (1-based)."""
    if not 1 <= position <= T_GEN:
        raise ConfigError(f"position {position} outside 1..{T_GEN}")
    tok = np.asarray(trajectory.tokens)[None, :]
    a = policy.forward_positions(tok).logp[0, position - 1]
    b = ref.forward_positions(tok).logp[0, position - 1]
    return float(max(categorical_kl(a, b), 0.0))


def gaussian_step_kl(mean, mean_ref, sigma):
    sigma = np.asarray(sigma, dtype=np.float64)
    if (sigma <= 0).any():
        raise ConfigError("sigma is zero: step KL undefined")
    diff = np.asarray(mean) - np.asarray(mean_ref)
    return (diff * diff).sum(axis=-1) / (2.0 * sigma * sigma)


def kl_step(flow, ref, x, step, tokens):
    """Closed-form KL between the two models' transitions leaving ``step`` from state ``x``."""
    x = np.atleast_2d(x)
    tokens = np.atleast_2d(tokens)
    a, _ = flow.step_means(x, [step], tokens)
    b, _ = ref.step_means(x, [step], tokens)
    return float(gaussian_step_kl(a, b, flow.sigma(step))[0])


# -- stage 1 ---------------------------------------------------------------------


def stage1_loss_and_grad(policy, tokens, logp_old, ref_logp, advantages, eps, beta):
    """Loss, grads and diagnostics for a batch of B sequences laid out group-major.

    ``loss = -(1/B) sum_i (1/T) sum_t [surrogate_it - beta * KL_it]``.
    ``ref_logp`` is the reference policy's (B, T_GEN, V) log-prob table.
    """
    out = policy.forward_positions(tokens)
    B = len(tokens)
    adv = np.asarray(advantages, dtype=np.float64)[:, None]
    ratio = np.exp(out.token_logp - logp_old)
    surr = clipped_surrogate(ratio, adv, eps)
    kl = np.where(out.forced, 0.0, categorical_kl(out.logp, ref_logp))
    loss = -float((surr - beta * kl).sum() / (B * T_GEN))
    if not np.isfinite(loss):
        raise TrainingAbort("non-finite stage-1 loss", {"tokens": np.asarray(tokens).tolist()})
    live = ~out.forced
    active = surrogate_active(ratio, adv, eps) & live
    c_tok = -(adv * ratio * active) / (B * T_GEN)
    c_kl = beta * live / (B * T_GEN)
    probs = np.exp(out.logp)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, np.asarray(tokens)[:, 1:, None], 1.0, axis=2)
    seen = probs > 0
    diff = np.where(seen, np.where(seen, out.logp, 0.0) - np.where(seen, ref_logp, 0.0), 0.0)
    g = c_tok[:, :, None] * (onehot - probs) + c_kl[:, :, None] * probs * (diff - kl[:, :, None])
    grads = policy.backward_positions(out.trace, g)
    clipped = live & ((ratio < 1.0 - eps) | (ratio > 1.0 + eps))
    info = {
        "mean_ratio": float(ratio[live].mean()) if live.any() else 1.0,
        "clip_fraction": float(clipped.sum() / max(live.sum(), 1)),
        "mean_kl": float(kl.sum() / max(live.sum(), 1)),
    }
    return loss, grads, info


def _metrics(stage, step, rewards, advantages, loss, info, t0, cfg):
    means = rewards.mean(axis=0)
    return {
        "stage": stage,
        "step": step,
        "mean_reward": {k: float(v) for k, v in zip(REWARD_DIMS, means)},
        "mean_advantage_abs": float(np.abs(advantages).mean()),
        "mean_ratio": info["mean_ratio"],
        "clip_fraction": info["clip_fraction"],
        "mean_kl": info["mean_kl"],
        "loss": loss,
        "wallclock_ms": round((time.perf_counter() - t0) * 1000.0, 3) if cfg.record_wallclock else None,
    }


class _Trainer:
    stage = 0

    def __init__(self, model, cfg, rng):
        self.model = model
        self.cfg = cfg
        self.rng = rng
        self.ref = PolicySnapshot("ref", model.copy().freeze())
        self.opt = Adam(model.params(), cfg.lr)
        self.step_index = 0
        self.history = []

    def train(self, steps=None, metrics_path=None, log=None):
        steps = self.cfg.steps if steps is None else steps
        fh = open(metrics_path, "a") if metrics_path else None
        try:
            for _ in range(steps):
                rec = self.step()
                if fh:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
                    fh.flush()
                if log:
                    log(rec)
        finally:
            if fh:
                fh.close()
        return self.history

    def step(self):
        t0 = time.perf_counter()
        k = self.step_index
        old = PolicySnapshot("old", self.model.copy().freeze(), k)
        batch = self.collect(old.model, self.rng.child("step", k))
        adv = group_advantages(batch["rewards"], self.cfg.group_size, self.cfg.reward_weights, self.cfg.advantage_scope)
        loss, info = None, None
        for _ in range(self.cfg.inner_epochs):
            try:
                loss, grads, info = self.loss_and_grad(batch, adv)
            except TrainingAbort as exc:
                exc.diagnostics.update({"step": k, "rewards": batch["rewards"].tolist(), "advantages": adv.tolist()})
                raise
            self.opt.step(grads)
        rec = _metrics(self.stage, k, batch["rewards"], adv, loss, info, t0, self.cfg)
        self.history.append(rec)
        self.step_index += 1
        return rec


class Stage1Trainer(_Trainer):
    """Optimizes ``policy`` in place; generator and detectors are frozen on entry."""

    stage = 1

    def __init__(self, policy, generator, suite, cfg, rng):
        super().__init__(policy, cfg, rng)
        self.generator = generator.freeze()
        self.suite = suite.freeze()

    def collect(self, old, rng):
        cfg = self.cfg
        G, N = cfg.groups_per_step, cfg.group_size
        d = self.generator.world.dim
        classes, uniforms, x_init = [], [], []
        for g in range(G):
            grng = rng.child("group", g)
            k = int(grng.child("class").integers(0, old.world.num_classes))
            for i in range(N):
                classes.append(k)
                uniforms.append(grng.child("rollout").child("traj", i).uniform(size=T_GEN))
                x_init.append(grng.child("image", i).child("x_T").normal(size=d))
        classes = np.array(classes)
        tokens, logp_old, _ = rollout_tokens(old, classes, np.array(uniforms))
        x = sample_ode_batch(self.generator, tokens, np.array(x_init))
        rewards = score_batch(x, classes, self.suite)
        return {"tokens": tokens, "logp_old": logp_old, "classes": classes, "x": x, "rewards": rewards}

    def loss_and_grad(self, batch, adv):
        ref_logp = self.ref.model.forward_positions(batch["tokens"]).logp
        return stage1_loss_and_grad(
            self.model, batch["tokens"], batch["logp_old"], ref_logp, adv, self.cfg.clip_eps, self.cfg.kl_beta
        )


# -- stage 2 ---------------------------------------------------------------------


@dataclass
class WindowBatch:
    """Flattened window transitions: R trajectories x L steps."""

    x_from: np.ndarray  # (R*L, d) state the transition leaves
    x_to: np.ndarray  # (R*L, d) sampled next state
    steps: np.ndarray  # (R*L,)
    tokens: np.ndarray  # (R*L, T_MAX)
    logp_old: np.ndarray  # (R*L,)
    rows: int = 0
    extra: dict = field(default_factory=dict)


def flatten_window(out, tokens, window_start, window_len):
    states, sampled, logp = out["states"], out["sampled"], out["logp"]
    R = sampled.shape[0]
    ws = np.broadcast_to(np.asarray(window_start), (R,))
    steps = (ws[:, None] - np.arange(window_len)[None, :]).reshape(-1)
    r_idx = np.repeat(np.arange(R), window_len)
    return WindowBatch(
        x_from=states[steps, r_idx],
        x_to=sampled.reshape(R * window_len, -1),
        steps=steps,
        tokens=np.asarray(tokens)[r_idx],
        logp_old=logp.reshape(-1),
        rows=R,
    )


def stage2_loss_and_grad(flow, wb, ref_means, advantages, eps, beta):
    """``loss = -(1/R) sum_i (1/L) sum_t [surrogate_it - beta * KL_it]`` over window steps."""
    L = len(wb.steps) // wb.rows
    sigma = flow.sigma(wb.steps)
    if (sigma <= 0).any():
        raise ConfigError("sigma is zero: step ratios undefined (eta must be > 0)")
    means, trace = flow.step_means(wb.x_from, wb.steps, wb.tokens)
    logp = gaussian_logpdf(wb.x_to, means, sigma)
    adv = np.repeat(np.asarray(advantages, dtype=np.float64), L)
    ratio = np.exp(logp - wb.logp_old)
    surr = clipped_surrogate(ratio, adv, eps)
    kl = gaussian_step_kl(means, ref_means, sigma)
    n = len(wb.steps)
    loss = -float((surr - beta * kl).sum() / n)
    if not np.isfinite(loss):
        raise TrainingAbort("non-finite stage-2 loss", {"steps": wb.steps.tolist()})
    active = surrogate_active(ratio, adv, eps)
    var = (sigma * sigma)[:, None]
    # d logp / d mean = (x_to - mean) / sigma^2 ; d KL / d mean = (mean - ref) / sigma^2
    g_mean = -(adv * ratio * active)[:, None] * (wb.x_to - means) / var + beta * (means - ref_means) / var
    grads = flow.step_means_backward(trace, g_mean / n)
    info = {
        "mean_ratio": float(ratio.mean()),
        "clip_fraction": float(((ratio < 1.0 - eps) | (ratio > 1.0 + eps)).mean()),
        "mean_kl": float(kl.mean()),
    }
    return loss, grads, info


class Stage2Trainer(_Trainer):
    """Optimizes ``flow`` in place; the policy and detectors are frozen on entry."""

    stage = 2

    def __init__(self, flow, policy, suite, cfg, rng):
        if flow.eta <= 0:
            raise ConfigError("stage 2 needs eta > 0: step ratios are undefined for a deterministic sampler")
        if cfg.window >= flow.num_steps:
            raise ConfigError(f"window {cfg.window} must be smaller than num_steps {flow.num_steps}")
        super().__init__(flow, cfg, rng)
        self.policy = policy.freeze()
        self.suite = suite.freeze()

    def route(self, k, grng):
        """Tokens for one group's prompt: rewritten by the policy or passed through."""
        if grng.child("route").uniform() < self.cfg.rewrite_fraction:
            u = grng.child("rewrite").child("traj", 0).uniform(size=T_GEN)[None, :]
            return rollout_tokens(self.policy, np.array([k]), u)[0][0], True
        return user_prompt_tokens(self.model.world, [k])[0], False

    def collect(self, old, rng):
        cfg = self.cfg
        G, N, L = cfg.groups_per_step, cfg.group_size, cfg.window
        d = old.world.dim
        T = old.num_steps
        toks, classes, starts, x_init, noise, rewritten = [], [], [], [], [], []
        for g in range(G):
            grng = rng.child("group", g)
            k = int(grng.child("class").integers(0, old.world.num_classes))
            tk, rw = self.route(k, grng)
            ws = int(grng.child("window").integers(L, T))
            check_window(old, ws, L)
            sde = grng.child("sde")
            shared = sde.child("x_T").normal(size=(1, d))
            for i in range(N):
                toks.append(tk)
                classes.append(k)
                starts.append(ws)
                x_init.append(sde.child("branch", i, "x_T").normal(size=(1, d)) if cfg.resample_noise else shared)
                noise.append(sde.child("branch", i).normal(size=(L, d)))
            rewritten.append(rw)
        tokens = np.array(toks)
        classes = np.array(classes)
        starts = np.array(starts)
        out = run_trajectories(old, np.concatenate(x_init), tokens, starts, L, np.stack(noise))
        wb = flatten_window(out, tokens, starts, L)
        x = out["states"][0]
        rewards = score_batch(x, classes, self.suite)
        return {"window": wb, "rewards": rewards, "x": x, "classes": classes, "rewritten": np.array(rewritten)}

    def loss_and_grad(self, batch, adv):
        wb = batch["window"]
        ref_means, _ = self.ref.model.step_means(wb.x_from, wb.steps, wb.tokens)
        return stage2_loss_and_grad(self.model, wb, ref_means, adv, self.cfg.clip_eps, self.cfg.kl_beta)
