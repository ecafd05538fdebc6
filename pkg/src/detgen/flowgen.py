"""Conditional rectified flow.

Time runs from t=1 (noise) to t=0 (data). ``x_t = t*x1 + (1-t)*x0`` and the
net regresses the velocity ``x1 - x0``. Step index ``s`` in [0, T] sits at
time ``s/T``; an Euler step moves ``x_s -> x_{s-1} = x_s - dt*v(x_s, s/T)``.

The SDE sampler makes a window of consecutive steps stochastic:
``x_{s-1} ~ N(euler mean, sigma_s^2 I)`` with ``sigma_s = eta*sqrt(dt*s/T)``.
sigma does not depend on the parameters, so log-density ratios between two
parameter sets only see the means.
"""
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, TrainingAbort
from .numkit import Adam, Mlp
from .synthworld import (
    D_COND,
    PromptSeq,
    Sample,
    Vocabulary,
    WorldSpec,
    embed_tokens,
    embed_tokens_backward,
    user_prompt_tokens,
)


class FlowModel:
    def __init__(self, world, net, embedding, num_steps=20, eta=0.7):
        if num_steps < 2:
            raise ConfigError("num_steps must be >= 2")
        if eta < 0:
            raise ConfigError("eta must be >= 0")
        if embedding.shape[0] != world.vocab_size:
            raise ConfigError("embedding table rows must equal vocabulary size")
        if net.n_in != world.dim + 1 + embedding.shape[1] or net.n_out != world.dim:
            raise ConfigError("velocity net must map (x, t, cond) -> x")
        self.world = world
        self.vocab = Vocabulary(world)
        self.net = net
        self.embedding = np.ascontiguousarray(embedding, dtype=np.float64)
        self.num_steps = int(num_steps)
        self.eta = float(eta)

    @classmethod
    def init(cls, world, rng, hidden=(64, 64, 64), d_cond=D_COND, num_steps=20, eta=0.7):
        net = Mlp.init([world.dim + 1 + d_cond, *hidden, world.dim], rng.child("net"))
        emb = rng.child("embedding").normal(size=(world.vocab_size, d_cond))
        return cls(world, net, emb, num_steps, eta)

    @property
    def dt(self):
        return 1.0 / self.num_steps

    def sigma(self, s):
        """Per-coordinate noise std of the transition leaving step ``s``."""
        return self.eta * np.sqrt(self.dt * (np.asarray(s, dtype=np.float64) / self.num_steps))

    def params(self):
        out = {f"net.{k}": v for k, v in self.net.params().items()}
        out["embedding"] = self.embedding
        return out

    def copy(self):
        return FlowModel(self.world, self.net.copy(), self.embedding.copy(), self.num_steps, self.eta)

    def freeze(self):
        self.net.freeze()
        self.embedding.setflags(write=False)
        return self

    def cond_embed(self, tokens):
        return embed_tokens(self.embedding, np.atleast_2d(tokens), self.vocab.pad)

    def _inputs(self, x, t, cond):
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (len(x), 1))
        return np.concatenate([x, t, cond], axis=1)

    def velocity(self, x, t, cond):
        return self.net.forward(self._inputs(x, t, cond))

    def step_means(self, x, steps, tokens):
        """Euler means for rows at step indices ``steps``; returns (means, trace)."""
        steps = np.asarray(steps)
        cond = self.cond_embed(tokens)
        v, acts = self.net.forward_trace(self._inputs(x, steps / self.num_steps, cond))
        return x - self.dt * v, (acts, np.asarray(tokens))

    def step_means_backward(self, trace, grad_mean):
        acts, tokens = trace
        grads, g_in = self.net.backward(acts, -self.dt * grad_mean)
        out = {f"net.{k}": v for k, v in grads.items()}
        d = self.world.dim
        out["embedding"] = embed_tokens_backward(self.embedding.shape, tokens, self.vocab.pad, g_in[:, d + 1 :])
        return out

    def to_dict(self):
        return {
            "kind": "flow_model",
            "world": self.world.to_dict(),
            "net": self.net.to_dict(),
            "embedding_table": self.embedding.tolist(),
            "T_steps": self.num_steps,
            "eta": self.eta,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            WorldSpec.from_dict(d["world"]),
            Mlp.from_dict(d["net"]),
            np.array(d["embedding_table"], dtype=np.float64),
            d["T_steps"],
            d["eta"],
        )


# -- flow-matching pretraining ------------------------------------------------


def fm_loss_and_grad(model, x0, tokens, x1, t):
    """Mean over the batch of ||v(x_t, t, c) - (x1 - x0)||^2, and its gradient."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    xt = t * x1 + (1.0 - t) * x0
    cond = model.cond_embed(tokens)
    v, acts = model.net.forward_trace(model._inputs(xt, t, cond))
    resid = v - (x1 - x0)
    n = len(x0)
    loss = float((resid * resid).sum() / n)
    grads, g_in = model.net.backward(acts, 2.0 * resid / n)
    out = {f"net.{k}": g for k, g in grads.items()}
    out["embedding"] = embed_tokens_backward(model.embedding.shape, tokens, model.vocab.pad, g_in[:, model.world.dim + 1 :])
    return loss, out


def fm_loss(model, x0, tokens, x1, t):
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    v = model.velocity(t * x1 + (1.0 - t) * x0, t, model.cond_embed(tokens))
    resid = v - (x1 - x0)
    return float((resid * resid).sum() / len(x0))


def fm_pretrain(model, data, epochs, rng, batch_size=256, lr=1e-3, caption_dropout=0.0, log=None):
    """Flow-matching cold start. Mutates ``model``; returns per-epoch mean losses.

    ``caption_dropout`` replaces that fraction of captions by the bare user
    prompt so short prompts stay in-distribution.
    """
    if len(data) == 0:
        raise ConfigError("fm_pretrain needs real data")
    opt = Adam(model.params(), lr)
    curve = []
    n = len(data)
    for epoch in range(epochs):
        erng = rng.child("epoch", epoch)
        order = erng.permutation(n)
        total, count = 0.0, 0
        for b, start in enumerate(range(0, n, batch_size)):
            idx = order[start : start + batch_size]
            brng = erng.child("batch", b)
            x0 = data.x[idx]
            tokens = data.tokens[idx].copy()
            if caption_dropout > 0:
                drop = brng.uniform(size=len(idx)) < caption_dropout
                tokens[drop] = user_prompt_tokens(model.world, data.classes[idx][drop])
            x1 = brng.normal(size=x0.shape)
            t = brng.uniform(size=len(idx))
            loss, grads = fm_loss_and_grad(model, x0, tokens, x1, t)
            if not math.isfinite(loss):
                raise TrainingAbort(f"non-finite flow-matching loss at epoch {epoch} batch {b}", {"epoch": epoch, "batch": b})
            opt.step(grads)
            total += loss * len(idx)
            count += len(idx)
        curve.append(total / count)
        if log is not None:
            log(epoch, curve[-1])
    return curve


# -- sampling ------------------------------------------------------------------


def gaussian_logpdf(x, mean, sigma):
    """Isotropic Gaussian log-density, rows of ``x`` against rows of ``mean``."""
    sigma = np.asarray(sigma, dtype=np.float64)
    d = x.shape[-1]
    r = x - mean
    sq = np.zeros(x.shape[:-1])
    for k in range(d):
        sq += r[..., k] * r[..., k]
    var = sigma * sigma
    return -0.5 * d * np.log(2.0 * np.pi * var) - sq / (2.0 * var)


def run_trajectories(model, x_init, tokens, window_start=None, window_len=0, noise=None):
    """Integrate rows from step T to 0.

    Rows whose window covers step ``s`` (``window_start - window_len < s <= window_start``)
    take a Gaussian step using ``noise[row, window_start - s]``. Returns a dict with
    ``states`` (T+1, R, d), and for the window ``means``/``sampled`` (R, L, d) and
    ``logp`` (R, L).
    """
    T = model.num_steps
    x = np.array(x_init, dtype=np.float64)
    R, d = x.shape
    cond = model.cond_embed(tokens)
    states = np.empty((T + 1, R, d))
    states[T] = x
    L = int(window_len)
    means_w = np.zeros((R, L, d))
    sampled_w = np.zeros((R, L, d))
    logp_w = np.zeros((R, L))
    if L:
        window_start = np.broadcast_to(np.asarray(window_start), (R,))
    for s in range(T, 0, -1):
        v = model.velocity(x, s / T, cond)
        mean = x - model.dt * v
        if L:
            j = window_start - s
            rows = np.nonzero((j >= 0) & (j < L))[0]
            if len(rows):
                jr = j[rows]
                sig = model.sigma(s)
                nxt = mean.copy()
                nxt[rows] = mean[rows] + sig * noise[rows, jr]
                means_w[rows, jr] = mean[rows]
                sampled_w[rows, jr] = nxt[rows]
                if sig > 0:
                    logp_w[rows, jr] = gaussian_logpdf(nxt[rows], mean[rows], sig)
                mean = nxt
        if not np.isfinite(mean).all():
            raise TrainingAbort(f"non-finite state at step {s - 1}", {"step": s - 1})
        x = mean
        states[s - 1] = x
    return {"states": states, "means": means_w, "sampled": sampled_w, "logp": logp_w}


def _tokens_of(cond):
    return np.asarray(cond.tokens, dtype=np.int64)[None, :]


def sample_ode(model, cond, rng):
    """Deterministic Euler sample; returns (Sample, states (T+1, d))."""
    x_T = rng.child("x_T").normal(size=(1, model.world.dim))
    out = run_trajectories(model, x_T, _tokens_of(cond))
    states = out["states"][:, 0]
    return Sample(states[0].copy(), cond, "generated"), states


def sample_ode_batch(model, tokens, x_init):
    return run_trajectories(model, x_init, tokens)["states"][0]


@dataclass
class TrajectoryRecord:
    states: np.ndarray  # (T+1, d), states[s] is x at time s/T
    window_start: int
    window_len: int
    means_old: np.ndarray  # (L, d)
    sampled: np.ndarray  # (L, d), sampled[j] == states[window_start - j - 1]
    logp_old: np.ndarray  # (L,)
    condition: PromptSeq
    sample: Sample

    def window_steps(self):
        """Step indices ``s`` whose outgoing transition is stochastic."""
        return [self.window_start - j for j in range(self.window_len)]


def check_window(model, window_start, window_len):
    if window_len < 1 or window_start - window_len < 0 or window_start > model.num_steps:
        raise ConfigError(
            f"window (start={window_start}, len={window_len}) does not fit in {model.num_steps} steps"
        )


def sample_sde_window(model, cond, window_start, window_len, n_branches, rng, resample_noise=False):
    """N branches sharing the deterministic prefix down to ``window_start``."""
    check_window(model, window_start, window_len)
    if n_branches < 2:
        raise ConfigError("need at least 2 branches")
    d = model.world.dim
    if resample_noise:
        x_T = np.concatenate([rng.child("branch", i, "x_T").normal(size=(1, d)) for i in range(n_branches)])
    else:
        x_T = np.repeat(rng.child("x_T").normal(size=(1, d)), n_branches, axis=0)
    noise = np.stack([rng.child("branch", i).normal(size=(window_len, d)) for i in range(n_branches)])
    tokens = np.repeat(_tokens_of(cond), n_branches, axis=0)
    out = run_trajectories(model, x_T, tokens, window_start, window_len, noise)
    records = []
    for i in range(n_branches):
        states = out["states"][:, i]
        records.append(
            TrajectoryRecord(
                states.copy(),
                int(window_start),
                int(window_len),
                out["means"][i].copy(),
                out["sampled"][i].copy(),
                out["logp"][i].copy(),
                cond,
                Sample(states[0].copy(), cond, "generated"),
            )
        )
    return records


def transition_logdensity(model, record, j, cond=None):
    """log p_model(x_{s-1} | x_s, c) for the j-th window transition of ``record``."""
    if not 0 <= j < record.window_len:
        raise ConfigError(f"step {j} outside the stochastic window")
    s = record.window_start - j
    sig = float(model.sigma(s))
    if sig == 0.0:
        raise ConfigError("sigma is zero: transition density undefined (eta must be > 0)")
    cond = record.condition if cond is None else cond
    mean, _ = model.step_means(record.states[s][None, :], [s], _tokens_of(cond))
    return float(gaussian_logpdf(record.sampled[j][None, :], mean, sig)[0])


def dump_window_steps(records, path, model_id="generator"):
    with open(path, "w") as fh:
        for b, rec in enumerate(records):
            for j in range(rec.window_len):
                row = {
                    "branch": b,
                    "model": model_id,
                    "step": rec.window_start - j,
                    "mean": rec.means_old[j].tolist(),
                    "sampled": rec.sampled[j].tolist(),
                    "logp_old": float(rec.logp_old[j]),
                    "tokens": list(rec.condition.tokens),
                }
                fh.write(json.dumps(row) + "\n")
