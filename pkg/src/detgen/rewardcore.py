"""Reward vectors and their fusion into group-relative advantages."""
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

REWARD_DIMS = ("sem", "feat", "align")
STD_GUARD = 1e-8


@dataclass(frozen=True)
class RewardVector:
    r_sem: float
    r_feat: float
    r_align: float

    def as_array(self):
        return np.array([self.r_sem, self.r_feat, self.r_align])


@dataclass
class AdvantageGroup:
    rewards: np.ndarray  # (N, 3)
    advantages: np.ndarray  # (N,)
    mean: np.ndarray  # (3,)
    std: np.ndarray  # (3,) population std, guard not included
    weights: np.ndarray  # (3,)


def score_batch(x, classes, suite):
    """(n, 3) raw rewards ``[sem, feat, align]`` for samples ``x`` prompted with ``classes``."""
    x = np.atleast_2d(x)
    return np.column_stack(
        [
            suite.semantic.reward(x),
            suite.feature.reward(x),
            suite.alignment.reward(x, classes),
        ]
    )


def score_sample(sample, user_class, suite):
    r = score_batch(np.asarray(sample.x)[None, :], [user_class], suite)[0]
    return RewardVector(float(r[0]), float(r[1]), float(r[2]))


def fuse_advantages(rewards, weights=(1.0, 1.0, 1.0)):
    """Sum over reward dimensions of the within-group z-score.

    Population std plus a 1e-8 guard. A dimension that is constant across
    the group contributes exactly zero.
    """
    if isinstance(rewards, (list, tuple)) and rewards and isinstance(rewards[0], RewardVector):
        rewards = np.array([r.as_array() for r in rewards])
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 2 or len(r) < 2:
        raise ConfigError("advantage fusion needs a group of at least 2 reward vectors")
    w = np.asarray(weights, dtype=np.float64)
    mean = r.mean(axis=0)
    std = r.std(axis=0)
    z = np.zeros_like(r)
    for k in range(r.shape[1]):
        col = r[:, k]
        if w[k] == 0.0 or (col == col[0]).all():
            continue
        z[:, k] = (col - mean[k]) / (std[k] + STD_GUARD)
    adv = np.zeros(len(r))
    for k in range(r.shape[1]):
        adv += w[k] * z[:, k]
    return AdvantageGroup(r, adv, mean, std, w)


def group_advantages(rewards, group_size, weights=(1.0, 1.0, 1.0), scope="group"):
    """Advantages for ``rewards`` laid out as consecutive groups of ``group_size``.

    ``scope="group"`` normalizes within each group; ``"batch"`` over all rows.
    """
    r = np.asarray(rewards, dtype=np.float64)
    if scope == "batch":
        return fuse_advantages(r, weights).advantages
    if scope != "group":
        raise ConfigError(f"advantage_scope must be 'group' or 'batch', got {scope!r}")
    if len(r) % group_size:
        raise ConfigError("reward count is not a multiple of the group size")
    out = np.empty(len(r))
    for g in range(len(r) // group_size):
        sl = slice(g * group_size, (g + 1) * group_size)
        out[sl] = fuse_advantages(r[sl], weights).advantages
    return out
