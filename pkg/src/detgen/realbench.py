"""Human-free realism benchmark: detector scoring and a judged arena.

The arena samples an unordered pair of entries and a class, draws one sample
from each entry's pool for that class, presents them in random order and asks
a judge which looks more real. Results aggregate into a win-rate matrix with
Wilson intervals.
"""
import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .errors import ConfigError
from .flowgen import sample_ode_batch
from .promptpolicy import T_GEN, rollout_tokens
from .synthworld import sample_real_batch, user_prompt_tokens

TIE_MARGIN = 1e-9
Z95 = float(norm.ppf(0.975))


def wilson_interval(wins, total, z=Z95):
    """Wilson score interval for a binomial proportion."""
    if total <= 0:
        raise ConfigError("Wilson interval needs at least one trial")
    p = wins / total
    denom = 1.0 + z * z / total
    centre = (p + z * z / (2 * total)) / denom
    half = z * np.sqrt(p * (1 - p) / total + z * z / (4 * total * total)) / denom
    return float(centre - half), float(centre + half)


@dataclass
class Entry:
    """A contestant: per-class pools of samples, each (n_c, d)."""

    entry_id: str
    kind: str  # "model" or "real"
    pools: dict
    checkpoint: str = None

    def __post_init__(self):
        if self.kind not in ("model", "real"):
            raise ConfigError(f"entry kind must be 'model' or 'real', got {self.kind!r}")
        for c, pool in self.pools.items():
            if len(pool) < 1:
                raise ConfigError(f"entry {self.entry_id!r} has an empty pool for class {c}")

    @classmethod
    def from_samples(cls, entry_id, x, classes, kind="model", checkpoint=None, num_classes=None):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        classes = np.asarray(classes)
        ks = range(num_classes) if num_classes is not None else np.unique(classes)
        return cls(entry_id, kind, {int(k): x[classes == k] for k in ks}, checkpoint)

    def all_samples(self):
        return np.concatenate([self.pools[k] for k in sorted(self.pools)])

    def all_classes(self):
        return np.concatenate([np.full(len(self.pools[k]), k) for k in sorted(self.pools)])


def real_entry(world, n_per_class, rng, entry_id="real"):
    """Held-out real data: drawn from its own stream, never used for detector training."""
    batch = sample_real_batch(world, n_per_class * world.num_classes * 2, rng)
    pools = {}
    for k in range(world.num_classes):
        pool = batch.x[batch.classes == k][:n_per_class]
        if len(pool) == 0:
            raise ConfigError(f"no real samples drawn for class {k}; increase n_per_class")
        pools[k] = pool
    return Entry(entry_id, "real", pools)


def bench_tokens(world, classes, rng, policy=None, rewrite_fraction=0.0):
    """Prompt tokens for ``classes``: rewritten by ``policy`` with prob ``rewrite_fraction``."""
    classes = np.asarray(classes)
    tokens = user_prompt_tokens(world, classes)
    if policy is not None and rewrite_fraction > 0:
        pick = rng.child("route").uniform(size=len(classes)) < rewrite_fraction
        rewritten = rollout_tokens(policy, classes, rng.child("rewrite").uniform(size=(len(classes), T_GEN)))[0]
        tokens = np.where(pick[:, None], rewritten, tokens)
    return tokens


def model_entry(entry_id, flow, n_per_class, rng, policy=None, rewrite_fraction=0.0, checkpoint=None):
    world = flow.world
    classes = np.repeat(np.arange(world.num_classes), n_per_class)
    tokens = bench_tokens(world, classes, rng.child("prompts"), policy, rewrite_fraction)
    x = sample_ode_batch(flow, tokens, rng.child("x_T").normal(size=(len(classes), world.dim)))
    return Entry.from_samples(entry_id, x, classes, "model", checkpoint, world.num_classes)


def detector_scoring(entry, suite, n_per_class=None):
    """Mean P(real) per detector over the entry's pools (first ``n_per_class`` per class)."""
    if n_per_class is not None and n_per_class < 1:
        raise ConfigError("n_per_class must be >= 1")
    parts = [entry.pools[k][:n_per_class] for k in sorted(entry.pools)]
    x = np.concatenate(parts) if parts else np.zeros((0, 2))
    if len(x) == 0:
        raise ConfigError(f"entry {entry.entry_id!r} has no samples to score")
    return {
        "semantic": float(suite.semantic.reward(x).mean()),
        "feature": float(suite.feature.prob_real(x).mean()),
        "heldout": float(suite.heldout.prob_real(x).mean()),
    }


def judge_heldout(x_a, x_b, detector, rng):
    """Forced choice: ``("A" | "B", margin)`` by held-out P(real), coin flip on near-ties."""
    p = detector.prob_real(np.stack([np.asarray(x_a), np.asarray(x_b)]))
    margin = float(abs(p[0] - p[1]))
    if margin < TIE_MARGIN:
        return ("A" if rng.uniform() < 0.5 else "B"), margin
    return ("A" if p[0] > p[1] else "B"), margin


class HeldoutJudge:
    def __init__(self, detector):
        self.detector = detector

    def __call__(self, x_a, x_b, rng):
        return judge_heldout(x_a, x_b, self.detector, rng)


@dataclass
class Battle:
    battle_id: int
    cls: int
    entry_a: str
    entry_b: str
    winner: str = None  # entry id, None for a judge error
    margin: float = None

    def to_json(self):
        return {
            "battle_id": self.battle_id,
            "class": self.cls,
            "entry_a": self.entry_a,
            "entry_b": self.entry_b,
            "margin": self.margin,
            "winner": self.winner,
        }


class WinMatrix:
    def __init__(self, entries):
        self.entries = list(entries)
        n = len(self.entries)
        self.index = {e: i for i, e in enumerate(self.entries)}
        self.counts = np.zeros((n, n), dtype=np.int64)
        self.totals = np.zeros((n, n), dtype=np.int64)

    def record(self, winner, loser):
        i, j = self.index[winner], self.index[loser]
        self.counts[i, j] += 1
        self.totals[i, j] += 1
        self.totals[j, i] += 1

    def win_rate(self, a, b):
        i, j = self.index[a], self.index[b]
        if self.totals[i, j] == 0:
            return float("nan")
        return float(self.counts[i, j] / self.totals[i, j])

    def interval(self, a, b):
        i, j = self.index[a], self.index[b]
        return wilson_interval(int(self.counts[i, j]), int(self.totals[i, j]))

    def overall(self, a):
        i = self.index[a]
        total = int(self.totals[i].sum())
        return float(self.counts[i].sum() / total) if total else float("nan")

    def rates(self):
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.totals > 0, self.counts / np.maximum(self.totals, 1), np.nan)

    def to_dict(self):
        cells = []
        for a in self.entries:
            for b in self.entries:
                if a != b and self.totals[self.index[a], self.index[b]]:
                    lo, hi = self.interval(a, b)
                    cells.append({"entry": a, "opponent": b, "wins": int(self.counts[self.index[a], self.index[b]]),
                                  "total": int(self.totals[self.index[a], self.index[b]]),
                                  "win_rate": self.win_rate(a, b), "wilson_low": lo, "wilson_high": hi})
        overall = {}
        for a in self.entries:
            i = self.index[a]
            total = int(self.totals[i].sum())
            lo, hi = wilson_interval(int(self.counts[i].sum()), total) if total else (None, None)
            overall[a] = {"win_rate": self.overall(a) if total else None, "wilson_low": lo, "wilson_high": hi, "total": total}
        return {"entries": self.entries, "counts": self.counts.tolist(), "totals": self.totals.tolist(),
                "cells": cells, "overall": overall}

    def write_csv(self, path):
        rates = self.rates()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["entry"] + self.entries)
            for a in self.entries:
                i = self.index[a]
                w.writerow([a] + ["" if np.isnan(v) else repr(float(v)) for v in rates[i]])

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


@dataclass
class ArenaResult:
    matrix: WinMatrix
    battles: list
    judge_errors: int = 0
    meta: dict = field(default_factory=dict)

    def write_log(self, path):
        with open(path, "w") as fh:
            for b in self.battles:
                fh.write(json.dumps(b.to_json(), sort_keys=True) + "\n")


def _schedule(n_entries, num_battles, battles_per_pair, rng):
    pairs = [(i, j) for i in range(n_entries) for j in range(i + 1, n_entries)]
    if battles_per_pair is not None:
        if battles_per_pair < 1:
            raise ConfigError("battles_per_pair must be >= 1")
        return [p for p in pairs for _ in range(battles_per_pair)]
    if num_battles < 1:
        raise ConfigError("num_battles must be >= 1")
    pick = rng.child("pairs").integers(0, len(pairs), size=num_battles)
    return [pairs[k] for k in pick]


def run_arena(entries, judge, rng, num_battles=3000, battles_per_pair=None):
    """Run prompt-matched forced-choice battles; battle ``b`` draws from ``rng.child("battle", b)``."""
    if len(entries) < 2:
        raise ConfigError("the arena needs at least 2 entries")
    ids = [e.entry_id for e in entries]
    if len(set(ids)) != len(ids):
        raise ConfigError("entry ids must be unique")
    classes = sorted(set.intersection(*(set(e.pools) for e in entries)))
    if not classes:
        raise ConfigError("entries share no class")
    matrix = WinMatrix(ids)
    battles, errors = [], 0
    for b, (i, j) in enumerate(_schedule(len(entries), num_battles, battles_per_pair, rng)):
        brng = rng.child("battle", b)
        c = classes[int(brng.child("class").integers(0, len(classes)))]
        battle = None
        for attempt in range(2):
            arng = brng.child("attempt", attempt)
            ea, eb = entries[i], entries[j]
            xa = ea.pools[c][int(arng.child("a").integers(0, len(ea.pools[c])))]
            xb = eb.pools[c][int(arng.child("b").integers(0, len(eb.pools[c])))]
            if arng.child("order").uniform() < 0.5:
                ea, eb, xa, xb = eb, ea, xb, xa
            try:
                verdict, margin = judge(xa, xb, arng.child("judge"))
            except Exception:  # noqa: BLE001 - any judge failure triggers the retry path
                battle = Battle(b, c, ea.entry_id, eb.entry_id)
                continue
            winner, loser = (ea, eb) if verdict == "A" else (eb, ea)
            matrix.record(winner.entry_id, loser.entry_id)
            battle = Battle(b, c, ea.entry_id, eb.entry_id, winner.entry_id, float(margin))
            break
        if battle.winner is None:
            errors += 1
        battles.append(battle)
    return ArenaResult(matrix, battles, errors)


def vs_real_winrate(matrix, entry, real_id="real"):
    """Win rate of ``entry`` against the real entry with its Wilson interval."""
    if real_id not in matrix.index or entry not in matrix.index:
        raise ConfigError("both the entry and the real entry must be in the matrix")
    i, j = matrix.index[entry], matrix.index[real_id]
    if matrix.totals[i, j] == 0:
        raise ConfigError(f"no battles between {entry!r} and {real_id!r}")
    return matrix.win_rate(entry, real_id), matrix.interval(entry, real_id)


def write_leaderboard(path, matrix, scores, real_id="real"):
    """CSV: entry, overall win rate, vs-real win rate, detector scores."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["entry", "overall_win_rate", "vs_real_win_rate", "semantic", "feature", "heldout"])
        for e in matrix.entries:
            vs = ""
            if e != real_id and real_id in matrix.index and matrix.totals[matrix.index[e], matrix.index[real_id]]:
                vs = repr(matrix.win_rate(e, real_id))
            s = scores.get(e, {})
            w.writerow([e, repr(matrix.overall(e)), vs] + [repr(s[k]) if k in s else "" for k in ("semantic", "feature", "heldout")])
