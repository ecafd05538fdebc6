"""Frozen reward models and evaluators.

* ``SemanticDetector``: logistic head over interpretable statistics of a
  sample (distances to the mode structure, local density).
* ``FeatureDetector``: MLP on raw coordinates, one fake-logit.
* held-out detector: a second ``FeatureDetector`` (wider, other seed, other
  half of the data) that the reward never sees.
* ``AlignmentClassifier``: class posterior given a sample.
"""
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import expit, log_expit, log_softmax, softmax
from scipy.stats import rankdata

from .errors import ConfigError
from .numkit import Adam, Mlp
from .synthworld import WorldSpec

STAT_NAMES_BASE = ("dist_fine_mode", "dist_class_mean", "radius")


def real_token_probability(l_fake, l_real):
    """softmax([l_fake, l_real])[1], stable for any finite gap."""
    return expit(np.asarray(l_real, dtype=np.float64) - np.asarray(l_fake, dtype=np.float64))


def roc_auc(pos_scores, neg_scores):
    """P(score_pos > score_neg) with ties counted half (Mann-Whitney)."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    ranks = rankdata(np.concatenate([pos, neg]))
    return float((ranks[: len(pos)].sum() - len(pos) * (len(pos) + 1) / 2) / (len(pos) * len(neg)))


def _nearest(x, points):
    d2 = ((x[:, None, :] - points[None]) ** 2).sum(-1)
    idx = d2.argmin(axis=1)
    return idx, np.sqrt(d2[np.arange(len(x)), idx])


def _safe_unit(diff, dist):
    return diff / np.maximum(dist, 1e-12)[:, None]


class SemanticDetector:
    """Logits ``[l_fake, l_real] = head((phi(x) - mean) / scale)``."""

    knn = 5

    def __init__(self, world, anchors, stat_mean, stat_scale, head):
        self.world = world
        self.anchors = np.asarray(anchors, dtype=np.float64)
        self.stat_mean = np.asarray(stat_mean, dtype=np.float64)
        self.stat_scale = np.asarray(stat_scale, dtype=np.float64)
        self.head = head
        self._tree = cKDTree(self.anchors)
        if head.layer_sizes != [self.n_stats, 2]:
            raise ConfigError(f"semantic head must be a single {self.n_stats}->2 layer")

    @property
    def stat_names(self):
        return STAT_NAMES_BASE + tuple(f"absdev_{k}" for k in range(self.world.dim)) + ("anchor_knn5",)

    @property
    def n_stats(self):
        return len(STAT_NAMES_BASE) + self.world.dim + 1

    def statistics(self, x, jacobian=False):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n, d = x.shape
        fine = self.world.fine_means().reshape(-1, d)
        i_f, d_f = _nearest(x, fine)
        i_c, d_c = _nearest(x, self.world.class_means())
        radius = np.sqrt((x * x).sum(-1))
        dev = x - fine[i_f]
        dist, idx = self._tree.query(x, k=self.knn)
        d_knn, order = dist[:, -1], idx[:, -1]
        stats = np.column_stack([d_f, d_c, radius, np.abs(dev), d_knn])
        if not jacobian:
            return stats
        jac = np.zeros((n, self.n_stats, d))
        jac[:, 0] = _safe_unit(dev, d_f)
        jac[:, 1] = _safe_unit(x - self.world.class_means()[i_c], d_c)
        jac[:, 2] = _safe_unit(x, radius)
        for k in range(d):
            jac[:, 3 + k, k] = np.sign(dev[:, k])
        jac[:, 3 + d] = _safe_unit(x - self.anchors[order], d_knn)
        return stats, jac

    def features(self, x):
        return (self.statistics(x) - self.stat_mean) / self.stat_scale

    def logits(self, x):
        """(n, 2) array of ``[l_fake, l_real]``."""
        return self.head.forward(self.features(x))

    def reward(self, x):
        lg = self.logits(x)
        return real_token_probability(lg[:, 0], lg[:, 1])

    def reward_input_grad(self, x):
        stats, jac = self.statistics(x, jacobian=True)
        z = (stats - self.stat_mean) / self.stat_scale
        out, acts = self.head.forward_trace(z)
        p = real_token_probability(out[:, 0], out[:, 1])
        dgap = p * (1.0 - p)
        _, g_z = self.head.backward(acts, np.column_stack([-dgap, dgap]))
        return np.einsum("ns,nsd->nd", g_z / self.stat_scale, jac)

    def report(self, x):
        """Per-statistic signed contributions to ``l_fake - l_real`` (n, n_stats).

        Rows sum to the logit gap minus the bias gap.
        """
        w = self.head.weights[0]
        return self.features(x) * (w[:, 0] - w[:, 1])[None, :]

    def bias_gap(self):
        b = self.head.biases[0]
        return float(b[0] - b[1])

    def freeze(self):
        self.head.freeze()
        for a in (self.anchors, self.stat_mean, self.stat_scale):
            a.setflags(write=False)
        return self

    def to_dict(self):
        return {
            "anchors": self.anchors.tolist(),
            "stat_mean": self.stat_mean.tolist(),
            "stat_scale": self.stat_scale.tolist(),
            "head": self.head.to_dict(),
        }

    @classmethod
    def from_dict(cls, world, d):
        return cls(world, np.array(d["anchors"]), np.array(d["stat_mean"]), np.array(d["stat_scale"]), Mlp.from_dict(d["head"]))


class FeatureDetector:
    """P(fake | x) = sigmoid(net(x))."""

    def __init__(self, net):
        if net.n_out != 1:
            raise ConfigError("feature detector outputs a single fake-logit")
        self.net = net

    def fake_logit(self, x):
        return self.net.forward(np.atleast_2d(x))[:, 0]

    def prob_fake(self, x):
        return expit(self.fake_logit(x))

    def prob_real(self, x):
        return expit(-self.fake_logit(x))

    def reward(self, x):
        return 1.0 - self.prob_fake(x)

    def reward_input_grad(self, x):
        out, acts = self.net.forward_trace(np.atleast_2d(x))
        p = expit(out)
        _, g = self.net.backward(acts, -p * (1.0 - p))
        return g

    def freeze(self):
        self.net.freeze()
        return self

    def to_dict(self):
        return {"net": self.net.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(Mlp.from_dict(d["net"]))


class AlignmentClassifier:
    def __init__(self, net, num_classes):
        if net.n_out != num_classes:
            raise ConfigError("alignment classifier must output one logit per class")
        self.net = net
        self.num_classes = num_classes

    def probs(self, x):
        return softmax(self.net.forward(np.atleast_2d(x)), axis=1)

    def reward(self, x, classes):
        classes = np.broadcast_to(np.asarray(classes), (len(np.atleast_2d(x)),))
        if classes.min() < 0 or classes.max() >= self.num_classes:
            raise ConfigError("class index out of range")
        return self.probs(x)[np.arange(len(classes)), classes]

    def reward_input_grad(self, x, classes):
        out, acts = self.net.forward_trace(np.atleast_2d(x))
        p = softmax(out, axis=1)
        n = len(out)
        pk = p[np.arange(n), classes]
        onehot = np.zeros_like(p)
        onehot[np.arange(n), classes] = 1.0
        _, g = self.net.backward(acts, pk[:, None] * (onehot - p))
        return g

    def accuracy(self, x, classes):
        return float((self.probs(x).argmax(axis=1) == np.asarray(classes)).mean())

    def freeze(self):
        self.net.freeze()
        return self

    def to_dict(self):
        return {"net": self.net.to_dict()}

    @classmethod
    def from_dict(cls, d, num_classes):
        return cls(Mlp.from_dict(d["net"]), num_classes)


@dataclass
class DetectorSuite:
    world: WorldSpec
    semantic: SemanticDetector
    feature: FeatureDetector
    heldout: FeatureDetector
    alignment: AlignmentClassifier

    def freeze(self):
        for det in (self.semantic, self.feature, self.heldout, self.alignment):
            det.freeze()
        return self

    def to_dict(self):
        return {
            "kind": "detector_suite",
            "world": self.world.to_dict(),
            "semantic": self.semantic.to_dict(),
            "feature": self.feature.to_dict(),
            "heldout": self.heldout.to_dict(),
            "alignment": self.alignment.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        world = WorldSpec.from_dict(d["world"])
        return cls(
            world,
            SemanticDetector.from_dict(world, d["semantic"]),
            FeatureDetector.from_dict(d["feature"]),
            FeatureDetector.from_dict(d["heldout"]),
            AlignmentClassifier.from_dict(d["alignment"], world.num_classes),
        ).freeze()


# -- reward entry points ---------------------------------------------------------


def semantic_reward(det, x):
    return det.reward(x)


def feature_reward(det, x):
    return det.reward(x)


def alignment_reward(clf, x, user_class):
    return clf.reward(x, user_class)


def semantic_report(det, x):
    """Mean signed contribution per statistic over the rows of ``x``."""
    contrib = det.report(x)
    return list(zip(det.stat_names, contrib.mean(axis=0).tolist(), np.abs(contrib).mean(axis=0).tolist()))


# -- training --------------------------------------------------------------------


@dataclass
class DetectorConfig:
    steps: int = 8000
    batch_size: int = 128
    lr: float = 3e-3
    align_steps: int = 2000
    feature_hidden: tuple = (48, 48)
    heldout_hidden: tuple = (96, 96)
    align_hidden: tuple = (64,)
    n_anchors: int = 512


def binary_bce_and_grad(logit, labels):
    """Mean BCE of sigmoid(logit) against ``labels`` (1 = positive); grad w.r.t. logit."""
    n = len(logit)
    loss = -float((labels * log_expit(logit) + (1 - labels) * log_expit(-logit)).sum() / n)
    return loss, (expit(logit) - labels) / n


def semantic_bce_and_grad(head, z, is_real):
    out, acts = head.forward_trace(z)
    loss, dgap = binary_bce_and_grad(out[:, 1] - out[:, 0], is_real)
    grads, _ = head.backward(acts, np.column_stack([-dgap, dgap]))
    return loss, grads


def feature_bce_and_grad(net, x, is_fake):
    out, acts = net.forward_trace(x)
    loss, dlogit = binary_bce_and_grad(out[:, 0], is_fake)
    grads, _ = net.backward(acts, dlogit[:, None])
    return loss, grads


def alignment_ce_and_grad(net, x, classes):
    out, acts = net.forward_trace(x)
    n = len(x)
    lp = log_softmax(out, axis=1)
    loss = -float(lp[np.arange(n), classes].sum() / n)
    g = softmax(out, axis=1)
    g[np.arange(n), classes] -= 1.0
    grads, _ = net.backward(acts, g / n)
    return loss, grads


def _fit(params, loss_and_grad, n, cfg, rng, steps=None):
    opt = Adam(params, cfg.lr)
    losses = []
    for step in range(cfg.steps if steps is None else steps):
        idx = rng.child("batch", step).integers(0, n, size=cfg.batch_size)
        loss, grads = loss_and_grad(idx)
        opt.step(grads)
        losses.append(loss)
    return losses


def _check_labels(labels):
    if len(np.unique(labels)) < 2:
        raise ConfigError("detector training needs both real and generated samples")


def train_feature_detector(x, is_fake, hidden, cfg, rng):
    _check_labels(is_fake)
    net = Mlp.init([x.shape[1], *hidden, 1], rng.child("init"))
    _fit(net.params(), lambda idx: feature_bce_and_grad(net, x[idx], is_fake[idx]), len(x), cfg, rng.child("fit"))
    return FeatureDetector(net)


def train_semantic_detector(world, x, is_real, anchors, cfg, rng):
    _check_labels(is_real)
    probe = SemanticDetector(world, anchors, np.zeros(3 + world.dim + 1), np.ones(3 + world.dim + 1), Mlp.init([3 + world.dim + 1, 2], rng))
    stats = probe.statistics(x)
    mean = stats.mean(axis=0)
    scale = stats.std(axis=0) + 1e-6
    z = (stats - mean) / scale
    head = Mlp.init([probe.n_stats, 2], rng.child("init"))
    _fit(head.params(), lambda idx: semantic_bce_and_grad(head, z[idx], is_real[idx]), len(x), cfg, rng.child("fit"))
    return SemanticDetector(world, anchors, mean, scale, head)


def train_alignment(world, x, classes, cfg, rng):
    net = Mlp.init([world.dim, *cfg.align_hidden, world.num_classes], rng.child("init"))
    _fit(net.params(), lambda idx: alignment_ce_and_grad(net, x[idx], classes[idx]), len(x), cfg, rng.child("fit"), cfg.align_steps)
    return AlignmentClassifier(net, world.num_classes)


def train_detectors(world, real, generated, cfg, rng):
    """Train and freeze the four evaluators.

    ``real`` and ``generated`` are ``SampleBatch``es. Each is split in halves:
    the reward detectors use the first half, the held-out detector the second.
    """
    if len(real) < 2 or len(generated) < 2:
        raise ConfigError("detector training needs nonempty real and generated sets")
    pr = rng.child("split", "real").permutation(len(real))
    pg = rng.child("split", "generated").permutation(len(generated))
    hr, hg = len(real) // 2, len(generated) // 2
    xa = np.concatenate([real.x[pr[:hr]], generated.x[pg[:hg]]])
    ya_real = np.concatenate([np.ones(hr), np.zeros(hg)])
    xb = np.concatenate([real.x[pr[hr:]], generated.x[pg[hg:]]])
    yb_real = np.concatenate([np.ones(len(real) - hr), np.zeros(len(generated) - hg)])

    n_anchor = min(cfg.n_anchors, hr)
    anchors = real.x[pr[:n_anchor]].copy()
    semantic = train_semantic_detector(world, xa, ya_real, anchors, cfg, rng.child("semantic"))
    feature = train_feature_detector(xa, 1.0 - ya_real, cfg.feature_hidden, cfg, rng.child("feature"))
    heldout = train_feature_detector(xb, 1.0 - yb_real, cfg.heldout_hidden, cfg, rng.child("heldout"))
    alignment = train_alignment(world, real.x, real.classes, cfg, rng.child("alignment"))
    return DetectorSuite(world, semantic, feature, heldout, alignment).freeze()
