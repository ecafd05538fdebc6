"""Toy "photographs" and "prompts".

Real data is a Gaussian mixture in R^d: ``K`` classes equally spaced on a
ring, ``M`` sub-modes around each class mean, and ``S`` style tokens that set
the covariance. Style 0 ("camera-real") is tight; the others are looser and
anisotropic. A caption is the token sequence ``[CLS_k, SUB_m, STYLE_s, PAD...]``.
"""
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError

T_MAX = 8
D_COND = 16


def default_style_scales(num_styles):
    """(radial std, tangential std) per style."""
    scales = [(0.05, 0.05)]
    loose = [(0.10, 0.20), (0.20, 0.10), (0.15, 0.15)]
    for s in range(1, num_styles):
        scales.append(loose[(s - 1) % len(loose)])
    return tuple(scales)


@dataclass(frozen=True)
class WorldSpec:
    dim: int = 2
    num_classes: int = 8
    sub_modes: int = 3
    style_tokens: int = 4
    ring_radius: float = 4.0
    sub_mode_radius: float = 0.8
    style_scales: tuple = None

    def __post_init__(self):
        if self.dim < 2:
            raise ConfigError("world dim must be >= 2")
        if min(self.num_classes, self.sub_modes, self.style_tokens) < 1:
            raise ConfigError("world needs at least one class, sub-mode and style")
        if self.style_scales is None:
            object.__setattr__(self, "style_scales", default_style_scales(self.style_tokens))
        scales = tuple(tuple(float(v) for v in s) for s in self.style_scales)
        if len(scales) != self.style_tokens or any(len(s) != 2 or min(s) <= 0 for s in scales):
            raise ConfigError("style_scales needs one positive (radial, tangential) pair per style")
        object.__setattr__(self, "style_scales", scales)

    @property
    def vocab_size(self):
        return self.num_classes + self.sub_modes + self.style_tokens + 1

    def to_dict(self):
        d = asdict(self)
        d["style_scales"] = [list(s) for s in self.style_scales]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("style_scales") is not None:
            d["style_scales"] = tuple(tuple(s) for s in d["style_scales"])
        return cls(**d)

    def class_angles(self):
        return 2.0 * np.pi * np.arange(self.num_classes) / self.num_classes

    def class_means(self):
        """(K, d) array."""
        out = np.zeros((self.num_classes, self.dim))
        a = self.class_angles()
        out[:, 0] = self.ring_radius * np.cos(a)
        out[:, 1] = self.ring_radius * np.sin(a)
        return out

    def fine_means(self):
        """(K, M, d) array of sub-mode means."""
        out = np.repeat(self.class_means()[:, None, :], self.sub_modes, axis=1)
        a = self.class_angles()[:, None] + 2.0 * np.pi * np.arange(self.sub_modes)[None, :] / self.sub_modes
        out[:, :, 0] += self.sub_mode_radius * np.cos(a)
        out[:, :, 1] += self.sub_mode_radius * np.sin(a)
        return out


class Vocabulary:
    """Token strings <-> row indices: CLS_*, SUB_*, STYLE_*, then PAD."""

    def __init__(self, world):
        self.world = world
        self.tokens = (
            [f"CLS_{k}" for k in range(world.num_classes)]
            + [f"SUB_{m}" for m in range(world.sub_modes)]
            + [f"STYLE_{s}" for s in range(world.style_tokens)]
            + ["PAD"]
        )
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.pad = len(self.tokens) - 1

    def __len__(self):
        return len(self.tokens)

    def cls(self, k):
        return k

    def sub(self, m):
        return self.world.num_classes + m

    def style(self, s):
        return self.world.num_classes + self.world.sub_modes + s

    def is_cls(self, idx):
        return np.asarray(idx) < self.world.num_classes

    def is_sub(self, idx):
        idx = np.asarray(idx)
        return (idx >= self.world.num_classes) & (idx < self.world.num_classes + self.world.sub_modes)

    def is_style(self, idx):
        idx = np.asarray(idx)
        return (idx >= self.world.num_classes + self.world.sub_modes) & (idx < self.pad)

    def decode(self, indices):
        return [self.tokens[i] for i in indices]

    def encode(self, names):
        try:
            return [self.index[n] for n in names]
        except KeyError as exc:
            raise ConfigError(f"unknown token {exc.args[0]!r}") from None


@dataclass(frozen=True)
class PromptSeq:
    tokens: tuple
    user_class: int

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        object.__setattr__(self, "user_class", int(self.user_class))

    def validate(self, vocab):
        toks = np.array(self.tokens)
        if len(toks) != T_MAX:
            raise ConfigError(f"prompt must have {T_MAX} tokens, got {len(toks)}")
        if toks.min() < 0 or toks.max() >= len(vocab):
            raise ConfigError("token outside vocabulary")
        if toks[0] != self.user_class or vocab.is_cls(toks[1:]).any():
            raise ConfigError("exactly one CLS token, at position 0, matching user_class")
        pad = toks == vocab.pad
        if pad.any() and not pad[np.argmax(pad):].all():
            raise ConfigError("PAD may only appear as a suffix")
        return self


@dataclass
class Sample:
    x: np.ndarray
    condition: PromptSeq
    origin: str = "real"

    def to_json(self, vocab=None):
        out = {"x": [float(v) for v in self.x], "tokens": list(self.condition.tokens), "origin": self.origin}
        if vocab is not None:
            out["token_names"] = vocab.decode(self.condition.tokens)
        return out


@dataclass
class SampleBatch:
    """Column-oriented batch: ``x`` (n, d), ``tokens`` (n, T_MAX), ``classes`` (n,)."""

    x: np.ndarray
    tokens: np.ndarray
    classes: np.ndarray
    origin: str = "real"
    subs: np.ndarray = field(default=None)
    styles: np.ndarray = field(default=None)

    def __len__(self):
        return len(self.x)

    def take(self, idx):
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return SampleBatch(self.x[idx], self.tokens[idx], self.classes[idx], self.origin, pick(self.subs), pick(self.styles))

    def samples(self):
        return [
            Sample(self.x[i].copy(), PromptSeq(tuple(self.tokens[i]), int(self.classes[i])), self.origin)
            for i in range(len(self))
        ]


def caption_tokens(world, classes, subs, styles):
    vocab = Vocabulary(world)
    n = len(classes)
    toks = np.full((n, T_MAX), vocab.pad, dtype=np.int64)
    toks[:, 0] = classes
    toks[:, 1] = world.num_classes + np.asarray(subs)
    toks[:, 2] = world.num_classes + world.sub_modes + np.asarray(styles)
    return toks


def sample_real_batch(spec, n, rng):
    if n < 1:
        raise ConfigError("sample_real needs n >= 1")
    k = rng.integers(0, spec.num_classes, size=n)
    m = rng.integers(0, spec.sub_modes, size=n)
    s = rng.integers(0, spec.style_tokens, size=n)
    eps = rng.normal(size=(n, spec.dim))
    mean = spec.fine_means()[k, m]
    scales = np.array(spec.style_scales)[s]
    angle = spec.class_angles()[k]
    radial = np.stack([np.cos(angle), np.sin(angle)], axis=1)
    tangential = np.stack([-np.sin(angle), np.cos(angle)], axis=1)
    x = mean.copy()
    x[:, :2] += eps[:, :1] * scales[:, :1] * radial + eps[:, 1:2] * scales[:, 1:2] * tangential
    if spec.dim > 2:
        x[:, 2:] += eps[:, 2:] * scales.mean(axis=1, keepdims=True)
    return SampleBatch(x, caption_tokens(spec, k, m, s), k, "real", m, s)


def sample_real(spec, n, rng):
    return sample_real_batch(spec, n, rng).samples()


def user_prompt(world, k):
    if not 0 <= k < world.num_classes:
        raise ConfigError(f"class {k} outside [0, {world.num_classes})")
    pad = world.vocab_size - 1
    return PromptSeq((k,) + (pad,) * (T_MAX - 1), k)


def user_prompt_tokens(world, classes):
    toks = np.full((len(classes), T_MAX), world.vocab_size - 1, dtype=np.int64)
    toks[:, 0] = classes
    return toks


def embed_tokens(table, tokens, pad):
    """Mean of non-PAD embedding rows for each row of ``tokens`` (n, T)."""
    tokens = np.asarray(tokens)
    mask = tokens != pad
    counts = mask.sum(axis=1)
    if (counts == 0).any():
        raise ConfigError("cannot embed an all-PAD sequence")
    acc = np.zeros((len(tokens), table.shape[1]))
    for j in range(tokens.shape[1]):
        acc += table[tokens[:, j]] * mask[:, j, None]
    return acc / counts[:, None]


def embed_tokens_backward(table_shape, tokens, pad, grad_emb):
    """Gradient of ``sum(grad_emb * embed_tokens(...))`` w.r.t. the table."""
    tokens = np.asarray(tokens)
    mask = tokens != pad
    share = grad_emb / mask.sum(axis=1)[:, None]
    g = np.zeros(table_shape)
    for j in range(tokens.shape[1]):
        np.add.at(g, tokens[mask[:, j], j], share[mask[:, j]])
    return g


def embed_condition(vocab, embedding_table, p):
    toks = np.asarray(p.tokens)
    if not all(0 <= t < len(vocab) for t in toks):
        raise ConfigError("token outside vocabulary")
    return embed_tokens(embedding_table, toks[None, :], vocab.pad)[0]


def nearest_fine_mode(world, x):
    """Index pairs (class, sub-mode) of the closest fine-mode mean."""
    means = world.fine_means().reshape(-1, world.dim)
    d2 = ((np.asarray(x)[:, None, :] - means[None]) ** 2).sum(-1)
    flat = d2.argmin(axis=1)
    return flat // world.sub_modes, flat % world.sub_modes
