"""Autoregressive prompt-enrichment policy.

Position 0 always holds the user's CLS token. Positions 1..T_MAX-1 are
sampled from ``softmax(logits / temperature)`` restricted to SUB, STYLE and
PAD tokens; once PAD is emitted every later position is PAD with
probability one (a "forced" position, log-prob 0).

The context for position ``p`` is ``[mean embedding of non-PAD tokens before p,
one-hot(p - 1), one-hot(user class)]``.
"""
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .numkit import Adam, Mlp
from .synthworld import T_MAX, PromptSeq, Vocabulary, WorldSpec, caption_tokens

T_GEN = T_MAX - 1


def masked_log_softmax(z, allowed):
    """log-softmax over the ``allowed`` entries of the last axis; others are -inf."""
    zm = np.where(allowed, z, -np.inf)
    m = zm.max(axis=-1, keepdims=True)
    e = np.exp(zm - m)
    return zm - m - np.log(e.sum(axis=-1, keepdims=True))


@dataclass
class PositionOutputs:
    logp: np.ndarray  # (B, T_GEN, V), -inf on disallowed tokens
    token_logp: np.ndarray  # (B, T_GEN), 0 at forced positions
    forced: np.ndarray  # (B, T_GEN) bool
    trace: tuple


class PromptPolicy:
    def __init__(self, world, embedding, encoder, temperature=1.0):
        self.world = world
        self.vocab = Vocabulary(world)
        self.embedding = np.ascontiguousarray(embedding, dtype=np.float64)
        self.encoder = encoder
        self.temperature = float(temperature)
        if self.embedding.shape[0] != len(self.vocab):
            raise ConfigError("policy embedding rows must equal vocabulary size")
        if encoder.n_in != self.embedding.shape[1] + T_GEN + world.num_classes or encoder.n_out != len(self.vocab):
            raise ConfigError("policy encoder shape does not match vocabulary/context size")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        self.allowed = ~self.vocab.is_cls(np.arange(len(self.vocab)))

    @classmethod
    def init(cls, world, rng, emb_dim=16, hidden=(64,), temperature=1.0):
        v = world.vocab_size
        emb = 0.5 * rng.child("embedding").normal(size=(v, emb_dim))
        enc = Mlp.init([emb_dim + T_GEN + world.num_classes, *hidden, v], rng.child("encoder"))
        return cls(world, emb, enc, temperature)

    def params(self):
        out = {"embedding": self.embedding}
        out.update({f"enc.{k}": v for k, v in self.encoder.params().items()})
        return out

    def copy(self):
        return PromptPolicy(self.world, self.embedding.copy(), self.encoder.copy(), self.temperature)

    def freeze(self):
        self.embedding.setflags(write=False)
        self.encoder.freeze()
        return self

    def _context(self, prefix_sum, prefix_count, positions, classes):
        n = len(classes)
        pos = np.zeros((n, T_GEN))
        pos[np.arange(n), positions - 1] = 1.0
        cls = np.zeros((n, self.world.num_classes))
        cls[np.arange(n), classes] = 1.0
        return np.concatenate([prefix_sum / prefix_count[:, None], pos, cls], axis=1)

    def _scale(self, logits):
        return logits / self.temperature if self.temperature > 0 else logits

    def forward_positions(self, tokens):
        """Teacher-forced log-probs for every generated position of ``tokens`` (B, T_MAX)."""
        tokens = np.asarray(tokens, dtype=np.int64)
        B = len(tokens)
        pad = self.vocab.pad
        nonpad = tokens != pad
        acc = np.zeros((B, self.embedding.shape[1]))
        count = np.zeros(B)
        feats, forced = [], np.zeros((B, T_GEN), dtype=bool)
        for p in range(1, T_MAX):
            acc = acc + self.embedding[tokens[:, p - 1]] * nonpad[:, p - 1, None]
            count = count + nonpad[:, p - 1]
            feats.append(self._context(acc, count, np.full(B, p), tokens[:, 0]))
            forced[:, p - 1] = ~nonpad[:, p - 1]
        # rows ordered (b, p)
        x = np.stack(feats, axis=1).reshape(B * T_GEN, -1)
        raw, acts = self.encoder.forward_trace(x)
        z = self._scale(raw).reshape(B, T_GEN, -1)
        logp = masked_log_softmax(z, self.allowed)
        gen = tokens[:, 1:]
        token_logp = np.take_along_axis(logp, gen[:, :, None], axis=2)[:, :, 0]
        token_logp = np.where(forced, 0.0, token_logp)
        if not np.isfinite(token_logp).all():
            raise ConfigError("sequence contains a token the policy cannot emit")
        return PositionOutputs(logp, token_logp, forced, (acts, tokens, count_table(tokens, pad)))

    def backward_positions(self, trace, grad_z):
        """Gradients given d loss / d (logits / temperature), shape (B, T_GEN, V)."""
        acts, tokens, counts = trace
        B = len(tokens)
        g = np.where(self.allowed, grad_z, 0.0)
        if self.temperature > 0:
            g = g / self.temperature
        grads, g_in = self.encoder.backward(acts, g.reshape(B * T_GEN, -1))
        e = self.embedding.shape[1]
        g_mean = g_in[:, :e].reshape(B, T_GEN, e)
        g_emb = np.zeros_like(self.embedding)
        pad = self.vocab.pad
        for p in range(1, T_MAX):
            share = g_mean[:, p - 1] / counts[:, p - 1, None]
            for j in range(p):
                keep = tokens[:, j] != pad
                np.add.at(g_emb, tokens[keep, j], share[keep])
        out = {"embedding": g_emb}
        out.update({f"enc.{k}": v for k, v in grads.items()})
        return out

    def step_logp(self, prefix_sum, prefix_count, position, classes):
        x = self._context(prefix_sum, prefix_count, np.full(len(classes), position), classes)
        z = self._scale(self.encoder.forward(x))
        return masked_log_softmax(z, self.allowed), z

    def to_dict(self):
        return {
            "kind": "prompt_policy",
            "world": self.world.to_dict(),
            "vocabulary": list(self.vocab.tokens),
            "temperature": self.temperature,
            "embedding": self.embedding.tolist(),
            "encoder": self.encoder.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        world = WorldSpec.from_dict(d["world"])
        if d.get("vocabulary") not in (None, Vocabulary(world).tokens):
            raise ConfigError("checkpoint vocabulary does not match its world")
        return cls(world, np.array(d["embedding"]), Mlp.from_dict(d["encoder"]), d.get("temperature", 1.0))


def count_table(tokens, pad):
    """(B, T_GEN) count of non-PAD tokens before each generated position."""
    nonpad = (np.asarray(tokens) != pad).astype(np.float64)
    return np.cumsum(nonpad, axis=1)[:, :T_GEN]


@dataclass
class PromptTrajectory:
    prompt: PromptSeq
    tokens: np.ndarray  # (T_MAX,)
    logp_old: np.ndarray  # (T_GEN,)
    forced: np.ndarray  # (T_GEN,)
    logp_ref: np.ndarray = None

    @property
    def output(self):
        return PromptSeq(tuple(self.tokens), self.prompt.user_class)

    def to_json(self, vocab=None):
        out = {"user_class": self.prompt.user_class, "tokens": [int(t) for t in self.tokens], "logprobs": self.logp_old.tolist()}
        if vocab is not None:
            out["token_names"] = vocab.decode(self.tokens)
        return out


def rollout_tokens(policy, classes, uniforms):
    """Sample sequences for ``classes`` (B,) using per-row uniforms (B, T_GEN).

    Returns ``(tokens (B, T_MAX), token_logp (B, T_GEN), forced (B, T_GEN))``.
    Temperature 0 decodes greedily (stored log-probs are 0).
    """
    classes = np.asarray(classes, dtype=np.int64)
    B = len(classes)
    pad = policy.vocab.pad
    tokens = np.full((B, T_MAX), pad, dtype=np.int64)
    tokens[:, 0] = classes
    logps = np.zeros((B, T_GEN))
    forced = np.zeros((B, T_GEN), dtype=bool)
    acc = np.zeros((B, policy.embedding.shape[1]))
    count = np.zeros(B)
    done = np.zeros(B, dtype=bool)
    for p in range(1, T_MAX):
        prev = tokens[:, p - 1]
        acc = acc + policy.embedding[prev] * (prev != pad)[:, None]
        count = count + (prev != pad)
        lp, z = policy.step_logp(acc, count, p, classes)
        if policy.temperature == 0:
            tok = np.where(policy.allowed, z, -np.inf).argmax(axis=1)
            step_lp = np.zeros(B)
        else:
            cdf = np.cumsum(np.exp(lp), axis=1)
            u = uniforms[:, p - 1] * cdf[:, -1]
            tok = np.minimum((cdf <= u[:, None]).sum(axis=1), len(policy.vocab) - 1)
            # guard against landing on a zero-probability entry at the cdf edge
            tok = np.where(policy.allowed[tok], tok, pad)
            step_lp = lp[np.arange(B), tok]
        tok = np.where(done, pad, tok)
        step_lp = np.where(done, 0.0, step_lp)
        forced[:, p - 1] = done
        tokens[:, p] = tok
        logps[:, p - 1] = step_lp
        done = done | (tok == pad)
    return tokens, logps, forced


def rollout(policy, prompt, n, rng, ref=None):
    """N enriched prompts for one user prompt; trajectory i draws from ``rng.child("traj", i)``."""
    if isinstance(prompt, (int, np.integer)):
        k = int(prompt)
        prompt = PromptSeq((k,) + (policy.vocab.pad,) * T_GEN, k)
    u = np.stack([rng.child("traj", i).uniform(size=T_GEN) for i in range(n)])
    tokens, logp, forced = rollout_tokens(policy, np.full(n, prompt.user_class), u)
    ref_lp = ref.forward_positions(tokens).token_logp if ref is not None else None
    return [
        PromptTrajectory(prompt, tokens[i], logp[i], forced[i], None if ref_lp is None else ref_lp[i])
        for i in range(n)
    ]


def token_logprob(policy, trajectory, t):
    """log pi(y_t | x, y_<t) of the recorded token at generated position ``t`` (1-based)."""
    if not 1 <= t <= T_GEN:
        raise ConfigError(f"position {t} outside 1..{T_GEN}")
    return float(policy.forward_positions(trajectory.tokens[None, :]).token_logp[0, t - 1])


# -- supervised cold start -------------------------------------------------------


def make_template_corpus(world, n, rng):
    """``n`` pairs ``(user_class, [CLS_k, SUB_m, STYLE_s, PAD...])`` with k, m, s uniform."""
    k = rng.integers(0, world.num_classes, size=n)
    m = rng.integers(0, world.sub_modes, size=n)
    s = rng.integers(0, world.style_tokens, size=n)
    return caption_tokens(world, k, m, s)


def is_template_valid(world, tokens):
    vocab = Vocabulary(world)
    tokens = np.atleast_2d(tokens)
    return vocab.is_sub(tokens[:, 1]) & vocab.is_style(tokens[:, 2]) & (tokens[:, 3:] == vocab.pad).all(axis=1)


def sft_loss_and_grad(policy, tokens):
    """Mean over sequences of the summed token NLL (forced positions excluded)."""
    out = policy.forward_positions(tokens)
    B = len(tokens)
    live = ~out.forced
    loss = -float(out.token_logp[live].sum() / B)
    onehot = np.zeros_like(out.logp)
    np.put_along_axis(onehot, np.asarray(tokens)[:, 1:, None], 1.0, axis=2)
    probs = np.exp(out.logp)
    g = -(onehot - probs) * live[:, :, None] / B
    return loss, policy.backward_positions(out.trace, g)


def sft_policy(policy, corpus, epochs, rng, lr=1e-2, batch_size=64):
    """Cross-entropy cold start on template tokens (n, T_MAX). Mutates ``policy``."""
    corpus = np.asarray(corpus, dtype=np.int64)
    if corpus.size == 0:
        raise ConfigError("SFT corpus is empty")
    corpus = np.atleast_2d(corpus)
    opt = Adam(policy.params(), lr)
    curve = []
    for epoch in range(epochs):
        order = rng.child("epoch", epoch).permutation(len(corpus))
        total = 0.0
        for start in range(0, len(corpus), batch_size):
            idx = order[start : start + batch_size]
            loss, grads = sft_loss_and_grad(policy, corpus[idx])
            opt.step(grads)
            total += loss * len(idx)
        curve.append(total / len(corpus))
    return curve
