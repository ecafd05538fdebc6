import numpy as np
import pytest

from detgen.errors import ConfigError
from detgen.numkit import Mlp, Rng
from detgen.promptpolicy import (
    T_GEN,
    PromptPolicy,
    is_template_valid,
    make_template_corpus,
    rollout,
    rollout_tokens,
    sft_loss_and_grad,
    sft_policy,
    token_logprob,
)
from detgen.synthworld import T_MAX, Vocabulary, WorldSpec

from .conftest import finite_difference


@pytest.fixture
def policy(world):
    return PromptPolicy.init(world, Rng(0), emb_dim=6, hidden=(12,))


def _tokens(policy, n, seed=0, cls=3):
    return rollout_tokens(policy, np.full(n, cls), Rng(seed).uniform(size=(n, T_GEN)))


def test_stored_logprob_equals_teacher_forced(policy):
    toks, lp, forced = _tokens(policy, 64)
    out = policy.forward_positions(toks)
    assert np.array_equal(out.token_logp, lp)
    assert np.array_equal(out.forced, forced)
    assert (lp <= 0).all() and np.isfinite(lp).all()
    assert (np.exp(lp.sum(axis=1)) <= 1).all()


def test_pad_absorbing_and_no_cls(policy, world):
    vocab = Vocabulary(world)
    toks, lp, forced = _tokens(policy, 2000, seed=1)
    pad = toks == vocab.pad
    first = np.where(pad.any(axis=1), pad.argmax(axis=1), T_MAX)
    for row, f in zip(toks, first):
        assert (row[f:] == vocab.pad).all()
    assert not vocab.is_cls(toks[:, 1:]).any()
    assert (toks[:, 0] == 3).all()
    assert (lp[forced] == 0).all()


def test_probabilities_normalized(policy):
    toks, _, _ = _tokens(policy, 16)
    out = policy.forward_positions(toks)
    np.testing.assert_allclose(np.exp(out.logp).sum(axis=-1), 1.0, atol=1e-9)


def test_hand_built_logits():
    w = WorldSpec(num_classes=1, sub_modes=1, style_tokens=1)  # vocab: CLS_0 SUB_0 STYLE_0 PAD
    n_in = 2 + T_GEN + w.num_classes  # embedding, position one-hot, class one-hot
    enc = Mlp([n_in, 4], [np.zeros((n_in, 4))], [np.array([9.0, 0.5, -1.0, 0.2])])
    pol = PromptPolicy(w, np.zeros((4, 2)), enc)
    out = pol.forward_positions(np.array([[0, 1, 2, 3, 3, 3, 3, 3]]))
    z = np.array([0.5, -1.0, 0.2])  # CLS is masked out
    want = z - np.log(np.exp(z).sum())
    np.testing.assert_allclose(out.logp[0, 0, 1:], want, atol=1e-14)
    assert out.logp[0, 0, 0] == -np.inf
    assert out.token_logp[0, 0] == pytest.approx(want[0], abs=1e-14)


def test_frequency_matches_softmax(policy):
    n = 100_000
    toks, _, _ = _tokens(policy, n, seed=5)
    p = np.exp(policy.forward_positions(toks[:1]).logp[0, 0])
    freq = np.bincount(toks[:, 1], minlength=len(p)) / n
    se = np.sqrt(p * (1 - p) / n)
    assert (np.abs(freq - p) <= 3 * se + 1e-12).sum() >= len(p) - 1


def test_greedy_trajectories_identical(world):
    pol = PromptPolicy.init(world, Rng(0), temperature=0.0)
    trajs = rollout(pol, 2, 8, Rng(1))
    assert all(np.array_equal(t.tokens, trajs[0].tokens) for t in trajs)


def test_temperature_scales_logits(world):
    a = PromptPolicy.init(world, Rng(0), temperature=1.0)
    b = PromptPolicy(world, a.embedding, a.encoder, temperature=2.0)
    toks, _, _ = _tokens(a, 4)
    la, lb = a.forward_positions(toks).logp, b.forward_positions(toks).logp
    z = la[np.isfinite(la)].reshape(4, T_GEN, -1) / 2.0
    want = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    np.testing.assert_allclose(lb[np.isfinite(lb)].reshape(want.shape), want, atol=1e-12)


def test_rollout_streams_and_validity(policy, world):
    trajs = rollout(policy, 4, 6, Rng(3))
    again = rollout(policy, 4, 6, Rng(3))
    for a, b in zip(trajs, again):
        assert np.array_equal(a.tokens, b.tokens)
        a.output.validate(Vocabulary(world))
    # trajectory i depends only on its own stream
    three = rollout(policy, 4, 3, Rng(3))
    assert np.array_equal(three[2].tokens, trajs[2].tokens)
    assert token_logprob(policy, trajs[0], 1) == trajs[0].logp_old[0]


def test_sft_gradient(policy, world):
    corpus = make_template_corpus(world, 6, Rng(1))
    _, grads = sft_loss_and_grad(policy, corpus)
    err = finite_difference(lambda: sft_loss_and_grad(policy, corpus)[0], policy.params(), grads, Rng(2))
    assert err < 1e-5


def test_token_logprob_gradient(policy):
    toks, _, _ = _tokens(policy, 1, seed=7)
    pos = 1
    out = policy.forward_positions(toks)
    g = np.zeros_like(out.logp)
    g[0, pos] = -np.exp(out.logp[0, pos])
    g[0, pos, toks[0, pos + 1]] += 1.0
    grads = policy.backward_positions(out.trace, g)
    err = finite_difference(lambda: policy.forward_positions(toks).token_logp[0, pos], policy.params(), grads, Rng(3))
    assert err < 1e-4


def test_sft_learns_template(world):
    pol = PromptPolicy.init(world, Rng(0))
    sft_policy(pol, make_template_corpus(world, 4000, Rng(1)), 3, Rng(2))
    toks, _, _ = rollout_tokens(pol, np.arange(1000) % 8, Rng(3).uniform(size=(1000, T_GEN)))
    assert is_template_valid(world, toks).mean() >= 0.95
    p1 = np.exp(pol.forward_positions(toks[:1]).logp[0, 0])
    assert p1[Vocabulary(world).is_sub(np.arange(len(p1)))].sum() >= 0.9


def test_sft_memorizes_single_pair(world):
    pol = PromptPolicy.init(world, Rng(0), temperature=0.0)
    pair = make_template_corpus(world, 1, Rng(4))
    sft_policy(pol, np.repeat(pair, 64, axis=0), 10, Rng(5))
    toks, _, _ = rollout_tokens(pol, pair[:, 0], np.zeros((1, T_GEN)))
    assert np.array_equal(toks, pair)


def test_sft_is_seeded_and_rejects_empty(world):
    corpus = make_template_corpus(world, 200, Rng(1))
    a, b = PromptPolicy.init(world, Rng(0)), PromptPolicy.init(world, Rng(0))
    sft_policy(a, corpus, 1, Rng(2))
    sft_policy(b, corpus, 1, Rng(2))
    assert all(np.array_equal(a.params()[k], b.params()[k]) for k in a.params())
    with pytest.raises(ConfigError):
        sft_policy(a, np.zeros((0, T_MAX), dtype=int), 1, Rng(0))


def test_checkpoint_round_trip(policy):
    back = PromptPolicy.from_dict(policy.to_dict())
    toks, lp, _ = _tokens(policy, 8)
    assert np.array_equal(back.forward_positions(toks).token_logp, lp)
    assert back.to_dict()["vocabulary"] == Vocabulary(policy.world).tokens
