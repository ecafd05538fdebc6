import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from detgen.errors import ConfigError
from detgen.numkit import Rng
from detgen.synthworld import (
    T_MAX,
    PromptSeq,
    Vocabulary,
    WorldSpec,
    embed_tokens,
    embed_tokens_backward,
    nearest_fine_mode,
    sample_real_batch,
    user_prompt,
)


def test_vocabulary_layout(world):
    v = Vocabulary(world)
    assert len(v) == world.vocab_size == 8 + 3 + 4 + 1
    assert v.tokens[v.pad] == "PAD"
    assert v.decode([v.cls(2), v.sub(1), v.style(3)]) == ["CLS_2", "SUB_1", "STYLE_3"]
    assert v.encode(["CLS_0", "PAD"]) == [0, v.pad]
    with pytest.raises(ConfigError):
        v.encode(["NOPE"])


def test_fine_modes_geometry(world):
    fm = world.fine_means()
    assert fm.shape == (8, 3, 2)
    d = np.linalg.norm(fm - world.class_means()[:, None, :], axis=-1)
    np.testing.assert_allclose(d, world.sub_mode_radius, rtol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(world.class_means(), axis=1), world.ring_radius, rtol=1e-12)


def test_real_samples_follow_their_captions(world):
    b = sample_real_batch(world, 20000, Rng(0))
    k, m = nearest_fine_mode(world, b.x)
    assert np.mean((k == b.classes) & (m == b.subs)) > 0.99
    # style 0 is the tight "camera" style: radial/tangential std 0.05
    sel = b.styles == 0
    resid = b.x[sel] - world.fine_means()[b.classes[sel], b.subs[sel]]
    assert abs(resid.std() - 0.05) < 0.005


def test_sample_real_rejects_empty(world):
    with pytest.raises(ConfigError):
        sample_real_batch(world, 0, Rng(0))


def test_prompt_validation(world):
    v = Vocabulary(world)
    user_prompt(world, 3).validate(v)
    with pytest.raises(ConfigError):
        PromptSeq((3, v.sub(0), 2) + (v.pad,) * 5, 3).validate(v)  # second CLS
    with pytest.raises(ConfigError):
        PromptSeq((3, v.pad, v.sub(0)) + (v.pad,) * 5, 3).validate(v)  # PAD not a suffix
    with pytest.raises(ConfigError):
        PromptSeq((3,) + (v.pad,) * (T_MAX - 2), 3).validate(v)  # too short
    with pytest.raises(ConfigError):
        user_prompt(world, 8)


def test_world_spec_round_trip_and_validation():
    w = WorldSpec(style_tokens=5)
    assert WorldSpec.from_dict(w.to_dict()) == w
    with pytest.raises(ConfigError):
        WorldSpec(dim=1)
    with pytest.raises(ConfigError):
        WorldSpec(style_scales=((0.1, 0.1),))


@given(st.lists(st.integers(0, 14), min_size=1, max_size=T_MAX))
def test_embedding_is_order_free_mean(prefix):
    table = np.arange(16 * 3, dtype=float).reshape(16, 3) / 7.0
    pad = 15
    tokens = np.array(prefix + [pad] * (T_MAX - len(prefix)))[None, :]
    got = embed_tokens(table, tokens, pad)[0]
    np.testing.assert_allclose(got, table[prefix].mean(axis=0), rtol=1e-12)


def test_embedding_backward_matches_definition():
    r = np.random.default_rng(0)
    table = r.standard_normal((6, 2))
    tokens = np.array([[0, 1, 1, 5], [2, 5, 5, 5]])
    g = r.standard_normal((2, 2))
    grad = embed_tokens_backward(table.shape, tokens, 5, g)
    h = 1e-6
    for i in range(6):
        for j in range(2):
            t = table.copy()
            t[i, j] += h
            up = (embed_tokens(t, tokens, 5) * g).sum()
            t[i, j] -= 2 * h
            dn = (embed_tokens(t, tokens, 5) * g).sum()
            assert abs((up - dn) / (2 * h) - grad[i, j]) < 1e-8
