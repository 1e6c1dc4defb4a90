import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfnade import model as mdl
from cfnade.numeric import SeededRng

from conftest import VARIANTS, random_model


def test_effective_column_shared_equal_summands():
    cfg = mdl.ModelConfig(M=4, K=3, H=2, share_ratings=True)
    params = mdl.zero_params(cfg)
    w = np.array([0.25, -1.5])
    params["W"][:, :, 2] = w
    np.testing.assert_array_equal(mdl.effective_w_column(params, cfg, 2, 3), 3 * w)


def test_effective_column_factored_identity():
    params, cfg = random_model(M=5, K=4, H=3, J=3, seed=1)
    params["B"] = np.eye(3)
    for k in range(1, 5):
        np.testing.assert_allclose(mdl.effective_w_column(params, cfg, 1, k), params["A"][k - 1][:, 1], atol=0)


def test_effective_column_basic_lookup():
    cfg = mdl.ModelConfig(M=3, K=2, H=2)
    params = mdl.zero_params(cfg)
    params["W"][1][:, 0] = [0.1, -0.4]
    assert mdl.effective_w_column(params, cfg, 0, 2).tolist() == [0.1, -0.4]


def test_effective_column_bounds():
    params, cfg = random_model(M=3)
    with pytest.raises(IndexError):
        mdl.effective_w_column(params, cfg, 3, 1)
    with pytest.raises(ValueError):
        mdl.effective_w_column(params, cfg, 0, 6)


def test_hidden_empty_prefix():
    cfg = mdl.ModelConfig(M=3, K=2, H=4)
    params = mdl.zero_params(cfg)
    assert mdl.hidden_from_prefix(params, cfg, [])[0].tolist() == [0.0] * 4
    params["c"][:] = [0.1, -0.2, 3.0, 0.0]
    np.testing.assert_array_equal(mdl.hidden_from_prefix(params, cfg, [])[0], np.tanh(params["c"]))


def test_hidden_single_item():
    cfg = mdl.ModelConfig(M=2, K=2, H=1)
    params = mdl.zero_params(cfg)
    params["W"][0][0, 1] = 0.5
    h = mdl.hidden_from_prefix(params, cfg, [(1, 1)])[0]
    assert h[0] == pytest.approx(0.46211715726, abs=1e-11)


def test_hidden_duplicate_rejected():
    params, cfg = random_model()
    with pytest.raises(ValueError, match="duplicate"):
        mdl.hidden_from_prefix(params, cfg, [(1, 2), (1, 3)])


@pytest.mark.parametrize("shared,J,L", VARIANTS)
def test_hidden_permutation_invariant(shared, J, L):
    params, cfg = random_model(L=L, J=J, shared=shared, seed=2)
    prefix = [(0, 3), (4, 1), (2, 5), (5, 2)]
    ref = mdl.hidden_from_prefix(params, cfg, prefix)
    rng = SeededRng(1)
    for _ in range(5):
        perm = rng.permutation(len(prefix))
        got = mdl.hidden_from_prefix(params, cfg, [prefix[i] for i in perm])
        for a, b in zip(ref, got):
            np.testing.assert_array_equal(a, b)


def test_deep_layer_formula():
    params, cfg = random_model(L=3, seed=3)
    hs = mdl.hidden_from_prefix(params, cfg, [(1, 2)])
    assert len(hs) == 3
    for l in (1, 2):
        np.testing.assert_allclose(hs[l], np.tanh(params["c_deep"][l - 1] + params["W_deep"][l - 1] @ hs[l - 1]))


def test_scores_shared_cumsum_of_constants():
    cfg = mdl.ModelConfig(M=2, K=5, H=3, share_ratings=True)
    params = mdl.zero_params(cfg)
    params["b"][:, 1] = 0.7
    s = mdl.scores_for_item(params, cfg, np.zeros(3), 1)
    np.testing.assert_allclose(s, 0.7 * np.arange(1, 6), atol=1e-15)


def test_scores_basic_zero_hidden():
    params, cfg = random_model(seed=4)
    np.testing.assert_array_equal(mdl.scores_for_item(params, cfg, np.zeros(cfg.H), 3), params["b"][:, 3])


@pytest.mark.parametrize("J", [None, 3])
def test_scores_shared_forward_differences(J):
    params, cfg = random_model(J=J, shared=True, seed=5)
    h = np.tanh(SeededRng(0).normal(size=cfg.H))
    s = mdl.scores_for_item(params, cfg, h, 2)
    for k in range(cfg.K):
        V_row = params["P"][k][2] @ params["Q"] if J else params["V"][k][2]
        term = params["b"][k][2] + sum(V_row[i] * h[i] for i in range(cfg.H))
        prev = s[k - 1] if k else 0.0
        assert s[k] - prev == pytest.approx(term, abs=1e-12)


def test_factored_identity_reproduces_full():
    H = M = 4
    pf, cf = random_model(M=M, H=H, J=H, shared=True, L=2, seed=6)
    pf["B"] = np.eye(H)
    pf["Q"] = np.eye(H)
    cfull = mdl.ModelConfig(M=M, K=5, H=H, L=2, share_ratings=True)
    pfull = mdl.ParameterSet(W=pf["A"].copy(), V=pf["P"].copy(), b=pf["b"].copy(), c=pf["c"].copy(),
                             W_deep=pf["W_deep"].copy(), c_deep=pf["c_deep"].copy())
    hist = [(0, 2), (3, 5)]
    hf = mdl.hidden_from_prefix(pf, cf, hist)[-1]
    hn = mdl.hidden_from_prefix(pfull, cfull, hist)[-1]
    np.testing.assert_allclose(hf, hn, atol=1e-15)
    np.testing.assert_allclose(mdl.scores_for_items(pf, cf, hf, [1, 2]),
                               mdl.scores_for_items(pfull, cfull, hn, [1, 2]), atol=1e-14)


def test_softmax_conditional_examples():
    np.testing.assert_allclose(mdl.softmax_conditional([1.3] * 5), [0.2] * 5, atol=1e-15)
    assert mdl.softmax_conditional([2.0]).tolist() == [1.0]
    np.testing.assert_allclose(mdl.softmax_conditional([1.0, 2.0]), [0.26894, 0.73106], atol=1e-5)
    e1, e2 = math.exp(1), math.exp(2)
    np.testing.assert_allclose(mdl.softmax_conditional([1.0, 2.0]), [e1 / (e1 + e2), e2 / (e1 + e2)], atol=1e-15)


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=10), st.floats(-500, 500))
def test_softmax_conditional_shift(s, c):
    p = mdl.softmax_conditional(s)
    np.testing.assert_allclose(p, mdl.softmax_conditional(np.asarray(s) + c), atol=1e-12)
    assert abs(p.sum() - 1) < 1e-12


def test_expected_rating_examples():
    assert mdl.expected_rating(np.eye(5)[3]) == 4.0
    assert mdl.expected_rating(np.full(5, 0.2)) == pytest.approx(3.0, abs=1e-15)
    assert mdl.expected_rating(np.array([0.1, 0.2, 0.3, 0.2, 0.2])) == pytest.approx(3.2, abs=1e-15)


@pytest.mark.parametrize("shared,J,L", VARIANTS)
def test_predict_in_range_and_full_history(shared, J, L):
    params, cfg = random_model(L=L, J=J, shared=shared, seed=7, scale=2.0)
    hist = [(0, 1), (2, 5), (5, 3)]
    p = mdl.predict_rating(params, cfg, hist, 4)
    assert 1.0 <= p <= cfg.K
    h = mdl.hidden_from_prefix(params, cfg, hist)[-1]
    probs = mdl.softmax_conditional(mdl.scores_for_item(params, cfg, h, 4))
    assert p == pytest.approx(float(probs @ np.arange(1, 6)), abs=1e-14)
    assert 1.0 <= mdl.predict_rating(params, cfg, [], 4) <= cfg.K


def test_predict_drops_target_from_history(caplog):
    params, cfg = random_model(seed=8)
    a = mdl.predict_rating(params, cfg, [(1, 4), (2, 2)], 1)
    b = mdl.predict_rating(params, cfg, [(2, 2)], 1)
    assert a == b
    assert "dropping" in caplog.text


def test_parameter_counts():
    full = mdl.ModelConfig(M=17770, K=5, H=500)
    assert mdl.parameter_count(full) == 88_939_350
    shapes = mdl.param_shapes(full)
    assert np.prod(shapes["W"]) + np.prod(shapes["V"]) == 88_850_000
    fact = mdl.ModelConfig(M=17770, K=5, H=500, J=50)
    assert mdl.parameter_count(fact) == 9_024_350
    assert mdl.parameter_count(mdl.ModelConfig(M=1, K=1, H=1)) == 4
    assert mdl.parameter_count(mdl.ModelConfig(M=3, K=2, H=4, L=3)) == mdl.parameter_count(
        mdl.ModelConfig(M=3, K=2, H=4)) + 2 * (16 + 4)


def test_config_validation(caplog):
    with pytest.raises(ValueError):
        mdl.ModelConfig(M=0, K=5, H=3)
    with pytest.raises(ValueError):
        mdl.ModelConfig(M=3, K=5, H=3, L=0)
    with pytest.raises(ValueError):
        mdl.ModelConfig(M=3, K=5, H=3, J=0)
    with pytest.raises(ValueError):
        mdl.ModelConfig(M=3, K=5, H=3, activation="relu")
    mdl.ModelConfig(M=10, K=5, H=4, J=8)
    assert "not much smaller" in caplog.text


def test_init_scheme():
    cfg = mdl.ModelConfig(M=30, K=3, H=10, L=2)
    p = mdl.init_params(cfg, SeededRng(0))
    assert np.all(p["b"] == 0) and np.all(p["c"] == 0) and np.all(p["c_deep"] == 0)
    assert np.abs(p["W"]).max() <= math.sqrt(6 / 40)
    assert np.abs(p["W_deep"]).max() <= math.sqrt(6 / 20)
    q = mdl.init_params(cfg, SeededRng(0))
    assert all(np.array_equal(p[k], q[k]) for k in p)


@pytest.mark.parametrize("shared,J,L", VARIANTS)
def test_checkpoint_roundtrip_bitwise(tmp_path, shared, J, L):
    params, cfg = random_model(L=L, J=J, shared=shared, seed=9)
    path = tmp_path / "m.cfnd"
    mdl.save_checkpoint(path, params, cfg)
    back, bcfg = mdl.load_checkpoint(path)
    assert bcfg == cfg
    assert list(back) == list(params)
    for k in params:
        assert back[k].tobytes() == params[k].tobytes()
    assert mdl.checkpoint_bytes(back, bcfg) == path.read_bytes()


def test_checkpoint_layout_and_corruption(tmp_path):
    params, cfg = random_model(M=2, K=2, H=1, seed=1)
    raw = mdl.checkpoint_bytes(params, cfg)
    assert raw[:4] == b"CFND"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert [int.from_bytes(raw[8 + 8 * i:16 + 8 * i], "little") for i in range(6)] == [2, 2, 1, 1, 0, 0]
    n_params = mdl.parameter_count(cfg)
    assert len(raw) == 8 + 48 + 8 * n_params + 8
    path = tmp_path / "bad.cfnd"
    flipped = bytearray(raw)
    flipped[60] ^= 1
    path.write_bytes(bytes(flipped))
    with pytest.raises(mdl.CheckpointError, match="checksum"):
        mdl.load_checkpoint(path)
