import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from d2rec.model import (DISC_PAIRS, Batch, CombinedFactors, ConfigError, D2Rec, D2RecParams,
                         DegenerateBatchError, FactorBundle, Head, ModelConfig, Variant, combine,
                         discrepancy_loss, discrepancy_terms, disentangle, init_params, losses,
                         mmd2, predict_exposure, predict_rating, reweight)
from d2rec.nncore import AffineLayer, DimensionError

from oracles import median_bandwidth as median_oracle
from oracles import mmd2_double_sum as mmd2_oracle


def const_head(w, b=None):
    w = np.asarray(w, dtype=np.float64)
    return Head([AffineLayer(w, np.zeros(w.shape[1]) if b is None else np.asarray(b, float))])


def toy_model(variant=Variant.FULL, seed=0, n_users=3, n_items=3, d_emb=4, d_factor=4, **kw):
    cfg = ModelConfig(d_emb=d_emb, d_factor=d_factor, variant=variant, **kw)
    rng = np.random.default_rng(seed + 100)
    theta = rng.normal(size=(n_users, d_emb))
    beta = rng.normal(size=(n_items, d_emb))
    params = init_params(cfg, n_users, n_items, seed, np.float64, theta, beta)
    if params.user_table is not None and not cfg.finetune_embeddings:
        # unit-scale free tables so finite differences do not straddle bandwidth kinks
        params.user_table *= 100.0
        params.item_table *= 100.0
    return D2Rec(cfg, params, 0.4, theta, beta)


def toy_batch(n_users=3, n_items=3, b=6, seed=0):
    """Distinct (user, item) rows when the tables allow it; repeated rows tie pair distances."""
    rng = np.random.default_rng(seed)
    users = rng.permutation(max(n_users, b))[:b] % n_users
    items = rng.permutation(max(n_items, b))[:b] % n_items
    exp = np.array([1, 0] * (b // 2) + [1] * (b % 2), dtype=np.int8)
    ratings = np.where(exp == 1, rng.integers(1, 6, b).astype(float), np.nan)
    return Batch(users, items, exp, ratings)


# -- disentangle / combine -----------------------------------------------------

def _params_with(heads, variant=Variant.FULL):
    return D2RecParams(heads, variant)


def test_zero_heads_give_zero_bundle():
    z = [const_head(np.zeros((2, 3))) for _ in range(6)]
    b = disentangle(np.ones((4, 2)), np.ones((4, 2)), _params_with(z))
    for name in ("alpha_u", "gamma_u", "delta_u", "alpha_i", "gamma_i", "delta_i"):
        np.testing.assert_array_equal(b[name], np.zeros((4, 3)))


def test_identity_head_relu_clamp():
    heads = [const_head(np.eye(2)) for _ in range(6)]
    b = disentangle(np.array([[-1.0, 2.0]]), np.zeros((1, 2)), _params_with(heads))
    np.testing.assert_array_equal(b.alpha_u, [[0.0, 2.0]])


def test_no_disentanglement_ties_user_factors():
    m = toy_model(Variant.NO_DISENTANGLEMENT)
    b = disentangle(m.theta, m.beta, m.params)
    np.testing.assert_array_equal(b.alpha_u, b.gamma_u)
    np.testing.assert_array_equal(b.gamma_u, b.delta_u)
    np.testing.assert_array_equal(b.alpha_i, b.delta_i)
    assert m.params.heads[0] is m.params.heads[2] and m.params.heads[3] is m.params.heads[5]


def test_embedding_dim_mismatch():
    m = toy_model()
    with pytest.raises(DimensionError):
        disentangle(np.zeros((2, 5)), np.zeros((2, 4)), m.params)


def _bundle(au, gu, du, ai, gi, di):
    return FactorBundle(*[np.atleast_2d(np.asarray(x, dtype=float)) for x in (au, gu, du, ai, gi, di)])


def test_combine_hadamard():
    cf = combine(_bundle([1, 2], [1, 1], [0, 0], [3, 4], [2, 2], [5, 5]))
    np.testing.assert_array_equal(cf.alpha_ui, [[3, 8]])
    np.testing.assert_array_equal(cf.delta_ui, [[0, 0]])


def test_combine_rowdot_identity_brute_force():
    rng = np.random.default_rng(3)
    rows = [rng.random(4) for _ in range(4)]
    b = _bundle(rows[0], rows[1], rows[1], rows[2], rows[3], rows[3])
    cf = combine(b)
    brute = sum(rows[0][k] * rows[2][k] * rows[1][k] * rows[3][k] for k in range(4))
    assert float(cf.alpha_ui[0] @ cf.gamma_ui[0]) == pytest.approx(brute, rel=1e-14)


# -- exposure, weights, rating ---------------------------------------------------

def _cf(a, g, d):
    return CombinedFactors(*[np.atleast_2d(np.asarray(x, dtype=float)) for x in (a, g, d)])


def test_exposure_values():
    assert predict_exposure(_cf([0, 0], [1, 1], [0, 0]))[0] == 0.5
    assert predict_exposure(_cf([math.log(3)], [1.0], [0]))[0] == pytest.approx(0.75, abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_nonnegative_factors_force_exposure_at_least_half(seed):
    rng = np.random.default_rng(seed)
    cf = _cf(rng.random((5, 3)), rng.random((5, 3)), rng.random((5, 3)))
    assert np.all(predict_exposure(cf) >= 0.5)


def test_reweight_examples():
    assert reweight(0.5, [0.5])[0] == 2.0
    assert reweight(0.1, [0.9])[0] == pytest.approx(82 / 81, rel=1e-12)
    assert reweight(0.9, [0.1], omega_max=50)[0] == 50.0
    for bad in (0.0, 1.0, -0.2):
        with pytest.raises(ConfigError):
            reweight(bad, [0.5])


def test_reweight_monotone_in_q():
    qs = np.linspace(0.01, 0.99, 99)
    for p in (0.05, 0.3, 0.5, 0.8):
        w = reweight(p, qs, omega_max=1e9)
        assert np.all(np.diff(w) < 0)


def test_predict_rating_examples():
    assert predict_rating(_cf([0], [1, 1], [-1, 0]), np.array([3.0]))[0] == 0.0
    assert predict_rating(_cf([0], [1, 1], [1.5, 0.5]), np.array([2.0]))[0] == 4.0
    assert predict_rating(_cf([0], [1, 1], [0, 0]), np.array([1.0]))[0] == 0.0


def test_predict_rating_permutation_invariant():
    rng = np.random.default_rng(0)
    cf = _cf(rng.random((7, 3)), rng.random((7, 3)), rng.random((7, 3)))
    w = rng.random(7) + 1
    perm = rng.permutation(7)
    out = predict_rating(cf, w)
    cf_p = _cf(cf.alpha_ui[perm], cf.gamma_ui[perm], cf.delta_ui[perm])
    np.testing.assert_array_equal(predict_rating(cf_p, w[perm]), out[perm])


# -- MMD ---------------------------------------------------------------------------

def test_mmd_identical_sets_zero():
    X = np.random.default_rng(0).normal(size=(6, 3))
    assert abs(mmd2(X, X.copy())) < 1e-12


def test_mmd_two_point_closed_form():
    # sigma^2 = 0.5: k(0,1) = exp(-1)
    assert mmd2(np.array([[0.0]]), np.array([[1.0]]), bandwidth=math.sqrt(0.5)) == \
        pytest.approx(2 - 2 * math.exp(-1), abs=1e-14)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(1, 6), m=st.integers(1, 6), d=st.integers(1, 4))
def test_mmd_matches_double_sum(seed, n, m, d):
    rng = np.random.default_rng(seed)
    X, Y = rng.normal(size=(n, d)), rng.normal(size=(m, d)) + 0.5
    assert abs(mmd2(X, Y) - mmd2_oracle(X, Y, median_oracle(X, Y))) < 1e-10
    assert abs(mmd2(X, Y, 0.7) - mmd2_oracle(X, Y, 0.7)) < 1e-10
    assert mmd2(X, Y) == mmd2(Y, X)
    assert mmd2(X, Y) >= -1e-12


def test_mmd_zero_median_falls_back_to_one():
    X = np.zeros((3, 2))
    Y = np.zeros((2, 2))
    Y[0, 0] = 1.0  # 10 pairs, only 3 non-zero distances: median 0
    assert mmd2(X, Y) == pytest.approx(mmd2_oracle(X, Y, 1.0), abs=1e-14)


def test_mmd_errors():
    with pytest.raises(ValueError):
        mmd2(np.zeros((0, 2)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        mmd2(np.zeros((2, 2)), np.zeros((2, 3)))


def test_discrepancy_examples():
    rng = np.random.default_rng(1)
    same = rng.random((5, 3))
    assert discrepancy_loss(_bundle(*[same] * 6)) == 0.0
    b = FactorBundle(*[rng.random((5, 3)) for _ in range(6)])
    terms = discrepancy_terms(b)
    assert terms == [mmd2(b[x], b[y]) for x, y in DISC_PAIRS]
    assert discrepancy_loss(b) == pytest.approx(sum(terms), rel=1e-15)
    perm = FactorBundle(*[b[k][rng.permutation(5)] for k in
                          ("alpha_u", "gamma_u", "delta_u", "alpha_i", "gamma_i", "delta_i")])
    assert discrepancy_loss(perm) == pytest.approx(discrepancy_loss(b), abs=1e-12)
    with pytest.raises(DegenerateBatchError):
        discrepancy_loss(FactorBundle(*[rng.random((1, 3)) for _ in range(6)]))


def test_no_disentanglement_within_side_terms_vanish():
    m = toy_model(Variant.NO_DISENTANGLEMENT)
    b = disentangle(m.theta[[0, 1, 2]], m.beta[[0, 1, 2]], m.params)
    assert discrepancy_terms(b) == [0.0] * 6


# -- losses -------------------------------------------------------------------------

def test_loss_examples():
    rep = losses([1, 1], [5.0, 3.0], [1 - 1e-7, 1 - 1e-7], [5.0, 3.0], 0.0)
    assert rep.rating_loss == 0 and rep.exposure_loss == pytest.approx(2 * -math.log(1 - 1e-7))
    assert losses([1, 1], [5.0, 3.0], [0.5, 0.5], [4.0, 5.0], 0.0).rating_loss == 5.0
    assert losses([1], [4.0], [0.5], [4.0], 0.0).exposure_loss == pytest.approx(math.log(2))
    rep = losses([1, 0], [4.0, np.nan], [0.6, 0.3], [3.0, 9.9], 2.0, kappa=0.5)
    assert rep.total == pytest.approx(rep.rating_loss + rep.exposure_loss - 1.0)


def test_loss_without_positives_is_flagged():
    rep = losses([0, 0], [np.nan, np.nan], [0.6, 0.7], [1.0, 2.0], 0.0)
    assert rep.rating_loss == 0.0 and rep.no_positives


# -- full gradient ---------------------------------------------------------------------

@pytest.mark.parametrize("variant", list(Variant))
@pytest.mark.parametrize("mode", ["predict", "loss"])
def test_gradient_check_toy(variant, mode):
    m = toy_model(variant, n_users=6, n_items=6, omega_mode=mode, exposure_bias=(mode == "loss"))
    res = m.gradient_check(toy_batch(6, 6))
    assert res.passed, res.message


def test_gradient_check_deeper_heads_and_finetune():
    m = toy_model(depth=2, finetune_embeddings=True, d_factor=3, n_users=6, n_items=6)
    rng = np.random.default_rng(5)
    for head in m.params.unique_heads():  # zero biases put dead rows exactly on the ReLU kink
        for layer in head.layers:
            layer.bias += rng.normal(0.0, 0.3, layer.bias.shape)
    res = m.gradient_check(toy_batch(6, 6, seed=2))
    assert res.passed, res.max_rel_error


def test_ablation_tables_initialised_small():
    cfg = ModelConfig(d_emb=4, variant=Variant.NO_NETWORK_EMBEDDINGS)
    p = init_params(cfg, 3, 5, seed=0)
    assert p.user_table.shape == (3, 4) and p.item_table.shape == (5, 4)
    assert np.all(np.abs(p.user_table) <= 0.01) and np.all(np.abs(p.item_table) <= 0.01)


def test_predict_clamp_flag():
    m = toy_model()
    raw = m.predict([0, 1, 2], [0, 1, 2], clamp=False)
    assert np.all(raw >= 0)
    clamped = m.predict([0, 1, 2], [0, 1, 2], clamp=True)
    np.testing.assert_array_equal(clamped, np.clip(raw, 1, 5))


@pytest.mark.parametrize("variant", list(Variant))
def test_save_load_roundtrip(tmp_path, variant):
    m = toy_model(variant, depth=2 if variant is Variant.FULL else 1)
    m.save(tmp_path / "m.bin")
    back = D2Rec.load(tmp_path / "m.bin", m.theta, m.beta)
    assert back.positive_rate == m.positive_rate and back.cfg == m.cfg
    u, i = np.array([0, 1, 2, 0]), np.array([2, 1, 0, 0])
    np.testing.assert_array_equal(back.predict(u, i), m.predict(u, i))
    if variant is Variant.NO_DISENTANGLEMENT:
        assert back.params.heads[0] is back.params.heads[1]


def test_config_errors():
    with pytest.raises(ConfigError):
        ModelConfig(omega_mode="both")
    with pytest.raises(ConfigError):
        ModelConfig(omega_max=0.5)
    assert ModelConfig(d_emb=12).d_factor == 12
