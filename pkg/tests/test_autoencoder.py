import math

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from weaksep import autoencoder as ae
from weaksep.autoencoder import (AutoencoderModel, Layer, StructuredDropoutAutoencoder,
                                 TrainConfig, TrainingDivergedError, assemble_context, backprop,
                                 context_matrix, decode, encode, forward_dropout, init_model,
                                 kl_divergence, load_model, loss_activity, loss_dropout,
                                 loss_reconstruction, project_nonneg, save_model, train)
from weaksep.numerics import finite_diff_grad


def small_net(seed, context=0, nonneg=False, M=3, K=2, hidden=(3,)):
    model = init_model(M, K, context, hidden, nonneg_decoder=nonneg, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    # positive biases keep ReLU pre-activations away from the kink
    params = {k: (v + rng.uniform(0.2, 0.6, v.shape)) if k.endswith(".b") else v
              for k, v in model.params().items()}
    return model.with_params(params)


def small_data(seed, M=3, K=2, N=5):
    rng = np.random.default_rng(seed + 2000)
    V = rng.uniform(0.1, 1.0, (M, N))
    L = (rng.uniform(size=(K, N)) < 0.6).astype(float)
    return V, L


def objective_fn(model, V, L, objective, lam):
    def f(params):
        m = model.with_params(params)
        return backprop(m, V, L, objective, lam)[0]
    return f


def rel_err(a, b):
    a = np.concatenate([x.ravel() for x in a.values()])
    b = np.concatenate([x.ravel() for x in b.values()])
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)


@pytest.mark.parametrize("objective", ["plain", "activity", "dropout"])
def test_gradients_match_finite_differences(objective):
    for seed in range(20):
        context, nonneg = seed % 2, bool(seed // 2 % 2)
        M, K = 3, 2
        model = small_net(seed, context, nonneg, M, K, hidden=(2,) if context else (3,))
        assert sum(p.size for p in model.params().values()) <= 50
        V, L = small_data(seed, M, K)
        loss, grads = backprop(model, V, L, objective, lam=3.0)
        fd = finite_diff_grad(objective_fn(model, V, L, objective, 3.0),
                              {k: v.copy() for k, v in model.params().items()}, h=1e-6)
        assert rel_err(grads, fd) < 1e-5, (objective, seed)


def test_reductions():
    model = small_net(3, context=1, M=4, K=3)
    V, L = small_data(3, M=4, K=3, N=7)
    ones = np.ones_like(L)
    base = loss_reconstruction(model, V)
    assert abs(loss_dropout(model, V, ones) - base) <= 1e-12
    assert abs(loss_activity(model, V, L, 0.0) - base) <= 1e-12
    _, g_plain = backprop(model, V, None, "plain")
    _, g_act = backprop(model, V, L, "activity", lam=0.0)
    for k in g_plain:
        np.testing.assert_array_equal(g_act[k], g_plain[k])


def fixed_rep_model(r, M=2):
    # one ReLU encoder layer with zero weights, so the representation is the bias
    K = len(r)
    enc = [Layer(np.zeros((M, K)), np.asarray(r, float), "relu")]
    dec = [Layer(np.zeros((K, M)), np.zeros(M), "relu")]
    return AutoencoderModel(enc, dec)


def test_activity_penalty_arithmetic():
    model = fixed_rep_model([0.5, 2.0])
    V = np.full((2, 1), 0.5)
    L = np.array([[1.0], [0.0]])
    assert loss_activity(model, V, L, 10.0) - loss_reconstruction(model, V) == pytest.approx(40.0)
    assert loss_activity(model, V, np.ones((2, 1)), 10.0) == loss_reconstruction(model, V)


def test_zero_decoder_output_gives_mean_column_sum():
    model = fixed_rep_model([0.5, 2.0], M=3)
    V = np.random.default_rng(0).uniform(0, 2, (3, 4))
    expected = V.sum(axis=0).mean()
    assert loss_reconstruction(model, V) == pytest.approx(expected, rel=1e-12)
    assert loss_dropout(model, V, np.zeros((2, 4))) == pytest.approx(expected, rel=1e-12)


def test_dropout_loss_matches_per_frame_composition():
    model = small_net(5, context=2, M=4, K=3, hidden=(4, 3))
    V, L = small_data(5, M=4, K=3, N=6)
    per_frame = [kl_divergence(forward_dropout(model, assemble_context(V, n, 2), L[:, n]),
                               V[:, n], model.eps_kl) for n in range(6)]
    assert loss_dropout(model, V, L) == pytest.approx(np.mean(per_frame), rel=1e-12)


def test_gradient_cut_for_masked_unit():
    model = small_net(7, M=4, K=3, hidden=(3, 3))
    V, L = small_data(7, M=4, K=3, N=4)
    L[1, 2] = 0.0
    last = f"encoder.{len(model.encoder) - 1}"
    # a frame on its own: the masked unit's incoming weights get nothing
    _, g = backprop(model, V[:, 2:3], L[:, 2:3], "dropout")
    assert not g[f"{last}.W"][:, 1].any() and g[f"{last}.b"][1] == 0.0
    # and that frame adds nothing to the unit's gradient over the whole batch
    _, g_all = backprop(model, V, L, "dropout")
    keep = [0, 1, 3]
    _, g_rest = backprop(model, V[:, keep], L[:, keep], "dropout")
    np.testing.assert_allclose(g_all[f"{last}.W"][:, 1] * 4, g_rest[f"{last}.W"][:, 1] * 3,
                               rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("a, b, want, tol", [
    ([1.0], [2.0], 1 - math.log(2), 1e-6),
    ([0.0, 0.0], [3.0, 4.0], 7.0, 1e-6),
    ([0.3, 5.0], [0.3, 5.0], 0.0, 0.0),
])
def test_kl_examples(a, b, want, tol):
    assert abs(kl_divergence(a, b, 1e-9) - want) <= tol


def test_kl_rejects_negative():
    with pytest.raises(ValueError):
        kl_divergence([-1.0], [1.0])


def test_init_shapes_and_determinism():
    m = init_model(2049, 30, hidden_dims=(1500, 1500), seed=1)
    enc, dec = m.topology
    assert [(s.in_dim, s.out_dim) for s in enc] == [(2049, 1500), (1500, 1500), (1500, 30)]
    assert [(s.in_dim, s.out_dim) for s in dec] == [(30, 1500), (1500, 2049)]
    assert [s.activation for s in enc] == ["sigmoid", "sigmoid", "relu"]
    assert [s.activation for s in dec] == ["sigmoid", "relu"]
    a, b = init_model(5, 3, 1, (4,), seed=9), init_model(5, 3, 1, (4,), seed=9)
    for k, v in a.params().items():
        np.testing.assert_array_equal(v, b.params()[k])
    assert m.input_dim == 2049 and init_model(5, 3, 2, (4,)).input_dim == 25


def test_init_nonneg_and_glorot_bounds():
    m = init_model(10, 4, hidden_dims=(6,), nonneg_decoder=True, seed=2)
    assert all(l.W.min() >= 0 for l in m.decoder)
    for l in m.encoder + m.decoder:
        assert np.abs(l.W).max() <= math.sqrt(6 / sum(l.W.shape))
        assert not l.b.any()


def test_context():
    V = np.arange(15, dtype=float).reshape(3, 5)
    np.testing.assert_array_equal(assemble_context(V, 2, 0), V[:, 2])
    np.testing.assert_array_equal(assemble_context(V, 0, 1),
                                  np.concatenate([V[:, 0], V[:, 0], V[:, 1]]))
    ramp = np.tile(np.arange(5.0), (2, 1))
    want = np.array([0, 0, 0, 0, 1, 1, 2, 2, 3, 3], float)
    np.testing.assert_array_equal(assemble_context(ramp, 1, 2), want)
    X = context_matrix(V, 2)
    for n in range(5):
        np.testing.assert_array_equal(X[n], assemble_context(V, n, 2))
    with pytest.raises(IndexError):
        assemble_context(V, 5, 1)


def test_forward_examples():
    zero = init_model(4, 3, hidden_dims=(5,), seed=0)
    zero = zero.with_params({k: np.zeros_like(v) for k, v in zero.params().items()})
    x = np.ones(4)
    assert not encode(zero, x).any() and not decode(zero, np.ones(3)).any()
    # zero weights: the sigmoid layer sits at 1/2 everywhere
    assert np.all(ae._run(zero.encoder[:1], x) == 0.5)

    m = small_net(11, M=4, K=3, hidden=(5, 4))
    x = np.random.default_rng(0).uniform(size=4)
    np.testing.assert_array_equal(forward_dropout(m, x, np.ones(3)), decode(m, encode(m, x)))
    np.testing.assert_array_equal(forward_dropout(m, x, np.zeros(3)),
                                  forward_dropout(m, 2 * x + 1, np.zeros(3)))
    with pytest.raises(ValueError):
        encode(m, np.ones(5))


def reference_forward(layers, x):
    a = list(x)
    for layer in layers:
        out = []
        for j in range(layer.W.shape[1]):
            z = layer.b[j] + sum(a[i] * layer.W[i, j] for i in range(len(a)))
            out.append(1 / (1 + math.exp(-z)) if layer.activation == "sigmoid" else max(z, 0.0))
        a = out
    return np.array(a)


def test_forward_matches_reference():
    m = small_net(4, context=1, M=3, K=3, hidden=(4, 5))
    x = np.random.default_rng(4).uniform(size=9)
    r = encode(m, x)
    np.testing.assert_allclose(r, reference_forward(m.encoder, x), atol=1e-12)
    np.testing.assert_allclose(decode(m, r), reference_forward(m.decoder, r), atol=1e-12)


def test_sparse_decoder_bias_path():
    m = small_net(6, M=4, K=4, hidden=(3,))
    params = dict(m.params())
    W0 = np.zeros_like(params["decoder.0.W"])
    W0[3] = 1.0
    params["decoder.0.W"] = W0
    m = m.with_params(params)
    x = np.random.default_rng(1).uniform(size=4)
    bias_path = decode(m, np.zeros(4))
    np.testing.assert_array_equal(forward_dropout(m, x, np.array([1.0, 1, 1, 0])), bias_path)


def test_outputs_nonnegative():
    m = init_model(6, 3, 1, (5,), seed=3)
    X = np.random.default_rng(2).uniform(size=(10, 18))
    assert (encode(m, X) >= 0).all() and (decode(m, encode(m, X)) >= 0).all()


def test_nonneg_decoder_is_monotone():
    rng = np.random.default_rng(8)
    m = init_model(6, 4, hidden_dims=(5,), nonneg_decoder=True, seed=8)
    m = m.with_params({k: v + rng.normal(size=v.shape) if k.endswith(".b") else v
                       for k, v in m.params().items()})
    for _ in range(50):
        r = rng.uniform(0, 2, 4)
        k = rng.integers(4)
        bumped = r.copy()
        bumped[k] += rng.uniform(0, 1)
        assert (decode(m, bumped) >= decode(m, r)).all()


def test_project_nonneg():
    m = init_model(4, 3, hidden_dims=(3,), seed=5)
    p = project_nonneg(m)
    for a, b in zip(m.decoder, p.decoder):
        np.testing.assert_array_equal(b.W, np.maximum(a.W, 0))
        np.testing.assert_array_equal(b.b, a.b)
        if (a.W < 0).any():
            assert b.W.min() == 0.0
    for a, b in zip(m.encoder, p.encoder):
        np.testing.assert_array_equal(b.W, a.W)
    q = project_nonneg(p)
    for a, b in zip(p.decoder, q.decoder):
        np.testing.assert_array_equal(a.W, b.W)
    params = dict(m.params())
    params["decoder.0.W"] = np.full_like(params["decoder.0.W"], -0.3)
    assert not project_nonneg(m.with_params(params)).decoder[0].W.any()


def toy_instance():
    rng = np.random.default_rng(0)
    V = rng.uniform(0, 1, (8, 16))
    L = (rng.uniform(size=(4, 16)) < 0.5).astype(float)
    return V, L


def test_train_zero_iterations_is_identity():
    m = init_model(8, 4, hidden_dims=(6,), seed=0)
    V, L = toy_instance()
    out, trace = train(m, V, L, TrainConfig(stage1_iters=0, stage2_iters=0))
    assert trace.all == []
    for k, v in m.params().items():
        np.testing.assert_array_equal(out.params()[k], v)


def test_train_descends_and_is_deterministic():
    V, L = toy_instance()
    cfg = TrainConfig(stage1_iters=500, stage2_iters=20, step_size=1e-3, loss_tolerance=0)
    m = init_model(8, 4, hidden_dims=(6,), nonneg_decoder=True, seed=0)
    a, ta = train(m, V, L, cfg)
    b, tb = train(m, V, L, cfg)
    assert len(ta.stage1) == 500 and len(ta.stage2) == 20
    assert loss_dropout(a, V, L) < ta.stage1[0]
    assert ta.all == tb.all
    assert all(l.W.min() >= 0 for l in a.decoder)
    for k, v in a.params().items():
        np.testing.assert_array_equal(v, b.params()[k])


def test_train_early_stop():
    V, L = toy_instance()
    m = init_model(8, 4, hidden_dims=(6,), seed=0)
    _, trace = train(m, V, L, TrainConfig(stage1_iters=5000, stage2_iters=0,
                                           step_size=1e-3, loss_tolerance=0.5, patience=10))
    assert 10 < len(trace.stage1) < 5000


def test_train_nonfinite_raises():
    V, L = toy_instance()
    m = init_model(8, 4, hidden_dims=(6,), seed=0)
    params = dict(m.params())
    params["decoder.0.b"] = np.full_like(params["decoder.0.b"], np.nan)
    with pytest.raises(TrainingDivergedError, match="iteration 0 of stage 1"):
        train(m.with_params(params), V, L, TrainConfig(stage1_iters=3, stage2_iters=0))


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    m = init_model(5, 3, 1, (4,), nonneg_decoder=True, seed=3)
    m.input_scale = 2.5
    save_model(tmp_path / "a.model", m, {"note": "x"})
    save_model(tmp_path / "b.model", m, {"note": "x"})
    assert (tmp_path / "a.model").read_bytes() == (tmp_path / "b.model").read_bytes()
    loaded, extra = load_model(tmp_path / "a.model")
    assert extra == {"note": "x"}
    assert loaded.context == 1 and loaded.nonneg_decoder and loaded.input_scale == 2.5
    assert loaded.topology == m.topology
    for k, v in m.params().items():
        assert loaded.params()[k].tobytes() == v.tobytes()


def test_estimator():
    V, L = toy_instance()
    est = StructuredDropoutAutoencoder(hidden_dims=(6,), stage1_iters=30, stage2_iters=5,
                                       step_size=1e-3, nonneg_decoder=True, random_state=1)
    assert clone(est).get_params() == est.get_params()
    with pytest.raises(NotFittedError):
        est.transform(V.T)
    est.fit(V.T, L.T)
    assert est.transform(V.T).shape == (16, 4)
    assert est.reconstruct(V.T, L.T).shape == (16, 8)
    assert np.isfinite(est.score(V.T, L.T))
    assert len(est.loss_trace_.all) == 35
    with pytest.raises(ValueError):
        est.fit(V.T, L.T[:3])
    with pytest.raises(ValueError):
        est.fit(-V.T, L.T)
    again = StructuredDropoutAutoencoder.from_model(est.model_)
    np.testing.assert_array_equal(again.transform(V.T), est.transform(V.T))


def test_estimator_input_peak():
    V, L = toy_instance()
    est = StructuredDropoutAutoencoder(hidden_dims=(6,), stage1_iters=3, stage2_iters=0,
                                       input_peak=10.0).fit(V.T, L.T)
    assert est.model_.input_scale == pytest.approx(V.max() / 10.0)
    raw = StructuredDropoutAutoencoder(hidden_dims=(6,), stage1_iters=3, stage2_iters=0,
                                       normalize=False, input_peak=10.0).fit(V.T, L.T)
    assert raw.model_.input_scale == 1.0
    with pytest.raises(ValueError, match="input_peak"):
        StructuredDropoutAutoencoder(input_peak=0.0).fit(V.T, L.T)
