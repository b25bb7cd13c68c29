import numpy as np
import pytest

from gradcheck import network_gradient_errors, numeric_grad, rel_error, small_shape
from oracles import neighbors_of, random_graph
from sfcn import graphops as go
from sfcn import net
from sfcn.graphops import FAKE

TOL = 1e-4


def naive_conv(table, x, w, b):
    S, K = table.shape
    out = np.zeros((S, w.shape[2]))
    for r in range(S):
        if table[r, 0] == FAKE:
            continue
        for c_out in range(w.shape[2]):
            acc = b[c_out]
            for k in range(K):
                j = table[r, k]
                if j == FAKE:
                    continue
                for c_in in range(w.shape[1]):
                    acc += w[k, c_in, c_out] * x[j, c_in]
            out[r, c_out] = acc
    return out


def random_table(rng, S, K, fake_rows=()):
    t = np.array([rng.permutation(S)[:K] for _ in range(S)])
    t[:, 0] = np.arange(S)
    t[rng.random(t.shape) < 0.2] = FAKE
    t[:, 0] = np.arange(S)
    for r in fake_rows:
        t[r] = FAKE
    return t


# ---------------------------------------------------------------------------
# layer examples


def test_conv_identity_kernel():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 3))
    table = np.arange(6)[:, None]
    out, _ = net.conv_forward(table, x, np.eye(3)[None], np.zeros(3))
    np.testing.assert_array_equal(out, x)


def test_conv_all_fake_row_is_zero():
    rng = np.random.default_rng(0)
    table = random_table(rng, 8, 3, fake_rows=[2, 5])
    out, _ = net.conv_forward(table, rng.normal(size=(8, 2)), rng.normal(size=(3, 2, 4)), np.ones(4))
    assert not out[[2, 5]].any()


def test_conv_matches_naive_oracle():
    rng = np.random.default_rng(1)
    table = random_table(rng, 10, 4, fake_rows=[7])
    x, w, b = rng.normal(size=(10, 3)), rng.normal(size=(4, 3, 5)), rng.normal(size=5)
    out, _ = net.conv_forward(table, x, w, b)
    np.testing.assert_allclose(out, naive_conv(table, x, w, b), rtol=0, atol=1e-12)


def test_conv_shape_mismatch():
    with pytest.raises(ValueError):
        net.conv_forward(np.zeros((4, 3), dtype=int), np.zeros((4, 2)), np.zeros((2, 2, 1)), np.zeros(1))


def test_pool_example():
    x = np.array([[3.0], [1.0], [-5.0], [2.0]])
    mask = np.array([True, True, False, True])
    out, arg = net.pool_forward(x, mask)
    assert out[0, 0] == 3.0 and arg[0, 0] == 0


def test_pool_all_fake():
    out, arg = net.pool_forward(np.full((4, 2), 9.0), np.zeros(4, dtype=bool))
    assert not out.any() and np.all(arg == -1)


def test_pool_fake_wins_over_negative():
    out, arg = net.pool_forward(np.array([[-1.0], [-2.0], [7.0], [-3.0]]), np.array([True, True, False, True]))
    assert out[0, 0] == 0.0 and arg[0, 0] == -1
    dx = net.pool_backward(np.ones((1, 1)), arg)
    assert not dx.any()


def test_pool_backward_routes_to_argmax():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(12, 3))
    mask = np.ones(12, dtype=bool)
    out, arg = net.pool_forward(x, mask)
    dx = net.pool_backward(np.ones_like(out), arg)
    assert dx.sum() == out.size
    np.testing.assert_array_equal(dx.reshape(3, 4, 3).argmax(axis=1), arg)


def test_pooled_relu_nonnegative():
    rng = np.random.default_rng(3)
    out, _ = net.pool_forward(net.relu(rng.normal(size=(16, 4))), rng.random(16) < 0.6)
    assert np.all(out >= 0)


def test_deconv_nearest_neighbour():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    w = np.tile(np.eye(2), (4, 1, 1))
    out = net.deconv_forward(x, w, np.ones(8, dtype=bool))
    np.testing.assert_array_equal(out, np.repeat(x, 4, axis=0))


def test_deconv_single_row_and_fake_zeroing():
    rng = np.random.default_rng(4)
    x, w = rng.normal(size=(1, 3)), rng.normal(size=(4, 3, 3))
    mask = np.array([True, False, True, True])
    out = net.deconv_forward(x, w, mask)
    for k in range(4):
        np.testing.assert_allclose(out[k], x[0] @ w[k] if mask[k] else 0.0)


def test_deconv_matches_scatter_oracle():
    rng = np.random.default_rng(5)
    x, w = rng.normal(size=(5, 2)), rng.normal(size=(4, 2, 3))
    want = np.zeros((20, 3))
    for r in range(5):
        for k in range(4):
            want[4 * r + k] += x[r] @ w[k]
    np.testing.assert_allclose(net.deconv_forward(x, w, np.ones(20, dtype=bool)), want, atol=1e-12)


def test_relu():
    x = np.array([-2.0, -0.0, 0.0, 3.5])
    np.testing.assert_array_equal(net.relu(x), [0, 0, 0, 3.5])
    np.testing.assert_array_equal(net.relu(-np.abs(x)), 0)


def test_bn_training_statistics():
    rng = np.random.default_rng(6)
    x = rng.normal(3.0, 2.0, size=(40, 5))
    mask = rng.random(40) < 0.7
    out, _ = net.bn_forward(x, np.ones(5), np.zeros(5), mask)
    np.testing.assert_allclose(out[mask].mean(axis=0), 0, atol=1e-6)
    np.testing.assert_allclose(out[mask].var(axis=0), 1, atol=1e-4)
    assert not out[~mask].any()


def test_bn_zero_real_rows():
    with pytest.raises(ValueError):
        net.bn_forward(np.ones((4, 2)), np.ones(2), np.zeros(2), np.zeros(4, dtype=bool))


def test_dropout_reproducible():
    a = net.dropout_mask((50, 7), 0.5, np.random.default_rng(11))
    b = net.dropout_mask((50, 7), 0.5, np.random.default_rng(11))
    assert a.tobytes() == b.tobytes()
    assert set(np.unique(a)) <= {0.0, 2.0}


def test_softmax_loss_examples():
    labels = np.array([0, 2, 1])
    big = np.full((3, 3), -50.0)
    big[np.arange(3), labels] = 50.0
    loss, _ = net.softmax_loss(big, labels)
    assert loss < 1e-30
    loss, _ = net.softmax_loss(np.zeros((5, 4)), np.array([0, 1, 2, 3, 0]))
    assert loss == pytest.approx(5 * np.log(4))


def test_softmax_shift_invariant():
    rng = np.random.default_rng(7)
    s = rng.normal(size=(6, 4))
    shift = rng.normal(size=(6, 1)) * 100
    np.testing.assert_allclose(net.softmax(s + shift), net.softmax(s), atol=1e-12)
    np.testing.assert_allclose(net.softmax(s).sum(axis=1), 1.0)


# ---------------------------------------------------------------------------
# layer gradients


def test_grad_softmax_loss():
    rng = np.random.default_rng(8)
    s, labels = rng.normal(size=(7, 3)), rng.integers(0, 3, 7)
    _, g = net.softmax_loss(s, labels)
    assert rel_error(g, numeric_grad(lambda: net.softmax_loss(s, labels)[0], s)) < TOL


def test_grad_conv():
    rng = np.random.default_rng(9)
    table = random_table(rng, 20, 4, fake_rows=[3])
    x, w, b = rng.normal(size=(20, 3)), rng.normal(size=(4, 3, 3)), rng.normal(size=3)
    R = rng.normal(size=(20, 3))
    out, gathered = net.conv_forward(table, x, w, b)
    dx, dw, db = net.conv_backward(table, gathered, w, R)
    f = lambda: (net.conv_forward(table, x, w, b)[0] * R).sum()  # noqa: E731
    assert rel_error(dx, numeric_grad(f, x)) < TOL
    assert rel_error(dw, numeric_grad(f, w)) < TOL
    assert rel_error(db, numeric_grad(f, b)) < TOL


def test_grad_conv_scatter_matches_add_at():
    st, x, rng = small_shape()
    t = st.tables[0]
    a = rng.normal(size=(len(t), 3))
    w = rng.normal(size=(4, 3, 2))
    _, gathered = net.conv_forward(t, a, w, np.zeros(2))
    dout = rng.normal(size=(len(t), 2))
    d1 = net.conv_backward(t, gathered, w, dout)[0]
    d2 = net.conv_backward(t, gathered, w, dout, st.scatter_matrix(0))[0]
    np.testing.assert_allclose(d1, d2, atol=1e-12)


def test_conv_k1_identity_passes_gradient():
    rng = np.random.default_rng(10)
    table = np.arange(5)[:, None]
    x = rng.normal(size=(5, 3))
    _, gathered = net.conv_forward(table, x, np.eye(3)[None], np.zeros(3))
    dout = rng.normal(size=(5, 3))
    dx, _, _ = net.conv_backward(table, gathered, np.eye(3)[None], dout)
    np.testing.assert_array_equal(dx, dout)


def test_grad_pool():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(20, 3))
    mask = rng.random(20) < 0.8
    R = rng.normal(size=(5, 3))
    _, arg = net.pool_forward(x, mask)
    dx = net.pool_backward(R, arg)
    assert rel_error(dx, numeric_grad(lambda: (net.pool_forward(x, mask)[0] * R).sum(), x)) < TOL


def test_grad_deconv():
    rng = np.random.default_rng(12)
    x, w = rng.normal(size=(5, 3)), rng.normal(size=(4, 3, 3))
    mask = rng.random(20) < 0.8
    R = rng.normal(size=(20, 3))
    dx, dw = net.deconv_backward(x, w, mask, R)
    f = lambda: (net.deconv_forward(x, w, mask) * R).sum()  # noqa: E731
    assert rel_error(dx, numeric_grad(f, x)) < TOL
    assert rel_error(dw, numeric_grad(f, w)) < TOL


def test_grad_dense():
    rng = np.random.default_rng(13)
    x, w, b = rng.normal(size=(20, 3)), rng.normal(size=(3, 4)), rng.normal(size=4)
    mask = rng.random(20) < 0.8
    R = rng.normal(size=(20, 4))
    dx, dw, db = net.dense_backward(x, w, mask, R)
    f = lambda: (net.dense_forward(x, w, b, mask) * R).sum()  # noqa: E731
    assert rel_error(dx, numeric_grad(f, x)) < TOL
    assert rel_error(dw, numeric_grad(f, w)) < TOL
    assert rel_error(db, numeric_grad(f, b)) < TOL


def test_grad_relu():
    rng = np.random.default_rng(14)
    x = rng.normal(size=(20, 3))
    R = rng.normal(size=(20, 3))
    dx = net.relu_backward(x, R)
    assert rel_error(dx, numeric_grad(lambda: (net.relu(x) * R).sum(), x)) < TOL


def test_grad_batch_norm():
    rng = np.random.default_rng(15)
    x = rng.normal(size=(20, 3))
    gamma, beta = rng.normal(size=3), rng.normal(size=3)
    mask = rng.random(20) < 0.8
    R = rng.normal(size=(20, 3))
    _, cache = net.bn_forward(x, gamma, beta, mask)
    dx, dg, dbt = net.bn_backward(R, gamma, mask, cache)
    f = lambda: (net.bn_forward(x, gamma, beta, mask)[0] * R).sum()  # noqa: E731
    assert rel_error(dx, numeric_grad(f, x)) < TOL
    assert rel_error(dg, numeric_grad(f, gamma)) < TOL
    assert rel_error(dbt, numeric_grad(f, beta)) < TOL


def test_grad_dropout():
    rng = np.random.default_rng(16)
    x = rng.normal(size=(20, 3))
    m = net.dropout_mask(x.shape, 0.5, np.random.default_rng(3))
    R = rng.normal(size=(20, 3))
    assert rel_error(R * m, numeric_grad(lambda: (x * m * R).sum(), x)) < TOL


@pytest.mark.parametrize("batch_norm", [True, False])
def test_grad_two_block_network(batch_norm):
    st, x, rng = small_shape(n=20, K=4, C=3, pool_layers=2)
    spec = net.NetworkSpec(n_labels=3, in_channels=3, widths=(4, 5), fc_width=6, K=4,
                           dropout=0.5, batch_norm=batch_norm)
    errors = network_gradient_errors(spec, st, x, rng.integers(0, 3, 20))
    bad = {k: e for k, e in errors.items() if not e < TOL}
    assert not bad, bad


# ---------------------------------------------------------------------------
# network contracts


def _spec(C=3, n=3, P=2):
    return net.NetworkSpec(n_labels=n, in_channels=C, widths=(4, 5, 6)[:P], fc_width=8, K=4)


def test_predict_rows_equal_faces():
    for n_nodes in (1, 7, 33):
        st, x, _ = small_shape(n=n_nodes, pool_layers=3)
        spec = _spec(P=3)
        p = net.predict(spec, net.init_params(spec, 0), st, x)
        assert p.shape == (n_nodes, 3)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_nine_node_row_bookkeeping():
    rng = np.random.default_rng(4)
    edges = np.array([[0, 3], [0, 7], [1, 2], [1, 5], [2, 8], [3, 6], [4, 5], [4, 8], [6, 7], [3, 4]])
    x = rng.uniform(size=(9, 3))
    st, h = go.prepare_tables(neighbors_of(9, edges), edges, x, np.ones(9), 4, 1)
    spec = _spec(P=1)
    scores, cache = net.forward(spec, net.init_params(spec, 0), st, x)
    assert cache["ups"][0].shape[0] * 4 == h.levels[0].n_slots > 9
    assert scores.shape == (9, 3)


def test_zero_projection_passes_upsampled_scores():
    st, x, _ = small_shape(pool_layers=1)
    spec = _spec(P=1)
    store = net.init_params(spec, 0)
    store.params["proj0.w"][:] = 0
    store.params["proj0.b"][:] = 0
    scores, cache = net.forward(spec, store, st, x)
    up = net.deconv_forward(cache["ups"][0], store.params["deconv0.w"], st.masks[0])
    np.testing.assert_array_equal(scores, up[st.input_slots])


def test_single_node_shape_pools_to_itself():
    st, x, _ = small_shape(n=1, pool_layers=1)
    assert len(st.masks[0]) == 4 and st.masks[0].sum() == 1
    spec = _spec(P=1)
    store = net.init_params(spec, 0)
    _, cache = net.forward(spec, store, st, x)
    a = cache["pools"][0]
    z = cache["blocks"][0]["z"]
    np.testing.assert_array_equal(a[0], np.maximum(z[st.input_slots[0]], 0))


def test_fake_slots_are_isolated():
    rng = np.random.default_rng(17)
    st, x, _ = small_shape(n=25, pool_layers=2)
    t, mask = st.tables[0], st.masks[0]
    a = np.zeros((len(mask), 3))
    a[st.input_slots] = x
    noisy = a.copy()
    noisy[~mask] = rng.normal(size=((~mask).sum(), 3)) * 100
    w, b = rng.normal(size=(4, 3, 5)), rng.normal(size=5)
    out1, g1 = net.conv_forward(t, a, w, b)
    out2, g2 = net.conv_forward(t, noisy, w, b)
    np.testing.assert_array_equal(out1[mask], out2[mask])
    dout = rng.normal(size=out1.shape)
    np.testing.assert_array_equal(net.conv_backward(t, g1, w, dout)[1], net.conv_backward(t, g2, w, dout)[1])
    r = net.relu(out1)
    r_noisy = r.copy()
    r_noisy[~mask] = 1e6
    np.testing.assert_array_equal(net.pool_forward(r, mask)[0], net.pool_forward(r_noisy, mask)[0])


def test_relabeling_faces_relabels_output():
    st, x, rng = small_shape(n=30, pool_layers=2)
    spec = _spec(P=2)
    store = net.init_params(spec, 1)
    perm = rng.permutation(30)
    st2 = go.ShapeTables(st.h, st.K, st.tables, st.masks, np.empty_like(st.input_slots))
    st2.input_slots[perm] = st.input_slots
    x2 = np.empty_like(x)
    x2[perm] = x
    p1 = net.predict(spec, store, st, x)
    p2 = net.predict(spec, store, st2, x2)
    np.testing.assert_array_equal(p2[perm], p1)


def test_sgd_example():
    store = net.ParamStore({"a.w": np.array([1.0])}, {"a.w": np.array([0.0])}, {})
    net.sgd_step(store, {"a.w": np.array([1.0])}, lr=0.1)
    assert store.velocity["a.w"][0] == pytest.approx(-0.1001, abs=1e-15)
    assert store.params["a.w"][0] == pytest.approx(0.8999, abs=1e-15)


def test_sgd_two_steps_bit_exact():
    w0, g1, g2, lr, m, wd = 0.37, 0.21, -0.55, 0.05, 0.9, 1e-3
    store = net.ParamStore({"l.w": np.array([w0]), "l.b": np.array([w0])},
                           {"l.w": np.array([0.0]), "l.b": np.array([0.0])}, {})
    w = wb = w0
    v = vb = 0.0
    for g in (g1, g2):
        net.sgd_step(store, {"l.w": np.array([g]), "l.b": np.array([g])}, lr, m, wd)
        v = v * m - lr * (g + wd * w)
        w = w + v
        vb = vb * m - lr * g  # biases are not decayed
        wb = wb + vb
    assert store.params["l.w"][0] == w and store.velocity["l.w"][0] == v
    assert store.params["l.b"][0] == wb


def test_sgd_zero_gradient_only_decays():
    store = net.ParamStore({"k.w": np.array([2.0]), "k.b": np.array([2.0])},
                           {"k.w": np.array([0.0]), "k.b": np.array([0.0])}, {})
    net.sgd_step(store, {"k.w": np.array([0.0]), "k.b": np.array([0.0])}, lr=0.5, weight_decay=0.1)
    assert store.params["k.w"][0] == pytest.approx(2.0 - 0.5 * 0.1 * 2.0)
    assert store.params["k.b"][0] == 2.0


def test_sgd_rejects_non_finite():
    store = net.ParamStore({"a.w": np.array([1.0])}, {"a.w": np.array([0.0])}, {})
    with pytest.raises(net.NumericalError):
        net.sgd_step(store, {"a.w": np.array([np.nan])}, lr=0.1)
    assert store.params["a.w"][0] == 1.0


def test_train_rejects_bad_labels():
    st, x, _ = small_shape(pool_layers=2)
    with pytest.raises(ValueError):
        net.train([net.TrainingSample(st, x, np.full(20, 5))], _spec(), net.TrainConfig(epochs=1))


def test_training_is_deterministic():
    st, x, rng = small_shape(n=40, pool_layers=2)
    labels = (x[:, 0] > 0.5).astype(int)
    cfg = net.TrainConfig(epochs=4, lr=1e-3, seed=3)
    a = net.train([net.TrainingSample(st, x, labels)], _spec(), cfg)
    b = net.train([net.TrainingSample(st, x, labels)], _spec(), cfg)
    assert a.losses == b.losses
    for k in a.store.params:
        assert a.store.params[k].tobytes() == b.store.params[k].tobytes()


def test_training_reduces_loss():
    st, x, _ = small_shape(n=60, pool_layers=2, seed=2)
    labels = (x[:, 0] > 0.5).astype(int)
    res = net.train([net.TrainingSample(st, x, labels)], _spec(), net.TrainConfig(epochs=40, lr=1e-3))
    assert res.losses[-1] < 0.5 * res.losses[0]


def test_checkpoint_round_trip(tmp_path):
    spec = _spec()
    store = net.init_params(spec, 5)
    store.epoch = 7
    net.save_checkpoint(tmp_path / "c.npz", spec, store)
    spec2, store2 = net.load_checkpoint(tmp_path / "c.npz")
    assert spec2 == spec and store2.epoch == 7 and store2.seed == 5
    for k in store.params:
        np.testing.assert_array_equal(store2.params[k], store.params[k])
    net.save_checkpoint(tmp_path / "d.npz", spec, store)
    assert (tmp_path / "c.npz").read_bytes() == (tmp_path / "d.npz").read_bytes()


def test_lr_schedule():
    cfg = net.TrainConfig(epochs=100, lr=1.0)
    assert cfg.lr_at(0) == 1.0 and cfg.lr_at(59) == 1.0
    assert cfg.lr_at(60) == pytest.approx(0.1) and cfg.lr_at(85) == pytest.approx(0.01)


def test_random_graph_helper_is_simple():
    e = random_graph(50, np.random.default_rng(0))
    assert np.all(e[:, 0] < e[:, 1]) and len(np.unique(e, axis=0)) == len(e)


@pytest.mark.slow
def test_overfit_two_shapes():
    from sfcn import evaluate as ev
    from sfcn import features as feat
    from sfcn.synthetic import dumbbell

    shapes = [dumbbell(1500, seed=s) for s in (0, 1)]
    prepared = ev.preprocess_all(shapes, ("SI",), feat.FeatureConfig(), 8, 5)
    stats = feat.channel_stats([p.raw["SI"] for p in prepared])
    samples = [net.TrainingSample(p.tables["SI"], feat.normalize_features(p.raw["SI"], stats).values,
                                  p.shape.labels) for p in prepared]
    spec = ev.network_spec(ev.NetConfig(), 3, samples[0].x.shape[1])
    res = net.train(samples, spec, net.TrainConfig(epochs=200))
    accs = [ev.labeling_accuracy(net.predict(spec, res.store, s.tables, s.x).argmax(axis=1), s.labels,
                                 p.shape.mesh.areas)["area_weighted"] for s, p in zip(samples, prepared)]
    assert min(accs) >= 0.99, accs
