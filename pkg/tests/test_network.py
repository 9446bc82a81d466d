import numpy as np
import pytest

from binn import nn
from binn.errors import NumericalError, ShapeError
from binn.nn import mlp_config, parse_config, config_to_text


def toy_blobs_2class(n=400, seed=0, noise=0.25):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, n)
    centers = np.array([[-0.5, -0.5], [0.5, 0.5]])
    x = centers[labels] + rng.normal(0, noise, (n, 2))
    return np.clip(x, -1, 1).astype(np.float32), labels.astype(np.int64)


# -------------------------------------------------------------- forward


def test_zeroed_final_layer_gives_uniform():
    cfg = mlp_config((1, 1, 8), [16], 5, variant="DNN", batchnorm=False)
    net = nn.Network.from_config(cfg, seed=0)
    last = net.layers[-1]
    last.w.value[:] = 0
    last.b.value[:] = 0
    p = net.predict_proba(np.random.default_rng(0).standard_normal((3, 1, 1, 8)))
    assert np.allclose(p, 0.2, atol=1e-12)


def test_forward_deterministic_row_repeat():
    cfg = mlp_config((1, 8, 8), [32, 32], 4, variant="SB")
    net = nn.Network.from_config(cfg, seed=1)
    x = np.random.default_rng(1).uniform(-1, 1, (1, 1, 8, 8)).astype(np.float32)
    batch = np.repeat(x, 2, axis=0)
    p = net.predict_proba(batch)
    assert np.array_equal(p[0], p[1])
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_tiny_fixed_net_matches_dense_oracle():
    cfg = mlp_config((1, 1, 3), [2], 2, variant="DNN", batchnorm=False)
    net = nn.Network.from_config(cfg, seed=0)
    w1 = np.array([[1.0, -1.0, 0.5], [0.0, 2.0, -1.0]], dtype=np.float32)
    b1 = np.array([0.1, -0.2], dtype=np.float32)
    w2 = np.array([[1.0, 1.0], [-1.0, 0.5]], dtype=np.float32)
    b2 = np.zeros(2, dtype=np.float32)
    net.layers[0].w.value = w1
    net.layers[0].b.value = b1
    net.layers[2].w.value = w2
    net.layers[2].b.value = b2
    x = np.array([[[[0.5, -0.5, 1.0]]]], dtype=np.float32)
    h = np.maximum(x.reshape(1, 3) @ w1.T + b1, 0)
    logits = h @ w2.T + b2
    e = np.exp(logits - logits.max())
    want = e / e.sum()
    assert np.allclose(net.predict_proba(x), want, atol=1e-6)


def test_shape_mismatch_names_layer_index():
    cfg = mlp_config((1, 8, 8), [16], 4, variant="SB")
    net = nn.Network.from_config(cfg, seed=0)
    with pytest.raises(ShapeError, match="layer 0"):
        net.forward(np.zeros((2, 1, 4, 4), dtype=np.float32))


def test_train_eval_toggle_only_bn_dropout():
    # without batchnorm or dropout, train and eval forwards are identical
    cfg = mlp_config((1, 1, 16), [32], 3, variant="SB", batchnorm=False)
    net = nn.Network.from_config(cfg, seed=3)
    x = np.random.default_rng(3).uniform(-1, 1, (8, 1, 1, 16)).astype(np.float32)
    same = net.forward(x, train=True, rng=np.random.default_rng(0))
    assert np.array_equal(net.forward(x), same)
    # with dropout, train mode differs while eval stays put
    cfg2 = mlp_config((1, 1, 16), [32], 3, variant="SB", batchnorm=False, dropout=0.5)
    net2 = nn.Network.from_config(cfg2, seed=3)
    e1 = net2.forward(x)
    assert np.array_equal(e1, net2.forward(x))
    t1 = net2.forward(x, train=True, rng=np.random.default_rng(0))
    assert not np.array_equal(e1, t1)


# ------------------------------------------------------------- STE checks


def build_ste_test_net(dtype=np.float64, seed=11):
    """Fixed 3-layer net with explicit binarizations for gradient checks."""
    text = """
name: ste-check
input: 1x1x6
classes: 3
layer: binact
layer: fc out=8 wbits=1 abits=32
layer: relu
layer: binact
layer: fc out=8 wbits=32 abits=1
layer: relu
layer: fc out=3 wbits=32 abits=32
"""
    cfg = parse_config(text)
    return nn.Network.from_config(cfg, seed=seed, dtype=dtype)


def surrogate_loss(net, x, y):
    logits = net.forward(x, surrogate=True)
    probs = nn.softmax(logits)
    loss, _ = nn.cross_entropy_grad(probs, y)
    return loss


def test_ste_gradient_matches_finite_differences_of_surrogate():
    net = build_ste_test_net()
    rng = np.random.default_rng(42)
    x = rng.uniform(-1.6, 1.6, (4, 1, 1, 6))
    y = rng.integers(0, 3, 4)
    logits = net.forward(x, surrogate=True)
    probs = nn.softmax(logits)
    loss, dlogits = nn.cross_entropy_grad(probs, y)
    net.zero_grad()
    gx = net.backward(dlogits)
    h = 1e-6
    fd = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        if abs(abs(old) - 1.0) < 10 * h:
            continue  # clip kink, derivative undefined there
        flat[i] = old + h
        lp = surrogate_loss(net, x, y)
        flat[i] = old - h
        lm = surrogate_loss(net, x, y)
        flat[i] = old
        fd.reshape(-1)[i] = (lp - lm) / (2 * h)
    mask = np.abs(np.abs(x) - 1.0) >= 10 * h
    assert np.allclose(gx[mask], fd[mask], atol=1e-4)


def test_ste_gradient_exactly_zero_outside_unit_interval():
    net = build_ste_test_net(dtype=np.float32)
    rng = np.random.default_rng(7)
    x = rng.uniform(-3, 3, (16, 1, 1, 6)).astype(np.float32)
    y = rng.integers(0, 3, 16)
    logits = net.forward(x)  # real binarized path
    probs = nn.softmax(logits)
    _, dlogits = nn.cross_entropy_grad(probs, y)
    net.zero_grad()
    gx = net.backward(dlogits.astype(np.float32))
    assert np.all(gx[np.abs(x) > 1.0] == 0.0)
    # every binact layer individually blocks gradient where |input| > 1
    for lay, g in zip(net.layers, net.last_input_grads):
        if lay.kind == "binact":
            assert np.all(g[np.abs(lay._xin) > 1.0] == 0.0)


# ---------------------------------------------------------------- training


def test_zero_learning_rate_keeps_weights_bit_exact():
    cfg = mlp_config((1, 1, 2), [8], 2, variant="SB")
    net = nn.Network.from_config(cfg, seed=5)
    before = [p.value.copy() for p in net.parameters()]
    x, y = toy_blobs_2class(64, seed=5)
    opt = nn.Adam(net.parameters(), lr=0.0)
    nn.backward_and_step(net, x.reshape(-1, 1, 1, 2), y, opt, rng=np.random.default_rng(0))
    for old, p in zip(before, net.parameters()):
        assert np.array_equal(old, p.value)


def test_uniform_weights_equal_unweighted():
    cfg = mlp_config((1, 1, 2), [8], 2, variant="SB")
    x, y = toy_blobs_2class(32, seed=6)
    xb = x.reshape(-1, 1, 1, 2)
    losses = []
    finals = []
    for weights in (None, np.full(32, 1.0 / 32)):
        net = nn.Network.from_config(cfg, seed=6)
        opt = nn.Adam(net.parameters(), lr=1e-3)
        loss = nn.backward_and_step(net, xb, y, opt, sample_weights=weights,
                                    rng=np.random.default_rng(1))
        losses.append(loss)
        finals.append([p.value.copy() for p in net.parameters()])
    assert losses[0] == losses[1]
    for a, b in zip(*finals):
        assert np.array_equal(a, b)


def test_toy_blobs_binary_mlp_trains_to_95():
    # run-to-convergence oracle; threshold frozen from the first calibration
    x, y = toy_blobs_2class(256, seed=0, noise=0.18)
    xb = x.reshape(-1, 1, 1, 2)
    cfg = mlp_config((1, 1, 2), [32, 32], 2, variant="SB")
    net = nn.Network.from_config(cfg, seed=0)
    opt = nn.Adam(net.parameters(), lr=3e-3)
    rng = np.random.default_rng(0)
    for _ in range(200):
        idx = rng.integers(0, 256, 64)
        nn.backward_and_step(net, xb[idx], y[idx], opt, rng=rng)
    assert nn.accuracy(net, xb, y) >= 0.95


@pytest.mark.parametrize("opt_name", ["adam", "sgd"])
def test_optimizers_stay_finite_10k_steps(opt_name):
    x, y = toy_blobs_2class(64, seed=8)
    xb = x.reshape(-1, 1, 1, 2)
    cfg = mlp_config((1, 1, 2), [8], 2, variant="AB", batchnorm=True)
    net = nn.Network.from_config(cfg, seed=8)
    opt = nn.make_optimizer(opt_name, net.parameters(), lr=0.001)
    rng = np.random.default_rng(2)
    for _ in range(10_000):
        idx = rng.integers(0, 64, 16)
        nn.backward_and_step(net, xb[idx], y[idx], opt, rng=rng)
    for p in net.parameters():
        assert np.isfinite(p.value).all()


def test_nan_loss_aborts_with_diagnostics():
    cfg = mlp_config((1, 1, 2), [4], 2, variant="DNN", batchnorm=False)
    net = nn.Network.from_config(cfg, seed=9)
    net.layers[0].w.value[:] = np.float32(1e38)  # overflow to inf logits
    x = np.full((4, 1, 1, 2), 1e5, dtype=np.float32)
    y = np.zeros(4, dtype=np.int64)
    opt = nn.SGD(net.parameters(), lr=0.1)
    with pytest.raises(NumericalError, match="non-finite"):
        nn.backward_and_step(net, x, y, opt, rng=np.random.default_rng(0))


def test_train_network_history_and_patience():
    x, y = toy_blobs_2class(128, seed=10)
    xb = x.reshape(-1, 1, 1, 2)
    cfg = mlp_config((1, 1, 2), [16], 2, variant="SB")
    net = nn.Network.from_config(cfg, seed=10)
    opt = nn.Adam(net.parameters(), lr=1e-2)
    hist = nn.train_network(net, xb, y, epochs=30, batch_size=32, optimizer=opt,
                            rng=3, eval_images=xb, eval_labels=y, patience=3)
    assert len(hist.train_loss) == len(hist.test_accuracy)
    assert len(hist.train_loss) <= 30


# ------------------------------------------------------------------ config


def test_config_roundtrip_and_hash():
    cfg = mlp_config((1, 8, 8), [32, 16], 4, variant="AQB", q=3, dropout=0.5)
    text = config_to_text(cfg)
    again = parse_config(text)
    assert again == cfg
    assert config_to_text(again) == text
    assert nn.config_hash(cfg) == nn.config_hash(again)


def test_variant_precision_assignment():
    for variant, first, mid, last in [
        ("SB", (32, 32), (1, 1), (32, 32)),
        ("AB", (1, 1), (1, 1), (1, 1)),
        ("IB", (1, 32), (1, 1), (1, 1)),
        ("WQB", (2, 1), (2, 1), (2, 1)),
        ("AQB", (1, 2), (1, 2), (1, 2)),
        ("DNN", (32, 32), (32, 32), (32, 32)),
    ]:
        cfg = mlp_config((1, 1, 8), [16, 16], 4, variant=variant, q=2)
        fcs = [l for l in cfg.layers if l.kind == "fc"]
        got = [(l.get("wbits"), l.get("abits")) for l in fcs]
        assert got == [first, mid, last], variant


def test_nin_config_instantiates_reduced_scale():
    cfg = nn.nin_config(variant="SB", width_scale=0.25, classes=10)
    net = nn.Network.from_config(cfg, seed=0)
    x = np.random.default_rng(0).uniform(-1, 1, (2, 3, 32, 32)).astype(np.float32)
    p = net.predict_proba(x)
    assert p.shape == (2, 10)
    assert np.allclose(p.sum(axis=1), 1, atol=1e-6)


def test_bundled_architecture_tables_parse():
    import importlib.resources as res

    for fname, n_weighted in [("nin.cfg", 8), ("alexnet.cfg", 8), ("resnet18.cfg", 21)]:
        text = (res.files("binn") / "configs" / fname).read_text()
        cfg = parse_config(text)
        weighted = [l for l in cfg.layers if l.kind in ("conv", "fc")]
        assert len(weighted) == n_weighted, fname
