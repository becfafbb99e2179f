import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fd import grad_mismatch, numeric_grad
from hierflow import autograd as ag
from hierflow.autograd import ParameterStore, Tape
from hierflow.errors import ConfigError, DimensionError
from hierflow.patch import (PatchConfig, PatchEncoder, depthwise_conv, embed, patchify, pointwise,
                            pointwise_conv)


def test_patch_count_for_default_geometry():
    assert PatchConfig(W=36, S=8).n_patches(72) == 5


def test_patchify_examples():
    x = np.arange(10.0)
    p = patchify(x, PatchConfig(W=4, S=3, D=4, Q=1))
    assert p.tolist() == [[0, 1, 2, 3], [3, 4, 5, 6], [6, 7, 8, 9]]
    single = patchify(x, PatchConfig(W=10, S=3, D=4, Q=1))
    assert np.array_equal(single, x[None])
    tail = patchify(np.arange(11.0), PatchConfig(W=4, S=3, D=4, Q=1))
    assert tail.shape == (3, 4)  # slot 10 dropped
    with pytest.raises(ConfigError):
        patchify(np.arange(3.0), PatchConfig(W=4, S=1, D=4, Q=1))


def test_embed_examples(rng):
    patches = rng.normal(size=(3, 4))
    b = np.array([1.0, -2.0, 0.5])
    out = embed(patches, np.zeros((4, 3)), b)
    assert out.shape == (1, 3, 3) and np.all(out.data[0] == b)
    same = embed(patches, np.eye(4), np.zeros(4))
    assert np.array_equal(same.data[0], patches)
    with pytest.raises(DimensionError):
        embed(patches, np.zeros((5, 3)), b)


def test_embed_weight_gradient_is_sum_of_outer_products(rng):
    patches = rng.normal(size=(1, 3, 4))
    w = ag.Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    with Tape() as tape:
        loss = ag.sum_(embed(patches, w, np.zeros(2)))
    tape.backward(loss)
    expected = sum(np.outer(p, np.ones(2)) for p in patches[0])
    assert np.allclose(w.grad, expected)


def test_depthwise_examples(rng):
    x = rng.normal(size=(1, 2, 5))
    assert np.allclose(depthwise_conv(x, np.array([1.0])).data, x)
    assert np.allclose(depthwise_conv(x, np.array([0.0, 1.0, 0.0])).data, x)
    ones = depthwise_conv(np.ones((1, 1, 5)), np.ones(3)).data[0, 0]
    assert ones.tolist() == [2, 3, 3, 3, 2]
    with pytest.raises(ConfigError):
        depthwise_conv(np.ones((1, 1, 3)), np.ones(4))


def test_pointwise_examples(rng):
    x = rng.normal(size=(1, 3, 4))
    assert np.allclose(pointwise_conv(x, np.eye(3)).data, x)
    mean = pointwise_conv(x, np.full((1, 3), 1 / 3)).data
    assert np.allclose(mean[0, 0], x[0].mean(axis=0))
    r = rng.normal(size=(1, 2, 4))
    out = pointwise_conv(r, np.array([[2.0, -1.0]])).data
    assert np.allclose(out[0, 0], 2 * r[0, 0] - r[0, 1])
    assert np.all(pointwise(r, np.array([[2.0, -1.0]])).data >= 0)


valid_configs = st.integers(1, 40).flatmap(lambda W: st.tuples(
    st.just(W), st.integers(W, W + 30), st.integers(1, 10), st.integers(1, 12), st.integers(1, 5)
)).flatmap(lambda t: st.tuples(st.just(t), st.integers(1, t[3])))


@settings(max_examples=50, deadline=None)
@given(valid_configs, st.integers(0, 2**31 - 1))
def test_shape_chain(cfg_tuple, seed):
    (W, L, S, D, A), Q = cfg_tuple
    cfg = PatchConfig(W=W, S=S, D=D, Q=Q, A=A)
    N = (L - W) // S + 1
    assert cfg.n_patches(L) == N
    rng = np.random.default_rng(seed)
    enc = PatchEncoder(ParameterStore(), "p", cfg, L, rng)
    x = rng.normal(size=L)
    p = patchify(x, cfg)
    assert p.shape == (N, W)
    e = embed(p, enc.embed_w, enc.embed_b)
    assert e.shape == (1, N, D)
    d = depthwise_conv(e, enc.depth_k)
    assert d.shape == (1, N, D)
    pw = pointwise_conv(d, enc.point_k, enc.point_b)
    assert pw.shape == (1, A, D)
    assert enc(x).shape == (1, A * D)


def test_patch_locality(rng):
    cfg = PatchConfig(W=6, S=4, D=5, Q=3, A=2)
    L = 18
    enc = PatchEncoder(ParameterStore(), "p", cfg, L, rng)
    x = rng.normal(size=L)
    base = embed(patchify(x, cfg), enc.embed_w, enc.embed_b).data[0]
    for j in range(L):
        y = x.copy()
        y[j] += 1.0
        moved = embed(patchify(y, cfg), enc.embed_w, enc.embed_b).data[0]
        changed = set(np.nonzero(np.any(moved != base, axis=1))[0].tolist())
        covering = {i for i in range(cfg.n_patches(L)) if i * cfg.S <= j < i * cfg.S + cfg.W}
        assert changed == covering


def test_encoder_gradients(rng):
    cfg = PatchConfig(W=6, S=3, D=5, Q=3, A=2)
    store = ParameterStore()
    enc = PatchEncoder(store, "p", cfg, 12, rng)
    x = rng.normal(size=(3, 12))
    w = rng.normal(size=(3, 10))

    def loss():
        return ag.sum_(ag.mul(ag.tanh(enc(x)), ag.Tensor(w)))

    with Tape() as tape:
        value = loss()
    tape.backward(value)
    for path, t in store.items():
        num = numeric_grad(lambda: loss().item(), t.data)
        assert grad_mismatch(t.grad, num) < 1e-4, path
