import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import numeric_grad, rel_err, tape_grads
from lidartrack import autodiff as ad
from lidartrack.autodiff import Tensor

TOL = 1e-4


def check_op(build, arrays, tol=TOL):
    params = [Tensor(a, requires_grad=True) for a in arrays]
    _, grads = tape_grads(lambda: build(*params), params)

    def value():
        return float(build(*[Tensor(p.data) for p in params]).data)

    numeric = numeric_grad(value, [p.data for p in params])
    for g, n in zip(grads, numeric):
        assert rel_err(g, n) < tol


def weighted_sum(x, w):
    return ad.sum_all(ad.mul(x, Tensor(w)))


def test_elementwise_and_linear_grads(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    w = rng.normal(size=(3, 4))
    check_op(lambda x, y: weighted_sum(ad.add(x, y), w), [a, b])
    check_op(lambda x, y: weighted_sum(ad.sub(x, y), w), [a, b])
    check_op(lambda x, y: weighted_sum(ad.mul(x, y), w), [a, b])
    check_op(lambda x: weighted_sum(ad.scale(x, -2.5), w), [a])
    check_op(lambda x, y: weighted_sum(ad.add(x, y), w), [a, rng.normal(size=(4,))])  # broadcast
    m = rng.normal(size=(4, 5))
    w2 = rng.normal(size=(3, 5))
    check_op(lambda x, y: weighted_sum(ad.matmul(x, y), w2), [a, m])
    check_op(lambda x, y, z: weighted_sum(ad.linear(x, y, z), w2), [a, m, rng.normal(size=5)])
    check_op(lambda x: weighted_sum(ad.transpose(x), w.T), [a])
    check_op(lambda x: weighted_sum(ad.reshape(x, (4, 3)), w.reshape(4, 3)), [a])


def test_relu_grad_away_from_kink(rng):
    x = rng.normal(size=(5, 6))
    x[np.abs(x) < 0.05] = 0.3
    check_op(lambda t: weighted_sum(ad.relu(t), np.arange(30.0).reshape(5, 6)), [x])


def test_row_ops_grads(rng):
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(4, 3))
    w = rng.normal(size=(6, 3))
    check_op(lambda x, y: weighted_sum(ad.concat_rows([x, y]), w), [a, b])
    check_op(lambda x: weighted_sum(ad.take_rows(x, [3, 0, 3]), w[:3]), [b])
    check_op(lambda x: weighted_sum(ad.take_cols(x, 1, 3), w[:4, :2]), [b])
    check_op(lambda x: weighted_sum(ad.gather_rows_padded(x, np.array([2, -1, 0, 2])), w[:4]), [b])


def test_segment_max_grad(rng):
    x = rng.normal(size=(7, 4))
    seg = np.array([0, 1, 0, 2, 1, 2, 2])
    w = rng.normal(size=(3, 4))
    check_op(lambda t: weighted_sum(ad.segment_max(t, seg, 3), w), [x])


def test_segment_max_values_and_empty_segment():
    x = Tensor(np.array([[1.0, 5.0], [3.0, 2.0], [0.0, 0.0]]))
    out = ad.segment_max(x, np.array([0, 0, 1]), 2)
    np.testing.assert_array_equal(out.data, [[3.0, 5.0], [0.0, 0.0]])
    with pytest.raises(ad.ContractError):
        ad.segment_max(x, np.array([0, 0, 2]), 3)


def test_reductions_softmax_layernorm_grads(rng):
    x = rng.normal(size=(3, 5))
    w = rng.normal(size=(3, 5))
    check_op(lambda t: ad.sum_all(t), [x])
    check_op(lambda t: ad.mean_all(t), [x])
    check_op(lambda t: weighted_sum(ad.softmax(t), w), [x])
    g, b = rng.normal(size=5), rng.normal(size=5)
    check_op(lambda t, gg, bb: weighted_sum(ad.layer_norm(t, gg, bb), w), [x, g, b])


@pytest.mark.parametrize("heads", [1, 2, 4])
def test_attention_grad(rng, heads):
    q, k, v = rng.normal(size=(3, 8)), rng.normal(size=(5, 8)), rng.normal(size=(5, 8))
    w = rng.normal(size=(3, 8))
    check_op(lambda a, b, c: weighted_sum(ad.attention(a, b, c, heads), w), [q, k, v])


def attention_oracle(q, k, v, heads):
    """Per-head softmax(q_i . k_j / sqrt(d_k)) v_j written out with explicit loops."""
    m, d = q.shape
    n = k.shape[0]
    dk = d // heads
    out = np.zeros((m, v.shape[1]))
    dv = v.shape[1] // heads
    for h in range(heads):
        for i in range(m):
            scores = [sum(q[i, h * dk + c] * k[j, h * dk + c] for c in range(dk)) / math.sqrt(dk) for j in range(n)]
            top = max(scores)
            e = [math.exp(s - top) for s in scores]
            z = sum(e)
            for c in range(dv):
                out[i, h * dv + c] = sum(e[j] / z * v[j, h * dv + c] for j in range(n))
    return out


@pytest.mark.parametrize("heads", [1, 2, 4])
def test_attention_matches_explicit_formula(rng, heads):
    q, k, v = rng.normal(size=(4, 8)), rng.normal(size=(6, 8)), rng.normal(size=(6, 8))
    got = ad.attention(Tensor(q), Tensor(k), Tensor(v), heads).data
    np.testing.assert_allclose(got, attention_oracle(q, k, v, heads), rtol=0, atol=1e-10)


def test_attention_weights_are_row_stochastic(rng):
    buf = []
    ad.attention(Tensor(rng.normal(size=(3, 8))), Tensor(rng.normal(size=(7, 8))), Tensor(rng.normal(size=(7, 8))), 2, buf)
    a = buf[0]
    assert a.shape == (2, 3, 7)
    np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-12)


def test_attention_single_key_returns_value(rng):
    v = rng.normal(size=(1, 4))
    out = ad.attention(Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(1, 4))), Tensor(v), 2).data
    np.testing.assert_allclose(out, np.repeat(v, 3, axis=0), atol=1e-15)


def test_attention_rejects_bad_shapes():
    with pytest.raises(ad.DimensionError):
        ad.attention(Tensor(np.zeros((2, 6))), Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 4))))
    with pytest.raises(ad.DimensionError):
        ad.AttentionConfig(10, 3)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10_000))
def test_attention_is_permutation_equivariant_in_queries(m, n, seed):
    rng = np.random.default_rng(seed)
    q, k, v = rng.normal(size=(m, 8)), rng.normal(size=(n, 8)), rng.normal(size=(n, 8))
    perm = rng.permutation(m)
    a = ad.attention(Tensor(q), Tensor(k), Tensor(v), 2).data
    b = ad.attention(Tensor(q[perm]), Tensor(k), Tensor(v), 2).data
    np.testing.assert_allclose(b, a[perm], atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(2, 6), st.integers(0, 10_000))
def test_attention_is_invariant_to_key_value_order(m, n, seed):
    rng = np.random.default_rng(seed)
    q, k, v = rng.normal(size=(m, 4)), rng.normal(size=(n, 4)), rng.normal(size=(n, 4))
    perm = rng.permutation(n)
    a = ad.attention(Tensor(q), Tensor(k), Tensor(v), 1).data
    b = ad.attention(Tensor(q), Tensor(k[perm]), Tensor(v[perm]), 1).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_loss_grads(rng):
    x = rng.normal(size=(4, 3))
    t = rng.normal(size=(4, 3))
    check_op(lambda p: ad.l1_loss(p, t, weight=np.array([1.0, 2.0, 0.5])), [x])
    check_op(lambda p: ad.l1_loss(p, t + 6.0, wrap=True), [x])
    check_op(lambda p: ad.cross_entropy(p, np.array([0, 2, 1, 2]), class_weights=[1.0, 1.0, 0.1]), [x])
    probs = ad.softmax_array(rng.normal(size=(4, 3)))
    check_op(lambda p: ad.soft_cross_entropy(p, probs), [x])


def test_cross_entropy_closed_forms():
    # uniform logits give ln(C) per row
    z = Tensor(np.zeros((5, 4)))
    assert float(ad.cross_entropy(z, np.array([0, 1, 2, 3, 3])).data) == pytest.approx(math.log(4), abs=1e-12)
    assert float(ad.cross_entropy(Tensor(np.zeros((0, 3))), np.zeros(0)).data) == 0.0
    sat = np.full((2, 3), -50.0)
    sat[0, 1] = sat[1, 2] = 50.0
    assert float(ad.cross_entropy(Tensor(sat), np.array([1, 2])).data) < 1e-12


def test_wrap_angle_range_and_passthrough():
    vals = np.array([-7.0, -math.pi, -1.0, 0.0, math.pi, 3 * math.pi, 10.0])
    w = ad.wrap_angle(vals)
    assert np.all(w > -math.pi) and np.all(w <= math.pi)
    np.testing.assert_allclose(np.cos(w), np.cos(vals), atol=1e-12)
    assert ad.wrap_angle(-1.0) == -1.0
    assert ad.wrap_angle(-math.pi) == pytest.approx(math.pi)


def test_backward_requires_scalar_and_zero_for_unreached(rng):
    x = Tensor(rng.normal(size=3), requires_grad=True)
    y = Tensor(rng.normal(size=3), requires_grad=True)
    with ad.Tape() as tape:
        out = ad.scale(x, 2.0)
        loss = ad.sum_all(out)
    gx, gy = tape.backward(loss, [x, y])
    np.testing.assert_array_equal(gx, 2.0)
    np.testing.assert_array_equal(gy, 0.0)
    with pytest.raises(ad.ContractError):
        tape.backward(out, [x])


def test_no_recording_outside_tape(rng):
    x = Tensor(rng.normal(size=3), requires_grad=True)
    out = ad.relu(x)
    assert not out.requires_grad
    assert not ad.grad_enabled()


def test_matmul_shape_error():
    with pytest.raises(ad.DimensionError):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    with pytest.raises(ad.DimensionError):
        ad.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_adam_first_step_moves_by_lr():
    # bias-corrected first step is lr * sign(g) (up to eps)
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    opt = ad.Adam([p], lr=0.1)
    opt.step([np.array([0.5, -4.0, 1e-3])])
    np.testing.assert_allclose(p.data, [0.9, -1.9, 2.9], atol=1e-6)


def test_adam_minimises_quadratic():
    p = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = ad.Adam([p], lr=0.05)
    for _ in range(2000):
        opt.step([2.0 * p.data])
    np.testing.assert_allclose(p.data, 0.0, atol=1e-3)


def test_adam_clipping_and_nan():
    p = Tensor(np.zeros(2), requires_grad=True)
    opt = ad.Adam([p], lr=0.1, clip_norm=1.0)
    assert opt.step([np.array([30.0, 40.0])]) == pytest.approx(50.0)
    with pytest.raises(FloatingPointError):
        opt.step([np.array([np.nan, 0.0])])


def test_checkpoint_roundtrip_and_tamper(tmp_path, rng):
    arrays = {"a.w": rng.normal(size=(3, 2)), "b": rng.normal(size=4)}
    path = tmp_path / "ck.json"
    digest = ad.save_checkpoint(path, arrays, {"kind": "test"})
    back, meta = ad.load_checkpoint(path)
    assert meta == {"kind": "test"}
    assert digest == ad.params_digest(back)
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])
    payload = json.loads(path.read_text())
    payload["params"]["b"]["values"][0] += 1.0
    path.write_text(json.dumps(payload))
    with pytest.raises(ad.ContractError, match="hash"):
        ad.load_checkpoint(path)
    payload["schema"] = "other"
    path.write_text(json.dumps(payload))
    with pytest.raises(ad.ContractError, match="schema"):
        ad.load_checkpoint(path)


def test_checkpoint_bytes_are_deterministic(tmp_path, rng):
    arrays = {"x": rng.normal(size=(4, 4))}
    ad.save_checkpoint(tmp_path / "a.json", arrays)
    ad.save_checkpoint(tmp_path / "b.json", dict(reversed(list(arrays.items()))))
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
