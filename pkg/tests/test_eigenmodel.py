import numpy as np
import pytest

from eigenseg import tensor_core as tc
from eigenseg.eigenmodel import (EigenModel, TemperatureSchedule, gumbel_softmax, linear_attention,
                                 orthonormal_columns, temperature_at)
from eigenseg.errors import ConfigError, DataError, FormatError, NumericError
from eigenseg.tensor_core import Tensor


def features(n=2, h=3, w=4, c=5, seed=0):
    return np.random.default_rng(seed).standard_normal((n, h, w, c)).astype(np.float32)


def small_model(c=5, d=8, K=4, n_blocks=2, seed=0, dtype=np.float32):
    return EigenModel(c, d=d, K=K, n_blocks=n_blocks, seed=seed, dtype=dtype)


# -- forward_train ---------------------------------------------------------------------

def test_single_token_attention_returns_value():
    rng = np.random.default_rng(0)
    q, k, v = (Tensor(rng.standard_normal((1, 1, 6))) for _ in range(3))
    np.testing.assert_allclose(linear_attention(q, k, v).data, v.data, rtol=1e-14)


def test_attention_reference_formula():
    rng = np.random.default_rng(1)
    q, k, v = (rng.standard_normal((2, 5, 3)) for _ in range(3))
    phi = lambda x: np.where(x > 0, x + 1, np.exp(x))
    ref = np.empty_like(v)
    for b in range(2):
        w = phi(q[b]) @ phi(k[b]).T
        ref[b] = (w / w.sum(axis=1, keepdims=True)) @ v[b]
    out = linear_attention(Tensor(q), Tensor(k), Tensor(v)).data
    np.testing.assert_allclose(out, ref, rtol=1e-12)


def test_gumbel_softmax_on_simplex():
    logits = Tensor(np.random.default_rng(2).standard_normal((50, 7)) * 5)
    y = gumbel_softmax(logits, 0.7, tc.make_rng(0)).data
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)


def test_gumbel_softmax_rejects_nonpositive_tau():
    with pytest.raises(ConfigError):
        gumbel_softmax(Tensor(np.zeros((2, 2))), 0.0, tc.make_rng(0))


def test_forward_train_deterministic():
    m, f = small_model(), features()
    a = m.forward_train(f, 0.5, tc.make_rng(3)).data
    b = m.forward_train(f, 0.5, tc.make_rng(3)).data
    assert a.tobytes() == b.tobytes()
    assert a.shape == (2 * 3 * 4, 4)


def test_forward_train_unit_mean_square():
    Psi = small_model().forward_train(features(), 0.8, tc.make_rng(1)).data.astype(np.float64)
    np.testing.assert_allclose((Psi ** 2).mean(axis=0), 1.0, atol=1e-5)


def test_gumbel_max_matches_softmax():
    ell = np.array([1.0, 0.0, -1.0, 2.0])
    n = 100_000
    y = gumbel_softmax(Tensor(np.tile(ell, (n, 1))), 1.0, tc.make_rng(7)).data
    freq = np.bincount(y.argmax(axis=1), minlength=4) / n
    p = np.exp(ell) / np.exp(ell).sum()
    assert (np.abs(freq - p) <= 3 * np.sqrt(p * (1 - p) / n)).all()


def test_gumbel_low_temperature_near_one_hot():
    logits = Tensor(np.random.default_rng(4).standard_normal((200, 6)))
    y = gumbel_softmax(logits, 1e-4, tc.make_rng(5)).data
    assert (y.max(axis=1) >= 0.999).all()


def test_forward_train_grad_check():
    m = small_model(c=3, d=4, K=3, n_blocks=1, dtype=np.float64)
    f = features(n=2, h=2, w=2, c=3).astype(np.float64)
    weights = np.random.default_rng(9).standard_normal((8, 3))

    def objective():
        return (m.forward_train(f, 0.7, tc.make_rng(11)) * Tensor(weights)).sum()

    assert tc.grad_check(objective, m.parameters()) < 1e-4


# -- forward_infer / prehead -----------------------------------------------------------

def test_infer_no_cross_image_coupling():
    m, f = small_model(), features(n=3)
    batched = m.forward_infer(f)
    alone = m.forward_infer(f[1:2])
    np.testing.assert_array_equal(batched[1:2], alone)


def test_infer_zero_head_gives_label_zero():
    m = small_model()
    m.params["W_head"].data[...] = 0
    out = m.forward_infer(features())
    assert (out == 0).all()
    assert (out.argmax(axis=-1) == 0).all()


def test_default_output_width():
    m = EigenModel(4, d=256)
    assert m.K == 256
    assert m.forward_infer(features(n=1, h=2, w=2, c=4)).shape == (1, 2, 2, 256)


def test_infer_shape_mismatch():
    with pytest.raises(DataError):
        small_model(c=5).forward_infer(features(c=6))


def test_prehead_composes_to_logits():
    m, f = small_model(d=16, K=3), features()
    pre = m.forward_prehead(f).astype(np.float64)
    assert pre.shape == (2, 3, 4, 16)
    np.testing.assert_allclose(pre @ m.params["W_head"].data, m.forward_infer(f), atol=1e-6)


def test_prehead_zero_blocks_is_input_projection():
    m, f = small_model(n_blocks=0), features()
    ref = f @ m.params["W_in"].data + m.params["b_in"].data
    np.testing.assert_allclose(m.forward_prehead(f), ref, rtol=1e-6)


def test_permutation_equivariance():
    m = small_model(dtype=np.float64)
    f = features(n=1, h=1, w=12).astype(np.float64)
    perm = np.random.default_rng(3).permutation(12)
    a = m.forward_infer(f)[0, 0]
    b = m.forward_infer(f[:, :, perm])[0, 0]
    # summation order inside the attention reductions changes with the permutation
    np.testing.assert_allclose(a[perm], b, rtol=1e-12, atol=1e-12)


def test_width_must_cover_K():
    with pytest.raises(ConfigError):
        EigenModel(3, d=4, K=8)


# -- head orthogonality ----------------------------------------------------------------

def test_orthonormal_fixed_point():
    Q = np.linalg.qr(np.random.default_rng(0).standard_normal((8, 4)))[0]
    Q = Q * np.sign(np.diag(np.linalg.qr(Q)[1]))
    np.testing.assert_allclose(orthonormal_columns(Q), Q, atol=1e-7)


def test_orthonormal_diagonal_example():
    np.testing.assert_allclose(orthonormal_columns(np.array([[2.0, 0.0], [0.0, 3.0]])), np.eye(2), atol=1e-15)


def test_orthonormal_random():
    W = orthonormal_columns(np.random.default_rng(1).standard_normal((8, 4)))
    np.testing.assert_allclose(W.T @ W, np.eye(4), atol=1e-6)


def test_orthonormal_rank_deficient():
    with pytest.raises(NumericError):
        orthonormal_columns(np.array([[1.0, 2.0], [1.0, 2.0], [0.0, 0.0]]))


def test_orthogonalize_head_after_perturbation():
    m = small_model(d=16, K=6)
    m.params["W_head"].data += 0.3 * np.random.default_rng(2).standard_normal((16, 6)).astype(np.float32)
    W = m.orthogonalize_head().params["W_head"].data.astype(np.float64)
    G = W.T @ W
    assert np.abs(G - np.diag(np.diag(G))).max() <= 1e-5
    assert np.abs(np.sqrt(np.diag(G)) - 1).max() <= 1e-5


# -- temperature schedule --------------------------------------------------------------

def test_temperature_examples():
    s = TemperatureSchedule(1.0, 0.3, 100)
    assert temperature_at(s, 0) == 1.0
    np.testing.assert_allclose(temperature_at(s, 100), 0.3, rtol=1e-15)
    np.testing.assert_allclose(temperature_at(s, 50), 0.65, rtol=1e-15)


def test_temperature_monotone_and_range():
    s = TemperatureSchedule(1.0, 0.3, 37)
    taus = [temperature_at(s, t) for t in range(38)]
    assert all(b <= a for a, b in zip(taus, taus[1:]))
    with pytest.raises(ConfigError):
        temperature_at(s, 38)


# -- NEFM serialization ----------------------------------------------------------------

def test_nefm_round_trip(tmp_path):
    m = small_model()
    m.save(tmp_path / "m.nefm")
    back = EigenModel.load(tmp_path / "m.nefm")
    assert (back.c, back.d, back.K, back.n_blocks) == (5, 8, 4, 2)
    for name in m.param_names():
        np.testing.assert_array_equal(back.params[name].data, m.params[name].data)
    assert back.to_bytes() == m.to_bytes()
    np.testing.assert_array_equal(back.forward_infer(features()), m.forward_infer(features()))


def test_nefm_header_layout():
    blob = small_model().to_bytes()
    assert blob[:4] == b"NEFM"
    assert np.frombuffer(blob[4:24], "<u4").tolist() == [1, 2, 8, 4, 5]


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:4] + (2).to_bytes(4, "little") + b[8:],
    lambda b: b[:-4],
    lambda b: b + b"\0\0\0\0",
    lambda b: b[:-4] + np.float32(np.nan).tobytes(),
])
def test_nefm_rejects_corrupt(mutate):
    with pytest.raises(FormatError):
        EigenModel.from_bytes(mutate(small_model().to_bytes()))
