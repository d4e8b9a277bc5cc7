import numpy as np
import pytest
from helpers import SEVEN_NODE, TWO_LEAF
from scipy.linalg import expm
from scipy.special import eval_chebyu, eval_gegenbauer

from hiergnn import tensor as T
from hiergnn.graph_ops import (
    DiffusionParams,
    GegenbauerParams,
    MixHopParams,
    diffusion_conv,
    gcn_layer,
    gegenbauer_conv,
    gegenbauer_poly,
    hierarchy_adjacency,
    mix_hop,
    normalize,
    row_sum_rescale,
    spatial_ode_step,
    stationary_diffusion,
)
from hiergnn.hierarchy import build_hierarchy
from hiergnn.tensor import Tensor, grad_check


def _sym_graph(rng, n, p=0.5):
    A = (rng.random((n, n)) < p).astype(float)
    A = np.triu(A, 1)
    return A + A.T


def test_adjacency_full_hierarchy_two_leaf():
    A = hierarchy_adjacency(build_hierarchy(TWO_LEAF), "full_hierarchy").entries
    np.testing.assert_array_equal(A, [[0, 1, 1], [1, 0, 0], [1, 0, 0]])


def test_adjacency_bottom_only():
    np.testing.assert_array_equal(hierarchy_adjacency(build_hierarchy(TWO_LEAF), "bottom_only").entries,
                                  [[0, 1], [1, 0]])
    h = build_hierarchy(SEVEN_NODE)
    A = hierarchy_adjacency(h, "bottom_only").entries
    b = {nid: i for i, nid in enumerate(h.bottom_ids)}
    assert A[b["B1"], b["B2"]] == 1 and A[b["B1"], b["B3"]] == 0


def test_normalize_examples():
    np.testing.assert_array_equal(normalize(np.zeros((2, 2)), "row_selfloop").entries, np.eye(2))
    np.testing.assert_array_equal(normalize(np.array([[0.0, 1], [1, 0]]), "row_selfloop").entries, [[0.5, 0.5]] * 2)
    np.testing.assert_array_equal(normalize(np.array([[0.0, 1], [0, 0]]), "random_walk").entries, [[0, 1], [0, 0]])


def test_normalize_rejects_negative():
    with pytest.raises(ValueError):
        normalize(np.array([[0.0, -1], [1, 0]]))


def test_row_selfloop_rows_sum_to_one_and_sym_is_symmetric():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 9))
        A = _sym_graph(rng, n) * rng.uniform(0.5, 2.0, size=(n, n))
        A = (A + A.T) / 2
        np.testing.assert_allclose(normalize(A, "row_selfloop").entries.sum(axis=1), 1.0, atol=1e-12)
        S = normalize(A, "sym_selfloop").entries
        np.testing.assert_allclose(S, S.T, atol=1e-15)


def _mix_hop_oracle(H, A, beta, Ws):
    out = H @ Ws[0]
    h = H.copy()
    for k in range(1, len(Ws)):
        h = beta * H + (1 - beta) * A @ h
        out = out + h @ Ws[k]
    return out


def test_mix_hop_examples():
    rng = np.random.default_rng(1)
    H = rng.normal(size=(3, 2))
    A = normalize(_sym_graph(rng, 3, 0.9), "row_selfloop")
    I, Z = np.eye(2), np.zeros((2, 2))
    out = mix_hop(Tensor(H), A, MixHopParams(1.0, [Tensor(I), Tensor(Z), Tensor(Z)]))
    np.testing.assert_array_equal(out.data, H)
    out = mix_hop(Tensor(H), np.eye(3), MixHopParams(0.3, [Tensor(I), Tensor(I)]))
    np.testing.assert_allclose(out.data, 2 * H, atol=1e-15)


def test_mix_hop_matches_dense_oracle():
    rng = np.random.default_rng(2)
    for n in (2, 4, 6):
        A = normalize(_sym_graph(rng, n), "row_selfloop").entries
        H = rng.normal(size=(n, 3))
        Ws = [rng.normal(size=(3, 2)) for _ in range(3)]
        out = mix_hop(Tensor(H), A, MixHopParams(0.5, [Tensor(w) for w in Ws])).data
        np.testing.assert_allclose(out, _mix_hop_oracle(H, A, 0.5, Ws), atol=1e-10, rtol=0)


def test_mix_hop_beta_one_ignores_graph():
    rng = np.random.default_rng(3)
    H = Tensor(rng.normal(size=(4, 2)))
    W = [Tensor(rng.normal(size=(2, 2))) for _ in range(3)]
    A1 = normalize(_sym_graph(rng, 4), "row_selfloop")
    A2 = normalize(_sym_graph(rng, 4), "row_selfloop")
    np.testing.assert_array_equal(mix_hop(H, A1, MixHopParams(1.0, W)).data, mix_hop(H, A2, MixHopParams(1.0, W)).data)


def test_mix_hop_validation():
    H = Tensor(np.ones((2, 2)))
    with pytest.raises(ValueError, match="beta"):
        mix_hop(H, np.eye(2), MixHopParams(1.5, [Tensor(np.eye(2))]))
    with pytest.raises(ValueError):
        mix_hop(H, normalize(np.zeros((2, 2)), "sym_selfloop"), MixHopParams(0.5, [Tensor(np.eye(2))]))
    with pytest.raises(ValueError, match="nodes"):
        mix_hop(H, np.eye(3), MixHopParams(0.5, [Tensor(np.eye(2))]))


def test_diffusion_conv_k1_and_zero_theta():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(3, 2))
    A = _sym_graph(rng, 3, 0.9)
    theta = np.array([[0.7, -0.2]])
    np.testing.assert_allclose(diffusion_conv(Tensor(X), A, DiffusionParams(Tensor(theta))).data, 0.5 * X, atol=1e-15)
    np.testing.assert_array_equal(diffusion_conv(Tensor(X), A, DiffusionParams(Tensor(np.zeros((3, 2))))).data, 0 * X)


def test_diffusion_conv_matches_matrix_powers_on_chain():
    rng = np.random.default_rng(5)
    W = np.array([[0.0, 1, 0], [0, 0, 2], [1, 0, 0]])  # directed, so both directions differ
    X = rng.normal(size=(3, 2))
    theta = rng.normal(size=(3, 2))
    Pf = W / W.sum(axis=1, keepdims=True)
    Pb = W.T / W.T.sum(axis=1, keepdims=True)
    ref = sum(theta[k, 0] * np.linalg.matrix_power(Pf, k) @ X + theta[k, 1] * np.linalg.matrix_power(Pb, k) @ X
              for k in range(3))
    out = diffusion_conv(Tensor(X), W, DiffusionParams(Tensor(theta))).data
    np.testing.assert_allclose(out, ref, atol=1e-10, rtol=0)


def test_stationary_diffusion_examples():
    rng = np.random.default_rng(6)
    P, res = stationary_diffusion(_sym_graph(rng, 4, 0.8), 1.0, 5)
    np.testing.assert_array_equal(P, np.eye(4))
    P, res = stationary_diffusion(np.zeros((3, 3)), 0.5, 8)
    np.testing.assert_allclose(P, 0.5 * np.eye(3))
    A = np.array([[0.0, 1], [1, 0]])
    P, res = stationary_diffusion(A, 0.5, 20)
    closed = 0.5 * np.linalg.inv(np.eye(2) - 0.5 * A)
    np.testing.assert_allclose(P, closed, atol=1e-6)
    np.testing.assert_allclose(res, 0.5**20, atol=1e-15)


def test_gegenbauer_poly_examples():
    assert gegenbauer_poly(0, 1.7, 0.3) == 1.0
    assert gegenbauer_poly(1, 2.0, 0.3) == pytest.approx(1.2, abs=1e-15)
    assert gegenbauer_poly(2, 1.0, 0.5) == pytest.approx(0.0, abs=1e-15)
    for k in range(7):
        for a in (0.5, 1.0, 2.5):
            for x in (-0.9, 0.1, 0.7):
                assert gegenbauer_poly(k, a, x) == pytest.approx(eval_gegenbauer(k, a, x), abs=1e-12)


def test_gegenbauer_conv_trivial_cases():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(3, 2))
    A = normalize(_sym_graph(rng, 3, 0.9), "sym_selfloop")
    np.testing.assert_allclose(gegenbauer_conv(Tensor(X), A, GegenbauerParams(Tensor([2.5]), 1.3)).data, 2.5 * X)
    out = gegenbauer_conv(Tensor(X), A, GegenbauerParams(Tensor([0.0, 1.0]), 0.5)).data
    np.testing.assert_allclose(out, A.entries @ X, atol=1e-15)


@pytest.mark.parametrize("alpha", [0.5, 1.0, 2.0])
def test_gegenbauer_conv_matches_eigen_oracle(alpha):
    rng = np.random.default_rng(8)
    for n in (3, 4, 5):
        A = row_sum_rescale(normalize(_sym_graph(rng, n, 0.7), "sym_selfloop")).entries
        X = rng.normal(size=(n, 2))
        theta = rng.normal(size=4)
        lam, V = np.linalg.eigh(A)
        scal = sum(theta[k] * eval_gegenbauer(k, alpha, lam) for k in range(4))
        ref = V @ np.diag(scal) @ V.T @ X
        out = gegenbauer_conv(Tensor(X), A, GegenbauerParams(Tensor(theta), alpha)).data
        np.testing.assert_allclose(out, ref, atol=1e-10, rtol=0)


def test_gegenbauer_alpha_one_is_chebyshev_u():
    rng = np.random.default_rng(9)
    A = normalize(_sym_graph(rng, 5, 0.6), "sym_selfloop").entries
    X = rng.normal(size=(5, 3))
    theta = rng.normal(size=5)
    lam, V = np.linalg.eigh(A)
    ref = V @ np.diag(sum(theta[k] * eval_chebyu(k, lam) for k in range(5))) @ V.T @ X
    out = gegenbauer_conv(Tensor(X), A, GegenbauerParams(Tensor(theta), 1.0)).data
    np.testing.assert_allclose(out, ref, atol=1e-10, rtol=0)


def test_row_sum_rescale_bounds_spectrum():
    rng = np.random.default_rng(10)
    for _ in range(20):
        A = row_sum_rescale(normalize(_sym_graph(rng, 6, 0.6), "sym_selfloop")).entries
        assert np.abs(np.linalg.eigvalsh(A)).max() <= 1 + 1e-12
        assert np.abs(A).sum(axis=1).max() <= 1 + 1e-12


def test_gcn_layer_examples():
    rng = np.random.default_rng(11)
    H = rng.normal(size=(2, 3))
    A_sym = normalize(np.zeros((2, 2)), "sym_selfloop")
    np.testing.assert_allclose(gcn_layer(Tensor(H), A_sym, Tensor(np.eye(3))).data, H)
    out = gcn_layer(Tensor(np.zeros((2, 3))), A_sym, Tensor(rng.normal(size=(3, 2))), "sigmoid").data
    np.testing.assert_array_equal(out, np.full((2, 2), 0.5))
    A = np.array([[0.0, 1.0], [1.0, 0.0]])
    Theta = rng.normal(size=(3, 4))
    d = 1 / np.sqrt((A + np.eye(2)).sum(axis=1))
    ref = 1 / (1 + np.exp(-(np.diag(d) @ (A + np.eye(2)) @ np.diag(d) @ H @ Theta)))
    out = gcn_layer(Tensor(H), normalize(A, "sym_selfloop"), Tensor(Theta), "sigmoid").data
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_spatial_ode_examples():
    rng = np.random.default_rng(12)
    H0 = rng.normal(size=(2, 3))
    np.testing.assert_allclose(spatial_ode_step(Tensor(H0), np.eye(2), 2.0, 7).data, H0, atol=1e-15)
    A = normalize(np.array([[0.0, 1.0], [1.0, 0.0]]), "row_selfloop").entries
    np.testing.assert_allclose(spatial_ode_step(Tensor(H0), A, 1.0, 1).data, A @ H0, atol=1e-15)
    out = spatial_ode_step(Tensor(H0), A, 1.0, 1000).data
    np.testing.assert_allclose(out, expm(A - np.eye(2)) @ H0, atol=1e-3)


def test_graph_ops_pass_grad_check_wrt_weights():
    rng = np.random.default_rng(13)
    A = _sym_graph(rng, 4, 0.8)
    X = Tensor(rng.normal(size=(4, 3)))
    R = Tensor(rng.normal(size=(4, 2)))
    Ws = [Tensor(rng.normal(size=(3, 2))) for _ in range(3)]
    assert grad_check(lambda *w: T.sum_(mix_hop(X, normalize(A), MixHopParams(0.2, w)) * R), Ws) <= 1e-4
    R3 = Tensor(rng.normal(size=(4, 3)))
    th = Tensor(rng.normal(size=(3, 2)))
    assert grad_check(lambda t: T.sum_(diffusion_conv(X, A, DiffusionParams(t)) * R3), th) <= 1e-4
    A_hat = normalize(A, "sym_selfloop")
    th = Tensor(rng.normal(size=4))
    assert grad_check(lambda t: T.sum_(gegenbauer_conv(X, A_hat, GegenbauerParams(t, 1.5)) * R3), th) <= 1e-4
    Theta = Tensor(rng.normal(size=(3, 2)))
    assert grad_check(lambda t: T.sum_(gcn_layer(X, A_hat, t, "tanh") * R), Theta) <= 1e-4
