"""Tests for graph reasoning: dense oracles per stage, residual identity, gradients."""

import numpy as np
import pytest
import torch

from drspot.grm import GraphReasoning, graph_reason, project, reproject

rng = np.random.default_rng(0)


def t64(a):
    return torch.tensor(a, dtype=torch.float64)


def dense_project(x, w_theta, w_psi):
    """Entry-wise loops: W_p[n, l] = sum_c x[l, c] theta[c, n]; Z = W_p psi(x)."""
    l, c = x.shape
    n = w_theta.shape[1]
    w_p = np.zeros((n, l))
    for i in range(n):
        for j in range(l):
            w_p[i, j] = sum(x[j, k] * w_theta[k, i] for k in range(c))
    psi = np.array([[sum(x[j, k] * w_psi[k, m] for k in range(c)) for m in range(w_psi.shape[1])] for j in range(l)])
    return w_p @ psi, w_p


class TestProject:
    def test_matches_dense_oracle(self):
        x, w_theta, w_psi = rng.normal(size=(5, 3)), rng.normal(size=(3, 5)), rng.normal(size=(3, 3))
        z, w_p = project(t64(x)[None], t64(w_theta), t64(w_psi))
        z_ref, w_p_ref = dense_project(x, w_theta, w_psi)
        np.testing.assert_allclose(z[0].numpy(), z_ref, atol=1e-6)
        np.testing.assert_allclose(w_p[0].numpy(), w_p_ref, atol=1e-6)

    def test_identity_projection(self):
        # x = I makes theta(x) = theta; theta = I and psi = I give W_p = I and Z = X
        x = torch.eye(4, dtype=torch.float64)[None]
        z, w_p = project(x, torch.eye(4, dtype=torch.float64), torch.eye(4, dtype=torch.float64))
        assert torch.equal(w_p[0], torch.eye(4, dtype=torch.float64))
        assert torch.equal(z, x)

    def test_zero_input(self):
        z, _ = project(torch.zeros(1, 5, 3, dtype=torch.float64), t64(rng.normal(size=(3, 5))), t64(rng.normal(size=(3, 3))))
        assert torch.equal(z, torch.zeros_like(z))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="channel mismatch"):
            project(torch.zeros(1, 5, 3), torch.zeros(4, 5), torch.zeros(3, 3))


class TestGraphReason:
    def test_matches_dense_oracle(self):
        v, a, w = rng.normal(size=(5, 3)), rng.normal(size=(5, 5)), rng.normal(size=(3, 3))
        out = graph_reason(t64(v)[None], t64(a), t64(w))[0].numpy()
        np.testing.assert_allclose(out, (np.eye(5) - a) @ v @ w, atol=1e-6)

    def test_zero_adjacency_identity_state(self):
        v = t64(rng.normal(size=(1, 5, 3)))
        assert torch.equal(graph_reason(v, torch.zeros(5, 5, dtype=torch.float64), torch.eye(3, dtype=torch.float64)), v)

    def test_identity_adjacency_kills_everything(self):
        v = t64(rng.normal(size=(1, 5, 3)))
        out = graph_reason(v, torch.eye(5, dtype=torch.float64), t64(rng.normal(size=(3, 3))))
        assert torch.equal(out, torch.zeros_like(out))

    def test_non_finite_raises(self):
        v = torch.full((1, 2, 2), float("inf"))
        with pytest.raises(FloatingPointError):
            graph_reason(v, torch.eye(2) * 0.5, torch.eye(2))


class TestReproject:
    def test_matches_dense_oracle(self):
        v2, w_p, w_s = rng.normal(size=(5, 3)), rng.normal(size=(5, 7)), rng.normal(size=(3, 3))
        out = reproject(t64(v2)[None], t64(w_p)[None], t64(w_s))[0].numpy()
        np.testing.assert_allclose(out, (w_p.T @ v2) @ w_s, atol=1e-6)

    def test_identity_case(self):
        v2 = t64(rng.normal(size=(1, 4, 3)))
        eye = torch.eye(4, dtype=torch.float64)[None]
        assert torch.equal(reproject(v2, eye, torch.eye(3, dtype=torch.float64)), v2)

    def test_zero_nodes(self):
        out = reproject(torch.zeros(1, 4, 3), torch.randn(1, 4, 6), torch.randn(3, 3))
        assert torch.equal(out, torch.zeros_like(out))


class TestGraphReasoning:
    @pytest.mark.parametrize("k", [4, 8, 16, 24])
    def test_shape_and_initial_identity(self, k):
        grm = GraphReasoning(6, grid_size=14, num_landmarks=k).double()
        f_c = torch.randn(2, 6, 14, 14, dtype=torch.float64)
        out = grm(f_c, torch.randn(2, k, 6, dtype=torch.float64))
        assert out.shape == f_c.shape
        assert torch.equal(out, f_c)

    def test_zero_landmarks_variant(self):
        grm = GraphReasoning(3, grid_size=4, num_landmarks=0)
        f_c = torch.randn(1, 3, 4, 4)
        assert torch.equal(grm(f_c), f_c)

    def test_gradcheck_all_inputs_and_params(self):
        torch.manual_seed(0)
        grm = GraphReasoning(3, grid_size=2, num_landmarks=2).double()
        with torch.no_grad():
            grm.adjacency.normal_(0, 0.3)
            grm.w_state.normal_(0, 0.3)
        params = list(grm.parameters())
        f_c = torch.randn(1, 3, 2, 2, dtype=torch.float64, requires_grad=True)
        h_k = torch.randn(1, 2, 3, dtype=torch.float64, requires_grad=True)

        def fn(f, h, *ps):
            for p, new in zip(params, ps):
                p.data = new.data
            return torch.func.functional_call(grm, dict(zip([n for n, _ in grm.named_parameters()], ps)), (f, h))

        inputs = (f_c, h_k) + tuple(p.detach().clone().requires_grad_(True) for p in params)
        assert torch.autograd.gradcheck(fn, inputs, eps=1e-5, atol=1e-8, rtol=1e-4)

    def test_landmarks_influence_output_once_trained(self):
        torch.manual_seed(1)
        grm = GraphReasoning(3, grid_size=2, num_landmarks=2).double()
        with torch.no_grad():
            grm.adjacency.normal_()
            grm.w_state.normal_()
        f_c = torch.randn(1, 3, 2, 2, dtype=torch.float64)
        h_k = torch.randn(1, 2, 3, dtype=torch.float64, requires_grad=True)
        grm(f_c, h_k).sum().backward()
        assert h_k.grad.abs().sum() > 0

    def test_errors_carry_stage_name(self):
        grm = GraphReasoning(3, grid_size=2, num_landmarks=2)
        with pytest.raises(ValueError, match="projection"):
            grm(torch.randn(1, 3, 2, 2), torch.randn(1, 3, 3))
        with pytest.raises(ValueError, match="F_c must be"):
            grm(torch.randn(1, 4, 2, 2), torch.randn(1, 2, 4))

    def test_matches_dense_module_oracle(self):
        torch.manual_seed(2)
        grm = GraphReasoning(3, grid_size=2, num_landmarks=2).double()
        with torch.no_grad():
            grm.adjacency.normal_()
            grm.w_state.normal_()
        f_c = torch.randn(1, 3, 2, 2, dtype=torch.float64)
        h_k = torch.randn(1, 2, 3, dtype=torch.float64)
        s = f_c.pow(2).mean().add(grm.eps).sqrt()
        x = (f_c / s)[0].reshape(3, 4).T.numpy()
        h = (h_k / s)[0].numpy()
        z_c, w_p = dense_project(x, grm.theta_c.detach().numpy(), grm.psi_c.detach().numpy())
        z_k, _ = dense_project(h, grm.theta_k.detach().numpy(), grm.psi_k.detach().numpy())
        v = np.concatenate([z_c / 4, z_k / 2])
        a, w = grm.adjacency.detach().numpy(), grm.w_state.detach().numpy()
        u = (np.eye(6) - a) @ v @ w
        y = w_p.T @ u[:4] @ grm.w_sigma.detach().numpy()
        expected = f_c[0].numpy() + s.item() * y.T.reshape(3, 2, 2)
        np.testing.assert_allclose(grm(f_c, h_k)[0].detach().numpy(), expected, rtol=1e-10, atol=1e-12)

    @pytest.mark.parametrize("factor", [1e-3, 0.5, 7.0, 1e3])
    def test_residual_is_homogeneous_in_input_scale(self, factor):
        torch.manual_seed(3)
        grm = GraphReasoning(4, grid_size=3, num_landmarks=2).double()
        grm.eps = 0.0
        with torch.no_grad():
            grm.adjacency.normal_(0, 0.3)
            grm.w_state.normal_()
        f_c = torch.rand(2, 4, 3, 3, dtype=torch.float64) + 0.1
        h_k = torch.rand(2, 2, 4, dtype=torch.float64)
        y = grm(f_c, h_k) - f_c
        y_scaled = grm(factor * f_c, factor * h_k) - factor * f_c
        torch.testing.assert_close(y_scaled, factor * y, rtol=1e-9, atol=1e-12)

    @pytest.mark.parametrize("channels,grid", [(32, 14), (64, 14), (32, 7)])
    def test_gain_is_order_one_with_identity_state(self, channels, grid):
        torch.manual_seed(4)
        grm = GraphReasoning(channels, grid_size=grid, num_landmarks=16)
        with torch.no_grad():
            grm.w_state.copy_(torch.eye(channels))
        f_c = torch.relu(torch.randn(4, channels, grid, grid)) + 0.5
        y = grm(f_c, torch.rand(4, 16, channels)) - f_c
        assert 0.05 < (y.norm() / f_c.norm()).item() < 5.0
