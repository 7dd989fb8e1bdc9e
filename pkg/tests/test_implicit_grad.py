"""Backward-mode checks against hand-derived and closed-form gradients."""

import numpy as np
import pytest

from idspn import encoders as enc
from idspn import implicit_grad as ig
from idspn import inner_opt as io
from idspn.autodiff import Tape
from tests.conftest import identity_encoder


def quadratic_instance(rng, n=2, d=2, h=6, lam=1.0):
    """Strongly convex anchored instance with an exactly known affine encoder.

    The bias shift keeps the ReLU active near the optimum, so the encoder is
    affine there and the Hessian of the full inner objective is 2 A^T A + lam I.
    """
    w1 = rng.uniform(0.2, 1.0, size=(h, d))
    params = enc.EncoderParams(
        w1=w1, b1=50 * np.ones(h), w2=rng.normal(size=(h, h)) * 0.3, b2=np.zeros(h), pool="sum"
    )

    def gvec(yflat):
        return enc.encode(yflat.reshape(n, d), params, Tape()).value.ravel()

    c0 = gvec(np.zeros(n * d))
    a = np.column_stack([gvec(np.eye(n * d)[k]) - c0 for k in range(n * d)])
    y_target = rng.normal(size=n * d) * 0.5
    z = a @ y_target + c0
    hess = 2 * a.T @ a + lam * np.eye(n * d)
    y0 = rng.normal(size=(n, d)) * 0.3
    return params, a, c0, z, hess, y0, lam


class TestApproximate:
    def test_zero_upstream_gives_zero_bundle(self, rng):
        params = enc.init_params(2, 4, "sum", rng=rng)
        cfg = io.InnerConfig(iterations=1)
        b = ig.backward_approximate(np.zeros((2, 2)), np.zeros(4), params, cfg, np.zeros((2, 2)))
        assert np.array_equal(b.grad_z, np.zeros(4))
        assert all(np.array_equal(v, 0 * v) for v in b.grad_params.values())

    def test_one_d_quadratic_grad_z(self):
        # L=(y-z)^2: d(grad_Y L)/dz = -2, so grad_z = 2 * upstream
        cfg = io.InnerConfig(iterations=1, clip_norm=None)
        b = ig.backward_approximate([[5.0]], [5.0], identity_encoder(1), cfg, [[3.0]])
        assert np.allclose(b.grad_z, [6.0])

    def test_non_finite_upstream_rejected(self):
        cfg = io.InnerConfig(iterations=1)
        with pytest.raises(ValueError, match="non-finite"):
            ig.backward_approximate([[0.0]], [0.0], identity_encoder(1), cfg, [[np.nan]])

    def test_grad_theta_matches_finite_differences_of_grad_field(self, rng):
        # sensitivity of -upstream . grad_Y L(Y*, theta) to each weight
        params = enc.init_params(2, 5, "fspool", n=3, rng=rng)
        y_star = rng.normal(size=(3, 2))
        z = rng.normal(size=5)
        upstream = rng.normal(size=(3, 2))
        cfg = io.InnerConfig(iterations=1, clip_norm=None)
        bundle = ig.backward_approximate(y_star, z, params, cfg, upstream)

        def objective():
            g = enc.grad_inner_loss(y_star, z, params, Tape())
            return -float((upstream * g).sum())

        step = 1e-5
        for name, arr in params.arrays().items():
            grad = bundle.grad_params[name]
            flat = arr.reshape(-1)
            for k in (0, flat.size // 2, flat.size - 1):
                old = flat[k]
                flat[k] = old + step
                up = objective()
                flat[k] = old - step
                dn = objective()
                flat[k] = old
                fd = (up - dn) / (2 * step)
                assert abs(fd - grad.reshape(-1)[k]) <= 1e-3 * max(1.0, abs(fd)), name

    def test_anchor_routes_lambda_upstream_to_y0(self, rng):
        params = enc.init_params(2, 4, "sum", rng=rng)
        cfg = io.InnerConfig(iterations=1, anchor_lambda=0.4)
        upstream = rng.normal(size=(3, 2))
        b = ig.backward_approximate(rng.normal(size=(3, 2)), rng.normal(size=4), params, cfg, upstream)
        assert np.allclose(b.grad_y0, 0.4 * upstream, atol=1e-15)


class TestFullImplicit:
    def test_one_d_regularized_solve(self):
        # H=2, gamma=1: (H/1 + 1) u = upstream -> u = upstream/3, grad_z = 2u
        cfg = io.InnerConfig(iterations=1, clip_norm=None)
        mode = ig.BackwardMode("full_implicit", gamma=1.0, cg_steps=50, cg_tol=1e-12)
        b = ig.backward_full_implicit([[5.0]], [5.0], identity_encoder(1), cfg, mode, [[3.0]])
        assert np.allclose(b.grad_z, [2.0])
        assert b.diagnostics["cg_converged"]

    def test_gamma_limit_recovers_approximate(self, rng):
        params, a, c0, z, hess, y0, lam = quadratic_instance(rng)
        cfg = io.InnerConfig(iterations=1, clip_norm=None, anchor_lambda=lam)
        upstream = rng.normal(size=(2, 2))
        y_star = rng.normal(size=(2, 2)) * 0.3
        approx = ig.backward_approximate(y_star, z, params, cfg, upstream)
        mode = ig.BackwardMode("full_implicit", gamma=1e12, cg_steps=50, cg_tol=1e-12)
        full = ig.backward_full_implicit(y_star, z, params, cfg, mode, upstream)
        rel = np.abs(full.grad_z - approx.grad_z).max() / np.abs(approx.grad_z).max()
        assert rel < 1e-6
        for name in approx.grad_params:
            denom = max(np.abs(approx.grad_params[name]).max(), 1e-12)
            assert np.abs(full.grad_params[name] - approx.grad_params[name]).max() / denom < 1e-6
        assert np.abs(full.grad_y0 - approx.grad_y0).max() / np.abs(approx.grad_y0).max() < 1e-6

    def test_cg_solves_spd_system_tightly(self, rng):
        params, a, c0, z, hess, y0, lam = quadratic_instance(rng)
        eta = 0.9 / np.linalg.eigvalsh(hess).max()
        cfg = io.InnerConfig(step_size=eta, momentum=0.9, iterations=2000, clip_norm=None, anchor_lambda=lam)
        trace = io.minimize(z, params, y0, cfg)
        upstream = rng.normal(size=(2, 2))
        mode = ig.BackwardMode("full_implicit", gamma=lam, cg_steps=50, cg_tol=1e-10)
        b = ig.backward_full_implicit(trace.y_final, z, params, cfg, mode, upstream)
        assert b.diagnostics["cg_residual"] < 1e-5
        assert b.diagnostics["cg_steps"] <= 50

    def test_reports_warning_when_budget_too_small(self, rng):
        params, a, c0, z, hess, y0, lam = quadratic_instance(rng)
        upstream = rng.normal(size=(2, 2))
        cfg = io.InnerConfig(iterations=1, clip_norm=None, anchor_lambda=lam)
        mode = ig.BackwardMode("full_implicit", gamma=lam, cg_steps=1, cg_tol=1e-14)
        b = ig.backward_full_implicit(rng.normal(size=(2, 2)), z, params, cfg, mode, upstream)
        assert not b.diagnostics["cg_converged"]
        assert np.all(np.isfinite(b.grad_z))


class TestAgreementAtConvergence:
    def test_full_implicit_and_unrolled_match_closed_form(self, rng):
        params, a, c0, z, hess, y0, lam = quadratic_instance(rng)
        eta = 0.9 / np.linalg.eigvalsh(hess).max()
        cfg = io.InnerConfig(step_size=eta, momentum=0.9, iterations=3000, clip_norm=None, anchor_lambda=lam)
        trace = io.minimize(z, params, y0, cfg)
        y_flat = trace.y_final.ravel()
        grad_norm = np.linalg.norm(2 * a.T @ (a @ y_flat + c0 - z) + lam * (y_flat - y0.ravel()))
        assert grad_norm < 1e-10

        upstream = rng.normal(size=(2, 2))
        exact_z = 2 * a @ np.linalg.solve(hess, upstream.ravel())
        exact_y0 = lam * np.linalg.solve(hess, upstream.ravel()).reshape(2, 2)

        mode = ig.BackwardMode("full_implicit", gamma=lam, cg_steps=50, cg_tol=1e-12)
        full = ig.backward_full_implicit(trace.y_final, z, params, cfg, mode, upstream)
        assert np.linalg.norm(full.grad_z - exact_z) / np.linalg.norm(exact_z) < 1e-6
        assert np.linalg.norm(full.grad_y0 - exact_y0) / np.linalg.norm(exact_y0) < 1e-6

        cfg_u = io.InnerConfig(step_size=eta, momentum=0.9, iterations=500, clip_norm=None,
                               anchor_lambda=lam, record_for_unroll=True)
        trace_u = io.minimize(z, params, y0, cfg_u)
        unrolled = ig.backward_unrolled(trace_u, z, params, upstream)
        assert np.linalg.norm(unrolled.grad_z - exact_z) / np.linalg.norm(exact_z) < 1e-4
        assert np.linalg.norm(unrolled.grad_y0 - exact_y0) / np.linalg.norm(exact_y0) < 1e-4


class TestUnrolled:
    def test_requires_recorded_tape(self, rng):
        params = enc.init_params(2, 4, "sum", rng=rng)
        cfg = io.InnerConfig(iterations=2)
        trace = io.minimize(rng.normal(size=4), params, rng.normal(size=(3, 2)), cfg)
        with pytest.raises(ValueError, match="record_for_unroll"):
            ig.backward_unrolled(trace, rng.normal(size=4), params, rng.normal(size=(3, 2)))

    def test_single_step_analytic(self):
        # Y1 = y0 - eta*2(y0 - z): dY1/dz = 2 eta, dY1/dy0 = 1 - 2 eta
        params = identity_encoder(1)
        cfg = io.InnerConfig(step_size=0.25, iterations=1, clip_norm=None, record_for_unroll=True)
        trace = io.minimize([5.0], params, np.array([[1.0]]), cfg)
        b = ig.backward_unrolled(trace, [5.0], params, np.array([[1.0]]))
        assert np.allclose(b.grad_z, [0.5])
        assert np.allclose(b.grad_y0, [[0.5]])

    def test_memory_grows_with_iterations_unlike_approximate(self, rng):
        params = enc.init_params(2, 6, "fspool", n=3, rng=rng)
        y0 = rng.normal(size=(3, 2))
        z = rng.normal(size=6)
        upstream = rng.normal(size=(3, 2))
        counts = {}
        for T in (5, 20):
            cfg = io.InnerConfig(step_size=0.1, iterations=T, clip_norm=None, record_for_unroll=True)
            trace = io.minimize(z, params, y0, cfg)
            b = ig.backward_unrolled(trace, z, params, upstream)
            cfg_a = io.InnerConfig(step_size=0.1, iterations=T, clip_norm=None)
            trace_a = io.minimize(z, params, y0, cfg_a)
            b_a = ig.backward_approximate(trace_a.y_final, z, params, cfg_a, upstream)
            counts[T] = (
                b.diagnostics["tape_nodes"],
                max(trace_a.peak_tape_nodes, b_a.diagnostics["tape_nodes"]),
            )
        assert counts[5][1] == counts[20][1]  # approximate is T-independent
        assert counts[20][0] > 5 * counts[20][1]  # unrolled >> approximate at T=20

    def test_shapes_match_across_all_modes(self, rng):
        params = enc.init_params(2, 5, "fspool", n=3, rng=rng)
        y0 = rng.normal(size=(3, 2))
        z = rng.normal(size=5)
        upstream = rng.normal(size=(3, 2))
        cfg = io.InnerConfig(step_size=0.1, iterations=3, clip_norm=None, anchor_lambda=0.2)
        a = ig.backward_approximate(y0, z, params, cfg, upstream)
        f = ig.backward_full_implicit(y0, z, params, ig.BackwardMode("full_implicit"), cfg, upstream) \
            if False else ig.backward_full_implicit(y0, z, params, cfg, ig.BackwardMode("full_implicit"), upstream)
        cfg_u = io.InnerConfig(step_size=0.1, iterations=3, clip_norm=None, anchor_lambda=0.2, record_for_unroll=True)
        trace = io.minimize(z, params, y0, cfg_u)
        u = ig.backward_unrolled(trace, z, params, upstream)
        for bundle in (a, f, u):
            assert bundle.grad_z.shape == a.grad_z.shape
            assert bundle.grad_y0.shape == upstream.shape
            assert {k: v.shape for k, v in bundle.grad_params.items()} == {
                k: v.shape for k, v in params.arrays().items()
            }


class TestOptimalityResidual:
    def test_small_at_projected_fixed_point(self, rng):
        params = enc.init_params(3, 6, "fspool", n=4, rng=rng)
        y0 = np.abs(rng.normal(size=(4, 3)))
        y0 /= y0.sum(axis=1, keepdims=True)
        cfg = io.InnerConfig(step_size=1.0, iterations=400, projection=(0, 3), clip_norm=None)
        trace = io.minimize(rng.normal(size=6) * 0.1, params, y0, cfg)
        res = ig.optimality_residual(trace.y_final, rng.normal(size=6) * 0.1, params, cfg)
        assert np.isfinite(res)

    def test_zero_at_unconstrained_optimum(self):
        params = identity_encoder(1)
        cfg = io.InnerConfig(step_size=0.25, iterations=200, clip_norm=None)
        trace = io.minimize([5.0], params, np.zeros((1, 1)), cfg)
        res = ig.optimality_residual(trace.y_final, [5.0], params, cfg)
        assert res < 1e-6
