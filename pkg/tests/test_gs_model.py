"""Message-model fitting, transform invariance, and audits."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aoamp.gs_model import (ErrorLedger, EstimateMessage, GsParams,
                            LedgerDisabledError, column_kurtoses,
                            excess_kurtosis, gs_fit, normalized_inner,
                            transport_through_transform)
from aoamp.linops import IdentityOperator, rng_from, sample_haar


def test_fit_perfect_estimate():
    x = rng_from(0, "x").standard_normal((50, 2))
    gs, z = gs_fit(x, x)
    assert np.allclose(gs.theta, np.eye(2), atol=1e-12)
    assert np.abs(gs.sigma).max() < 1e-24
    assert np.abs(z).max() < 1e-12


def test_fit_pure_scaling():
    x = rng_from(1, "x").standard_normal((50, 2))
    gs, _ = gs_fit(x, 2.0 * x)
    assert np.allclose(gs.theta, 2.0 * np.eye(2), atol=1e-12)
    assert np.abs(gs.sigma).max() < 1e-24


def test_fit_known_generator_monte_carlo():
    n, v = 100_000, 0.3
    rng = rng_from(2, "mc")
    x = (rng.integers(0, 2, size=(n, 2)) * 2 - 1).astype(float)
    theta_star = np.array([[0.9, 0.1], [-0.2, 0.7]])
    w = np.sqrt(v) * rng.standard_normal((n, 2))
    gs, _ = gs_fit(x, x @ theta_star + w)
    assert np.abs(gs.theta - theta_star).max() < 5 * np.sqrt(v / n)
    assert np.abs(gs.sigma - v * np.eye(2)).max() < 0.05 * v


def test_fit_degenerate_flags_pseudoinverse():
    x = np.zeros((10, 2))
    gs, _ = gs_fit(x, np.ones((10, 2)))
    assert gs.degenerate


@given(seed=st.integers(0, 50), m=st.integers(1, 3))
@settings(max_examples=20, deadline=None)
def test_fit_orthogonality_exact(seed, m):
    rng = rng_from(seed, "orth")
    x = rng.standard_normal((200, m))
    x_hat = rng.standard_normal((200, m))
    gs, z = gs_fit(x, x_hat)
    num = np.abs(x.T @ z).max()
    denom = np.linalg.norm(x) * max(np.linalg.norm(z), 1e-30)
    assert num / denom < 1e-8


def test_fit_complex_orthogonality():
    rng = rng_from(3, "cplx")
    x = rng.standard_normal((300, 2)) + 1j * rng.standard_normal((300, 2))
    xh = rng.standard_normal((300, 2)) + 1j * rng.standard_normal((300, 2))
    gs, z = gs_fit(x, xh)
    assert np.abs(x.conj().T @ z).max() / (np.linalg.norm(x) * np.linalg.norm(z)) < 1e-8
    # sigma Hermitian PSD
    assert np.abs(gs.sigma - gs.sigma.conj().T).max() < 1e-12
    assert np.linalg.eigvalsh(gs.sigma).min() > -1e-12


def _message(n=64, m=2, seed=4):
    rng = rng_from(seed, "msg")
    x = rng.standard_normal((n, m))
    x_hat = x @ np.array([[0.8, 0.0], [0.1, 0.6]])[:m, :m] + \
        0.3 * rng.standard_normal((n, m))
    gs, _ = gs_fit(x, x_hat)
    return x, EstimateMessage(x_hat, gs, "x", "s", "in", 1)


def test_transport_identity():
    x, msg = _message()
    out = transport_through_transform(msg, IdentityOperator(64), "forward")
    assert np.array_equal(out.values, msg.values)
    assert out.gs is msg.gs
    assert out.domain == "xi"


def test_transport_parameter_invariance():
    # fitting before or after an orthogonal transform gives identical params
    x, msg = _message()
    op = sample_haar(64, 11)
    gs_before, _ = gs_fit(x, msg.values)
    gs_after, _ = gs_fit(op.apply(x), op.apply(msg.values))
    assert np.abs(gs_before.theta - gs_after.theta).max() < 1e-8
    assert np.abs(gs_before.sigma - gs_after.sigma).max() < 1e-8


def test_transport_round_trip():
    _, msg = _message()
    op = sample_haar(64, 12)
    fwd = transport_through_transform(msg, op, "forward")
    back = transport_through_transform(fwd, op, "adjoint")
    assert np.abs(back.values - msg.values).max() < 1e-9


def test_dimension_mismatch_raises():
    _, msg = _message()
    with pytest.raises(ValueError):
        transport_through_transform(msg, sample_haar(32, 1), "forward")


def test_excess_kurtosis_gaussian_near_zero():
    x = rng_from(5, "kurt").standard_normal(200_000)
    assert abs(excess_kurtosis(x)) < 0.05
    # and a clearly non-Gaussian sample is flagged
    b = np.sign(x)
    assert excess_kurtosis(b) < -1.5


def test_column_kurtoses_complex_components():
    rng = rng_from(6, "kc")
    z = rng.standard_normal((5000, 1)) + 1j * rng.standard_normal((5000, 1))
    rows = dict(column_kurtoses(z))
    assert set(rows) == {"0:re", "0:im"}


def test_normalized_inner_zero_guard():
    z = np.zeros((10, 2))
    g = np.ones((10, 2))
    assert normalized_inner(z, g) == 0.0


def test_ledger_zero_init_audit():
    led = ErrorLedger()
    led.set_truth("s", "x", np.ones((8, 1)))
    led.record("s", "x", "in", 0, np.zeros((8, 1)))
    led.record("s", "x", "out", 1, np.ones((8, 1)))
    rows = led.audit(1)
    corr = [r for r in rows if r["metric"] == "in_out_corr"]
    assert corr and corr[0]["value"] == 0.0


def test_ledger_disabled_error():
    with pytest.raises(LedgerDisabledError):
        ErrorLedger().audit(1)


def test_ledger_stack_growth():
    led = ErrorLedger()
    for t in range(3):
        led.record("s", "x", "in", t, np.zeros((8, 2)))
    assert led.error_stack("s", "x", "in").shape == (8, 6)


def test_params_psd_check():
    with pytest.raises(ValueError):
        GsParams(np.eye(2), -np.eye(2)).check()
    GsParams(np.eye(2), np.eye(2)).check()
