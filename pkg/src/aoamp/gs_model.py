"""Coefficient/covariance message model and its orthogonality audits.

Every estimate of a latent N x M matrix X is carried together with the pair
(theta, sigma) of M x M matrices from the decomposition

    x_hat = X theta + Z,      X^H Z = 0,      sigma = Z^H Z / N,

fitted empirically by projecting onto the column space of the ground truth.
The pair is invariant under any orthogonal transform applied to both X and
x_hat, so messages moving through a transform keep their parameters.
"""

from dataclasses import dataclass, field, replace

import numpy as np


@dataclass(frozen=True)
class GsParams:
    """Coefficient matrix and error covariance of one message."""
    theta: np.ndarray
    sigma: np.ndarray
    degenerate: bool = False

    @classmethod
    def zero(cls, m, cplx=False):
        dt = np.complex128 if cplx else np.float64
        return cls(np.zeros((m, m), dt), np.zeros((m, m), dt))

    @property
    def m(self):
        return self.theta.shape[0]

    @property
    def informative(self):
        return bool(np.any(np.abs(self.theta) > 1e-12))

    def check(self):
        if self.theta.shape != self.sigma.shape or self.theta.shape[0] != self.theta.shape[1]:
            raise ValueError("theta/sigma must be square and same shape")
        ev = np.linalg.eigvalsh(hermitize(self.sigma))
        tr = max(np.trace(self.sigma).real, 0.0)
        if ev.min() < -1e-10 * max(tr, 1e-30):
            raise ValueError("sigma is not positive semi-definite")


@dataclass(frozen=True)
class EstimateMessage:
    """A candidate estimate of a latent variable plus its model parameters."""
    values: np.ndarray
    gs: GsParams
    domain: str = "x"         # 'x' or 'xi'
    port: str = ""
    direction: str = "in"     # 'in' or 'out'
    t: int = 0

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def m(self):
        return self.values.shape[1]


def hermitize(a):
    return 0.5 * (a + a.conj().T)


def gs_fit(x_true, x_hat):
    """Fit (theta, sigma) of x_hat against the ground truth x_true.

    Returns (GsParams, error matrix Z).  A singular Gram matrix (e.g. the
    all-zero message of the first iteration) falls back to the pseudo-inverse
    and flags the result degenerate.
    """
    x_true = np.asarray(x_true)
    x_hat = np.asarray(x_hat)
    if x_true.shape != x_hat.shape:
        raise ValueError("shape mismatch between truth and estimate")
    n = x_true.shape[0]
    gram = x_true.conj().T @ x_true
    cross = x_true.conj().T @ x_hat
    degenerate = False
    try:
        theta = np.linalg.solve(gram, cross)
        # solve() succeeds on nearly singular systems; validate the residual
        if not np.all(np.isfinite(theta)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        theta = np.linalg.pinv(gram) @ cross
        degenerate = True
    z = x_hat - x_true @ theta
    sigma = hermitize(z.conj().T @ z / n)
    if not np.any(theta) and not np.any(sigma):
        degenerate = True   # zero-information message
    return GsParams(theta, sigma, degenerate), z


def transport_through_transform(msg, op, direction):
    """Move a message through an orthogonal transform; parameters unchanged.

    direction 'forward' multiplies by V (x-domain -> xi-domain), 'adjoint'
    by V^H.  The domain tag flips accordingly.
    """
    if direction == "forward":
        vals, domain = op.apply(msg.values), "xi"
    elif direction == "adjoint":
        vals, domain = op.apply_adjoint(msg.values), "x"
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return replace(msg, values=vals, domain=domain)


# ---------------------------------------------------------------------------
# Orthogonality / Gaussianity audits
# ---------------------------------------------------------------------------

def normalized_inner(f, g):
    """Max over column pairs of |f_i^H g_j| / (||f_i|| ||g_j||); 0 if a side is 0."""
    nf = np.linalg.norm(f, axis=0)
    ng = np.linalg.norm(g, axis=0)
    inner = np.abs(f.conj().T @ g)
    denom = np.outer(nf, ng)
    out = np.zeros_like(inner, dtype=np.float64)
    mask = denom > 0
    out[mask] = inner[mask] / denom[mask]
    return float(out.max()) if out.size else 0.0


def excess_kurtosis(col):
    """Excess kurtosis of a real sample (0 for Gaussian)."""
    col = np.asarray(col, dtype=np.float64)
    mu = col.mean()
    c = col - mu
    v = np.mean(c ** 2)
    if v <= 0:
        return 0.0
    return float(np.mean(c ** 4) / v ** 2 - 3.0)


def column_kurtoses(z):
    """Per-column excess kurtosis; complex columns audited per component."""
    rows = []
    for j in range(z.shape[1]):
        col = z[:, j]
        if np.iscomplexobj(z):
            rows.append((f"{j}:re", excess_kurtosis(col.real)))
            rows.append((f"{j}:im", excess_kurtosis(col.imag)))
        else:
            rows.append((f"{j}", excess_kurtosis(col.real)))
    return rows


class LedgerDisabledError(RuntimeError):
    pass


class ErrorLedger:
    """Per-trial store of empirical message errors for orthogonality audits.

    Retention is opt-in and bounded: stacks grow as N x (t M) per port and
    exist only to audit the vanishing-correlation and Gaussianity claims.
    """

    def __init__(self, max_t=32):
        self.max_t = max_t
        self._in = {}      # (port, domain) -> list of (t, Z)
        self._out = {}
        self._truth = {}   # (port, domain) -> ground-truth matrix

    def set_truth(self, port, domain, x):
        self._truth[(port, domain)] = x

    def record(self, port, domain, direction, t, z):
        if t > self.max_t:
            return
        store = self._in if direction == "in" else self._out
        store.setdefault((port, domain), []).append((t, z))

    def keys(self):
        return sorted(set(self._in) | set(self._out))

    def errors(self, port, domain, direction):
        """{t: Z} for one port, domain and direction."""
        store = self._in if direction == "in" else self._out
        return dict(store.get((port, domain), []))

    def truth(self, port, domain):
        return self._truth.get((port, domain))

    def error_stack(self, port, domain, direction):
        """Concatenated errors [Z^0, ..., Z^t] for one port and domain."""
        store = self._in if direction == "in" else self._out
        entries = sorted(store.get((port, domain), []))
        if not entries:
            return np.zeros((0, 0))
        return np.concatenate([z for _, z in entries], axis=1)

    def audit(self, t):
        """Audit rows at iteration t: cross-iteration and truth correlations
        plus per-column excess kurtosis of the input errors.

        Returns a list of dicts with keys (t, port, domain, metric, value).
        """
        if not self._in and not self._out:
            raise LedgerDisabledError("auditing was not enabled for this run")
        rows = []
        for key in self.keys():
            port, domain = key
            outs = dict(self._out.get(key, []))
            ins = dict(self._in.get(key, []))
            z_out = outs.get(t)
            if z_out is not None:
                worst = 0.0
                for tp, z_in in ins.items():
                    if tp < t:
                        worst = max(worst, normalized_inner(z_in, z_out))
                rows.append({"t": t, "port": port, "domain": domain,
                             "metric": "in_out_corr", "value": worst})
                truth = self._truth.get(key)
                if truth is not None:
                    rows.append({"t": t, "port": port, "domain": domain,
                                 "metric": "truth_out_corr",
                                 "value": normalized_inner(truth, z_out)})
            z_in = ins.get(t)
            if z_in is not None:
                for label, kurt in column_kurtoses(z_in):
                    rows.append({"t": t, "port": port, "domain": domain,
                                 "metric": f"in_kurtosis[{label}]", "value": kurt})
        return rows


def audit_orthogonality(ledger, t):
    """Spec-level entry point; see ErrorLedger.audit."""
    return ledger.audit(t)
