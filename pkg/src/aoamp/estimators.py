"""Local estimator prototypes and their orthogonalizing wrapper.

Each node consumes one message per port (values plus (theta, sigma) model
parameters), returns per-port posterior-mean matrices, and can synthesize
(truth, input) surrogate pairs for Monte-Carlo calibration.  All nodes are
row-wise separable and stateless across evaluations.

The wrapper subtracts a per-port linear correction X_in @ delta_k chosen so
that input and output estimation errors decorrelate; delta_k is the
regression coefficient of the prototype output on the input error, obtained
in closed form for linear nodes and by Monte Carlo otherwise.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr

from .gs_model import EstimateMessage, GsParams, gs_fit, hermitize
from .linops import SourceSpec

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Gaussian-message helpers
# ---------------------------------------------------------------------------

def psd_floor(sigma, floor=0.0):
    """Eigenvalue-clip a covariance to PSD; returns (matrix, was_clipped)."""
    sigma = hermitize(np.asarray(sigma))
    w, v = np.linalg.eigh(sigma)
    if w.min() >= floor:
        return sigma, False
    w = np.maximum(w, floor)
    return hermitize((v * w) @ v.conj().T), True


def sample_error_rows(sigma, n, rng, cplx):
    """Draw n rows with row covariance sigma (circular in complex mode)."""
    m = sigma.shape[0]
    sig, _ = psd_floor(sigma, 0.0)
    # row convention E{z^H z} = sigma corresponds to column covariance conj(sigma)
    w, v = np.linalg.eigh(np.conj(sig))
    root = (v * np.sqrt(np.maximum(w, 0.0))) @ v.conj().T
    if cplx:
        g = (rng.standard_normal((n, m)) + 1j * rng.standard_normal((n, m))) / np.sqrt(2.0)
    else:
        g = rng.standard_normal((n, m))
    return g @ root.T


def _sigma_inv(gs):
    """Regularized inverse of sigma, floored relative to the message scale."""
    sigma = gs.sigma
    m = sigma.shape[0]
    scale = max(np.trace(sigma).real / m,
                np.trace(gs.theta.conj().T @ gs.theta).real / m, 1e-300)
    return np.linalg.inv(hermitize(sigma) + 1e-14 * scale * np.eye(m))


def _msg_terms(values, gs):
    """Precision J = theta sigma^-1 theta^H and info rows h = values sigma^-1 theta^H."""
    m = gs.m
    if not gs.informative:
        return np.zeros((m, m), dtype=values.dtype), np.zeros_like(values)
    si = _sigma_inv(gs)
    j = hermitize(gs.theta @ si @ gs.theta.conj().T)
    h = values @ si @ gs.theta.conj().T
    return j, h


def _solve_rows(j_stack, h_rows):
    """Solve mu J = h row-wise for a stack of (possibly singular) J."""
    jinv = np.linalg.pinv(j_stack)
    if jinv.shape[0] == 1:
        return h_rows @ jinv[0], jinv
    return np.einsum("nm,nmk->nk", h_rows, jinv), jinv


# ---------------------------------------------------------------------------
# Node interface
# ---------------------------------------------------------------------------

class EstimatorNode:
    """Prototype estimator over one or more ports.

    Attributes: port_rows (rows per port), m (columns), cplx, name.
    """

    name = "node"
    decidable = False   # True when hard sign decisions are meaningful

    def __init__(self, port_rows, m, cplx, name=None):
        self.port_rows = list(port_rows)
        self.m = int(m)
        self.cplx = bool(cplx)
        if name:
            self.name = name

    @property
    def nports(self):
        return len(self.port_rows)

    def prototype(self, msgs):
        """Posterior-mean values per port given one message per port."""
        raise NotImplementedError

    def surrogate(self, n_rep, rng):
        """Synthetic truth per port (n_rep copies of the row structure)
        and a node instance bound to matching synthetic observations."""
        raise NotImplementedError

    def delta_exact(self, gs_in):
        """Closed-form correction coefficients, or None to fall back to MC."""
        return None

    def _dtype(self):
        return np.complex128 if self.cplx else np.float64

    def _check_msgs(self, msgs):
        if len(msgs) != self.nports:
            raise ValueError(f"{self.name}: expected {self.nports} messages, got {len(msgs)}")
        for msg, rows in zip(msgs, self.port_rows):
            if msg.values.shape != (rows, self.m):
                raise ValueError(f"{self.name}: message shape {msg.values.shape} "
                                 f"does not match port ({rows}, {self.m})")
            if not np.all(np.isfinite(msg.values)):
                raise ValueError(f"{self.name}: non-finite message values")


def _uninformative(rows, m, cplx):
    dt = np.complex128 if cplx else np.float64
    return EstimateMessage(np.zeros((rows, m), dt), GsParams.zero(m, cplx))


# ---------------------------------------------------------------------------
# Discrete prior node
# ---------------------------------------------------------------------------

class BpskPriorNode(EstimatorNode):
    """Posterior mean under a +-1 (optionally pairwise-correlated) prior.

    The belief about the stream correlation may differ from the generating
    one (used by the detect-each-stream-individually baseline).
    """

    name = "prior"
    decidable = True

    def __init__(self, n, m, source, cplx, name=None):
        super().__init__([n], m, cplx, name)
        self.source = source
        self.patterns, self.log_prior = self._enumerate(source, m)

    @staticmethod
    def _enumerate(source, m):
        if source.kind == "correlated-bpsk":
            if m != 2:
                raise ValueError("correlated-bpsk prior requires m = 2")
            pats = np.array([[1, 1], [-1, -1], [1, -1], [-1, 1]], dtype=np.float64)
            a = min(max(source.alpha, 1e-300), 1.0)
            logp = np.log(np.array([(1 - a) / 2, (1 - a) / 2, a / 2, a / 2]).clip(1e-300))
        elif source.kind == "bpsk":
            if m > 8:
                raise ValueError("sign-pattern enumeration limited to m <= 8")
            grid = np.array(np.meshgrid(*([[-1.0, 1.0]] * m), indexing="ij"))
            pats = grid.reshape(m, -1).T
            logp = np.full(pats.shape[0], -m * np.log(2.0))
        else:
            raise ValueError("prior node supports bpsk / correlated-bpsk only")
        return pats, logp

    def posterior_probs(self, msg):
        """Per-row posterior over sign patterns."""
        x = msg.values
        if not msg.gs.informative:
            w = np.exp(self.log_prior - self.log_prior.max())
            w /= w.sum()
            return np.tile(w, (x.shape[0], 1))
        si = _sigma_inv(msg.gs)
        means = self.patterns.astype(x.dtype) @ msg.gs.theta       # (P, M)
        resid = x[:, None, :] - means[None, :, :]                  # (N, P, M)
        q = np.einsum("npm,mk,npk->np", resid, si, resid.conj()).real
        scale = 1.0 if self.cplx else 0.5
        logw = self.log_prior[None, :] - scale * q
        logw -= logw.max(axis=1, keepdims=True)
        w = np.exp(logw)
        return w / w.sum(axis=1, keepdims=True)

    def prototype(self, msgs):
        self._check_msgs(msgs)
        probs = self.posterior_probs(msgs[0])
        post = probs @ self.patterns
        return [post.astype(self._dtype())]

    def surrogate(self, n_rep, rng):
        n = n_rep * self.port_rows[0]
        x = self.source.sample(n, self.m, rng).astype(self._dtype())
        node = BpskPriorNode(n, self.m, self.source, self.cplx, self.name)
        return [x], node


def denoise_bpsk(msg):
    """Columnwise posterior mean under independent +-1 priors."""
    node = BpskPriorNode(msg.n, msg.m, SourceSpec("bpsk"),
                         np.iscomplexobj(msg.values))
    return node.prototype([msg])[0]


def denoise_bpsk_correlated(msg, alpha):
    """Posterior mean under the two-stream prior with flip probability alpha."""
    node = BpskPriorNode(msg.n, msg.m, SourceSpec("correlated-bpsk", alpha=alpha),
                         np.iscomplexobj(msg.values))
    return node.prototype([msg])[0]


# ---------------------------------------------------------------------------
# Linear-Gaussian nodes
# ---------------------------------------------------------------------------

class LinearPairNode(EstimatorNode):
    """Joint Gaussian estimate of two variables coupled row-wise by b = lam a (+ noise).

    Row i of port b equals lam[i] times row i of port a, plus optional IID
    Gaussian slack of variance noise_var.  Rows of the taller port beyond the
    coupled range carry no cross information.

    Message handling per port is configurable:
      prior_cov: row prior N(0, prior_cov) on the a variable (None = flat);
      extrinsic: exclude each port's own message from that port's output
                 (the correction then vanishes identically).
    """

    name = "linear-pair"

    def __init__(self, n_a, n_b, m, lam, noise_var=0.0, cov_a=None, cplx=False,
                 name=None, prior_cov=None, extrinsic=False):
        super().__init__([n_a, n_b], m, cplx, name)
        lam = np.atleast_1d(np.asarray(lam, dtype=np.float64))
        npair = min(n_a, n_b)
        if lam.size == 1:
            lam = np.full(npair, lam[0])
        if lam.size != npair:
            raise ValueError(f"lam length {lam.size} != paired row count {npair}")
        if noise_var < 0:
            raise ValueError("noise_var must be >= 0")
        self.lam = lam
        self.noise_var = float(noise_var)
        self.cov_a = np.eye(m) if cov_a is None else np.asarray(cov_a)
        self.prior_cov = None if prior_cov is None else np.asarray(prior_cov)
        self.extrinsic = bool(extrinsic)

    def _prior_j(self, dtype):
        if self.prior_cov is None:
            return np.zeros((self.m, self.m), dtype=dtype)
        return np.linalg.inv(self.prior_cov).astype(dtype)

    def _terms(self, msgs):
        (ja, ha), (jb, hb) = (_msg_terms(msgs[i].values, msgs[i].gs) for i in range(2))
        return ja, ha, jb, hb

    def _solve_pair(self, ja, ha, jb, hb):
        """Posterior of (a, b) on the coupled rows from the given terms."""
        m = self.m
        lam = self.lam
        npair = lam.size
        jpri = self._prior_j(ja.dtype)
        if self.noise_var == 0.0:
            jp = (ja + jpri)[None] + (lam ** 2)[:, None, None] * jb[None]
            hp = ha[:npair] + lam[:, None] * hb[:npair]
            mu, _ = _solve_rows(jp, hp)
            return mu, lam[:, None] * mu
        ve_prec = 1.0 / self.noise_var
        jj = np.zeros((npair, 2 * m, 2 * m), dtype=ja.dtype)
        jj[:, :m, :m] = (ja + jpri)[None] + (lam ** 2)[:, None, None] * jb[None]
        jj[:, :m, m:] = lam[:, None, None] * jb[None]
        jj[:, m:, :m] = lam[:, None, None] * jb[None].conj().transpose(0, 2, 1)
        jj[:, m:, m:] = jb[None] + ve_prec * np.eye(m)
        hh = np.concatenate([ha[:npair] + lam[:, None] * hb[:npair], hb[:npair]], axis=1)
        mu, _ = _solve_rows(jj, hh)
        return mu[:, :m], lam[:, None] * mu[:, :m] + mu[:, m:]

    def prototype(self, msgs):
        self._check_msgs(msgs)
        n_a, n_b = self.port_rows
        npair = self.lam.size
        ja, ha, jb, hb = self._terms(msgs)
        m = self.m
        jpri = self._prior_j(ja.dtype)
        val_a = np.zeros((n_a, m), dtype=self._dtype())
        val_b = np.zeros((n_b, m), dtype=self._dtype())

        if self.extrinsic:
            # each port sees only the other port's message (plus the prior)
            mu_a, _ = self._solve_pair(np.zeros_like(ja), np.zeros_like(ha), jb, hb)
            _, mu_b = self._solve_pair(ja, ha, np.zeros_like(jb), np.zeros_like(hb))
            val_a[:npair] = mu_a
            val_b[:npair] = mu_b
            # tail rows of a have nothing to draw on: prior mean 0
            return [val_a, val_b]

        mu_a, mu_b = self._solve_pair(ja, ha, jb, hb)
        val_a[:npair] = mu_a
        val_b[:npair] = mu_b
        if n_a > npair:
            mu_t, _ = _solve_rows((ja + jpri)[None], ha[npair:])
            val_a[npair:] = mu_t
        if n_b > npair:
            mu_t, _ = _solve_rows(jb[None], hb[npair:])
            val_b[npair:] = mu_t
        return [val_a, val_b]

    def delta_exact(self, gs_in):
        m = self.m
        dt = np.complex128 if self.cplx else np.float64
        if self.extrinsic:
            return [np.zeros((m, m), dtype=dt), np.zeros((m, m), dtype=dt)]
        if self.noise_var != 0.0:
            return None
        lam = self.lam
        npair = lam.size
        n_a, n_b = self.port_rows
        ja = compute_j(gs_in[0])
        jb = compute_j(gs_in[1])
        jpri = self._prior_j(ja.dtype)
        jp = (ja + jpri)[None] + (lam ** 2)[:, None, None] * jb[None]
        jinv = np.linalg.pinv(jp)
        wa = _coef(gs_in[0])
        wb = _coef(gs_in[1])
        # port a: mean over rows of the self-coefficients sigma^-1 theta^H J_i^-1
        da = np.einsum("mk,nkl->ml", wa, jinv)
        if n_a > npair:
            da = da + (n_a - npair) * (wa @ np.linalg.pinv(ja + jpri))
        db = np.einsum("n,mk,nkl->ml", lam ** 2, wb, jinv)
        if n_b > npair:
            db = db + (n_b - npair) * (wb @ np.linalg.pinv(jb))
        return [da / n_a, db / n_b]

    def surrogate(self, n_rep, rng):
        # paired rows first so the replicated node's row coupling matches
        n_a, n_b = self.port_rows
        npair = self.lam.size
        if n_b > n_a:
            raise NotImplementedError("surrogate requires rows(a) >= rows(b)")
        a = sample_error_rows(self.cov_a, n_rep * n_a, rng, self.cplx)
        pair_rows = n_rep * npair
        lam_rep = np.tile(self.lam, n_rep)
        b = lam_rep[:, None] * a[:pair_rows]
        if self.noise_var > 0:
            b = b + sample_error_rows(self.noise_var * np.eye(self.m),
                                      pair_rows, rng, self.cplx)
        node = LinearPairNode(n_rep * n_a, n_rep * n_b, self.m, lam_rep,
                              self.noise_var, self.cov_a, self.cplx, self.name,
                              prior_cov=self.prior_cov, extrinsic=self.extrinsic)
        return [a, b], node


def compute_j(gs):
    if not gs.informative:
        return np.zeros_like(gs.theta)
    return hermitize(gs.theta @ _sigma_inv(gs) @ gs.theta.conj().T)


def has_error(gs):
    """False when the message is error-free (or empty); such inputs need no
    correction — a zero error is orthogonal to everything already."""
    scale = max(np.trace(gs.theta.conj().T @ gs.theta).real, 1e-300)
    return np.trace(gs.sigma).real > 1e-14 * scale


def _coef(gs):
    if not gs.informative or not has_error(gs):
        return np.zeros_like(gs.theta)
    return _sigma_inv(gs) @ gs.theta.conj().T


def lmmse_linear_pair(msg_a, msg_b, lam, noise_var=0.0):
    """Functional form of LinearPairNode; returns (value_a, value_b)."""
    node = LinearPairNode(msg_a.n, msg_b.n, msg_a.m, lam, noise_var,
                          cplx=np.iscomplexobj(msg_a.values))
    va, vb = node.prototype([msg_a, msg_b])
    return va, vb


class LinearObsNode(EstimatorNode):
    """Single-port Gaussian refinement against an external observation
    obs = lam * x + noise with per-row gains lam and entry variance noise_var.

    prior_cov places a row prior N(0, prior_cov) on the variable (None = flat).
    """

    name = "linear-obs"

    def __init__(self, n, m, lam, noise_var, obs, cov_x=None, cplx=False,
                 name=None, prior_cov=None):
        super().__init__([n], m, cplx, name)
        lam = np.atleast_1d(np.asarray(lam, dtype=np.float64))
        if lam.size == 1:
            lam = np.full(obs.shape[0], lam[0])
        if obs.shape != (lam.size, m):
            raise ValueError("observation shape does not match gains")
        if lam.size > n:
            raise ValueError("more observation rows than variable rows")
        if noise_var < 0:
            raise ValueError("noise_var must be >= 0")
        self.lam = lam
        self.noise_var = float(noise_var)
        self.obs = obs
        self.cov_x = np.eye(m) if cov_x is None else np.asarray(cov_x)
        self.prior_cov = None if prior_cov is None else np.asarray(prior_cov)

    def _prior_j(self, dtype):
        if self.prior_cov is None:
            return np.zeros((self.m, self.m), dtype=dtype)
        return np.linalg.inv(self.prior_cov).astype(dtype)

    def prototype(self, msgs):
        self._check_msgs(msgs)
        n, m = self.port_rows[0], self.m
        npair = self.lam.size
        j, h = _msg_terms(msgs[0].values, msgs[0].gs)
        jpri = self._prior_j(j.dtype)
        val = np.zeros((n, m), dtype=self._dtype())
        lam = self.lam
        if self.noise_var == 0.0:
            # exact observation pins the observed rows
            nz = lam != 0
            val[:npair][nz] = self.obs[nz] / lam[nz, None]
            if np.any(~nz):
                mu, _ = _solve_rows((j + jpri)[None], h[:npair][~nz])
                val[:npair][~nz] = mu
        else:
            jp = (j + jpri)[None] + ((lam ** 2) / self.noise_var)[:, None, None] * np.eye(m)
            hp = h[:npair] + (lam / self.noise_var)[:, None] * self.obs
            mu, _ = _solve_rows(jp, hp)
            val[:npair] = mu
        if n > npair:
            mu_t, _ = _solve_rows((j + jpri)[None], h[npair:])
            val[npair:] = mu_t
        return [val]

    def delta_exact(self, gs_in):
        n, m = self.port_rows[0], self.m
        j = compute_j(gs_in[0])
        jpri = self._prior_j(j.dtype)
        w = _coef(gs_in[0])
        if self.noise_var == 0.0:
            # observed nonzero-gain rows do not depend on the input at all
            free = n - self.lam.size + np.count_nonzero(self.lam == 0)
            if free == 0:
                return [np.zeros((m, m), dtype=self._dtype())]
            return [free / n * (w @ np.linalg.pinv(j + jpri))]
        jp = (j + jpri)[None] + ((self.lam ** 2) / self.noise_var)[:, None, None] * np.eye(m)
        jinv = np.linalg.pinv(jp)
        d = np.einsum("mk,nkl->ml", w, jinv)
        tail = n - self.lam.size
        if tail:
            d = d + tail * (w @ np.linalg.pinv(j + jpri))
        return [d / n]

    def surrogate(self, n_rep, rng):
        # observed rows first so the replicated node's gains line up
        n = self.port_rows[0]
        pair_rows = n_rep * self.lam.size
        lam_rep = np.tile(self.lam, n_rep)
        x = sample_error_rows(self.cov_x, n_rep * n, rng, self.cplx)
        o = lam_rep[:, None] * x[:pair_rows]
        if self.noise_var > 0:
            o = o + sample_error_rows(self.noise_var * np.eye(self.m),
                                      pair_rows, rng, self.cplx)
        node = LinearObsNode(n_rep * n, self.m, lam_rep, self.noise_var, o,
                             self.cov_x, self.cplx, self.name,
                             prior_cov=self.prior_cov)
        return [x], node


def awgn_anchor(msg, y_obs, v):
    """Gaussian posterior mean combining a message with obs y = x + n(v)."""
    if v < 0:
        raise ValueError("noise variance must be >= 0")
    node = LinearObsNode(msg.n, msg.m, 1.0, v, y_obs,
                         cplx=np.iscomplexobj(msg.values))
    return node.prototype([msg])[0]


# ---------------------------------------------------------------------------
# Saturation (clipping) node
# ---------------------------------------------------------------------------

def clip_components(y, z):
    """Saturate at +-z, applied to real and imaginary parts independently."""
    if np.iscomplexobj(y):
        return np.clip(y.real, -z, z) + 1j * np.clip(y.imag, -z, z)
    return np.clip(y, -z, z)


def _log_gauss_mass(lo, hi):
    """log(Phi(hi) - Phi(lo)) for standardized bounds, stable in the tails."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    out = np.empty(np.broadcast(lo, hi).shape)
    lo, hi = np.broadcast_arrays(lo, hi)
    left = hi <= 0
    right = lo >= 0
    mid = ~(left | right)
    with np.errstate(divide="ignore", invalid="ignore"):
        if left.any():
            a, b = log_ndtr(hi[left]), log_ndtr(lo[left])
            out[left] = a + np.log1p(-np.exp(np.minimum(b - a, -1e-300)))
        if right.any():
            a, b = log_ndtr(-lo[right]), log_ndtr(-hi[right])
            out[right] = a + np.log1p(-np.exp(np.minimum(b - a, -1e-300)))
        if mid.any():
            from scipy.special import ndtr
            out[mid] = np.log(np.maximum(ndtr(hi[mid]) - ndtr(lo[mid]), 1e-300))
    return out


def _log_phi(x):
    return -0.5 * x ** 2 - _LOG_SQRT_2PI


def _trunc_mean(m, s, lo, hi, logmass):
    """Conditional mean of N(m, s) truncated to (lo, hi), given log mass."""
    sd = np.sqrt(s)
    a = (lo - m) / sd
    b = (hi - m) / sd
    term_a = np.where(np.isfinite(a), np.exp(_log_phi(np.where(np.isfinite(a), a, 0.0))
                                             - logmass), 0.0)
    term_b = np.where(np.isfinite(b), np.exp(_log_phi(np.where(np.isfinite(b), b, 0.0))
                                             - logmass), 0.0)
    return m + sd * (term_a - term_b)


def clip_posterior_1d(mu_u, v_u, v_n, w_hat, v_w, z, c):
    """Scalar posterior means through y = u + n, w = clip(y)/c.

    u ~ N(mu_u, v_u), n ~ N(0, v_n); w observed as N(w_hat, v_w) (w_hat=None
    for an uninformative second port).  Returns (E[u], E[w]).  All array
    arguments broadcast row-wise.
    """
    mu_u = np.asarray(mu_u, dtype=np.float64)
    v_y = np.maximum(v_u + v_n, 1e-30)
    informative = w_hat is not None
    if informative:
        w_hat = np.asarray(w_hat, dtype=np.float64)
        v_w = np.maximum(np.asarray(v_w, dtype=np.float64), 1e-30)

    if informative:
        b = c * c * v_w
        s_m = 1.0 / (1.0 / v_y + 1.0 / b)
        m_m = s_m * (mu_u / v_y + w_hat / (c * v_w))
        log_pref = (-0.5 * np.log(v_y + b) - _LOG_SQRT_2PI
                    - 0.5 * (mu_u - c * w_hat) ** 2 / (v_y + b)
                    + 0.5 * np.log(b) + _LOG_SQRT_2PI)
    else:
        s_m, m_m = v_y, mu_u
        log_pref = np.zeros_like(mu_u)

    if np.isinf(z):
        ey = m_m
        return mu_u + v_u / v_y * (ey - mu_u), ey / c

    sd_m = np.sqrt(s_m)
    log_mass_m = log_pref + _log_gauss_mass((-z - m_m) / sd_m, (z - m_m) / sd_m)
    mean_m = _trunc_mean(m_m, s_m, -z, z,
                         _log_gauss_mass((-z - m_m) / sd_m, (z - m_m) / sd_m))

    sd_y = np.sqrt(v_y)
    log_tail_hi = _log_gauss_mass((z - mu_u) / sd_y, np.inf)
    log_tail_lo = _log_gauss_mass(-np.inf, (-z - mu_u) / sd_y)
    if informative:
        log_mass_r = -0.5 * (w_hat - z / c) ** 2 / v_w + log_tail_hi
        log_mass_l = -0.5 * (w_hat + z / c) ** 2 / v_w + log_tail_lo
    else:
        log_mass_r, log_mass_l = log_tail_hi, log_tail_lo
    mean_r = _trunc_mean(mu_u, v_y, z, np.inf, log_tail_hi)
    mean_l = _trunc_mean(mu_u, v_y, -np.inf, -z, log_tail_lo)

    logs = np.stack([log_mass_m, log_mass_r, log_mass_l])
    top = logs.max(axis=0)
    w = np.exp(logs - top)
    w /= w.sum(axis=0)
    ey = w[0] * mean_m + w[1] * mean_r + w[2] * mean_l
    ew = (w[0] * mean_m + w[1] * z - w[2] * z) / c
    eu = mu_u + v_u / v_y * (ey - mu_u)
    return eu, ew


class ClipPairNode(EstimatorNode):
    """Joint estimate of (x_r, x_eta) under x_eta = clip(x_r + n)/scale.

    Processes each column pair independently and, in complex mode, the real
    and imaginary components independently with variances split evenly.
    When the x_r message carries no information the design-time Gaussian
    prior N(0, prior_var) takes its place.
    """

    name = "clip-pair"

    def __init__(self, n, m, v_noise, z_thresh, scale, prior_var, cplx, name=None):
        if z_thresh <= 0 or scale <= 0:
            raise ValueError("clip threshold and scale must be positive")
        if v_noise < 0 or prior_var <= 0:
            raise ValueError("variances must be positive")
        super().__init__([n, n], m, cplx, name)
        self.v_noise = float(v_noise)
        self.z = float(z_thresh)
        self.scale = float(scale)
        self.prior_var = float(prior_var)

    def _column_stats(self, msg, col, fallback_var):
        """(pseudo mean, total pseudo variance) for one column, or prior."""
        theta = msg.gs.theta[col, col]
        if abs(theta) < 1e-12:
            return None, fallback_var
        var = max(msg.gs.sigma[col, col].real, 0.0) / abs(theta) ** 2
        mu = msg.values[:, col] * np.conj(theta) / abs(theta) ** 2
        return mu, var

    def prototype(self, msgs):
        self._check_msgs(msgs)
        msg_r, msg_eta = msgs
        n = self.port_rows[0]
        split = 0.5 if self.cplx else 1.0
        v_n = self.v_noise * split
        val_r = np.zeros((n, self.m), dtype=self._dtype())
        val_e = np.zeros((n, self.m), dtype=self._dtype())
        for col in range(self.m):
            mu_r, v_u_tot = self._column_stats(msg_r, col, self.prior_var)
            mu_w, v_w_tot = self._column_stats(msg_eta, col, np.inf)
            v_u = v_u_tot * split
            v_w = None if mu_w is None else v_w_tot * split
            comps = (("real", "imag") if self.cplx else ("real",))
            eu = np.zeros(n, dtype=self._dtype())
            ew = np.zeros(n, dtype=self._dtype())
            for part in comps:
                take = (lambda a: getattr(a, part)) if self.cplx else (lambda a: a)
                mu_u_c = np.zeros(n) if mu_r is None else take(mu_r)
                w_hat_c = None if mu_w is None else take(mu_w)
                e_u, e_w = clip_posterior_1d(mu_u_c, v_u, v_n, w_hat_c, v_w,
                                             self.z, self.scale)
                unit = 1j if part == "imag" else 1.0
                eu = eu + unit * e_u
                ew = ew + unit * e_w
            val_r[:, col] = eu
            val_e[:, col] = ew
        return [val_r, val_e]

    def surrogate(self, n_rep, rng):
        n = n_rep * self.port_rows[0]
        cov = self.prior_var * np.eye(self.m)
        x_r = sample_error_rows(cov, n, rng, self.cplx)
        noise = sample_error_rows(self.v_noise * np.eye(self.m), n, rng, self.cplx)
        x_eta = clip_components(x_r + noise, self.z) / self.scale
        node = ClipPairNode(n, self.m, self.v_noise, self.z, self.scale,
                            self.prior_var, self.cplx, self.name)
        return [x_r, x_eta], node


def clip_mmse_pair(msg_r, msg_eta, v_sr, clip_threshold, scale, prior_var=1.0):
    """Functional form of ClipPairNode; returns (value_r, value_eta)."""
    node = ClipPairNode(msg_r.n, msg_r.m, v_sr, clip_threshold, scale,
                        prior_var, np.iscomplexobj(msg_r.values))
    return tuple(node.prototype([msg_r, msg_eta]))


# ---------------------------------------------------------------------------
# Orthogonalization
# ---------------------------------------------------------------------------

def estimate_delta(proto, input_gs, n_mc, rng):
    """Monte-Carlo correction coefficients of a prototype estimator.

    Synthetic truth and Gaussian errors are drawn per the input parameters
    and the prototype is evaluated on them; for each port the regression
    coefficient of the output on that port's input error is returned.  The
    synthetic truth and the other ports' errors enter the regression as
    control variates: they are independent of the target error, so they do
    not move the estimand, but projecting them out removes most of the
    finite-sample crosstalk noise.
    """
    if n_mc < 1000:
        raise ValueError("delta estimation requires n_mc >= 1000")
    n_rep = max(1, math.ceil(n_mc / max(proto.port_rows)))
    truths, node_s = proto.surrogate(n_rep, rng)
    msgs, errors = [], []
    for truth, gs in zip(truths, input_gs):
        z = sample_error_rows(gs.sigma, truth.shape[0], rng, proto.cplx)
        vals = truth @ gs.theta + z
        msgs.append(EstimateMessage(vals.astype(node_s._dtype()), gs))
        errors.append(z)
    outs = node_s.prototype(msgs)

    m = proto.m
    deltas = []
    for port, (z, psi) in enumerate(zip(errors, outs)):
        if not np.any(np.abs(z) > 0):
            deltas.append(np.zeros((m, m), dtype=proto._dtype()))
            continue
        n_rows = z.shape[0]
        blocks, col, z_off = [], 0, None
        for q, (truth, zq) in enumerate(zip(truths, errors)):
            if truth.shape[0] != n_rows:
                continue   # covariates must share the port's row space
            blocks.append(truth)
            col += m
            if np.any(np.abs(zq) > 0):
                if q == port:
                    z_off = col
                blocks.append(zq)
                col += m
        design = np.concatenate(blocks, axis=1)
        coef, *_ = np.linalg.lstsq(design, psi, rcond=None)
        deltas.append(np.ascontiguousarray(coef[z_off:z_off + m]))
    return deltas


@dataclass
class GsoWrapper:
    """Prototype plus per-port corrections output = proto - input @ delta."""
    proto: EstimatorNode
    n_mc: int = 10_000
    mode: str = "auto"   # 'auto' | 'mc' | 'zero'

    def deltas(self, input_gs, rng):
        if self.mode == "zero":
            z = np.zeros((self.proto.m, self.proto.m), dtype=self.proto._dtype())
            return [z] * self.proto.nports
        if self.mode == "auto":
            exact = self.proto.delta_exact(input_gs)
            if exact is not None:
                return exact
        return estimate_delta(self.proto, input_gs, self.n_mc, rng)

    def apply(self, msgs, rng):
        """Returns (prototype outputs, corrected outputs, deltas).

        A corrected output that is a pure cancellation residue (norm below
        1e-8 of the quantities subtracted) is floating-point junk left over
        from annihilating a fully-redundant port; it is zeroed so downstream
        estimators see a clean uninformative message instead of structured
        rounding noise with arbitrary fitted statistics.
        """
        psi = self.proto.prototype(msgs)
        ds = self.deltas([m.gs for m in msgs], rng)
        outs = []
        for p, m, d in zip(psi, msgs, ds):
            corr = m.values @ d
            out = p - corr
            scale = np.linalg.norm(p) + np.linalg.norm(corr)
            if scale > 0 and np.linalg.norm(out) <= 1e-8 * scale:
                out = np.zeros_like(out)
            outs.append(out)
        return psi, outs, ds


def gso_apply(wrapper, inputs, rng):
    """Port-wise corrected outputs of a wrapped prototype."""
    _, outs, _ = wrapper.apply(inputs, rng)
    return outs
