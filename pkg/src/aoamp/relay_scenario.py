"""Two-hop MIMO relay with signal clipping, compiled to a constraint graph.

Source (n_s antennas) -> channel H_sr -> relay clips and renormalizes ->
channel H_rd -> destination (n_d antennas).  Channels are SVD-factored with
geometric singular-value ladders and (pseudo-)random unitary factors, so the
whole system becomes four transforms plus five constraints: the source
prior, two diagonal linear couplings, the clipping constraint, and the
destination observation.

Also provides the three classical baselines (ignore clipping + whitening;
additive-distortion model; linear-plus-uncorrelated-residual model) and the
detect-streams-individually comparator.
"""

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import erf, ndtr

from . import engine
from .engine import Constraint, Port, SystemGraph
from .estimators import (BpskPriorNode, ClipPairNode, LinearObsNode,
                         LinearPairNode, clip_components, sample_error_rows)
from .linops import DenseOperator, SourceSpec, permuted_dft, rng_from, sample_haar


# ---------------------------------------------------------------------------
# Channel spectra and clipping statistics
# ---------------------------------------------------------------------------

def gen_singular_values(n, total_power, kappa):
    """Geometric singular-value ladder: lam_i / lam_{i+1} = kappa^(1/n),
    normalized so sum(lam^2) = total_power."""
    if kappa < 1:
        raise ValueError("condition number must be >= 1")
    r = kappa ** (1.0 / n)
    steps = r ** (-2.0 * np.arange(n))
    lam1 = math.sqrt(total_power / steps.sum())
    return lam1 * np.sqrt(steps)


@dataclass(frozen=True)
class ClipSpec:
    """Per-component saturation threshold and output normalization."""
    threshold: float
    scale: float
    cr_db: float

    def __post_init__(self):
        if self.threshold <= 0 or self.scale <= 0:
            raise ValueError("clip threshold and scale must be positive")


def clip(y, spec):
    """Componentwise saturation at +- spec.threshold (before scaling)."""
    return clip_components(y, spec.threshold)


def eta(y, spec):
    """Normalized clipping: clip(y) / scale."""
    return clip(y, spec) / spec.scale


def clip_second_moment(z, sigma):
    """E{clip(u; z)^2} for u ~ N(0, sigma^2)."""
    if math.isinf(z):
        return sigma ** 2
    zt = z / sigma
    phi = math.exp(-0.5 * zt * zt) / math.sqrt(2 * math.pi)
    inner = sigma ** 2 * ((2 * ndtr(zt) - 1) - 2 * zt * phi)
    return inner + z * z * 2 * (1 - ndtr(zt))


def bussgang_coeff(z, sigma):
    """E{u clip(u; z)} / E{u^2} for u ~ N(0, sigma^2)."""
    if math.isinf(z):
        return 1.0
    return float(erf(z / (sigma * math.sqrt(2.0))))


def clip_distortion_var(z, sigma):
    """E{(clip(u; z) - u)^2} for u ~ N(0, sigma^2)."""
    return sigma ** 2 + clip_second_moment(z, sigma) - \
        2 * sigma ** 2 * bussgang_coeff(z, sigma)


def clip_spec_from_cr(cr_db, power_y, cplx):
    """Threshold and normalization for a clipping ratio (dB) against the
    total signal power E|y|^2; components carry half the power each in
    complex mode."""
    if power_y <= 0:
        raise ValueError("signal power must be positive")
    z = math.inf if math.isinf(cr_db) else math.sqrt(power_y * 10 ** (cr_db / 10))
    sigma_c = math.sqrt(power_y / 2) if cplx else math.sqrt(power_y)
    m2 = clip_second_moment(z, sigma_c)
    c = math.sqrt(2 * m2) if cplx else math.sqrt(m2)
    return ClipSpec(threshold=z, scale=c, cr_db=cr_db)


# ---------------------------------------------------------------------------
# Configuration and model assembly
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RelayConfig:
    n_s: int = 1024
    n_r: int = 819
    n_d: int = 655
    m: int = 1
    snr_sr_db: float = 11.0
    snr_rd_db: float = 16.0
    kappa_sr: float = 5.0
    kappa_rd: float = 5.0
    cr_db: float = 0.0
    alpha: float | None = None
    seed: int = 0
    cplx: bool = True
    fast: bool = True            # permuted-DFT factors; explicit Haar otherwise
    pair_mode: str = "prior"     # coupling-node style: prior | extrinsic | flat

    def __post_init__(self):
        for n in (self.n_s, self.n_r, self.n_d):
            if n < 1:
                raise ValueError("antenna counts must be >= 1")
        if min(self.kappa_sr, self.kappa_rd) < 1:
            raise ValueError("condition numbers must be >= 1")
        if not (math.isfinite(self.snr_sr_db) and math.isfinite(self.snr_rd_db)):
            raise ValueError("SNR values must be finite")
        if self.alpha is not None and self.m != 2:
            raise ValueError("stream correlation alpha requires m = 2")
        if self.fast and not self.cplx:
            raise ValueError("fast transforms are complex; use fast=False in real mode")
        if self.pair_mode not in ("extrinsic", "prior", "flat"):
            raise ValueError(f"unknown pair_mode {self.pair_mode!r}")

    @property
    def v_sr(self):
        return 10 ** (-self.snr_sr_db / 10)

    @property
    def v_rd(self):
        return 10 ** (-self.snr_rd_db / 10)

    @property
    def source(self):
        if self.alpha is None:
            return SourceSpec("bpsk")
        return SourceSpec("correlated-bpsk", alpha=self.alpha)


def _draw_op(n, seed, cfg):
    return permuted_dft(n, seed) if cfg.fast else sample_haar(n, seed, cplx=cfg.cplx)


def _noise(n, m, var, rng, cplx):
    if cplx:
        return math.sqrt(var / 2) * (rng.standard_normal((n, m))
                                     + 1j * rng.standard_normal((n, m)))
    return math.sqrt(var) * rng.standard_normal((n, m))


def eta_cross_cov(c_y, spec, cplx, n_mc=400_000, seed=321):
    """Row covariance of the normalized clipped signal.

    Diagonal entries equal 1 exactly by the normalization; off-diagonals are
    evaluated by seeded Monte Carlo under the design-time Gaussian model.
    """
    m = c_y.shape[0]
    out = np.eye(m)
    if m == 1:
        return out
    rng = rng_from(seed, "eta-cov")
    y = sample_error_rows(np.asarray(c_y, dtype=np.float64), n_mc, rng, cplx)
    w = eta(y, spec)
    emp = (w.conj().T @ w).real / n_mc
    for i in range(m):
        for j in range(m):
            if i != j:
                out[i, j] = emp[i, j]
    return out


@dataclass
class RelayModel:
    """One realized relay system: graph, ground truth, and channel pieces."""
    cfg: RelayConfig
    graph: SystemGraph
    x_s: np.ndarray
    n_sr: np.ndarray
    n_rd: np.ndarray
    y_r: np.ndarray
    y_d: np.ndarray
    lam_sr: np.ndarray
    lam_rd: np.ndarray
    ops: dict
    clip_spec: ClipSpec
    power_y: float
    cov_s: np.ndarray
    cov_r: np.ndarray
    cov_eta: np.ndarray
    cov_d: np.ndarray
    belief_alpha: float | None = None

    def regenerate_observation(self):
        """Replay the exact forward model from the stored randomness."""
        cfg = self.cfg
        xi_s = self.ops["s"].apply(self.x_s)
        x_r = self.ops["r"].apply_adjoint(self.lam_sr[:, None] * xi_s[:cfg.n_r])
        y_r = x_r + self.n_sr
        x_eta = eta(y_r, self.clip_spec)
        xi_eta = self.ops["eta"].apply(x_eta)
        x_d = self.ops["d"].apply_adjoint(self.lam_rd[:, None] * xi_eta[:cfg.n_d])
        return x_d + self.n_rd


def build_relay_graph(cfg, trial_seed=None, belief_alpha="data"):
    """Sample channels, data and noise; wire the five-constraint graph.

    belief_alpha: 'data' uses cfg.alpha in the source prior; a float forces
    a different belief (the per-stream baseline passes 0.5).
    """
    seed = cfg.seed if trial_seed is None else trial_seed
    op_seeds = rng_from(seed, "relay-ops").integers(0, 2 ** 62, size=4)
    rng = rng_from(seed, "relay-data")
    dt = np.complex128 if cfg.cplx else np.float64

    lam_sr = gen_singular_values(cfg.n_r, cfg.n_s, cfg.kappa_sr)
    lam_rd = gen_singular_values(cfg.n_d, cfg.n_r, cfg.kappa_rd)
    ops = {"s": _draw_op(cfg.n_s, int(op_seeds[0]), cfg),
           "r": _draw_op(cfg.n_r, int(op_seeds[1]), cfg),
           "eta": _draw_op(cfg.n_r, int(op_seeds[2]), cfg),
           "d": _draw_op(cfg.n_d, int(op_seeds[3]), cfg)}

    source = cfg.source
    cov_s = source.row_cov(cfg.m)
    cov_r = (cfg.n_s / cfg.n_r) * cov_s
    power_y = cov_r[0, 0] + cfg.v_sr
    spec = clip_spec_from_cr(cfg.cr_db, power_y, cfg.cplx)
    cov_y = cov_r + cfg.v_sr * np.eye(cfg.m)
    cov_eta = eta_cross_cov(cov_y, spec, cfg.cplx)
    cov_d = (cfg.n_r / cfg.n_d) * cov_eta

    x_s = source.sample(cfg.n_s, cfg.m, rng).astype(dt)
    xi_s = ops["s"].apply(x_s)
    x_r = ops["r"].apply_adjoint(lam_sr[:, None] * xi_s[:cfg.n_r])
    n_sr = _noise(cfg.n_r, cfg.m, cfg.v_sr, rng, cfg.cplx)
    y_r = x_r + n_sr
    x_eta = eta(y_r, spec)
    xi_eta = ops["eta"].apply(x_eta)
    x_d = ops["d"].apply_adjoint(lam_rd[:, None] * xi_eta[:cfg.n_d])
    n_rd = _noise(cfg.n_d, cfg.m, cfg.v_rd, rng, cfg.cplx)
    y_d = x_d + n_rd

    if belief_alpha == "data":
        belief = source
    else:
        belief = SourceSpec("correlated-bpsk", alpha=belief_alpha) if cfg.m == 2 \
            else SourceSpec("bpsk")

    ports = [Port("s", ops["s"], cfg.n_s, cfg.m),
             Port("r", ops["r"], cfg.n_r, cfg.m),
             Port("eta", ops["eta"], cfg.n_r, cfg.m),
             Port("d", ops["d"], cfg.n_d, cfg.m)]
    for p, truth in zip(ports, (x_s, x_r, x_eta, x_d)):
        p.bind_truth(truth)

    style = {"flat": {}, "prior": {"prior_cov": None},
             "extrinsic": {"prior_cov": None, "extrinsic": True}}[cfg.pair_mode]

    def pair_node(n_a, n_b, lam, cov, name):
        kw = dict(style)
        if "prior_cov" in kw:
            kw["prior_cov"] = cov
        return LinearPairNode(n_a, n_b, cfg.m, lam, 0.0, cov_a=cov,
                              cplx=cfg.cplx, name=name, **kw)

    constraints = [
        Constraint("phi_s", "phi", ["s"],
                   BpskPriorNode(cfg.n_s, cfg.m, belief, cfg.cplx, "phi_s")),
        Constraint("gamma_sr", "gamma", ["s", "r"],
                   pair_node(cfg.n_s, cfg.n_r, lam_sr, cov_s, "gamma_sr")),
        Constraint("phi_r_eta", "phi", ["r", "eta"],
                   ClipPairNode(cfg.n_r, cfg.m, cfg.v_sr, spec.threshold,
                                spec.scale, prior_var=cov_r[0, 0],
                                cplx=cfg.cplx, name="phi_r_eta")),
        Constraint("gamma_eta_d", "gamma", ["eta", "d"],
                   pair_node(cfg.n_r, cfg.n_d, lam_rd, cov_eta, "gamma_eta_d")),
        Constraint("phi_d", "phi", ["d"],
                   LinearObsNode(cfg.n_d, cfg.m, 1.0, cfg.v_rd, y_d,
                                 cov_x=cov_d, cplx=cfg.cplx, name="phi_d")),
    ]
    graph = SystemGraph(ports, constraints, cfg.cplx)
    return RelayModel(cfg, graph, x_s, n_sr, n_rd, y_r, y_d, lam_sr, lam_rd,
                      ops, spec, power_y, cov_s, cov_r, cov_eta, cov_d,
                      belief_alpha=None if belief_alpha == "data" else belief_alpha)


# ---------------------------------------------------------------------------
# Baseline methods
# ---------------------------------------------------------------------------

def _linearized_clip_constraint(model, lam_scalar, noise_var):
    """Replace the clipping constraint by b = lam a + IID Gaussian slack."""
    cfg = model.cfg
    node = LinearPairNode(cfg.n_r, cfg.n_r, cfg.m, lam_scalar, noise_var,
                          cov_a=model.cov_r, cplx=cfg.cplx, name="phi_r_eta_lin")
    return Constraint("phi_r_eta", "phi", ["r", "eta"], node)


def _variant_graph(model, clip_constraint):
    cons = [clip_constraint if c.name == "phi_r_eta" else c
            for c in model.graph.constraints]
    return SystemGraph(list(model.graph.ports.values()), cons, model.cfg.cplx)


def method2_graph(model):
    """Clipping modeled as the identity plus IID distortion of matched power."""
    cfg, spec = model.cfg, model.clip_spec
    sigma_c = math.sqrt(model.power_y / 2) if cfg.cplx else math.sqrt(model.power_y)
    v_dist = clip_distortion_var(spec.threshold, sigma_c) * (2 if cfg.cplx else 1)
    lam = 1.0 / spec.scale
    noise = (cfg.v_sr + v_dist) / spec.scale ** 2
    return _variant_graph(model, _linearized_clip_constraint(model, lam, noise))


def method3_graph(model):
    """Clipping modeled by its Gaussian linear coefficient plus uncorrelated
    residual (both exact under the design-time Gaussian model)."""
    cfg, spec = model.cfg, model.clip_spec
    sigma_c = math.sqrt(model.power_y / 2) if cfg.cplx else math.sqrt(model.power_y)
    theta_b = bussgang_coeff(spec.threshold, sigma_c)
    v_resid = max(spec.scale ** 2 - theta_b ** 2 * model.power_y, 0.0)
    lam = theta_b / spec.scale
    noise = (theta_b ** 2 * cfg.v_sr + v_resid) / spec.scale ** 2
    return _variant_graph(model, _linearized_clip_constraint(model, lam, noise))


def method1_graph(model):
    """Ignore clipping: whiten the combined two-hop system and detect with
    the single-transform algorithm.

    The known output normalization is kept (with it the model is exact when
    clipping is inactive); only the saturation itself is ignored.
    """
    cfg = model.cfg
    c = model.clip_spec.scale
    u_sr = model.ops["r"].as_matrix().conj().T
    v_sr = model.ops["s"].as_matrix()
    u_rd = model.ops["d"].as_matrix().conj().T
    v_rd = model.ops["eta"].as_matrix()
    h_sr = u_sr @ (model.lam_sr[:, None] * v_sr[:cfg.n_r])
    h_rd = u_rd @ (model.lam_rd[:, None] * v_rd[:cfg.n_d])

    sigma_n = (cfg.v_sr / c ** 2) * (h_rd @ h_rd.conj().T) \
        + cfg.v_rd * np.eye(cfg.n_d)
    w_ev, w_vec = np.linalg.eigh(sigma_n)
    whiten = (w_vec * (1.0 / np.sqrt(np.maximum(w_ev, 1e-30)))) @ w_vec.conj().T
    a = whiten @ h_rd @ h_sr / c
    y_t = whiten @ model.y_d

    u_c, svals, vh_c = np.linalg.svd(a, full_matrices=True)
    r_obs = u_c.conj().T @ y_t
    op = DenseOperator(vh_c)

    port = Port("s", op, cfg.n_s, cfg.m)
    port.bind_truth(model.x_s)
    source = model.cfg.source if model.belief_alpha is None else \
        SourceSpec("correlated-bpsk", alpha=model.belief_alpha)
    constraints = [
        Constraint("phi_s", "phi", ["s"],
                   BpskPriorNode(cfg.n_s, cfg.m, source, cfg.cplx, "phi_s")),
        Constraint("gamma_comb", "gamma", ["s"],
                   LinearObsNode(cfg.n_s, cfg.m, svals, 1.0, r_obs,
                                 cov_x=model.cov_s, cplx=cfg.cplx,
                                 name="gamma_comb")),
    ]
    return SystemGraph([port], constraints, cfg.cplx)


METHOD_GRAPHS = {
    "aoamp": lambda model: model.graph,
    "gip-no-gso": lambda model: model.graph,
    "method1": method1_graph,
    "method2": method2_graph,
    "method3": method3_graph,
    "per-stream": lambda model: model.graph,   # belief handled at build time
}


def run_method(model, method, run_cfg):
    """Run one detection method on a realized relay system."""
    if method not in METHOD_GRAPHS:
        raise ValueError(f"unknown method {method!r}")
    graph = METHOD_GRAPHS[method](model)
    cfg = run_cfg
    if method == "gip-no-gso":
        cfg = replace(run_cfg, gso=False)
    return engine.run(graph, cfg)


# ---------------------------------------------------------------------------
# Single-transform scenario
# ---------------------------------------------------------------------------

def build_smv_st(n, m, lam, noise_var, source, seed, cplx=False, fast=False):
    """Classic one-transform system: R = diag(lam) V X + noise, X ~ source."""
    op_seed = int(rng_from(seed, "smv-ops").integers(0, 2 ** 62))
    op = permuted_dft(n, op_seed) if fast else sample_haar(n, op_seed, cplx=cplx)
    rng = rng_from(seed, "smv-data")
    dt = np.complex128 if cplx else np.float64
    lam = np.atleast_1d(np.asarray(lam, dtype=np.float64))
    if lam.size == 1:
        lam = np.full(n, lam[0])
    x = source.sample(n, m, rng).astype(dt)
    xi = op.apply(x)
    r = lam[:, None] * xi + _noise(lam.size, m, noise_var, rng, cplx) \
        if noise_var > 0 else lam[:, None] * xi
    port = Port("s", op, n, m)
    port.bind_truth(x)
    constraints = [
        Constraint("gamma_obs", "gamma", ["s"],
                   LinearObsNode(n, m, lam, noise_var, r,
                                 cov_x=source.row_cov(m), cplx=cplx,
                                 name="gamma_obs")),
        Constraint("phi_prior", "phi", ["s"],
                   BpskPriorNode(n, m, source, cplx, "phi_prior")),
    ]
    return SystemGraph([port], constraints, cplx), x, r
