"""Deterministic predictor of the per-iteration message parameters.

Instead of running the full system, each estimator's transfer map is
evaluated on Gaussian surrogates: synthetic truth rows are drawn from the
node's own prior/constraint, inputs are formed as truth @ theta plus
Gaussian errors with the tracked covariance, the wrapped estimator is
applied, and output parameters are refit.  Between the two domains the
parameters are routed unchanged (transforms do not alter them).
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .engine import ber as ber_of
from .engine import hard_decide, mse as mse_of
from .estimators import BpskPriorNode, GsoWrapper, psd_floor, sample_error_rows
from .gs_model import EstimateMessage, GsParams, gs_fit
from .linops import rng_from


@dataclass
class SeTrajectory:
    """Per-port, per-iteration parameter and metric sequences."""
    params: list = field(default_factory=list)   # dicts: t, port, domain, dir, gs
    metrics: list = field(default_factory=list)  # dicts: t, constraint, port, mse, ber
    t_final: int = 0

    def record_params(self, t, port, domain, direction, gs):
        self.params.append({"t": t, "port": port, "domain": domain,
                            "direction": direction, "gs": gs})

    def port_series(self, port, key="mse"):
        return [m[key] for m in self.metrics if m["port"] == port]

    def param_map(self):
        """(t, port, domain, direction) -> GsParams, for tracked-mode runs."""
        return {(p["t"], p["port"], p["domain"], p["direction"]): p["gs"]
                for p in self.params}

    def param_rows(self):
        """CSV-ready rows with flattened parameter entries."""
        rows = []
        for p in self.params:
            gs = p["gs"]
            rows.append({
                "t": p["t"], "port": p["port"], "domain": p["domain"],
                "direction": p["direction"],
                "theta": ";".join(repr(v) for v in np.ravel(gs.theta)),
                "sigma": ";".join(repr(v) for v in np.ravel(gs.sigma)),
            })
        return rows


def _surrogate_inputs(node, truths, gs_in, rng):
    msgs = []
    for truth, gs in zip(truths, gs_in):
        sigma, clipped = psd_floor(gs.sigma, 0.0)
        if clipped:
            gs = GsParams(gs.theta, sigma, True)
        z = sample_error_rows(sigma, truth.shape[0], rng, node.cplx)
        vals = (truth @ gs.theta + z).astype(np.complex128 if node.cplx else np.float64)
        msgs.append(EstimateMessage(vals, gs))
    return msgs


def se_transfer(node, input_gs, n_mc, rng, gso=True, delta_mode="auto"):
    """One estimator transfer: input parameters -> output parameters.

    Returns (list of output GsParams, list of per-port metric dicts).
    """
    if n_mc < 1000:
        raise ValueError("transfer evaluation requires n_mc >= 1000")
    n_rep = max(1, math.ceil(n_mc / max(node.port_rows)))
    truths, node_s = node.surrogate(n_rep, rng)
    msgs = _surrogate_inputs(node_s, truths, input_gs, rng)
    wrapper = GsoWrapper(node_s, n_mc=n_mc, mode=delta_mode if gso else "zero")
    psi, outs, _ = wrapper.apply(msgs, rng)
    out_gs, metrics = [], []
    for truth, psi_k, out_k in zip(truths, psi, outs):
        fit, _ = gs_fit(truth, out_k)
        sigma, clipped = psd_floor(fit.sigma, 0.0)
        out_gs.append(GsParams(fit.theta, sigma, fit.degenerate or clipped))
        metrics.append({
            "mse": float(np.mean(mse_of(psi_k, truth))),
            "mse_cols": mse_of(psi_k, truth),
            "ber": ber_of(hard_decide(psi_k), truth) if node.decidable else float("nan"),
        })
    return out_gs, metrics


def run_se(graph, t_max, n_mc=100_000, seed=0, gso=True):
    """Iterate the parameter recursion over the whole constraint graph.

    The recursion mirrors the engine's schedule: all Xi-side transfers, all
    X-side transfers (both reading the previous iteration's input
    parameters), then re-grouping of output parameters into the consuming
    side's inputs, unchanged.
    """
    errs = graph.validate()
    if errs:
        raise ValueError("invalid graph: " + "; ".join(errs))
    traj = SeTrajectory()
    m_by_port = {name: p.m for name, p in graph.ports.items()}
    xi_in = {name: GsParams.zero(m, graph.cplx) for name, m in m_by_port.items()}
    x_in = {name: GsParams.zero(m, graph.cplx) for name, m in m_by_port.items()}

    for t in range(1, t_max + 1):
        xi_out, x_out = {}, {}
        for ci, c in enumerate(graph.constraints):
            state = xi_in if c.side == "gamma" else x_in
            rng = rng_from(seed, "se", t, ci)
            out_gs, mets = se_transfer(c.node, [state[p] for p in c.ports],
                                       n_mc, rng, gso=gso)
            store = xi_out if c.side == "gamma" else x_out
            domain = "xi" if c.side == "gamma" else "x"
            for pname, gs, met in zip(c.ports, out_gs, mets):
                store[pname] = gs
                traj.record_params(t, pname, domain, "out", gs)
                traj.metrics.append({"t": t, "constraint": c.name, "port": pname,
                                     "domain": domain, **met})
        # re-group: output parameters become the other domain's inputs as-is
        for name in graph.ports:
            x_in[name] = xi_out[name]
            xi_in[name] = x_out[name]
            traj.record_params(t, name, "x", "in", x_in[name])
            traj.record_params(t, name, "xi", "in", xi_in[name])
        traj.t_final = t
    return traj


def predict_ber(gs, source, n_mc=100_000, seed=0, cplx=False):
    """Hard-decision error rate under the tracked Gaussian message model.

    Returns (ber, standard error) from n_mc surrogate rows.
    """
    rng = rng_from(seed, "predict-ber")
    m = gs.m
    node = BpskPriorNode(n_mc, m, source, cplx)
    truth = source.sample(n_mc, m, rng).astype(np.complex128 if cplx else np.float64)
    msgs = _surrogate_inputs(node, [truth], [gs], rng)
    psi = node.prototype(msgs)[0]
    p = ber_of(hard_decide(psi), truth)
    stderr = math.sqrt(max(p * (1 - p), 1e-300) / (n_mc * m))
    return p, stderr
