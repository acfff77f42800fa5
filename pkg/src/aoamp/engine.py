"""Iterative estimation engine over a declared transform/constraint graph.

A system couples K latent variable pairs (X_k, Xi_k = V_k X_k) through
orthogonal operators V_k; each index k is claimed by exactly one constraint
on the Xi side and one on the X side.  One iteration evaluates every Xi-side
estimator, every X-side estimator (both reading the previous iteration's
inputs, as the recursion is written), then moves the outputs through the
transforms.  All estimators can be wrapped with the decorrelating correction;
with the correction disabled the engine reproduces the plain iterative
process exactly.
"""

from dataclasses import dataclass, field

import numpy as np

from .estimators import GsoWrapper
from .gs_model import ErrorLedger, EstimateMessage, GsParams, gs_fit
from .linops import rng_from


@dataclass
class Port:
    """One latent variable pair and its transform."""
    name: str
    op: object
    n: int
    m: int
    truth_x: np.ndarray | None = None
    truth_xi: np.ndarray | None = None

    def bind_truth(self, x):
        self.truth_x = x
        self.truth_xi = self.op.apply(x)


@dataclass
class Constraint:
    """An estimator attached to a set of ports on one side of the transforms."""
    name: str
    side: str          # 'gamma' (Xi domain) or 'phi' (X domain)
    ports: list
    node: object
    track: bool = True  # include in per-iteration metrics


class SystemGraph:
    """Declared ports plus constraints, with structural validation."""

    def __init__(self, ports, constraints, cplx):
        self.ports = {p.name: p for p in ports}
        self.constraints = list(constraints)
        self.cplx = bool(cplx)

    def validate(self):
        """Return a list of violation strings (empty when well-formed)."""
        errs = []
        seen = {"gamma": {}, "phi": {}}
        for c in self.constraints:
            if c.side not in ("gamma", "phi"):
                errs.append(f"{c.name}: unknown side {c.side!r}")
                continue
            if len(c.ports) != c.node.nports:
                errs.append(f"{c.name}: {len(c.ports)} ports but node has {c.node.nports}")
            for i, pname in enumerate(c.ports):
                if pname not in self.ports:
                    errs.append(f"{c.name}: unknown port {pname!r}")
                    continue
                if pname in seen[c.side]:
                    errs.append(f"port {pname!r} appears in two {c.side}-side constraints")
                seen[c.side][pname] = c.name
                p = self.ports[pname]
                if i < c.node.nports and c.node.port_rows[i] != p.n:
                    errs.append(f"{c.name}: port {pname!r} has {p.n} rows, "
                                f"node expects {c.node.port_rows[i]}")
                if c.node.m != p.m:
                    errs.append(f"{c.name}: column count mismatch at port {pname!r}")
            if c.node.cplx != self.cplx:
                errs.append(f"{c.name}: scalar mode mismatch")
        for pname, p in self.ports.items():
            if p.op.n != p.n:
                errs.append(f"port {pname!r}: operator dimension {p.op.n} != {p.n}")
            for side in ("gamma", "phi"):
                if pname not in seen[side]:
                    errs.append(f"port {pname!r} missing a {side}-side constraint")
        return errs

    def side(self, which):
        return [c for c in self.constraints if c.side == which]


@dataclass
class RunConfig:
    """Execution knobs for one trial."""
    t_max: int = 10
    gso: bool = True
    audit: bool = False
    seed: int = 0
    n_mc_delta: int = 10_000
    delta_mode: str = "auto"     # 'auto' | 'mc' | 'zero' (zero forces no correction)
    divergence_factor: float = 1e3
    keep_messages: bool = False

    def __post_init__(self):
        if self.t_max < 1:
            raise ValueError("iteration count must be >= 1")


@dataclass
class Trajectory:
    """Per-iteration metrics, audits and final state of one trial."""
    metrics: list = field(default_factory=list)
    audits: list = field(default_factory=list)
    diverged: bool = False
    t_final: int = 0
    estimates: dict = field(default_factory=dict)   # port -> last posterior values
    messages: list = field(default_factory=list)    # optional snapshots
    ledger: object = None
    final_x_in: dict = field(default_factory=dict)
    final_xi_in: dict = field(default_factory=dict)

    def metric_rows(self, trial=0):
        """CSV-ready rows: trial, t, port, mse, ber, flags."""
        rows = []
        for m in self.metrics:
            rows.append({"trial": trial, "t": m["t"], "port": m["port"],
                         "mse": m["mse"], "ber": m["ber"],
                         "flags": "diverged" if self.diverged else ""})
        return rows

    def port_series(self, port, key="mse"):
        return [m[key] for m in self.metrics if m["port"] == port]


def hard_decide(values):
    """Sign decisions (real part in complex mode)."""
    return np.where(np.real(values) >= 0, 1.0, -1.0)


def mse(est, truth):
    """Per-column mean squared error."""
    if est.shape != truth.shape:
        raise ValueError("shape mismatch")
    return np.mean(np.abs(est - truth) ** 2, axis=0)


def ber(decided, truth):
    """Fraction of sign disagreements."""
    if decided.shape != truth.shape:
        raise ValueError("shape mismatch")
    return float(np.mean(np.real(decided) * np.real(truth) < 0))


def run(graph, cfg, tracked_params=None):
    """Execute the iterative process; see module docstring for the schedule.

    tracked_params, when given, maps (t, port, domain, 'out') to GsParams and
    replaces the per-trial empirical fits on outgoing messages — the mode a
    deployed detector would use, with parameters supplied by the predictor
    instead of ground truth.
    """
    errs = graph.validate()
    if errs:
        raise ValueError("invalid graph: " + "; ".join(errs))
    cplx = graph.cplx
    traj = Trajectory()
    ledger = ErrorLedger(max_t=cfg.t_max) if cfg.audit else None

    xi_in, x_in = {}, {}
    for name, p in graph.ports.items():
        zero = GsParams.zero(p.m, cplx)
        dt = np.complex128 if cplx else np.float64
        xi_in[name] = EstimateMessage(np.zeros((p.n, p.m), dt), zero, "xi", name, "in", 0)
        x_in[name] = EstimateMessage(np.zeros((p.n, p.m), dt), zero, "x", name, "in", 0)
        if ledger:
            ledger.set_truth(name, "xi", p.truth_xi)
            ledger.set_truth(name, "x", p.truth_x)
            ledger.record(name, "xi", "in", 0, np.zeros((p.n, p.m), dt))
            ledger.record(name, "x", "in", 0, np.zeros((p.n, p.m), dt))

    prior_power = {name: float(np.mean(np.abs(p.truth_x) ** 2))
                   for name, p in graph.ports.items()}
    delta_mode = "zero" if not cfg.gso else cfg.delta_mode

    for t in range(1, cfg.t_max + 1):
        xi_out, x_out = {}, {}
        blown = False
        for ci, c in enumerate(graph.constraints):
            domain = "xi" if c.side == "gamma" else "x"
            state = xi_in if c.side == "gamma" else x_in
            msgs = [state[p] for p in c.ports]
            wrapper = GsoWrapper(c.node, n_mc=cfg.n_mc_delta, mode=delta_mode)
            rng = rng_from(cfg.seed, "delta", t, ci)
            psi, outs, _ = wrapper.apply(msgs, rng)
            store = xi_out if c.side == "gamma" else x_out
            for pname, psi_k, out_k in zip(c.ports, psi, outs):
                p = graph.ports[pname]
                truth = p.truth_xi if domain == "xi" else p.truth_x
                if tracked_params is not None:
                    fit = tracked_params[(t, pname, domain, "out")]
                    z = out_k - truth @ fit.theta
                else:
                    fit, z = gs_fit(truth, out_k)
                store[pname] = EstimateMessage(out_k, fit, domain, pname, "out", t)
                if ledger:
                    ledger.record(pname, domain, "out", t, z)
                if c.track:
                    row = {"t": t, "constraint": c.name, "port": pname,
                           "domain": domain,
                           "mse_cols": mse(psi_k, truth),
                           "mse": float(np.mean(mse(psi_k, truth))),
                           "ber": ber(hard_decide(psi_k), truth)
                                  if c.node.decidable else float("nan")}
                    traj.metrics.append(row)
                    if c.node.decidable:
                        traj.estimates[pname] = psi_k
                if not np.all(np.isfinite(out_k)):
                    blown = True

        if not blown:
            for name, p in graph.ports.items():
                vx = p.op.apply(x_out[name].values)
                xi_in[name] = EstimateMessage(vx, x_out[name].gs, "xi", name, "in", t)
                vxi = p.op.apply_adjoint(xi_out[name].values)
                x_in[name] = EstimateMessage(vxi, xi_out[name].gs, "x", name, "in", t)
                if ledger:
                    ledger.record(name, "xi", "in", t,
                                  vx - p.truth_xi @ x_out[name].gs.theta)
                    ledger.record(name, "x", "in", t,
                                  vxi - p.truth_x @ xi_out[name].gs.theta)
                power = float(np.mean(np.abs(vx) ** 2))
                if not np.isfinite(power) or \
                        power > cfg.divergence_factor * max(prior_power[name], 1e-30):
                    blown = True

        if ledger:
            traj.audits.extend(ledger.audit(t))
        if cfg.keep_messages:
            traj.messages.append({"t": t, "xi_in": dict(xi_in), "x_in": dict(x_in)})
        traj.t_final = t
        if blown:
            traj.diverged = True
            break

    traj.ledger = ledger
    traj.final_x_in = x_in
    traj.final_xi_in = xi_in
    return traj
