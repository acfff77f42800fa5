"""Experiment configuration, sweep execution, and CSV emission.

Configs are TOML with nested sections; unknown keys are rejected with their
full path so typos fail loudly.  A sweep runs trials per point, aggregates
per-iteration metrics over trials, optionally pairs them with the
deterministic predictor, and writes one CSV per point (atomically, so an
interrupted sweep leaves only complete point files) plus a combined file.
"""

import csv
import logging
import math
import os
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:      # py3.10
    import tomli as tomllib

from . import engine
from .linops import SourceSpec, rng_from
from .relay_scenario import (RelayConfig, build_relay_graph, build_smv_st,
                             run_method)
from .state_evolution import run_se

log = logging.getLogger("aoamp")

SCHEMA_VERSION = 1
CSV_HEADER = ["method", "sweep_value", "t", "metric", "value", "stderr",
              "trials", "flags"]

RELAY_METHODS = ("aoamp", "gip-no-gso", "method1", "method2", "method3",
                 "per-stream", "se-predict")
SIMPLE_METHODS = ("aoamp", "gip-no-gso", "se-predict")
SWEEP_AXES = ("snr_rd", "snr_sr", "cr_db", "alpha")

BASELINE_N_S = 8096   # reference antenna count the scale factor divides


class ConfigError(ValueError):
    pass


def _nearest_pow2(x):
    lo = 2 ** int(math.floor(math.log2(x)))
    hi = lo * 2
    return lo if x - lo <= hi - x else hi


@dataclass
class ExperimentSpec:
    scenario: str = "relay"
    trials: int = 10
    iterations: int = 15
    methods: tuple = ("aoamp", "se-predict")
    sweep_axis: str = "snr_rd"
    sweep_values: tuple = ()
    seed: int = 1
    scale: float = 8.0
    se_n_mc: int = 100_000
    delta_n_mc: int = 10_000
    audit: bool = False
    relay: dict = field(default_factory=dict)
    smv: dict = field(default_factory=dict)
    custom: dict = field(default_factory=dict)
    raw_text: str = ""

    # ------------------------------------------------------------------
    def relay_dims(self):
        if "n_s" in self.relay:
            n_s = int(self.relay["n_s"])
        else:
            n_s = _nearest_pow2(BASELINE_N_S / self.scale)
        ratio_rs = float(self.relay.get("ratio_rs", 0.8))
        ratio_dr = float(self.relay.get("ratio_dr", 0.8))
        n_r = int(self.relay.get("n_r", round(ratio_rs * n_s)))
        n_d = int(self.relay.get("n_d", round(ratio_dr * n_r)))
        return n_s, n_r, n_d

    def relay_config(self, sweep_value):
        n_s, n_r, n_d = self.relay_dims()
        kw = dict(
            n_s=n_s, n_r=n_r, n_d=n_d,
            m=int(self.relay.get("m", 1)),
            snr_sr_db=float(self.relay.get("snr_sr_db", 11.0)),
            snr_rd_db=float(self.relay.get("snr_rd_db", 16.0)),
            kappa_sr=float(self.relay.get("kappa_sr", 5.0)),
            kappa_rd=float(self.relay.get("kappa_rd", 5.0)),
            cr_db=float(self.relay.get("cr_db", 0.0)),
            alpha=self.relay.get("alpha"),
            cplx=bool(self.relay.get("cplx", True)),
            fast=bool(self.relay.get("fast", True)),
            pair_mode=self.relay.get("pair_mode", "prior"),
            seed=self.seed,
        )
        key = {"snr_rd": "snr_rd_db", "snr_sr": "snr_sr_db",
               "cr_db": "cr_db", "alpha": "alpha"}[self.sweep_axis]
        kw[key] = sweep_value
        return RelayConfig(**kw)


_SCHEMA = {
    "experiment": {"scenario", "trials", "iterations", "methods", "sweep_axis",
                   "sweep_values", "seed", "scale", "se_n_mc", "delta_n_mc",
                   "audit"},
    "relay": {"n_s", "n_r", "n_d", "m", "snr_sr_db", "snr_rd_db", "kappa_sr",
              "kappa_rd", "cr_db", "alpha", "ratio_rs", "ratio_dr", "cplx",
              "fast", "pair_mode"},
    "smv": {"n", "m", "snr_db", "kappa", "cplx", "fast"},
    "custom": {"builder", "source_port"},
}


def parse_config(text):
    """Parse and strictly validate a TOML experiment description."""
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from None

    for section, table in data.items():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        if not isinstance(table, dict):
            raise ConfigError(f"[{section}] must be a table")
        for key in table:
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key}")

    exp = data.get("experiment", {})
    spec = ExperimentSpec(
        scenario=exp.get("scenario", "relay"),
        trials=int(exp.get("trials", 10)),
        iterations=int(exp.get("iterations", 15)),
        methods=tuple(exp.get("methods", ["aoamp", "se-predict"])),
        sweep_axis=exp.get("sweep_axis", "snr_rd"),
        sweep_values=tuple(float(v) for v in exp.get("sweep_values", ())),
        seed=int(exp.get("seed", 1)),
        scale=float(exp.get("scale", 8.0)),
        se_n_mc=int(exp.get("se_n_mc", 100_000)),
        delta_n_mc=int(exp.get("delta_n_mc", 10_000)),
        audit=bool(exp.get("audit", False)),
        relay=data.get("relay", {}),
        smv=data.get("smv", {}),
        custom=data.get("custom", {}),
        raw_text=text,
    )
    _validate(spec)
    return spec


def _validate(spec):
    def fail(key, msg):
        raise ConfigError(f"{key}: {msg}")

    if spec.scenario not in ("relay", "smv-st", "custom-graph"):
        fail("experiment.scenario", f"unknown scenario {spec.scenario!r}")
    if spec.trials < 1:
        fail("experiment.trials", "must be >= 1")
    if spec.iterations < 1:
        fail("experiment.iterations", "must be >= 1")
    if not spec.sweep_values:
        fail("experiment.sweep_values", "sweep must be nonempty")
    if spec.sweep_axis not in SWEEP_AXES:
        fail("experiment.sweep_axis", f"must be one of {SWEEP_AXES}")
    allowed = RELAY_METHODS if spec.scenario == "relay" else SIMPLE_METHODS
    for m in spec.methods:
        if m not in allowed:
            fail("experiment.methods",
                 f"{m!r} not available for scenario {spec.scenario!r}")
    if not spec.methods:
        fail("experiment.methods", "need at least one method")
    m_cols = int(spec.relay.get("m", 1))
    if spec.relay.get("alpha") is not None and m_cols != 2:
        fail("relay.alpha", "stream correlation requires relay.m = 2")
    if spec.sweep_axis == "alpha" and m_cols != 2:
        fail("experiment.sweep_axis", "alpha sweep requires relay.m = 2")
    if "per-stream" in spec.methods and m_cols != 2:
        fail("experiment.methods", "per-stream baseline requires relay.m = 2")
    if spec.scenario == "custom-graph" and "builder" not in spec.custom:
        fail("custom.builder", "custom-graph needs builder = 'module:callable'")
    if spec.scenario != "relay" and spec.sweep_axis != "snr_rd":
        fail("experiment.sweep_axis",
             f"scenario {spec.scenario!r} sweeps snr_rd only")


# ---------------------------------------------------------------------------
# Trial execution
# ---------------------------------------------------------------------------

def _trial_seed(spec, point_idx, trial):
    return int(rng_from(spec.seed, "trial", point_idx, trial).integers(2 ** 62))


def _load_builder(path):
    mod_name, _, fn_name = path.partition(":")
    if not fn_name:
        raise ConfigError("custom.builder must look like 'module:callable'")
    import importlib
    return getattr(importlib.import_module(mod_name), fn_name)


def _build_for_trial(spec, value, point_idx, trial, method="aoamp"):
    """Returns (trajectory-producing callable, source port name)."""
    seed = _trial_seed(spec, point_idx, trial)
    rc = engine.RunConfig(t_max=spec.iterations, gso=method != "gip-no-gso",
                          audit=spec.audit, seed=seed,
                          n_mc_delta=spec.delta_n_mc)
    if spec.scenario == "relay":
        cfg = spec.relay_config(value)
        belief = 0.5 if method == "per-stream" else "data"
        model = build_relay_graph(cfg, trial_seed=seed, belief_alpha=belief)
        return run_method(model, method if method != "per-stream" else "aoamp", rc), "s"
    if spec.scenario == "smv-st":
        n = int(spec.smv.get("n", 1024))
        m = int(spec.smv.get("m", 1))
        from .relay_scenario import gen_singular_values
        lam = gen_singular_values(n, n, float(spec.smv.get("kappa", 1.0)))
        v = 10 ** (-float(value) / 10)
        graph, _, _ = build_smv_st(n, m, lam, v, SourceSpec("bpsk"), seed,
                                   cplx=bool(spec.smv.get("cplx", False)),
                                   fast=bool(spec.smv.get("fast", False)))
        return engine.run(graph, rc), "s"
    builder = _load_builder(spec.custom["builder"])
    graph = builder(dict(spec.custom), seed)
    return engine.run(graph, rc), spec.custom.get("source_port", "s")


def _se_graph(spec, value):
    if spec.scenario == "relay":
        cfg = spec.relay_config(value)
        return build_relay_graph(cfg, trial_seed=int(
            rng_from(spec.seed, "se-graph").integers(2 ** 62))).graph, "s"
    if spec.scenario == "smv-st":
        n = int(spec.smv.get("n", 1024))
        from .relay_scenario import gen_singular_values
        lam = gen_singular_values(n, n, float(spec.smv.get("kappa", 1.0)))
        v = 10 ** (-float(value) / 10)
        graph, _, _ = build_smv_st(n, int(spec.smv.get("m", 1)), lam, v,
                                   SourceSpec("bpsk"),
                                   int(rng_from(spec.seed, "se-graph").integers(2 ** 62)),
                                   cplx=bool(spec.smv.get("cplx", False)),
                                   fast=bool(spec.smv.get("fast", False)))
        return graph, "s"
    builder = _load_builder(spec.custom["builder"])
    graph = builder(dict(spec.custom),
                    int(rng_from(spec.seed, "se-graph").integers(2 ** 62)))
    return graph, spec.custom.get("source_port", "s")


def _run_point_trial(raw_text, seed, point_idx, value, trial):
    """Worker entry: all simulation methods for one trial at one point."""
    spec = parse_config(raw_text)
    spec.seed = seed
    out = {}
    for method in spec.methods:
        if method == "se-predict":
            continue
        traj, port = _build_for_trial(spec, value, point_idx, trial, method)
        series = [(m["t"], m["mse"], m["ber"]) for m in traj.metrics
                  if m["port"] == port and not math.isnan(m["ber"])]
        out[method] = {"series": series, "diverged": traj.diverged,
                       "audits": traj.audits if spec.audit else []}
    return trial, out


def _aggregate_point(spec, value, trial_results):
    rows = []
    for method in spec.methods:
        if method == "se-predict":
            continue
        diverged = sum(r[method]["diverged"] for r in trial_results)
        flags = f"diverged:{diverged}" if diverged else ""
        by_t = {}
        for r in trial_results:
            for t, mse, ber in r[method]["series"]:
                by_t.setdefault(t, []).append((mse, ber))
        for t in sorted(by_t):
            vals = np.array(by_t[t])
            n = vals.shape[0]
            for j, metric in enumerate(("mse", "ber")):
                col = vals[:, j]
                rows.append({
                    "method": method, "sweep_value": value, "t": t,
                    "metric": metric, "value": float(col.mean()),
                    "stderr": float(col.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0,
                    "trials": n, "flags": flags,
                })
    return rows


def _se_point_rows(spec, value, point_idx):
    graph, port = _se_graph(spec, value)
    se = run_se(graph, spec.iterations, spec.se_n_mc,
                seed=int(rng_from(spec.seed, "se", point_idx).integers(2 ** 62)))
    rows = []
    for m in se.metrics:
        if m["port"] != port or math.isnan(m["ber"]):
            continue
        for metric, val in (("se_mse", m["mse"]), ("se_ber", m["ber"])):
            rows.append({"method": "se-predict", "sweep_value": value,
                         "t": m["t"], "metric": metric, "value": float(val),
                         "stderr": 0.0, "trials": 0, "flags": ""})
    return rows


# ---------------------------------------------------------------------------
# CSV plumbing
# ---------------------------------------------------------------------------

def _write_rows(path, rows, comment_lines=()):
    """Atomic CSV write: temp file in the target directory, then rename."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(f"# aoamp-results schema={SCHEMA_VERSION}\n")
            for line in comment_lines:
                fh.write(f"# {line}\n")
            w = csv.DictWriter(fh, fieldnames=CSV_HEADER)
            w.writeheader()
            for row in rows:
                out = dict(row)
                for k in ("value", "stderr", "sweep_value"):
                    out[k] = repr(float(out[k]))
                w.writerow(out)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def read_rows(path):
    """Read a results CSV back (comment lines ignored)."""
    with open(path, newline="") as fh:
        body = [ln for ln in fh if not ln.startswith("#")]
    rows = []
    for row in csv.DictReader(body):
        row["sweep_value"] = float(row["sweep_value"])
        row["t"] = int(row["t"])
        row["value"] = float(row["value"])
        row["stderr"] = float(row["stderr"])
        row["trials"] = int(row["trials"])
        rows.append(row)
    return rows


def _point_filename(spec, value):
    tag = "inf" if math.isinf(value) else f"{value:g}"
    return f"point_{spec.sweep_axis}={tag}.csv"


def _write_audits(spec, value, trial_results, points_dir):
    """Per-trial orthogonality/Gaussianity audit rows for one sweep point."""
    tag = "inf" if math.isinf(value) else f"{value:g}"
    path = os.path.join(points_dir, f"audits_{spec.sweep_axis}={tag}.csv")
    os.makedirs(points_dir, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=points_dir, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["trial", "t", "metric", "value"])
            for trial, res in enumerate(trial_results):
                for method, data in res.items():
                    for a in data.get("audits", []):
                        w.writerow([trial, a["t"],
                                    f"{method}:{a['port']}:{a['domain']}:{a['metric']}",
                                    repr(float(a["value"]))])
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def run_experiment(spec, outdir, workers=1, render=True):
    """Execute the sweep; returns the combined rows.

    Point files are written as each sweep point completes, so an interrupted
    run resumes by skipping the finished points.  Output is deterministic
    for a fixed seed regardless of the worker count.
    """
    os.makedirs(outdir, exist_ok=True)
    points_dir = os.path.join(outdir, "points")
    all_rows = []
    t0 = time.time()
    for point_idx, value in enumerate(spec.sweep_values):
        path = os.path.join(points_dir, _point_filename(spec, value))
        if os.path.exists(path):
            log.info("point %s=%s already complete, skipping",
                     spec.sweep_axis, value)
            all_rows.extend(read_rows(path))
            continue
        log.info("point %s=%s: %d trials x %d methods",
                 spec.sweep_axis, value, spec.trials, len(spec.methods))
        args = [(spec.raw_text, spec.seed, point_idx, value, t)
                for t in range(spec.trials)]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(_run_point_trial, *zip(*args)))
        else:
            results = [_run_point_trial(*a) for a in args]
        results = [r for _, r in sorted(results, key=lambda x: x[0])]
        rows = _aggregate_point(spec, value, results)
        if "se-predict" in spec.methods:
            rows.extend(_se_point_rows(spec, value, point_idx))
        if spec.audit:
            _write_audits(spec, value, results, points_dir)
        _write_rows(path, rows)
        all_rows.extend(rows)
        log.info("point %s=%s done (%.1fs elapsed)",
                 spec.sweep_axis, value, time.time() - t0)
    _write_rows(os.path.join(outdir, "results.csv"), all_rows,
                comment_lines=[f"generated {time.strftime('%Y-%m-%dT%H:%M:%S')}"])
    if render:
        from .plotting import render_report
        paths = render_report(all_rows, spec.sweep_axis, outdir)
        for p in paths:
            log.info("figure written: %s", p)
    return all_rows


def setup_logging(level="INFO"):
    logging.basicConfig(stream=sys.stderr, level=getattr(logging, level.upper()),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
