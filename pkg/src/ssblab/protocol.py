"""Preparation protocol and quench experiments.

``run_preparation`` follows the ramp sequence on the fully connected model:
polarised x-state at h = 0, linear ramp to ``h1``, free evolution for
``tau_r``, linear ramp down to ``h2``, then a readout of (C, K, Pi).
``run_quench`` starts from a superposition of the lowest doublet at ``h2`` and
evolves under the Hamiltonian at ``h3`` (optionally with a symmetry-breaking
field), with a GGE fit attached.  ``run_perturbation_sweep`` repeats the
quench for several field strengths.
"""
from __future__ import annotations

import gc
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from . import __version__
from .basis import DickeBasis, StateVector, enumerate_sector
from .dynamics import (CLUSTER_RTOL, EigenSystem, MagnetizationHistogram, MagnetizationSpectrum, RampSchedule,
                       TimeSeries, diagonalize, evolve, lowest_doublet, magnetization_distribution,
                       observable_series, offdiagonal_svd, prepare_superposition, ramp_evolve)
from .gge import (DEFAULT_DELTA, BracketError, ChargeTargets, doublet_block_beta, fit_beta, fit_perturbed,
                  invert_single_charge, solve_multipliers)
from .operators import (SIGN_ZERO_RTOL, HermitianOperator, ModelParameters, ParityOffDiagonal, build_fully_connected,
                        build_K, build_magnetization, build_parity, build_perturbed, build_tfim, build_W,
                        polarized_states, sign_star)

log = logging.getLogger(__name__)

SERIES_COLUMNS = ("t", "m", "W", "C", "K", "Pi", "E")
MODELS = ("chain", "fully-connected")


class ConfigError(ValueError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class ProtocolConfig:
    """Flat run configuration; every field is echoed in the manifest.

    ``h_c`` is a reference value, not computed.  When omitted it defaults to
    the mean-field critical field of the chosen model (``j`` for the chain
    with the unordered-pair convention, 2 for the fully connected model).
    """

    model: str = "chain"
    n: int = 19
    alpha: float = 1.1
    j: float = 2.0
    h_c: float | None = None
    h1: float | None = None
    h2: float = 0.5
    h3: float = 0.1
    tau_q: float = 40.96
    tau_r: float = 0.0
    n_tau_r: int = 24
    epsilon: float = 0.0
    epsilons: tuple = (1e-2, -1e-3, 1e-4)
    p: float = 0.5
    phi: float = math.pi / 3
    t_max: float = 300.0
    n_times: int = 601
    hist_samples: int = 3000
    long_t_min: float = 1e13
    long_t_max: float = 1e17
    n_long: int = 41
    delta: float = DEFAULT_DELTA
    targets: str = "analytic"
    fit_gge: bool = True
    cluster_rtol: float = CLUSTER_RTOL
    sign_zero_rtol: float = SIGN_ZERO_RTOL
    ramp_tol: float = 1e-8
    ramp_dt: float = 0.05
    time_unit: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "epsilons", tuple(float(e) for e in self.epsilons))
        self.validate()

    @property
    def h_c_reference(self) -> float:
        if self.h_c is not None:
            return self.h_c
        return 2.0 if self.model == "fully-connected" else self.j

    @property
    def h1_value(self) -> float:
        return self.h1 if self.h1 is not None else 2.0 * self.h_c_reference

    def validate(self):
        if self.model not in MODELS:
            raise ConfigError("model", f"must be one of {MODELS}, got {self.model!r}")
        if not isinstance(self.n, int) or self.n < 2:
            raise ConfigError("n", f"must be an integer >= 2, got {self.n!r}")
        if not self.alpha >= 0:
            raise ConfigError("alpha", f"must be >= 0, got {self.alpha}")
        if not 0 <= self.p <= 1:
            raise ConfigError("p", f"must lie in [0, 1], got {self.p}")
        if self.tau_r < 0:
            raise ConfigError("tau_r", f"must be >= 0, got {self.tau_r}")
        if not self.tau_q > 0:
            raise ConfigError("tau_q", f"must be > 0, got {self.tau_q}")
        if not 0 < self.delta < 1:
            raise ConfigError("delta", f"must lie in (0, 1), got {self.delta}")
        if self.targets not in ("analytic", "measured"):
            raise ConfigError("targets", f"must be 'analytic' or 'measured', got {self.targets!r}")
        for key in ("n_times", "hist_samples", "n_long", "n_tau_r"):
            if getattr(self, key) < 0:
                raise ConfigError(key, f"must be >= 0, got {getattr(self, key)}")
        if self.t_max < 0:
            raise ConfigError("t_max", f"must be >= 0, got {self.t_max}")
        if not 0 < self.long_t_min <= self.long_t_max:
            raise ConfigError("long_t_min", "need 0 < long_t_min <= long_t_max")
        if not self.time_unit > 0:
            raise ConfigError("time_unit", f"must be > 0, got {self.time_unit}")

    def check_ordering(self):
        """h3 <= h2 < h_c < h1, required by the full ramp protocol."""
        if not self.h2 < self.h_c_reference < self.h1_value:
            raise ConfigError("h1", f"need h2 < h_c < h1, got h2={self.h2}, h_c={self.h_c_reference}, "
                              f"h1={self.h1_value}")
        if not self.h3 <= self.h2:
            raise ConfigError("h3", f"need h3 <= h2, got h3={self.h3}, h2={self.h2}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["epsilons"] = list(self.epsilons)
        return d

    def replace(self, **kw) -> "ProtocolConfig":
        d = self.to_dict()
        d.update(kw)
        return ProtocolConfig(**d)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class ExperimentResult:
    kind: str
    config: dict
    series: TimeSeries | None = None
    histogram: MagnetizationHistogram | None = None
    gge: dict = field(default_factory=dict)
    scalars: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)
    children: dict = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "config": self.config, "gge": self.gge, "scalars": self.scalars,
             "tables": {k: {c: list(map(float, v)) for c, v in t.items()} for k, t in self.tables.items()},
             "children": {k: v.to_dict() for k, v in self.children.items()}, "manifest": self.manifest}
        if self.series is not None:
            d["series"] = {"t": self.series.times.tolist(),
                           **{k: np.asarray(v).tolist() for k, v in self.series.values.items()}}
        if self.histogram is not None:
            h = self.histogram
            d["histogram"] = {"m": h.m_values.tolist(), "mean_p": h.mean_probabilities.tolist(),
                              "std_p": h.std_probabilities.tolist()}
        return d

    @classmethod
    def from_dict(cls, d) -> "ExperimentResult":
        series = None
        if "series" in d:
            s = dict(d["series"])
            t = np.array(s.pop("t"))
            series = TimeSeries(t, {k: np.array(v) for k, v in s.items()})
        hist = None
        if "histogram" in d:
            h = d["histogram"]
            hist = MagnetizationHistogram(np.array(h["m"]), np.array(h["mean_p"]), np.array(h["std_p"]))
        return cls(d["kind"], d["config"], series, hist, d.get("gge", {}), d.get("scalars", {}),
                   {k: {c: np.array(v) for c, v in t.items()} for k, t in d.get("tables", {}).items()},
                   {k: cls.from_dict(v) for k, v in d.get("children", {}).items()}, d.get("manifest", {}))


# ---------------------------------------------------------------- caching


def config_digest(kind: str, config: ProtocolConfig, extra=None) -> str:
    payload = json.dumps({"kind": kind, "config": config.to_dict(), "extra": extra, "version": __version__},
                         sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:20]


def _cached(kind, config, cache_dir, compute, extra=None):
    if cache_dir is None:
        return compute()
    path = Path(cache_dir) / f"{kind}-{config_digest(kind, config, extra)}.json"
    if path.exists():
        log.info("cache hit %s", path)
        return ExperimentResult.from_dict(json.loads(path.read_text()))
    result = compute()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(result.to_dict()))
    tmp.replace(path)
    return result


# ---------------------------------------------------------------- model setup


@dataclass
class Model:
    basis: object
    hamiltonian: object  # callable (h, epsilon) -> HermitianOperator
    m_total: HermitianOperator
    c: HermitianOperator
    k: HermitianOperator
    pi: HermitianOperator
    w: HermitianOperator
    m_scaled: HermitianOperator
    svd: tuple | None

    def observables(self, h_op) -> dict:
        return {"m": self.m_scaled, "W": self.w, "C": self.c, "K": self.k, "Pi": self.pi, "E": h_op}


def build_model(config: ProtocolConfig, keep_svd: bool = True) -> Model:
    n = config.n
    if config.model == "fully-connected":
        basis = DickeBasis(n)

        def hamiltonian(h, eps=0.0):
            op = build_fully_connected(n, h)
            if eps:
                mat = op.matrix + 0.5 * eps * m_total.matrix
                return HermitianOperator(mat, op.basis_tag, f"{op.label}[eps={eps}]")
            return op
    else:
        basis = enumerate_sector(n)

        def hamiltonian(h, eps=0.0):
            return build_perturbed(basis, ModelParameters(n, config.alpha, config.j, h, eps))

    m_total = build_magnetization(basis)
    pi = build_parity(basis)
    svd = None
    if config.model == "chain":
        svd = offdiagonal_svd(m_total)
        even, odd, u, s, vh = svd
        q = u @ vh
        c = HermitianOperator(ParityOffDiagonal(q, even, odd, 1.0, basis.dimension), basis.tag, "sign*(M)",
                              parities=basis.parities)
        if not keep_svd:
            svd = None
    else:
        c = sign_star(m_total, config.sign_zero_rtol)
    k = build_K(c, pi)
    w = build_W(basis)
    m_scaled = HermitianOperator(m_total.matrix / n, basis.tag, "m", parities=basis.parities)
    return Model(basis, hamiltonian, m_total, c, k, pi, w, m_scaled, svd)


def charge_values(model: Model, psi) -> dict:
    return {"C": model.c.expectation(psi), "K": model.k.expectation(psi), "Pi": model.pi.expectation(psi)}


def analytic_charges(p: float, phi: float) -> dict:
    a = 2 * math.sqrt(p * (1 - p))
    return {"C": a * math.cos(phi), "K": a * math.sin(phi), "Pi": 2 * p - 1}


def _time_grid(config):
    if config.n_times == 0:
        return np.zeros(0)
    return np.linspace(0.0, config.t_max, config.n_times) * config.time_unit


def _long_grid(config):
    if config.n_long == 0:
        return np.zeros(0)
    return np.logspace(math.log10(config.long_t_min), math.log10(config.long_t_max), config.n_long)


def _manifest(kind, config, started):
    return {"kind": kind, "version": __version__, "config": config.to_dict(),
            "tolerances": {"cluster_rtol": config.cluster_rtol, "sign_zero_rtol": config.sign_zero_rtol,
                           "delta": config.delta, "ramp_tol": config.ramp_tol, "ramp_dt": config.ramp_dt},
            "series_columns": list(SERIES_COLUMNS),
            "started": started, "wall_seconds": round(time.time() - started, 3)}


# ---------------------------------------------------------------- preparation


def fit_sinusoid(tau, c_vals, k_vals, omega):
    """Least-squares fit of C + iK to A exp(i(s omega tau + phi0)), s = +-1.

    Returns a dict with amplitude, phase, sign, r2 and rms residual.
    """
    tau = np.asarray(tau, dtype=float)
    z = np.asarray(c_vals) + 1j * np.asarray(k_vals)
    best = None
    for s in (1, -1):
        basis_fn = np.exp(1j * s * omega * tau)
        a = np.vdot(basis_fn, z) / len(tau)
        resid = z - a * basis_fn
        ss_res = float(np.sum(np.abs(resid) ** 2))
        ss_tot = float(np.sum(np.abs(z - z.mean()) ** 2))
        r2 = 1 - ss_res / ss_tot if ss_tot > 0 else 0.0
        cand = {"amplitude": float(abs(a)), "phase": float(np.angle(a)), "sign": s, "r2": r2,
                "rms_residual": math.sqrt(ss_res / len(tau))}
        if best is None or ss_res < best["rms_residual"] ** 2 * len(tau):
            best = cand
    return best


def _ramp_hamiltonian(model):
    return lambda h: model.hamiltonian(h).toarray()


def run_preparation(config: ProtocolConfig, cache_dir=None) -> ExperimentResult:
    config.check_ordering()
    return _cached("preparation", config, cache_dir, lambda: _run_preparation(config))


def _run_preparation(config: ProtocolConfig) -> ExperimentResult:
    started = time.time()
    model = build_model(config)
    hfun = _ramp_hamiltonian(model)
    h1, h2 = config.h1_value, config.h2
    plus, _ = polarized_states(model.basis)
    psi = plus.astype(complex)

    s2 = ramp_evolve(hfun, RampSchedule(0.0, h1, config.tau_q), psi, tol=config.ramp_tol, dt0=config.ramp_dt)
    psi1 = StateVector.normalized(s2.state, model.basis.tag)
    h1_op = model.hamiltonian(h1)
    es1 = diagonalize(h1_op, config.cluster_rtol)
    gap = lowest_doublet(h1_op).gap
    eye = np.eye(model.basis.dimension, dtype=complex)
    s4 = ramp_evolve(hfun, RampSchedule(h1, h2, config.tau_q), eye, tol=config.ramp_tol, dt0=config.ramp_dt)
    u4 = s4.state

    def readout(tau_r):
        st = u4 @ evolve(es1, psi1, tau_r).amplitudes
        return {**charge_values(model, st), "m": model.m_scaled.expectation(st)}

    period = 2 * math.pi / gap
    n = max(config.n_tau_r, 1)
    taus = np.linspace(0.0, period, n, endpoint=False) if config.n_tau_r else np.array([config.tau_r])
    rows = [readout(t) for t in taus]
    table = {"tau_r": taus, **{k: np.array([r[k] for r in rows]) for k in ("C", "K", "Pi", "m")}}
    fit = fit_sinusoid(taus, table["C"], table["K"], gap) if len(taus) >= 3 else {}
    start, end = readout(0.0), readout(period)
    h2_op = model.hamiltonian(h2)
    doublet2 = lowest_doublet(h2_op, model.m_total)
    scalars = {"gap_h1": gap, "period": period, "h1": h1, "h2": h2,
               "s2_steps": s2.n_steps, "s4_steps": s4.n_steps, "s2_change": s2.achieved, "s4_change": s4.achieved,
               "periodicity_error": max(abs(start[k] - end[k]) for k in ("C", "K", "Pi")),
               "fit": fit, "gap_h2": doublet2.gap,
               "readout_tau_r": readout(config.tau_r)}
    res = ExperimentResult("preparation", config.to_dict(), tables={"tau_r": table}, scalars=scalars)
    res.manifest = _manifest("preparation", config, started)
    return res


def direct_preparation(config: ProtocolConfig, phi: float, p: float = 0.5):
    """Ideal doublet superposition at h2 with the given phase, and its charges."""
    model = build_model(config)
    doublet = lowest_doublet(model.hamiltonian(config.h2), model.m_total)
    psi = prepare_superposition(doublet, p, phi)
    return psi, charge_values(model, psi)


# ---------------------------------------------------------------- quench


def run_quench(config: ProtocolConfig, cache_dir=None) -> ExperimentResult:
    return _cached("quench", config, cache_dir, lambda: _run_quench(config))


def _initial_state(config, model):
    h2_op = model.hamiltonian(config.h2)
    doublet = lowest_doublet(h2_op, model.m_total)
    return doublet, prepare_superposition(doublet, config.p, config.phi)


def charge_grid(model, doublet, n_p: int = 5, n_phi: int = 5) -> dict:
    """(C, K, Pi) of doublet superpositions on a uniform (p, phi) grid."""
    rows = []
    for p in np.linspace(0.0, 1.0, n_p):
        for phi in np.linspace(0.0, 2 * math.pi, n_phi, endpoint=False):
            q = charge_values(model, prepare_superposition(doublet, p, phi))
            rows.append((p, phi, q["C"], q["K"], q["Pi"]))
    cols = np.array(rows).T
    return dict(zip(("p", "phi", "C", "K", "Pi"), cols))


def _series_and_long(config, model, es, psi0, h_op):
    obs = model.observables(h_op)
    series = observable_series(es, psi0, _time_grid(config), obs)
    long_obs = {"m": model.m_scaled, "W": model.w}
    long = observable_series(es, psi0, _long_grid(config), long_obs)
    table = {"t": long.times, **long.values}
    return series, table


def _targets(config, model, psi0, energy):
    if config.targets == "analytic":
        q = analytic_charges(config.p, config.phi)
    else:
        q = charge_values(model, psi0)
    return ChargeTargets(q["Pi"], q["C"], q["K"], energy)


def _predictions(model, rho, h_op):
    return {k: rho.expectation(op) for k, op in model.observables(h_op).items()}


def _run_quench(config: ProtocolConfig) -> ExperimentResult:
    started = time.time()
    model = build_model(config)
    doublet, psi0 = _initial_state(config, model)
    h3_op = model.hamiltonian(config.h3, config.epsilon)
    log.info("diagonalising H(h3), dim %d", model.basis.dimension)
    es = diagonalize(h3_op, config.cluster_rtol)
    series, long_table = _series_and_long(config, model, es, psi0, h3_op)

    mspec = MagnetizationSpectrum.from_operator(model.m_total, config.n, svd=model.svd)
    hist_times = np.linspace(0.0, config.t_max, config.hist_samples) * config.time_unit
    hist = magnetization_distribution(es, mspec, psi0, hist_times) if config.hist_samples else None
    energy = h3_op.expectation(psi0)
    grid_table = charge_grid(model, doublet)
    initial = {**charge_values(model, psi0), "m": model.m_scaled.expectation(psi0), "W": model.w.expectation(psi0)}
    scalars = {"energy": energy, "gap_h2": doublet.gap, "e_plus_h2": doublet.e_plus, "e_minus_h2": doublet.e_minus,
               "initial": initial, "analytic": analytic_charges(config.p, config.phi),
               "time_average": {k: float(np.mean(v)) for k, v in series.values.items()} if len(series.times) else {}}

    if es.parities is not None:
        vp, vm = es.values[es.parities == 1], es.values[es.parities == -1]
    else:
        vp = vm = None
    del es, mspec
    model.svd = None
    gc.collect()

    gge = {}
    if config.fit_gge:
        targets = _targets(config, model, psi0, energy)
        lam = solve_multipliers(targets, config.delta)
        guess = None
        if vp is not None:
            try:
                guess = doublet_block_beta(vp, vm, lam, energy)
            except BracketError:
                guess = None
        fit = fit_beta(h3_op, model.c, model.k, model.pi, lam, energy, config.delta, beta_guess=guess,
                       log=log.info)
        gge = {"beta": fit.beta, "lambda_pi": lam[0], "lambda_c": lam[1], "lambda_k": lam[2],
               "delta": config.delta, "beta_guess": guess, "evaluations": fit.evaluations,
               "targets": {"Pi": targets.pi_target, "C": targets.c_target, "K": targets.k_target,
                           "E": targets.energy_target},
               "predictions": _predictions(model, fit.density, h3_op)}
        gge["residuals"] = {k: gge["predictions"][k] - gge["targets"][k] for k in ("Pi", "C", "K", "E")}
        del fit
        gc.collect()

    res = ExperimentResult("quench", config.to_dict(), series, hist, gge, scalars,
                           {"long": long_table, "charge_grid": grid_table})
    res.manifest = _manifest("quench", config, started)
    return res


# ---------------------------------------------------------------- epsilon sweep


def run_perturbation_sweep(config: ProtocolConfig, epsilons=None, cache_dir=None) -> ExperimentResult:
    """Quench (h2, eps=0) -> (h3, eps) for every eps, each with a single-charge GGE fit."""
    started = time.time()
    eps_list = tuple(float(e) for e in (config.epsilons if epsilons is None else epsilons))
    config = config.replace(epsilons=list(eps_list))
    guess = {}
    children = {}
    for eps in eps_list:
        sub = config.replace(epsilon=eps, epsilons=[])
        children[_eps_key(eps)] = _cached("sweep-item", sub, cache_dir,
                                          lambda sub=sub: _run_sweep_item(sub, guess))
    res = ExperimentResult("sweep", config.to_dict(), children=children)
    res.scalars = {"epsilons": list(eps_list),
                   "lambda_c": {k: c.gge.get("lambda_c") for k, c in children.items()}}
    res.manifest = _manifest("sweep", config, started)
    return res


def _eps_key(eps: float) -> str:
    return f"eps={eps:.17g}"


def _symmetric_guess(config, model, guess_cache, lam, energy):
    """Initial beta from the doublet model of the symmetric Hamiltonian at h3."""
    if "values" not in guess_cache:
        h = model.hamiltonian(config.h3)
        if h.sectors is None:
            return None
        vals = []
        for _, rows in h.sectors:
            blk = h.matrix[rows][:, rows]
            blk = blk.toarray() if hasattr(blk, "toarray") else blk
            vals.append(sla.eigvalsh(blk, overwrite_a=True, check_finite=False))
        guess_cache["values"] = vals
    vp, vm = guess_cache["values"]
    try:
        return doublet_block_beta(vp, vm, lam, energy)
    except BracketError:
        return None


def _run_sweep_item(config: ProtocolConfig, guess_cache) -> ExperimentResult:
    started = time.time()
    model = build_model(config, keep_svd=False)
    doublet, psi0 = _initial_state(config, model)
    h_op = model.hamiltonian(config.h3, config.epsilon)
    log.info("diagonalising H_eps(h3, eps=%g)", config.epsilon)
    es = diagonalize(h_op, config.cluster_rtol)
    series, long_table = _series_and_long(config, model, es, psi0, h_op)
    del es
    gc.collect()
    energy = h_op.expectation(psi0)
    c_measured = float(np.mean(series.values["C"])) if len(series.times) else model.c.expectation(psi0)
    scalars = {"energy": energy, "c_measured": c_measured, "gap_h2": doublet.gap,
               "initial": {**charge_values(model, psi0), "m": model.m_scaled.expectation(psi0)},
               "time_average": {k: float(np.mean(v)) for k, v in series.values.items()} if len(series.times) else {}}
    gge = {}
    if config.fit_gge:
        lc = invert_single_charge(c_measured)
        guess = _symmetric_guess(config, model, guess_cache, (0.0, lc, 0.0), energy)
        beta, lc, fit = fit_perturbed(h_op, model.c, c_measured, energy, delta=config.delta, beta_guess=guess,
                                      log=log.info)
        gge = {"beta": beta, "lambda_c": lc, "lambda_k": 0.0, "lambda_pi": 0.0, "c_measured": c_measured,
               "beta_guess": guess, "evaluations": fit.evaluations,
               "predictions": _predictions(model, fit.density, h_op)}
        gge["roundtrip_error"] = abs(-math.tanh(lc) - c_measured)
        del fit
        gc.collect()
    res = ExperimentResult("sweep-item", config.to_dict(), series, None, gge, scalars, {"long": long_table})
    res.manifest = _manifest("sweep-item", config, started)
    return res
