"""Diagnostics, experiment runners, config parsing, CSV emission, and CLI.

The diagnostics compare three objects along a run: the averaged surrogate
gbar_n, the weighted empirical loss fbar_n, and the exact expected loss f
under the stream's stationary distribution.  The empirical loss is evaluated
by regrouping the weighted sum per emission state (the per-state cumulative
weights follow the same recursion as the loss itself), so its cost is the
number of states rather than the number of steps.  Expected quantities are
exact, not Monte Carlo, which keeps the rate envelopes noise-free.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .factorize import (
    CpdlState,
    OmfState,
    cpdl_loss,
    cpdl_step,
    factor_loss,
    factor_loss_lipschitz_bound,
    omf_step,
    out_product,
    subsampled_omf_step,
    _contract_except,
)
from .geometry import BoxSet, stationarity_measure
from .quadform import FactorQuad
from .schedule import WeightSchedule, validate_schedule
from .stream import MarkovSource, make_iid, mixing_rate, next_sample, stationary_distribution, tv_decay

__all__ = [
    "DiagnosticsRecord",
    "RunConfig",
    "RunResult",
    "eval_empirical",
    "eval_expected",
    "iteration_complexity_estimate",
    "emit_csv",
    "read_csv",
    "parse_config",
    "run_experiment",
    "run_sweep",
    "run_omf_diagnostics",
    "run_cpdl_diagnostics",
    "cli_main",
]


@dataclass(frozen=True)
class DiagnosticsRecord:
    """Per-iteration diagnostics.  Field order is the CSV column order."""

    n: int
    w_n: float
    cum_weight: float
    loss_new: float
    fbar: float
    f_exp: float
    gbar_val: float
    gap_emp: float
    gap_exp: float
    ggap_emp: float
    ggap_exp: float
    stat_surr: float
    stat_emp: float
    stat_exp: float
    step_norm: float
    eps_bar: float
    comp_emp: float
    comp_exp: float
    min_comp_emp: float
    min_comp_exp: float
    min_stat_surr: float
    min_stat_emp: float
    min_stat_exp: float


CSV_FIELDS = [f.name for f in dataclasses.fields(DiagnosticsRecord)]


@dataclass
class RunResult:
    """A diagnostics run plus its invariant audit tallies."""

    records: list
    prop_margins: list          # (n, lhs - rhs, scale) of the one-step inequality
    monotonicity_violations: int = 0
    step_bound_violations: int = 0
    c1_bound_violations: int = 0
    c1_stat_max: float = 0.0
    trajectory: list = field(default_factory=list)
    final: object = None


# ---------------------------------------------------------------------------
# per-sample losses by recipe


def sample_loss(recipe, x, theta):
    """(value, gradient) of the per-sample loss ell(x, theta) for an engine
    recipe, penalties included; factorization losses use the optimal-code
    envelope gradient."""
    theta = np.asarray(theta, dtype=float)
    if recipe.kind == "lipschitz":
        return float(recipe.loss(x, theta)), np.asarray(recipe.loss_grad(x, theta), float)
    if recipe.kind == "prox":
        v = float(recipe.loss(x, theta)) + recipe.lam * float(np.abs(theta).sum())
        g = np.asarray(recipe.loss_grad(x, theta), float) + recipe.lam * np.sign(theta)
        return v, g
    if recipe.kind == "dc":
        curv, lin, const = recipe.convex_part(x)
        lin = np.asarray(lin, float)
        if isinstance(curv, np.ndarray):
            qv = 0.5 * float(theta @ (curv @ theta))
            qg = curv @ theta
        else:
            qv = 0.5 * float(curv) * float(theta @ theta)
            qg = float(curv) * theta
        v = qv + float(lin @ theta) + const + float(recipe.concave_value(x, theta))
        g = qg + lin + np.asarray(recipe.concave_grad(x, theta), float)
        return v, g
    # factor
    q, d = recipe.shape
    W = theta.reshape(q, recipe.rank)
    v, g, _ = factor_loss(np.asarray(x, float).reshape(q, d), W, recipe.lam,
                          recipe.code_set, tol=recipe.solver_tol)
    return v, g.ravel()


def eval_empirical(theta, sample_log, schedule, n, recipe):
    """Closed-form weighted empirical loss and gradient at theta:
    sum_k w^n_k * ell(x_k, theta)."""
    if len(sample_log) < n:
        raise ValueError("sample log shorter than n")
    value = 0.0
    grad = None
    for k in range(1, n + 1):
        wk = schedule.cumulative_weight(k, n)
        v, g = sample_loss(recipe, sample_log[k - 1], theta)
        value += wk * v
        grad = wk * g if grad is None else grad + wk * g
    return value, grad


def eval_expected(theta, source: MarkovSource, recipe):
    """Exact expected loss and gradient under the stationary distribution."""
    pi = stationary_distribution(source)
    value = 0.0
    grad = None
    for y in range(source.S):
        v, g = sample_loss(recipe, source.emissions[y], theta)
        value += pi[y] * v
        grad = pi[y] * g if grad is None else grad + pi[y] * g
    return value, grad


def iteration_complexity_estimate(records, eps: float, target: str = "surr"):
    """Smallest recorded n whose squared stationarity measure is <= eps for
    the chosen target; 'not reached' when none qualifies."""
    key = {"surr": "stat_surr", "emp": "stat_emp", "exp": "stat_exp"}[target]
    for rec in records:
        if getattr(rec, key) ** 2 <= eps:
            return rec.n
    return "not reached"


# ---------------------------------------------------------------------------
# running minima helper


class _Minima:
    def __init__(self):
        self.vals = {}

    def update(self, **kwargs):
        out = {}
        for k, v in kwargs.items():
            cur = self.vals.get(k, math.inf)
            cur = min(cur, v)
            self.vals[k] = cur
            out[k] = cur
        return out


def _per_state_losses(emissions, loss_fn):
    return [loss_fn(e) for e in emissions]


# ---------------------------------------------------------------------------
# OMF runner (plain and row-subsampled)


def run_omf_diagnostics(
    source: MarkovSource,
    schedule: WeightSchedule,
    W0: np.ndarray,
    lam: float,
    dict_box: BoxSet,
    code_set: BoxSet,
    mode: str = "c2",
    c_prime: float = 1.0,
    rho0: float = 0.0,
    n_iters: int = 1000,
    diag_interval: int = 10,
    solver_tol: float = 1e-8,
    row_sampler=None,
    rng: np.random.Generator | None = None,
    keep_trajectory: bool = False,
) -> RunResult:
    """Drive online matrix factorization with full diagnostics and invariant
    audits.  row_sampler, when given, is a callable rng -> row index array and
    switches the dictionary update to the row-subsampled variant."""
    mode = mode.lower()
    if mode not in ("c1", "c2"):
        raise ValueError("mode must be c1 or c2")
    if mode == "c1" and rho0 <= 0:
        raise ValueError("mode c1 requires rho0 > 0")
    W0 = np.asarray(W0, dtype=float)
    q, r = W0.shape
    rng = rng or np.random.default_rng(0)
    st = OmfState.initial(W0, rho0)
    pi = stationary_distribution(source)
    S = source.S
    w_hat = np.zeros(S)
    cum_w = 0.0
    eps_bar = 0.0
    minima = _Minima()
    result = RunResult(records=[], prop_margins=[])
    if keep_trajectory:
        result.trajectory.append(st.W.copy())
    R_bound = factor_loss_lipschitz_bound(source.emissions, dict_box, code_set, r)
    pending = None

    def loss_at(X, W):
        return factor_loss(X, W, lam, code_set, tol=solver_tol)

    for i in range(1, n_iters + 1):
        x, y = next_sample(source)
        w_n = schedule.weight_at(i)
        radius = math.inf if mode == "c1" else c_prime * w_n
        W_prev = st.W
        if row_sampler is None:
            res = omf_step(x, W_prev, st.A, st.B, w_n, lam, dict_box, code_set,
                           C_prev=st.C, radius=radius, tol=solver_tol)
        else:
            rows = np.asarray(row_sampler(rng), dtype=int)
            if rows.size == 0:
                rows = np.asarray(row_sampler(rng), dtype=int)
            res = subsampled_omf_step(x, W_prev, st.A, st.B, w_n, lam, dict_box,
                                      code_set, rows, C_prev=st.C, radius=radius,
                                      tol=solver_tol)
        st.W, st.A, st.B, st.C = res.W, res.A, res.B, res.C
        st.eps_sum += res.eps
        st.n = i
        eps_bar = (1.0 - w_n) * eps_bar + w_n * res.eps
        w_hat *= 1.0 - w_n
        w_hat[y] += w_n
        cum_w += w_n
        if keep_trajectory:
            result.trajectory.append(st.W.copy())

        gbar = FactorQuad(A=st.A, B=st.B, C=st.C, anchor=W_prev, L=1.0, rho=0.0)
        g_prev = gbar.value(W_prev)
        g_new = gbar.value(st.W)
        scale = 1.0 + abs(g_prev)
        if g_new > g_prev + 1e-9 * scale:
            result.monotonicity_violations += 1
        step = float(np.linalg.norm(st.W - W_prev))
        if mode == "c2" and step > c_prime * w_n + 1e-9:
            result.step_bound_violations += 1
        if mode == "c1":
            rho_n = 2.0 * max(float(np.linalg.eigvalsh(st.A)[0]), 0.0)
            if 0.5 * rho_n * step * step > w_n * R_bound * step + 1e-7 * scale:
                result.c1_bound_violations += 1
            stat_now = stationarity_measure(gbar.grad(st.W).ravel(),
                                            st.W.ravel(), dict_box)
            result.c1_stat_max = max(result.c1_stat_max, stat_now)

        if pending is not None:
            lhs = g_new - pending["gbar_val"]
            l_new, _, _ = loss_at(x, W_prev)
            rhs = (w_n * (l_new - pending["fbar"])
                   + pending["w_prev"] ** 2 * st.eps_sum)
            result.prop_margins.append((i, lhs - rhs, 1.0 + abs(rhs)))
            pending = None

        if i % diag_interval == 0 or i == n_iters:
            per_state = _per_state_losses(source.emissions,
                                          lambda e: loss_at(e, st.W))
            fbar = sum(w_hat[s] * per_state[s][0] for s in range(S))
            fbar_grad = sum(w_hat[s] * per_state[s][1] for s in range(S))
            f_exp = sum(pi[s] * per_state[s][0] for s in range(S))
            f_grad = sum(pi[s] * per_state[s][1] for s in range(S))
            gbar_val = g_new
            gbar_grad = gbar.grad(st.W)
            l_obs, _, _ = loss_at(x, W_prev)
            rec = _build_record(
                n=i, w_n=w_n, cum_w=cum_w, loss_new=l_obs, fbar=fbar,
                f_exp=f_exp, gbar_val=gbar_val,
                gbar_grad=gbar_grad.ravel(), fbar_grad=fbar_grad.ravel(),
                f_grad=f_grad.ravel(), theta=st.W.ravel(), box=dict_box,
                step_norm=step, eps_bar=eps_bar, minima=minima,
            )
            result.records.append(rec)
            pending = {"gbar_val": gbar_val, "fbar": fbar, "w_prev": w_n}
    result.final = st
    return result


def _build_record(n, w_n, cum_w, loss_new, fbar, f_exp, gbar_val, gbar_grad,
                  fbar_grad, f_grad, theta, box, step_norm, eps_bar, minima,
                  stat_override=None) -> DiagnosticsRecord:
    gap_emp = abs(gbar_val - fbar)
    gap_exp = abs(gbar_val - f_exp)
    ggap_emp = float(np.linalg.norm(gbar_grad - fbar_grad))
    ggap_exp = float(np.linalg.norm(gbar_grad - f_grad))
    if stat_override is not None:
        stat_surr, stat_emp, stat_exp = stat_override
    else:
        stat_surr = stationarity_measure(gbar_grad, theta, box)
        stat_emp = stationarity_measure(fbar_grad, theta, box)
        stat_exp = stationarity_measure(f_grad, theta, box)
    comp_emp = gap_emp + ggap_emp ** 2
    comp_exp = gap_exp + ggap_exp ** 2
    mins = minima.update(min_comp_emp=comp_emp, min_comp_exp=comp_exp,
                         min_stat_surr=stat_surr, min_stat_emp=stat_emp,
                         min_stat_exp=stat_exp)
    return DiagnosticsRecord(
        n=n, w_n=w_n, cum_weight=cum_w, loss_new=loss_new, fbar=fbar,
        f_exp=f_exp, gbar_val=gbar_val, gap_emp=gap_emp, gap_exp=gap_exp,
        ggap_emp=ggap_emp, ggap_exp=ggap_exp, stat_surr=stat_surr,
        stat_emp=stat_emp, stat_exp=stat_exp, step_norm=step_norm,
        eps_bar=eps_bar, comp_emp=comp_emp, comp_exp=comp_exp, **mins,
    )


# ---------------------------------------------------------------------------
# CPDL runner


def run_cpdl_diagnostics(
    source: MarkovSource,
    schedule: WeightSchedule,
    U0: list,
    lam: float,
    factor_boxes: list,
    code_set: BoxSet,
    c_prime: float = 1.0,
    rho0: float = 0.0,
    n_iters: int = 1000,
    diag_interval: int = 10,
    solver_tol: float = 1e-8,
    keep_trajectory: bool = False,
) -> RunResult:
    """Online CP-dictionary learning with diagnostics and invariant audits.
    The per-factor trust region has radius c_prime * w_n each step."""
    st = CpdlState.initial(U0, rho0)
    m = len(st.U)
    r = st.U[0].shape[1]
    pi = stationary_distribution(source)
    S = source.S
    w_hat = np.zeros(S)
    cum_w = 0.0
    eps_bar = 0.0
    minima = _Minima()
    result = RunResult(records=[], prop_margins=[])
    pending = None
    if keep_trajectory:
        result.trajectory.append([Ui.copy() for Ui in st.U])

    def surrogate_value(U, A, B, C):
        D = out_product(U).reshape(-1, r)
        return float(np.sum((D @ A) * D)) - 2.0 * float(np.sum(out_product(U) * B)) + C

    def surrogate_grads(U, A, B):
        grams = [Ui.T @ Ui for Ui in U]
        out = []
        for i in range(m):
            gamma = A.copy()
            for k in range(m):
                if k != i:
                    gamma = gamma * grams[k]
            out.append(2.0 * (U[i] @ gamma - _contract_except(B, U, i)))
        return out

    def loss_at(X, U):
        return cpdl_loss(X, U, lam, code_set, tol=solver_tol)

    for i in range(1, n_iters + 1):
        x, y = next_sample(source)
        w_n = schedule.weight_at(i)
        U_prev = [Ui.copy() for Ui in st.U]
        res = cpdl_step(x, st.U, st.A, st.B, w_n, lam, factor_boxes, code_set,
                        C_prev=st.C, radius=c_prime * w_n, tol=solver_tol)
        st.U, st.A, st.B, st.C = res.U, res.A, res.B, res.C
        st.eps_sum += res.eps
        st.n = i
        eps_bar = (1.0 - w_n) * eps_bar + w_n * res.eps
        w_hat *= 1.0 - w_n
        w_hat[y] += w_n
        cum_w += w_n
        if keep_trajectory:
            result.trajectory.append([Ui.copy() for Ui in st.U])

        g_prev = surrogate_value(U_prev, st.A, st.B, st.C)
        g_new = surrogate_value(st.U, st.A, st.B, st.C)
        scale = 1.0 + abs(g_prev)
        if g_new > g_prev + 1e-9 * scale:
            result.monotonicity_violations += 1
        moves = [float(np.linalg.norm(st.U[k] - U_prev[k])) for k in range(m)]
        if max(moves) > c_prime * w_n + 1e-9:
            result.step_bound_violations += 1
        step = math.sqrt(sum(mv * mv for mv in moves))

        if pending is not None:
            lhs = g_new - pending["gbar_val"]
            l_new, _, _ = loss_at(x, U_prev)
            rhs = (w_n * (l_new - pending["fbar"])
                   + pending["w_prev"] ** 2 * st.eps_sum)
            result.prop_margins.append((i, lhs - rhs, 1.0 + abs(rhs)))
            pending = None

        if i % diag_interval == 0 or i == n_iters:
            per_state = _per_state_losses(source.emissions,
                                          lambda e: loss_at(e, st.U))
            fbar = sum(w_hat[s] * per_state[s][0] for s in range(S))
            f_exp = sum(pi[s] * per_state[s][0] for s in range(S))
            fbar_grads = [sum(w_hat[s] * per_state[s][1][k] for s in range(S))
                          for k in range(m)]
            f_grads = [sum(pi[s] * per_state[s][1][k] for s in range(S))
                       for k in range(m)]
            g_grads = surrogate_grads(st.U, st.A, st.B)
            stat_surr = _stacked_stationarity(g_grads, st.U, factor_boxes)
            stat_emp = _stacked_stationarity(fbar_grads, st.U, factor_boxes)
            stat_exp = _stacked_stationarity(f_grads, st.U, factor_boxes)
            l_obs, _, _ = loss_at(x, U_prev)
            rec = _build_record(
                n=i, w_n=w_n, cum_w=cum_w, loss_new=l_obs, fbar=fbar,
                f_exp=f_exp, gbar_val=g_new,
                gbar_grad=np.concatenate([g.ravel() for g in g_grads]),
                fbar_grad=np.concatenate([g.ravel() for g in fbar_grads]),
                f_grad=np.concatenate([g.ravel() for g in f_grads]),
                theta=None, box=None, step_norm=step, eps_bar=eps_bar,
                minima=minima, stat_override=(stat_surr, stat_emp, stat_exp),
            )
            result.records.append(rec)
            pending = {"gbar_val": g_new, "fbar": fbar, "w_prev": w_n}
    result.final = st
    return result


def _stacked_stationarity(grads: list, U: list, boxes: list) -> float:
    total = 0.0
    for g, Ui, box in zip(grads, U, boxes):
        from .geometry import tangent_cone_project

        proj = tangent_cone_project(-np.asarray(g, float).ravel(), Ui.ravel(), box)
        total += float(proj @ proj)
    return math.sqrt(total)


# ---------------------------------------------------------------------------
# CSV


def emit_csv(records, path):
    """Write records with the declared field order, 17 significant digits."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(CSV_FIELDS) + "\n")
        for rec in records:
            cells = []
            for name in CSV_FIELDS:
                v = getattr(rec, name)
                if name == "n":
                    cells.append(str(int(v)))
                else:
                    cells.append(format(float(v), ".17g"))
            fh.write(",".join(cells) + "\n")


def read_csv(path):
    """Read an emitted diagnostics CSV back into column arrays."""
    with open(path, "r", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(c) for c in row] for row in reader if row]
    data = np.asarray(rows, dtype=float) if rows else np.empty((0, len(header)))
    return {name: data[:, i] for i, name in enumerate(header)}


# ---------------------------------------------------------------------------
# config


_SCHEMA = {
    "schedule.kind": str,
    "schedule.beta": float,
    "schedule.delta": float,
    "schedule.alpha": float,
    "schedule.values": str,
    "constraint.lower": float,
    "constraint.upper": float,
    "constraint.nonneg": bool,
    "blocks.partition": str,
    "blocks.selection": str,
    "blocks.m": int,
    "solver.tol": float,
    "solver.max_iters": int,
    "stream.kind": str,
    "stream.transition": str,
    "stream.emissions": str,
    "stream.seed": int,
    "engine.mode": str,
    "engine.c_prime": float,
    "engine.n_iters": int,
    "engine.theta0": str,
    "engine.eps_cap": float,
    "engine.diag_interval": int,
    "engine.seed": int,
    "app.kind": str,
    "app.rank": int,
    "app.lambda": float,
    "app.minibatch": int,
    "app.row_sample": float,
    "app.tensor_shape": str,
    "output": str,
    "label": str,
}

_DEFAULTS = {
    "schedule.kind": "balanced",
    "schedule.beta": 0.5,
    "schedule.delta": 1.5,
    "schedule.alpha": 0.1,
    "constraint.lower": -1.0,
    "constraint.upper": 1.0,
    "constraint.nonneg": False,
    "blocks.partition": "full",
    "blocks.selection": "cyclic",
    "blocks.m": 0,
    "solver.tol": 1e-8,
    "solver.max_iters": 100_000,
    "stream.kind": "iid",
    "stream.seed": 0,
    "engine.mode": "c2",
    "engine.c_prime": 1.0,
    "engine.theta0": "random",
    "engine.eps_cap": math.inf,
    "engine.diag_interval": 10,
    "engine.seed": 0,
    "app.kind": "omf",
    "app.lambda": 0.0,
    "app.minibatch": 1,
    "app.row_sample": 0.0,
    "output": "run.csv",
    "label": "run",
}

_REQUIRED = ["engine.n_iters", "app.rank", "app.tensor_shape",
             "stream.transition", "stream.emissions"]


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Validated key=value configuration plus its source path."""

    values: dict
    path: str = ""

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)


def parse_config(path) -> RunConfig:
    """Parse a line-oriented key=value UTF-8 file with '#' comments.
    Unknown keys, malformed lines and missing required keys are errors."""
    values = dict(_DEFAULTS)
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, _, val = line.partition("=")
            key = key.strip()
            val = val.strip()
            if key not in _SCHEMA:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            typ = _SCHEMA[key]
            try:
                if typ is bool:
                    if val.lower() not in ("true", "false", "1", "0"):
                        raise ValueError
                    values[key] = val.lower() in ("true", "1")
                else:
                    values[key] = typ(val)
            except ValueError:
                raise ConfigError(
                    f"{path}:{lineno}: cannot parse {val!r} as {typ.__name__} for {key}"
                ) from None
    missing = [k for k in _REQUIRED if k not in values]
    if missing:
        raise ConfigError(f"{path}: missing required keys: {', '.join(missing)}")
    cfg = RunConfig(values=values, path=str(path))
    _build_schedule(cfg)  # validates schedule parameters early
    return cfg


def _build_schedule(cfg: RunConfig) -> WeightSchedule:
    kind = cfg["schedule.kind"]
    if kind == "balanced":
        return WeightSchedule.balanced()
    if kind == "polylog":
        return WeightSchedule.polylog(cfg["schedule.beta"], cfg["schedule.delta"])
    if kind == "constant":
        return WeightSchedule.constant(cfg["schedule.alpha"])
    if kind == "custom":
        vals = [float(v) for v in cfg["schedule.values"].split(",")]
        return WeightSchedule.custom(vals)
    raise ConfigError(f"unknown schedule kind {kind!r}")


def _parse_matrix(text_or_path: str) -> np.ndarray:
    # inline matrices use ';' between rows and whitespace between entries;
    # anything else is a CSV path
    if ";" in text_or_path or " " in text_or_path.strip():
        rows = [[float(c) for c in row.split()]
                for row in text_or_path.split(";") if row.strip()]
        return np.asarray(rows, dtype=float)
    return np.loadtxt(text_or_path, delimiter=",", ndmin=2)


def _build_source(cfg: RunConfig) -> MarkovSource:
    shape = tuple(int(s) for s in cfg["app.tensor_shape"].split(","))
    bank = np.loadtxt(cfg["stream.emissions"], delimiter=",", ndmin=2)
    emissions = [row.reshape(shape) for row in bank]
    trans = _parse_matrix(cfg["stream.transition"])
    if cfg["stream.kind"] == "iid":
        weights = trans.ravel()
        return make_iid(weights, emissions, seed=cfg["stream.seed"])
    if cfg["stream.kind"] != "markov":
        raise ConfigError(f"unknown stream kind {cfg['stream.kind']!r}")
    return MarkovSource(P=trans, emissions=emissions, seed=cfg["stream.seed"])


def run_experiment(cfg: RunConfig, seed: int | None = None,
                   out_path: str | None = None) -> RunResult:
    """Build every component from the config and execute the run, writing
    the diagnostics CSV."""
    schedule = _build_schedule(cfg)
    source = _build_source(cfg)
    seed = cfg["engine.seed"] if seed is None else seed
    rng = np.random.default_rng(seed)
    shape = tuple(int(s) for s in cfg["app.tensor_shape"].split(","))
    r = cfg["app.rank"]
    lo, up = cfg["constraint.lower"], cfg["constraint.upper"]
    if cfg["constraint.nonneg"]:
        lo = 0.0
    kind = cfg["app.kind"]
    tol = cfg["solver.tol"]
    common = dict(
        lam=cfg["app.lambda"], c_prime=cfg["engine.c_prime"],
        n_iters=cfg["engine.n_iters"], diag_interval=cfg["engine.diag_interval"],
        solver_tol=tol,
    )
    if kind in ("omf", "omf_sub"):
        q, d = shape
        dict_box = BoxSet.uniform(q * r, lo, up)
        code_set = BoxSet.uniform(r, lo, up)
        if cfg["engine.theta0"] == "random":
            W0 = rng.uniform(lo, up, size=(q, r))
        else:
            W0 = np.loadtxt(cfg["engine.theta0"], delimiter=",", ndmin=2)
        sampler = None
        if kind == "omf_sub":
            p_or_k = cfg["app.row_sample"]
            if p_or_k >= 1:
                k = int(p_or_k)
                sampler = lambda g: g.choice(q, size=k, replace=False)
            else:
                sampler = lambda g: np.flatnonzero(g.random(q) < p_or_k)
        result = run_omf_diagnostics(
            source, schedule, W0, dict_box=dict_box, code_set=code_set,
            mode=cfg["engine.mode"], rho0=(1.0 if cfg["engine.mode"] == "c1" else 0.0),
            row_sampler=sampler, rng=rng, **common)
    elif kind == "cpdl":
        dims, b = shape[:-1], shape[-1]
        factor_boxes = [BoxSet.uniform(I * r, lo, up) for I in dims]
        code_set = BoxSet.uniform(r, lo, up)
        U0 = [rng.uniform(lo, up, size=(I, r)) for I in dims]
        result = run_cpdl_diagnostics(
            source, schedule, U0, factor_boxes=factor_boxes, code_set=code_set,
            **common)
    else:
        raise ConfigError(f"unknown app kind {kind!r}")
    emit_csv(result.records, out_path or cfg["output"])
    return result


def run_sweep(cfg: RunConfig, seeds, out_dir=".") -> dict:
    """Execute one configuration across several seeds in parallel.

    Runs share nothing: each builds its own source and state from the config.
    The SBMM_THREADS environment variable caps the worker count (default: one
    worker per seed, up to the machine's CPU count).  Returns a dict mapping
    seed to its RunResult; each run's CSV lands in out_dir as
    <label>_seed<seed>.csv.
    """
    import concurrent.futures
    import os

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cap = os.environ.get("SBMM_THREADS", "")
    max_workers = int(cap) if cap else min(len(seeds), os.cpu_count() or 1)
    if max_workers < 1:
        raise ConfigError("SBMM_THREADS must be >= 1")
    label = cfg["label"]

    def one(seed):
        return seed, run_experiment(
            cfg, seed=seed, out_path=str(out_dir / f"{label}_seed{seed}.csv"))

    with concurrent.futures.ThreadPoolExecutor(max_workers=max_workers) as ex:
        return dict(ex.map(one, seeds))


# ---------------------------------------------------------------------------
# CLI


def _cmd_run(args) -> int:
    cfg = parse_config(args.config)
    run_experiment(cfg, seed=args.seed, out_path=args.out)
    return 0


def _cmd_validate(args) -> int:
    cfg = parse_config(args.config)
    schedule = _build_schedule(cfg)
    report = validate_schedule(schedule)
    source = _build_source(cfg)
    print(f"config: {cfg.path}")
    print(f"schedule: kind={cfg['schedule.kind']} a4_prime_valid={report.a4_prime_valid} "
          f"square_summable={report.square_summable} "
          f"optional_condition={report.optional_condition}")
    if not report.a4_prime_valid and cfg["schedule.kind"] != "custom":
        print("warning: schedule is outside the theory-valid families; "
              "run is allowed but rate guarantees do not apply")
    print(f"stream: states={source.S} mixing_rate={mixing_rate(source):.6f}")
    print("ok")
    return 0


def _cmd_mixing_report(args) -> int:
    cfg = parse_config(args.config)
    source = _build_source(cfg)
    pi = stationary_distribution(source)
    lam = mixing_rate(source)
    print("stationary distribution:")
    print("  " + " ".join(format(p, ".10g") for p in pi))
    print(f"mixing rate: {lam:.10g}")
    tv = tv_decay(source, horizon=min(50, 200))
    print(" m   worst-start TV    bound lambda^m")
    for m_, d in enumerate(tv[:20], start=1):
        print(f"{m_:3d}   {d: .6e}    {lam ** m_: .6e}")
    return 0


def _cmd_rate_check(args) -> int:
    cols = read_csv(args.csv)
    if args.column not in cols:
        print(f"error: column {args.column!r} not in {args.csv}", file=sys.stderr)
        return 1
    y = cols[args.column]
    x = cols["cum_weight"]
    mask = (y > 0) & (x > 0)
    if mask.sum() < 2:
        print("error: not enough positive rows for a fit", file=sys.stderr)
        return 1
    slope, _ = np.polyfit(np.log(x[mask]), np.log(y[mask]), 1)
    print(f"log-log slope of {args.column} vs cumulative weight: {slope:.4f}")
    return 0


def cli_main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sbmm",
        description="stochastic block majorization-minimization experiments",
    )
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("run", help="execute a run and write its diagnostics CSV")
    p.add_argument("config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("validate", help="check a config without running it")
    p.add_argument("config")
    p.set_defaults(fn=_cmd_validate)

    p = sub.add_parser("mixing-report", help="print stationary distribution and TV decay")
    p.add_argument("config")
    p.set_defaults(fn=_cmd_mixing_report)

    p = sub.add_parser("rate-check", help="fit the running-minimum decay slope")
    p.add_argument("csv")
    p.add_argument("--column", required=True)
    p.set_defaults(fn=_cmd_rate_check)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(cli_main())
