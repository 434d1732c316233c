"""Truth-based moment evaluation for simulated data.

For the pairwise-interaction design the conditional law of the log failure
time given (Z, D) is normal with a closed-form mean, so the conditional
moment function has an analytic one-dimensional profile in u. The
censoring integral is evaluated by quadrature on a shared grid (denser
approaching the censoring horizon), independent of the production
estimator path, which makes this module usable as a test oracle.

Gateaux perturbations move nuisance blocks jointly: a direction in the
nuisance space generally has components in every coordinate, and the
first-order terms cancel by construction, leaving the quadratic trend the
orthogonality tests measure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .data import Dataset
from .errors import DomainError
from .interactions import MomentSpec, eval_centered_matrix
from .simulate import TruthRecord

_ORACLE_EPS = 0.002  # clip floor for oracle censoring survival


def _normal_hazard(x: np.ndarray) -> np.ndarray:
    """phi(x) / Phi_bar(x), stable in both tails."""
    return np.exp(-0.5 * x * x - 0.5 * math.log(2 * math.pi) - special.log_ndtr(-x))


class ClippedCurve:
    """A positive, nonincreasing u-curve with cached inverse integrals."""

    def __init__(self, fn, knots: np.ndarray, eps: float = _ORACLE_EPS):
        self.eps = eps
        self.knots = knots
        self.vals = np.maximum(np.asarray(fn(knots), dtype=float), eps)
        inv = 1.0 / self.vals
        mids = 0.5 * (inv[1:] + inv[:-1])
        widths = np.diff(knots)
        self.cum = np.concatenate([[0.0], np.cumsum(mids * widths)])

    def __call__(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return np.interp(u, self.knots, self.vals)

    def inv_cum(self, u) -> np.ndarray:
        """integral of 1/G from the first knot to u (clamped to the grid)."""
        return np.interp(u, self.knots, self.cum)


def _grid_for(truth: TruthRecord, y: np.ndarray, mu: np.ndarray, sigma: float,
              n_uniform: int = 900, n_tail: int = 400) -> np.ndarray:
    lo = min(float(mu.min()) - 8.0 * sigma, float(y.min()) - 1.0)
    hi = float(y.max()) + 1e-9
    if math.isinf(truth.tau1):
        return np.linspace(lo, hi, n_uniform)
    lo = min(lo, truth.tau1 - 1.0)
    width = truth.tau2 - truth.tau1
    body_hi = min(truth.tau2 - 0.05 * width, hi)
    pts = [np.linspace(lo, body_hi, n_uniform, endpoint=False)]
    if hi > body_hi:
        # log-spaced refinement toward the censoring horizon
        frac = 1.0 - np.geomspace(1.0, 1e-4, n_tail)
        tail = body_hi + (min(hi, truth.tau2 - 1e-9) - body_hi) * frac
        pts.append(tail)
        if hi > truth.tau2:
            pts.append(np.linspace(truth.tau2, hi, 16))
    grid = np.unique(np.concatenate(pts + [[hi]]))
    return grid


@dataclass
class OracleModel:
    """Closed-form nuisances for one simulated replication (q = 2 only)."""

    truth: TruthRecord
    spec: MomentSpec
    dataset: Dataset

    def __post_init__(self):
        if self.spec.orders != (2,):
            raise DomainError("oracle nuisances are available for q = 2 specs only")
        t = self.truth
        ds = self.dataset
        self.sigma = math.sqrt(t.eps_given_nu_var)
        nu = ds.d - t.exposure_mean(ds.z)
        self.mu = t.beta0 * ds.d + ds.z @ t.phi + t.eps_given_nu_slope * nu
        # population partialling coefficients on V2 = [1, Z]
        self.theta_v = np.concatenate([[0.0], t.beta0 * t.theta + t.phi])
        self.omega_v = np.concatenate([[0.0], t.theta])
        self.V = np.column_stack([np.ones(ds.n), ds.z])
        self.Ivec0 = eval_centered_matrix(ds.z, np.zeros(ds.p), self.spec)
        self.vth0 = self.V @ self.theta_v
        self.vom0 = self.V @ self.omega_v

    def s_curve(self, u_grid: np.ndarray, rows: slice) -> np.ndarray:
        """E[T | T >= u, z, d] for a block of rows over the grid."""
        mu = self.mu[rows][:, None]
        x = (u_grid[None, :] - mu) / self.sigma
        return mu + self.sigma * _normal_hazard(x)

    def true_G(self) -> ClippedCurve:
        t = self.truth
        y = self.dataset.y
        knots = _grid_for(t, y, self.mu, self.sigma)
        return ClippedCurve(t.censor_survival, knots)


def _km_censoring_survival(dataset: Dataset):
    """Unconditional product-limit estimate of P(C > u) from the sample."""
    order = np.argsort(dataset.y, kind="stable")
    ys = dataset.y[order]
    cens = 1.0 - dataset.delta[order]
    at_risk = np.arange(dataset.n, 0, -1, dtype=float)
    # tie groups share the risk set of their first member
    first = np.zeros(dataset.n, dtype=np.int64)
    for j in range(1, dataset.n):
        first[j] = first[j - 1] if ys[j] == ys[j - 1] else j
    frac = np.where(cens == 1.0, 1.0 / at_risk[first], 0.0)
    surv = np.cumprod(1.0 - np.minimum(frac, 1.0))

    def fn(u):
        u = np.asarray(u, dtype=float)
        pos = np.searchsorted(ys, u, side="right") - 1
        out = np.ones(u.shape)
        hit = pos >= 0
        out[hit] = surv[pos[hit]]
        return out

    return fn


@dataclass
class Perturbation:
    """Joint nuisance direction; scaled by t before evaluation."""

    zeta_shift: float = 0.0      # instrument centers move by t * shift
    theta_shift: float = 0.0     # partialling coefficients move by t * shift
    omega_shift: float = 0.0
    xi_sig_amp: float = 0.0      # xi a-part gains t * amp * sigmoid(u)
    xi_b_amp: float = 0.0        # xi b-part gains a constant t * amp
    g_amp: float = 0.0           # G moves by -t * amp * G(1-G)
    xi_scale: float = 1.0        # multiplicative xi misspecification
    xi_shift: float = 0.0        # additive xi misspecification
    g_override: object = None    # replaces the true censoring survival


def oracle_psi_stats(dataset: Dataset, truth: TruthRecord, spec: MomentSpec,
                     beta0: float | None = None, t: float = 0.0,
                     pert: Perturbation | None = None,
                     chunk: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Mean and componentwise Monte Carlo SE of the oracle moment.

    The moment uses closed-form nuisances perturbed along `pert` scaled by t;
    the censoring integral is quadrature on a shared grid.
    """
    pert = pert or Perturbation()
    beta = truth.beta0 if beta0 is None else beta0
    model = OracleModel(truth=truth, spec=spec, dataset=dataset)
    ds = dataset
    n, m = ds.n, spec.m
    sigma = model.sigma

    # censoring survival (optionally overridden / perturbed)
    base_knots = _grid_for(truth, ds.y, model.mu, sigma)
    if pert.g_override is not None:
        G = ClippedCurve(pert.g_override, base_knots)
    elif pert.g_amp != 0.0 and t != 0.0:
        g0 = truth.censor_survival

        def g_fn(u):
            v = g0(u)
            return np.clip(v - t * pert.g_amp * v * (1.0 - v), _ORACLE_EPS, 1.0)

        G = ClippedCurve(g_fn, base_knots)
    else:
        G = ClippedCurve(truth.censor_survival, base_knots)

    grid = base_knots
    Gy = G(ds.y)
    ipcw = ds.delta / Gy

    # g-side nuisances, possibly displaced
    zeta_g = np.full(ds.p, t * pert.zeta_shift)
    Ivec_g = (eval_centered_matrix(ds.z, zeta_g, spec)
              if t * pert.zeta_shift != 0.0 else model.Ivec0)
    vth = model.vth0 + t * pert.theta_shift * (1.0 + ds.z.sum(axis=1))
    vom = model.vom0 + t * pert.omega_shift * (1.0 + ds.z.sum(axis=1))
    g_a = Ivec_g * (ds.y - vth)[:, None]
    g_b = -Ivec_g * (ds.d - vom)[:, None]

    # xi perturbation profile in u (shared across rows)
    u_mid = float(np.median(ds.y))
    h_sig_grid = special.expit(grid - u_mid)
    inv_cum = G.inv_cum(grid)

    # global cumulative integral of the xi perturbation a-part
    dh = np.diff(h_sig_grid)
    inv_mean_cells = np.diff(inv_cum) / np.maximum(np.diff(grid), 1e-300)
    cum_h_int = np.concatenate([[0.0], np.cumsum(dh * inv_mean_cells)])

    cell = np.clip(np.searchsorted(grid, ds.y, side="right") - 1, 0, len(grid) - 2)
    # average of 1/G over the partial cell [grid[cell], y]
    frac_inv = (G.inv_cum(ds.y) - inv_cum[cell]) / np.maximum(ds.y - grid[cell], 1e-300)

    psi_sum = np.zeros(m)
    psi_sq = np.zeros(m)
    for start in range(0, n, chunk):
        sl = slice(start, min(start + chunk, n))
        s_grid = model.s_curve(grid, sl)  # (c, ngrid)
        ds_cells = np.diff(s_grid, axis=1)
        cum_s_int = np.concatenate(
            [np.zeros((s_grid.shape[0], 1)), np.cumsum(ds_cells * inv_mean_cells, axis=1)],
            axis=1)
        idx = cell[sl]
        c_idx = np.arange(s_grid.shape[0])
        s_at_y = model.mu[sl] + sigma * _normal_hazard((ds.y[sl] - model.mu[sl]) / sigma)
        # integral of d s / G up to each row's observed time, partial cell included
        int_s = cum_s_int[c_idx, idx] + (s_at_y - s_grid[c_idx, idx]) * frac_inv[sl]
        int_h = cum_h_int[idx] + (special.expit(ds.y[sl] - u_mid)
                                  - h_sig_grid[idx]) * frac_inv[sl]

        # xi profiles: a(u) = scale*(s(u) - vth0) + shift + t*amp*sigmoid(u)
        xs, xsh = pert.xi_scale, pert.xi_shift
        a_inf = xs * (model.mu[sl] - model.vth0[sl]) + xsh \
            + t * pert.xi_sig_amp * special.expit(grid[0] - u_mid)
        a_y = xs * (s_at_y - model.vth0[sl]) + xsh \
            + t * pert.xi_sig_amp * special.expit(ds.y[sl] - u_mid)
        b_xi = -xs * (ds.d[sl] - model.vom0[sl]) + t * pert.xi_b_amp
        int_a = xs * int_s + t * pert.xi_sig_amp * int_h

        Iv0 = model.Ivec0[sl]
        w_i = ipcw[sl][:, None]
        psi_a = w_i * g_a[sl] + Iv0 * (-w_i * a_y[:, None] + a_inf[:, None]
                                       + int_a[:, None])
        psi_b = w_i * g_b[sl] + Iv0 * ((1.0 - w_i) * b_xi[:, None])
        psi = psi_a + beta * psi_b
        psi_sum += psi.sum(axis=0)
        psi_sq += (psi * psi).sum(axis=0)

    mean = psi_sum / n
    var = psi_sq / n - mean ** 2
    se = np.sqrt(np.maximum(var, 0.0) / n)
    return mean, se


_DIRECTIONS = {
    "lambda": Perturbation(zeta_shift=1.0, theta_shift=1.5, omega_shift=-1.0),
    "xi": Perturbation(xi_sig_amp=3.0, xi_b_amp=1.0, g_amp=0.8),
    "g": Perturbation(g_amp=0.8),
    "all": Perturbation(zeta_shift=1.0, theta_shift=1.5, omega_shift=-1.0,
                        xi_sig_amp=3.0, xi_b_amp=1.0, g_amp=0.8),
}


def probe_curve(dataset: Dataset, truth: TruthRecord, spec: MomentSpec,
                direction: str, t_grid: np.ndarray,
                beta0: float | None = None) -> np.ndarray:
    """Norm of the mean oracle moment along a named perturbation path."""
    if direction not in _DIRECTIONS:
        raise DomainError(f"unknown probe direction {direction!r}; "
                          f"choose from {sorted(_DIRECTIONS)}")
    pert = _DIRECTIONS[direction]
    out = np.empty(len(t_grid))
    for i, t in enumerate(t_grid):
        mean, _ = oracle_psi_stats(dataset, truth, spec, beta0=beta0,
                                   t=float(t), pert=pert)
        out[i] = float(np.linalg.norm(mean))
    return out


def dr_mean(dataset: Dataset, truth: TruthRecord, spec: MomentSpec,
            which: str, beta0: float | None = None):
    """Mean oracle moment with one nuisance deliberately misspecified.

    which: 'wrong_g_km'    marginal censoring KM in place of the true G
           'wrong_g_power' true G raised to the 0.6 power
           'wrong_xi'      scaled-and-shifted conditional moment, true G
    Returns (mean, se) componentwise.
    """
    if which == "wrong_g_km":
        pert = Perturbation(g_override=_km_censoring_survival(dataset))
    elif which == "wrong_g_power":
        g0 = truth.censor_survival
        pert = Perturbation(g_override=lambda u: g0(u) ** 0.6)
    elif which == "wrong_xi":
        pert = Perturbation(xi_scale=0.6, xi_shift=0.35)
    else:
        raise DomainError(f"unknown misspecification {which!r}")
    return oracle_psi_stats(dataset, truth, spec, beta0=beta0, t=0.0, pert=pert)
