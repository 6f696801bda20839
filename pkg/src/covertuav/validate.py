"""Independent verification of every closed form by sampling and quadrature.

Nothing in here reuses the optimizer's algebra: outage probabilities are
estimated by sampling the receiver location error, the warden's average error
rate by sampling the warden location error through the threshold analysis
(with a brute-force threshold grid cross-check on a sample subset), the
distance-statistic distribution through an independent Poisson-mixture CDF,
and the covertness bound through adaptive quadrature of the exact density.

Sampling uses the counter-based Philox generator keyed by (seed, stream), so
reports are reproducible across platforms and shards are independent;
reductions are plain numpy pairwise sums over fixed shard boundaries, hence
order-independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.special import gammainc, gammaln, ndtr

from .detection import DetectionModel, g_of, min_total_error, nc_chi2_pdf, g_upper
from .scenario import ScenarioConfig
from .sca import Plan

_SHARD = 1 << 18  # samples per shard


@dataclass(frozen=True)
class McSettings:
    num_samples: int = 1_000_000
    rng_seed: int = 20240
    confidence: float = 0.99

    def __post_init__(self):
        if self.num_samples < 1_000:
            raise ValueError("num_samples must be at least 1000")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must lie in (0, 1)")

    @property
    def z_value(self) -> float:
        # two-sided normal quantile via bisection on ndtr (avoids scipy.stats)
        target = 0.5 * (1.0 + self.confidence)
        lo, hi = 0.0, 10.0
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if ndtr(mid) < target:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)


def _rng(seed: int, stream: int) -> np.random.Generator:
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, stream & 0xFFFFFFFFFFFFFFFF],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def wilson_interval(successes: int, n: int, z: float) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if n <= 0:
        return 0.0, 1.0
    p_hat = successes / n
    z2 = z * z
    denom = 1.0 + z2 / n
    center = (p_hat + z2 / (2.0 * n)) / denom
    half = z * math.sqrt((p_hat * (1.0 - p_hat) + z2 / (4.0 * n)) / n) / denom
    return max(0.0, center - half), min(1.0, center + half)


# ---------------------------------------------------------------------------
# distance-statistic CDF oracle (Poisson mixture of gamma tails)
# ---------------------------------------------------------------------------

def nc_chi2_cdf(x, lam: float):
    """CDF of the 2-dof noncentral chi-square statistic.

    Poisson(lam/2) mixture of chi-square(2k+2) CDFs, the series form of the
    Marcum Q function; the mixture window keeps all weights above 1e-18 of
    the mass, so the truncation error is far below the 1e-12 target.
    """
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x).astype(float)
    half = 0.5 * lam
    spread = 10.0 * math.sqrt(half + 1.0) + 20.0
    k_lo = max(0, int(half - spread))
    k_hi = int(half + spread)
    k = np.arange(k_lo, k_hi + 1, dtype=float)
    log_w = -half + k * (math.log(half) if half > 0 else 0.0) - gammaln(k + 1.0)
    if half == 0.0:
        log_w = np.where(k == 0, 0.0, -np.inf)
    w = np.exp(log_w)
    out = np.zeros_like(x)
    pos = x > 0
    if np.any(pos):
        # chunk over x to bound the (k, x) broadcast
        xp = x[pos]
        res = np.empty_like(xp)
        step = max(1, int(4_000_000 / max(k.size, 1)))
        for i in range(0, xp.size, step):
            xx = xp[i:i + step]
            res[i:i + step] = w @ gammainc(k[:, None] + 1.0, 0.5 * xx[None, :])
        out[pos] = res
    return float(out[0]) if scalar else out


def ks_gaussian_approx(lam: float, grid_points: int = 10_000) -> float:
    """KS distance between the exact distance-statistic CDF and its
    moment-matched normal approximation, on a dense grid."""
    mean = lam + 2.0
    sd = math.sqrt(4.0 * lam + 4.0)
    lo = max(0.0, mean - 8.0 * sd)
    hi = mean + 8.0 * sd
    grid = np.linspace(lo, hi, grid_points)
    exact = nc_chi2_cdf(grid, lam)
    gauss = ndtr((grid - mean) / sd)
    return float(np.max(np.abs(exact - gauss)))


# ---------------------------------------------------------------------------
# quadrature oracle for the average warden-error kernel
# ---------------------------------------------------------------------------

def mean_g_quadrature(lam: float, p: float, model: DetectionModel) -> float:
    """E[g(X)] by adaptive quadrature of the exact density."""
    if p == 0.0:
        return 0.0
    hi = lam + 2.0 + 60.0 * math.sqrt(lam + 1.0)
    val, _ = integrate.quad(
        lambda x: g_of(x, p, model) * nc_chi2_pdf(x, lam),
        0.0, hi, limit=400, epsabs=1e-10, epsrel=1e-10,
    )
    return float(val)


def xi_bar_quadrature(lam: float, p: float, model: DetectionModel) -> float:
    """Average minimum total error rate by quadrature (the exact counterpart
    of the closed-form lower bound)."""
    return 1.0 - mean_g_quadrature(lam, p, model) / model.two_ln_rho


# ---------------------------------------------------------------------------
# Monte Carlo estimates
# ---------------------------------------------------------------------------

def empirical_outage(plan: Plan, cfg: ScenarioConfig, mc: McSettings):
    """Per-slot outage probability estimate with Wilson intervals.

    Samples the receiver location error and counts realized-rate shortfalls
    against the planned rate. Returns (p_hat, ci) with ci of shape (N, 2).
    """
    n = len(plan.trajectory)
    z = mc.z_value
    eps = math.sqrt(cfg.var_bob)
    h2 = cfg.altitude_H**2
    p_hat = np.empty(n)
    ci = np.empty((n, 2))
    for i in range(n):
        q = plan.trajectory.waypoints[i]
        p_i = plan.power.powers[i]
        r_i = plan.rates.rates[i]
        gen = _rng(mc.rng_seed, 2 * i)
        count = 0
        left = mc.num_samples
        while left > 0:
            take = min(_SHARD, left)
            e_b = gen.normal(0.0, eps, size=(take, 2))
            d = q - cfg.bob_est - e_b
            snr = p_i * cfg.gamma0 / (np.sum(d * d, axis=1) + h2)
            count += int(np.count_nonzero(np.log2(1.0 + snr) < r_i))
            left -= take
        p_hat[i] = count / mc.num_samples
        ci[i] = wilson_interval(count, mc.num_samples, z)
    return p_hat, ci


def empirical_willie_error(plan: Plan, cfg: ScenarioConfig, mc: McSettings,
                           grid_check_fraction: float = 0.01,
                           grid_points: int = 1000):
    """Per-slot mean minimum total error rate at the warden, sampled over the
    warden's location error.

    A brute-force threshold grid re-derives the per-sample minimum on a
    fraction of the samples; the worst closed-form excess over the grid
    minimum is returned as a cross-check statistic (the closed form can only
    be below the grid by resolution, never above).
    """
    model = DetectionModel.from_config(cfg)
    n = len(plan.trajectory)
    z = mc.z_value
    eps = math.sqrt(cfg.var_willie)
    h2 = cfg.altitude_H**2
    mean_xi = np.empty(n)
    ci = np.empty((n, 2))
    worst_excess = 0.0
    for i in range(n):
        q = plan.trajectory.waypoints[i]
        p_i = plan.power.powers[i]
        gen = _rng(mc.rng_seed, 2 * i + 1)
        total = 0.0
        total_sq = 0.0
        checked = False
        left = mc.num_samples
        while left > 0:
            take = min(_SHARD, left)
            e_w = gen.normal(0.0, eps, size=(take, 2))
            d = q - cfg.willie_est - e_w
            ew_pow = cfg.beta0 * p_i / (np.sum(d * d, axis=1) + h2)
            _, xi = min_total_error(ew_pow, model)
            total += float(np.sum(xi))
            total_sq += float(np.sum(xi * xi))
            if not checked and grid_check_fraction > 0.0:
                k = min(take, max(1, int(mc.num_samples * grid_check_fraction)))
                worst_excess = max(
                    worst_excess,
                    _threshold_grid_excess(ew_pow[:k], xi[:k], model, grid_points),
                )
                checked = True
            left -= take
        m = total / mc.num_samples
        var = max(total_sq / mc.num_samples - m * m, 0.0)
        half = z * math.sqrt(var / mc.num_samples)
        mean_xi[i] = m
        ci[i] = (m - half, m + half)
    return mean_xi, ci, worst_excess


def _threshold_grid_excess(ew_pow: np.ndarray, xi_closed: np.ndarray,
                           model: DetectionModel, grid_points: int) -> float:
    """max over samples of (closed-form xi) - (grid-minimized xi).

    The closed form is the true minimum, so the grid can never genuinely beat
    it: positive values flag an error in the closed form. One threshold grid
    spans all samples; denser thresholds only lower the grid minimum, which
    makes the check stricter, not looser.
    """
    from .detection import false_alarm, miss_detection

    lo = model.noise_low
    hi = float(np.max(ew_pow)) + model.noise_high
    grid = np.linspace(lo, hi, grid_points)
    fa = false_alarm(grid, model)
    excess = -math.inf
    step = max(1, int(2_000_000 / grid_points))
    for i in range(0, ew_pow.size, step):
        ew = ew_pow[i:i + step]
        tot = fa[None, :] + miss_detection(grid[None, :], ew[:, None], model)
        excess = max(excess, float(np.max(xi_closed[i:i + step] - tot.min(axis=1))))
    return excess


# ---------------------------------------------------------------------------
# analytic-bound audit
# ---------------------------------------------------------------------------

@dataclass
class BoundAuditRow:
    lam: float
    p: float
    mean_g: float          # quadrature value of E[g(X)]
    bound_mean_mad: float  # mean/MAD two-point bound
    bound_final: float     # simplified bound used by the optimizer
    xi_bar: float
    xi_check: float

    @property
    def ordered(self) -> bool:
        tol = 1e-9 * max(1.0, abs(self.bound_final))
        return (self.mean_g <= self.bound_mean_mad + tol
                and self.bound_mean_mad <= self.bound_final + tol)


@dataclass
class BoundAuditReport:
    rows: list
    violations: list  # (lam, p, description), empty when every bound held

    @property
    def passed(self) -> bool:
        return not self.violations


def bound_audit(cfg: ScenarioConfig, lam_grid, p_grid) -> BoundAuditReport:
    """Check the chain: quadrature E[g] <= mean/MAD bound <= final bound,
    equivalently xi_bar >= xi_check, over a (lambda, power) grid.

    Grid points that violate a bound are listed, not asserted away.
    """
    model = DetectionModel.from_config(cfg)
    rows: list[BoundAuditRow] = []
    violations: list[tuple] = []
    for lam in np.asarray(lam_grid, dtype=float):
        mu = lam + 2.0
        theta = 2.0 * math.sqrt(2.0 / math.pi) * math.sqrt(lam + 1.0)
        for p in np.asarray(p_grid, dtype=float):
            eg = mean_g_quadrature(lam, p, model)
            g_mu = float(g_of(mu, p, model))
            g_0 = float(g_of(0.0, p, model))
            # two-point bound with the limit term of g vanishing at infinity
            bound_b = g_mu + 0.5 * theta * (0.0 + (g_0 - g_mu) / mu)
            bound_c = float(g_upper(lam, p, model))
            xi_bar = 1.0 - eg / model.two_ln_rho
            xi_check = 1.0 - bound_c / model.two_ln_rho
            row = BoundAuditRow(float(lam), float(p), eg, bound_b, bound_c,
                                xi_bar, xi_check)
            rows.append(row)
            if not row.ordered:
                violations.append((float(lam), float(p), "bound chain broken"))
            if xi_bar < xi_check - 1e-9:
                violations.append((float(lam), float(p), "xi_bar below xi_check"))
    return BoundAuditReport(rows=rows, violations=violations)


# ---------------------------------------------------------------------------
# plan-level validation
# ---------------------------------------------------------------------------

@dataclass
class ValidationReport:
    outage: np.ndarray          # per-slot empirical outage probability
    outage_ci: np.ndarray       # (N, 2) Wilson intervals
    outage_ok: bool             # all slots within the allowed outage
    xi_bar: np.ndarray          # per-slot empirical mean warden error rate
    xi_bar_ci: np.ndarray       # (N, 2) normal intervals
    xi_check: np.ndarray        # per-slot analytic lower bound
    covert_ok: bool             # all slots at or above 1 - rho_w
    bound_ok: bool              # empirical mean never below the analytic bound
    threshold_grid_excess: float
    ks_stats: dict
    seed: int
    num_samples: int

    @property
    def passed(self) -> bool:
        return self.outage_ok and self.covert_ok and self.bound_ok

    def to_dict(self) -> dict:
        return {
            "num_samples": self.num_samples,
            "rng_seed": self.seed,
            "outage_probability": self.outage.tolist(),
            "outage_wilson_ci": self.outage_ci.tolist(),
            "outage_ok": bool(self.outage_ok),
            "willie_error_mean": self.xi_bar.tolist(),
            "willie_error_ci": self.xi_bar_ci.tolist(),
            "xi_lower_bound": self.xi_check.tolist(),
            "covert_ok": bool(self.covert_ok),
            "bound_ok": bool(self.bound_ok),
            "threshold_grid_excess": self.threshold_grid_excess,
            "ks_stats": self.ks_stats,
            "passed": bool(self.passed),
        }


def validate_plan(plan: Plan, cfg: ScenarioConfig,
                  mc: McSettings | None = None) -> ValidationReport:
    """Monte Carlo audit of a plan against the chance and covertness targets."""
    mc = mc or McSettings()
    if len(plan.trajectory) != cfg.num_slots_N:
        raise ValueError(
            f"plan has {len(plan.trajectory)} slots, scenario expects {cfg.num_slots_N}"
        )
    outage, outage_ci = empirical_outage(plan, cfg, mc)
    xi_bar, xi_ci, grid_excess = empirical_willie_error(plan, cfg, mc)
    # MC noise allowance: three standard errors on a bounded variable
    se = np.maximum(xi_ci[:, 1] - xi_bar, 1e-12) / mc.z_value
    outage_ok = bool(np.all(outage <= cfg.rho_b + 1e-12))
    covert_ok = bool(np.all(xi_bar >= (1.0 - cfg.rho_w) - 3.0 * se))
    bound_ok = bool(np.all(xi_bar >= plan.xi_lb - 3.0 * se))
    lam_lo = float(np.min(plan.lam))
    lam_med = float(np.median(plan.lam))
    ks_stats = {
        "lambda_min": lam_lo,
        "ks_at_lambda_min": ks_gaussian_approx(lam_lo),
        "lambda_median": lam_med,
        "ks_at_lambda_median": ks_gaussian_approx(lam_med),
    }
    return ValidationReport(
        outage=outage, outage_ci=outage_ci, outage_ok=outage_ok,
        xi_bar=xi_bar, xi_bar_ci=xi_ci, xi_check=plan.xi_lb,
        covert_ok=covert_ok, bound_ok=bound_ok,
        threshold_grid_excess=grid_excess, ks_stats=ks_stats,
        seed=mc.rng_seed, num_samples=mc.num_samples,
    )
