"""Warden-side detection analytics.

The warden runs a radiometer with a detection threshold against a noise power
known only up to a log-uniform spread rho around a nominal value. This module
provides the resulting false-alarm and miss-detection rates, the optimal
threshold and minimum total error rate, the distribution of the scaled squared
distance between the UAV and the warden's estimated position (noncentral
chi-square with 2 degrees of freedom), its Gaussian approximation, and the
closed-form lower bound on the average minimum total error rate that the
planner enforces as its covertness constraint.

Scalar arguments may be numpy arrays throughout; everything broadcasts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .scenario import ScenarioConfig

# Variable lower bound guarding expressions of the form sqrt(u) and 1/u.
POSITIVE_FLOOR = 1e-12


@dataclass(frozen=True)
class DetectionModel:
    """Constants of the warden's detection problem, all linear units."""

    rho: float             # noise uncertainty spread, >= 1
    noise_nominal: float   # W
    beta0: float           # linear channel gain at 1 m
    var_willie: float      # m^2
    altitude_H: float      # m
    beta1: float = field(init=False)  # beta0 * rho / (var_willie * noise_nominal)

    def __post_init__(self):
        if self.rho < 1.0:
            raise ValueError("rho must be >= 1")
        object.__setattr__(
            self, "beta1", self.beta0 * self.rho / (self.var_willie * self.noise_nominal)
        )

    @classmethod
    def from_config(cls, cfg: ScenarioConfig) -> "DetectionModel":
        return cls(
            rho=cfg.noise_uncertainty_rho,
            noise_nominal=cfg.noise_nominal,
            beta0=cfg.beta0,
            var_willie=cfg.var_willie,
            altitude_H=cfg.altitude_H,
        )

    @property
    def two_ln_rho(self) -> float:
        return 2.0 * math.log(self.rho)

    @property
    def h2_over_var(self) -> float:
        """H^2 / var_willie, the additive floor of the distance statistic."""
        return self.altitude_H * self.altitude_H / self.var_willie

    @property
    def noise_low(self) -> float:
        return self.noise_nominal / self.rho

    @property
    def noise_high(self) -> float:
        return self.noise_nominal * self.rho


def received_power(p, q_uav, q_willie, model: DetectionModel):
    """Signal power seen by the warden: p * beta0 / (|q_uav - q_willie|^2 + H^2)."""
    d = np.asarray(q_uav, dtype=float) - np.asarray(q_willie, dtype=float)
    dist2 = np.sum(d * d, axis=-1)
    return np.asarray(p) * model.beta0 / (dist2 + model.altitude_H**2)


def false_alarm(p_th, model: DetectionModel):
    """Probability of declaring a transmission when there is none.

    Piecewise in the threshold: 1 below the noise support, a log ramp across
    it, 0 above. With rho = 1 the noise is known exactly and the rate is the
    indicator {p_th <= noise}.
    """
    p_th = np.asarray(p_th, dtype=float)
    s2, rho = model.noise_nominal, model.rho
    if rho == 1.0:
        return np.where(p_th <= s2, 1.0, 0.0)
    ramp = np.log(np.maximum(rho * s2 / np.maximum(p_th, 1e-300), 1e-300)) / model.two_ln_rho
    out = np.where(p_th < s2 / rho, 1.0, np.where(p_th > rho * s2, 0.0, ramp))
    return out if out.shape else float(out)


def miss_detection(p_th, e_w, model: DetectionModel):
    """Probability of missing a transmission with received signal power e_w."""
    p_th = np.asarray(p_th, dtype=float)
    e_w = np.asarray(e_w, dtype=float)
    s2, rho = model.noise_nominal, model.rho
    if rho == 1.0:
        return np.where(p_th > e_w + s2, 1.0, 0.0)
    arg = np.maximum(rho * (p_th - e_w) / s2, 1e-300)
    ramp = np.log(arg) / model.two_ln_rho
    out = np.where(
        p_th < e_w + s2 / rho, 0.0, np.where(p_th > e_w + rho * s2, 1.0, ramp)
    )
    return out if out.shape else float(out)


def min_total_error(e_w, model: DetectionModel):
    """Optimal threshold and minimum total error rate for the warden.

    For signal powers large enough that e_w + noise_low >= noise_high, the
    warden can place the threshold at noise_high and never err. Otherwise the
    best threshold sits at e_w + noise_low, where the total error rate is
    ln(rho * noise / (e_w + noise/rho)) / (2 ln rho).

    Returns (p_th_star, xi_star); broadcasts over e_w.
    """
    e_w = np.asarray(e_w, dtype=float)
    s2, rho = model.noise_nominal, model.rho
    if rho == 1.0:
        xi = np.where(e_w > 0, 0.0, 1.0)
        pth = np.where(e_w > 0, s2, s2)
        return (pth if pth.shape else float(pth)), (xi if xi.shape else float(xi))
    lo = s2 / rho
    hi = rho * s2
    detectable = e_w + lo >= hi
    pth = np.where(detectable, hi, e_w + lo)
    xi = np.where(
        detectable,
        0.0,
        np.log(np.maximum(hi / np.maximum(e_w + lo, 1e-300), 1e-300)) / model.two_ln_rho,
    )
    # a silent transmitter is exactly undetectable (1 ulp of log roundoff
    # otherwise leaks through the ratio)
    xi = np.where(e_w == 0.0, 1.0, xi)
    if xi.shape:
        return pth, xi
    return float(pth), float(xi)


# ---------------------------------------------------------------------------
# squared-distance statistic
# ---------------------------------------------------------------------------

def lambda_of(q_uav, willie_est, var_willie: float):
    """Noncentrality |q_uav - willie_est|^2 / var_willie. Broadcasts over points."""
    d = np.asarray(q_uav, dtype=float) - np.asarray(willie_est, dtype=float)
    return np.sum(d * d, axis=-1) / var_willie


@dataclass(frozen=True)
class NoncentralChi2:
    """Noncentral chi-square distribution; this artifact only uses dof = 2."""

    lam: float
    dof: int = 2

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("noncentrality must be nonnegative")

    @property
    def mean(self) -> float:
        return self.dof + self.lam

    @property
    def variance(self) -> float:
        return 2.0 * self.dof + 4.0 * self.lam


def gaussian_approx(nc: NoncentralChi2) -> tuple[float, float]:
    """Moment-matched normal (mean, variance) = (dof + lam, 2 dof + 4 lam)."""
    return nc.mean, nc.variance


def _series_kmax(z_max: float, lam: float) -> int:
    # The series terms z^k / (k!)^2 peak near k = sqrt(z) and then decay
    # super-exponentially with Gaussian width ~ sqrt(k/2); run past both that
    # mode and the Poisson-weight mode lam/2 with a dozen widths of buffer so
    # the dropped tail is below 1e-15 of the sum.
    mode = max(math.sqrt(max(z_max, 0.0)), 0.5 * lam)
    return int(mode + 14.0 * math.sqrt(mode + 1.0) + 30.0)


def nc_chi2_logpdf(x, lam: float):
    """Log-density of the 2-dof noncentral chi-square, series-evaluated.

    f(x) = 0.5 * exp(-(x + lam)/2) * sum_k (lam*x/4)^k / (k!)^2 for x >= 0.
    The sum is computed in the log domain with the largest term factored out,
    which keeps it finite for noncentralities up to ~1e5.
    """
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x).astype(float)
    out = np.full(x.shape, -np.inf)
    pos = x > 0
    if lam == 0.0:
        out[pos] = math.log(0.5) - 0.5 * x[pos]
        out[x == 0] = math.log(0.5)
        return float(out[0]) if scalar else out

    xp = x[pos]
    if xp.size:
        z = lam * xp / 4.0
        kmax = _series_kmax(float(z.max(initial=0.0)), lam)
        k = np.arange(kmax + 1, dtype=float)
        # log term matrix: k log z - 2 log k!, shape (kmax+1, n)
        with np.errstate(divide="ignore"):
            logz = np.log(z)
        lt = k[:, None] * logz[None, :] - 2.0 * gammaln(k + 1.0)[:, None]
        m = lt.max(axis=0)
        s = np.exp(lt - m[None, :]).sum(axis=0)
        out[pos] = math.log(0.5) - 0.5 * (xp + lam) + m + np.log(s)
    out[x == 0] = math.log(0.5) - 0.5 * lam
    return float(out[0]) if scalar else out


def nc_chi2_pdf(x, lam: float):
    """Density of the 2-dof noncentral chi-square statistic (zero for x < 0)."""
    return np.exp(nc_chi2_logpdf(x, lam))


# ---------------------------------------------------------------------------
# covertness bound
# ---------------------------------------------------------------------------

def g_of(x, p, model: DetectionModel):
    """ln(1 + beta1 * p / (x + H^2/var)), the warden-error kernel.

    Convex and decreasing in x for p >= 0; the average of this under the
    distance statistic determines the warden's average minimum error rate.
    """
    x = np.asarray(x, dtype=float)
    return np.log1p(model.beta1 * np.asarray(p) / (x + model.h2_over_var))


def xi_lower_bound(lam, p, model: DetectionModel):
    """Closed-form lower bound on the warden's average minimum total error rate.

    1 - g_upper(lam, p) / (2 ln rho), where g_upper bounds E[g(X)] using the
    moment-matched Gaussian view of the distance statistic and its mean
    absolute deviation. Not clamped: the expression may exceed 1 for tiny p
    and go below 0 for large p, and the optimizer uses it algebraically.
    """
    return 1.0 - g_upper(lam, p, model) / model.two_ln_rho


def g_upper(lam, p, model: DetectionModel):
    """Upper bound on E[g(X)] at noncentrality lam and transmit power p."""
    lam = np.asarray(lam, dtype=float)
    p = np.asarray(p, dtype=float)
    ln_mean = np.log1p(model.beta1 * p / (lam + 2.0 + model.h2_over_var))
    ln_zero = np.log1p(model.beta1 * model.var_willie * p / model.altitude_H**2)
    coef = math.sqrt(2.0 / math.pi) / np.sqrt(lam + 1.0)
    out = ln_mean + coef * (ln_zero - ln_mean)
    return out if out.shape else float(out)
