"""Effective viscosity of dense granular media via the regularized mu(I)-rheology.

The heavy phase is modeled as a generalized Newtonian fluid whose dynamic
viscosity follows from a pressure- and shear-rate-dependent friction
coefficient,

    eta = mu(I) * max(p, 0) / (gamma_dot + lambda),

where I = gamma_dot * d / sqrt(max(p, 0)/rho_g + lambda) is the inertial
number. The friction law interpolates between a static value mu_s and a
limiting value mu_2 (Jop law); below a neutral inertial number I1_N the law is
replaced by a logarithmic branch that decays to zero friction at I = 0, which
restores well-posedness of the quasi-static limit. The viscosity is clamped to
[eta_min, eta_max].

All evaluation functions accept scalars or numpy arrays and are pure; they are
safe to call concurrently.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from .errors import ConfigurationError

__all__ = [
    "RheologyParams",
    "LocalFlowState",
    "shear_rate",
    "inertial_number",
    "mu_jop",
    "barker_A",
    "mu_regularized",
    "viscosity",
    "viscosity_gp",
]


@dataclass(frozen=True)
class RheologyParams:
    """Constitutive and regularization constants for the granular phase.

    Parameters
    ----------
    mu_s, mu_2 : float
        Static and limiting friction coefficients, 0 < mu_s < mu_2.
    I_0 : float
        Reference inertial number of the friction law.
    d : float
        Grain diameter, in the scenario's length unit.
    rho_g : float
        Grain density.
    alpha : float
        Fitting exponent of the low-I logarithmic branch. Values >= 3 are
        rejected as configuration errors.
    I1_N : float
        Neutral inertial number below which the logarithmic branch applies.
    lam : float
        Denominator regularizer (applied to gamma_dot, to p/rho_g under the
        square root, and to I inside the friction law).
    eta_min, eta_max : float
        Viscosity clamp bounds.
    """

    mu_s: float = 0.32
    mu_2: float = 0.60
    I_0: float = 0.4
    d: float = 1e-3
    rho_g: float = 1.0
    alpha: float = 1.5
    I1_N: float = 0.005
    lam: float = 1e-5
    eta_min: float = 1e-6
    eta_max: float = 1e3

    def __post_init__(self):
        errs = []
        if not (0.0 < self.mu_s < self.mu_2):
            errs.append(f"friction bounds violated: need 0 < mu_s < mu_2, got ({self.mu_s}, {self.mu_2})")
        if self.I_0 <= 0.0:
            errs.append(f"I_0 must be positive, got {self.I_0}")
        if self.d <= 0.0:
            errs.append(f"grain diameter must be positive, got {self.d}")
        if self.rho_g <= 0.0:
            errs.append(f"grain density must be positive, got {self.rho_g}")
        if self.lam <= 0.0:
            errs.append(f"lambda regularizer must be positive, got {self.lam}")
        if not (0.0 < self.eta_min < self.eta_max):
            errs.append(f"need 0 < eta_min < eta_max, got ({self.eta_min}, {self.eta_max})")
        if not (0.0 < self.alpha < 3.0):
            errs.append(f"alpha must lie in (0, 3), got {self.alpha}")
        if not (0.0 < self.I1_N < self.I_0):
            errs.append(f"need 0 < I1_N < I_0, got I1_N={self.I1_N}, I_0={self.I_0}")
        if errs:
            raise ConfigurationError(errs)


@dataclass
class LocalFlowState:
    """Shear rate, pressure, and (optionally) the strain-rate tensor at a point.

    When ``eps`` is supplied it must be consistent with ``gamma_dot``, i.e.
    gamma_dot = sqrt(0.5 * eps:eps).
    """

    gamma_dot: float
    p: float
    eps: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if self.gamma_dot < 0.0:
            raise ValueError(f"shear rate must be non-negative, got {self.gamma_dot}")
        if self.eps is not None:
            gd = shear_rate(self.eps)
            if abs(gd - self.gamma_dot) > 1e-10 * max(1.0, abs(gd)):
                raise ValueError(
                    f"inconsistent state: gamma_dot={self.gamma_dot} but sqrt(0.5 eps:eps)={gd}"
                )


def shear_rate(eps):
    """Shear rate from the strain-rate tensor: sqrt(0.5 * eps:eps).

    ``eps`` is the symmetric tensor 0.5*(grad u + grad u^T), shaped (2, 2) or
    batched (..., 2, 2). Returns a float for a single tensor, an array for a
    batch.
    """
    e = np.asarray(eps, dtype=float)
    if not np.isfinite(e).all():
        raise ValueError("non-finite strain rate")
    out = np.sqrt(0.5 * np.sum(e * e, axis=(-2, -1)))
    return float(out) if out.ndim == 0 else out


def inertial_number(gamma_dot, p, params: RheologyParams):
    """Inertial number I = gamma_dot * d / sqrt(max(p,0)/rho_g + lambda).

    Finite and non-negative for every finite input, including p <= 0.
    """
    gd = np.asarray(gamma_dot, dtype=float)
    pp = np.maximum(np.asarray(p, dtype=float), 0.0)
    out = gd * params.d / np.sqrt(pp / params.rho_g + params.lam)
    return float(out) if out.ndim == 0 else out


def mu_jop(I, params: RheologyParams):
    """Jop friction law mu_s + (mu_2 - mu_s) / (I_0/(I + lambda) + 1).

    Strictly increasing in I and bounded in [mu_s, mu_2).
    """
    II = np.asarray(I, dtype=float)
    out = params.mu_s + (params.mu_2 - params.mu_s) / (params.I_0 / (II + params.lam) + 1.0)
    return float(out) if out.ndim == 0 else out


def barker_A(params: RheologyParams) -> float:
    """Coefficient A of the low-I branch, fixed by continuity at I1_N:

        A = I1_N * exp(alpha / mu_jop(I1_N)^2).
    """
    mu1 = mu_jop(params.I1_N, params)
    return params.I1_N * math.exp(params.alpha / (mu1 * mu1))


def mu_regularized(I, params: RheologyParams):
    """Two-branch friction coefficient.

    For I > I1_N the Jop law applies unchanged; for 0 < I <= I1_N the value is
    sqrt(alpha / ln(A/I)) with A = barker_A(params), continuous at the knot by
    construction; mu(0) = 0.
    """
    II = np.asarray(I, dtype=float)
    A = barker_A(params)
    high = mu_jop(II, params)
    # the low branch is only used for 0 < I <= I1_N; clamp its argument there
    # so the discarded lane of the select never sees log of a bad value
    safe = np.where((II > 0.0) & (II <= params.I1_N), II, params.I1_N)
    low = np.sqrt(params.alpha / np.log(A / safe))
    out = np.where(II > params.I1_N, high, np.where(II > 0.0, low, 0.0))
    return float(out) if out.ndim == 0 else out


def viscosity_gp(gamma_dot, p, params: RheologyParams):
    """Viscosity from raw (gamma_dot, p) values; vectorized.

    clamp(mu(I) * max(p, 0) / (gamma_dot + lambda), eta_min, eta_max)
    """
    gd = np.asarray(gamma_dot, dtype=float)
    pp = np.maximum(np.asarray(p, dtype=float), 0.0)
    I = inertial_number(gd, p, params)
    mu = mu_regularized(I, params)
    eta = mu * pp / (gd + params.lam)
    out = np.clip(eta, params.eta_min, params.eta_max)
    return float(out) if out.ndim == 0 else out


def viscosity(state: LocalFlowState, params: RheologyParams):
    """Viscosity at a local flow state. Always within [eta_min, eta_max]."""
    return viscosity_gp(state.gamma_dot, state.p, params)
