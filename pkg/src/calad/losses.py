"""Binary class-probability-estimation losses, links, and propriety probes.

A binary CPE loss is a pair of partial losses over the probability estimate:
``loss(y, eta_hat) = y * partial_1(eta_hat) + (1 - y) * partial_0(eta_hat)``.
Composite losses additionally carry an invertible link mapping estimates to
an unbounded prediction (score) space, so raw model outputs can feed the
probability-space loss.

Propriety of a loss is probed numerically: a proper loss has a vanishing
stationarity residual ``(1 - eta) * partial_0'(eta) + eta * partial_1'(eta)``
on any interior grid, and a strictly proper one additionally has a strictly
positive second derivative of the conditional risk on its diagonal.
"""

import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

# Global floor keeping probability estimates away from {0, 1} before any log.
EPS_CLAMP = 1e-7


def clamp_probability(eta_hat, eps: float = EPS_CLAMP):
    """Clamp estimates into [eps, 1 - eps]."""
    return np.clip(eta_hat, eps, 1.0 - eps)


def sigmoid(v):
    """Numerically stable logistic function 1 / (1 + exp(-v))."""
    v = np.asarray(v, dtype=float)
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out if out.ndim else float(out)


def logit(eta_hat):
    """Inverse of sigmoid; requires inputs strictly inside (0, 1)."""
    e = np.asarray(eta_hat, dtype=float)
    if np.any((e <= 0.0) | (e >= 1.0)):
        bad = e[(e <= 0.0) | (e >= 1.0)].ravel()[0]
        raise ValueError(f"logit is undefined at {bad!r}; need 0 < value < 1")
    out = np.log(e) - np.log1p(-e)
    return out if out.ndim else float(out)


def link_pair(value, direction: str):
    """Evaluate the canonical sigmoid/logit link pair in either direction."""
    if direction == "to_prob":
        return sigmoid(value)
    if direction == "to_logit":
        return logit(value)
    raise ValueError(f"unknown direction {direction!r}")


def log_loss(y, eta_hat, eps: float = EPS_CLAMP):
    """-y ln(eta_hat) - (1 - y) ln(1 - eta_hat) with estimates clamped."""
    y = np.asarray(y, dtype=float)
    e = clamp_probability(np.asarray(eta_hat, dtype=float), eps)
    out = -y * np.log(e) - (1.0 - y) * np.log1p(-e)
    return out if out.ndim else float(out)


def logistic_loss(y, v):
    """y ln(1 + e^-v) + (1 - y) ln(1 + e^v), evaluated without overflow."""
    y = np.asarray(y, dtype=float)
    v = np.asarray(v, dtype=float)
    out = np.logaddexp(0.0, (1.0 - 2.0 * y) * v)
    return out if out.ndim else float(out)


def hsc_loss(y, v, eps: float = EPS_CLAMP):
    """-y ln(1 - e^-v) + (1 - y) v for nonnegative scores v.

    At v = 0 the anomalous branch is clamped to a finite value and a
    warning is emitted, since 1 - e^-v collapses to 0 there.
    """
    y = np.asarray(y, dtype=float)
    v = np.asarray(v, dtype=float)
    if np.any(v < 0):
        raise ValueError("hsc_loss requires v >= 0")
    inner = -np.expm1(-v)
    if np.any((y == 1) & (inner < eps)):
        warnings.warn("hsc_loss clamped 1 - e^-v to eps for an anomalous sample",
                      stacklevel=2)
    inner = np.maximum(inner, eps)
    out = -y * np.log(inner) + (1.0 - y) * v
    return out if out.ndim else float(out)


def pseudo_huber(sq_norm):
    """Smooth distance surrogate sqrt(s + 1) - 1 of a squared norm."""
    s = np.asarray(sq_norm, dtype=float)
    if np.any(s < 0):
        raise ValueError("pseudo_huber requires a nonnegative squared norm")
    out = np.sqrt(s + 1.0) - 1.0
    return out if out.ndim else float(out)


def svdd_score(embedding, center):
    """Squared Euclidean distance of an embedding to the hypersphere center.

    Doubles as the logit of the induced probability estimate. Supports a
    batch leading axis on ``embedding``.
    """
    e = np.asarray(embedding, dtype=float)
    c = np.asarray(center, dtype=float)
    if e.shape[-1] != c.shape[-1]:
        raise ValueError(
            f"dimension mismatch: embedding has {e.shape[-1]}, center has {c.shape[-1]}")
    out = np.sum((e - c) ** 2, axis=-1)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class LossSpec:
    """A binary CPE or composite loss.

    ``partial_0`` and ``partial_1`` act on probability estimates; losses
    used only for scorer training may omit them. ``link`` maps estimates
    into the loss's score space and ``link_inv`` maps back.
    """

    name: str
    partial_0: Optional[Callable] = None
    partial_1: Optional[Callable] = None
    link: Optional[Callable] = None
    link_inv: Optional[Callable] = None
    supervised: bool = True

    def __call__(self, y, eta_hat):
        if self.partial_0 is None or self.partial_1 is None:
            raise ValueError(f"loss {self.name!r} has no partial-loss decomposition")
        y = np.asarray(y, dtype=float)
        out = y * self.partial_1(eta_hat) + (1.0 - y) * self.partial_0(eta_hat)
        return out if out.ndim else float(out)


@dataclass(frozen=True)
class RiskDecomposition:
    entropy_term: float
    calibration_term: float

    @property
    def total(self) -> float:
        return self.entropy_term + self.calibration_term


def conditional_risk(eta, eta_hat, loss: LossSpec):
    """eta * partial_1(eta_hat) + (1 - eta) * partial_0(eta_hat)."""
    if loss.partial_0 is None or loss.partial_1 is None:
        raise ValueError(f"loss {loss.name!r} has no partial-loss decomposition")
    eta = np.asarray(eta, dtype=float)
    out = eta * loss.partial_1(eta_hat) + (1.0 - eta) * loss.partial_0(eta_hat)
    return out if out.ndim else float(out)


def risk_decomposition(eta, eta_hat, loss: LossSpec) -> RiskDecomposition:
    """Split the conditional risk into its entropy and calibration terms.

    The entropy term is the risk on the diagonal; the calibration term is
    the excess over it, which is nonnegative exactly when the loss is
    proper. Their sum reproduces the conditional risk by construction.
    """
    entropy = conditional_risk(eta, eta, loss)
    excess = conditional_risk(eta, eta_hat, loss) - entropy
    return RiskDecomposition(entropy_term=float(entropy), calibration_term=float(excess))


def check_stationarity(loss: LossSpec, eta_grid, step: float = 1e-5) -> np.ndarray:
    """Per-eta stationarity residuals (1-eta) p0'(eta) + eta p1'(eta).

    Partial derivatives are taken by central finite differences with the
    given step. Proper losses balance the two terms and leave residuals at
    the finite-difference noise floor; improper losses do not. Non-finite
    derivatives surface as NaN entries rather than raising.
    """
    if loss.partial_0 is None or loss.partial_1 is None:
        raise ValueError(f"loss {loss.name!r} has no partial-loss decomposition")
    grid = np.asarray(eta_grid, dtype=float)
    if np.any((grid <= 0.0) | (grid >= 1.0)):
        raise ValueError("stationarity grid must lie strictly inside (0, 1)")
    residuals = np.empty_like(grid)
    with np.errstate(all="ignore"):
        for i, eta in enumerate(grid):
            d0 = (loss.partial_0(eta + step) - loss.partial_0(eta - step)) / (2 * step)
            d1 = (loss.partial_1(eta + step) - loss.partial_1(eta - step)) / (2 * step)
            r = (1.0 - eta) * d0 + eta * d1
            residuals[i] = r if np.isfinite(r) else np.nan
    return residuals


def check_strict_propriety(loss: LossSpec, eta_grid, step: float = 1e-5) -> np.ndarray:
    """Second derivative of the conditional risk in eta_hat, on the diagonal.

    Estimated by a central second difference. Strictly positive values on
    the grid certify a unique risk minimizer at eta_hat = eta.
    """
    grid = np.asarray(eta_grid, dtype=float)
    out = np.empty_like(grid)
    with np.errstate(all="ignore"):
        for i, eta in enumerate(grid):
            lo = conditional_risk(eta, eta - step, loss)
            mid = conditional_risk(eta, eta, loss)
            hi = conditional_risk(eta, eta + step, loss)
            d2 = (hi - 2.0 * mid + lo) / step ** 2
            out[i] = d2 if np.isfinite(d2) else np.nan
    return out


def _log_partial_0(eta_hat):
    return -np.log1p(-clamp_probability(np.asarray(eta_hat, dtype=float)))


def _log_partial_1(eta_hat):
    return -np.log(clamp_probability(np.asarray(eta_hat, dtype=float)))


def _logistic_partial_0(eta_hat):
    # composed through the logit link; analytically equal to the log partial
    return logistic_loss(0, logit(clamp_probability(np.asarray(eta_hat, dtype=float))))


def _logistic_partial_1(eta_hat):
    return logistic_loss(1, logit(clamp_probability(np.asarray(eta_hat, dtype=float))))


def _hsc_link(eta_hat):
    return -np.log1p(-np.asarray(eta_hat, dtype=float))


def _hsc_link_inv(v):
    return -np.expm1(-np.asarray(v, dtype=float))


def _hsc_probe_partial_0(eta_hat):
    # The normal-class penalty is the raw score, which keeps unit slope when
    # read in estimate units; pairing it with the log anomalous partial is
    # what breaks the stationarity balance, leaving a residual of size eta.
    return np.asarray(eta_hat, dtype=float)


REGISTRY = {
    "log": LossSpec("log", _log_partial_0, _log_partial_1),
    "logistic": LossSpec("logistic", _logistic_partial_0, _logistic_partial_1,
                         link=logit, link_inv=sigmoid),
    "hsc": LossSpec("hsc", _hsc_probe_partial_0, _log_partial_1,
                    link=_hsc_link, link_inv=_hsc_link_inv),
    "svdd": LossSpec("svdd", link=logit, link_inv=sigmoid, supervised=False),
    "fcdd": LossSpec("fcdd", link=_hsc_link, link_inv=_hsc_link_inv),
    "ssim": LossSpec("ssim", supervised=False),
}
