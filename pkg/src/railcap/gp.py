"""Exact GP surrogates for the route constraints.

Matern-5/2 kernel with one lengthscale per input dimension, and either a
constant mean or the exponential trend ``beta * exp(sum_i w_i x_i) - gamma``
with ``beta = exp(beta_raw)`` and ``w_i = exp(w_raw_i)``. Inputs are expected
on the unit cube.

Hyperparameters are handled as one unconstrained vector ``theta``::

    [log noise, log lengthscale_1..d, log outputscale, mean parameters]

where the mean parameters are ``[c]`` for the constant mean and
``[beta_raw, w_raw_1..d, gamma]`` for the exponential one, giving
``2d + 4`` entries in the exponential case.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg, optimize

log = logging.getLogger(__name__)

SQRT5 = math.sqrt(5.0)
EXP_CLAMP = 40.0
KERNEL_BOX = (1e-3, 1e3)
NOISE_BOX = (1e-8, 1e-2)
BETA_RAW_BOX = (-20.0, 6.0)
W_RAW_BOX = (-12.0, 4.0)
MAX_JITTER = 1e-4


class GpNumericalError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class KernelParams:
    outputscale: float
    lengthscales: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lengthscales", np.asarray(self.lengthscales, dtype=float))


@dataclass(frozen=True)
class MeanParams:
    """``variant`` is ``"constant"`` or ``"exponential"``.

    For the exponential variant ``beta_raw`` and ``w_raw`` are stored in log
    space; :attr:`beta` and :attr:`w` give the realized positive values.
    """

    variant: str = "constant"
    constant: float = 0.0
    beta_raw: float = 0.0
    w_raw: np.ndarray = None
    gamma: float = 0.0

    def __post_init__(self):
        if self.variant not in ("constant", "exponential"):
            raise ValueError(f"unknown mean variant {self.variant!r}")
        if self.w_raw is not None:
            object.__setattr__(self, "w_raw", np.asarray(self.w_raw, dtype=float))

    @property
    def beta(self) -> float:
        return math.exp(self.beta_raw)

    @property
    def w(self) -> np.ndarray:
        return np.exp(self.w_raw)

    def n_params(self, d: int) -> int:
        return 1 if self.variant == "constant" else d + 2


def matern52(x1, x2, params: KernelParams) -> np.ndarray:
    """Kernel matrix between the rows of ``x1`` and ``x2``."""
    x1 = np.atleast_2d(x1) / params.lengthscales
    x2 = np.atleast_2d(x2) / params.lengthscales
    sq = (x1**2).sum(1)[:, None] + (x2**2).sum(1)[None, :] - 2.0 * x1 @ x2.T
    dist = np.sqrt(np.maximum(sq, 0.0))
    return params.outputscale * (1.0 + SQRT5 * dist + 5.0 / 3.0 * dist**2) * np.exp(-SQRT5 * dist)


def kernel_eval(x, x2, params: KernelParams) -> float:
    return float(matern52(np.atleast_1d(x)[None, :], np.atleast_1d(x2)[None, :], params)[0, 0])


def _mean_parts(x, mean: MeanParams):
    """Mean values and the clamped exponential term (None for constant means)."""
    x = np.atleast_2d(x)
    if mean.variant == "constant":
        return np.full(len(x), mean.constant), None, None
    z = x @ mean.w
    clamped = z >= EXP_CLAMP
    e = np.exp(np.minimum(z, EXP_CLAMP))
    return mean.beta * e - mean.gamma, e, clamped


def mean_eval(x, mean: MeanParams):
    """Prior mean at one point (1-d input) or at each row of a matrix."""
    x = np.asarray(x, dtype=float)
    vals = _mean_parts(x, mean)[0]
    return float(vals[0]) if x.ndim <= 1 else vals


def _mean_grad_theta(x, mean: MeanParams) -> np.ndarray:
    """d m(x_i) / d mean-parameters, shape (n, n_mean)."""
    x = np.atleast_2d(x)
    if mean.variant == "constant":
        return np.ones((len(x), 1))
    _, e, clamped = _mean_parts(x, mean)
    be = mean.beta * e
    dw = np.where(clamped[:, None], 0.0, be[:, None] * x * mean.w[None, :])
    return np.column_stack([be, dw, -np.ones(len(x))])


def _mean_grad_x(x, mean: MeanParams) -> np.ndarray:
    """Gradient of the prior mean w.r.t. a single input point."""
    if mean.variant == "constant":
        return np.zeros(len(x))
    _, e, clamped = _mean_parts(x, mean)
    if clamped[0]:
        return np.zeros(len(x))
    return mean.beta * e[0] * mean.w


@dataclass(frozen=True, eq=False)
class Posterior:
    mean: np.ndarray
    variance: np.ndarray


@dataclass(frozen=True, eq=False)
class GpModel:
    """GP conditioned on ``(inputs, targets)``; immutable once built."""

    inputs: np.ndarray
    targets: np.ndarray
    noise: float
    kernel: KernelParams
    mean: MeanParams
    fit_ok: bool = True
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=float).reshape(-1, len(self.kernel.lengthscales))
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", np.asarray(self.targets, dtype=float).ravel())

    @property
    def n(self) -> int:
        return len(self.targets)

    @property
    def d(self) -> int:
        return len(self.kernel.lengthscales)

    def _factor(self):
        if "chol" not in self._cache:
            k = matern52(self.inputs, self.inputs, self.kernel)
            chol, jitter = _cholesky(k, self.noise)
            resid = self.targets - _mean_parts(self.inputs, self.mean)[0]
            alpha = linalg.cho_solve((chol, True), resid)
            self._cache.update(chol=chol, jitter=jitter, alpha=alpha, resid=resid, gram=k)
        return self._cache["chol"], self._cache["alpha"]

    def posterior(self, x) -> Posterior:
        """Posterior mean and variance at the rows of ``x``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        prior_mean = _mean_parts(x, self.mean)[0]
        prior_var = np.full(len(x), self.kernel.outputscale)
        if self.n == 0:
            return Posterior(prior_mean, prior_var)
        chol, alpha = self._factor()
        ks = matern52(self.inputs, x, self.kernel)
        v = linalg.solve_triangular(chol, ks, lower=True)
        var = np.maximum(prior_var - (v**2).sum(0), 0.0)
        return Posterior(prior_mean + ks.T @ alpha, var)

    def joint_posterior(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean vector and full covariance matrix over the rows of ``x``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        prior_mean = _mean_parts(x, self.mean)[0]
        kxx = matern52(x, x, self.kernel)
        if self.n == 0:
            return prior_mean, kxx
        chol, alpha = self._factor()
        ks = matern52(self.inputs, x, self.kernel)
        v = linalg.solve_triangular(chol, ks, lower=True)
        return prior_mean + ks.T @ alpha, kxx - v.T @ v

    def predict_with_grad(self, x):
        """Mean, d mean/dx, smoothed std and d std/dx at a single point.

        The standard deviation is ``sqrt(var + 1e-12)`` so that it stays
        differentiable where the variance vanishes.
        """
        x = np.asarray(x, dtype=float).ravel()
        m0 = _mean_parts(x, self.mean)[0][0]
        dm = _mean_grad_x(x, self.mean)
        var, dvar = self.kernel.outputscale, np.zeros(self.d)
        if self.n:
            chol, alpha = self._factor()
            diff = x[None, :] - self.inputs
            scaled = diff / self.kernel.lengthscales
            dist = np.sqrt((scaled**2).sum(1))
            kvec = self.kernel.outputscale * (1 + SQRT5 * dist + 5 / 3 * dist**2) * np.exp(-SQRT5 * dist)
            # dk/dx = -s2 * 5/3 (1 + sqrt5 r) exp(-sqrt5 r) * diff / l^2
            g = -self.kernel.outputscale * 5.0 / 3.0 * (1 + SQRT5 * dist) * np.exp(-SQRT5 * dist)
            jac = g[:, None] * diff / self.kernel.lengthscales**2
            m0 = m0 + kvec @ alpha
            dm = dm + jac.T @ alpha
            kinv_k = linalg.cho_solve((chol, True), kvec)
            var = var - kvec @ kinv_k
            dvar = -2.0 * jac.T @ kinv_k
        var = max(var, 0.0)
        s = math.sqrt(var + 1e-12)
        return float(m0), dm, s, dvar / (2.0 * s)

    def with_data(self, inputs, targets) -> GpModel:
        return replace(self, inputs=inputs, targets=targets, _cache={})

    def to_dict(self) -> dict:
        out = {
            "noise": self.noise,
            "outputscale": self.kernel.outputscale,
            "lengthscales": self.kernel.lengthscales.tolist(),
            "mean": self.mean.variant,
            "fit_ok": self.fit_ok,
        }
        if self.mean.variant == "constant":
            out["constant"] = self.mean.constant
        else:
            out.update(beta=self.mean.beta, w=self.mean.w.tolist(), gamma=self.mean.gamma)
        return out


def _cholesky(k, noise: float):
    n = len(k)
    jitter = 0.0
    while True:
        try:
            chol = linalg.cholesky(k + (noise + jitter) * np.eye(n), lower=True)
            return chol, jitter
        except linalg.LinAlgError:
            jitter = 1e-10 if jitter == 0.0 else jitter * 10.0
            if jitter > MAX_JITTER:
                raise GpNumericalError("Gram matrix not positive definite after jitter") from None


def posterior(model: GpModel, x) -> Posterior:
    return model.posterior(x)


# -- hyperparameter vector ------------------------------------------------

def pack(model: GpModel) -> np.ndarray:
    m = model.mean
    head = [math.log(model.noise), *np.log(model.kernel.lengthscales), math.log(model.kernel.outputscale)]
    if m.variant == "constant":
        return np.array(head + [m.constant])
    return np.array(head + [m.beta_raw, *m.w_raw, m.gamma])


def unpack(theta, template: GpModel) -> GpModel:
    d = template.d
    theta = np.asarray(theta, dtype=float)
    kernel = KernelParams(float(np.exp(theta[d + 1])), np.exp(theta[1:d + 1]))
    if template.mean.variant == "constant":
        mean = MeanParams("constant", constant=float(theta[d + 2]))
    else:
        mean = MeanParams(
            "exponential", beta_raw=float(theta[d + 2]), w_raw=theta[d + 3:2 * d + 3],
            gamma=float(theta[2 * d + 3]),
        )
    return GpModel(template.inputs, template.targets, float(np.exp(theta[0])), kernel, mean)


def theta_bounds(template: GpModel) -> list[tuple]:
    d = template.d
    lo, hi = np.log(KERNEL_BOX)
    b = [tuple(np.log(NOISE_BOX))] + [(lo, hi)] * (d + 1)
    if template.mean.variant == "constant":
        return b + [(None, None)]
    return b + [BETA_RAW_BOX] + [W_RAW_BOX] * d + [(None, None)]


def log_marginal_likelihood(model: GpModel, with_grad: bool = False):
    """Gaussian log marginal likelihood of the targets; optionally its gradient w.r.t. theta."""
    if model.n < 1:
        raise ValueError("need at least one observation")
    chol, alpha = model._factor()
    resid = model._cache["resid"]
    n, d = model.n, model.d
    mll = -0.5 * resid @ alpha - np.log(np.diag(chol)).sum() - 0.5 * n * math.log(2 * math.pi)
    if not with_grad:
        return float(mll)
    kinv = linalg.cho_solve((chol, True), np.eye(n))
    w = np.outer(alpha, alpha) - kinv
    x = model.inputs
    s2 = model.kernel.outputscale
    ell = model.kernel.lengthscales
    scaled = x / ell
    sq = (scaled**2).sum(1)[:, None] + (scaled**2).sum(1)[None, :] - 2 * scaled @ scaled.T
    dist = np.sqrt(np.maximum(sq, 0.0))
    gram = model._cache["gram"]
    common = s2 * 5.0 / 3.0 * (1 + SQRT5 * dist) * np.exp(-SQRT5 * dist)
    grad = np.empty(len(pack(model)))
    grad[0] = 0.5 * model.noise * np.trace(w)
    for i in range(d):
        dk = common * (x[:, i][:, None] - x[:, i][None, :]) ** 2 / ell[i] ** 2
        grad[1 + i] = 0.5 * np.sum(w * dk)
    grad[d + 1] = 0.5 * np.sum(w * gram)
    grad[d + 2:] = _mean_grad_theta(x, model.mean).T @ alpha
    return float(mll), grad


def default_model(inputs, targets, mean_variant: str = "constant") -> GpModel:
    """Model with the standard initial hyperparameters for the given data."""
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    y = np.asarray(targets, dtype=float).ravel()
    d = x.shape[1]
    var = float(np.var(y)) if len(y) > 1 else 1.0
    kernel = KernelParams(float(np.clip(var, *KERNEL_BOX)), np.full(d, 0.3))
    if mean_variant == "constant":
        mean = MeanParams("constant", constant=float(np.mean(y)) if len(y) else 0.0)
    else:
        mean = _initial_exp_mean(x, y)
    return GpModel(x, y, 1e-4, kernel, mean)


def _initial_exp_mean(x, y, eps: float = 1e-3) -> MeanParams:
    """Log-linear least squares on the shifted targets.

    The shift keeps the smallest target ``eps`` above zero.
    """
    d = x.shape[1]
    if len(y) == 0:
        return MeanParams("exponential", beta_raw=0.0, w_raw=np.zeros(d), gamma=0.0)
    lo = float(y.min())
    t = np.maximum(y - lo + eps, eps)
    design = np.column_stack([np.ones(len(y)), x])
    coef = np.linalg.lstsq(design, np.log(t), rcond=None)[0]
    w = np.clip(coef[1:], 1e-3, None)
    return MeanParams(
        "exponential",
        beta_raw=float(np.clip(coef[0], *BETA_RAW_BOX)),
        w_raw=np.clip(np.log(w), *W_RAW_BOX),
        gamma=eps - lo,
    )


def fit_hyperparameters(
    model: GpModel, restarts: int = 5, seed: int = 0, maxiter: int = 200
) -> GpModel:
    """Maximize the marginal likelihood by multi-start L-BFGS-B in theta space.

    The first start is ``model``'s own hyperparameters; the others perturb it
    randomly (deterministic in ``seed``). On total failure the input
    hyperparameters are kept and ``fit_ok`` is False.
    """
    if model.n < 2:
        raise ValueError("need at least two observations to fit hyperparameters")
    rng = np.random.default_rng(seed)
    bounds = theta_bounds(model)
    lo = np.array([b[0] if b[0] is not None else -np.inf for b in bounds])
    hi = np.array([b[1] if b[1] is not None else np.inf for b in bounds])
    theta0 = np.clip(pack(model), lo, hi)
    d = model.d

    def negative(theta):
        if not np.all(np.isfinite(theta)):
            return 1e25, np.zeros_like(theta)
        try:
            val, grad = log_marginal_likelihood(unpack(theta, model), with_grad=True)
        except (np.linalg.LinAlgError, FloatingPointError, ValueError):
            return 1e25, np.zeros_like(theta)
        if not np.isfinite(val) or not np.all(np.isfinite(grad)):
            return 1e25, np.zeros_like(theta)
        return -val, -grad

    best_val, best_theta = np.inf, None
    for i in range(max(restarts, 1)):
        start = theta0.copy()
        if i > 0:
            start[1:d + 2] += rng.normal(0.0, 1.0, d + 1)
            start[0] = rng.uniform(*np.log(NOISE_BOX))
            start[d + 2:] += rng.normal(0.0, 0.5, len(start) - d - 2)
            start = np.clip(start, lo, hi)
        with np.errstate(all="ignore"):
            res = optimize.minimize(
                negative, start, jac=True, method="L-BFGS-B", bounds=bounds,
                options={"maxiter": maxiter},
            )
        if np.isfinite(res.fun) and res.fun < 1e24 and res.fun < best_val and np.all(np.isfinite(res.x)):
            best_val, best_theta = res.fun, res.x
    if best_theta is None:
        log.warning("all %d hyperparameter restarts failed; keeping previous values", restarts)
        return replace(model, fit_ok=False, _cache={})
    return unpack(best_theta, model)
