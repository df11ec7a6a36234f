"""Cox-Gompertz proportional hazards and the logistic-regression baseline.

The hazard at age ``t`` is ``exp(a + gamma * t + beta @ x)``. Subjects enter
the risk set at ``entry_age`` (left truncation) and leave at ``exit_age``,
either with the event or censored.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, stats
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted


class SurvivalFitError(RuntimeError):
    pass


class NoEventsError(SurvivalFitError):
    pass


class ConvergenceError(SurvivalFitError):
    pass


class SingularHessianError(SurvivalFitError):
    pass


class CollinearityError(ValueError):
    pass


class SeparationError(SurvivalFitError):
    pass


@dataclass
class SurvivalRecord:
    subject_id: str
    entry_age: float
    exit_age: float
    event: bool
    covariates: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.exit_age > self.entry_age:
            raise ValueError(f"{self.subject_id}: exit_age must exceed entry_age")
        for k, v in self.covariates.items():
            if not math.isfinite(v):
                raise ValueError(f"{self.subject_id}: covariate {k} is not finite")


@dataclass
class CoxGompertzFit:
    intercept: float
    gamma: float
    coef: dict
    se: dict
    intercept_se: float
    gamma_se: float
    loglik: float
    n: int
    events: int
    covariate_names: tuple
    covariate_means: dict
    covariate_sds: dict
    converged: bool
    n_iter: int
    grad_max: float
    loglik_trace: list = field(default_factory=list, repr=False)

    def linear_predictor(self, X):
        """``beta @ x`` for rows of ``X`` (columns in ``covariate_names`` order)."""
        X = np.asarray(X, dtype=np.float64).reshape(-1, len(self.covariate_names))
        return X @ np.array([self.coef[c] for c in self.covariate_names])

    def log_hazard(self, age, X):
        return self.intercept + self.gamma * np.asarray(age, dtype=np.float64) + self.linear_predictor(X)


def _as_arrays(records, covariate_names):
    entry = np.array([r.entry_age for r in records], dtype=np.float64)
    exit_ = np.array([r.exit_age for r in records], dtype=np.float64)
    event = np.array([bool(r.event) for r in records], dtype=np.float64)
    X = np.array([[r.covariates[c] for c in covariate_names] for r in records], dtype=np.float64)
    return entry, exit_, event, X.reshape(len(records), len(covariate_names))


def _exposure(gamma, u0, u1):
    """Integrals of e^{gamma u} u^k over [u0, u1] for k = 0, 1, 2."""
    if abs(gamma) < 1e-6:
        nodes, weights = np.polynomial.legendre.leggauss(16)
        half = (u1 - u0) / 2.0
        mid = (u1 + u0) / 2.0
        s = mid[:, None] + half[:, None] * nodes[None, :]
        e = np.exp(gamma * s) * weights[None, :] * half[:, None]
        return e.sum(1), (e * s).sum(1), (e * s * s).sum(1)
    e1 = np.exp(gamma * u1)
    e0 = np.exp(gamma * u0)
    f0 = (e1 - e0) / gamma
    f1 = (u1 * e1 - u0 * e0) / gamma - f0 / gamma
    f2 = (u1 * u1 * e1 - u0 * u0 * e0) / gamma - 2.0 * f1 / gamma
    return f0, f1, f2


def _standardize(X, names):
    means = X.mean(axis=0) if X.shape[1] else np.zeros(0)
    sds = X.std(axis=0) if X.shape[1] else np.zeros(0)
    for name, sd in zip(names, sds):
        if not sd > 0:
            raise CollinearityError(f"covariate {name!r} is constant")
    Z = (X - means) / np.where(sds > 0, sds, 1.0)
    if X.shape[1] > 1:
        corr = np.corrcoef(Z, rowvar=False)
        cond = np.linalg.cond(corr)
        if not np.isfinite(cond) or cond > 1e10:
            raise CollinearityError(f"covariates are collinear (condition number {cond:.3g})")
    return Z, means, sds


def _newton(loglik_fn, theta0, tol, max_iter, jitter=1e-10):
    """Maximise with Newton steps and step halving.

    ``loglik_fn(theta, order)`` returns ll (order 0) or (ll, grad, hess).
    Returns theta, ll, grad, hess, n_iter, converged, trace.
    """
    theta = np.array(theta0, dtype=np.float64)
    ll, g, H = loglik_fn(theta, 2)
    trace = [ll]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(g)) < tol:
            converged = True
            it -= 1
            break
        A = -H
        try:
            step = np.linalg.solve(A, g)
        except np.linalg.LinAlgError:
            step = None
        if step is None or not np.all(np.isfinite(step)) or g @ step <= 0:
            A = A + jitter * max(1.0, np.abs(np.diag(A)).max()) * np.eye(len(theta))
            try:
                step = np.linalg.solve(A, g)
            except np.linalg.LinAlgError as exc:
                raise SingularHessianError("Hessian is singular") from exc
            if g @ step <= 0:
                raise SingularHessianError("Hessian is not negative definite")
        # Newton decrement below roundoff of ll: the gradient cannot shrink further
        if g @ step < 1e-14 * max(1.0, abs(ll)):
            converged = True
            it -= 1
            break
        t = 1.0
        for _ in range(60):
            cand = theta + t * step
            ll_new = loglik_fn(cand, 0)
            if np.isfinite(ll_new) and ll_new >= ll:
                break
            t /= 2.0
        else:
            # no ascent possible at machine precision: accept current point
            decrement = float(g @ step)
            converged = decrement < 1e-10 * max(1.0, abs(ll))
            break
        theta = cand
        ll, g, H = loglik_fn(theta, 2)
        trace.append(ll)
    else:
        converged = np.max(np.abs(g)) < tol
    return theta, ll, g, H, it, converged, trace


def fit_cox_gompertz_arrays(entry, exit_age, event, X=None, covariate_names=None,
                            tol=1e-8, max_iter=100):
    entry = np.asarray(entry, dtype=np.float64).reshape(-1)
    exit_age = np.asarray(exit_age, dtype=np.float64).reshape(-1)
    event = np.asarray(event, dtype=np.float64).reshape(-1)
    n = entry.size
    if X is None:
        X = np.zeros((n, 0))
    X = np.asarray(X, dtype=np.float64).reshape(n, -1)
    names = tuple(covariate_names) if covariate_names is not None else tuple(f"x{j}" for j in range(X.shape[1]))
    if len(names) != X.shape[1]:
        raise ValueError("covariate_names does not match the number of columns")
    if exit_age.size != n or event.size != n:
        raise ValueError("entry, exit_age and event must have equal length")
    if np.any(exit_age <= entry):
        raise ValueError("exit_age must exceed entry_age for every record")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(entry)) and np.all(np.isfinite(exit_age))):
        raise ValueError("non-finite input")
    n_events = int(event.sum())
    if n_events == 0:
        raise NoEventsError("no events")
    if n_events < 2:
        raise NoEventsError("at least two events are required")
    Z, means, sds = _standardize(X, names)
    t_ref = float(np.round(entry.mean()))
    u0, u1 = entry - t_ref, exit_age - t_ref
    p = Z.shape[1]
    D = np.hstack([np.ones((n, 1)), Z])
    d_u1 = float(event @ u1)
    d_D = event @ D

    def loglik(theta, order):
        alpha_b = theta[[0] + list(range(2, 2 + p))]
        gamma = theta[1]
        eta = D @ alpha_b
        f0, f1, f2 = _exposure(gamma, u0, u1)
        w = np.exp(eta)
        ll = float(d_D @ alpha_b + gamma * d_u1 - w @ f0)
        if order == 0:
            return ll
        wf0 = w * f0
        g_ab = d_D - D.T @ wf0
        g_gamma = d_u1 - w @ f1
        H_ab = -(D.T * wf0) @ D
        H_abg = -D.T @ (w * f1)
        H_gg = -(w @ f2)
        k = 2 + p
        grad = np.empty(k)
        hess = np.empty((k, k))
        ab_idx = [0] + list(range(2, k))
        grad[ab_idx] = g_ab
        grad[1] = g_gamma
        hess[np.ix_(ab_idx, ab_idx)] = H_ab
        hess[ab_idx, 1] = H_abg
        hess[1, ab_idx] = H_abg
        hess[1, 1] = H_gg
        return ll, grad, hess

    gamma0 = 0.08
    f0, _, _ = _exposure(gamma0, u0, u1)
    theta0 = np.zeros(2 + p)
    theta0[0] = math.log(n_events / f0.sum())
    theta0[1] = gamma0
    theta, ll, g, H, n_iter, converged, trace = _newton(loglik, theta0, tol, max_iter)
    if not converged:
        raise ConvergenceError(
            f"Cox-Gompertz fit did not converge in {max_iter} iterations (max |grad| = {np.max(np.abs(g)):.3g})")
    try:
        cov_std = np.linalg.inv(-H)
    except np.linalg.LinAlgError as exc:
        raise SingularHessianError("Hessian is singular at the optimum") from exc
    # map (alpha, gamma, b) -> (a, gamma, beta)
    k = 2 + p
    J = np.zeros((k, k))
    J[0, 0] = 1.0
    J[0, 1] = -t_ref
    J[1, 1] = 1.0
    for j in range(p):
        J[0, 2 + j] = -means[j] / sds[j]
        J[2 + j, 2 + j] = 1.0 / sds[j]
    est = J @ theta
    cov = J @ cov_std @ J.T
    se = np.sqrt(np.clip(np.diag(cov), 0, None))
    return CoxGompertzFit(
        intercept=float(est[0]),
        gamma=float(est[1]),
        coef={nm: float(est[2 + j]) for j, nm in enumerate(names)},
        se={nm: float(se[2 + j]) for j, nm in enumerate(names)},
        intercept_se=float(se[0]),
        gamma_se=float(se[1]),
        loglik=float(ll),
        n=int(n),
        events=n_events,
        covariate_names=names,
        covariate_means={nm: float(means[j]) for j, nm in enumerate(names)},
        covariate_sds={nm: float(sds[j]) for j, nm in enumerate(names)},
        converged=bool(converged),
        n_iter=int(n_iter),
        grad_max=float(np.max(np.abs(g))),
        loglik_trace=trace,
    )


def fit_cox_gompertz(records, covariate_names=(), tol=1e-8, max_iter=100) -> CoxGompertzFit:
    """Maximum-likelihood Cox-Gompertz fit on :class:`SurvivalRecord` objects."""
    covariate_names = tuple(covariate_names)
    entry, exit_, event, X = _as_arrays(list(records), covariate_names)
    return fit_cox_gompertz_arrays(entry, exit_, event, X, covariate_names, tol, max_iter)


def likelihood_ratio_test(fit_nested, fit_full, atol=1e-8):
    """Two-sided chi-square LR test; returns ``(statistic, df, p_value)``."""
    if not set(fit_nested.covariate_names) <= set(fit_full.covariate_names):
        raise ValueError("covariates of the nested fit must be a subset of the full fit")
    if fit_nested.n != fit_full.n:
        raise ValueError("fits must use the same records")
    stat = 2.0 * (fit_full.loglik - fit_nested.loglik)
    if stat < -2.0 * atol:
        raise SurvivalFitError("full model log-likelihood below nested model: optimizer failure")
    stat = max(stat, 0.0)
    df = len(fit_full.covariate_names) - len(fit_nested.covariate_names)
    if df == 0:
        return stat, 0, 1.0
    return stat, df, float(stats.chi2.sf(stat, df))


def hazard_ratio(fit: CoxGompertzFit, covariate, per_sd=1.0, unit=None):
    """Hazard ratio per ``per_sd`` standard deviations (or per ``unit`` if given)."""
    if covariate not in fit.coef:
        raise KeyError(f"unknown covariate {covariate!r}")
    step = unit if unit is not None else per_sd * fit.covariate_sds[covariate]
    return float(math.exp(fit.coef[covariate] * step))


def doubling_time(gamma):
    if not gamma > 0:
        raise ValueError("doubling time needs gamma > 0")
    return math.log(2.0) / gamma


def gompertz_survival(t, log_rate0, gamma):
    """S(t) = exp(-exp(log_rate0) * (e^{gamma t} - 1) / gamma)."""
    t = np.asarray(t, dtype=np.float64)
    with np.errstate(over="ignore"):
        return np.exp(-math.exp(log_rate0) * np.expm1(gamma * t) / gamma)


def gompertz_mean_time(fit_or_intercept, covariates=None, gamma=None, rtol=1e-8):
    """Expected event age from birth, integrating the survival function."""
    if isinstance(fit_or_intercept, CoxGompertzFit):
        fit = fit_or_intercept
        gamma = fit.gamma
        lp = 0.0
        if covariates is not None:
            if isinstance(covariates, dict):
                lp = sum(fit.coef[k] * v for k, v in covariates.items())
            else:
                lp = float(fit.linear_predictor(covariates)[0])
        log_rate0 = fit.intercept + lp
    else:
        log_rate0 = float(fit_or_intercept)
    if gamma is None or not gamma > 0:
        raise ValueError("gompertz_mean_time needs gamma > 0")
    # split at the mode-ish point so quad sees the sharp drop
    t_star = max(0.0, (math.log(gamma) - log_rate0) / gamma)
    f = lambda t: float(gompertz_survival(t, log_rate0, gamma))
    a, _ = integrate.quad(f, 0.0, t_star, epsrel=rtol, epsabs=0, limit=200) if t_star > 0 else (0.0, 0)
    b, _ = integrate.quad(f, t_star, np.inf, epsrel=rtol, epsabs=0, limit=200)
    return a + b


def sample_gompertz(rng, log_rate, gamma, start=0.0, size=None):
    """Inverse-transform draws of event age given survival to ``start``."""
    log_rate = np.asarray(log_rate, dtype=np.float64)
    e = rng.exponential(size=size if size is not None else log_rate.shape)
    start = np.asarray(start, dtype=np.float64)
    # H(start, T) = exp(log_rate) (e^{gT} - e^{g start}) / g = E
    return np.log(np.exp(gamma * start) + gamma * e * np.exp(-log_rate)) / gamma


@dataclass
class LogisticFit:
    intercept: float
    coef: np.ndarray
    se: np.ndarray
    loglik: float
    linear_predictor: np.ndarray
    converged: bool
    n_iter: int


def fit_logistic(labels, covariates=None, tol=1e-8, max_iter=100) -> LogisticFit:
    """Maximum-likelihood logistic regression by Newton iterations."""
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    n = y.size
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    if y.min() == y.max():
        raise ValueError("both classes must be present")
    X = np.zeros((n, 0)) if covariates is None else np.asarray(covariates, dtype=np.float64).reshape(n, -1)
    names = [f"x{j}" for j in range(X.shape[1])]
    Z, means, sds = _standardize(X, names)
    D = np.hstack([np.ones((n, 1)), Z])

    def loglik(theta, order):
        eta = D @ theta
        ll = float(y @ eta - np.logaddexp(0.0, eta).sum())
        if order == 0:
            return ll
        p = 0.5 * (1.0 + np.tanh(0.5 * eta))
        grad = D.T @ (y - p)
        hess = -(D.T * (p * (1 - p))) @ D
        return ll, grad, hess

    theta0 = np.zeros(D.shape[1])
    theta0[0] = math.log(y.mean() / (1 - y.mean()))
    try:
        theta, ll, g, H, n_iter, converged, _ = _newton(loglik, theta0, tol, max_iter)
    except SingularHessianError as exc:
        raise SeparationError("logistic fit failed: complete separation suspected") from exc
    eta = D @ theta
    if np.max(np.abs(theta[1:]), initial=0.0) > 30 or (ll > -1e-6):
        raise SeparationError("complete or quasi-complete separation of the classes")
    if not converged:
        raise ConvergenceError(f"logistic fit did not converge in {max_iter} iterations")
    cov_std = np.linalg.inv(-H)
    p = X.shape[1]
    J = np.eye(1 + p)
    for j in range(p):
        J[0, 1 + j] = -means[j] / sds[j]
        J[1 + j, 1 + j] = 1.0 / sds[j]
    est = J @ theta
    se = np.sqrt(np.clip(np.diag(J @ cov_std @ J.T), 0, None))
    return LogisticFit(float(est[0]), est[1:], se[1:], ll, eta, bool(converged), int(n_iter))


@dataclass
class EquivalenceReport:
    correlation: float
    prevalence: float
    n: int
    relative_differences: dict
    cox_linear_predictor: np.ndarray = field(repr=False)
    logistic_linear_predictor: np.ndarray = field(repr=False)


def rare_event_equivalence(records, covariate_names=()) -> EquivalenceReport:
    """Compare Cox-Gompertz and logistic linear predictors on the same cohort.

    The Cox predictor is ``a + gamma * entry_age + beta @ x``; the logistic
    model regresses the event flag on entry age and the same covariates.
    """
    records = list(records)
    covariate_names = tuple(covariate_names)
    entry, exit_, event, X = _as_arrays(records, covariate_names)
    fit = fit_cox_gompertz_arrays(entry, exit_, event, X, covariate_names)
    cox_lp = fit.intercept + fit.gamma * entry + fit.linear_predictor(X)
    logit = fit_logistic(event, np.column_stack([entry, X]))
    log_lp = logit.linear_predictor
    if np.ptp(cox_lp) == 0 or np.ptp(log_lp) == 0:
        corr = 1.0
    else:
        corr = float(np.corrcoef(cox_lp, log_lp)[0, 1])
    rel = {"age": _rel(logit.coef[0], fit.gamma)}
    for j, nm in enumerate(covariate_names):
        rel[nm] = _rel(logit.coef[1 + j], fit.coef[nm])
    return EquivalenceReport(corr, float(event.mean()), len(records), rel, cox_lp, log_lp)


def _rel(a, b):
    return float(abs(a - b) / abs(b)) if b != 0 else float("inf")


class CoxGompertzRegressor(BaseEstimator):
    """Estimator wrapper: ``fit(X, entry_age, exit_age, event)``.

    ``predict`` returns the log relative hazard ``beta @ x``;
    ``predict_log_hazard`` adds the Gompertz baseline at a given age.
    """

    def __init__(self, tol=1e-8, max_iter=100, covariate_names=None):
        self.tol = tol
        self.max_iter = max_iter
        self.covariate_names = covariate_names

    def fit(self, X, entry_age, exit_age, event):
        X = check_array(X, ensure_min_features=0, dtype=np.float64)
        names = self.covariate_names or [f"x{j}" for j in range(X.shape[1])]
        self.fit_ = fit_cox_gompertz_arrays(entry_age, exit_age, event, X, names, self.tol, self.max_iter)
        self.coef_ = np.array([self.fit_.coef[c] for c in self.fit_.covariate_names])
        self.intercept_ = self.fit_.intercept
        self.gamma_ = self.fit_.gamma
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "fit_")
        X = check_array(X, ensure_min_features=0, dtype=np.float64)
        return X @ self.coef_

    def predict_log_hazard(self, X, age):
        return self.intercept_ + self.gamma_ * np.asarray(age, dtype=np.float64) + self.predict(X)

    def score(self, X, entry_age, exit_age, event):
        """Mean log-likelihood per record under the fitted model."""
        check_is_fitted(self, "fit_")
        eta = self.intercept_ + self.predict(X)
        f0, _, _ = _exposure(self.gamma_, np.asarray(entry_age, float), np.asarray(exit_age, float))
        event = np.asarray(event, dtype=np.float64)
        ll = event @ (eta + self.gamma_ * np.asarray(exit_age, float)) - np.exp(eta) @ f0
        return float(ll / len(event))
