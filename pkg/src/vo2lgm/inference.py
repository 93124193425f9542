"""Posterior computation for the latent Gaussian model.

With a Gaussian likelihood of fixed precision ``tau`` the conditional
posterior of the latent field given the hyperparameters is Gaussian with
precision ``Q* = Q(theta) + tau A^T A`` and mean solving
``Q* m = tau A^T y``; no iterative Laplace step is needed.

``Q*`` has arrowhead structure: a tridiagonal block over the O-U states
(one per observation) and a small block over the effects (fixed effects,
session and patient deviations). The O-U states are eliminated first, which
creates no fill, and the effects block is handled through its dense Schur
complement. Because ``tau`` is huge (``e^15``) the Schur complement is formed
as ``Q_d + tau A_d^T M A_d`` with ``M = (Q_ou + tau I)^{-1} Q_ou``; the naive
``tau A_d^T A_d - tau^2 A_d^T (Q_ou + tau I)^{-1} A_d`` cancels catastrophically.
"""

from __future__ import annotations

import itertools
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, sparse
from scipy.optimize import brentq
from scipy.special import ndtr

from .dataset import ModelFrame
from .lgm import (
    HYPER_NAMES,
    HyperParams,
    LatentLayout,
    PriorSpec,
    effects_prior_diag,
    layout,
    log_hyperprior_terms,
    ou_bands,
    prior_logdet,
    session_times,
)

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


class FactorizationError(RuntimeError):
    pass


class GridWarning(UserWarning):
    pass


def tridiag_matmul(diag, off, x):
    """``T @ x`` for symmetric tridiagonal ``T`` given by its diagonal and off-diagonal."""
    x = np.asarray(x, dtype=float)
    d = diag if x.ndim == 1 else diag[:, None]
    out = d * x
    if off.size:
        o = off if x.ndim == 1 else off[:, None]
        out[:-1] += o * x[1:]
        out[1:] += o * x[:-1]
    return out


def banded_inverse_diag(chol):
    """Diagonal of ``(U^T U)^{-1}`` for upper bidiagonal ``U`` in LAPACK band form."""
    u = chol[1]
    v = chol[0, 1:]
    n = u.size
    out = np.empty(n)
    out[-1] = 1.0 / u[-1] ** 2
    for i in range(n - 2, -1, -1):
        r = v[i] / u[i]
        out[i] = 1.0 / u[i] ** 2 + r * r * out[i + 1]
    return out


class ModelStructure:
    """Data-dependent pieces shared by every hyperparameter point."""

    def __init__(self, frame: ModelFrame, priors: PriorSpec, lay: LatentLayout | None = None):
        self.frame = frame
        self.priors = priors
        self.layout = lay if lay is not None else layout(frame)
        self.times = session_times(frame)
        lay = self.layout
        n, pf = frame.n, lay.n_fixed
        self.local = np.column_stack([frame.X, np.ones(n), frame.log_vt])
        cols = np.column_stack(
            [
                np.tile(np.arange(pf), (n, 1)),
                lay.sessions.start + frame.session_index,
                lay.patients.start + frame.patient_index,
            ]
        )
        self._indices = cols.ravel()
        self._indptr = np.arange(0, n * (pf + 2) + 1, pf + 2)
        self.A_eff = self.sparse_like(self.local)
        self.y = frame.y
        self.tau = 0.0 if frame.y is None else priors.obs_precision

    def sparse_like(self, values):
        """CSR matrix with the effect-block sparsity pattern of ``A`` and the given per-row values."""
        return sparse.csr_matrix(
            (np.ascontiguousarray(values).ravel(), self._indices, self._indptr),
            shape=(self.frame.n, self.layout.n_effects),
        )


@dataclass
class ConditionalGaussian:
    """Gaussian conditional ``x | theta, y`` in factorised form."""

    theta: HyperParams
    structure: ModelStructure = field(repr=False)
    mean: np.ndarray = field(repr=False)
    chol_ss: np.ndarray = field(repr=False)
    chol_S: np.ndarray = field(repr=False)
    logdet_prior: float
    logdet_post: float
    quad: float
    log_hyperprior: float
    log_marginal: float
    _S_inv: np.ndarray | None = field(default=None, repr=False)

    @property
    def psi(self):
        return self.theta.to_log()

    @property
    def layout(self):
        return self.structure.layout

    def effects_cov(self):
        """Covariance of the effects block, ``S^{-1}``."""
        if self._S_inv is None:
            p = self.chol_S.shape[0]
            self._S_inv = linalg.cho_solve((self.chol_S, True), np.eye(p))
        return self._S_inv

    def _coupling(self):
        """Per-row values of ``M A_d`` in the ``A_d`` pattern."""
        st = self.structure
        diag, off = ou_bands(st.times, self.theta)
        return linalg.cho_solve_banded((self.chol_ss, False), tridiag_matmul(diag, off, st.local))

    def marginal_variances(self, include_ou=True):
        eff = np.diag(self.effects_cov()).copy()
        if not include_ou:
            return eff
        st = self.structure
        if st.tau == 0.0:
            G = st.sparse_like(np.zeros_like(st.local))
        else:
            G = st.sparse_like(st.local - self._coupling())
        GS = np.asarray(G @ self.effects_cov())
        quad = np.asarray(G.multiply(GS).sum(axis=1)).ravel()
        return np.concatenate([eff, banded_inverse_diag(self.chol_ss) + quad])

    def linear_predictor_variance(self):
        """``Var(eta_r | theta, y)`` for the fitted rows."""
        st = self.structure
        W = st.sparse_like(self._coupling())
        WS = np.asarray(W @ self.effects_cov())
        return np.asarray(W.multiply(WS).sum(axis=1)).ravel() + banded_inverse_diag(self.chol_ss)

    def sample(self, n, rng, include_ou=True):
        """Draw ``n`` latent vectors; returns shape ``(n, dim)`` or ``(n, n_effects)``."""
        lay = self.layout
        p = lay.n_effects
        w = rng.standard_normal((p, n))
        dev_d = linalg.solve_triangular(self.chol_S, w, lower=True, trans="T")
        x_d = self.mean[:p, None] + dev_d
        if not include_ou:
            return x_d.T
        st = self.structure
        w_s = rng.standard_normal((lay.n_obs, n))
        dev_s = linalg.solve_banded((0, 1), self.chol_ss, w_s)
        if st.tau != 0.0:
            G = st.sparse_like(st.local - self._coupling())
            dev_s = dev_s - G @ dev_d
        x_s = self.mean[p:, None] + dev_s
        return np.vstack([x_d, x_s]).T


def conditional(theta: HyperParams, frame: ModelFrame | None = None, lay=None, priors=None, structure=None):
    """Exact Gaussian conditional of the latent field at ``theta``.

    Pass either ``frame`` (and optionally ``lay``/``priors``) or a prebuilt
    :class:`ModelStructure`. A frame without responses yields the prior.
    """
    if structure is None:
        structure = ModelStructure(frame, priors if priors is not None else PriorSpec(), lay)
    st = structure
    lay = st.layout
    tau = st.tau
    n = lay.n_obs

    diag, off = ou_bands(st.times, theta)
    band = np.zeros((2, n))
    band[0, 1:] = off
    band[1] = diag + tau
    try:
        chol_ss = linalg.cholesky_banded(band, lower=False)
    except linalg.LinAlgError as exc:
        raise FactorizationError(f"O-U block factorisation failed at {theta}") from exc

    q_d = effects_prior_diag(lay, theta, st.priors)
    S = np.diag(q_d)
    if tau != 0.0:
        W = linalg.cho_solve_banded((chol_ss, False), tridiag_matmul(diag, off, st.local))
        Ws = st.sparse_like(W)
        S = S + tau * (st.A_eff.T @ Ws).toarray()
        S = 0.5 * (S + S.T)
    try:
        chol_S = linalg.cholesky(S, lower=True)
    except linalg.LinAlgError as exc:
        raise FactorizationError(f"effects block factorisation failed at {theta}") from exc

    p = lay.n_effects
    mean = np.zeros(lay.dim)
    quad = 0.0
    if tau != 0.0:
        y = st.y
        rhs = tau * (Ws.T @ y)
        m_d = linalg.cho_solve((chol_S, True), rhs)
        u = y - st.A_eff @ m_d
        m_s = tau * linalg.cho_solve_banded((chol_ss, False), u)
        resid = linalg.cho_solve_banded((chol_ss, False), tridiag_matmul(diag, off, u))
        mean[:p] = m_d
        mean[p:] = m_s
        quad = float(m_d @ (q_d * m_d) + m_s @ tridiag_matmul(diag, off, m_s) + tau * resid @ resid)

    logdet_prior = prior_logdet(lay, theta, st.priors, st.times)
    logdet_S = 2.0 * np.sum(np.log(np.diag(chol_S)))
    if tau != 0.0:
        # log|Q_ss| - n log(tau), summed in a form that keeps the O(1) part exact
        logdet_ss_rel = 2.0 * np.sum(np.log(chol_ss[1] / np.sqrt(tau)))
        log_tau = np.log(tau)
    else:
        logdet_ss_rel = 2.0 * np.sum(np.log(chol_ss[1]))
        log_tau = 0.0
    logdet_post = logdet_ss_rel + n * log_tau + logdet_S
    lhp = float(np.sum(log_hyperprior_terms(theta.to_log(), st.priors)))
    if tau != 0.0:
        log_lik_marg = 0.5 * (logdet_prior - logdet_ss_rel - logdet_S - quad) - 0.5 * n * LOG_2PI
    else:
        log_lik_marg = 0.0
    return ConditionalGaussian(
        theta=theta,
        structure=st,
        mean=mean,
        chol_ss=chol_ss,
        chol_S=chol_S,
        logdet_prior=logdet_prior,
        logdet_post=float(logdet_post),
        quad=quad,
        log_hyperprior=lhp,
        log_marginal=float(lhp + log_lik_marg),
    )


def log_marginal(theta, frame=None, lay=None, priors=None, structure=None):
    """Unnormalised ``log pi(theta | y)``: log hyperprior plus the exact log evidence.

    The constant ``const(y, tau)`` is included, so the value is the full
    ``log pi(theta) + log pi(y | theta)``.
    """
    return conditional(theta, frame, lay, priors, structure).log_marginal


@dataclass(frozen=True)
class InferenceConfig:
    fd_step: float = 1e-4
    hessian_step: float = 1e-3
    max_iter: int = 50
    gtol: float = 1e-5
    step_tol: float = 1e-7
    max_newton_step: float = 2.0
    grid_step: float = 1.0
    grid_threshold: float = 2.5
    max_axis_steps: int = 8
    n_jobs: int = 1
    init: tuple = (10.0, 10.0, 50.0, 0.1)


@dataclass
class ModeResult:
    psi: np.ndarray
    log_post: float
    hessian: np.ndarray
    gradient: np.ndarray
    iterations: int
    converged: bool
    history: list
    hessian_definite: bool

    @property
    def theta(self):
        return HyperParams.from_log(self.psi)


def _fd_gradient(f, x, f0, h):
    g = np.empty(x.size)
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def _fd_hessian(f, x, f0, h):
    k = x.size
    H = np.empty((k, k))
    plus = np.empty(k)
    minus = np.empty(k)
    for i in range(k):
        e = np.zeros(k)
        e[i] = h
        plus[i] = f(x + e)
        minus[i] = f(x - e)
        H[i, i] = (plus[i] - 2 * f0 + minus[i]) / h**2
    for i, j in itertools.combinations(range(k), 2):
        ei = np.zeros(k)
        ej = np.zeros(k)
        ei[i] = h
        ej[j] = h
        val = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (4 * h**2)
        H[i, j] = H[j, i] = val
    grad = (plus - minus) / (2 * h)
    return H, grad


def _ascent_direction(H, g):
    """Newton direction with eigenvalues of ``H`` forced negative."""
    lam, V = np.linalg.eigh(0.5 * (H + H.T))
    floor = max(1e-8, 1e-6 * np.max(np.abs(lam)))
    lam_mod = -np.maximum(np.abs(lam), floor)
    return -(V @ ((V.T @ g) / lam_mod))


def find_mode(structure: ModelStructure, init: HyperParams | None = None, config=InferenceConfig()):
    """Maximise ``log_marginal`` over the log-hyperparameters by damped Newton steps.

    Gradients and Hessians are central finite differences in log space. Every
    accepted iterate does not decrease the objective. When the iteration cap
    is hit the best point so far is returned with ``converged=False``.
    """
    if init is None:
        init = HyperParams(*config.init)
    cache: dict[tuple, float] = {}

    def f(psi):
        key = tuple(np.round(psi, 14))
        if key not in cache:
            try:
                cache[key] = conditional(HyperParams.from_log(psi), structure=structure).log_marginal
            except (FactorizationError, ValueError, FloatingPointError):
                cache[key] = -np.inf
        return cache[key]

    psi = init.to_log()
    fx = f(psi)
    if not np.isfinite(fx):
        raise FactorizationError(f"log posterior not finite at the initial point {init}")
    history = [fx]
    converged = False
    it = 0
    g = _fd_gradient(f, psi, fx, config.fd_step)
    while it < config.max_iter:
        if np.linalg.norm(g) < config.gtol:
            converged = True
            break
        it += 1
        H, _ = _fd_hessian(f, psi, fx, config.hessian_step)
        step = _ascent_direction(H, g)
        big = np.max(np.abs(step))
        if big > config.max_newton_step:
            step *= config.max_newton_step / big
        alpha = 1.0
        accepted = False
        while alpha > 1e-6:
            cand = psi + alpha * step
            fc = f(cand)
            if np.isfinite(fc) and fc >= fx:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            converged = np.linalg.norm(g) < 1e3 * config.gtol
            break
        moved = np.max(np.abs(cand - psi))
        psi, fx = cand, fc
        history.append(fx)
        g = _fd_gradient(f, psi, fx, config.fd_step)
        if moved < config.step_tol:
            converged = True
            break
    if not converged and np.linalg.norm(g) < config.gtol:
        converged = True
    if not converged:
        warnings.warn(f"mode search did not converge after {it} iterations (|grad|={np.linalg.norm(g):.2e})", RuntimeWarning, stacklevel=2)
    H, _ = _fd_hessian(f, psi, fx, config.hessian_step)
    H = 0.5 * (H + H.T)
    definite = bool(np.all(np.linalg.eigvalsh(H) < 0))
    if not definite:
        warnings.warn("Hessian at the mode is not negative definite; grid uses axis-aligned steps", GridWarning, stacklevel=2)
    return ModeResult(psi, fx, H, g, it, converged, history, definite)


@dataclass
class HyperGrid:
    z: np.ndarray
    psi: np.ndarray
    log_post: np.ndarray
    weights: np.ndarray
    mode: np.ndarray
    curvature: np.ndarray
    conditionals: list = field(default_factory=list, repr=False)

    def __len__(self):
        return self.psi.shape[0]

    @property
    def thetas(self):
        return [HyperParams.from_log(p) for p in self.psi]


def _z_transform(curvature, definite, step_fallback=None):
    """Matrix ``B`` with ``psi = mode + B z`` standardising the posterior curvature."""
    H = 0.5 * (curvature + curvature.T)
    if definite:
        lam, V = np.linalg.eigh(-H)
        return V * (1.0 / np.sqrt(lam))
    d = np.abs(np.diag(H))
    d = np.where(d > 1e-8, d, 1.0)
    return np.diag(1.0 / np.sqrt(d))


def explore_grid(mode: ModeResult | np.ndarray, curvature=None, structure=None, config=InferenceConfig(), evaluate=None):
    """Integration grid over the log-hyperparameters.

    Points sit on a lattice of spacing ``config.grid_step`` in standardised
    ``z`` space. Each axis is walked outward until the log-density drops by
    more than ``config.grid_threshold``; the box spanned by the axis walks is
    then filled outward from the mode, keeping points within the threshold.
    The ``2d`` nearest axis neighbours are always retained. Weights are
    proportional to ``exp(log posterior)`` (equal cell volumes).

    ``evaluate`` may replace the default objective (a function of ``psi``
    returning ``(log_post, payload)``); this is how the grid logic is tested
    on synthetic densities.
    """
    if isinstance(mode, ModeResult):
        psi0, curvature, definite = mode.psi, mode.hessian, mode.hessian_definite
    else:
        psi0 = np.asarray(mode, dtype=float)
        definite = bool(np.all(np.linalg.eigvalsh(0.5 * (curvature + curvature.T)) < 0))
    if evaluate is None:
        def evaluate(psi):
            cg = conditional(HyperParams.from_log(psi), structure=structure)
            return cg.log_marginal, cg

    B = _z_transform(curvature, definite)
    d = psi0.size
    step = config.grid_step
    thr = config.grid_threshold
    results: dict[tuple, tuple] = {}

    def run(keys):
        keys = [k for k in keys if k not in results]
        pts = [psi0 + B @ (step * np.asarray(k, dtype=float)) for k in keys]
        if config.n_jobs > 1 and len(keys) > 1:
            with ThreadPoolExecutor(config.n_jobs) as ex:
                outs = list(ex.map(_safe(evaluate), pts))
        else:
            outs = [_safe(evaluate)(p) for p in pts]
        for k, o in zip(keys, outs):
            results[k] = o

    origin = (0,) * d
    run([origin])
    f0 = results[origin][0]

    lo = np.zeros(d, dtype=int)
    hi = np.zeros(d, dtype=int)
    for axis in range(d):
        for sign in (1, -1):
            for j in range(1, config.max_axis_steps + 1):
                key = tuple(sign * j if a == axis else 0 for a in range(d))
                run([key])
                if not f0 - results[key][0] <= thr:
                    break
                if sign > 0:
                    hi[axis] = j
                else:
                    lo[axis] = -j

    def inside(key):
        return all(lo[a] <= key[a] <= hi[a] for a in range(d))

    def within(key):
        return f0 - results[key][0] <= thr

    # breadth-first fill from the mode through points that pass the threshold
    frontier = [origin]
    seen = {origin}
    while frontier:
        nxt = []
        for key in frontier:
            if key != origin and not within(key):
                continue
            for a in range(d):
                for s in (1, -1):
                    nb = list(key)
                    nb[a] += s
                    nb = tuple(nb)
                    if nb not in seen and inside(nb):
                        seen.add(nb)
                        nxt.append(nb)
        run(nxt)
        frontier = nxt

    neighbours = set()
    for a in range(d):
        for s in (1, -1):
            neighbours.add(tuple(s if b == a else 0 for b in range(d)))
    kept = sorted(k for k in results if (within(k) or k in neighbours) and np.isfinite(results[k][0]))
    z = np.array(kept, dtype=float) * step
    psi = psi0 + z @ B.T
    lp = np.array([results[k][0] for k in kept])
    w = np.exp(lp - lp.max())
    w /= w.sum()
    if len(kept) == 1:
        warnings.warn("integration grid collapsed to the mode", GridWarning, stacklevel=2)
    return HyperGrid(z=z, psi=psi, log_post=lp, weights=w, mode=psi0, curvature=curvature,
                     conditionals=[results[k][1] for k in kept])


def _safe(evaluate):
    def inner(psi):
        try:
            return evaluate(psi)
        except (FactorizationError, ValueError, FloatingPointError):
            return -np.inf, None
    return inner


@dataclass(frozen=True)
class Summary:
    mean: float
    sd: float
    q025: float
    q975: float


def mixture_cdf(x, means, sds, weights):
    return float(np.sum(weights * ndtr((x - means) / sds)))


def mixture_quantile(q, means, sds, weights, xtol=1e-12):
    """Quantile of a Gaussian mixture by bracketed root finding on its CDF."""
    means = np.asarray(means, dtype=float)
    sds = np.asarray(sds, dtype=float)
    weights = np.asarray(weights, dtype=float)
    a = np.min(means - 12 * sds)
    b = np.max(means + 12 * sds)
    return brentq(lambda x: mixture_cdf(x, means, sds, weights) - q, a, b, xtol=xtol, rtol=1e-14)


def mixture_summary(means, sds, weights):
    means = np.asarray(means, dtype=float)
    sds = np.asarray(sds, dtype=float)
    weights = np.asarray(weights, dtype=float)
    weights = weights / weights.sum()
    mu = float(weights @ means)
    var = float(weights @ (sds**2 + (means - mu) ** 2))
    return Summary(
        mu,
        float(np.sqrt(var)),
        mixture_quantile(0.025, means, sds, weights),
        mixture_quantile(0.975, means, sds, weights),
    )


def _weighted_quantile(values, weights, q):
    """Quantile of a discrete distribution, interpolating the midpoint CDF."""
    order = np.argsort(values, kind="stable")
    v = values[order]
    w = weights[order]
    uniq, inv = np.unique(v, return_inverse=True)
    wu = np.bincount(inv, weights=w)
    cdf = np.cumsum(wu) - 0.5 * wu
    return float(np.interp(q, cdf, uniq))


def marginals(grid: HyperGrid, include_ou=False):
    """Mixture summaries per latent element and per hyperparameter.

    Returns ``(latent, hyper)`` where ``latent`` is a list of
    :class:`Summary` in layout order (effects block only unless
    ``include_ou``) and ``hyper`` maps hyperparameter names to summaries on
    the natural scale.
    """
    cgs = grid.conditionals
    w = grid.weights
    p = cgs[0].layout.n_effects
    k = cgs[0].layout.dim if include_ou else p
    means = np.array([cg.mean[:k] for cg in cgs])
    sds = np.sqrt(np.array([cg.marginal_variances(include_ou=include_ou) for cg in cgs]))
    latent = [mixture_summary(means[:, j], sds[:, j], w) for j in range(k)]
    hyper = {}
    theta = np.exp(grid.psi)
    for j, name in enumerate(HYPER_NAMES):
        v = theta[:, j]
        mu = float(w @ v)
        sd = float(np.sqrt(w @ (v - mu) ** 2))
        hyper[name] = Summary(mu, sd, _weighted_quantile(v, w, 0.025), _weighted_quantile(v, w, 0.975))
    return latent, hyper


@dataclass
class JointSamples:
    grid_index: np.ndarray
    psi: np.ndarray
    latent: np.ndarray

    @property
    def theta(self):
        return np.exp(self.psi)

    def __len__(self):
        return self.grid_index.size


def sample_joint(fit, n, seed=0, include_ou=True):
    """Draw ``(theta, x)`` pairs: ``theta`` from the grid weights, ``x`` from its conditional.

    Draws for grid point ``k`` use a generator derived from ``(seed, k)``, so
    the result does not depend on evaluation order.
    """
    grid = fit.grid if hasattr(fit, "grid") else fit
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(grid), size=int(n), p=grid.weights)
    k0 = grid.conditionals[0]
    width = k0.layout.dim if include_ou else k0.layout.n_effects
    latent = np.empty((int(n), width))
    for k in np.unique(idx):
        pos = np.flatnonzero(idx == k)
        child = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(k),)))
        latent[pos] = grid.conditionals[k].sample(pos.size, child, include_ou=include_ou)
    return JointSamples(grid_index=idx, psi=grid.psi[idx], latent=latent)


@dataclass
class FitResult:
    """Posterior over hyperparameters (grid) and latent field (per-point Gaussians)."""

    grid: HyperGrid
    structure: ModelStructure = field(repr=False)
    priors: PriorSpec
    config: InferenceConfig
    mode_result: ModeResult | None = None
    _summaries: tuple | None = field(default=None, repr=False)

    @property
    def frame(self):
        return self.structure.frame

    @property
    def layout(self):
        return self.structure.layout

    @property
    def centering(self):
        return self.structure.frame.centering

    def summaries(self):
        if self._summaries is None:
            self._summaries = marginals(self.grid)
        return self._summaries

    def fixed_effect_means(self):
        latent, _ = self.summaries()
        return np.array([s.mean for s in latent[: self.layout.n_fixed]])

    def summary_table(self, include_random=False):
        """Rows ``(term, mean, sd, 2.5%, 97.5%)``: fixed effects then hyperparameters."""
        latent, hyper = self.summaries()
        lay = self.layout
        rows = []
        for term, s in zip(lay.terms, latent[: lay.n_fixed]):
            rows.append((term, s.mean, s.sd, s.q025, s.q975))
        if include_random:
            fr = self.frame
            for sid, s in zip(fr.session_ids, latent[lay.sessions]):
                rows.append((f"session[{sid}]", s.mean, s.sd, s.q025, s.q975))
            for pid, s in zip(fr.patient_ids, latent[lay.patients]):
                rows.append((f"patient_slope[{pid}]", s.mean, s.sd, s.q025, s.q975))
        for name, s in hyper.items():
            rows.append((name, s.mean, s.sd, s.q025, s.q975))
        return rows


def fit(frame: ModelFrame, priors: PriorSpec = PriorSpec(), config: InferenceConfig = InferenceConfig(), init=None):
    """Mode search followed by grid integration over the hyperparameters."""
    if frame.y is None:
        raise ValueError("fitting requires responses")
    structure = ModelStructure(frame, priors)
    mode = find_mode(structure, init, config)
    log.info("mode at %s after %d iterations", np.exp(mode.psi), mode.iterations)
    grid = explore_grid(mode, structure=structure, config=config)
    log.info("grid with %d points", len(grid))
    return FitResult(grid=grid, structure=structure, priors=priors, config=config, mode_result=mode)


def refit_on_grid(frame: ModelFrame, psi, weights, mode, curvature, priors, config=InferenceConfig(), z=None):
    """Rebuild a :class:`FitResult` from stored grid points by re-factorising each one."""
    structure = ModelStructure(frame, priors)
    cgs = [conditional(HyperParams.from_log(p), structure=structure) for p in psi]
    lp = np.array([cg.log_marginal for cg in cgs])
    grid = HyperGrid(
        z=np.zeros_like(psi) if z is None else np.asarray(z), psi=np.asarray(psi), log_post=lp, weights=np.asarray(weights),
        mode=np.asarray(mode), curvature=np.asarray(curvature), conditionals=cgs,
    )
    return FitResult(grid=grid, structure=structure, priors=priors, config=config)
