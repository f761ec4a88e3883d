"""Joint log-posterior of the contaminated case-control model.

The model, in its full form (all layers on):

    y_i  ~ mixture:  rho_i * Bernoulli(y_i | theta1_j[i]) +
                     (1 - rho_i) * Bernoulli(y_i | 0)
    logit(rho_i) = mu_i = log_offset[j[i]] + eta[j[i]] * sigma_eta
                   + gamma[l[i]] + X_i . beta
    beta_k  = aux_a_k / sqrt(aux_b_k)          (Cauchy as a Gaussian scale
    aux_a_k ~ N(0, 1)                           mixture; the intercept gets
    aux_b_1 ~ Gamma(0.5, 0.5 * intercept_scale^2)      a looser scale)
    aux_b_k ~ Gamma(0.5, 0.5 * slope_scale^2), k > 1
    gamma_l = sigma_gamma * (phi_l * sqrt(1 - lambda) +
                             psi_l * sqrt(lambda / s))
    phi_l   ~ N(0, 1)
    psi     ~ ICAR(graph), soft sum-to-zero sum(psi) ~ N(0, 0.01 * L)
    lambda  ~ Beta(0.5, 0.5)
    sigma_gamma, sigma_eta ~ half-N(0, 1)
    eta_j   ~ N(0, 1)

theta1 and the log offset are data (per large area). Evaluation happens on
an unconstrained vector: positives via log, lambda via logit, with the
log-Jacobians folded into the density. The gradient is exact and analytic;
everything is vectorized numpy and reentrant (no interior mutability apart
from telemetry counters).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, gammaln

from .data import CaseControlData
from .graph import AdjacencyGraph, require_connected, scaling_factor

LOG_2PI = math.log(2.0 * math.pi)
LOG_FLOOR = 1e-300


class ModelError(ValueError):
    """Raised for inconsistent model configuration or invalid parameters."""


@dataclass(frozen=True)
class ModelConfig:
    """Layer toggles and prior scales.

    contamination off fixes theta1 := 1 (plain case-control likelihood);
    spatial off drops the ICAR component (gamma = sigma_gamma * phi);
    large_area off drops eta and sigma_eta. sigma_prior selects the scale
    prior for sigma_gamma/sigma_eta: "half_normal" (the implemented model)
    or "gamma_precision" (tau ~ Gamma(eps, eps) on the precision; provided
    for comparison only, no warranty).
    """

    contamination: bool = True
    spatial: bool = True
    large_area: bool = True
    intercept_scale: float = 10.0
    slope_scale: float = 1.0
    soft_sum_sd_per_area: float = 0.01
    sigma_prior: str = "half_normal"
    gamma_epsilon: float = 0.001

    def __post_init__(self):
        if self.intercept_scale <= 0 or self.slope_scale <= 0:
            raise ModelError("prior scales must be positive")
        if self.sigma_prior not in ("half_normal", "gamma_precision"):
            raise ModelError(f"unknown sigma_prior {self.sigma_prior!r}")


@dataclass(frozen=True)
class ModelParams:
    """Constrained parameter block. Optional fields are None when a layer
    is toggled off."""

    aux_a: np.ndarray
    aux_b: np.ndarray
    phi: np.ndarray
    sigma_gamma: float
    psi: np.ndarray | None = None
    lam: float | None = None
    eta: np.ndarray | None = None
    sigma_eta: float | None = None

    @property
    def beta(self) -> np.ndarray:
        return self.aux_a / np.sqrt(self.aux_b)


@dataclass(frozen=True)
class ParamLayout:
    """Index map between the unconstrained vector and parameter blocks."""

    p: int
    L: int
    J: int
    spatial: bool
    large_area: bool

    def __post_init__(self):
        pos = 0

        def block(size):
            nonlocal pos
            sl = slice(pos, pos + size)
            pos += size
            return sl

        object.__setattr__(self, "aux_a", block(self.p))
        object.__setattr__(self, "log_aux_b", block(self.p))
        object.__setattr__(self, "phi", block(self.L))
        object.__setattr__(self, "psi", block(self.L) if self.spatial else None)
        object.__setattr__(self, "logit_lambda",
                           block(1) if self.spatial else None)
        object.__setattr__(self, "log_sigma_gamma", block(1))
        object.__setattr__(self, "eta", block(self.J) if self.large_area else None)
        object.__setattr__(self, "log_sigma_eta",
                           block(1) if self.large_area else None)
        object.__setattr__(self, "dim", pos)


def make_layout(p: int, L: int, J: int, config: ModelConfig) -> ParamLayout:
    return ParamLayout(p=p, L=L, J=J, spatial=config.spatial,
                       large_area=config.large_area)


def constrain(u, layout: ParamLayout) -> tuple[ModelParams, float]:
    """Map an unconstrained vector to constrained parameters.

    Returns (params, log_jacobian): log(x) for each positive parameter,
    log(lambda) + log(1 - lambda) for the mixing weight.
    """
    u = np.asarray(u, dtype=float)
    if np.any(np.isnan(u)):
        raise ModelError("NaN in unconstrained vector")
    if u.size != layout.dim:
        raise ModelError(f"expected dimension {layout.dim}, got {u.size}")
    log_b = u[layout.log_aux_b]
    log_jac = float(np.sum(log_b))
    us = float(u[layout.log_sigma_gamma][0])
    log_jac += us
    psi = lam = eta = sigma_eta = None
    if layout.spatial:
        psi = u[layout.psi].copy()
        ul = float(u[layout.logit_lambda][0])
        lam = float(expit(ul))
        # d lambda / d u = lambda (1 - lambda)
        log_jac += math.log(max(lam, LOG_FLOOR)) + math.log(max(1.0 - lam, LOG_FLOOR))
    if layout.large_area:
        eta = u[layout.eta].copy()
        ue = float(u[layout.log_sigma_eta][0])
        sigma_eta = math.exp(ue)
        log_jac += ue
    return ModelParams(
        aux_a=u[layout.aux_a].copy(),
        aux_b=np.exp(log_b),
        phi=u[layout.phi].copy(),
        sigma_gamma=math.exp(us),
        psi=psi, lam=lam, eta=eta, sigma_eta=sigma_eta,
    ), log_jac


def unconstrain(params: ModelParams, layout: ParamLayout) -> np.ndarray:
    """Inverse of :func:`constrain` (round-trips to 1e-12)."""
    u = np.empty(layout.dim)
    u[layout.aux_a] = params.aux_a
    u[layout.log_aux_b] = np.log(params.aux_b)
    u[layout.phi] = params.phi
    if layout.spatial:
        u[layout.psi] = params.psi
        u[layout.logit_lambda] = math.log(params.lam) - math.log1p(-params.lam)
    u[layout.log_sigma_gamma] = math.log(params.sigma_gamma)
    if layout.large_area:
        u[layout.eta] = params.eta
        u[layout.log_sigma_eta] = math.log(params.sigma_eta)
    return u


def log_likelihood_mixture(mu, y, theta1):
    """Per-observation log-likelihood of the label mixture.

    y = 1: log(rho * theta1); y = 0: log(rho * (1 - theta1) + (1 - rho)),
    with rho = inv_logit(mu), evaluated in the logit parameterization via
    log-sum-exp so no overflow occurs for |mu| up to ~700.
    """
    mu = np.asarray(mu, dtype=float)
    y = np.asarray(y)
    theta1 = np.broadcast_to(np.asarray(theta1, dtype=float), mu.shape)
    if np.any((theta1 <= 0) | (theta1 > 1)):
        raise ModelError("theta1 must lie in (0, 1]")
    with np.errstate(divide="ignore"):
        log_theta = np.log(np.maximum(theta1, LOG_FLOOR))
        log1m_theta = np.log1p(-np.minimum(theta1, 1.0))
    ll = np.empty(mu.shape)
    one = y == 1
    # log rho = -softplus(-mu); log(1 - rho * theta1) via logaddexp
    ll[one] = log_theta[one] - np.logaddexp(0.0, -mu[one])
    ll[~one] = (np.logaddexp(0.0, log1m_theta[~one] + mu[~one])
                - np.logaddexp(0.0, mu[~one]))
    return ll


def icar_logpdf(psi, edges, soft_sum_sd_per_area: float = 0.01) -> float:
    """Improper ICAR log-density plus the soft sum-to-zero term.

    -0.5 * sum over edges (psi[a] - psi[b])^2, plus the Normal(0,
    soft_sum_sd_per_area * L) log-density of sum(psi), which identifies the
    level of the otherwise translation-invariant pairwise term.
    """
    psi = np.asarray(psi, dtype=float)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    diff = psi[edges[:, 0]] - psi[edges[:, 1]]
    pairwise = -0.5 * float(diff @ diff)
    sd = soft_sum_sd_per_area * psi.size
    total = float(psi.sum())
    soft = -0.5 * (total / sd) ** 2 - math.log(sd) - 0.5 * LOG_2PI
    return pairwise + soft


def convolved_effect(phi, psi, lam: float, sigma_gamma: float, s: float):
    """BYM2 convolved small-area effect.

    gamma_l = sigma_gamma * (phi_l * sqrt(1 - lambda) + psi_l *
    sqrt(lambda / s)) where s is the graph scaling factor.
    """
    if not (0.0 <= lam <= 1.0):
        raise ModelError("lambda must lie in [0, 1]")
    if s <= 0:
        raise ModelError("scaling factor must be positive")
    return sigma_gamma * (np.asarray(phi) * math.sqrt(1.0 - lam)
                          + np.asarray(psi) * math.sqrt(lam / s))


def _sigma_prior_terms(u_val: float, sigma: float, config: ModelConfig):
    """Log-prior of a positive scale on the log scale, Jacobian included.

    Returns (value, d value / d u). half_normal: sigma ~ half-N(0,1).
    gamma_precision: tau = sigma^-2 ~ Gamma(eps, eps), reparameterized.
    """
    if config.sigma_prior == "half_normal":
        value = math.log(2.0) - 0.5 * LOG_2PI - 0.5 * sigma * sigma + u_val
        return value, 1.0 - sigma * sigma
    eps = config.gamma_epsilon
    tau = math.exp(-2.0 * u_val)
    value = (eps * math.log(eps) - float(gammaln(eps))
             - 2.0 * eps * u_val - eps * tau + math.log(2.0))
    return value, 2.0 * eps * (tau - 1.0)


class Posterior:
    """Callable joint density with analytic gradient for one dataset.

    Evaluation is pure: many threads may call :meth:`logp_grad`
    simultaneously on shared read-only data. Telemetry (clamp and
    evaluation counters, last non-finite component) is advisory only.
    """

    def __init__(self, data: CaseControlData, graph: AdjacencyGraph | None,
                 config: ModelConfig):
        if config.spatial:
            if graph is None:
                raise ModelError("spatial layer requires an adjacency graph")
            if graph.n_nodes != data.n_small_areas:
                raise ModelError("graph node count does not match small areas")
            if data.n_small_areas < 2:
                raise ModelError("spatial layer needs at least 2 small areas")
            require_connected(graph)
            self.scaling = scaling_factor(graph)
            self.edges = graph.edges
        else:
            self.scaling = None
            self.edges = None
        self.data = data
        self.graph = graph
        self.config = config
        self.layout = make_layout(data.design.p, data.n_small_areas,
                                  data.n_large_areas, config)

        self._X = data.design.X
        self._y1 = np.flatnonzero(data.y == 1)
        self._y0 = np.flatnonzero(data.y == 0)
        self._la = data.small_area_id
        self._ja = data.large_area_id
        self._off_obs = data.log_offset[self._ja] if data.n else np.empty(0)
        theta = data.theta1 if config.contamination else np.ones_like(data.theta1)
        self.n_log_clamps = int(np.sum(theta < LOG_FLOOR))
        theta = np.maximum(theta, LOG_FLOOR)
        theta_obs = theta[self._ja] if data.n else np.empty(0)
        with np.errstate(divide="ignore"):
            self._log_theta_obs = np.log(theta_obs)
            self._log1m_theta_obs = np.log1p(-np.minimum(theta_obs, 1.0))
        p = data.design.p
        self._aux_b_rate = np.full(p, 0.5 * config.slope_scale ** 2)
        self._aux_b_rate[0] = 0.5 * config.intercept_scale ** 2
        self.n_evaluations = 0
        self.last_nonfinite_component: str | None = None

    @property
    def dim(self) -> int:
        return self.layout.dim

    # ------------------------------------------------------------------
    # density + gradient
    # ------------------------------------------------------------------
    def logp_grad(self, u) -> tuple[float, np.ndarray]:
        """Joint log-density (priors + likelihood + Jacobians) and its
        exact gradient with respect to the unconstrained vector."""
        self.n_evaluations += 1
        lay = self.layout
        cfg = self.config
        u = np.asarray(u, dtype=float)
        if np.any(np.isnan(u)):
            raise ModelError("NaN in unconstrained vector")
        p, L, J = lay.p, lay.L, lay.J

        aux_a = u[lay.aux_a]
        log_b = u[lay.log_aux_b]
        phi = u[lay.phi]
        us = float(u[lay.log_sigma_gamma][0])
        with np.errstate(over="ignore"):
            aux_b = np.exp(log_b)
            sigma_gamma = math.exp(us)
        if not np.all(np.isfinite(aux_b)) or not math.isfinite(sigma_gamma):
            return self._reject("transform-overflow")
        sqrt_b = np.sqrt(aux_b)
        beta = aux_a / sqrt_b

        if lay.spatial:
            psi = u[lay.psi]
            ul = float(u[lay.logit_lambda][0])
            lam = float(expit(ul))
            w_phi = math.sqrt(max(1.0 - lam, 0.0))
            w_psi = math.sqrt(max(lam, 0.0) / self.scaling)
            gamma = sigma_gamma * (phi * w_phi + psi * w_psi)
        else:
            gamma = sigma_gamma * phi

        if lay.large_area:
            eta = u[lay.eta]
            ue = float(u[lay.log_sigma_eta][0])
            sigma_eta = math.exp(ue)
            if not math.isfinite(sigma_eta):
                return self._reject("transform-overflow")

        grad = np.zeros(lay.dim)
        logp = 0.0

        # --- likelihood ------------------------------------------------
        if self.data.n:
            mu = self._off_obs + gamma[self._la] + self._X @ beta
            if lay.large_area:
                mu = mu + sigma_eta * eta[self._ja]
            y1, y0 = self._y1, self._y0
            softplus_mu = np.logaddexp(0.0, mu)
            rho = expit(mu)
            ll = np.empty(mu.shape)
            g = np.empty(mu.shape)
            # y=1: log(rho * theta1); y=0: log(1 - rho * theta1)
            ll[y1] = self._log_theta_obs[y1] + mu[y1] - softplus_mu[y1]
            g[y1] = 1.0 - rho[y1]
            c0mu = self._log1m_theta_obs[y0] + mu[y0]
            ll[y0] = np.logaddexp(0.0, c0mu) - softplus_mu[y0]
            g[y0] = expit(c0mu) - rho[y0]
            lik = float(ll.sum())
            if not math.isfinite(lik):
                return self._reject("likelihood")
            logp += lik

            t = self._X.T @ g
            G = np.bincount(self._la, weights=g, minlength=L)
        else:
            t = np.zeros(p)
            G = np.zeros(L)

        # --- beta scale mixture -----------------------------------------
        logp += float(-0.5 * aux_a @ aux_a) - 0.5 * p * LOG_2PI
        logp += float(np.sum(0.5 * np.log(self._aux_b_rate) - gammaln(0.5)
                             - 0.5 * log_b - self._aux_b_rate * aux_b))
        logp += float(np.sum(log_b))  # Jacobian of exp
        grad[lay.aux_a] = t / sqrt_b - aux_a
        grad[lay.log_aux_b] = -0.5 * t * aux_a / sqrt_b + 0.5 - self._aux_b_rate * aux_b

        # --- small-area effects ------------------------------------------
        logp += float(-0.5 * phi @ phi) - 0.5 * L * LOG_2PI
        if lay.spatial:
            diff = psi[self.edges[:, 0]] - psi[self.edges[:, 1]]
            logp += -0.5 * float(diff @ diff)
            sd_soft = cfg.soft_sum_sd_per_area * L
            total = float(psi.sum())
            logp += (-0.5 * (total / sd_soft) ** 2 - math.log(sd_soft)
                     - 0.5 * LOG_2PI)
            # Beta(0.5, 0.5) prior on lambda plus the logit Jacobian
            lam_f = min(max(lam, LOG_FLOOR), 1.0 - 1e-16)
            logp += (0.5 * math.log(lam_f) + 0.5 * math.log1p(-lam_f)
                     - math.log(math.pi))

            grad[lay.phi] = G * sigma_gamma * w_phi - phi
            grad_icar = (np.bincount(self.edges[:, 1], weights=diff, minlength=L)
                         - np.bincount(self.edges[:, 0], weights=diff, minlength=L))
            grad[lay.psi] = (G * sigma_gamma * w_psi + grad_icar
                             - total / sd_soft ** 2)
            # d gamma / d lambda, guarded at the boundaries
            dg_dlam = sigma_gamma * (
                -phi / (2.0 * max(w_phi, 1e-12))
                + psi / (2.0 * max(math.sqrt(max(lam, 1e-300) * self.scaling), 1e-12)))
            dprior_dlam = -0.5 / lam_f + 0.5 / (1.0 - lam_f)
            dlam_du = lam * (1.0 - lam)
            grad[lay.logit_lambda] = ((float(G @ dg_dlam) + dprior_dlam) * dlam_du
                                      + 1.0 - 2.0 * lam)
        else:
            grad[lay.phi] = G * sigma_gamma - phi

        sg_val, sg_grad = _sigma_prior_terms(us, sigma_gamma, cfg)
        logp += sg_val
        grad[lay.log_sigma_gamma] = float(G @ gamma) + sg_grad

        # --- large-area effects -------------------------------------------
        if lay.large_area:
            logp += float(-0.5 * eta @ eta) - 0.5 * J * LOG_2PI
            se_val, se_grad = _sigma_prior_terms(ue, sigma_eta, cfg)
            logp += se_val
            if self.data.n:
                H = np.bincount(self._ja, weights=g, minlength=J)
            else:
                H = np.zeros(J)
            grad[lay.eta] = sigma_eta * H - eta
            grad[lay.log_sigma_eta] = sigma_eta * float(H @ eta) + se_grad

        if not math.isfinite(logp):
            return self._reject("prior")
        self.last_nonfinite_component = None
        return logp, grad

    def _reject(self, component: str) -> tuple[float, np.ndarray]:
        # non-finite density is a rejection for the sampler, not an error
        self.last_nonfinite_component = component
        return -math.inf, np.zeros(self.layout.dim)

    # ------------------------------------------------------------------
    # constrained reporting
    # ------------------------------------------------------------------
    def constrain(self, u) -> ModelParams:
        return constrain(u, self.layout)[0]

    def unconstrain(self, params: ModelParams) -> np.ndarray:
        return unconstrain(params, self.layout)

    def constrained_names(self) -> list[str]:
        cols = self.data.design.columns
        s_names = self.data.small_area_names or tuple(str(i) for i in range(self.layout.L))
        l_names = self.data.large_area_names or tuple(str(i) for i in range(self.layout.J))
        names = [f"beta[{c}]" for c in cols]
        names += [f"aux_a[{c}]" for c in cols]
        names += [f"aux_b[{c}]" for c in cols]
        names += [f"phi[{a}]" for a in s_names]
        if self.layout.spatial:
            names += [f"psi[{a}]" for a in s_names]
            names.append("lambda")
        names.append("sigma_gamma")
        names += [f"gamma[{a}]" for a in s_names]
        if self.layout.large_area:
            names += [f"eta[{a}]" for a in l_names]
            names.append("sigma_eta")
        return names

    def constrained_matrix(self, U: np.ndarray) -> np.ndarray:
        """Vectorized constrained transform of a stack of draws (S, dim)."""
        U = np.atleast_2d(np.asarray(U, dtype=float))
        lay = self.layout
        aux_a = U[:, lay.aux_a]
        aux_b = np.exp(U[:, lay.log_aux_b])
        beta = aux_a / np.sqrt(aux_b)
        phi = U[:, lay.phi]
        sigma_gamma = np.exp(U[:, lay.log_sigma_gamma])
        blocks = [beta, aux_a, aux_b, phi]
        if lay.spatial:
            psi = U[:, lay.psi]
            lam = expit(U[:, lay.logit_lambda])
            gamma = sigma_gamma * (phi * np.sqrt(1.0 - lam)
                                   + psi * np.sqrt(lam / self.scaling))
            blocks += [psi, lam]
        else:
            gamma = sigma_gamma * phi
        blocks += [sigma_gamma, gamma]
        if lay.large_area:
            blocks += [U[:, lay.eta], np.exp(U[:, lay.log_sigma_eta])]
        return np.hstack(blocks)


def log_posterior(u, data: CaseControlData, graph: AdjacencyGraph | None,
                  config: ModelConfig) -> tuple[float, np.ndarray]:
    """One-shot evaluation; builds a Posterior and delegates."""
    return Posterior(data, graph, config).logp_grad(u)
