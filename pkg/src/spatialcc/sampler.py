"""No-U-Turn HMC with dual-averaging step size and windowed mass adaptation.

Multinomial NUTS with the generalized U-turn criterion (momentum sums
checked against mass-weighted momenta at the subtree boundaries, including
the across-subtree checks used by modern samplers). Warmup follows the
75 / 25-doubling / 50 window pattern: an initial fast interval adapting the
step size only, expanding covariance windows that re-estimate the diagonal
inverse mass, and a terminal fast interval. Chains draw their RNG streams
from one master seed through a counter-based Philox generator, so a
(seed, config, data) triple fully determines the output bitwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class SamplingError(RuntimeError):
    """Raised when a chain cannot make progress (e.g. all-divergent warmup)."""


@dataclass(frozen=True)
class SamplerConfig:
    n_chains: int = 4
    n_iter: int = 2000
    n_warmup: int = 1000
    thin: int = 1
    seed: int = 0
    max_treedepth: int = 10
    target_accept: float = 0.8
    init_radius: float = 2.0
    divergence_threshold: float = 1000.0
    n_jobs: int = 1

    def __post_init__(self):
        if not 0 <= self.n_warmup < self.n_iter:
            raise ValueError("need 0 <= n_warmup < n_iter")
        if not 1 <= self.max_treedepth <= 25:
            raise ValueError("max_treedepth must lie in [1, 25]")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.thin < 1 or self.n_chains < 1:
            raise ValueError("thin and n_chains must be >= 1")

    @property
    def n_kept(self) -> int:
        return (self.n_iter - self.n_warmup) // self.thin


@dataclass
class ChainDraws:
    """Post-warmup draws and sampler telemetry for one chain."""

    draws: np.ndarray
    columns: list[str]
    lp: np.ndarray
    divergent: np.ndarray
    treedepth: np.ndarray
    energy: np.ndarray
    accept_stat: np.ndarray
    step_size: float
    mass_diag: np.ndarray
    chain_id: int
    n_divergent_warmup: int = 0

    @property
    def n_kept(self) -> int:
        return self.draws.shape[0]

    @property
    def n_divergent(self) -> int:
        return int(self.divergent.sum())


def leapfrog(position, momentum, step, grad_fn, mass_diag=None):
    """One velocity-Verlet step: half kick, drift, half kick.

    ``grad_fn`` returns the gradient of the log density; ``mass_diag`` is
    the diagonal of the mass matrix M (drift uses M^-1 momentum).
    """
    position = np.asarray(position, dtype=float)
    momentum = np.asarray(momentum, dtype=float)
    inv_mass = 1.0 if mass_diag is None else 1.0 / np.asarray(mass_diag, dtype=float)
    p_half = momentum + 0.5 * step * np.asarray(grad_fn(position))
    q_new = position + step * inv_mass * p_half
    p_new = p_half + 0.5 * step * np.asarray(grad_fn(q_new))
    return q_new, p_new


class _Tree:
    """One NUTS subtree: endpoints, multinomial proposal, U-turn state."""

    __slots__ = ("q_minus", "p_minus", "g_minus", "q_plus", "p_plus", "g_plus",
                 "q_prop", "lp_prop", "g_prop", "log_w", "p_sum",
                 "sum_alpha", "n_leaves", "diverged", "turned")

    def __init__(self, q, p, g, lp, log_w, alpha, diverged):
        self.q_minus = q
        self.p_minus = p
        self.g_minus = g
        self.q_plus = q
        self.p_plus = p
        self.g_plus = g
        self.q_prop = q
        self.lp_prop = lp
        self.g_prop = g
        self.log_w = log_w
        self.p_sum = p.copy()
        self.sum_alpha = alpha
        self.n_leaves = 1
        self.diverged = diverged
        self.turned = False


class _NutsCore:
    """Transition kernel bound to one target and one RNG."""

    def __init__(self, logp_grad, rng: np.random.Generator,
                 max_treedepth: int, divergence_threshold: float):
        self.logp_grad = logp_grad
        self.rng = rng
        self.max_treedepth = max_treedepth
        self.div_threshold = divergence_threshold
        self.inv_mass = None
        self.sqrt_mass = None

    def set_inv_mass(self, inv_mass):
        self.inv_mass = np.asarray(inv_mass, dtype=float)
        self.sqrt_mass = 1.0 / np.sqrt(self.inv_mass)

    def kinetic(self, p) -> float:
        return 0.5 * float(self.inv_mass @ (p * p))

    def _leapfrog(self, q, p, g, eps):
        p1 = p + 0.5 * eps * g
        q1 = q + eps * self.inv_mass * p1
        lp1, g1 = self.logp_grad(q1)
        p1 = p1 + 0.5 * eps * g1
        return q1, p1, lp1, g1

    def _leaf(self, q, p, g, v, eps, h0) -> _Tree:
        q1, p1, lp1, g1 = self._leapfrog(q, p, g, v * eps)
        h1 = -lp1 + self.kinetic(p1)
        delta = h1 - h0
        if math.isnan(delta):
            delta = math.inf
        log_w = -delta
        alpha = min(1.0, math.exp(-delta)) if delta > -700 else 1.0
        return _Tree(q1, p1, g1, lp1, log_w, alpha, delta > self.div_threshold)

    def _sharp(self, p):
        return self.inv_mass * p

    def _turned(self, p_sum, p_left, p_right) -> bool:
        return (float(p_sum @ self._sharp(p_left)) <= 0.0
                or float(p_sum @ self._sharp(p_right)) <= 0.0)

    def _merge(self, tree: _Tree, other: _Tree, v: int, biased: bool) -> None:
        """Fold ``other`` (built in direction v) into ``tree``.

        ``biased`` selects the outer-loop progressive sampling rule
        min(1, w_new / w_old); inner merges use w_new / (w_old + w_new).
        """
        tree.sum_alpha += other.sum_alpha
        tree.n_leaves += other.n_leaves
        tree.diverged |= other.diverged
        tree.turned |= other.turned
        if tree.diverged or tree.turned:
            return

        # canonical left/right subtrees with left on the minus side
        if v == 1:
            sum_left, sum_right = tree.p_sum, other.p_sum
            inner_left, inner_right = tree.p_plus, other.p_minus
            tree.q_plus, tree.p_plus, tree.g_plus = other.q_plus, other.p_plus, other.g_plus
        else:
            sum_left, sum_right = other.p_sum, tree.p_sum
            inner_left, inner_right = other.p_plus, tree.p_minus
            tree.q_minus, tree.p_minus, tree.g_minus = other.q_minus, other.p_minus, other.g_minus

        if biased:
            log_accept = other.log_w - tree.log_w
        else:
            log_accept = other.log_w - float(np.logaddexp(tree.log_w, other.log_w))
        if self.rng.uniform() < math.exp(min(0.0, log_accept)):
            tree.q_prop = other.q_prop
            tree.lp_prop = other.lp_prop
            tree.g_prop = other.g_prop
        tree.log_w = float(np.logaddexp(tree.log_w, other.log_w))
        tree.p_sum = tree.p_sum + other.p_sum

        # generalized U-turn on the merged tree plus across-subtree checks
        if (self._turned(tree.p_sum, tree.p_minus, tree.p_plus)
                or self._turned(sum_left + inner_right, tree.p_minus, inner_right)
                or self._turned(sum_right + inner_left, inner_left, tree.p_plus)):
            tree.turned = True

    def _build(self, q, p, g, v, depth, eps, h0) -> _Tree:
        if depth == 0:
            return self._leaf(q, p, g, v, eps, h0)
        tree = self._build(q, p, g, v, depth - 1, eps, h0)
        if tree.diverged or tree.turned:
            return tree
        if v == 1:
            sub = self._build(tree.q_plus, tree.p_plus, tree.g_plus,
                              v, depth - 1, eps, h0)
        else:
            sub = self._build(tree.q_minus, tree.p_minus, tree.g_minus,
                              v, depth - 1, eps, h0)
        self._merge(tree, sub, v, biased=False)
        return tree

    def transition(self, q, lp, g, eps):
        """One NUTS update from (q, lp, g). Returns the new state plus
        telemetry (accept stat, treedepth, divergent flag, energy)."""
        p0 = self.rng.standard_normal(q.size) * self.sqrt_mass
        h0 = -lp + self.kinetic(p0)
        tree = _Tree(q, p0, g, lp, 0.0, 0.0, False)
        tree.sum_alpha = 0.0
        tree.n_leaves = 0
        depth = 0
        divergent = False
        while depth < self.max_treedepth:
            v = 1 if self.rng.uniform() < 0.5 else -1
            if v == 1:
                sub = self._build(tree.q_plus, tree.p_plus, tree.g_plus,
                                  v, depth, eps, h0)
            else:
                sub = self._build(tree.q_minus, tree.p_minus, tree.g_minus,
                                  v, depth, eps, h0)
            depth += 1
            if sub.diverged or sub.turned:
                divergent |= sub.diverged
                tree.sum_alpha += sub.sum_alpha
                tree.n_leaves += sub.n_leaves
                break
            self._merge(tree, sub, v, biased=True)
            if tree.turned:
                break
        accept = tree.sum_alpha / max(tree.n_leaves, 1)
        return (tree.q_prop, tree.lp_prop, tree.g_prop,
                accept, depth, divergent, h0)

    def find_reasonable_epsilon(self, q, lp, g, eps: float = 1.0) -> float:
        """Double or halve eps until the one-step acceptance crosses 1/2."""
        p = self.rng.standard_normal(q.size) * self.sqrt_mass
        h0 = -lp + self.kinetic(p)

        def log_accept(step):
            q1, p1, lp1, _ = self._leapfrog(q, p, g, step)
            h1 = -lp1 + self.kinetic(p1)
            return -(h1 - h0) if math.isfinite(h1) else -math.inf

        la = log_accept(eps)
        direction = 1 if la > math.log(0.5) else -1
        for _ in range(100):
            if direction * la <= direction * math.log(0.5):
                break
            eps *= 2.0 ** direction
            if not 1e-10 < eps < 1e10:
                break
            la = log_accept(eps)
        return eps


class DualAveraging:
    """Nesterov dual averaging targeting a fixed acceptance statistic."""

    GAMMA = 0.05
    T0 = 10.0
    KAPPA = 0.75

    def __init__(self, eps0: float, target: float):
        self.target = target
        self.restart(eps0)

    def restart(self, eps0: float) -> None:
        self.mu = math.log(10.0 * eps0)
        self.log_eps = math.log(eps0)
        self.log_eps_bar = 0.0
        self.h_bar = 0.0
        self.count = 0

    def update(self, accept: float) -> float:
        self.count += 1
        eta = 1.0 / (self.count + self.T0)
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target - accept)
        self.log_eps = self.mu - math.sqrt(self.count) / self.GAMMA * self.h_bar
        w = self.count ** -self.KAPPA
        self.log_eps_bar = w * self.log_eps + (1.0 - w) * self.log_eps_bar
        return math.exp(self.log_eps)

    @property
    def adapted(self) -> float:
        return math.exp(self.log_eps_bar)


def mass_window_ends(n_warmup: int, init_buffer: int = 75,
                     term_buffer: int = 50, base_window: int = 25) -> list[int]:
    """Warmup iteration indices (1-based) at which the mass is re-estimated.

    Stan's schedule: a fast init buffer, covariance windows of doubling
    width, a fast terminal buffer; the last window absorbs the remainder.
    """
    ends: list[int] = []
    boundary = n_warmup - term_buffer
    start, width = init_buffer, base_window
    while start + width <= boundary:
        end = start + width
        if end + 2 * width > boundary:
            end = boundary
        ends.append(end)
        start = end
        width *= 2
    return ends


class _Welford:
    def __init__(self, dim: int):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def push(self, x) -> None:
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    def regularized_variance(self) -> np.ndarray:
        # shrink toward 1e-3 as Stan does; guards tiny windows
        var = self.m2 / max(self.n - 1, 1)
        w = self.n / (self.n + 5.0)
        return w * var + 1e-3 * (1.0 - w)


class UnconstrainedTarget:
    """Adapter giving plain log-density callables the target interface."""

    def __init__(self, logp_grad, dim: int, names: list[str] | None = None):
        self.logp_grad = logp_grad
        self.dim = dim
        self._names = names

    def constrained_names(self) -> list[str]:
        return self._names or [f"theta[{i}]" for i in range(self.dim)]

    def constrained_matrix(self, U: np.ndarray) -> np.ndarray:
        return np.atleast_2d(U)


def run_chain(target, config: SamplerConfig, seed_seq: np.random.SeedSequence,
              chain_id: int, init=None) -> ChainDraws:
    """Run one chain: windowed warmup adaptation, then frozen sampling."""
    rng = np.random.Generator(np.random.Philox(seed_seq))
    dim = target.dim
    core = _NutsCore(target.logp_grad, rng, config.max_treedepth,
                     config.divergence_threshold)
    core.set_inv_mass(np.ones(dim))

    if init is not None:
        q = np.asarray(init, dtype=float).copy()
        lp, g = target.logp_grad(q)
        if not math.isfinite(lp):
            raise SamplingError(f"chain {chain_id}: supplied init has non-finite density")
    else:
        for _ in range(100):
            q = rng.uniform(-config.init_radius, config.init_radius, dim)
            lp, g = target.logp_grad(q)
            if math.isfinite(lp):
                break
        else:
            raise SamplingError(
                f"chain {chain_id}: no finite-density init found in 100 draws")

    eps = core.find_reasonable_epsilon(q, lp, g)
    da = DualAveraging(eps, config.target_accept)
    windowed = config.n_warmup >= 150
    window_ends = set(mass_window_ends(config.n_warmup)) if windowed else set()
    welford = _Welford(dim)
    in_window = False
    next_window_start = 75 if windowed else config.n_warmup + 1

    n_div_warmup = 0
    for it in range(1, config.n_warmup + 1):
        q, lp, g, accept, depth, div, energy = core.transition(q, lp, g, eps)
        n_div_warmup += int(div)
        eps = da.update(accept)
        if windowed and it >= next_window_start:
            in_window = True
        if in_window:
            welford.push(q)
        if it in window_ends:
            core.set_inv_mass(welford.regularized_variance())
            welford = _Welford(dim)
            eps = core.find_reasonable_epsilon(q, lp, g, math.exp(da.log_eps))
            da.restart(eps)
    if config.n_warmup >= 50 and n_div_warmup == config.n_warmup:
        raise SamplingError(
            f"chain {chain_id}: every warmup iteration diverged; "
            "the step size could not be stabilized")
    eps = da.adapted if config.n_warmup > 0 else eps

    n_post = config.n_iter - config.n_warmup
    n_kept = config.n_kept
    kept_u = np.empty((n_kept, dim))
    lp_out = np.empty(n_kept)
    div_out = np.zeros(n_kept, dtype=bool)
    depth_out = np.zeros(n_kept, dtype=np.int64)
    energy_out = np.empty(n_kept)
    accept_out = np.empty(n_kept)
    k = 0
    for it in range(1, n_post + 1):
        q, lp, g, accept, depth, div, energy = core.transition(q, lp, g, eps)
        if it % config.thin == 0:
            kept_u[k] = q
            lp_out[k] = lp
            div_out[k] = div
            depth_out[k] = depth
            energy_out[k] = energy
            accept_out[k] = accept
            k += 1

    if np.any(np.isnan(kept_u)):
        raise SamplingError(f"chain {chain_id}: NaN in kept draws")
    draws = target.constrained_matrix(kept_u)
    return ChainDraws(
        draws=draws,
        columns=target.constrained_names(),
        lp=lp_out,
        divergent=div_out,
        treedepth=depth_out,
        energy=energy_out,
        accept_stat=accept_out,
        step_size=eps,
        mass_diag=1.0 / core.inv_mass,
        chain_id=chain_id,
        n_divergent_warmup=n_div_warmup,
    )


def run_chains(target, config: SamplerConfig, inits=None) -> list[ChainDraws]:
    """Run all chains with independent Philox streams from the master seed.

    Identical (seed, config, data, build) reproduce bitwise identical
    draws. Per-chain failures are raised with the chain id attached once
    every other chain has finished.
    """
    seqs = np.random.SeedSequence(config.seed).spawn(config.n_chains)
    chain_inits = inits if inits is not None else [None] * config.n_chains
    if len(chain_inits) != config.n_chains:
        raise ValueError("one init per chain required")

    if config.n_jobs != 1 and config.n_chains > 1:
        from joblib import Parallel, delayed
        results = Parallel(n_jobs=config.n_jobs)(
            delayed(run_chain)(target, config, seqs[k], k, chain_inits[k])
            for k in range(config.n_chains))
        return list(results)

    results = []
    failures = []
    for k in range(config.n_chains):
        try:
            results.append(run_chain(target, config, seqs[k], k, chain_inits[k]))
        except SamplingError as exc:
            failures.append(str(exc))
    if failures:
        raise SamplingError("; ".join(failures))
    return results


def stack_draws(chains: list[ChainDraws]) -> np.ndarray:
    """(n_chains, kept, P) array for the diagnostics module."""
    return np.stack([c.draws for c in chains], axis=0)


def write_chain_csv(chain: ChainDraws, path) -> None:
    """One row per kept iteration; parameter columns then telemetry."""
    header = list(chain.columns) + ["lp__", "divergent__", "treedepth__", "energy__"]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(chain.n_kept):
            cells = [repr(float(v)) for v in chain.draws[i]]
            cells.append(repr(float(chain.lp[i])))
            cells.append(str(int(chain.divergent[i])))
            cells.append(str(int(chain.treedepth[i])))
            cells.append(repr(float(chain.energy[i])))
            fh.write(",".join(cells) + "\n")


def read_chain_csv(path) -> tuple[np.ndarray, list[str]]:
    """Read back a draws file; returns (matrix, parameter columns)."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        rows = [list(map(float, line.strip().split(","))) for line in fh if line.strip()]
    matrix = np.asarray(rows)
    n_param = len(header) - 4
    return matrix[:, :n_param], header[:n_param]
