"""Convergence and mixing diagnostics.

Four potential-scale-reduction variants (classic split R-hat, rank
normalized, folded rank-normalized, and their max as the headline value)
and five effective-sample-size measures (bulk, tail, mean, sd, median),
plus quantile-resolved ESS curves and rank-histogram data. Draw matrices
are (n_chains, n_iterations) per parameter; chains are split in half
throughout, following the rank-normalization methodology of Vehtari et al.
Autocorrelations use the direct (FFT-free) Geyer initial monotone sequence
estimator combined across chains.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri
from scipy.stats import rankdata


class DiagnosticsError(ValueError):
    pass


def _as_chain_matrix(draws) -> np.ndarray:
    x = np.asarray(draws, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise DiagnosticsError("draws must be (n_chains, n_iterations)")
    return x


def split_chains(draws) -> np.ndarray:
    """Split each chain in half, doubling the chain count."""
    x = _as_chain_matrix(draws)
    n = x.shape[1] // 2
    if n < 2:
        raise DiagnosticsError("need at least 4 iterations to split")
    return np.vstack([x[:, :n], x[:, x.shape[1] - n:]])


def split_rhat(draws) -> float:
    """Classic split-chain potential scale reduction factor.

    sqrt(((N-1)/N * W + B/N) / W) over the split chains, with B the
    between-chain variance and W the mean within-chain variance. Constant
    draws have no scale to compare and report NaN (zero variance).
    """
    x = split_chains(draws)
    m, n = x.shape
    means = x.mean(axis=1)
    w = float(np.mean(np.var(x, axis=1, ddof=1)))
    b = n * float(np.var(means, ddof=1))
    if w == 0.0:
        return float("nan")
    var_plus = (n - 1) / n * w + b / n
    return float(np.sqrt(var_plus / w))


def rank_normalize(draws) -> np.ndarray:
    """Pooled fractional ranks mapped through the inverse normal CDF.

    r -> (r - 3/8) / (S + 1/4) with average ranks for ties.
    """
    x = _as_chain_matrix(draws)
    ranks = rankdata(x, method="average").reshape(x.shape)
    return ndtri((ranks - 0.375) / (x.size + 0.25))


def folded_rhat(draws) -> float:
    """Split R-hat of the rank-normalized folded draws |x - median|.

    Sensitive to scale (variance) differences between chains that the
    mean-based classic statistic cannot see.
    """
    x = _as_chain_matrix(draws)
    folded = np.abs(x - np.median(x))
    return split_rhat(rank_normalize(folded))


def rank_normalized_rhat(draws) -> float:
    return split_rhat(rank_normalize(_as_chain_matrix(draws)))


def rhat_report(draws) -> dict[str, float]:
    """All four variants; "max" is the headline value."""
    classic = split_rhat(draws)
    ranknorm = rank_normalized_rhat(draws)
    folded = folded_rhat(draws)
    variants = [v for v in (classic, ranknorm, folded) if not np.isnan(v)]
    headline = max(variants) if variants else float("nan")
    return {"classic": classic, "rank_normalized": ranknorm,
            "folded": folded, "max": headline}


# ----------------------------------------------------------------------
# effective sample size (Geyer initial monotone sequence, split chains)
# ----------------------------------------------------------------------

def _autocovariance(x: np.ndarray) -> np.ndarray:
    """Direct-sum autocovariance of one chain at all lags, biased (1/N)."""
    z = x - x.mean()
    n = z.size
    return np.correlate(z, z, mode="full")[n - 1:] / n


def _geyer_tau(x: np.ndarray) -> float:
    """Integrated autocorrelation time over split chains.

    Combines within-chain autocovariances with the between-chain variance
    (so unmixed chains show up as large tau), truncates at the first
    negative paired sum, and enforces monotone non-increasing pairs.
    """
    m, n = x.shape
    chain_var = np.var(x, axis=1, ddof=1)
    w = float(np.mean(chain_var))
    means = x.mean(axis=1)
    if m > 1:
        b_over_n = float(np.var(means, ddof=1))
    else:
        b_over_n = 0.0
    var_plus = (n - 1) / n * w + b_over_n
    if var_plus == 0.0:
        return float("nan")

    acov = np.stack([_autocovariance(x[c]) for c in range(m)]).mean(axis=0)
    rho = 1.0 - (w - acov) / var_plus
    rho[0] = 1.0

    # paired sums; stop before the first negative pair
    max_pairs = (n - 2) // 2
    pair_sums = []
    for k in range(max_pairs + 1):
        s = rho[2 * k] + rho[2 * k + 1]
        if s <= 0.0:
            break
        pair_sums.append(s)
    if not pair_sums:
        return 1.0
    # initial monotone sequence: non-increasing pair sums
    for k in range(1, len(pair_sums)):
        pair_sums[k] = min(pair_sums[k], pair_sums[k - 1])
    tau = -1.0 + 2.0 * float(np.sum(pair_sums))
    return max(tau, 1.0 / np.log10(max(m * n, 10)))


def _ess_from_matrix(x: np.ndarray) -> float:
    m, n = x.shape
    tau = _geyer_tau(x)
    if np.isnan(tau):
        return float("nan")
    return m * n / tau


def ess(draws, kind: str = "bulk", q: float | None = None) -> float:
    """Effective sample size for one parameter.

    kind: "bulk" (rank-normalized draws), "tail" (min over the 5% and 95%
    quantile indicators), "mean" (raw draws), "sd" (squared centered
    draws), "median" (50% quantile indicator), or "quantile" with q given.
    Chains are split in half first.
    """
    x = split_chains(draws)
    if float(np.var(x)) == 0.0:
        return float("nan")
    if kind == "mean":
        return _ess_from_matrix(x)
    if kind == "bulk":
        return _ess_from_matrix(rank_normalize(x))
    if kind == "sd":
        centered = x - x.mean()
        return _ess_from_matrix(centered * centered)
    if kind == "tail":
        return min(ess_quantile(draws, 0.05), ess_quantile(draws, 0.95))
    if kind == "median":
        return ess_quantile(draws, 0.5)
    if kind == "quantile":
        if q is None:
            raise DiagnosticsError("quantile ESS needs q")
        return ess_quantile(draws, q)
    raise DiagnosticsError(f"unknown ESS kind {kind!r}")


def ess_quantile(draws, q: float) -> float:
    """ESS of the indicator I(x <= pooled q-quantile)."""
    x = split_chains(draws)
    cut = np.quantile(x, q)
    indicator = (x <= cut).astype(float)
    if float(np.var(indicator)) == 0.0:
        return float("nan")
    return _ess_from_matrix(indicator)


def quantile_ess_curve(draws, qs=None) -> list[tuple[float, float]]:
    """(q, ESS(q)) pairs — plot-ready data for quantile-resolved mixing."""
    if qs is None:
        qs = np.linspace(0.05, 0.95, 19)
    return [(float(q), ess_quantile(draws, float(q))) for q in qs]


def rank_histogram(draws, n_bins: int = 20) -> np.ndarray:
    """Per-chain histogram counts of pooled ranks, (n_chains, n_bins).

    Uniform rows indicate well-mixed chains.
    """
    x = _as_chain_matrix(draws)
    ranks = rankdata(x, method="average").reshape(x.shape)
    edges = np.linspace(0.5, x.size + 0.5, n_bins + 1)
    return np.stack([np.histogram(r, bins=edges)[0] for r in ranks])


# ----------------------------------------------------------------------
# per-parameter report
# ----------------------------------------------------------------------

@dataclass
class ParameterDiagnostics:
    name: str
    mean: float
    sd: float
    median: float
    q5: float
    q95: float
    rhat_classic: float
    rhat_rank_normalized: float
    rhat_folded: float
    rhat_max: float
    ess_bulk: float
    ess_tail: float
    ess_mean: float
    ess_sd: float
    ess_median: float
    note: str = ""


@dataclass
class DiagnosticReport:
    parameters: list[ParameterDiagnostics]
    n_chains: int
    n_kept: int
    n_divergent: int = 0
    warnings: list[str] = field(default_factory=list)

    def worst_rhat(self) -> float:
        values = [p.rhat_max for p in self.parameters if not np.isnan(p.rhat_max)]
        return max(values) if values else float("nan")

    def min_ess_bulk(self) -> float:
        values = [p.ess_bulk for p in self.parameters if not np.isnan(p.ess_bulk)]
        return min(values) if values else float("nan")

    def gate(self, fail_above: float = 1.05, warn_above: float = 1.01):
        """Convergence gate: (passed, messages).

        Fails on any R-hat above ``fail_above``; warns above ``warn_above``.
        """
        messages = list(self.warnings)
        passed = True
        for p in self.parameters:
            if np.isnan(p.rhat_max):
                continue
            if p.rhat_max > fail_above:
                passed = False
                messages.append(f"FAIL {p.name}: rhat {p.rhat_max:.4f} > {fail_above}")
            elif p.rhat_max > warn_above:
                messages.append(f"warn {p.name}: rhat {p.rhat_max:.4f} > {warn_above}")
        return passed, messages


def summarize(draws_3d, names: list[str], n_divergent: int = 0) -> DiagnosticReport:
    """Full per-parameter report from a (n_chains, kept, P) draw stack."""
    x = np.asarray(draws_3d, dtype=float)
    if x.ndim != 3:
        raise DiagnosticsError("expected draws of shape (n_chains, kept, P)")
    m, n, n_param = x.shape
    if n_param != len(names):
        raise DiagnosticsError("names do not match parameter count")
    if n == 0:
        raise DiagnosticsError("no kept draws")
    cap = 1.5 * m * n
    rows = []
    warnings: list[str] = []
    for j, name in enumerate(names):
        d = x[:, :, j]
        pooled = d.ravel()
        note = ""
        if float(np.var(pooled)) == 0.0:
            note = "zero variance"
        r = rhat_report(d) if n >= 4 else {
            "classic": float("nan"), "rank_normalized": float("nan"),
            "folded": float("nan"), "max": float("nan")}
        e = {}
        for kind in ("bulk", "tail", "mean", "sd", "median"):
            value = ess(d, kind) if n >= 8 and not note else float("nan")
            if not np.isnan(value) and value > cap:
                warnings.append(
                    f"{name}: ess_{kind} {value:.0f} exceeds 1.5x draw count, capped")
                value = cap
            e[kind] = value
        rows.append(ParameterDiagnostics(
            name=name,
            mean=float(pooled.mean()),
            sd=float(pooled.std(ddof=1)) if pooled.size > 1 else 0.0,
            median=float(np.median(pooled)),
            q5=float(np.quantile(pooled, 0.05)),
            q95=float(np.quantile(pooled, 0.95)),
            rhat_classic=r["classic"],
            rhat_rank_normalized=r["rank_normalized"],
            rhat_folded=r["folded"],
            rhat_max=r["max"],
            ess_bulk=e["bulk"],
            ess_tail=e["tail"],
            ess_mean=e["mean"],
            ess_sd=e["sd"],
            ess_median=e["median"],
            note=note,
        ))
    return DiagnosticReport(parameters=rows, n_chains=m, n_kept=n,
                            n_divergent=n_divergent, warnings=warnings)


def report_to_rows(report: DiagnosticReport) -> list[dict]:
    """Flat dict rows for delimited output."""
    out = []
    for p in report.parameters:
        out.append({
            "parameter": p.name, "mean": p.mean, "sd": p.sd,
            "median": p.median, "q5": p.q5, "q95": p.q95,
            "rhat_classic": p.rhat_classic,
            "rhat_rank_normalized": p.rhat_rank_normalized,
            "rhat_folded": p.rhat_folded, "rhat_max": p.rhat_max,
            "ess_bulk": p.ess_bulk, "ess_tail": p.ess_tail,
            "ess_mean": p.ess_mean, "ess_sd": p.ess_sd,
            "ess_median": p.ess_median, "note": p.note,
        })
    return out
