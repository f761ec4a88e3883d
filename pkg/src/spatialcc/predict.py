"""Posterior-predictive profile machinery.

Enumerates theoretical covariate profiles, computes their recruitment
propensity per posterior draw after removing the sampling offset and area
effects ("average area": gamma = 0, eta = 0), builds the four-metric
profile table (probability, rate per 10,000, odds relative to the average
profile, log-odds with a central 90% interval), the relative-deprivation
scenario table, and residual-by-area summaries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit

from .data import CaseControlData, StandardizationInfo


class PredictError(ValueError):
    pass


@dataclass(frozen=True)
class Profile:
    """Raw-scale covariate values plus an area assumption."""

    values: dict[str, float]
    area: str = "average"


def age_grid(max_age: float, min_age: float = 18, size: int = 10) -> list[int]:
    """Evenly spaced integer ages from min_age to max_age inclusive."""
    if max_age < min_age:
        raise PredictError("max_age below min_age")
    grid = np.linspace(min_age, max_age, size)
    return [int(round(a)) for a in grid]


def enumerate_profiles(binary_names: list[str], age_name: str,
                       ages: list[int]) -> list[Profile]:
    """Cartesian product of binary covariate levels and the age grid."""
    if not ages:
        raise PredictError("age grid must be non-empty")
    profiles = []
    n_bin = len(binary_names)
    for mask in range(2 ** n_bin):
        flags = {name: float((mask >> k) & 1) for k, name in enumerate(binary_names)}
        for a in ages:
            values = dict(flags)
            values[age_name] = float(a)
            profiles.append(Profile(values=values))
    return profiles


def profile_design_row(profile: Profile, info: StandardizationInfo) -> np.ndarray:
    """Standardized design row for a profile.

    Interaction columns ("a:b") are recomputed from the raw profile values
    and then standardized with the stored per-column mean and sd.
    """
    raw = np.ones(len(info.columns))
    for j, col in enumerate(info.columns[1:], start=1):
        value = 1.0
        for part in col.split(":"):
            if part not in profile.values:
                raise PredictError(f"profile is missing covariate {part!r}")
            value *= profile.values[part]
        raw[j] = value
    return info.apply_row(raw)


@dataclass
class ProfilePrediction:
    """Per-draw recruitment propensity for one profile, offset removed."""

    profile: Profile
    logit_draws: np.ndarray
    rel_prob_draws: np.ndarray

    @property
    def probability(self) -> float:
        return float(np.mean(expit(self.logit_draws)))

    @property
    def rate_per_10000(self) -> int:
        return int(round(self.probability * 10000))

    @property
    def rate_string(self) -> str:
        return f"{self.rate_per_10000}/10000"

    @property
    def log_odds(self) -> float:
        return float(logit(self.probability))

    @property
    def log_odds_interval(self) -> tuple[float, float]:
        return (float(np.quantile(self.logit_draws, 0.05)),
                float(np.quantile(self.logit_draws, 0.95)))

    @property
    def relative_odds(self) -> float:
        return float(np.mean(self.rel_prob_draws))


def extract_block(draws: np.ndarray, columns: list[str], prefix: str) -> np.ndarray:
    """Columns named ``prefix[...]`` as an (S, k) matrix, in file order."""
    idx = [j for j, c in enumerate(columns) if c.startswith(prefix + "[")]
    if not idx:
        raise PredictError(f"draws contain no {prefix!r} block")
    return draws[:, idx]


def predict_profile(beta_draws: np.ndarray, profile: Profile,
                    info: StandardizationInfo) -> ProfilePrediction:
    """Offset-free propensity of one profile for every posterior draw.

    logit_s = x_std(profile) . beta_s with no offset and no area effects.
    The per-draw relative probability is taken against the same-draw
    average profile (all columns at their means, i.e. a zero standardized
    row), whose propensity is just the intercept coefficient.
    """
    x = profile_design_row(profile, info)
    if beta_draws.shape[1] != x.size:
        raise PredictError("beta draws do not match the design columns")
    lo = beta_draws @ x
    lo_avg = beta_draws[:, 0]
    rel = expit(lo) / expit(lo_avg)
    return ProfilePrediction(profile=profile, logit_draws=lo, rel_prob_draws=rel)


def profile_table(beta_draws: np.ndarray, profiles: list[Profile],
                  info: StandardizationInfo, covariate_order: list[str] | None = None
                  ) -> list[dict]:
    """Ranked four-metric profile table, ordered by predicted probability.

    Every row satisfies log_odds = logit(probability) and rate =
    round(probability * 10000) exactly.
    """
    predictions = [predict_profile(beta_draws, pr, info) for pr in profiles]
    predictions.sort(key=lambda pp: pp.probability, reverse=True)
    if covariate_order is None:
        covariate_order = sorted(profiles[0].values)
    rows = []
    for rank, pp in enumerate(predictions, start=1):
        row = {"rank": rank}
        for name in covariate_order:
            row[name] = pp.profile.values[name]
        lo_q5, lo_q95 = pp.log_odds_interval
        row.update({
            "probability": pp.probability,
            "rate": pp.rate_string,
            "relative_odds": pp.relative_odds,
            "log_odds": pp.log_odds,
            "log_odds_q5": lo_q5,
            "log_odds_q95": lo_q95,
        })
        rows.append(row)
    return rows


DEPRIVATION_SCENARIOS = (
    ("high-status, no university", 0.0, 0.0),
    ("high-status, university", 1.0, 0.0),
    ("low-status, no university", 0.0, 1.0),
    ("relatively deprived (university + low-status)", 1.0, 1.0),
)


def relative_deprivation_scenarios(beta_draws: np.ndarray,
                                   info: StandardizationInfo,
                                   covariate_means: dict[str, float],
                                   coledu: str = "coledu",
                                   lowstat: str = "lowstat",
                                   hypothetical_n: int = 10000) -> list[dict]:
    """The four education-by-status cells with other covariates at means.

    Emits three scales per scenario: the total logit effect, odds relative
    to the average profile, and the expected count in a hypothetical
    population of ``hypothetical_n`` average-profile individuals whose
    deprivation status alone is changed.
    """
    interaction = f"{coledu}:{lowstat}"
    if interaction not in info.columns and f"{lowstat}:{coledu}" in info.columns:
        interaction = f"{lowstat}:{coledu}"
    if interaction not in info.columns:
        raise PredictError(f"design lacks the {coledu}x{lowstat} interaction")
    rows = []
    for label, edu_val, low_val in DEPRIVATION_SCENARIOS:
        values = dict(covariate_means)
        values[coledu] = edu_val
        values[lowstat] = low_val
        pp = predict_profile(beta_draws, Profile(values=values), info)
        lo = pp.logit_draws
        count_draws = expit(lo) * hypothetical_n
        rows.append({
            "scenario": label,
            coledu: edu_val,
            lowstat: low_val,
            "logit_mean": float(lo.mean()),
            "logit_q5": float(np.quantile(lo, 0.05)),
            "logit_q95": float(np.quantile(lo, 0.95)),
            "relative_odds": pp.relative_odds,
            "expected_count": float(count_draws.mean()),
            "expected_count_q5": float(np.quantile(count_draws, 0.05)),
            "expected_count_q95": float(np.quantile(count_draws, 0.95)),
        })
    return rows


# ----------------------------------------------------------------------
# in-sample machinery
# ----------------------------------------------------------------------

def linear_predictor_draws(draws: np.ndarray, columns: list[str],
                           data: CaseControlData) -> np.ndarray:
    """(S, n) in-sample logit-scale propensity including offset and areas."""
    beta = extract_block(draws, columns, "beta")
    gamma = extract_block(draws, columns, "gamma")
    mu = beta @ data.design.X.T + gamma[:, data.small_area_id]
    mu += data.log_offset[data.large_area_id][None, :]
    if any(c.startswith("eta[") for c in columns):
        eta = extract_block(draws, columns, "eta")
        sigma_eta = draws[:, columns.index("sigma_eta")]
        mu += sigma_eta[:, None] * eta[:, data.large_area_id]
    return mu


def latent_propensity_draws(draws: np.ndarray, columns: list[str],
                            data: CaseControlData) -> np.ndarray:
    """(S, n) propensity net of the sampling offset (the mu-star scale)."""
    mu = linear_predictor_draws(draws, columns, data)
    return mu - data.log_offset[data.large_area_id][None, :]


def residual_by_area(draws: np.ndarray, columns: list[str],
                     data: CaseControlData) -> list[dict]:
    """Observed counts, mean label residual, and gamma summaries per area.

    The residual averages y_i minus the posterior-predictive label
    probability rho_i * theta1 over the observations of each area, then
    over draws. Areas with no observations report a missing residual but
    still carry their (spatially interpolated) gamma summary.
    """
    mu = linear_predictor_draws(draws, columns, data)
    theta_obs = data.theta1[data.large_area_id]
    yhat = expit(mu) * theta_obs[None, :]
    resid = data.y[None, :] - yhat
    gamma = extract_block(draws, columns, "gamma")
    rows = []
    for l, name in enumerate(data.small_area_names):
        mask = data.small_area_id == l
        n_obs = int(mask.sum())
        if n_obs:
            mean_resid = float(resid[:, mask].mean(axis=1).mean())
        else:
            mean_resid = float("nan")
        rows.append({
            "area": name,
            "n_obs": n_obs,
            "n_cases": int(data.y[mask].sum()) if n_obs else 0,
            "mean_residual": mean_resid,
            "gamma_mean": float(gamma[:, l].mean()),
            "gamma_positive_prob": float(np.mean(gamma[:, l] > 0)),
        })
    return rows


def area_residual_draws(draws: np.ndarray, columns: list[str],
                        data: CaseControlData) -> tuple[np.ndarray, np.ndarray]:
    """Per-draw per-area mean residuals, (S, L_observed).

    Returns (residual matrix, observed-area indices); feed each row to
    Moran's I on the corresponding subgraph to test for leftover spatial
    structure.
    """
    mu = linear_predictor_draws(draws, columns, data)
    theta_obs = data.theta1[data.large_area_id]
    resid = data.y[None, :] - expit(mu) * theta_obs[None, :]
    L = data.n_small_areas
    observed = np.array(sorted(set(data.small_area_id.tolist())), dtype=np.int64)
    out = np.empty((draws.shape[0], observed.size))
    for k, l in enumerate(observed):
        out[:, k] = resid[:, data.small_area_id == l].mean(axis=1)
    return out, observed
