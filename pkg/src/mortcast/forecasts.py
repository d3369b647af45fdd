"""Forecast grids with Gaussian prediction intervals, shared by both models."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.stats


def normal_quantile(alpha: float) -> float:
    """z such that a mean +/- z * sd band has coverage 1 - alpha."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha!r}")
    return float(scipy.stats.norm.ppf(1.0 - alpha / 2.0))


@dataclass(frozen=True)
class Forecast:
    """Per-cell forecast means and variances on the logit scale.

    Grids cover every modelled year (training years first, then the
    ``horizon`` extrapolated ones) with rows indexing years and columns
    indexing ages, matching ``MortalitySurface``.
    """

    ages: np.ndarray
    years: np.ndarray
    horizon: int
    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        if self.mean.shape != (self.years.size, self.ages.size):
            raise ValueError("mean grid shape does not match axes")
        if self.variance.shape != self.mean.shape:
            raise ValueError("variance grid shape does not match mean")
        if np.any(self.variance < 0):
            raise ValueError("negative forecast variance")

    @property
    def forecast_years(self) -> np.ndarray:
        """The extrapolated years only."""
        return self.years[self.years.size - self.horizon:]

    def forecast_mean(self) -> np.ndarray:
        """Mean grid restricted to the extrapolated years."""
        return self.mean[self.years.size - self.horizon:]

    def interval(self, alpha: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
        """(lower, upper) bounds mean -/+ z_alpha * sqrt(variance), per cell."""
        half = normal_quantile(alpha) * np.sqrt(self.variance)
        return self.mean - half, self.mean + half

    def year_slice(self, year: int) -> tuple[np.ndarray, np.ndarray]:
        """(mean, variance) curves across ages for one year."""
        idx = np.flatnonzero(self.years == year)
        if idx.size == 0:
            raise ValueError(f"year {year} not covered by this forecast")
        return self.mean[idx[0]], self.variance[idx[0]]
