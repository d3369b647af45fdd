"""Design matrices and squared-exponential covariance construction.

Observations are stacked age-major: all years for the first age, then all
years for the second age, and so on. For each grid cell the fixed-effects
row is [1, t - t_bar] with t_bar the mean of the *training* years, the
intercept/slope incidence rows pick the cell's age, and the cohort dummy
row picks the cell's year of birth t - x. Cohort labels run consecutively
from years[0] - ages[-1] to years[-1] - ages[0].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import FactorizationError

ROW_ORDER = "age-major"

#: Diagonal inflation applied once, relative to mean(diag(V)), when a
#: positive-definiteness factorization fails; a second failure is fatal.
JITTER_REL = 1e-8


@dataclass(frozen=True)
class KernelParams:
    """Covariance hyperparameters and the observation-noise variance.

    ``h1``/``l1`` and ``h2``/``l2`` are the amplitude/length-scale pairs of
    the age-intercept and age-slope kernels, ``c``/``s`` the pair of the
    cohort kernel, ``sigma2`` the iid noise variance. All must be strictly
    positive and finite. Kernel entries follow the convention
    amplitude^2 * exp(-(u - v)^2 / (2 * length)) — the length-scale enters
    the denominator linearly, not squared.
    """

    h1: float
    l1: float
    h2: float
    l2: float
    c: float
    s: float
    sigma2: float

    NAMES = ("h1", "l1", "h2", "l2", "c", "s", "sigma2")

    def __post_init__(self):
        for name in self.NAMES:
            v = float(getattr(self, name))
            if not np.isfinite(v) or v <= 0.0:
                raise ValueError(f"{name} must be strictly positive and finite, got {v!r}")
            object.__setattr__(self, name, v)

    def as_array(self) -> np.ndarray:
        """Parameters as [h1, l1, h2, l2, c, s, sigma2]."""
        return np.array([getattr(self, n) for n in self.NAMES])

    @classmethod
    def from_array(cls, a) -> "KernelParams":
        a = np.asarray(a, dtype=float)
        if a.shape != (7,):
            raise ValueError(f"expected 7 parameters, got shape {a.shape}")
        return cls(*a)


@dataclass(frozen=True)
class DesignSet:
    """Design matrices tying stacked observations to fixed and random effects.

    With n training years, m ages and forecast horizon h, the stacked system
    has N = (n + h) * m rows in age-major order. ``T`` is N x 2, ``Z1`` and
    ``Z2`` are N x m, ``Z3`` is N x (n + h + m - 1) over ``cohort_index``.
    ``row_age``/``row_year``/``row_cohort`` give each row's index into the
    age, year and cohort axes.
    """

    ages: np.ndarray
    train_years: np.ndarray
    horizon: int
    t_bar: float
    T: np.ndarray
    Z1: np.ndarray
    Z2: np.ndarray
    Z3: np.ndarray
    cohort_index: np.ndarray
    row_age: np.ndarray
    row_year: np.ndarray
    row_cohort: np.ndarray
    row_order: str = ROW_ORDER

    @property
    def n_train(self) -> int:
        return self.train_years.size

    @property
    def n_ages(self) -> int:
        return self.ages.size

    @property
    def years(self) -> np.ndarray:
        """All modelled years, training plus any forecast extension."""
        t0 = int(self.train_years[0])
        return np.arange(t0, t0 + self.n_train + self.horizon)

    @property
    def n_train_cohorts(self) -> int:
        return self.n_train + self.n_ages - 1


def build_design(ages, train_years, horizon: int = 0) -> DesignSet:
    """Construct the stacked design for a training window, optionally extended.

    Parameters
    ----------
    ages, train_years : iterables of consecutive integers
    horizon : int >= 0
        0 gives the training design. h > 0 appends rows for h further years
        to every age block and widens the cohort axis accordingly; the time
        centering t_bar stays the training-year mean.
    """
    ages = np.asarray(list(ages), dtype=int)
    train_years = np.asarray(list(train_years), dtype=int)
    if ages.size == 0 or train_years.size == 0:
        raise ValueError("ages and train_years must be non-empty")
    for name, axis in (("ages", ages), ("train_years", train_years)):
        if axis.size > 1 and np.any(np.diff(axis) != 1):
            raise ValueError(f"{name} must be consecutive integers")
    if horizon < 0:
        raise ValueError("horizon must be >= 0")

    m = ages.size
    n = train_years.size
    t_bar = float(train_years.mean())
    years = np.arange(train_years[0], train_years[-1] + horizon + 1)
    n_all = years.size
    N = n_all * m

    cohort_lo = int(years[0] - ages[-1])
    cohort_hi = int(years[-1] - ages[0])
    cohort_index = np.arange(cohort_lo, cohort_hi + 1)

    row_age = np.repeat(np.arange(m), n_all)
    row_year = np.tile(np.arange(n_all), m)
    tau = years[row_year] - t_bar
    row_cohort = (years[row_year] - ages[row_age]) - cohort_lo

    T = np.column_stack([np.ones(N), tau])
    rows = np.arange(N)
    Z1 = np.zeros((N, m))
    Z1[rows, row_age] = 1.0
    Z2 = np.zeros((N, m))
    Z2[rows, row_age] = tau
    Z3 = np.zeros((N, cohort_index.size))
    Z3[rows, row_cohort] = 1.0

    return DesignSet(
        ages=ages,
        train_years=train_years,
        horizon=int(horizon),
        t_bar=t_bar,
        T=T,
        Z1=Z1,
        Z2=Z2,
        Z3=Z3,
        cohort_index=cohort_index,
        row_age=row_age,
        row_year=row_year,
        row_cohort=row_cohort,
    )


def se_kernel(labels_a, labels_b, amplitude: float, length: float) -> np.ndarray:
    """Squared-exponential covariance between two label sets.

    Entry (p, q) is amplitude^2 * exp(-(a_p - b_q)^2 / (2 * length)).
    """
    if not (np.isfinite(amplitude) and amplitude > 0):
        raise ValueError(f"amplitude must be positive, got {amplitude!r}")
    if not (np.isfinite(length) and length > 0):
        raise ValueError(f"length must be positive, got {length!r}")
    a = np.asarray(labels_a, dtype=float)
    b = np.asarray(labels_b, dtype=float)
    d2 = (a[:, None] - b[None, :]) ** 2
    return amplitude**2 * np.exp(-d2 / (2.0 * length))


def build_covariances(
    params: KernelParams, design: DesignSet
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Training covariance matrices (K1, K2, K3) for a design with horizon 0."""
    if design.horizon != 0:
        raise ValueError("build_covariances expects a training design (horizon 0)")
    K1 = se_kernel(design.ages, design.ages, params.h1, params.l1)
    K2 = se_kernel(design.ages, design.ages, params.h2, params.l2)
    K3 = se_kernel(design.cohort_index, design.cohort_index, params.c, params.s)
    return K1, K2, K3


def build_forecast_covariances(
    params: KernelParams, design_h: DesignSet
) -> tuple[np.ndarray, np.ndarray]:
    """Cohort covariance blocks linking the extended axis to the training axis.

    Returns
    -------
    K3_star : (n+h+m-1) x (n+m-1)
        Cross-covariance of the extended cohort labels with the training ones;
        its top (n+m-1) x (n+m-1) block equals the training K3.
    K3_star_star : (n+h+m-1) x (n+h+m-1)
        Self-covariance of the extended cohort labels.
    """
    ext = design_h.cohort_index
    train = ext[: design_h.n_train_cohorts]
    K3_star = se_kernel(ext, train, params.c, params.s)
    K3_star_star = se_kernel(ext, ext, params.c, params.s)
    return K3_star, K3_star_star


def assemble_V(params: KernelParams, design: DesignSet) -> np.ndarray:
    """Marginal covariance V = Z1 K1 Z1' + Z2 K2 Z2' + Z3 K3 Z3' + sigma2 I.

    The returned matrix is exact (no jitter); positive definiteness is
    verified via the shared jitter policy and failure raises
    ``FactorizationError``.
    """
    if design.horizon != 0:
        raise ValueError("assemble_V expects a training design (horizon 0)")
    K1, K2, K3 = build_covariances(params, design)
    V = _assemble_V_from_kernels(params.sigma2, design, K1, K2, K3)
    cholesky_with_jitter(V)  # validate on a copy; degenerate params fail here
    return V


def _assemble_V_from_kernels(sigma2, design, K1, K2, K3) -> np.ndarray:
    # the incidence matrices are one-hot per row, so each sandwich product
    # is a gather: (Z K Z')[r, s] = K[label_r, label_s] (times the centered
    # times for the slope block); this avoids O(N^2 m) dense matmuls
    ra, rc = design.row_age, design.row_cohort
    tau = design.T[:, 1]
    V = K1[np.ix_(ra, ra)]
    slope = K2[np.ix_(ra, ra)]
    slope *= tau[:, None]
    slope *= tau[None, :]
    V += slope
    V += K3[np.ix_(rc, rc)]
    V[np.diag_indices_from(V)] += sigma2
    return V


def cholesky_with_jitter(V: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of V, adding one round of diagonal jitter if needed.

    Returns (L, jitter) where jitter is 0.0 or the amount added to the
    diagonal. A second factorization failure raises ``FactorizationError``.
    """
    try:
        return scipy.linalg.cholesky(V, lower=True, check_finite=False), 0.0
    except scipy.linalg.LinAlgError:
        pass
    jitter = JITTER_REL * float(np.mean(np.diag(V)))
    Vj = V + jitter * np.eye(V.shape[0])
    try:
        return scipy.linalg.cholesky(Vj, lower=True, check_finite=False), jitter
    except scipy.linalg.LinAlgError:
        raise FactorizationError(
            "covariance not positive definite even after jitter"
        ) from None
