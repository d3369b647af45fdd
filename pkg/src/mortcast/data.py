"""Mortality table ingestion and logit-rate surfaces.

Raw tables hold central death rates m (or, for pre-converted sources,
one-year death probabilities q) on an annual single-age grid. A
``MortalitySurface`` is the complete rectangular window of logit initial
rates y = log(q / (1 - q)) that the models consume, with
q = 1 - exp(-m) linking the two rate definitions.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DuplicateCellError,
    EmptyInputError,
    MissingCellError,
    NonFiniteLogitError,
    ParseError,
)

HMD_SEX_COLUMNS = {"female": 2, "male": 3, "total": 4}


def central_to_initial(m):
    """Convert central death rates to initial (one-year) death probabilities.

    Parameters
    ----------
    m : float or ndarray
        Central rates, must be finite and >= 0.

    Returns
    -------
    q : same shape as ``m``
        1 - exp(-m), in [0, 1).
    """
    m = np.asarray(m, dtype=float)
    if not np.all(np.isfinite(m)):
        raise ValueError("central rate must be finite")
    if np.any(m < 0):
        raise ValueError("central rate must be >= 0")
    q = -np.expm1(-m)
    return q if q.ndim else float(q)


def initial_to_central(q):
    """Inverse of :func:`central_to_initial`: m = -log(1 - q) for q in [0, 1)."""
    q = np.asarray(q, dtype=float)
    if np.any(q < 0) or np.any(q >= 1):
        raise ValueError("initial rate must lie in [0, 1)")
    m = -np.log1p(-q)
    return m if m.ndim else float(m)


def logit(q):
    """log(q / (1 - q)) for q strictly inside (0, 1).

    Raises
    ------
    NonFiniteLogitError
        If any value sits on or outside the open unit interval. Rates are
        never clamped here; see the ``clamp_q`` option of :func:`build_surface`.
    """
    q = np.asarray(q, dtype=float)
    if np.any(~np.isfinite(q)) or np.any(q <= 0.0) or np.any(q >= 1.0):
        raise NonFiniteLogitError("rate outside (0, 1)")
    y = np.log(q) - np.log1p(-q)
    return y if y.ndim else float(y)


def inverse_logit(y):
    """Logistic map exp(y) / (1 + exp(y)), numerically stable for large |y|."""
    y = np.asarray(y, dtype=float)
    q = np.where(y >= 0, 1.0 / (1.0 + np.exp(-y)), np.exp(y) / (1.0 + np.exp(y)))
    return q if q.ndim else float(q)


@dataclass(frozen=True)
class RawMortalityTable:
    """Long-format mortality rows keyed by (year, age).

    Parameters
    ----------
    years, ages : int arrays, one entry per row
    rates : float array
        Central rates m, or initial rates q when ``rate_kind == "initial"``.
    deaths, exposures : float arrays or None
        Optional observed death counts and central exposures, aligned with rows.
        NaN marks a row without the value.
    rate_kind : {"central", "initial"}
    """

    years: np.ndarray
    ages: np.ndarray
    rates: np.ndarray
    deaths: np.ndarray | None = None
    exposures: np.ndarray | None = None
    rate_kind: str = "central"
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        years = np.asarray(self.years, dtype=int)
        ages = np.asarray(self.ages, dtype=int)
        rates = np.asarray(self.rates, dtype=float)
        object.__setattr__(self, "years", years)
        object.__setattr__(self, "ages", ages)
        object.__setattr__(self, "rates", rates)
        if self.rate_kind not in ("central", "initial"):
            raise ValueError(f"unknown rate_kind {self.rate_kind!r}")
        if len(years) == 0:
            raise EmptyInputError("table has no rows")
        index = {}
        for i, (t, x) in enumerate(zip(years, ages)):
            key = (int(t), int(x))
            if key in index:
                raise DuplicateCellError(f"duplicate cell (year={t}, age={x})")
            index[key] = i
        object.__setattr__(self, "_index", index)
        if self.deaths is not None and self.exposures is not None:
            d = np.asarray(self.deaths, dtype=float)
            e = np.asarray(self.exposures, dtype=float)
            ok = np.isfinite(d) & np.isfinite(e) & (e > 0)
            implied = np.where(ok, d / np.where(ok, e, 1.0), np.nan)
            bad = ok & (
                np.abs(rates - implied) > 1e-6 * np.maximum(rates, 1e-12)
            )
            if np.any(bad):
                i = int(np.argmax(bad))
                raise ValueError(
                    f"rate inconsistent with deaths/exposure at "
                    f"(year={years[i]}, age={ages[i]}): "
                    f"m={rates[i]!r} vs D/E={implied[i]!r}"
                )

    def lookup(self, year: int, age: int) -> int:
        """Row index of a cell, raising ``MissingCellError`` if absent."""
        try:
            return self._index[(int(year), int(age))]
        except KeyError:
            raise MissingCellError(f"no data for (year={year}, age={age})") from None


def _parse_hmd_1x1(text: str, sex: str) -> RawMortalityTable:
    if sex not in HMD_SEX_COLUMNS:
        raise ValueError(f"sex must be one of {sorted(HMD_SEX_COLUMNS)}, got {sex!r}")
    col = HMD_SEX_COLUMNS[sex]
    years, ages, rates = [], [], []
    seen_header = False
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if not seen_header:
            # Preamble ends at the "Year Age Female Male Total" header; some
            # files omit it, so a data-shaped line also starts the table.
            if fields[0].lower() == "year":
                seen_header = True
                continue
            if not fields[0].isdigit():
                continue
            seen_header = True
        if fields[0].lower() == "year":
            continue
        if len(fields) != 5:
            raise ParseError(
                f"expected 5 whitespace-separated columns, got {len(fields)}",
                line=lineno,
            )
        try:
            year = int(fields[0])
        except ValueError:
            raise ParseError(f"bad year field {fields[0]!r}", line=lineno) from None
        age_txt = fields[1]
        if age_txt.endswith("+"):
            age_txt = age_txt[:-1]
        try:
            age = int(age_txt)
        except ValueError:
            raise ParseError(f"bad age field {fields[1]!r}", line=lineno) from None
        value = fields[col]
        if value == ".":
            continue  # HMD missing-value marker; cell simply absent
        try:
            rate = float(value)
        except ValueError:
            raise ParseError(f"bad rate field {value!r}", line=lineno) from None
        years.append(year)
        ages.append(age)
        rates.append(rate)
    if not years:
        raise EmptyInputError("no data rows found")
    return RawMortalityTable(np.array(years), np.array(ages), np.array(rates))


def _parse_csv(text: str) -> RawMortalityTable:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise EmptyInputError("no data rows found") from None
    header = [h.strip().lower() for h in header]
    required = {"year", "age"}
    if not required.issubset(header):
        missing = sorted(required - set(header))
        raise ParseError(f"missing required column(s) {missing}", line=1)
    if "mx" in header:
        rate_col, rate_kind = header.index("mx"), "central"
    elif "qx" in header:
        rate_col, rate_kind = header.index("qx"), "initial"
    else:
        raise ParseError("need a rate column named 'mx' or 'qx'", line=1)
    known = {"year", "age", "mx", "qx", "deaths", "exposure"}
    unknown = [h for h in header if h not in known]
    if unknown:
        raise ParseError(f"unknown column(s) {unknown}", line=1)
    year_col, age_col = header.index("year"), header.index("age")
    deaths_col = header.index("deaths") if "deaths" in header else None
    expo_col = header.index("exposure") if "exposure" in header else None

    years, ages, rates, deaths, expos = [], [], [], [], []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not f.strip() for f in row):
            continue
        if len(row) != len(header):
            raise ParseError(
                f"expected {len(header)} fields, got {len(row)}", line=lineno
            )
        try:
            years.append(int(row[year_col]))
            ages.append(int(row[age_col]))
            rates.append(float(row[rate_col]))
            deaths.append(float(row[deaths_col]) if deaths_col is not None else np.nan)
            expos.append(float(row[expo_col]) if expo_col is not None else np.nan)
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from None
    if not years:
        raise EmptyInputError("no data rows found")
    return RawMortalityTable(
        np.array(years),
        np.array(ages),
        np.array(rates),
        deaths=np.array(deaths) if deaths_col is not None else None,
        exposures=np.array(expos) if expo_col is not None else None,
        rate_kind=rate_kind,
    )


def parse_table(text: str, fmt: str, sex: str = "total") -> RawMortalityTable:
    """Parse mortality text in either supported format.

    Parameters
    ----------
    text : str
        Full file contents.
    fmt : {"hmd_1x1", "csv"}
        ``hmd_1x1``: whitespace columns Year, Age, Female, Male, Total with
        header lines; age "110+" parses as 110; "." marks a missing cell.
        ``csv``: header ``year,age,mx`` (or ``qx``), optionally with
        ``deaths`` and ``exposure`` columns.
    sex : {"female", "male", "total"}
        Column selected from hmd_1x1 input; ignored for csv.
    """
    if fmt == "hmd_1x1":
        return _parse_hmd_1x1(text, sex)
    if fmt == "csv":
        return _parse_csv(text)
    raise ValueError(f"unknown format {fmt!r}")


@dataclass(frozen=True)
class MortalitySurface:
    """Complete rectangular grid of initial rates and their logits.

    Attributes
    ----------
    ages : int array, shape (m,)
        Consecutive single ages.
    years : int array, shape (n,)
        Consecutive calendar years.
    q : float array, shape (n, m)
        Initial rates in (0, 1); rows index years, columns index ages.
    y : float array, shape (n, m)
        logit(q).
    """

    ages: np.ndarray
    years: np.ndarray
    q: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        ages = np.asarray(self.ages, dtype=int)
        years = np.asarray(self.years, dtype=int)
        q = np.asarray(self.q, dtype=float)
        y = np.asarray(self.y, dtype=float)
        for name, axis in (("ages", ages), ("years", years)):
            if axis.size == 0:
                raise ValueError(f"{name} is empty")
            if axis.size > 1 and np.any(np.diff(axis) != 1):
                raise ValueError(f"{name} must be consecutive integers")
        if q.shape != (years.size, ages.size) or y.shape != q.shape:
            raise ValueError(
                f"grid shape {q.shape} does not match "
                f"{years.size} years x {ages.size} ages"
            )
        if np.any(q <= 0.0) or np.any(q >= 1.0):
            raise NonFiniteLogitError("surface rate outside (0, 1)")
        if not np.all(np.isfinite(y)):
            raise NonFiniteLogitError("non-finite logit in surface")
        if np.max(np.abs(y - (np.log(q) - np.log1p(-q)))) > 1e-12:
            raise ValueError("y grid is not the logit of the q grid")
        object.__setattr__(self, "ages", ages)
        object.__setattr__(self, "years", years)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "y", y)

    @property
    def n_years(self) -> int:
        return self.years.size

    @property
    def n_ages(self) -> int:
        return self.ages.size

    def to_csv(self) -> str:
        """Serialize as ``year,age,q,logit_q`` rows (round-trip precision)."""
        out = io.StringIO()
        out.write("year,age,q,logit_q\n")
        for i, t in enumerate(self.years):
            for j, x in enumerate(self.ages):
                out.write(
                    f"{t},{x},{float(self.q[i, j])!r},{float(self.y[i, j])!r}\n"
                )
        return out.getvalue()


def _axis(spec, name: str) -> np.ndarray:
    """Normalize an (lo, hi) pair or iterable of consecutive ints to an array."""
    if isinstance(spec, tuple) and len(spec) == 2 and all(
        np.isscalar(v) for v in spec
    ):
        lo, hi = int(spec[0]), int(spec[1])
        if hi < lo:
            raise ValueError(f"{name} range {lo}:{hi} is reversed")
        return np.arange(lo, hi + 1)
    arr = np.asarray(list(spec), dtype=int)
    if arr.size == 0:
        raise ValueError(f"{name} is empty")
    if arr.size > 1 and np.any(np.diff(arr) != 1):
        raise ValueError(f"{name} must be consecutive integers")
    return arr


def build_surface(
    table: RawMortalityTable,
    ages,
    years,
    clamp_q: float | None = None,
) -> MortalitySurface:
    """Window a raw table into a complete logit surface.

    Parameters
    ----------
    table : RawMortalityTable
    ages, years : (lo, hi) inclusive pairs or iterables of consecutive ints
    clamp_q : float, optional
        If given, zero (or sub-clamp) rates are replaced by this value
        instead of raising ``NonFiniteLogitError``. Off by default: silent
        imputation must be an explicit choice.

    Raises
    ------
    MissingCellError
        A requested cell is not in the table.
    NonFiniteLogitError
        A cell has q <= 0 (or q >= 1) and clamping is off.
    """
    ages = _axis(ages, "ages")
    years = _axis(years, "years")
    q = np.empty((years.size, ages.size))
    for i, t in enumerate(years):
        for j, x in enumerate(ages):
            r = table.rates[table.lookup(t, x)]
            qx = central_to_initial(r) if table.rate_kind == "central" else float(r)
            if qx <= 0.0:
                if clamp_q is None:
                    raise NonFiniteLogitError("rate q <= 0", year=int(t), age=int(x))
                qx = clamp_q
            if qx >= 1.0:
                raise NonFiniteLogitError("rate q >= 1", year=int(t), age=int(x))
            q[i, j] = qx
    return MortalitySurface(ages=ages, years=years, q=q, y=logit(q))


def window_counts(
    table: RawMortalityTable, ages, years
) -> tuple[np.ndarray, np.ndarray] | None:
    """Extract (deaths, exposures) grids for a window, or None if incomplete."""
    if table.deaths is None or table.exposures is None:
        return None
    ages = _axis(ages, "ages")
    years = _axis(years, "years")
    D = np.empty((years.size, ages.size))
    E = np.empty((years.size, ages.size))
    for i, t in enumerate(years):
        for j, x in enumerate(ages):
            r = table.lookup(t, x)
            D[i, j] = table.deaths[r]
            E[i, j] = table.exposures[r]
    if not (np.all(np.isfinite(D)) and np.all(np.isfinite(E)) and np.all(E > 0)):
        return None
    return D, E


def split_train_test(
    surface: MortalitySurface, last_train_year: int
) -> tuple[MortalitySurface, MortalitySurface]:
    """Partition a surface by calendar year into (train, test).

    ``last_train_year`` must satisfy years[0] <= last_train_year < years[-1]
    so that both halves are non-empty; the two halves share the age axis.
    """
    years = surface.years
    if not (years[0] <= last_train_year < years[-1]):
        raise ValueError(
            f"last_train_year {last_train_year} outside "
            f"[{years[0]}, {years[-1] - 1}]"
        )
    k = int(last_train_year - years[0]) + 1
    train = MortalitySurface(
        ages=surface.ages, years=years[:k], q=surface.q[:k], y=surface.y[:k]
    )
    test = MortalitySurface(
        ages=surface.ages, years=years[k:], q=surface.q[k:], y=surface.y[k:]
    )
    return train, test
