"""Counterfactual estimators with the sub-sampling correction.

Kept impressions carry a sampling weight ``s = 1 / Pr(kept | delta)`` (1 for
clicked, ``1 / keep_prob`` for unclicked).  With ``u = pi(y|x) / q`` and the
corrected weight ``w = s * u``::

    N_hat = sum(s)
    IPS   = sum(delta * w) / N_hat
    C_hat = sum(w) / N_hat
    SNIPS = IPS / C_hat

Variances
---------
IPS and ``C_hat`` are ratios of two sub-sampled totals (the weighted sum and
``N_hat``), so their standard errors come from linearizing the ratio::

    var(IPS) = sum(s**2 * (delta*u - IPS)**2) / N_hat**2

and likewise for ``C_hat`` with ``u``.  Without sub-sampling this is the usual
plug-in ``(mean(x**2) - mean(x)**2) / n``.  For the logging policy every
``u`` equals 1, so the ``C_hat`` interval is exactly zero.  The SNIPS
interval uses the delta method on the pairs ``(delta*w, w)``, which reduces
to ``sum(w**2 * (delta - SNIPS)**2) / (N_hat * C_hat)**2``.

All totals are kept with compensated summation so that accumulators can be
merged across chunks without losing the 1e-9 identities.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .data import LoggedData
from .logformat import ImpressionRecord
from .policies import EpsilonMixturePolicy, Policy, importance_weight

Z99 = 2.576

DEFAULT_EPS_GRID = (0.0,) + tuple(2.0 ** -j for j in range(10, 0, -1)) + (1.0,)

_SUMS = ("sumS", "sumS2", "sumW", "sumW2", "sumSW", "sumDW", "sumDW2", "sumSDW", "sumDWxW")


class EstimationError(ValueError):
    pass


class NoOverlapError(EstimationError):
    """The evaluated policy puts no mass on any logged ranking (C_hat = 0)."""


def _two_sum(a: float, b: float) -> tuple:
    s = a + b
    if abs(a) >= abs(b):
        return s, (a - s) + b
    return s, (b - s) + a


@dataclass
class EstimatorAccumulator:
    """Mergeable sufficient statistics for N_hat, IPS, C_hat and SNIPS.

    Each total is stored as a (value, compensation) pair.  ``sumW`` etc. are
    exposed as properties returning the compensated value.
    """

    keep_prob: float = 1.0
    clickedCount: int = 0
    unclickedKeptCount: int = 0
    _totals: dict = field(default_factory=lambda: {k: (0.0, 0.0) for k in _SUMS}, repr=False)

    def __post_init__(self):
        if not 0 < self.keep_prob <= 1:
            raise ValueError("keep_prob must lie in (0, 1]")

    def __getattr__(self, name):
        if name in _SUMS:
            hi, lo = self.__dict__["_totals"][name]
            return hi + lo
        raise AttributeError(name)

    @property
    def keptCount(self) -> int:
        return self.clickedCount + self.unclickedKeptCount

    def _add(self, name: str, value: float) -> None:
        hi, lo = self._totals[name]
        hi, err = _two_sum(hi, value)
        self._totals[name] = (hi, lo + err)

    def add_arrays(self, weight_ratio, clicked) -> "EstimatorAccumulator":
        """Add kept records given ``u = pi/q`` and the banner click ``delta``."""
        u = np.asarray(weight_ratio, dtype=float)
        d = np.asarray(clicked)
        if u.shape != d.shape:
            raise ValueError("weight_ratio and clicked differ in shape")
        if np.any(u < 0) or not np.all(np.isfinite(u)):
            raise EstimationError("importance weights must be finite and non-negative")
        pos = d > 0
        s = np.where(pos, 1.0, 1.0 / self.keep_prob)
        w = s * u
        dw = np.where(pos, w, 0.0)
        for name, arr in (("sumS", s), ("sumS2", s * s), ("sumW", w), ("sumW2", w * w),
                          ("sumSW", s * w), ("sumDW", dw), ("sumDW2", dw * dw),
                          ("sumSDW", s * dw), ("sumDWxW", dw * w)):
            self._add(name, math.fsum(arr.tolist()))
        nc = int(pos.sum())
        self.clickedCount += nc
        self.unclickedKeptCount += len(d) - nc
        return self

    def add_logged(self, data: LoggedData, policy: Policy) -> "EstimatorAccumulator":
        if data.keep_prob != self.keep_prob:
            raise ValueError("log and accumulator disagree on keep_prob")
        if not len(data):
            return self
        if np.any(data.propensity <= 0):
            raise EstimationError("logged propensity must be positive")
        u = policy.prob(data.contexts, data.rankings) / data.propensity
        return self.add_arrays(u, data.clicked)

    def merge(self, other: "EstimatorAccumulator") -> "EstimatorAccumulator":
        if other.keep_prob != self.keep_prob:
            raise ValueError("cannot merge accumulators with different keep_prob")
        out = EstimatorAccumulator(self.keep_prob, self.clickedCount + other.clickedCount,
                                   self.unclickedKeptCount + other.unclickedKeptCount)
        for k in _SUMS:
            a_hi, a_lo = self._totals[k]
            b_hi, b_lo = other._totals[k]
            hi, err = _two_sum(a_hi, b_hi)
            out._totals[k] = (hi, a_lo + b_lo + err)
        return out


def accumulate(acc: EstimatorAccumulator, impression: ImpressionRecord, policy: Policy,
               keep_prob: float | None = None) -> EstimatorAccumulator:
    """Add one kept impression (record-level path)."""
    if keep_prob is not None and keep_prob != acc.keep_prob:
        raise ValueError("keep_prob differs from the accumulator's")
    return acc.add_arrays([importance_weight(policy, impression)], [impression.was_ad_clicked])


def n_hat(acc: EstimatorAccumulator) -> float:
    """Estimated impression count before sub-sampling: #clicked + #kept unclicked / keep_prob."""
    return acc.sumS


def _require(acc):
    if not n_hat(acc) > 0:
        raise EstimationError("empty log")


def ips_estimate(acc: EstimatorAccumulator) -> float:
    _require(acc)
    return acc.sumDW / n_hat(acc)


def control_variate(acc: EstimatorAccumulator) -> float:
    _require(acc)
    return acc.sumW / n_hat(acc)


def snips_estimate(acc: EstimatorAccumulator) -> float:
    c = control_variate(acc)
    if not c > 0:
        raise NoOverlapError("control variate is zero: the policy shares no support with the log")
    return ips_estimate(acc) / c


def _linearized_var(sum_x2, sum_sx, sum_s2, est, nh) -> float:
    # sum(s^2 (x - est)^2) / nh^2, written with the accumulated totals
    v = (sum_x2 - 2.0 * est * sum_sx + est * est * sum_s2) / (nh * nh)
    return max(v, 0.0)


def se_ips(acc: EstimatorAccumulator) -> float:
    r = ips_estimate(acc)
    return math.sqrt(_linearized_var(acc.sumDW2, acc.sumSDW, acc.sumS2, r, n_hat(acc)))


def se_control_variate(acc: EstimatorAccumulator) -> float:
    c = control_variate(acc)
    return math.sqrt(_linearized_var(acc.sumW2, acc.sumSW, acc.sumS2, c, n_hat(acc)))


def se_snips(acc: EstimatorAccumulator) -> float:
    """Delta-method standard error of IPS / C_hat."""
    c = control_variate(acc)
    if not c > 0:
        raise NoOverlapError("control variate is zero: the policy shares no support with the log")
    s = ips_estimate(acc) / c
    nh = n_hat(acc)
    v = max(acc.sumDW2 - 2.0 * s * acc.sumDWxW + s * s * acc.sumW2, 0.0) / (nh * nh)
    return math.sqrt(v) / c


def _check_ci(acc, z):
    if acc.keptCount < 2:
        raise EstimationError("need at least two kept records for an interval")
    if z < 0:
        raise ValueError("z must be non-negative")


def ci_normal(acc: EstimatorAccumulator, z: float = Z99) -> tuple:
    """Normal-approximation intervals ``((lo, hi) for IPS, (lo, hi) for C_hat)``."""
    _check_ci(acc, z)
    r, hr = ips_estimate(acc), z * se_ips(acc)
    c, hc = control_variate(acc), z * se_control_variate(acc)
    return (r - hr, r + hr), (c - hc, c + hc)


def snips_ci_delta(acc: EstimatorAccumulator, z: float = Z99) -> tuple:
    _check_ci(acc, z)
    s = snips_estimate(acc)
    h = z * se_snips(acc)
    return (s - h, s + h)


@dataclass(frozen=True)
class EstimateReport:
    nHat: float
    ips: float
    cHat: float
    snips: float
    seIps: float
    ci99Ips: tuple
    ci99CHat: tuple
    ci99Snips: tuple
    keptCount: int
    label: str = ""

    @property
    def ips_halfwidth(self) -> float:
        return (self.ci99Ips[1] - self.ci99Ips[0]) / 2

    @property
    def chat_halfwidth(self) -> float:
        return (self.ci99CHat[1] - self.ci99CHat[0]) / 2

    @property
    def snips_halfwidth(self) -> float:
        return (self.ci99Snips[1] - self.ci99Snips[0]) / 2

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("ci99Ips", "ci99CHat", "ci99Snips"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_accumulator(cls, acc: EstimatorAccumulator, z: float = Z99,
                         label: str = "") -> "EstimateReport":
        ci_r, ci_c = ci_normal(acc, z)
        try:
            snips, ci_s = snips_estimate(acc), snips_ci_delta(acc, z)
        except NoOverlapError:
            snips, ci_s = math.nan, (math.nan, math.nan)
        return cls(n_hat(acc), ips_estimate(acc), control_variate(acc), snips, se_ips(acc),
                   ci_r, ci_c, ci_s, acc.keptCount, label)


def evaluate_policy(data: LoggedData, policy: Policy, z: float = Z99,
                    label: str = "") -> EstimateReport:
    acc = EstimatorAccumulator(data.keep_prob).add_logged(data, policy)
    return EstimateReport.from_accumulator(acc, z, label or getattr(policy, "name", ""))


def evaluate_records(records: Iterable[ImpressionRecord], policy: Policy, keep_prob: float,
                     z: float = Z99, chunk: int = 4096) -> EstimateReport:
    """Stream ``records`` through the batched path in chunks."""
    acc = EstimatorAccumulator(keep_prob)
    buf = []
    for r in records:
        buf.append(r)
        if len(buf) >= chunk:
            acc.add_logged(LoggedData.from_records(buf, keep_prob), policy)
            buf = []
    if buf:
        acc.add_logged(LoggedData.from_records(buf, keep_prob), policy)
    return EstimateReport.from_accumulator(acc, z, getattr(policy, "name", ""))


# ---------------------------------------------------------------------------
# diagnostics


@dataclass(frozen=True)
class PropensitySlice:
    nb_slots: int
    impressions: int
    nHat: float
    avgInvPropensity: float
    maxInvPropensity: float


def propensity_stats(records, keep_prob: float = 0.1) -> list:
    """Inverse-propensity statistics per slot count.

    ``records`` is a :class:`LoggedData` or an iterable of records.
    """
    if isinstance(records, LoggedData):
        q, k, d = records.propensity, records.contexts.nb_slots, records.clicked
    else:
        rows = [(r.propensity, r.nb_slots, r.was_ad_clicked) for r in records]
        q, k, d = (np.array(c) for c in zip(*rows)) if rows else (np.zeros(0),) * 3
    out = []
    for slots in sorted(set(np.asarray(k).tolist())):
        m = k == slots
        inv = 1.0 / q[m]
        s = np.where(d[m] > 0, 1.0, 1.0 / keep_prob)
        out.append(PropensitySlice(int(slots), int(m.sum()), math.fsum(s.tolist()),
                                   math.fsum(inv.tolist()) / len(inv), float(inv.max())))
    return out


def diagnostic_sweep(data: LoggedData, logging_policy: Policy,
                     eps_grid: Sequence[float] = DEFAULT_EPS_GRID, z: float = Z99) -> list:
    """One :class:`EstimateReport` per epsilon for the mixtures pi_eps."""
    out = []
    for eps in eps_grid:
        pol = EpsilonMixturePolicy(float(eps), logging_policy)
        out.append(evaluate_policy(data, pol, z, label=f"{eps!r}"))
    return out


def sweep_accumulators(data: LoggedData, logging_policy: Policy,
                       eps_grid: Sequence[float]) -> list:
    """Accumulators for every epsilon, computing pi_0 and uniform probabilities once."""
    from .policies import UniformPolicy

    p0 = logging_policy.prob(data.contexts, data.rankings)
    pu = UniformPolicy().prob(data.contexts, data.rankings)
    out = []
    for eps in eps_grid:
        pe = eps * pu + (1.0 - eps) * p0
        out.append(EstimatorAccumulator(data.keep_prob).add_arrays(pe / data.propensity,
                                                                   data.clicked))
    return out


# ---------------------------------------------------------------------------
# output

SWEEP_COLUMNS = ("epsilon", "c_hat", "c_hat_hw", "ips_x1e4", "ips_hw_x1e4",
                 "snips_x1e4", "snips_hw_x1e4", "n_hat", "kept")


def _g(x: float) -> str:
    return format(x, ".12g")


def report_row(label: str, r: EstimateReport) -> list:
    return [label, _g(r.cHat), _g(r.chat_halfwidth), _g(r.ips * 1e4),
            _g(r.ips_halfwidth * 1e4), _g(r.snips * 1e4), _g(r.snips_halfwidth * 1e4),
            _g(r.nHat), str(r.keptCount)]


def format_tsv(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    return "".join("\t".join(map(str, row)) + "\n" for row in [list(header), *rows])


def format_jsonl(rows: Sequence[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)


def sweep_table(reports: Sequence[EstimateReport], eps_grid: Sequence[float], fmt="tsv") -> str:
    if fmt == "jsonl":
        return format_jsonl([{"epsilon": e, **r.as_dict()} for e, r in zip(eps_grid, reports)])
    return format_tsv(SWEEP_COLUMNS, [report_row(_g(e), r) for e, r in zip(eps_grid, reports)])


def propensity_table(slices: Sequence[PropensitySlice], fmt="tsv") -> str:
    if fmt == "jsonl":
        return format_jsonl([dataclasses.asdict(s) for s in slices])
    cols = ("nb_slots", "impressions", "n_hat", "avg_inv_propensity", "max_inv_propensity")
    return format_tsv(cols, [[str(s.nb_slots), str(s.impressions), _g(s.nHat),
                              _g(s.avgInvPropensity), _g(s.maxInvPropensity)] for s in slices])
