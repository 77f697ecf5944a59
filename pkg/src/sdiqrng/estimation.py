"""Counting statistics over a round log and confidence bounds on success rates.

Only rounds that pass the blocker (y above the threshold) enter the tally.
Two conditional tables are derived from it: the raw table over outcomes
{0, 1, no-detection} and the detected-only table renormalized over {0, 1}.
"Success" for a cell (x, z) always means the outcome b equals the target bit
x_z; the certifier consumes success probabilities exclusively.

Interval estimates are exact Clopper-Pearson intervals with a Bonferroni
split across the 8 cells, so the stated confidence holds simultaneously.  A
normal-approximation mode on Poissonian counting errors exists for replicating
plotted error bars only and is rejected by the certifier.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .protocol import EMPTY, RoundLog, X_LABELS, target_bit

BOUND_METHODS = ("clopper-pearson", "poisson")


class InsufficientDataError(ValueError):
    """Not enough rounds in some cell to form the requested estimate."""


class WrongVariantError(ValueError):
    """A detected-only table was required but a raw table was supplied."""


@dataclass(frozen=True)
class Tally:
    """Outcome counts per (x, z) over unblocked rounds, plus the blocked count.

    counts[x, z, slot] with slot 0 -> b=0, 1 -> b=1, 2 -> no detection.
    """

    counts: np.ndarray
    n_blocked: int

    def __post_init__(self) -> None:
        if self.counts.shape != (4, 2, 3):
            raise ValueError("counts must have shape (4, 2, 3)")
        if np.any(self.counts < 0) or self.n_blocked < 0:
            raise ValueError("counts must be nonnegative")

    @property
    def n_unblocked(self) -> int:
        return int(self.counts.sum())

    @property
    def n_detected(self) -> int:
        return int(self.counts[:, :, :2].sum())

    def detected_per_cell(self) -> np.ndarray:
        return self.counts[:, :, :2].sum(axis=2)

    def success_per_cell(self) -> np.ndarray:
        """Counts of b == x_z per cell, shape (4, 2)."""
        out = np.empty((4, 2), dtype=np.int64)
        for x in range(4):
            for z in range(2):
                out[x, z] = self.counts[x, z, target_bit(x, z)]
        return out

    def __add__(self, other: "Tally") -> "Tally":
        return Tally(self.counts + other.counts, self.n_blocked + other.n_blocked)


def tally(log: RoundLog) -> Tally:
    """Count outcomes per cell over the unblocked rounds of a log."""
    if len(log) == 0:
        raise InsufficientDataError("empty log")
    un = ~log.blocked
    if not un.any():
        raise InsufficientDataError("no unblocked rounds in log")
    slot = np.where(log.b[un] == EMPTY, 2, log.b[un]).astype(np.int64)
    code = (log.x[un].astype(np.int64) * 2 + log.z[un]) * 3 + slot
    counts = np.bincount(code, minlength=24).reshape(4, 2, 3)
    return Tally(counts=counts, n_blocked=int(log.blocked.sum()))


@dataclass(frozen=True)
class ConditionalTable:
    """Probabilities p(b | x, unblocked, z); rows sum to one.

    variant "raw" keeps the no-detection column; "detected_only" conditions on
    a detection and has zero mass there.
    """

    probs: np.ndarray  # (4, 2, 3)
    variant: str

    @property
    def matrix(self) -> np.ndarray:
        """8x3 view, rows in lexicographic (x, z) order."""
        return self.probs.reshape(8, 3)


def conditional_tables(t: Tally) -> tuple[ConditionalTable, ConditionalTable]:
    """Raw and detected-only conditional tables from a tally."""
    totals = t.counts.sum(axis=2)
    det = t.counts[:, :, :2].sum(axis=2)
    for x in range(4):
        for z in range(2):
            if totals[x, z] == 0:
                raise InsufficientDataError(f"no unblocked rounds in cell (x={X_LABELS[x]}, z={z})")
            if det[x, z] == 0:
                raise InsufficientDataError(f"no detected rounds in cell (x={X_LABELS[x]}, z={z})")
    raw = ConditionalTable(t.counts / totals[:, :, None], "raw")
    dprobs = np.zeros((4, 2, 3))
    dprobs[:, :, :2] = t.counts[:, :, :2] / det[:, :, None]
    detected = ConditionalTable(dprobs, "detected_only")
    return raw, detected


def relabel_success(b: np.ndarray, x: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Map outcomes to the success convention: 0 iff b hit the target bit.

    An XOR with the target bit, hence an involution.
    """
    tgt = np.where(np.asarray(z) == 0, (np.asarray(x) >> 1) & 1, np.asarray(x) & 1)
    return np.asarray(b) ^ tgt


def success_probability(table: ConditionalTable, x: int, z: int) -> float:
    """Pr[b = x_z | x, z] from a detected-only table."""
    if table.variant != "detected_only":
        raise WrongVariantError("success probabilities require the detected-only table")
    return float(table.probs[x, z, target_bit(x, z)])


def success_matrix(table: ConditionalTable) -> np.ndarray:
    return np.array([[success_probability(table, x, z) for z in range(2)] for x in range(4)])


def p_prime_average(table: ConditionalTable) -> float:
    """Mean of the 8 detected-only success probabilities."""
    return float(success_matrix(table).mean())


def observed_efficiency(t: Tally) -> float:
    """Detected unblocked rounds over all unblocked rounds."""
    if t.n_unblocked == 0:
        raise InsufficientDataError("no unblocked rounds")
    return t.n_detected / t.n_unblocked


@dataclass(frozen=True)
class ProbabilityBounds:
    """Simultaneous two-sided intervals on the 8 success probabilities."""

    lo: np.ndarray  # (4, 2)
    hi: np.ndarray
    point: np.ndarray
    n_detected: np.ndarray
    confidence: float
    method: str

    def __post_init__(self) -> None:
        if np.any(self.lo < 0) or np.any(self.hi > 1) or np.any(self.lo > self.hi):
            raise ValueError("bounds must satisfy 0 <= lo <= hi <= 1")


def clopper_pearson(k: int, n: int, alpha: float) -> tuple[float, float]:
    """Exact two-sided binomial interval at total tail mass alpha."""
    if not 0 <= k <= n or n <= 0:
        raise ValueError(f"need 0 <= k <= n with n > 0, got k={k}, n={n}")
    lo = 0.0 if k == 0 else float(stats.beta.ppf(alpha / 2, k, n - k + 1))
    hi = 1.0 if k == n else float(stats.beta.ppf(1 - alpha / 2, k + 1, n - k))
    return lo, hi


def probability_bounds(
    t: Tally, confidence: float, method: str = "clopper-pearson"
) -> ProbabilityBounds:
    """Per-cell success intervals holding simultaneously at `confidence`.

    The tail mass 1 - confidence is Bonferroni-split across the 8 cells.
    """
    if not 0.0 < confidence < 1.0:
        raise ValueError(f"confidence must be in (0, 1), got {confidence}")
    if method not in BOUND_METHODS:
        raise ValueError(f"method must be one of {BOUND_METHODS}, got {method!r}")
    det = t.detected_per_cell()
    succ = t.success_per_cell()
    alpha_cell = (1.0 - confidence) / 8.0
    lo = np.empty((4, 2))
    hi = np.empty((4, 2))
    point = np.empty((4, 2))
    for x in range(4):
        for z in range(2):
            n = int(det[x, z])
            if n == 0:
                raise InsufficientDataError(
                    f"no detected rounds in cell (x={X_LABELS[x]}, z={z})"
                )
            k = int(succ[x, z])
            point[x, z] = k / n
            if method == "clopper-pearson":
                lo[x, z], hi[x, z] = clopper_pearson(k, n, alpha_cell)
            else:
                zq = float(stats.norm.ppf(1 - alpha_cell / 2))
                half = zq * np.sqrt(max(k, 1)) / n
                lo[x, z] = max(0.0, point[x, z] - half)
                hi[x, z] = min(1.0, point[x, z] + half)
    return ProbabilityBounds(
        lo=lo, hi=hi, point=point, n_detected=det, confidence=confidence, method=method
    )


BOUNDS_HEADER = "x,z,p_lo,p_hat,p_hi,n_detected"


def write_bounds(bounds: ProbabilityBounds, path) -> None:
    """Emit the per-cell interval table in the interchange CSV format."""
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(BOUNDS_HEADER + "\n")
        for x in range(4):
            for z in range(2):
                fh.write(
                    f"{X_LABELS[x]},{z},{bounds.lo[x, z]:.12g},{bounds.point[x, z]:.12g},"
                    f"{bounds.hi[x, z]:.12g},{int(bounds.n_detected[x, z])}\n"
                )
