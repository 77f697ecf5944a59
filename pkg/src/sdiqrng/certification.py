"""Privacy decision and certified-randomness optimization.

Two independent questions are answered here.  First, could the observed
average success probability have been produced by devices coordinating
through a shared seed?  The closed-form threshold models the strongest such
attack (perfect success while synchronized, fair coin during forced
resynchronization, resynchronization hidden inside no-detections first) and
is validated against the Monte-Carlo attack simulator in protocol.py.

Second, given interval constraints on the 8 success probabilities, how much
min-entropy per event does the *best* compatible device strategy still leave?
The strategy family is the general one for a qubit channel without shared
randomness: four equatorial states, per setting a forced-outcome pair
(q_z^0, q_z^1) plus a projective measurement with the leftover weight.  The
certifier minimizes the per-event min-entropy over that family by multistart
derivative-free search with the forced-outcome weights resolved exactly from
the constraints; a grid-plus-compass brute-force oracle over the raw
parameters provides an independent upper bound on the same minimum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy import optimize

from .bloch import EquatorialState, MeasurementBasis, ProjectiveMix, event_min_entropy, response_probability
from .estimation import ProbabilityBounds

AGGREGATES = ("worst_event", "uniform_average")
MODES = ("vector", "worst_case", "average")

DEFAULT_ENTROPY_CAP = 20.0
FEAS_TOL = 1e-12
FINAL_FEAS_TOL = 1e-9
CONVERGENCE_TOL = 1e-4

#: Largest common value of all 8 success probabilities reachable by a qubit
#: strategy (the 2->1 random access code optimum); also the ceiling of the
#: average success probability.
MAX_AVERAGE_SUCCESS = math.cos(math.pi / 8) ** 2

# Cell bookkeeping: success cells grouped by (z, forced-outcome slot t); each
# group holds the two x inputs whose target bit at that z equals t.
_GROUP_X = (((0, 1), (2, 3)), ((0, 2), (1, 3)))


class InfeasibleConstraintsError(ValueError):
    """No strategy in the model family satisfies the constraint set."""

    def __init__(self, message: str, min_violation: float = math.nan):
        super().__init__(message)
        self.min_violation = min_violation


class NonConvergenceError(RuntimeError):
    """Multistart optimization failed to stabilize; carries the trace."""

    def __init__(self, message: str, trace: tuple = ()):
        super().__init__(message)
        self.trace = trace


class OracleResolutionError(RuntimeError):
    """The brute-force grid found no feasible cell at this resolution."""


# ---------------------------------------------------------------------------
# Privacy threshold against the shared-seed synchronization attack
# ---------------------------------------------------------------------------


def sync_overhead(beta: float, model: str = "per_block") -> float:
    """Expected fraction of unblocked rounds spent resynchronizing.

    One resync per blocked round queues beta/(1-beta) resyncs per unblocked
    round (capped at every round); one resync per maximal blocked run costs a
    fraction beta, since runs start at rate beta*(1-beta) per round.
    """
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"blocking rate must be in [0, 1), got {beta}")
    if model == "per_block":
        return min(1.0, beta / (1.0 - beta))
    if model == "per_run":
        return beta
    raise ValueError(f"unknown sync model {model!r}")


class PrivacyBound(NamedTuple):
    threshold: float
    margin: float


def privacy_threshold(
    beta: float, eta: float, confidence: float, n_detected: int, model: str = "per_block"
) -> PrivacyBound:
    """Best detected-average success a shared-seed attack can fake, plus margin.

    The attack succeeds with probability 1 while synchronized, hides resync
    rounds inside the no-detection budget 1 - eta first, and scores 1/2 on
    resync rounds it is forced to report.  With resync fraction s the
    detectable part is d = max(0, eta - (1 - s)) and the threshold is
    1 - d / (2 eta); threshold 1 means the attack is undetectable at this
    blocking rate and efficiency.  The margin is the one-sided Hoeffding
    deviation sqrt(ln(1/(1-confidence)) / (2 n)).
    """
    if not 0.0 < eta <= 1.0:
        raise ValueError(f"eta must be in (0, 1], got {eta}")
    if not 0.0 < confidence < 1.0:
        raise ValueError(f"confidence must be in (0, 1), got {confidence}")
    if n_detected < 1:
        raise ValueError(f"n_detected must be >= 1, got {n_detected}")
    s = sync_overhead(beta, model)
    d = max(0.0, eta - (1.0 - s))
    threshold = 1.0 - d / (2.0 * eta)
    margin = math.sqrt(math.log(1.0 / (1.0 - confidence)) / (2.0 * n_detected))
    return PrivacyBound(threshold=threshold, margin=margin)


@dataclass(frozen=True)
class PrivacyVerdict:
    threshold: float
    margin: float
    observed: float
    passed: bool
    sync_model: str
    reason: str

    def __post_init__(self) -> None:
        if self.passed != (self.observed > self.threshold + self.margin):
            raise ValueError("verdict inconsistent with its inputs")


def shared_randomness_test(
    observed_p_prime_av: float, bound: PrivacyBound, sync_model: str = "per_block"
) -> PrivacyVerdict:
    """Abort decision: pass only if the observation clears threshold + margin."""
    if bound.threshold >= 1.0:
        reason = "undetectable regime; increase blocking rate"
        passed = observed_p_prime_av > bound.threshold + bound.margin  # always False
    else:
        passed = observed_p_prime_av > bound.threshold + bound.margin
        reason = (
            "observed average clears the shared-seed attack threshold"
            if passed
            else "observed average is consistent with a shared-seed attack"
        )
    return PrivacyVerdict(
        threshold=bound.threshold,
        margin=bound.margin,
        observed=observed_p_prime_av,
        passed=passed,
        sync_model=sync_model,
        reason=reason,
    )


# ---------------------------------------------------------------------------
# Adversary model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdversaryParams:
    """One strategy of the no-shared-randomness family.

    theta[x] are the four state angles, phi[z] the two measurement basis
    angles, q[z][b] the forced-outcome weights; the projective weight per
    setting is p_z = 1 - q[z][0] - q[z][1].
    """

    theta: tuple[float, float, float, float]
    phi: tuple[float, float]
    q: tuple[tuple[float, float], tuple[float, float]]

    def __post_init__(self) -> None:
        for q0, q1 in self.q:
            if q0 < -1e-12 or q1 < -1e-12 or q0 + q1 > 1.0 + 1e-9:
                raise ValueError(f"invalid forced-outcome weights {self.q}")

    def p(self, z: int) -> float:
        return max(0.0, 1.0 - self.q[z][0] - self.q[z][1])

    def mix(self, z: int) -> ProjectiveMix:
        return ProjectiveMix(
            q0=min(1.0, max(0.0, self.q[z][0])),
            q1=min(1.0, max(0.0, self.q[z][1])),
            basis=MeasurementBasis(self.phi[z]),
        )


def adversary_success_matrix(params: AdversaryParams) -> np.ndarray:
    """Model success probabilities Pr[b = x_z], shape (4, 2)."""
    out = np.empty((4, 2))
    for z in range(2):
        mix = params.mix(z)
        for x in range(4):
            t = (x >> 1) & 1 if z == 0 else x & 1
            out[x, z] = response_probability(mix, EquatorialState(params.theta[x]), t)
    return out


def adversary_event_entropies(params: AdversaryParams, cap: float = math.inf) -> np.ndarray:
    """Per-event min-entropies of the success events, saturated at `cap`."""
    out = np.empty((4, 2))
    for z in range(2):
        mix = params.mix(z)
        for x in range(4):
            t = (x >> 1) & 1 if z == 0 else x & 1
            out[x, z] = min(cap, event_min_entropy(mix, EquatorialState(params.theta[x]), t))
    return out


# ---------------------------------------------------------------------------
# Constraint sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConstraintSet:
    """Observable constraints the adversary's 8 success probabilities obey.

    vector mode carries an interval per cell; worst_case / average constrain
    the minimum / mean of the 8 cells to alpha +- delta/2.
    """

    mode: str
    lo: Optional[np.ndarray] = None  # (4, 2), vector mode only
    hi: Optional[np.ndarray] = None
    alpha: Optional[float] = None
    delta: Optional[float] = None

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "vector":
            lo = np.asarray(self.lo, dtype=float)
            hi = np.asarray(self.hi, dtype=float)
            if lo.shape != (4, 2) or hi.shape != (4, 2):
                raise ValueError("vector constraints need (4, 2) lo and hi arrays")
            if np.any(lo < 0) or np.any(hi > 1) or np.any(lo > hi):
                raise ValueError("intervals must satisfy 0 <= lo <= hi <= 1")
            object.__setattr__(self, "lo", lo)
            object.__setattr__(self, "hi", hi)
        else:
            if self.alpha is None or self.delta is None:
                raise ValueError(f"{self.mode} mode needs alpha and delta")
            if self.delta < 0:
                raise ValueError("delta must be nonnegative")

    @classmethod
    def vector(cls, bounds) -> "ConstraintSet":
        """From a ProbabilityBounds or a (lo, hi) pair of (4, 2) arrays."""
        if isinstance(bounds, ProbabilityBounds):
            if bounds.method != "clopper-pearson":
                raise ValueError(
                    "certification accepts exact Clopper-Pearson bounds only; "
                    f"got method {bounds.method!r}"
                )
            return cls(mode="vector", lo=bounds.lo.copy(), hi=bounds.hi.copy())
        lo, hi = bounds
        return cls(mode="vector", lo=np.asarray(lo, float), hi=np.asarray(hi, float))

    @classmethod
    def uniform_vector(cls, alpha: float, delta: float) -> "ConstraintSet":
        lo = np.full((4, 2), max(0.0, alpha - delta / 2))
        hi = np.full((4, 2), min(1.0, alpha + delta / 2))
        return cls(mode="vector", lo=lo, hi=hi)

    @classmethod
    def worst_case(cls, alpha: float, delta: float) -> "ConstraintSet":
        return cls(mode="worst_case", alpha=float(alpha), delta=float(delta))

    @classmethod
    def average(cls, alpha: float, delta: float) -> "ConstraintSet":
        return cls(mode="average", alpha=float(alpha), delta=float(delta))

    @classmethod
    def scalar(cls, mode: str, alpha: float, delta: float) -> "ConstraintSet":
        if mode == "worst_case":
            return cls.worst_case(alpha, delta)
        if mode == "average":
            return cls.average(alpha, delta)
        raise ValueError(f"scalar constraint mode must be worst_case or average, got {mode!r}")

    def violation_batch(self, cells: np.ndarray) -> np.ndarray:
        """Constraint violation per row of an (N, 8) success-cell array.

        Cells are ordered z-major: the four z=0 cells (x = 0..3) then the four
        z=1 cells.  Zero means feasible.
        """
        cells = np.atleast_2d(cells)
        if self.mode == "vector":
            lo = np.concatenate([self.lo[:, 0], self.lo[:, 1]])
            hi = np.concatenate([self.hi[:, 0], self.hi[:, 1]])
            return np.maximum(0.0, lo - cells).sum(axis=1) + np.maximum(
                0.0, cells - hi
            ).sum(axis=1)
        a_lo = self.alpha - self.delta / 2
        a_hi = self.alpha + self.delta / 2
        if self.mode == "average":
            return np.maximum(0.0, np.abs(cells.mean(axis=1) - self.alpha) - self.delta / 2)
        floor = np.maximum(0.0, a_lo - cells).sum(axis=1)
        high = np.maximum(0.0, cells.min(axis=1) - a_hi)
        return floor + high

    def violation(self, success: np.ndarray) -> float:
        """Violation of a (4, 2) success matrix (0 iff feasible)."""
        s = np.asarray(success)
        flat = np.concatenate([s[:, 0], s[:, 1]])[None, :]
        return float(self.violation_batch(flat)[0])


# ---------------------------------------------------------------------------
# Reduced search space: angles and projective weights, forced outcomes exact
# ---------------------------------------------------------------------------
#
# The per-event entropies do not depend on the forced-outcome weights, only on
# (theta, phi, p_z).  For fixed angles and p_z the constraints are affine in
# (q_z^0, q_z^1) with unit coefficients, so feasibility in the q's reduces to
# interval intersections that can be resolved exactly.  The optimizer
# therefore searches the 7 gauge-fixed coordinates [theta0..3, phi1, p0, p1]
# with phi0 = 0, and the q's are recovered analytically.


class _Compiled(NamedTuple):
    mode: str
    vlo: tuple  # vector: per (z, t) pair of lower bounds, cell order as _GROUP_X
    vhi: tuple
    a_lo: float
    a_hi: float
    alpha: float
    half: float


def _compile(cons: ConstraintSet) -> _Compiled:
    if cons.mode == "vector":
        vlo = tuple(
            tuple(tuple(cons.lo[x, z] for x in _GROUP_X[z][t]) for t in range(2))
            for z in range(2)
        )
        vhi = tuple(
            tuple(tuple(cons.hi[x, z] for x in _GROUP_X[z][t]) for t in range(2))
            for z in range(2)
        )
        return _Compiled("vector", vlo, vhi, 0.0, 0.0, 0.0, 0.0)
    a_lo = cons.alpha - cons.delta / 2
    a_hi = cons.alpha + cons.delta / 2
    return _Compiled(cons.mode, (), (), a_lo, a_hi, cons.alpha, cons.delta / 2)


def _overlap_groups(v: Sequence[float]):
    """Success-projector overlaps grouped by (z, t), plus clipped p's.

    Returns (o, p0, p1, box) where o[z][t] is the pair of overlaps for the two
    x's in that group and box is the squared excursion of p outside [0, 1].
    """
    th0, th1, th2, th3, ph1, p0, p1 = v
    box = 0.0
    if p0 < 0.0:
        box += p0 * p0
        p0 = 0.0
    elif p0 > 1.0:
        box += (p0 - 1.0) ** 2
        p0 = 1.0
    if p1 < 0.0:
        box += p1 * p1
        p1 = 0.0
    elif p1 > 1.0:
        box += (p1 - 1.0) ** 2
        p1 = 1.0
    c0 = math.cos(th0)
    c1 = math.cos(th1)
    c2 = math.cos(th2)
    c3 = math.cos(th3)
    d0 = math.cos(th0 - ph1)
    d1 = math.cos(th1 - ph1)
    d2 = math.cos(th2 - ph1)
    d3 = math.cos(th3 - ph1)
    o = (
        ((0.5 * (1.0 + c0), 0.5 * (1.0 + c1)), (0.5 * (1.0 - c2), 0.5 * (1.0 - c3))),
        ((0.5 * (1.0 + d0), 0.5 * (1.0 + d2)), (0.5 * (1.0 - d1), 0.5 * (1.0 - d3))),
    )
    return o, p0, p1, box


def _violation_reduced(cc: _Compiled, o, p0: float, p1: float) -> float:
    """Distance-to-feasibility over the exactly-resolved forced outcomes."""
    total = 0.0
    if cc.mode == "vector":
        for z, p in ((0, p0), (1, p1)):
            Ls = [0.0, 0.0]
            Us = [0.0, 0.0]
            for t in range(2):
                oa, ob = o[z][t]
                la, lb = cc.vlo[z][t]
                ha, hb = cc.vhi[z][t]
                L = max(la - p * oa, lb - p * ob, 0.0)
                U = min(ha - p * oa, hb - p * ob, 1.0)
                total += max(0.0, L - U)
                Ls[t] = L
                Us[t] = U
            free = 1.0 - p
            total += max(0.0, Ls[0] + Ls[1] - free) + max(0.0, free - (Us[0] + Us[1]))
        return total
    if cc.mode == "average":
        s0 = o[0][0][0] + o[0][0][1] + o[0][1][0] + o[0][1][1]
        s1 = o[1][0][0] + o[1][0][1] + o[1][1][0] + o[1][1][1]
        pav = (4.0 + p0 * (s0 - 2.0) + p1 * (s1 - 2.0)) / 8.0
        return max(0.0, abs(pav - cc.alpha) - cc.half)
    # worst_case: all cells above the floor, at least one cell reachable below
    # the ceiling when the forced outcomes sit at their lower limits.
    low = math.inf
    for z, p in ((0, p0), (1, p1)):
        Ls = [0.0, 0.0]
        for t in range(2):
            omin = min(o[z][t])
            L = max(0.0, cc.a_lo - p * omin)
            Ls[t] = L
            low = min(low, L + p * omin)
        total += max(0.0, Ls[0] + Ls[1] - (1.0 - p))
    total += max(0.0, low - cc.a_hi)
    return total


def _event_bits(p: float, o: float, cap: float) -> float:
    if p == 0.0:
        return 0.0
    if o <= 0.0:
        return cap
    return min(cap, -p * math.log2(o))


def _objective_reduced(o, p0: float, p1: float, aggregate: str, cap: float) -> float:
    if aggregate == "worst_event":
        best = math.inf
        for z, p in ((0, p0), (1, p1)):
            if p == 0.0:
                return 0.0
            omax = max(o[z][0][0], o[z][0][1], o[z][1][0], o[z][1][1])
            best = min(best, _event_bits(p, omax, cap))
        return best
    total = 0.0
    for z, p in ((0, p0), (1, p1)):
        for t in range(2):
            total += _event_bits(p, o[z][t][0], cap) + _event_bits(p, o[z][t][1], cap)
    return total / 8.0


def _resolve_q(v: Sequence[float], cc: _Compiled):
    """Exact forced-outcome weights for a feasible reduced point, else None."""
    o, p0, p1, _ = _overlap_groups(v)
    slack = 1e-9
    qs = []
    if cc.mode == "vector":
        for z, p in ((0, p0), (1, p1)):
            Ls = [0.0, 0.0]
            Us = [0.0, 0.0]
            for t in range(2):
                oa, ob = o[z][t]
                la, lb = cc.vlo[z][t]
                ha, hb = cc.vhi[z][t]
                Ls[t] = max(la - p * oa, lb - p * ob, 0.0)
                Us[t] = min(ha - p * oa, hb - p * ob, 1.0)
            free = 1.0 - p
            lo_q = max(Ls[0], free - Us[1])
            hi_q = min(Us[0], free - Ls[1])
            if lo_q > hi_q + slack:
                return None
            q0 = min(max(0.5 * (lo_q + hi_q), 0.0), free)
            qs.append((q0, free - q0))
        return tuple(qs)
    if cc.mode == "average":
        return ((0.5 * (1.0 - p0), 0.5 * (1.0 - p0)), (0.5 * (1.0 - p1), 0.5 * (1.0 - p1)))
    # worst_case: park one group at its floor to realize the low cell
    cand = None
    Lzt = [[0.0, 0.0], [0.0, 0.0]]
    for z, p in ((0, p0), (1, p1)):
        for t in range(2):
            omin = min(o[z][t])
            L = max(0.0, cc.a_lo - p * omin)
            Lzt[z][t] = L
            value = L + p * omin
            if cand is None or value < cand[0]:
                cand = (value, z, t)
    _, z_star, t_star = cand
    for z, p in ((0, p0), (1, p1)):
        free = 1.0 - p
        if z == z_star:
            q_star = Lzt[z][t_star]
            pair = [0.0, 0.0]
            pair[t_star] = q_star
            pair[1 - t_star] = free - q_star
        else:
            pair = [Lzt[z][0], free - Lzt[z][0]]
            if pair[1] < Lzt[z][1] - slack:
                return None
        if pair[0] < -slack or pair[1] < -slack:
            return None
        qs.append((max(0.0, pair[0]), max(0.0, pair[1])))
    return tuple(qs)


def _params_from_reduced(v: Sequence[float], cc: _Compiled) -> Optional[AdversaryParams]:
    qs = _resolve_q(v, cc)
    if qs is None:
        return None
    th0, th1, th2, th3, ph1, p0, p1 = v
    # rescale q's so q0 + q1 + p == 1 exactly after clipping
    out = []
    for (q0, q1), p in zip(qs, (min(1.0, max(0.0, p0)), min(1.0, max(0.0, p1)))):
        s = q0 + q1
        free = 1.0 - p
        if s > 0 and abs(s - free) > 1e-15:
            q0, q1 = q0 * free / s, q1 * free / s
        out.append((q0, q1))
    return AdversaryParams(
        theta=(th0, th1, th2, th3), phi=(0.0, ph1), q=(out[0], out[1])
    )


def _structured_starts(cons: ConstraintSet, aggregate: str) -> list[np.ndarray]:
    """Deterministic starts covering the known attack geometries."""
    qrac = [math.pi / 4, 7 * math.pi / 4, 3 * math.pi / 4, 5 * math.pi / 4, math.pi / 2]
    starts = [
        np.array(qrac + [0.0, 0.0]),  # forced outcomes only
        np.array(qrac + [1.0, 1.0]),  # fully projective QRAC geometry
        np.array(qrac + [0.5, 0.5]),
    ]
    # one success cell pinned to a deterministic projection, remaining states
    # on bisectors; iota is the angle between the two basis directions
    for iota in (math.pi / 3, 1.312, 0.8):
        starts.append(
            np.array(
                [0.0, -(math.pi - iota) / 2, (math.pi + iota) / 2, math.pi + iota / 2, iota, 1.0, 1.0]
            )
        )
    if cons.mode == "vector":
        center = float(np.mean((cons.lo + cons.hi) / 2.0))
    else:
        center = cons.alpha
    # symmetric family: all cells at `center` via partial projective weight
    p_sym = (center - 0.5) / (MAX_AVERAGE_SUCCESS - 0.5)
    p_sym = min(1.0, max(0.0, p_sym))
    starts.append(np.array(qrac + [p_sym, p_sym]))
    if 0.5 < center < 1.0:
        # pinned-state needle: one state exactly on its z=0 success projector
        # (zero-entropy event), the partner state carrying the whole angular
        # separation the z=1 cells require, forced outcomes soaking the rest
        ph1 = math.acos(2.0 * center - 1.0)
        s = 2.0 * ph1 - math.pi
        p0 = min(1.0, (2.0 * center - 1.0) / max(math.sin(ph1) ** 2, 1e-9))
        starts.append(np.array([0.0, s, 2.0 * ph1, 2.0 * ph1 - s, ph1, p0, 1.0]))
    return starts


def _random_start(rng: np.random.Generator) -> np.ndarray:
    angles = rng.uniform(0.0, 2 * math.pi, 5)
    ps = np.empty(2)
    for i in range(2):
        u = rng.random()
        if u < 0.25:
            ps[i] = 0.0
        elif u < 0.5:
            ps[i] = 1.0
        else:
            ps[i] = rng.random()
    return np.concatenate([angles, ps])


@dataclass(frozen=True)
class OptimizerDiagnostics:
    restarts: int
    n_feasible: int
    polish_rounds: int
    trace: tuple  # (restart index, objective, violation) per restart


@dataclass(frozen=True)
class CertificationResult:
    bits_per_event: float
    bits_per_round: float
    minimizer: AdversaryParams
    feasible: bool
    aggregate: str
    diagnostics: OptimizerDiagnostics

    def __post_init__(self) -> None:
        if self.bits_per_event < 0 or self.bits_per_round > self.bits_per_event + 1e-12:
            raise ValueError("per-round bits cannot exceed per-event bits")


def per_round_rate(per_event_bits: float, eta: float) -> float:
    """Min-entropy per emitted bit when no-detections enter the string as 0.

    -log2((1 - eta) + eta * 2^-H); an infinite per-event sentinel saturates to
    -log2(1 - eta).
    """
    if not 0.0 < eta <= 1.0:
        raise ValueError(f"eta must be in (0, 1], got {eta}")
    if per_event_bits < 0:
        raise ValueError("per-event bits must be nonnegative")
    guess = (1.0 - eta) + eta * (0.0 if math.isinf(per_event_bits) else 2.0 ** (-per_event_bits))
    return 0.0 if guess >= 1.0 else -math.log2(guess)


def _nm(fun, x0: np.ndarray, maxfev: int, xatol: float, fatol: float) -> np.ndarray:
    res = optimize.minimize(
        fun,
        x0,
        method="Nelder-Mead",
        options={
            "maxfev": maxfev,
            "xatol": xatol,
            "fatol": fatol,
            "adaptive": True,
        },
    )
    return res.x


def certify_min_entropy(
    constraints: ConstraintSet,
    aggregate: str = "worst_event",
    *,
    restarts: int = 64,
    seed: int = 0,
    eta: float = 1.0,
    entropy_cap: float = DEFAULT_ENTROPY_CAP,
) -> CertificationResult:
    """Minimize the aggregated per-event min-entropy over the strategy family.

    Multistart Nelder-Mead over the 7 gauge-fixed coordinates with a two-stage
    feasibility penalty; forced-outcome weights are resolved exactly, and the
    winning strategy is re-checked against the constraints through the direct
    probability rule before being reported.
    """
    if aggregate not in AGGREGATES:
        raise ValueError(f"aggregate must be one of {AGGREGATES}, got {aggregate!r}")
    if restarts < 1:
        raise ValueError("restarts must be positive")
    _precheck_feasibility(constraints)
    cc = _compile(constraints)
    rng = np.random.default_rng(seed)

    def penalized(weight):
        def fun(v):
            o, p0, p1, box = _overlap_groups(v)
            viol = _violation_reduced(cc, o, p0, p1)
            return _objective_reduced(o, p0, p1, aggregate, entropy_cap) + weight * (viol + box)

        return fun

    f_soft = penalized(1e3)
    f_hard = penalized(1e9)

    def polish(x0: np.ndarray) -> tuple[float, float, np.ndarray]:
        x1 = _nm(f_soft, x0, maxfev=900, xatol=1e-6, fatol=1e-9)
        x2 = _nm(f_hard, x1, maxfev=900, xatol=1e-8, fatol=1e-11)
        o, p0, p1, box = _overlap_groups(x2)
        viol = _violation_reduced(cc, o, p0, p1) + box
        obj = _objective_reduced(o, p0, p1, aggregate, entropy_cap)
        return obj, viol, x2

    starts = _structured_starts(constraints, aggregate)
    while len(starts) < restarts:
        starts.append(_random_start(rng))
    starts = starts[:restarts]

    trace = []
    candidates = []  # (objective, restart index, point)
    for i, x0 in enumerate(starts):
        obj, viol, x = polish(np.asarray(x0, float))
        trace.append((i, obj, viol))
        if viol <= FEAS_TOL:
            candidates.append((obj, i, x))

    if not candidates:
        # dedicated feasibility recovery from the least-violating points
        order = sorted(range(len(trace)), key=lambda i: trace[i][2])[:6]
        for i in order:
            x_start = polish(starts[i])[2]

            def viol_only(v):
                o, p0, p1, box = _overlap_groups(v)
                return _violation_reduced(cc, o, p0, p1) + box

            xf = _nm(viol_only, x_start, maxfev=2000, xatol=1e-9, fatol=1e-13)
            obj, viol, x = polish(xf)
            if viol <= FEAS_TOL:
                candidates.append((obj, len(trace), x))
                trace.append((len(trace), obj, viol))
                break
        if not candidates:
            min_viol = min(t[2] for t in trace)
            raise InfeasibleConstraintsError(
                f"no feasible strategy found (min violation {min_viol:.3g})", min_viol
            )

    candidates.sort(key=lambda c: (c[0], c[1]))
    best_obj, _, best_x = candidates[0]

    # local stability: re-polish from jittered copies of the winner until the
    # value stops improving by more than the convergence tolerance
    polish_rounds = 0
    for round_idx in range(12):
        polish_rounds += 1
        improved = False
        scale = 1e-3 if round_idx % 2 == 0 else 1e-2
        for _ in range(6):
            jitter = rng.normal(0.0, scale, 7)
            obj, viol, x = polish(best_x + jitter)
            if viol <= FEAS_TOL and obj < best_obj - CONVERGENCE_TOL:
                best_obj, best_x = obj, x
                improved = True
        if not improved:
            break
    else:
        raise NonConvergenceError(
            "objective kept improving under local perturbation", tuple(trace)
        )

    if best_obj >= entropy_cap - 1e-6:
        raise NonConvergenceError(
            "entropy cap binds at the reported minimum; raise entropy_cap", tuple(trace)
        )

    params = _params_from_reduced(best_x, cc)
    if params is None:
        raise NonConvergenceError("winner lost feasibility during resolution", tuple(trace))
    final_viol = constraints.violation(adversary_success_matrix(params))
    if final_viol > FINAL_FEAS_TOL:
        raise NonConvergenceError(
            f"final strict feasibility check failed (violation {final_viol:.3g})",
            tuple(trace),
        )

    bits = max(0.0, best_obj)
    return CertificationResult(
        bits_per_event=bits,
        bits_per_round=per_round_rate(bits, eta),
        minimizer=params,
        feasible=True,
        aggregate=aggregate,
        diagnostics=OptimizerDiagnostics(
            restarts=len(starts),
            n_feasible=len(candidates),
            polish_rounds=polish_rounds,
            trace=tuple(trace),
        ),
    )


def _precheck_feasibility(cons: ConstraintSet) -> None:
    """Cheap necessary conditions; the mean success is capped at cos^2(pi/8)."""
    eps = 1e-9
    if cons.mode == "vector":
        if float(np.mean(cons.lo)) > MAX_AVERAGE_SUCCESS + eps:
            raise InfeasibleConstraintsError(
                "lower bounds demand a mean success above the qubit optimum"
            )
        if float(np.mean(cons.hi)) < 1.0 - MAX_AVERAGE_SUCCESS - eps:
            raise InfeasibleConstraintsError(
                "upper bounds demand a mean success below the qubit minimum"
            )
        return
    a_lo = cons.alpha - cons.delta / 2
    a_hi = cons.alpha + cons.delta / 2
    if a_lo > MAX_AVERAGE_SUCCESS + eps:
        raise InfeasibleConstraintsError("target exceeds the qubit optimum")
    if cons.mode == "average" and a_hi < 1.0 - MAX_AVERAGE_SUCCESS - eps:
        raise InfeasibleConstraintsError("target below the qubit minimum")
    if a_hi < 0.0:
        raise InfeasibleConstraintsError("target below zero")


# ---------------------------------------------------------------------------
# Brute-force oracle: raw-parameter grid plus batched compass refinement
# ---------------------------------------------------------------------------


def _full_eval_batch(V: np.ndarray, cons: ConstraintSet, aggregate: str, cap: float):
    """Objective and violation for rows of raw parameters.

    Row layout: theta0..3, phi1 (phi0 gauge-fixed to 0), q00, q01, q10, q11
    where qZB is the forced weight of outcome B at setting Z.
    """
    V = np.atleast_2d(V)
    th = V[:, 0:4]
    ph1 = V[:, 4]
    q = V[:, 5:9]
    qbox = np.maximum(0.0, -q).sum(axis=1) + np.maximum(0.0, q - 1.0).sum(axis=1)
    qc = np.clip(q, 0.0, 1.0)
    s0 = qc[:, 0] + qc[:, 1]
    s1 = qc[:, 2] + qc[:, 3]
    simplex = np.maximum(0.0, s0 - 1.0) + np.maximum(0.0, s1 - 1.0)
    p0 = np.maximum(0.0, 1.0 - s0)
    p1 = np.maximum(0.0, 1.0 - s1)
    c = np.cos(th)
    d = np.cos(th - ph1[:, None])
    o0 = np.stack(
        [0.5 * (1 + c[:, 0]), 0.5 * (1 + c[:, 1]), 0.5 * (1 - c[:, 2]), 0.5 * (1 - c[:, 3])],
        axis=1,
    )
    o1 = np.stack(
        [0.5 * (1 + d[:, 0]), 0.5 * (1 - d[:, 1]), 0.5 * (1 + d[:, 2]), 0.5 * (1 - d[:, 3])],
        axis=1,
    )
    qsel0 = qc[:, [0, 0, 1, 1]]
    qsel1 = qc[:, [2, 3, 2, 3]]
    cells = np.concatenate([qsel0 + p0[:, None] * o0, qsel1 + p1[:, None] * o1], axis=1)
    viol = cons.violation_batch(cells) + 10.0 * (qbox + simplex)
    m0 = -np.log2(np.maximum(o0, 1e-300))
    m1 = -np.log2(np.maximum(o1, 1e-300))
    e = np.concatenate(
        [np.minimum(cap, p0[:, None] * m0), np.minimum(cap, p1[:, None] * m1)], axis=1
    )
    obj = e.min(axis=1) if aggregate == "worst_event" else e.mean(axis=1)
    return obj, viol


def _grid_candidates(
    cons: ConstraintSet, aggregate: str, cap: float, res: int, keep: int
) -> np.ndarray:
    """Best `keep` grid points by violation-penalized objective, rows (9,).

    The z=0 and z=1 halves couple only through the state angles, so for each
    combination of the four thetas the forced-outcome grids (and the basis
    grid on the z=1 side) are scanned as an outer product.
    """
    angles = np.linspace(0.0, 2 * math.pi, res, endpoint=False)
    qgrid = np.linspace(0.0, 1.0, res)
    # forced-outcome pairs, flattened j = iq0 * res + iq1
    q0v = np.repeat(qgrid, res)
    q1v = np.tile(qgrid, res)
    pv = np.maximum(0.0, 1.0 - (q0v + q1v))
    simplex_pen = 10.0 * np.maximum(0.0, (q0v + q1v) - 1.0)
    n_pairs = res * res
    qsel_z0 = np.stack([q0v, q0v, q1v, q1v], axis=1)  # x targets 0,0,1,1 at z=0
    qsel_z1 = np.stack([q0v, q1v, q0v, q1v], axis=1)  # x targets 0,1,0,1 at z=1
    pen1 = np.tile(simplex_pen, res)  # z=1 flat order is (phi index, q pair)
    cosd = np.cos(angles[:, None] - angles[None, :])  # cos(theta_i - phi_k)
    cosv = np.cos(angles)

    if cons.mode == "vector":
        lo0, hi0 = cons.lo[:, 0], cons.hi[:, 0]
        lo1, hi1 = cons.lo[:, 1], cons.hi[:, 1]
    else:
        a_lo = cons.alpha - cons.delta / 2
        a_hi = cons.alpha + cons.delta / 2

    scored = []  # (score, 9 raw parameters)
    for i0 in range(res):
        for i1 in range(res):
            for i2 in range(res):
                for i3 in range(res):
                    o_z0 = np.array(
                        [
                            0.5 * (1 + cosv[i0]),
                            0.5 * (1 + cosv[i1]),
                            0.5 * (1 - cosv[i2]),
                            0.5 * (1 - cosv[i3]),
                        ]
                    )
                    cells0 = qsel_z0 + pv[:, None] * o_z0[None, :]  # (J, 4)
                    m0 = -np.log2(np.maximum(o_z0, 1e-300))
                    e0 = np.minimum(cap, pv[:, None] * m0[None, :])
                    o_z1 = np.stack(
                        [
                            0.5 * (1 + cosd[i0]),
                            0.5 * (1 - cosd[i1]),
                            0.5 * (1 + cosd[i2]),
                            0.5 * (1 - cosd[i3]),
                        ],
                        axis=1,
                    )  # (K, 4)
                    # z=1 arrays indexed [phi k, q pair j, x]
                    cells1 = qsel_z1[None, :, :] + pv[None, :, None] * o_z1[:, None, :]
                    m1 = -np.log2(np.maximum(o_z1, 1e-300))
                    e1 = np.minimum(cap, pv[None, :, None] * m1[:, None, :])

                    if aggregate == "worst_event":
                        red0 = e0.min(axis=1)  # (J,)
                        red1 = e1.min(axis=2).reshape(-1)  # (K*J,)
                        obj = np.minimum(red0[:, None], red1[None, :])
                    else:
                        red0 = e0.sum(axis=1)
                        red1 = e1.sum(axis=2).reshape(-1)
                        obj = (red0[:, None] + red1[None, :]) / 8.0

                    if cons.mode == "vector":
                        v0 = (
                            np.maximum(0.0, lo0[None, :] - cells0)
                            + np.maximum(0.0, cells0 - hi0[None, :])
                        ).sum(axis=1)
                        v1 = (
                            np.maximum(0.0, lo1[None, None, :] - cells1)
                            + np.maximum(0.0, cells1 - hi1[None, None, :])
                        ).sum(axis=2).reshape(-1)
                        viol = v0[:, None] + v1[None, :]
                    elif cons.mode == "average":
                        sum0 = cells0.sum(axis=1)
                        sum1 = cells1.sum(axis=2).reshape(-1)
                        pav = (sum0[:, None] + sum1[None, :]) / 8.0
                        viol = np.maximum(0.0, np.abs(pav - cons.alpha) - cons.delta / 2)
                    else:
                        f0 = np.maximum(0.0, a_lo - cells0).sum(axis=1)
                        f1 = np.maximum(0.0, a_lo - cells1).sum(axis=2).reshape(-1)
                        lowest = np.minimum(cells0.min(axis=1)[:, None], cells1.min(axis=2).reshape(-1)[None, :])
                        viol = f0[:, None] + f1[None, :] + np.maximum(0.0, lowest - a_hi)

                    score = obj + 1e3 * (viol + simplex_pen[:, None] + pen1[None, :])
                    flat = score.reshape(-1)
                    top = np.argpartition(flat, 2)[:3]
                    for f in top:
                        j0 = int(f) // (res * n_pairs)
                        rest = int(f) % (res * n_pairs)
                        k = rest // n_pairs
                        j1 = rest % n_pairs
                        scored.append(
                            (
                                float(flat[f]),
                                (
                                    angles[i0],
                                    angles[i1],
                                    angles[i2],
                                    angles[i3],
                                    angles[k],
                                    q0v[j0],
                                    q1v[j0],
                                    q0v[j1],
                                    q1v[j1],
                                ),
                            )
                        )
    scored.sort(key=lambda s: s[0])
    return np.array([p for _, p in scored[:keep]], dtype=float)


def _compass_refine(
    V0: np.ndarray,
    cons: ConstraintSet,
    aggregate: str,
    cap: float,
    weight: float,
    step0: float,
    min_step: float,
    max_sweeps: int,
) -> np.ndarray:
    V = V0.copy()
    obj, viol = _full_eval_batch(V, cons, aggregate, cap)
    F = obj + weight * viol
    step = np.full(len(V), step0)
    for _ in range(max_sweeps):
        improved = np.zeros(len(V), bool)
        for d in range(9):
            for sgn in (1.0, -1.0):
                Vt = V.copy()
                Vt[:, d] += sgn * step
                objT, violT = _full_eval_batch(Vt, cons, aggregate, cap)
                Ft = objT + weight * violT
                better = Ft < F - 1e-15
                if better.any():
                    V[better] = Vt[better]
                    F[better] = Ft[better]
                    improved |= better
        step[~improved] *= 0.5
        if np.all(step < min_step):
            break
    return V


def brute_force_oracle(
    constraints: ConstraintSet,
    aggregate: str = "worst_event",
    grid_resolution: int = 8,
    *,
    refine_top: int = 100,
) -> float:
    """Independent upper bound on the constrained entropy minimum.

    Exhaustively scans a grid over the 9 gauge-fixed raw parameters, keeps the
    most promising cells under a violation-penalized score, drives each
    through a shrinking compass search, and returns the best objective among
    the strictly feasible refined points.
    """
    if aggregate not in AGGREGATES:
        raise ValueError(f"aggregate must be one of {AGGREGATES}")
    if grid_resolution < 8:
        raise ValueError("grid_resolution must be at least 8 points per dimension")
    cap = DEFAULT_ENTROPY_CAP
    V = _grid_candidates(constraints, aggregate, cap, grid_resolution, refine_top)
    if len(V) == 0:
        raise OracleResolutionError("grid produced no candidate cells")
    h = 2 * math.pi / grid_resolution
    V = _compass_refine(V, constraints, aggregate, cap, 1e4, 0.5 * h, 1e-4, 60)
    V = _compass_refine(V, constraints, aggregate, cap, 1e10, 1e-3, 1e-8, 90)
    obj, viol = _full_eval_batch(V, constraints, aggregate, cap)
    feasible = viol <= FEAS_TOL
    if not feasible.any():
        raise OracleResolutionError(
            "resolution too coarse: no strictly feasible refined point "
            f"(min violation {float(viol.min()):.3g})"
        )
    return float(obj[feasible].min())


# ---------------------------------------------------------------------------
# Indicator scan and data products
# ---------------------------------------------------------------------------


def indicator_scan(
    mode: str,
    alpha_grid: Sequence[float],
    delta: float,
    *,
    aggregate: str = "worst_event",
    restarts: int = 64,
    seed: int = 0,
) -> np.ndarray:
    """Certified bits as a function of the indicator value alpha.

    vector mode places every cell in [alpha - delta/2, alpha + delta/2]; the
    scalar modes constrain the worst-case or average success instead.
    Returns an (n, 2) array of (alpha, bits).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    out = np.empty((len(alpha_grid), 2))
    for i, alpha in enumerate(alpha_grid):
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha grid must lie in [0, 1], got {alpha}")
        if mode == "vector":
            cons = ConstraintSet.uniform_vector(alpha, delta)
        else:
            cons = ConstraintSet.scalar(mode, alpha, delta)
        result = certify_min_entropy(
            cons, aggregate=aggregate, restarts=restarts, seed=seed + i
        )
        out[i] = (alpha, result.bits_per_event)
    return out


def zero_crossing(curve: np.ndarray, tol: float = 1e-3) -> Optional[float]:
    """Midpoint between the last zero and the first positive point of a scan."""
    alphas = curve[:, 0]
    bits = curve[:, 1]
    positive = bits > tol
    if not positive.any():
        return None
    first_pos = int(np.argmax(positive))
    if first_pos == 0:
        return float(alphas[0])
    return float(0.5 * (alphas[first_pos - 1] + alphas[first_pos]))


INDICATOR_HEADER = "alpha,bits"
THRESHOLD_HEADER = "beta,eta,threshold"


def write_indicator_curve(curve: np.ndarray, path) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(INDICATOR_HEADER + "\n")
        for alpha, bits in curve:
            fh.write(f"{alpha:.12g},{bits:.12g}\n")


def write_threshold_surface(rows: Sequence[tuple[float, float, float]], path) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(THRESHOLD_HEADER + "\n")
        for beta, eta, threshold in rows:
            fh.write(f"{beta:.12g},{eta:.12g},{threshold:.12g}\n")


def format_report(
    inputs: dict,
    verdict: PrivacyVerdict,
    result: Optional[CertificationResult],
    bounds: Optional[ProbabilityBounds] = None,
) -> str:
    """Human-readable certification report echoing every input."""
    lines = ["certification report", "=" * 21, "", "[inputs]"]
    for key in sorted(inputs):
        lines.append(f"{key} = {inputs[key]}")
    lines += [
        "",
        "[privacy]",
        f"threshold = {verdict.threshold:.9g}",
        f"margin = {verdict.margin:.9g}",
        f"observed_p_prime_av = {verdict.observed:.9g}",
        f"sync_model = {verdict.sync_model}",
        f"verdict = {'pass' if verdict.passed else 'abort'}",
        f"reason = {verdict.reason}",
    ]
    if bounds is not None:
        lines += ["", "[success probability bounds]"]
        from .protocol import X_LABELS

        for x in range(4):
            for z in range(2):
                lines.append(
                    f"x={X_LABELS[x]} z={z}: [{bounds.lo[x, z]:.9g}, {bounds.hi[x, z]:.9g}]"
                    f" point {bounds.point[x, z]:.9g} n {int(bounds.n_detected[x, z])}"
                )
    lines.append("")
    lines.append("[certification]")
    if result is None:
        lines.append("certified_bits_per_event = 0 (refused: privacy test failed)")
        lines.append("certified_bits_per_round = 0 (refused: privacy test failed)")
    else:
        lines.append(f"aggregate = {result.aggregate}")
        lines.append(f"certified_bits_per_event = {result.bits_per_event:.9g}")
        lines.append(f"certified_bits_per_round = {result.bits_per_round:.9g}")
        lines.append(f"optimizer_restarts = {result.diagnostics.restarts}")
        lines.append(f"optimizer_feasible_restarts = {result.diagnostics.n_feasible}")
    return "\n".join(lines) + "\n"
