"""Single-qubit algebra restricted to the equatorial plane of the Bloch sphere.

A pure equatorial state is fixed by one azimuthal angle, so every overlap has
the closed form |<a|b>|^2 = cos^2((a - b) / 2).  All states and measurement
bases used by the simulator and the certifier live on the equator; nothing in
this module touches general Bloch vectors.

Besides the elementary probability rules, the module reduces an arbitrary
two-outcome POVM element to an equivalent classical-plus-projective response
(forced outcome 0 with weight q0, forced outcome 1 with weight q1, projective
measurement with the remaining weight), and evaluates the min-entropy of a
single response event under such a strategy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

TWO_PI = 2.0 * math.pi

#: Sentinel returned by :func:`event_min_entropy` when the projective branch
#: can never produce the requested outcome.  A distinguished IEEE infinity,
#: never the result of an overflowing float operation.
INFINITE_ENTROPY = math.inf


def canonical_angle(angle: float) -> float:
    """Reduce an angle to [0, 2*pi).  Raises ValueError on non-finite input."""
    if not math.isfinite(angle):
        raise ValueError(f"angle must be finite, got {angle!r}")
    a = math.fmod(angle, TWO_PI)
    if a < 0.0:
        a += TWO_PI
    if a >= TWO_PI:  # fmod rounding can land exactly on 2*pi
        a -= TWO_PI
    return a


def angular_distance(a: float, b: float) -> float:
    """Shortest angular distance between two directions, in [0, pi]."""
    d = abs(canonical_angle(a) - canonical_angle(b))
    return min(d, TWO_PI - d)


def overlap(a: float, b: float) -> float:
    """|<a|b>|^2 for two equatorial pure states, i.e. cos^2((a - b) / 2).

    Symmetric in its arguments and 2*pi-periodic in each.  Evaluated as
    (1 + cos(a - b)) / 2 so that exactly antipodal angles give exactly 0.
    """
    if not (math.isfinite(a) and math.isfinite(b)):
        raise ValueError("overlap requires finite angles")
    return 0.5 * (1.0 + math.cos(a - b))


@dataclass(frozen=True)
class EquatorialState:
    """Pure qubit state with Bloch vector (cos theta, sin theta, 0)."""

    theta: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "theta", canonical_angle(self.theta))


@dataclass(frozen=True)
class MeasurementBasis:
    """Orthogonal equatorial basis; outcome b projects onto phi + b*pi."""

    phi: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "phi", canonical_angle(self.phi))

    def projector_angle(self, outcome: int) -> float:
        if outcome not in (0, 1):
            raise ValueError(f"outcome must be 0 or 1, got {outcome!r}")
        return canonical_angle(self.phi + outcome * math.pi)


@dataclass(frozen=True)
class PovmElement:
    """Two-outcome POVM element for outcome 0, diagonal in an equatorial basis.

    c and c_prime are the eigenvalues on the basis states for outcomes 0 and 1
    of the eigenbasis; construction enforces 0 <= c_prime <= c <= 1.
    """

    c: float
    c_prime: float
    basis: MeasurementBasis

    def __post_init__(self) -> None:
        if not (0.0 <= self.c_prime <= self.c <= 1.0):
            raise ValueError(
                f"require 0 <= c_prime <= c <= 1, got c={self.c}, c_prime={self.c_prime}"
            )


@dataclass(frozen=True)
class ProjectiveMix:
    """Response strategy: forced outcomes plus an occasional projective shot.

    Outputs 0 with probability q0, 1 with probability q1, and with the
    remaining probability p = 1 - q0 - q1 projects the incoming state in
    `basis` and reports the projective outcome.
    """

    q0: float
    q1: float
    basis: MeasurementBasis

    def __post_init__(self) -> None:
        if self.q0 < 0.0 or self.q1 < 0.0:
            raise ValueError("forced-outcome weights must be nonnegative")
        if self.q0 + self.q1 > 1.0 + 1e-12:
            raise ValueError("forced-outcome weights must sum to at most 1")

    @property
    def p(self) -> float:
        """Weight of the projective branch, clipped against rounding."""
        return max(0.0, 1.0 - self.q0 - self.q1)


def born_probability(state: EquatorialState, basis: MeasurementBasis, outcome: int) -> float:
    """Probability that a projective measurement in `basis` yields `outcome`."""
    return overlap(state.theta, basis.projector_angle(outcome))


def povm_outcome_probability(e0: PovmElement, state: EquatorialState, outcome: int) -> float:
    """Outcome probability under the raw POVM trace rule.

    tr(E0 rho) = c |<m0|psi>|^2 + c' |<m1|psi>|^2 for outcome 0; outcome 1 is
    the complement.  Kept separate from the decomposed strategy on purpose so
    the two routes can be checked against each other.
    """
    if outcome not in (0, 1):
        raise ValueError(f"outcome must be 0 or 1, got {outcome!r}")
    p0 = e0.c * born_probability(state, e0.basis, 0) + e0.c_prime * born_probability(
        state, e0.basis, 1
    )
    return p0 if outcome == 0 else 1.0 - p0


def decompose_povm_element(e0: PovmElement) -> ProjectiveMix:
    """Replace a two-outcome POVM by forced outcomes plus a projective shot.

    With q0 = c', q1 = 1 - c and the projective branch in the POVM eigenbasis,
    the response distribution equals the trace rule exactly for every input
    state.
    """
    if e0.c < e0.c_prime:
        raise ValueError("POVM element invariant violated: c < c_prime")
    return ProjectiveMix(q0=e0.c_prime, q1=1.0 - e0.c, basis=e0.basis)


def response_probability(strategy: ProjectiveMix, state: EquatorialState, outcome: int) -> float:
    """Probability of `outcome` under a forced-plus-projective response."""
    q = strategy.q0 if outcome == 0 else strategy.q1
    return q + strategy.p * born_probability(state, strategy.basis, outcome)


def event_min_entropy(strategy: ProjectiveMix, state: EquatorialState, outcome: int) -> float:
    """Min-entropy of one response event, in bits: -p * log2 |<m=b|x>|^2.

    The forced branches carry no randomness, so p = 0 gives exactly 0 bits
    regardless of the overlap.  A projective branch that can never produce the
    outcome (zero overlap with p > 0) returns the INFINITE_ENTROPY sentinel;
    callers that optimize over strategies must saturate it themselves.
    """
    p = strategy.p
    if p == 0.0:
        return 0.0
    born = born_probability(state, strategy.basis, outcome)
    if born == 0.0:
        return INFINITE_ENTROPY
    return -p * math.log2(born)
