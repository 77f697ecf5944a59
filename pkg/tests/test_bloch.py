import cmath
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdiqrng.bloch import (
    EquatorialState,
    INFINITE_ENTROPY,
    MeasurementBasis,
    PovmElement,
    ProjectiveMix,
    born_probability,
    canonical_angle,
    decompose_povm_element,
    event_min_entropy,
    overlap,
    povm_outcome_probability,
    response_probability,
)

QRAC = math.cos(math.pi / 8) ** 2  # 0.8535533905932737


def overlap_oracle(a: float, b: float) -> float:
    """Independent route: amplitudes of the two equatorial states."""
    inner = (1.0 + cmath.exp(1j * (b - a))) / 2.0
    return abs(inner) ** 2


angles = st.floats(min_value=-50.0, max_value=50.0, allow_nan=False, allow_infinity=False)


class TestOverlap:
    def test_identical_states(self):
        assert overlap(1.3, 1.3) == 1.0

    def test_orthogonal_states(self):
        assert overlap(1.3, 1.3 + math.pi) == pytest.approx(0.0, abs=1e-12)

    def test_qrac_value_against_amplitude_oracle(self):
        assert overlap(math.pi / 4, 0.0) == pytest.approx(0.8535533906, abs=1e-9)
        assert overlap(math.pi / 4, 0.0) == pytest.approx(overlap_oracle(math.pi / 4, 0.0), abs=1e-12)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            overlap(math.nan, 0.0)
        with pytest.raises(ValueError):
            overlap(0.0, math.inf)

    @given(a=angles, b=angles)
    def test_matches_amplitude_oracle(self, a, b):
        assert overlap(a, b) == pytest.approx(overlap_oracle(a, b), abs=1e-9)

    @given(a=angles, b=angles)
    def test_symmetric_and_periodic(self, a, b):
        assert overlap(a, b) == overlap(b, a)
        assert overlap(a + 2 * math.pi, b) == pytest.approx(overlap(a, b), abs=1e-9)

    @given(a=angles, b=angles)
    def test_complement(self, a, b):
        assert overlap(a, b) + overlap(a, b + math.pi) == pytest.approx(1.0, abs=1e-12)

    @given(a=angles)
    def test_range(self, a):
        v = overlap(a, 0.0)
        assert 0.0 <= v <= 1.0


class TestAngleCanonicalization:
    @given(a=angles)
    def test_range_and_equivalence(self, a):
        c = canonical_angle(a)
        assert 0.0 <= c < 2 * math.pi
        assert math.cos(c) == pytest.approx(math.cos(a), abs=1e-9)
        assert math.sin(c) == pytest.approx(math.sin(a), abs=1e-9)

    def test_state_and_basis_canonicalize(self):
        assert EquatorialState(-math.pi / 2).theta == pytest.approx(3 * math.pi / 2)
        assert MeasurementBasis(5 * math.pi).phi == pytest.approx(math.pi)


class TestBorn:
    def test_aligned(self):
        assert born_probability(EquatorialState(0.0), MeasurementBasis(0.0), 0) == 1.0

    def test_unbiased(self):
        v = born_probability(EquatorialState(math.pi / 2), MeasurementBasis(0.0), 1)
        assert v == pytest.approx(0.5, abs=1e-12)

    def test_qrac_cell(self):
        v = born_probability(EquatorialState(math.pi / 4), MeasurementBasis(math.pi / 2), 0)
        assert v == pytest.approx(0.8535533906, abs=1e-9)

    def test_bad_outcome(self):
        with pytest.raises(ValueError):
            born_probability(EquatorialState(0.0), MeasurementBasis(0.0), 2)

    @given(theta=angles, phi=angles)
    def test_normalization(self, theta, phi):
        s, m = EquatorialState(theta), MeasurementBasis(phi)
        total = born_probability(s, m, 0) + born_probability(s, m, 1)
        assert total == pytest.approx(1.0, abs=1e-12)


class TestPovmDecomposition:
    def test_generic_element(self):
        e0 = PovmElement(c=0.7, c_prime=0.2, basis=MeasurementBasis(0.4))
        mix = decompose_povm_element(e0)
        assert mix.q0 == pytest.approx(0.2)
        assert mix.q1 == pytest.approx(0.3)
        assert mix.p == pytest.approx(0.5)
        assert mix.basis == e0.basis

    def test_projector_passes_through(self):
        mix = decompose_povm_element(PovmElement(1.0, 0.0, MeasurementBasis(1.0)))
        assert (mix.q0, mix.q1, mix.p) == (0.0, 0.0, 1.0)

    def test_identity_forces_outcome_zero(self):
        mix = decompose_povm_element(PovmElement(1.0, 1.0, MeasurementBasis(1.0)))
        assert (mix.q0, mix.q1, mix.p) == (1.0, 0.0, 0.0)

    def test_eigenvalue_ordering_enforced(self):
        with pytest.raises(ValueError):
            PovmElement(c=0.2, c_prime=0.7, basis=MeasurementBasis(0.0))

    def test_distributions_match_trace_rule_bulk(self):
        # the decomposed response must reproduce the raw POVM statistics
        rng = np.random.default_rng(202)
        worst = 0.0
        for _ in range(1000):
            lo, hi = sorted(rng.random(2))
            e0 = PovmElement(c=hi, c_prime=lo, basis=MeasurementBasis(rng.uniform(0, 2 * math.pi)))
            state = EquatorialState(rng.uniform(0, 2 * math.pi))
            mix = decompose_povm_element(e0)
            for outcome in (0, 1):
                worst = max(
                    worst,
                    abs(
                        povm_outcome_probability(e0, state, outcome)
                        - response_probability(mix, state, outcome)
                    ),
                )
        assert worst <= 1e-12


class TestResponseProbability:
    def test_frozen_value(self):
        mix = ProjectiveMix(q0=0.1, q1=0.1, basis=MeasurementBasis(0.0))
        v = response_probability(mix, EquatorialState(math.pi / 4), 0)
        assert v == pytest.approx(0.1 + 0.8 * QRAC, abs=1e-12)
        assert v == pytest.approx(0.7828427125, abs=1e-9)

    def test_forced_outcome(self):
        mix = ProjectiveMix(q0=1.0, q1=0.0, basis=MeasurementBasis(2.0))
        assert response_probability(mix, EquatorialState(0.3), 0) == 1.0

    def test_pure_projector(self):
        mix = ProjectiveMix(q0=0.0, q1=0.0, basis=MeasurementBasis(1.1))
        assert response_probability(mix, EquatorialState(1.1), 0) == 1.0

    @given(theta=angles, phi=angles, q0=st.floats(0, 1), q1=st.floats(0, 1))
    @settings(max_examples=200)
    def test_outcomes_sum_to_one(self, theta, phi, q0, q1):
        if q0 + q1 > 1.0:
            q0, q1 = q0 / 2, q1 / 2
        mix = ProjectiveMix(q0=q0, q1=q1, basis=MeasurementBasis(phi))
        total = sum(response_probability(mix, EquatorialState(theta), b) for b in (0, 1))
        assert total == pytest.approx(1.0, abs=1e-12)

    def test_invalid_weights(self):
        with pytest.raises(ValueError):
            ProjectiveMix(q0=0.7, q1=0.7, basis=MeasurementBasis(0.0))
        with pytest.raises(ValueError):
            ProjectiveMix(q0=-0.1, q1=0.0, basis=MeasurementBasis(0.0))


class TestEventMinEntropy:
    def test_fair_projection_gives_one_bit(self):
        mix = ProjectiveMix(0.0, 0.0, MeasurementBasis(0.0))
        assert event_min_entropy(mix, EquatorialState(math.pi / 2), 0) == pytest.approx(1.0)

    def test_forced_outcomes_carry_no_randomness(self):
        mix = ProjectiveMix(0.5, 0.5, MeasurementBasis(0.0))
        assert event_min_entropy(mix, EquatorialState(math.pi), 0) == 0.0

    def test_qrac_event(self):
        mix = ProjectiveMix(0.0, 0.0, MeasurementBasis(0.0))
        v = event_min_entropy(mix, EquatorialState(math.pi / 4), 0)
        assert v == pytest.approx(-math.log2(QRAC), abs=1e-12)
        assert v == pytest.approx(0.2284, abs=5e-5)

    def test_impossible_outcome_is_infinite_sentinel(self):
        mix = ProjectiveMix(0.0, 0.0, MeasurementBasis(0.0))
        v = event_min_entropy(mix, EquatorialState(math.pi), 0)
        assert v == INFINITE_ENTROPY
        assert math.isinf(v)

    @given(p=st.floats(0.0, 1.0), theta=angles)
    @settings(max_examples=200)
    def test_linear_in_projective_weight(self, p, theta):
        q = (1.0 - p) / 2
        mix = ProjectiveMix(q, q, MeasurementBasis(0.0))
        full = ProjectiveMix(0.0, 0.0, MeasurementBasis(0.0))
        h_full = event_min_entropy(full, EquatorialState(theta), 0)
        h = event_min_entropy(mix, EquatorialState(theta), 0)
        if math.isinf(h_full):
            assert h == (0.0 if mix.p == 0.0 else INFINITE_ENTROPY)
        else:
            assert h == pytest.approx(mix.p * h_full, abs=1e-12)

    def test_nonincreasing_in_overlap(self):
        mix = ProjectiveMix(0.0, 0.0, MeasurementBasis(0.0))
        values = [
            event_min_entropy(mix, EquatorialState(t), 0)
            for t in (1.4, 1.0, 0.6, 0.2, 0.0)  # increasing overlap with angle 0
        ]
        assert all(a >= b - 1e-15 for a, b in zip(values, values[1:]))
