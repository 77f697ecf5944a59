"""Desk-scale simulator and certifier for blocker-based SDI randomness generation."""

from .bloch import (
    EquatorialState,
    INFINITE_ENTROPY,
    MeasurementBasis,
    PovmElement,
    ProjectiveMix,
    born_probability,
    decompose_povm_element,
    event_min_entropy,
    overlap,
    povm_outcome_probability,
    response_probability,
)
from .protocol import (
    EMPTY,
    DeviceStrategy,
    LogParseError,
    ProtocolConfig,
    RoundDraws,
    RoundLog,
    RoundRecord,
    build_strategy,
    honest_preparation,
    read_log,
    run_protocol,
    simulate_round,
    sync_attack_strategy,
    write_log,
)
from .estimation import (
    ConditionalTable,
    InsufficientDataError,
    ProbabilityBounds,
    Tally,
    WrongVariantError,
    conditional_tables,
    observed_efficiency,
    p_prime_average,
    probability_bounds,
    success_probability,
    tally,
    write_bounds,
)
from .certification import (
    AdversaryParams,
    CertificationResult,
    ConstraintSet,
    InfeasibleConstraintsError,
    NonConvergenceError,
    OracleResolutionError,
    PrivacyVerdict,
    brute_force_oracle,
    certify_min_entropy,
    indicator_scan,
    per_round_rate,
    privacy_threshold,
    shared_randomness_test,
    sync_overhead,
    zero_crossing,
)
from .extraction import RawString, build_bit_string, read_bits, von_neumann, write_bits

__version__ = "0.1.0"
