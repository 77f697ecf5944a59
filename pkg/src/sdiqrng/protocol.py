"""Monte-Carlo engine for the prepare -> block -> measure round structure.

Each round draws a preparation input x (two bits), a blocker input y uniform
on [0, 1], and a measurement input z (one bit).  The blocker absorbs the
system iff y <= blocking threshold; otherwise the device strategy produces an
outcome b in {0, 1} or the no-detection symbol.  Honest devices implement the
standard 2->1 quantum random access code and lose detections i.i.d. at the
channel efficiency; adversarial strategies decide their own no-detection
reports, which is exactly the freedom a detection-loophole attack exploits.

Randomness is organized as five named Philox streams (x, y, z, channel,
strategy) keyed by (master seed, stream index), one draw per round per
stream, so round i of any stream depends only on (seed, stream, i) and adding
a new consumer never perturbs the others.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, fields, replace
from typing import Iterator, Optional

import numpy as np

from .bloch import EquatorialState, MeasurementBasis, overlap

#: Outcome value used for "no result" in integer outcome arrays.
EMPTY = -1

X_LABELS = ("00", "01", "10", "11")

#: Honest preparation angles per input x (standard 2->1 QRAC geometry) and
#: the measurement basis angles per input z.  Under these choices every one
#: of the 8 success probabilities Pr[b = x_z] equals cos^2(pi/8).
HONEST_THETA = (math.pi / 4, 7 * math.pi / 4, 3 * math.pi / 4, 5 * math.pi / 4)
HONEST_PHI = (0.0, math.pi / 2)

QRAC_SUCCESS = math.cos(math.pi / 8) ** 2

_STREAMS = {"x": 0, "y": 1, "z": 2, "channel": 3, "strategy": 4}

SYNC_MODELS = ("per_block", "per_run")
STRATEGY_IDS = ("honest", "prng", "classical", "sync")


class LogParseError(ValueError):
    """A round-log file does not conform to the line format."""


def stream_rng(seed: int, name: str) -> np.random.Generator:
    """Independent counter-based generator for one named stream."""
    key = (_STREAMS[name] << 64) | (seed & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.Philox(key=key))


def target_bit(x: int, z: int) -> int:
    """The bit of x the measurement with setting z is trying to recover."""
    return (x >> 1) & 1 if z == 0 else x & 1


def target_bits(x: np.ndarray, z: np.ndarray) -> np.ndarray:
    return np.where(z == 0, (x >> 1) & 1, x & 1).astype(np.int8)


def honest_preparation(x: int) -> EquatorialState:
    """Equatorial state emitted by the honest preparation device for input x."""
    if x not in (0, 1, 2, 3):
        raise ValueError(f"x must be in 0..3 (labels {X_LABELS}), got {x!r}")
    return EquatorialState(HONEST_THETA[x])


def honest_basis(z: int) -> MeasurementBasis:
    if z not in (0, 1):
        raise ValueError(f"z must be 0 or 1, got {z!r}")
    return MeasurementBasis(HONEST_PHI[z])


def _honest_p0_table() -> np.ndarray:
    """Pr[b = 0 | x, z] for the honest devices, shape (4, 2)."""
    table = np.empty((4, 2))
    for x in range(4):
        for z in range(2):
            table[x, z] = overlap(HONEST_THETA[x], HONEST_PHI[z])
    return table


HONEST_P0 = _honest_p0_table()


@dataclass(frozen=True)
class ProtocolConfig:
    """Run parameters; `blocking` is the blocker threshold on y.

    For honest runs `channel_efficiency` is the i.i.d. detection probability.
    The shared-seed sync strategy reinterprets it as the detection efficiency
    the attack chooses to present to the user (only with hiding enabled).
    """

    blocking: float
    channel_efficiency: float
    n_rounds: int
    seed: int
    strategy: str = "honest"
    sync_model: str = "per_block"
    hide_in_no_detection: bool = True
    prng_q: tuple[float, float, float, float] = (0.5, 0.5, 0.5, 0.5)
    classical_encoding: str = "0011"
    classical_decoding: str = "0011"

    def __post_init__(self) -> None:
        if not 0.0 <= self.blocking < 1.0:
            raise ValueError(f"blocking must be in [0, 1), got {self.blocking}")
        if not 0.0 < self.channel_efficiency <= 1.0:
            raise ValueError(
                f"channel_efficiency must be in (0, 1], got {self.channel_efficiency}"
            )
        if self.n_rounds < 1:
            raise ValueError("n_rounds must be positive; an empty log is not allowed")
        if self.strategy not in STRATEGY_IDS:
            raise ValueError(f"strategy must be one of {STRATEGY_IDS}, got {self.strategy!r}")
        if self.sync_model not in SYNC_MODELS:
            raise ValueError(f"sync_model must be one of {SYNC_MODELS}, got {self.sync_model!r}")
        q00, q01, q10, q11 = self.prng_q
        for qa, qb in ((q00, q01), (q10, q11)):
            if qa < 0 or qb < 0 or qa + qb > 1.0 + 1e-12:
                raise ValueError(f"prng_q pairs must be nonnegative and sum to <= 1: {self.prng_q}")
        for name, table, length in (
            ("classical_encoding", self.classical_encoding, 4),
            ("classical_decoding", self.classical_decoding, 4),
        ):
            if len(table) != length or any(ch not in "01" for ch in table):
                raise ValueError(f"{name} must be {length} characters of 0/1, got {table!r}")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ProtocolConfig":
        kw = dict(d)
        if "prng_q" in kw and isinstance(kw["prng_q"], str):
            kw["prng_q"] = tuple(float(s) for s in kw["prng_q"].split(","))
        for key in ("blocking", "channel_efficiency"):
            if key in kw:
                kw[key] = float(kw[key])
        for key in ("n_rounds", "seed"):
            if key in kw:
                kw[key] = int(kw[key])
        if "hide_in_no_detection" in kw and isinstance(kw["hide_in_no_detection"], str):
            kw["hide_in_no_detection"] = kw["hide_in_no_detection"].lower() in ("1", "true", "yes")
        return cls(**kw)


@dataclass(frozen=True)
class RoundRecord:
    round_id: int
    x: int
    y: float
    z: int
    blocked: bool
    b: int  # 0, 1 or EMPTY

    def __post_init__(self) -> None:
        if self.blocked and self.b != EMPTY:
            raise ValueError("blocked rounds cannot carry an outcome")
        if self.b not in (0, 1, EMPTY):
            raise ValueError(f"b must be 0, 1 or EMPTY, got {self.b!r}")


@dataclass
class RoundLog:
    """Column-oriented log of a full run; round_id is the array index."""

    config: Optional[ProtocolConfig]
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    blocked: np.ndarray
    b: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.x)
        if not (len(self.y) == len(self.z) == len(self.blocked) == len(self.b) == n):
            raise ValueError("log columns must have equal length")
        if np.any(self.b[self.blocked] != EMPTY):
            raise ValueError("blocked rounds must have the empty outcome")

    def __len__(self) -> int:
        return len(self.x)

    def record(self, i: int) -> RoundRecord:
        return RoundRecord(
            round_id=i,
            x=int(self.x[i]),
            y=float(self.y[i]),
            z=int(self.z[i]),
            blocked=bool(self.blocked[i]),
            b=int(self.b[i]),
        )

    def records(self) -> Iterator[RoundRecord]:
        for i in range(len(self)):
            yield self.record(i)


@dataclass(frozen=True)
class RoundDraws:
    """Uniform variates dedicated to one round (channel loss and strategy)."""

    channel: float
    outcome: float


class DeviceStrategy:
    """Joint behaviour of the preparation and measurement black boxes.

    Stateless strategies answer each unblocked round independently through
    `respond` / `respond_bulk`.  Stateful strategies additionally observe
    blocked rounds via `on_blocked` and must be run sequentially.
    """

    stateful = False

    def reset(self) -> None:
        pass

    def on_blocked(self) -> None:
        pass

    def respond(self, x: int, z: int, channel_u: float, outcome_u: float) -> int:
        raise NotImplementedError

    def respond_bulk(
        self, x: np.ndarray, z: np.ndarray, channel_u: np.ndarray, outcome_u: np.ndarray
    ) -> np.ndarray:
        raise NotImplementedError


class HonestQrac(DeviceStrategy):
    """Honest devices: QRAC preparation, projective readout, i.i.d. loss."""

    def __init__(self, channel_efficiency: float):
        self.eta = float(channel_efficiency)

    def respond(self, x, z, channel_u, outcome_u):
        if channel_u >= self.eta:
            return EMPTY
        return 0 if outcome_u < HONEST_P0[x, z] else 1

    def respond_bulk(self, x, z, channel_u, outcome_u):
        b = np.where(outcome_u < HONEST_P0[x, z], 0, 1).astype(np.int8)
        b[channel_u >= self.eta] = EMPTY
        return b


class PrngOnly(DeviceStrategy):
    """Input-oblivious devices: forced outcomes per z, remainder undetected.

    The measurement box answers 0 with probability q[z][0] and 1 with
    probability q[z][1] from its own pseudo-random source, and reports no
    detection with the leftover weight; x never enters.
    """

    def __init__(self, q: tuple[float, float, float, float]):
        q00, q01, q10, q11 = (float(v) for v in q)
        self.q0 = np.array([q00, q10])  # weight of forced outcome 0, per z
        self.q1 = np.array([q01, q11])

    def respond(self, x, z, channel_u, outcome_u):
        if outcome_u < self.q0[z]:
            return 0
        if outcome_u < self.q0[z] + self.q1[z]:
            return 1
        return EMPTY

    def respond_bulk(self, x, z, channel_u, outcome_u):
        lo = self.q0[z]
        b = np.full(len(x), EMPTY, np.int8)
        b[outcome_u < lo + self.q1[z]] = 1
        b[outcome_u < lo] = 0
        return b


class ClassicalDeterministic(DeviceStrategy):
    """Deterministic one-bit encoding/decoding pair, always detected.

    The preparation box maps x to a classical message bit m = encoding[x];
    the measurement box outputs decoding[2*m + z].  This is the strongest
    deterministic behaviour realizable without shared randomness and tops out
    at an average success probability of 3/4.
    """

    def __init__(self, encoding: str, decoding: str):
        self.enc = np.array([int(c) for c in encoding], np.int8)
        self.dec = np.array([int(c) for c in decoding], np.int8).reshape(2, 2)

    def respond(self, x, z, channel_u, outcome_u):
        return int(self.dec[self.enc[x], z])

    def respond_bulk(self, x, z, channel_u, outcome_u):
        return self.dec[self.enc[x], z].astype(np.int8)


def _sync_hide_mask(sync: np.ndarray, add: float) -> np.ndarray:
    """No-detection decisions for the shared-seed attack, one per unblocked round.

    A running budget grows by `add` = 1 - target efficiency each round and is
    spent (one unit per hidden round) on resynchronization rounds first; on
    synchronized rounds one unit is burnt only if a full unit stays in reserve,
    so the next resynchronization can still be hidden.
    """
    n = sync.shape[0]
    out = np.empty(n, np.bool_)
    budget = 1.0
    for i in range(n):
        budget += add
        if sync[i]:
            if budget >= 1.0:
                budget -= 1.0
                out[i] = True
            else:
                out[i] = False
        else:
            if budget >= 2.0:
                budget -= 1.0
                out[i] = True
            else:
                out[i] = False
    return out


try:  # pragma: no cover - exercised implicitly when numba is installed
    from numba import njit

    _sync_hide_mask_fast = njit(cache=True)(_sync_hide_mask)
except Exception:  # pragma: no cover
    _sync_hide_mask_fast = _sync_hide_mask


class SharedSeedSync(DeviceStrategy):
    """Shared-seed attack: perfect success while synchronized, coin during resync.

    Both boxes count rounds from a common seed, so while synchronized the
    measurement box can output b = x_z every time.  Every blocked round breaks
    the count and forces resynchronization rounds whose outcome is an
    uncorrelated fair coin: one such round per blocked round ("per_block") or
    one per maximal run of blocked rounds ("per_run").  With hiding enabled
    the attack reports resynchronization rounds as no-detections while keeping
    the overall reported efficiency at `target_efficiency`.
    """

    stateful = True

    def __init__(self, sync_model: str, hide_in_no_detection: bool, target_efficiency: float = 1.0):
        if sync_model not in SYNC_MODELS:
            raise ValueError(f"sync_model must be one of {SYNC_MODELS}, got {sync_model!r}")
        self.sync_model = sync_model
        self.hide = bool(hide_in_no_detection)
        self.target_efficiency = float(target_efficiency)
        self.reset()

    def reset(self) -> None:
        self._pending = 0
        self._budget = 1.0
        self.sync_rounds = 0  # diagnostic counter over unblocked rounds

    def on_blocked(self) -> None:
        if self.sync_model == "per_block":
            self._pending += 1
        else:
            self._pending = 1

    def respond(self, x, z, channel_u, outcome_u):
        add = 1.0 - self.target_efficiency
        if self.hide:
            self._budget += add
        if self._pending:
            self._pending -= 1
            self.sync_rounds += 1
            if self.hide and self._budget >= 1.0:
                self._budget -= 1.0
                return EMPTY
            return 0 if outcome_u < 0.5 else 1
        if self.hide and self._budget >= 2.0:
            self._budget -= 1.0
            return EMPTY
        return target_bit(x, z)

    def sync_flags(self, blocks_before: np.ndarray) -> np.ndarray:
        """Which unblocked rounds are resynchronization rounds.

        blocks_before[i] counts the blocked rounds between unblocked round
        i-1 and unblocked round i.  per_run needs one resync after any such
        gap; per_block queues one resync per blocked round (a unit-service
        queue, solved with the reflected-walk form of the queue recursion).
        """
        if self.sync_model == "per_run":
            return blocks_before > 0
        walk = np.cumsum(blocks_before - 1)
        backlog = walk - np.minimum.accumulate(np.minimum(walk, 0))
        before_service = np.empty_like(backlog)
        before_service[0] = blocks_before[0]
        before_service[1:] = backlog[:-1] + blocks_before[1:]
        return before_service > 0

    def respond_bulk_stateful(
        self, x: np.ndarray, z: np.ndarray, outcome_u: np.ndarray, blocks_before: np.ndarray
    ) -> np.ndarray:
        """Vectorized equivalent of per-round evaluation over unblocked rounds."""
        sync = self.sync_flags(blocks_before)
        self.sync_rounds += int(sync.sum())
        coins = np.where(outcome_u < 0.5, 0, 1).astype(np.int8)
        b = np.where(sync, coins, target_bits(x, z)).astype(np.int8)
        if self.hide:
            hidden = _sync_hide_mask_fast(sync, 1.0 - self.target_efficiency)
            b[hidden] = EMPTY
        return b


def build_strategy(config: ProtocolConfig) -> DeviceStrategy:
    if config.strategy == "honest":
        return HonestQrac(config.channel_efficiency)
    if config.strategy == "prng":
        return PrngOnly(config.prng_q)
    if config.strategy == "classical":
        return ClassicalDeterministic(config.classical_encoding, config.classical_decoding)
    if config.strategy == "sync":
        return sync_attack_strategy(
            config.sync_model, config.hide_in_no_detection, config.channel_efficiency
        )
    raise ValueError(f"unknown strategy {config.strategy!r}")


def sync_attack_strategy(
    sync_model: str, hide_in_no_detection: bool, target_efficiency: float = 1.0
) -> SharedSeedSync:
    """Stateful shared-seed synchronization attack strategy."""
    return SharedSeedSync(sync_model, hide_in_no_detection, target_efficiency)


def draw_round_inputs(config: ProtocolConfig):
    """All per-round randomness for a run, one array per named stream."""
    n = config.n_rounds
    x = stream_rng(config.seed, "x").integers(0, 4, n, dtype=np.uint8)
    y = stream_rng(config.seed, "y").random(n)
    z = stream_rng(config.seed, "z").integers(0, 2, n, dtype=np.uint8)
    channel_u = stream_rng(config.seed, "channel").random(n)
    outcome_u = stream_rng(config.seed, "strategy").random(n)
    return x, y, z, channel_u, outcome_u


def simulate_round(
    config: ProtocolConfig,
    strategy: DeviceStrategy,
    x: int,
    y: float,
    z: int,
    draws: RoundDraws,
    round_id: int = 0,
) -> RoundRecord:
    """One protocol round.  Blocked and lost rounds are normal outcomes."""
    if y <= config.blocking:
        strategy.on_blocked()
        return RoundRecord(round_id=round_id, x=x, y=y, z=z, blocked=True, b=EMPTY)
    b = strategy.respond(x, z, draws.channel, draws.outcome)
    return RoundRecord(round_id=round_id, x=x, y=y, z=z, blocked=False, b=b)


def run_protocol(config: ProtocolConfig, strategy: Optional[DeviceStrategy] = None) -> RoundLog:
    """Simulate a full run.  Identical config gives an identical log."""
    if strategy is None:
        strategy = build_strategy(config)
    strategy.reset()
    x, y, z, channel_u, outcome_u = draw_round_inputs(config)
    blocked = y <= config.blocking
    b = np.full(config.n_rounds, EMPTY, np.int8)
    idx = np.flatnonzero(~blocked)
    if idx.size:
        if strategy.stateful:
            blocks_before = np.diff(np.concatenate(([-1], idx))) - 1
            b[idx] = strategy.respond_bulk_stateful(
                x[idx], z[idx], outcome_u[idx], blocks_before
            )
        else:
            b[idx] = strategy.respond_bulk(x[idx], z[idx], channel_u[idx], outcome_u[idx])
    return RoundLog(config=config, x=x, y=y, z=z, blocked=blocked, b=b)


LOG_HEADER = "round_id,x,y,z,blocked,b"


def write_log(log: RoundLog, path) -> None:
    """Serialize a log, one comma-separated record per line after the header."""
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(LOG_HEADER + "\n")
        buf = io.StringIO()
        for i in range(len(log)):
            b = log.b[i]
            buf.write(
                f"{i},{X_LABELS[log.x[i]]},{log.y[i]:.17g},{log.z[i]},"
                f"{int(log.blocked[i])},{'-' if b == EMPTY else b}\n"
            )
            if buf.tell() > 1 << 20:
                fh.write(buf.getvalue())
                buf = io.StringIO()
        fh.write(buf.getvalue())


def read_log(path, config: Optional[ProtocolConfig] = None) -> RoundLog:
    """Parse a serialized log; raises LogParseError with the offending line."""
    xs, ys, zs, blks, bs = [], [], [], [], []
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().rstrip("\n")
        if header != LOG_HEADER:
            raise LogParseError(f"line 1: expected header {LOG_HEADER!r}, got {header!r}")
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split(",")
            if len(parts) != 6:
                raise LogParseError(f"line {lineno}: expected 6 fields, got {len(parts)}")
            rid, xlab, ystr, zstr, blkstr, bstr = parts
            try:
                if int(rid) != lineno - 2:
                    raise ValueError
            except ValueError:
                raise LogParseError(f"line {lineno}: round_id must equal {lineno - 2}") from None
            if xlab not in X_LABELS:
                raise LogParseError(f"line {lineno}: bad x label {xlab!r}")
            try:
                yv = float(ystr)
            except ValueError:
                raise LogParseError(f"line {lineno}: bad y value {ystr!r}") from None
            if zstr not in ("0", "1"):
                raise LogParseError(f"line {lineno}: bad z value {zstr!r}")
            if blkstr not in ("0", "1"):
                raise LogParseError(f"line {lineno}: bad blocked flag {blkstr!r}")
            if bstr not in ("0", "1", "-"):
                raise LogParseError(f"line {lineno}: bad outcome {bstr!r}")
            blocked = blkstr == "1"
            bval = EMPTY if bstr == "-" else int(bstr)
            if blocked and bval != EMPTY:
                raise LogParseError(f"line {lineno}: blocked round carries an outcome")
            xs.append(X_LABELS.index(xlab))
            ys.append(yv)
            zs.append(int(zstr))
            blks.append(blocked)
            bs.append(bval)
    return RoundLog(
        config=config,
        x=np.array(xs, np.uint8),
        y=np.array(ys, np.float64),
        z=np.array(zs, np.uint8),
        blocked=np.array(blks, np.bool_),
        b=np.array(bs, np.int8),
    )
