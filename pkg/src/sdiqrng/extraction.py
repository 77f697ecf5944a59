"""Raw bit string construction and von Neumann debiasing.

Every unblocked round contributes one bit to the raw string: the outcome when
a detection happened, 0 when it did not.  Blocked rounds contribute nothing.
The extractor consumes strictly consecutive, non-overlapping pairs in a
single pass: 01 -> 0, 10 -> 1, 00 and 11 are discarded.  On i.i.d. input the
output is exactly unbiased; the output is not compressed to any certified
rate (that would need a seeded extractor and is reported separately).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .protocol import EMPTY, RoundLog


@dataclass(frozen=True)
class Provenance:
    detected_zero: int
    detected_one: int
    empty_as_zero: int


@dataclass(frozen=True)
class RawString:
    """One bit per unblocked round, in round order."""

    bits: np.ndarray
    provenance: Provenance

    def __post_init__(self) -> None:
        p = self.provenance
        if p.detected_zero + p.detected_one + p.empty_as_zero != len(self.bits):
            raise ValueError("provenance counts must sum to the string length")

    def __len__(self) -> int:
        return len(self.bits)


def build_bit_string(log: RoundLog) -> RawString:
    """Raw string over unblocked rounds: the outcome bit, or 0 for no detection."""
    b = log.b[~log.blocked]
    bits = np.where(b == EMPTY, 0, b).astype(np.uint8)
    return RawString(
        bits=bits,
        provenance=Provenance(
            detected_zero=int(np.count_nonzero(b == 0)),
            detected_one=int(np.count_nonzero(b == 1)),
            empty_as_zero=int(np.count_nonzero(b == EMPTY)),
        ),
    )


def von_neumann(source) -> np.ndarray:
    """Debias by pairing: 01 -> 0, 10 -> 1, equal pairs discarded."""
    bits = source.bits if isinstance(source, RawString) else np.asarray(source, np.uint8)
    n = len(bits) - (len(bits) % 2)
    first = bits[0:n:2]
    second = bits[1:n:2]
    return first[first != second].astype(np.uint8)


def write_bits(path, bits: np.ndarray) -> None:
    """Pack a bit array MSB-first into bytes; length goes to a sidecar file.

    The final partial byte is zero-padded; `<path>.nbits` holds one line
    `n_bits=<count>`.
    """
    bits = np.asarray(bits, np.uint8)
    with open(path, "wb") as fh:
        fh.write(np.packbits(bits).tobytes())
    with open(str(path) + ".nbits", "w", encoding="ascii", newline="\n") as fh:
        fh.write(f"n_bits={len(bits)}\n")


def read_bits(path) -> np.ndarray:
    with open(str(path) + ".nbits", "r", encoding="ascii") as fh:
        line = fh.readline().strip()
    if not line.startswith("n_bits="):
        raise ValueError(f"sidecar for {path} must start with n_bits=")
    n = int(line.split("=", 1)[1])
    with open(path, "rb") as fh:
        packed = np.frombuffer(fh.read(), np.uint8)
    return np.unpackbits(packed)[:n]
