"""Domain types for CSI measurements and the CSIR binary log format.

A measurement campaign is a sequence of packets.  Each packet carries the
complex channel gains estimated for every (receive antenna, transmit
antenna, subcarrier) triple, plus the receiver noise floor and labelling
metadata (person identity, acquisition condition, timestamp).

CSIR file layout (all little-endian):

    header:  magic "CSIR" | version u16 | n_tx u8 | n_rx u8
             | n_subcarriers u16 | record_count u16          (12 bytes)
    record:  identity u32 | condition u8 | timestamp_ns u64
             | noise_floor_dbm f32
             | gains: n_rx * n_tx * K pairs of (f32 real, f32 imag),
               subcarrier-fastest, then tx antenna, then rx antenna

Gains are stored at single precision; writing a log quantizes f64 gains to
f32.  Parsing yields f64 values that are exactly representable in f32, so
``write_log(parse_log(data)) == data`` bit-exactly for any valid file, and
``parse_log`` of a written log reproduces the log exactly whenever its
gains were f32-representable to begin with.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from enum import IntEnum
from typing import BinaryIO

import numpy as np

CSIR_MAGIC = b"CSIR"
CSIR_VERSION = 1
#: record_count is a u16, which caps a single .csir file at 65535 records.
CSIR_MAX_RECORDS = 0xFFFF

_HEADER = struct.Struct("<4sHBBHH")
_RECORD_HEAD = struct.Struct("<IBQf")


class CsirFormatError(ValueError):
    """Raised when bytes do not form a valid CSIR log."""


class Condition(IntEnum):
    """Acquisition condition of a packet (0 is the no-person baseline)."""

    EMPTY = 0
    STANDING_FACING = 1
    STANDING_AWAY = 2
    WALK_LR = 3
    WALK_RL = 4


#: Conditions during which the subject is in motion.
WALKING_CONDITIONS = frozenset({Condition.WALK_LR, Condition.WALK_RL})


@dataclass(frozen=True)
class ArrayGeometry:
    """Antenna array and OFDM grid dimensions of a measurement setup."""

    n_tx: int = 2
    n_rx: int = 3
    n_subcarriers: int = 30

    def __post_init__(self) -> None:
        for name in ("n_tx", "n_rx", "n_subcarriers"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")

    @property
    def n_pairs(self) -> int:
        """Number of (rx, tx) antenna pairs."""
        return self.n_rx * self.n_tx

    @property
    def n_gains(self) -> int:
        """Total complex gains per packet."""
        return self.n_pairs * self.n_subcarriers


@dataclass
class CsiSample:
    """One packet's estimated channel state.

    ``h`` holds the complex channel gains with shape
    ``(n_rx, n_tx, n_subcarriers)``.  The constructor only coerces types;
    use :func:`validate_sample` to check invariants, so that defective
    samples can be represented and reported rather than silently dropped.
    """

    geometry: ArrayGeometry
    h: np.ndarray
    noise_floor_dbm: float
    timestamp_ns: int
    identity: int
    condition: Condition

    def __post_init__(self) -> None:
        self.h = np.asarray(self.h, dtype=np.complex128)
        self.noise_floor_dbm = float(self.noise_floor_dbm)
        self.timestamp_ns = int(self.timestamp_ns)
        self.identity = int(self.identity)
        self.condition = Condition(self.condition)
        if np.isfinite(self.noise_floor_dbm) and self.noise_floor_dbm >= 0.0:
            warnings.warn(
                f"noise_floor_dbm = {self.noise_floor_dbm:g} dBm is >= 0;"
                " unrealistic for receiver noise",
                stacklevel=2,
            )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CsiSample):
            return NotImplemented
        return (
            self.geometry == other.geometry
            and self.h.shape == other.h.shape
            and np.array_equal(self.h, other.h)
            and self.noise_floor_dbm == other.noise_floor_dbm
            and self.timestamp_ns == other.timestamp_ns
            and self.identity == other.identity
            and self.condition == other.condition
        )


def validate_sample(sample: CsiSample) -> list[str]:
    """Check a sample against its type invariants.

    Returns a list of human-readable violations, one per defect; an empty
    list means the sample is well-formed.  Pure: never mutates, never
    raises on bad data.
    """
    violations: list[str] = []
    geo = sample.geometry
    expected = (geo.n_rx, geo.n_tx, geo.n_subcarriers)
    if sample.h.shape != expected:
        violations.append(
            f"h: expected {geo.n_gains} gains with shape {expected},"
            f" got shape {sample.h.shape} ({sample.h.size} gains)"
        )
    else:
        bad = np.argwhere(~np.isfinite(sample.h))
        for rx, tx, k in bad:
            violations.append(
                f"h: non-finite gain at (rx={rx}, tx={tx}, subcarrier={k})"
            )
    if not np.isfinite(sample.noise_floor_dbm):
        violations.append(f"noise_floor_dbm: non-finite ({sample.noise_floor_dbm!r})")
    if sample.timestamp_ns < 0:
        violations.append(f"timestamp_ns: negative ({sample.timestamp_ns})")
    if sample.identity < 0:
        violations.append(f"identity: negative ({sample.identity})")
    return violations


@dataclass
class CsiLog:
    """An ordered sequence of samples sharing one array geometry."""

    geometry: ArrayGeometry
    samples: list[CsiSample] = field(default_factory=list)
    version: int = CSIR_VERSION

    def __len__(self) -> int:
        return len(self.samples)

    def validate(self) -> list[str]:
        """Invariant violations over the whole log (empty when valid)."""
        violations: list[str] = []
        for i, sample in enumerate(self.samples):
            if sample.geometry != self.geometry:
                violations.append(
                    f"record {i}: geometry {sample.geometry} does not match"
                    f" header geometry {self.geometry}"
                )
                continue
            violations.extend(f"record {i}: {v}" for v in validate_sample(sample))
        return violations

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CsiLog):
            return NotImplemented
        return (
            self.geometry == other.geometry
            and self.version == other.version
            and self.samples == other.samples
        )


def record_size(geometry: ArrayGeometry) -> int:
    """Encoded size of one record in bytes."""
    return _RECORD_HEAD.size + geometry.n_gains * 8


def write_log(log: CsiLog, sink: BinaryIO) -> int:
    """Serialize ``log`` to ``sink`` in CSIR format.

    Returns the number of bytes written.  Identical logs always produce
    identical bytes.  Raises ``ValueError`` on invariant violations
    (geometry mismatch, non-finite gains, out-of-range fields) and
    propagates I/O errors from ``sink``.
    """
    n = len(log.samples)
    if n > CSIR_MAX_RECORDS:
        raise ValueError(
            f"log has {n} records; the CSIR record_count field is a u16"
            f" (max {CSIR_MAX_RECORDS}). Split the dataset across files."
        )
    if log.version != CSIR_VERSION:
        raise ValueError(f"unsupported CSIR version {log.version}")
    geo = log.geometry
    if not (geo.n_tx <= 0xFF and geo.n_rx <= 0xFF and geo.n_subcarriers <= 0xFFFF):
        raise ValueError(f"geometry {geo} exceeds CSIR header field widths")

    written = sink.write(
        _HEADER.pack(CSIR_MAGIC, log.version, geo.n_tx, geo.n_rx, geo.n_subcarriers, n)
    )
    interleaved = np.empty(geo.n_gains * 2, dtype="<f4")
    for i, sample in enumerate(log.samples):
        if sample.geometry != geo:
            raise ValueError(
                f"record {i}: geometry {sample.geometry} does not match"
                f" header geometry {geo}"
            )
        problems = validate_sample(sample)
        if problems:
            raise ValueError(f"record {i}: {problems[0]}")
        if not 0 <= sample.identity <= 0xFFFFFFFF:
            raise ValueError(f"record {i}: identity {sample.identity} outside u32")
        if not 0 <= sample.timestamp_ns <= 0xFFFFFFFFFFFFFFFF:
            raise ValueError(f"record {i}: timestamp_ns outside u64")
        written += sink.write(
            _RECORD_HEAD.pack(
                sample.identity,
                int(sample.condition),
                sample.timestamp_ns,
                sample.noise_floor_dbm,
            )
        )
        # C-order ravel of (n_rx, n_tx, K) is subcarrier-fastest, then tx, then rx.
        flat = sample.h.ravel()
        interleaved[0::2] = flat.real
        interleaved[1::2] = flat.imag
        written += sink.write(interleaved.tobytes())
    return written


def _read_exact(source: BinaryIO, n: int, what: str) -> bytes:
    data = source.read(n)
    if len(data) != n:
        raise CsirFormatError(f"truncated input while reading {what}")
    return data


def parse_log(source: BinaryIO) -> CsiLog:
    """Parse a CSIR byte stream into a :class:`CsiLog`.

    Reads exactly the declared record count and never past it.  Rejects
    bad magic, unsupported versions, truncated records, unknown condition
    codes, and non-finite floats, naming the offending record.
    """
    header = _read_exact(source, _HEADER.size, "header")
    magic, version, n_tx, n_rx, n_sub, count = _HEADER.unpack(header)
    if magic != CSIR_MAGIC:
        raise CsirFormatError(f"bad magic {magic!r}, expected {CSIR_MAGIC!r}")
    if version != CSIR_VERSION:
        raise CsirFormatError(f"unsupported CSIR version {version}")
    geometry = ArrayGeometry(n_tx=n_tx, n_rx=n_rx, n_subcarriers=n_sub)

    samples: list[CsiSample] = []
    gains_bytes = geometry.n_gains * 8
    with warnings.catch_warnings():
        # The >= 0 dBm advisory is raised at acquisition/synthesis time, not
        # when re-reading stored data.
        warnings.simplefilter("ignore")
        for i in range(count):
            head = _read_exact(source, _RECORD_HEAD.size, f"record {i}")
            identity, condition_code, timestamp_ns, noise_floor = _RECORD_HEAD.unpack(
                head
            )
            try:
                condition = Condition(condition_code)
            except ValueError:
                raise CsirFormatError(
                    f"record {i}: unknown condition code {condition_code}"
                ) from None
            if not np.isfinite(noise_floor):
                raise CsirFormatError(
                    f"record {i}: non-finite noise_floor_dbm {noise_floor!r}"
                )
            raw = _read_exact(source, gains_bytes, f"record {i}")
            interleaved = np.frombuffer(raw, dtype="<f4")
            if not np.isfinite(interleaved).all():
                raise CsirFormatError(f"record {i}: non-finite channel gain")
            h = (
                interleaved[0::2].astype(np.float64)
                + 1j * interleaved[1::2].astype(np.float64)
            ).reshape(geometry.n_rx, geometry.n_tx, geometry.n_subcarriers)
            samples.append(
                CsiSample(
                    geometry=geometry,
                    h=h,
                    noise_floor_dbm=float(noise_floor),
                    timestamp_ns=timestamp_ns,
                    identity=identity,
                    condition=condition,
                )
            )
    return CsiLog(geometry=geometry, samples=samples, version=version)


def write_log_file(log: CsiLog, path: str) -> int:
    """Write ``log`` to ``path``; returns the byte count."""
    with open(path, "wb") as sink:
        return write_log(log, sink)


def parse_log_file(path: str) -> CsiLog:
    """Parse the CSIR file at ``path``."""
    with open(path, "rb") as source:
        return parse_log(source)
