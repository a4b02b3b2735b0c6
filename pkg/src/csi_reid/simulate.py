"""Synthetic MIMO-OFDM channel generator.

Each identity is assigned a multipath *fingerprint*: a direct
transmitter-receiver path shared by everyone (the room), plus a set of
body-reflected paths whose delays and per-antenna-pair complex amplitudes
are drawn deterministically from the identity index.  A packet's channel
matrix per subcarrier is the phasor sum of those paths; pilot transmission
adds receiver noise, and least-squares estimation recovers the channel the
way a real receiver would.  The resulting logs stand in for over-the-air
acquisitions when exercising the feature, training, and evaluation stages.

Motion model: standing conditions leave the channel constant across an
acquisition.  Walking conditions perturb it two ways per packet: each
reflected path's amplitude picks up a random phase drift (which changes
the interference pattern and therefore the per-subcarrier channel power),
and the resulting matrices get an entrywise phase rotation via
:func:`apply_motion` (bulk phase drift; magnitude-preserving).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .core import (
    ArrayGeometry,
    Condition,
    CsiLog,
    CsiSample,
    WALKING_CONDITIONS,
)

# Domain separation tags for RNG substreams, so that fingerprints, room
# geometry, and per-acquisition noise never share a stream.
_TAG_ROOM = 0x524F4F4D  # "ROOM"
_TAG_FINGERPRINT = 0x46494E47  # "FING"
_TAG_ACQUISITION = 0x41435155  # "ACQU"

# Fingerprint draw ranges.  The reference hardware campaign never reported
# room dimensions or transmit power, so these are canonical constants
# chosen to give identities well-spread per-pair channel power profiles.
_DIRECT_DELAY_RANGE_NS = (8.0, 14.0)
_BODY_ATTENUATION_RANGE_DB = (2.0, 8.0)
_REFLECTED_PATH_COUNT_RANGE = (2, 6)
_REFLECTED_DELAY_RANGE_NS = (15.0, 60.0)
_REFLECTED_MAGNITUDE_RANGE = (0.15, 0.6)


class ChannelEstimationError(RuntimeError):
    """Raised when the pilot-based channel estimate cannot be formed."""


@dataclass(frozen=True)
class PropagationPath:
    """One propagation path: a delay and a complex gain per (rx, tx) pair."""

    delay_ns: float
    amplitude: np.ndarray  # (n_rx, n_tx) complex

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "amplitude", np.asarray(self.amplitude, dtype=np.complex128)
        )
        if self.delay_ns < 0:
            raise ValueError(f"path delay must be >= 0 ns, got {self.delay_ns}")
        if self.amplitude.ndim != 2:
            raise ValueError("path amplitude must be an (n_rx, n_tx) matrix")
        if not np.isfinite(self.amplitude).all():
            raise ValueError("path amplitude contains non-finite entries")


@dataclass(frozen=True)
class IdentityFingerprint:
    """Ground-truth multipath parameters behind one identity's channel.

    ``paths[0]`` is the direct transmitter-receiver path by convention;
    ``body_attenuation_db`` is applied to it when synthesizing the
    channel (a person standing in the path shadows it).
    """

    identity: int
    paths: tuple[PropagationPath, ...]
    body_attenuation_db: float
    seed: int

    def __post_init__(self) -> None:
        if not self.paths:
            raise ValueError("fingerprint needs at least one path")
        if self.body_attenuation_db < 0:
            raise ValueError("body_attenuation_db must be >= 0")


@dataclass(frozen=True)
class PilotSequence:
    """Known transmitted pilot vectors, one per column of ``matrix``.

    ``matrix`` has shape (n_tx, n_pilots) with n_pilots >= n_tx.  Full row
    rank is expected; :func:`estimate_channel` verifies it numerically and
    refuses rank-deficient pilots.
    """

    matrix: np.ndarray
    power: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "matrix", np.asarray(self.matrix, dtype=np.complex128)
        )
        if self.matrix.ndim != 2:
            raise ValueError("pilot matrix must be 2-D (n_tx, n_pilots)")
        n_tx, n_pilots = self.matrix.shape
        if n_pilots < n_tx:
            raise ValueError(
                f"need at least n_tx={n_tx} pilot vectors, got {n_pilots}"
            )
        if not self.power > 0:
            raise ValueError("per-symbol power must be > 0")
        if not np.isfinite(self.matrix).all():
            raise ValueError("pilot matrix contains non-finite entries")

    @property
    def n_tx(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_pilots(self) -> int:
        return self.matrix.shape[1]

    @classmethod
    def orthogonal(
        cls, n_tx: int, n_pilots: int = 4, power: float = 1.0
    ) -> "PilotSequence":
        """DFT-based pilots with P @ P^H = n_pilots * power * I."""
        if n_pilots < n_tx:
            raise ValueError("n_pilots must be >= n_tx")
        rows = np.arange(n_tx)[:, None]
        cols = np.arange(n_pilots)[None, :]
        matrix = math.sqrt(power) * np.exp(-2j * np.pi * rows * cols / n_pilots)
        return cls(matrix=matrix, power=power)


@dataclass(frozen=True)
class NoiseModel:
    """Receiver noise and optional explicit estimation-error perturbation.

    ``noise_power_linear`` is the variance of the i.i.d. circular complex
    Gaussian noise per received sample (1.0 corresponds to 0 dBm).
    ``estimation_error_variance`` adds an explicit diagonal perturbation to
    the channel estimate on top of what the noisy pilots already induce;
    it exists for controlled experiments and defaults to off.
    """

    noise_power_linear: float = 0.01
    estimation_error_variance: float = 0.0

    def __post_init__(self) -> None:
        if not self.noise_power_linear > 0:
            raise ValueError("noise_power_linear must be > 0")
        if self.estimation_error_variance < 0:
            raise ValueError("estimation_error_variance must be >= 0")

    @property
    def noise_floor_dbm(self) -> float:
        return 10.0 * math.log10(self.noise_power_linear)


#: Conditions applicable to person identities (identity 0 pairs with EMPTY only).
PERSON_CONDITIONS = (
    Condition.STANDING_FACING,
    Condition.STANDING_AWAY,
    Condition.WALK_LR,
    Condition.WALK_RL,
)


@dataclass(frozen=True)
class SynthesisConfig:
    """Everything needed to synthesize one dataset deterministically."""

    geometry: ArrayGeometry = field(default_factory=ArrayGeometry)
    identities: int = 50
    conditions: tuple[Condition, ...] = (Condition.EMPTY,) + PERSON_CONDITIONS
    acquisitions_per_condition: int = 3
    packets_per_acquisition: int = 200
    acquisition_duration_s: float = 3.0
    carrier_hz: float = 5.32e9
    subcarrier_spacing_hz: float = 312.5e3
    doppler_phase_jitter_rad: float = 0.3
    noise: NoiseModel = field(default_factory=NoiseModel)
    master_seed: int = 42

    def __post_init__(self) -> None:
        if self.identities < 1:
            raise ValueError("identities must be >= 1")
        if self.packets_per_acquisition < 1:
            raise ValueError("packets_per_acquisition must be >= 1")
        if self.acquisitions_per_condition < 1:
            raise ValueError("acquisitions_per_condition must be >= 1")
        if not self.acquisition_duration_s > 0:
            raise ValueError("acquisition_duration_s must be > 0")
        if self.doppler_phase_jitter_rad < 0:
            raise ValueError("doppler_phase_jitter_rad must be >= 0")
        if not self.conditions:
            raise ValueError("conditions must not be empty")
        object.__setattr__(
            self, "conditions", tuple(Condition(c) for c in self.conditions)
        )
        if len(set(self.conditions)) != len(self.conditions):
            raise ValueError("conditions contains duplicates")


def subcarrier_frequencies(config: SynthesisConfig) -> np.ndarray:
    """Center frequencies f_k of the K subcarriers, symmetric about the carrier."""
    k = np.arange(1, config.geometry.n_subcarriers + 1, dtype=np.float64)
    offset = k - (config.geometry.n_subcarriers + 1) / 2.0
    return config.carrier_hz + offset * config.subcarrier_spacing_hz


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(key))))


def _direct_path(geometry: ArrayGeometry, seed: int) -> PropagationPath:
    """The room's line-of-sight path, shared by every identity."""
    rng = _rng(seed, _TAG_ROOM)
    delay = rng.uniform(*_DIRECT_DELAY_RANGE_NS)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(geometry.n_rx, geometry.n_tx))
    return PropagationPath(delay_ns=delay, amplitude=np.exp(1j * phases))


def draw_fingerprint(
    identity: int, geometry: ArrayGeometry, seed: int
) -> IdentityFingerprint:
    """Deterministically draw the multipath fingerprint of ``identity``.

    Identity 0 is the empty-path baseline: the direct path alone, with no
    body attenuation.  Persons (identity >= 1) shadow the direct path and
    contribute 2-6 reflected paths whose delays and per-pair amplitudes
    are specific to the identity.
    """
    if identity < 0:
        raise ValueError("identity must be >= 0")
    direct = _direct_path(geometry, seed)
    if identity == 0:
        return IdentityFingerprint(
            identity=0, paths=(direct,), body_attenuation_db=0.0, seed=seed
        )
    rng = _rng(seed, _TAG_FINGERPRINT, identity)
    attenuation = rng.uniform(*_BODY_ATTENUATION_RANGE_DB)
    lo, hi = _REFLECTED_PATH_COUNT_RANGE
    n_reflected = int(rng.integers(lo, hi + 1))
    paths = [direct]
    for _ in range(n_reflected):
        delay = rng.uniform(*_REFLECTED_DELAY_RANGE_NS)
        magnitude = rng.uniform(
            *_REFLECTED_MAGNITUDE_RANGE, size=(geometry.n_rx, geometry.n_tx)
        )
        phase = rng.uniform(0.0, 2.0 * np.pi, size=(geometry.n_rx, geometry.n_tx))
        paths.append(
            PropagationPath(delay_ns=delay, amplitude=magnitude * np.exp(1j * phase))
        )
    return IdentityFingerprint(
        identity=identity,
        paths=tuple(paths),
        body_attenuation_db=float(attenuation),
        seed=seed,
    )


def channel_response(
    fingerprint: IdentityFingerprint, config: SynthesisConfig
) -> np.ndarray:
    """Per-subcarrier channel matrices H(k) of a fingerprint.

    Returns a complex array of shape (K, n_rx, n_tx) where
    H(k)[j, i] = sum_p g_p * a_p[j, i] * exp(-i 2 pi f_k tau_p), with
    g_p the direct-path body shadowing factor (1 for reflected paths).
    """
    geo = config.geometry
    shape = (geo.n_rx, geo.n_tx)
    for path in fingerprint.paths:
        if path.amplitude.shape != shape:
            raise ValueError(
                f"fingerprint path amplitude shape {path.amplitude.shape}"
                f" does not match geometry {shape}"
            )
    freqs = subcarrier_frequencies(config)
    delays_s = np.array([p.delay_ns * 1e-9 for p in fingerprint.paths])
    amplitudes = np.stack([p.amplitude for p in fingerprint.paths])
    gains = np.ones(len(fingerprint.paths))
    gains[0] = 10.0 ** (-fingerprint.body_attenuation_db / 20.0)
    phasors = np.exp(-2j * np.pi * np.outer(delays_s, freqs))  # (P, K)
    return np.einsum("p,pk,pji->kji", gains, phasors, amplitudes)


def transmit(
    h: np.ndarray,
    pilots: PilotSequence,
    noise: NoiseModel,
    rng: np.random.Generator,
) -> np.ndarray:
    """Send the pilot sequence through the channel: Y(k) = H(k) P + N(k).

    ``h`` has shape (K, n_rx, n_tx); the result has shape
    (K, n_rx, n_pilots).  Noise entries are i.i.d. circular complex
    Gaussian with variance ``noise.noise_power_linear``.
    """
    h = np.asarray(h, dtype=np.complex128)
    if h.ndim != 3 or h.shape[2] != pilots.n_tx:
        raise ValueError(
            f"channel shape {h.shape} incompatible with pilot matrix"
            f" {pilots.matrix.shape}"
        )
    y = h @ pilots.matrix
    sigma = math.sqrt(noise.noise_power_linear / 2.0)
    y = y + sigma * (
        rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape)
    )
    return y


def estimate_channel(y: np.ndarray, pilots: PilotSequence) -> np.ndarray:
    """Least-squares channel estimate H_est = Y P^H (P P^H)^-1 per subcarrier.

    Minimizes the Frobenius residual ||Y - H P|| for each subcarrier and
    recovers H exactly in the noiseless case.  Raises
    :class:`ChannelEstimationError` when the pilot matrix is
    rank-deficient (P P^H singular).
    """
    y = np.asarray(y, dtype=np.complex128)
    p = pilots.matrix
    if y.ndim != 3 or y.shape[2] != pilots.n_pilots:
        raise ValueError(
            f"received shape {y.shape} incompatible with pilot matrix {p.shape}"
        )
    singular_values = np.linalg.svd(p, compute_uv=False)
    tol = singular_values[0] * max(p.shape) * np.finfo(np.float64).eps
    rank = int(np.sum(singular_values > tol))
    if rank < pilots.n_tx:
        raise ChannelEstimationError(
            f"pilot matrix is rank-deficient (rank {rank} < n_tx {pilots.n_tx});"
            " P P^H is singular and the least-squares estimate is undefined"
        )
    gram = p @ p.conj().T
    projected = y @ p.conj().T  # (K, n_rx, n_tx)
    # Solve X @ gram = projected for each subcarrier.
    return np.linalg.solve(gram.T, projected.transpose(0, 2, 1)).transpose(0, 2, 1)


def apply_motion(
    h: np.ndarray,
    condition: Condition,
    jitter: float,
    packet_index: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Bulk Doppler phase drift of one packet's channel.

    Walking conditions rotate every entry by an independent random phase
    of scale ``jitter`` (radians), preserving each entry's modulus
    exactly.  Standing and empty conditions return ``h`` unchanged, as
    does ``jitter == 0``.  ``packet_index`` identifies the packet within
    its acquisition; the current drift model draws phases fresh from
    ``rng`` on each call and does not use it.
    """
    if jitter < 0:
        raise ValueError("jitter must be >= 0")
    condition = Condition(condition)
    if condition not in WALKING_CONDITIONS or jitter == 0.0:
        return h
    phases = rng.normal(0.0, jitter, size=np.shape(h))
    return h * np.exp(1j * phases)


def jitter_paths(
    fingerprint: IdentityFingerprint, jitter: float, rng: np.random.Generator
) -> IdentityFingerprint:
    """Per-path phase drift of the reflected paths (body scintillation).

    A moving body changes its reflected path lengths packet to packet;
    each reflected path's amplitude is rotated by one random phase of
    scale ``jitter`` radians.  Unlike :func:`apply_motion` this changes
    the paths' interference pattern, hence the per-subcarrier channel
    power, which is what makes walking acquisitions harder to classify.
    The direct (room) path is left alone.
    """
    if jitter < 0:
        raise ValueError("jitter must be >= 0")
    if jitter == 0.0 or len(fingerprint.paths) == 1:
        return fingerprint
    drifts = rng.normal(0.0, jitter, size=len(fingerprint.paths) - 1)
    jittered = [fingerprint.paths[0]]
    for path, phi in zip(fingerprint.paths[1:], drifts):
        jittered.append(
            PropagationPath(
                delay_ns=path.delay_ns,
                amplitude=path.amplitude * np.exp(1j * phi),
            )
        )
    return replace(fingerprint, paths=tuple(jittered))


def _dataset_schedule(
    config: SynthesisConfig,
) -> list[tuple[int, Condition]]:
    """(identity, condition) pairs in output order.

    Identity 0 appears iff EMPTY is among the configured conditions and
    only under EMPTY; person identities 1..N appear under every non-empty
    configured condition.
    """
    conditions = sorted(config.conditions)
    schedule: list[tuple[int, Condition]] = []
    if Condition.EMPTY in conditions:
        schedule.append((0, Condition.EMPTY))
    person_conditions = [c for c in conditions if c is not Condition.EMPTY]
    for identity in range(1, config.identities + 1):
        for condition in person_conditions:
            schedule.append((identity, condition))
    return schedule


def generate_dataset(config: SynthesisConfig) -> CsiLog:
    """Synthesize a full acquisition campaign as an in-memory CsiLog.

    For every (identity, condition, acquisition) the generator draws the
    identity's fingerprint, synthesizes the per-packet channel (with
    walking-motion perturbations where applicable), transmits pilots
    through it with receiver noise, and stores the least-squares channel
    estimate.  Output order is (identity, condition, acquisition, packet),
    timestamps are spaced duration/packets within an acquisition, and the
    whole log is a pure function of ``config`` (including master_seed).

    Note the in-memory log is unbounded, but a single .csir file caps at
    65535 records; split large campaigns across files when persisting.
    """
    geo = config.geometry
    pilots = PilotSequence.orthogonal(geo.n_tx, n_pilots=max(4, geo.n_tx))
    noise = config.noise
    jitter = config.doppler_phase_jitter_rad
    duration_ns = round(config.acquisition_duration_s * 1e9)
    spacing_ns = duration_ns // config.packets_per_acquisition
    noise_floor = noise.noise_floor_dbm
    sigma_extra = math.sqrt(noise.estimation_error_variance / 2.0)

    fingerprints: dict[int, IdentityFingerprint] = {}
    samples: list[CsiSample] = []
    acquisition_counter = 0
    for identity, condition in _dataset_schedule(config):
        if identity not in fingerprints:
            fingerprints[identity] = draw_fingerprint(
                identity, geo, config.master_seed
            )
        fingerprint = fingerprints[identity]
        base_h = channel_response(fingerprint, config)
        walking = condition in WALKING_CONDITIONS
        for acquisition in range(config.acquisitions_per_condition):
            rng = _rng(
                config.master_seed,
                _TAG_ACQUISITION,
                identity,
                int(condition),
                acquisition,
            )
            # Acquisitions are separated by a full duration gap so that
            # their boundaries stay recoverable from timestamps alone.
            base_ns = acquisition_counter * 2 * duration_ns
            acquisition_counter += 1
            for packet in range(config.packets_per_acquisition):
                if walking and jitter > 0.0:
                    h = channel_response(
                        jitter_paths(fingerprint, jitter, rng), config
                    )
                else:
                    h = base_h
                h = apply_motion(h, condition, jitter, packet, rng)
                y = transmit(h, pilots, noise, rng)
                h_est = estimate_channel(y, pilots)
                if sigma_extra > 0.0:
                    h_est = h_est + sigma_extra * (
                        rng.standard_normal(h_est.shape)
                        + 1j * rng.standard_normal(h_est.shape)
                    )
                samples.append(
                    CsiSample(
                        geometry=geo,
                        h=np.ascontiguousarray(h_est.transpose(1, 2, 0)),
                        noise_floor_dbm=noise_floor,
                        timestamp_ns=base_ns + packet * spacing_ns,
                        identity=identity,
                        condition=condition,
                    )
                )
    return CsiLog(geometry=geo, samples=samples)


def standing_config(**overrides) -> SynthesisConfig:
    """Config for the standing dataset (both standing conditions + empty)."""
    defaults = dict(
        conditions=(
            Condition.EMPTY,
            Condition.STANDING_FACING,
            Condition.STANDING_AWAY,
        )
    )
    defaults.update(overrides)
    return SynthesisConfig(**defaults)


def walking_config(**overrides) -> SynthesisConfig:
    """Config for the walking dataset (both walking conditions + empty)."""
    defaults = dict(
        conditions=(Condition.EMPTY, Condition.WALK_LR, Condition.WALK_RL)
    )
    defaults.update(overrides)
    return SynthesisConfig(**defaults)
