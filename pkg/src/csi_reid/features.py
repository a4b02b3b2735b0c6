"""SNR feature extraction from channel state samples.

The per-packet feature is the signal-to-noise ratio of every antenna pair:
channel power over noise power, in dB, per subcarrier.  Two reductions are
offered: ``MEAN_BROADCAST`` averages the K subcarrier values of a pair
into one scalar (the canonical all-one broadcast of that mean is available
via :func:`mean_broadcast`), ``PER_SUBCARRIER`` keeps the full grid.
Feature ordering is rx-major, then tx, then subcarrier, so pair index
``p = rx * n_tx + tx``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence, TextIO

import numpy as np

from .core import Condition, CsiSample

DEFAULT_SNR_FLOOR_DB = -100.0


class FeatureMode(Enum):
    MEAN_BROADCAST = "mean"
    PER_SUBCARRIER = "per-subcarrier"


@dataclass(frozen=True)
class SnrFeature:
    """Per-packet SNR feature with its labels.

    ``per_pair_snr_db`` has shape (n_rx * n_tx, K); in MEAN_BROADCAST mode
    every row is constant (the pair's mean broadcast across subcarriers).
    """

    identity: int
    condition: Condition
    per_pair_snr_db: np.ndarray
    mode: FeatureMode

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "per_pair_snr_db", np.asarray(self.per_pair_snr_db, dtype=np.float64)
        )
        if not np.isfinite(self.per_pair_snr_db).all():
            raise ValueError("SNR feature contains non-finite entries")
        if self.mode is FeatureMode.MEAN_BROADCAST:
            rows = self.per_pair_snr_db
            if rows.size and not (rows == rows[:, :1]).all():
                raise ValueError("MEAN_BROADCAST rows must be constant-valued")

    def vector(self) -> np.ndarray:
        """The flat classifier input for this feature's mode."""
        if self.mode is FeatureMode.MEAN_BROADCAST:
            return self.per_pair_snr_db[:, 0].copy()
        return self.per_pair_snr_db.ravel().copy()


def per_subcarrier_snr(
    sample: CsiSample, floor_db: float = DEFAULT_SNR_FLOOR_DB
) -> np.ndarray:
    """SNR in dB for every (antenna pair, subcarrier) of one packet.

    SNR(k) for pair (rx, tx) is 10 log10(|h[rx, tx, k]|^2 / N0) with N0
    the linear noise power implied by the sample's noise floor.  Entries
    with zero channel gain are clamped to ``floor_db``.  Returns shape
    (n_rx * n_tx, K), rows in rx-major pair order.
    """
    if not np.isfinite(sample.noise_floor_dbm):
        raise ValueError("noise_floor_dbm must be finite")
    if not np.isfinite(sample.h).all():
        raise ValueError("sample has non-finite gains; validate before extracting")
    n0 = 10.0 ** (sample.noise_floor_dbm / 10.0)
    if not n0 > 0:
        raise ValueError("noise power must be > 0")
    geo = sample.geometry
    power = np.abs(sample.h.reshape(geo.n_pairs, geo.n_subcarriers)) ** 2
    with np.errstate(divide="ignore"):
        snr = np.where(power > 0, 10.0 * np.log10(power / n0), floor_db)
    return snr


def mean_broadcast(snr_row: np.ndarray, k: int | None = None) -> np.ndarray:
    """Broadcast the arithmetic mean of a pair's SNR row to a K-vector."""
    snr_row = np.asarray(snr_row, dtype=np.float64)
    if snr_row.ndim != 1 or snr_row.size == 0:
        raise ValueError("snr_row must be a non-empty 1-D array")
    if k is None:
        k = snr_row.size
    if k < 1:
        raise ValueError("K must be >= 1")
    return np.full(k, snr_row.mean())


def packet_feature(
    sample: CsiSample,
    mode: FeatureMode = FeatureMode.MEAN_BROADCAST,
    floor_db: float = DEFAULT_SNR_FLOOR_DB,
) -> np.ndarray:
    """Flat feature vector of one packet.

    MEAN_BROADCAST: length n_rx * n_tx, the per-pair subcarrier means (the
    broadcast K-vector collapses to one scalar per pair since all entries
    are equal).  PER_SUBCARRIER: length n_rx * n_tx * K, subcarrier
    fastest.
    """
    snr = per_subcarrier_snr(sample, floor_db=floor_db)
    if mode is FeatureMode.MEAN_BROADCAST:
        return snr.mean(axis=1)
    return snr.ravel()


def snr_feature(
    sample: CsiSample,
    mode: FeatureMode = FeatureMode.MEAN_BROADCAST,
    floor_db: float = DEFAULT_SNR_FLOOR_DB,
) -> SnrFeature:
    """Labelled :class:`SnrFeature` for one packet."""
    snr = per_subcarrier_snr(sample, floor_db=floor_db)
    if mode is FeatureMode.MEAN_BROADCAST:
        snr = np.repeat(snr.mean(axis=1, keepdims=True), snr.shape[1], axis=1)
    return SnrFeature(
        identity=sample.identity,
        condition=sample.condition,
        per_pair_snr_db=snr,
        mode=mode,
    )


def extract_features(
    samples: Sequence[CsiSample],
    mode: FeatureMode = FeatureMode.MEAN_BROADCAST,
    floor_db: float = DEFAULT_SNR_FLOOR_DB,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Feature matrix plus label arrays for a batch of packets.

    Returns (features, identities, conditions) with features of shape
    (n_samples, feature_dim) in the samples' order.
    """
    if not samples:
        raise ValueError("no samples to extract features from")
    features = np.stack([packet_feature(s, mode=mode, floor_db=floor_db) for s in samples])
    identities = np.array([s.identity for s in samples], dtype=np.int64)
    conditions = np.array([int(s.condition) for s in samples], dtype=np.int64)
    return features, identities, conditions


def write_features_csv(
    samples: Sequence[CsiSample],
    sink: TextIO,
    mode: FeatureMode = FeatureMode.MEAN_BROADCAST,
    floor_db: float = DEFAULT_SNR_FLOOR_DB,
) -> int:
    """Dump per-packet features as CSV for debugging and cross-checks.

    Header is ``identity,condition,pair0,...`` (per-subcarrier mode names
    columns ``pair{p}_k{k}``).  Returns the number of data rows written.
    """
    if not samples:
        raise ValueError("no samples to dump")
    geo = samples[0].geometry
    if mode is FeatureMode.MEAN_BROADCAST:
        columns = [f"pair{p}" for p in range(geo.n_pairs)]
    else:
        columns = [
            f"pair{p}_k{k}"
            for p in range(geo.n_pairs)
            for k in range(geo.n_subcarriers)
        ]
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(["identity", "condition"] + columns)
    for sample in samples:
        vector = packet_feature(sample, mode=mode, floor_db=floor_db)
        writer.writerow(
            [sample.identity, int(sample.condition)] + [repr(v) for v in vector]
        )
    return len(samples)
