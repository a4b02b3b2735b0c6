"""Dataset splitting and re-identification metrics.

Probes are scored against all known identities; rank-k accuracy is the
fraction of probes whose true identity lands in the top k scores, and the
CMC curve is that fraction as a function of k.  Splitting is stratified
per (identity, condition) so every class appears on both sides.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from itertools import groupby
from typing import Sequence, TextIO

import numpy as np

from .core import CsiLog
from .mlp import MlpModel, predict_proba

_TAG_SPLIT = 0x53504C54  # "SPLT"


class Aggregation(Enum):
    MEAN_PROB = "mean"
    MAJORITY_VOTE = "vote"


@dataclass(frozen=True)
class SplitSpec:
    """Stratified train/validation split parameters."""

    train_fraction: float = 0.7
    seed: int = 42

    def __post_init__(self) -> None:
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be strictly between 0 and 1")


def split(
    identities: np.ndarray, conditions: np.ndarray, spec: SplitSpec
) -> tuple[np.ndarray, np.ndarray]:
    """Split sample indices into disjoint train and validation sets.

    Stratifies by (identity, condition): within every stratum,
    round(train_fraction * n) samples go to training (clamped so both
    sides stay non-empty), which keeps per-stratum proportions within one
    sample of the requested fraction.  Deterministic in ``spec.seed``;
    returns sorted index arrays.
    """
    identities = np.asarray(identities)
    conditions = np.asarray(conditions)
    if identities.shape != conditions.shape or identities.ndim != 1:
        raise ValueError("identities and conditions must be equal-length 1-D arrays")
    rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([spec.seed, _TAG_SPLIT]))
    )
    strata = sorted(set(zip(identities.tolist(), conditions.tolist())))
    train_parts: list[np.ndarray] = []
    val_parts: list[np.ndarray] = []
    for identity, condition in strata:
        members = np.nonzero((identities == identity) & (conditions == condition))[0]
        if members.size < 2:
            raise ValueError(
                f"stratum (identity={identity}, condition={condition}) has"
                f" {members.size} sample(s); need at least 2 to split"
            )
        order = rng.permutation(members.size)
        n_train = int(np.floor(spec.train_fraction * members.size + 0.5))
        n_train = min(max(n_train, 1), members.size - 1)
        train_parts.append(members[order[:n_train]])
        val_parts.append(members[order[n_train:]])
    return (
        np.sort(np.concatenate(train_parts)),
        np.sort(np.concatenate(val_parts)),
    )


@dataclass
class EvalReport:
    """Re-identification metrics of one evaluation run."""

    cmc: np.ndarray
    rank_k: dict[int, float]
    confusion: np.ndarray
    packets_per_probe: int
    aggregation: Aggregation
    n_probes: int
    per_packet_accuracy: float | None = None

    @property
    def rank1(self) -> float:
        return float(self.cmc[0])


def probe_score(
    model: MlpModel,
    packets: np.ndarray | Sequence[np.ndarray],
    aggregation: Aggregation = Aggregation.MEAN_PROB,
) -> np.ndarray:
    """Aggregate one probe's packets into a single class-score vector.

    MEAN_PROB averages the per-packet probability rows; MAJORITY_VOTE
    counts per-packet argmax votes and normalizes.  Either way the result
    sums to one.
    """
    packets = np.atleast_2d(np.asarray(packets, dtype=np.float64))
    if packets.shape[0] < 1 or packets.size == 0:
        raise ValueError("probe needs at least one packet")
    probs = predict_proba(model, packets)
    if aggregation is Aggregation.MEAN_PROB:
        return probs.mean(axis=0)
    votes = np.bincount(
        probs.argmax(axis=1), minlength=model.architecture.n_classes
    ).astype(np.float64)
    return votes / votes.sum()


def rank_of_true(scores: np.ndarray, true_label: int) -> int:
    """Rank (1-based) of the true class in a score vector.

    One plus the number of classes scoring strictly higher; classes tied
    with the true score but carrying a lower index also rank ahead, so
    ranking is deterministic under ties.
    """
    scores = np.asarray(scores)
    if scores.ndim != 1:
        raise ValueError("scores must be a 1-D class-score vector")
    if not 0 <= true_label < scores.size:
        raise ValueError(
            f"true_label {true_label} outside [0, {scores.size})"
        )
    true_score = scores[true_label]
    higher = int((scores > true_score).sum())
    tied_before = int(
        ((scores[:true_label] == true_score)).sum()
    )
    return 1 + higher + tied_before


def cmc_curve(
    probe_results: Sequence[tuple[np.ndarray, int]],
    packets_per_probe: int = 1,
    aggregation: Aggregation = Aggregation.MEAN_PROB,
    per_packet_accuracy: float | None = None,
) -> EvalReport:
    """Cumulative match characteristic over scored probes.

    ``cmc[k]`` is the fraction of probes whose true class ranks within
    k+1; it is nondecreasing and ends at 1 because every rank is at most
    the number of classes.
    """
    if not probe_results:
        raise ValueError("no probes to evaluate")
    n_classes = np.asarray(probe_results[0][0]).size
    ranks = np.empty(len(probe_results), dtype=np.int64)
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    for i, (scores, true_label) in enumerate(probe_results):
        scores = np.asarray(scores)
        if scores.size != n_classes:
            raise ValueError("probe score vectors disagree on class count")
        ranks[i] = rank_of_true(scores, true_label)
        confusion[true_label, int(scores.argmax())] += 1
    cmc = np.array(
        [(ranks <= k).mean() for k in range(1, n_classes + 1)], dtype=np.float64
    )
    rank_k = {k: float(cmc[k - 1]) for k in (1, 5, 10) if k <= n_classes}
    return EvalReport(
        cmc=cmc,
        rank_k=rank_k,
        confusion=confusion,
        packets_per_probe=packets_per_probe,
        aggregation=aggregation,
        n_probes=len(probe_results),
        per_packet_accuracy=per_packet_accuracy,
    )


def acquisition_groups(log: CsiLog) -> np.ndarray:
    """Reconstruct per-sample acquisition group ids from a log.

    Samples are grouped within consecutive runs of equal (identity,
    condition); a new group starts where the timestamp gap exceeds 1.5x
    the smallest in-run spacing (the synthesizer separates acquisitions
    by a full duration gap, so detection is exact whenever acquisitions
    hold at least two packets).  Falls back to one group per run when
    boundaries are not detectable.
    """
    groups = np.zeros(len(log.samples), dtype=np.int64)
    next_group = 0
    index = 0
    for _, run in groupby(
        range(len(log.samples)),
        key=lambda i: (log.samples[i].identity, log.samples[i].condition),
    ):
        run = list(run)
        times = np.array([log.samples[i].timestamp_ns for i in run], dtype=np.int64)
        deltas = np.diff(times)
        if deltas.size == 0 or deltas.min() <= 0:
            boundaries = np.zeros(len(run), dtype=bool)
        else:
            threshold = 1.5 * deltas.min()
            boundaries = np.concatenate(([False], deltas > threshold))
        for i, is_boundary in zip(run, boundaries):
            if is_boundary:
                next_group += 1
            groups[index] = next_group
            index += 1
        next_group += 1
    return groups


def evaluate(
    model: MlpModel,
    features: np.ndarray,
    identities: np.ndarray,
    groups: np.ndarray | None = None,
    packets_per_probe: int = 1,
    aggregation: Aggregation = Aggregation.MEAN_PROB,
) -> EvalReport:
    """Score a validation set and compute rank-k / CMC metrics.

    Probes are chunks of ``packets_per_probe`` consecutive packets within
    one group (an acquisition); a trailing chunk smaller than the probe
    size is dropped.  ``groups=None`` treats each run of consecutive
    equal identities as one group.  Also reports the per-packet argmax
    accuracy alongside the probe-level metrics.
    """
    features = np.asarray(features, dtype=np.float64)
    identities = np.asarray(identities, dtype=np.int64)
    if features.ndim != 2 or features.shape[0] != identities.shape[0]:
        raise ValueError("features must be (n, d) with one identity per row")
    if packets_per_probe < 1:
        raise ValueError("packets_per_probe must be >= 1")
    if groups is None:
        groups = identities
    groups = np.asarray(groups)
    if groups.shape != identities.shape:
        raise ValueError("groups must align with identities")

    probs = predict_proba(model, features)
    per_packet_accuracy = float((probs.argmax(axis=1) == identities).mean())

    probe_results: list[tuple[np.ndarray, int]] = []
    start = 0
    n = len(identities)
    while start < n:
        end = start
        while end < n and groups[end] == groups[start]:
            end += 1
        label = int(identities[start])
        if not (identities[start:end] == label).all():
            raise ValueError("group contains packets from multiple identities")
        for chunk_start in range(start, end - packets_per_probe + 1, packets_per_probe):
            chunk = probs[chunk_start : chunk_start + packets_per_probe]
            if aggregation is Aggregation.MEAN_PROB:
                scores = chunk.mean(axis=0)
            else:
                votes = np.bincount(
                    chunk.argmax(axis=1), minlength=model.architecture.n_classes
                ).astype(np.float64)
                scores = votes / votes.sum()
            probe_results.append((scores, label))
        start = end
    if not probe_results:
        raise ValueError(
            f"insufficient packets to form any probe of {packets_per_probe}"
        )
    return cmc_curve(
        probe_results,
        packets_per_probe=packets_per_probe,
        aggregation=aggregation,
        per_packet_accuracy=per_packet_accuracy,
    )


def write_report_csv(report: EvalReport, sink: TextIO) -> None:
    """``metric,value`` rows: rank1/5/10, per-packet accuracy, probe count."""
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(["metric", "value"])
    for k in (1, 5, 10):
        if k in report.rank_k:
            writer.writerow([f"rank{k}", repr(report.rank_k[k])])
    if report.per_packet_accuracy is not None:
        writer.writerow(["val_acc", repr(report.per_packet_accuracy)])
    writer.writerow(["n_probes", report.n_probes])


def write_cmc_csv(report: EvalReport, sink: TextIO) -> None:
    """``rank,match_rate`` rows for every rank of the CMC curve."""
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(["rank", "match_rate"])
    for k, value in enumerate(report.cmc, start=1):
        writer.writerow([k, repr(float(value))])


def write_cmc_svg(report: EvalReport, sink: TextIO) -> None:
    """Minimal deterministic SVG line plot of the CMC curve."""
    width, height, margin = 480, 320, 40
    n = len(report.cmc)
    xs = margin + np.arange(n) * (width - 2 * margin) / max(n - 1, 1)
    ys = height - margin - report.cmc * (height - 2 * margin)
    points = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
    sink.write(
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">\n'
        f'<rect width="{width}" height="{height}" fill="white"/>\n'
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}"'
        f' y2="{height - margin}" stroke="black"/>\n'
        f'<line x1="{margin}" y1="{margin}" x2="{margin}"'
        f' y2="{height - margin}" stroke="black"/>\n'
        f'<polyline fill="none" stroke="steelblue" stroke-width="2"'
        f' points="{points}"/>\n'
        f'<text x="{width // 2}" y="{height - 8}" text-anchor="middle"'
        f' font-size="12">rank</text>\n'
        f'<text x="12" y="{height // 2}" font-size="12"'
        f' transform="rotate(-90 12 {height // 2})">match rate</text>\n'
        "</svg>\n"
    )
