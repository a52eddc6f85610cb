"""Identity label estimation from confidence matrices.

A query's normalized same-query confidence matrix is close to a 0/1
block matrix when one identity dominates the crawled images.  The top
eigenpair of such a matrix locates that block: faces in the dominant
identity get a membership score near 1, everything else near 0.  Each
service produces its own estimate; a majority vote across services then
fixes the per-face labels, with conservative exclusion rules for queries
where no clean estimate exists.

Labels take three values: 1 (face shows the query identity), 0 (it does
not), -1 (no usable estimate; the face is excluded from evaluation).
"""

from __future__ import annotations

import csv
import math
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ComputationError, ValidationError
from .scoring import ConfidenceMatrix

__all__ = [
    "NEG_TOLERANCE",
    "ACCEPTED",
    "REJECTED_NO_PREVALENT",
    "REJECTED_MULTIPLE",
    "REJECTED_NEGATIVE",
    "Thresholds",
    "SpectralResult",
    "LabelEstimate",
    "spectral_identity",
    "consolidate",
    "ambiguity_rank",
    "apply_annotations",
    "write_labels_csv",
    "read_labels_csv",
    "read_annotations_csv",
    "write_annotations_csv",
]

# Entries of a scaled membership vector may dip slightly below zero under
# noise; anything below -NEG_TOLERANCE is treated as structurally negative.
NEG_TOLERANCE = 0.02

ACCEPTED = "accepted"
REJECTED_NO_PREVALENT = "rejected:no_prevalent_identity"
REJECTED_MULTIPLE = "rejected:multiple_identities"
REJECTED_NEGATIVE = "rejected:negative_entries"

LABELS_HEADER = ("query_id", "face_id", "y", "estimated_y",
                 "vote_margin", "disposition")
ANNOTATIONS_HEADER = ("face_id", "y")


@dataclass(frozen=True)
class Thresholds:
    """Tunable decision constants for estimation and consolidation."""

    eigenvalue: float = 4.0      # eigenvalues above this indicate a real block
    membership: float = 0.2      # membership scores above this count as "in"
    min_prevalent: int = 5       # minimum faces voted 1 for a usable query
    min_crawled: int = 8         # minimum crawled faces before estimating at all

    def __post_init__(self):
        if not self.eigenvalue > 1.0:
            raise ValidationError("eigenvalue threshold must exceed 1")
        if not 0.0 < self.membership < 1.0:
            raise ValidationError("membership threshold must lie in (0, 1)")
        if self.min_prevalent < 2:
            raise ValidationError("min_prevalent must be at least 2")
        if self.min_crawled < self.min_prevalent:
            raise ValidationError("min_crawled must be >= min_prevalent")


@dataclass(frozen=True)
class SpectralResult:
    """One service's spectral estimate for one query."""

    query_id: str
    service_id: str
    outcome: str
    face_ids: tuple[str, ...]
    scores: tuple[float, ...] | None = None   # aligned with face_ids when accepted
    top_eigenvalues: tuple[float, ...] = ()   # eigenvalues above the threshold

    @property
    def accepted(self) -> bool:
        return self.outcome == ACCEPTED

    def score_of(self, face_id: str) -> float | None:
        if self.scores is None:
            return None
        try:
            return self.scores[self.face_ids.index(face_id)]
        except ValueError:
            return None


def spectral_identity(matrix: ConfidenceMatrix,
                      eigenvalue_threshold: float = 4.0) -> SpectralResult:
    """Estimate the dominant-identity membership for one (query, service).

    Eigenvalues of the confidence matrix strictly above the threshold
    are counted: none means no identity is prevalent enough, two or more
    means the corpus holds several strong identities, and either case is
    a rejection.  With exactly one, the matching eigenvector is oriented
    to a non-negative entry sum and scaled by the square root of its
    eigenvalue, which puts members of the dominant block near 1.  A
    scaled entry below -NEG_TOLERANCE contradicts the block model, so
    that is rejected too rather than silently clipped.

    When several eigenvalues pass, equal-sized identities can produce a
    near-degenerate top pair whose eigenvectors are an arbitrary rotation
    of the two block indicators.  The eigenvalues are recorded for that
    case, but no rotation is attempted here; the query is rejected.
    """
    c = matrix.matrix
    n = c.shape[0]
    if n < 2:
        raise ValidationError(
            f"query {matrix.query_id!r}/{matrix.service_id}: "
            "need at least a 2x2 matrix")
    try:
        eigenvalues, eigenvectors = np.linalg.eigh(c)
    except np.linalg.LinAlgError as exc:
        raise ComputationError(
            f"eigendecomposition failed for {matrix.query_id!r}/"
            f"{matrix.service_id}: {exc}") from exc

    above = [i for i, value in enumerate(eigenvalues)
             if value > eigenvalue_threshold]
    top = tuple(float(eigenvalues[i]) for i in reversed(above))

    if len(above) == 0:
        return SpectralResult(matrix.query_id, matrix.service_id,
                              REJECTED_NO_PREVALENT, matrix.face_ids)
    if len(above) > 1:
        return SpectralResult(matrix.query_id, matrix.service_id,
                              REJECTED_MULTIPLE, matrix.face_ids,
                              top_eigenvalues=top)

    idx = above[0]
    value = float(eigenvalues[idx])
    vector = eigenvectors[:, idx]
    if vector.sum() < 0:
        vector = -vector
    scores = math.sqrt(value) * vector
    if np.any(scores < -NEG_TOLERANCE):
        return SpectralResult(matrix.query_id, matrix.service_id,
                              REJECTED_NEGATIVE, matrix.face_ids,
                              top_eigenvalues=top)
    return SpectralResult(matrix.query_id, matrix.service_id, ACCEPTED,
                          matrix.face_ids,
                          scores=tuple(float(s) for s in scores),
                          top_eigenvalues=top)


DISPOSITION_INCLUDED = "included"


def _excluded(reason: str) -> str:
    return f"excluded:{reason}"


@dataclass(frozen=True)
class LabelEstimate:
    """Estimated labels with vote margins and per-query dispositions."""

    labels: Mapping[str, int]        # face -> -1/0/1
    margins: Mapping[str, int]       # face -> (votes above) - (votes not above)
    dispositions: Mapping[str, str]  # query -> "included" | "excluded:<reason>"

    @staticmethod
    def merge(parts: Sequence["LabelEstimate"]) -> "LabelEstimate":
        labels: dict[str, int] = {}
        margins: dict[str, int] = {}
        dispositions: dict[str, str] = {}
        for part in parts:
            for face, label in part.labels.items():
                if face in labels:
                    raise ValidationError(f"face {face!r} estimated twice")
                labels[face] = label
            margins.update(part.margins)
            for query, disposition in part.dispositions.items():
                if query in dispositions:
                    raise ValidationError(f"query {query!r} estimated twice")
                dispositions[query] = disposition
        return LabelEstimate(labels=labels, margins=margins,
                             dispositions=dispositions)


def consolidate(query_id: str, face_ids: Sequence[str],
                results: Mapping[str, SpectralResult | None],
                crawled_count: int,
                thresholds: Thresholds = Thresholds()) -> LabelEstimate:
    """Combine per-service spectral results into labels for one query.

    Exclusion rules, applied in order:
      * fewer crawled faces than min_crawled (checked before anything
        else, so callers can skip service calls for such queries);
      * a service with no estimate at all (None);
      * a service whose estimate was rejected.
    Otherwise each face is voted on: a service votes "in" when its
    membership score for the face exceeds the membership threshold, and
    a face missing from a service's matrix counts as a vote against.  A
    face needs a strict majority for label 1.  Queries where fewer than
    min_prevalent faces reach label 1 are excluded after the fact.

    Excluded queries label every face -1.  Vote margins are recorded
    whenever votes were actually cast.
    """
    if not results:
        raise ValidationError(f"query {query_id!r}: no service results")
    face_ids = list(face_ids)

    def all_excluded(reason: str, margins: dict[str, int] | None = None) -> LabelEstimate:
        return LabelEstimate(
            labels={f: -1 for f in face_ids},
            margins=margins or {},
            dispositions={query_id: _excluded(reason)})

    if crawled_count < thresholds.min_crawled:
        return all_excluded("too_few_crawled")
    for service in sorted(results):
        if results[service] is None:
            return all_excluded(f"no_estimate:{service}")
    for service in sorted(results):
        result = results[service]
        assert result is not None
        if not result.accepted:
            reason = result.outcome.removeprefix("rejected:")
            return all_excluded(f"service_rejected:{service}:{reason}")

    n_services = len(results)
    labels: dict[str, int] = {}
    margins: dict[str, int] = {}
    for face in face_ids:
        above = 0
        for service in results:
            result = results[service]
            assert result is not None
            score = result.score_of(face)
            if score is not None and score > thresholds.membership:
                above += 1
        margins[face] = above - (n_services - above)
        labels[face] = 1 if 2 * above > n_services else 0

    if sum(1 for v in labels.values() if v == 1) < thresholds.min_prevalent:
        return all_excluded("too_few_prevalent", margins=margins)

    return LabelEstimate(labels=labels, margins=margins,
                         dispositions={query_id: DISPOSITION_INCLUDED})


def ambiguity_rank(estimate: LabelEstimate,
                   results: Mapping[str, Mapping[str, SpectralResult | None]],
                   crawled: Mapping[str, int],
                   face_query: Mapping[str, str],
                   membership_threshold: float = 0.2) -> list[str]:
    """Order faces for human annotation, most valuable first.

    Excluded faces (label -1) come first, largest query first: fixing an
    excluded query recovers many pairs at once.  Included faces follow,
    ordered by how close their membership scores sit to the vote
    threshold (median over services of the absolute gap); a face no
    service scored counts as maximally ambiguous.  Ties break on query
    then face id so the queue is reproducible.
    """
    excluded_part: list[tuple[int, str, str]] = []
    included_part: list[tuple[float, str, str]] = []
    for face, label in estimate.labels.items():
        query = face_query[face]
        if label == -1:
            excluded_part.append((-crawled.get(query, 0), query, face))
            continue
        gaps = []
        for service, result in (results.get(query) or {}).items():
            if result is None or not result.accepted:
                continue
            score = result.score_of(face)
            if score is not None:
                gaps.append(abs(score - membership_threshold))
        ambiguity = statistics.median(gaps) if gaps else 0.0
        included_part.append((ambiguity, query, face))

    excluded_part.sort()
    included_part.sort()
    return [face for _, _, face in excluded_part] + \
           [face for _, _, face in included_part]


def apply_annotations(estimate: LabelEstimate, queue: Sequence[str],
                      annotations: Mapping[str, int],
                      budget: float) -> LabelEstimate:
    """Replace estimated labels with annotated ones for a queue prefix.

    The prefix length is ceil(budget * len(queue)).  Every face in the
    prefix must be annotated; annotations for faces the estimate does
    not know are rejected.  At budget 1.0 the estimate becomes the
    annotated labelling outright.
    """
    if not 0.0 <= budget <= 1.0:
        raise ValidationError(f"budget must lie in [0, 1], got {budget}")
    for face, value in annotations.items():
        if face not in estimate.labels:
            raise ValidationError(f"annotation for unknown face {face!r}")
        if value not in (-1, 0, 1):
            raise ValidationError(
                f"annotation for {face!r} must be -1, 0 or 1, got {value}")

    take = math.ceil(budget * len(queue))
    labels = dict(estimate.labels)
    for face in queue[:take]:
        if face not in annotations:
            raise ValidationError(
                f"budget {budget} needs an annotation for {face!r}")
        labels[face] = annotations[face]
    return LabelEstimate(labels=labels, margins=dict(estimate.margins),
                         dispositions=dict(estimate.dispositions))


def write_labels_csv(path: str | Path,
                     face_query: Mapping[str, str],
                     annotated: Mapping[str, int],
                     estimate: LabelEstimate) -> None:
    """Dump labels (columns query_id,face_id,y,estimated_y,vote_margin,disposition)."""
    rows = sorted(face_query.items(), key=lambda kv: (kv[1], kv[0]))
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(LABELS_HEADER)
        for face, query in rows:
            margin = estimate.margins.get(face)
            writer.writerow([
                query, face,
                annotated.get(face, ""),
                estimate.labels.get(face, ""),
                "" if margin is None else margin,
                estimate.dispositions.get(query, ""),
            ])


def read_labels_csv(path: str | Path) -> tuple[dict[str, str], dict[str, int],
                                               LabelEstimate]:
    """Read a labels dump back as (face->query, annotated, estimate)."""
    face_query: dict[str, str] = {}
    annotated: dict[str, int] = {}
    labels: dict[str, int] = {}
    margins: dict[str, int] = {}
    dispositions: dict[str, str] = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != LABELS_HEADER:
            raise ValidationError(f"unexpected labels header in {path}")
        for row in reader:
            query, face, y, est, margin, disposition = row
            face_query[face] = query
            if y != "":
                annotated[face] = int(y)
            if est != "":
                labels[face] = int(est)
            if margin != "":
                margins[face] = int(margin)
            if disposition:
                dispositions[query] = disposition
    estimate = LabelEstimate(labels=labels, margins=margins,
                             dispositions=dispositions)
    return face_query, annotated, estimate


def read_annotations_csv(path: str | Path) -> dict[str, int]:
    """Read an annotation file (columns face_id,y; y in -1/0/1)."""
    out: dict[str, int] = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != ANNOTATIONS_HEADER:
            raise ValidationError(f"unexpected annotations header in {path}")
        for line_no, row in enumerate(reader, start=2):
            face, y = row[0], row[1]
            try:
                value = int(y)
            except ValueError:
                raise ValidationError(
                    f"{path}:{line_no}: label must be an integer, got {y!r}")
            if value not in (-1, 0, 1):
                raise ValidationError(
                    f"{path}:{line_no}: label must be -1, 0 or 1, got {value}")
            if face in out:
                raise ValidationError(f"{path}:{line_no}: duplicate face {face!r}")
            out[face] = value
    return out


def write_annotations_csv(path: str | Path, annotations: Mapping[str, int]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(ANNOTATIONS_HEADER)
        for face in sorted(annotations):
            writer.writerow([face, annotations[face]])
