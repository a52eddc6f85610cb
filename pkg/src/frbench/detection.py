"""Cross-service face detection alignment.

Each service reports its own bounding boxes for an image.  Boxes from
different services are matched into face groups by IoU so that one
logical face gets one id across services.  Services without a detection
API are handled separately by probing their comparator with image pairs
and watching for invalid-input results.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .errors import ValidationError

__all__ = [
    "Box",
    "FaceGroup",
    "DiscoveryResult",
    "iou",
    "group_detections",
    "filter_eligible",
    "discover_single_face_images",
    "write_boxes_csv",
    "read_boxes_csv",
    "write_groups_csv",
]

DETECTIONS_HEADER = ("image_id", "service_id", "x", "y", "w", "h")
GROUPS_HEADER = ("face_id", "image_id", "service_id", "x", "y", "w", "h")


@dataclass(frozen=True)
class Box:
    """One detected face rectangle, in image coordinates."""

    image_id: str
    service_id: str
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValidationError(
                f"box for {self.image_id!r}/{self.service_id!r} has "
                f"non-positive size {self.w}x{self.h}")


def iou(a: Box, b: Box) -> float:
    """Intersection area over union area of two boxes."""
    ix = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    iy = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.w * a.h + b.w * b.h - inter
    return inter / union


@dataclass(frozen=True)
class FaceGroup:
    """Boxes from several services agreed to be the same face."""

    face_id: str
    image_id: str
    boxes: tuple[Box, ...]

    @property
    def services(self) -> frozenset[str]:
        return frozenset(b.service_id for b in self.boxes)


def _canonical_key(box: Box) -> tuple:
    return (box.service_id, box.x, box.y, box.w, box.h)


def group_detections(boxes: Sequence[Box],
                     iou_threshold: float = 0.2) -> list[FaceGroup]:
    """Group one image's boxes across services into faces.

    Only cross-service box pairs are candidate matches: a single provider
    reporting two boxes means two faces by definition, however much they
    overlap.  Matching runs Kruskal over candidate edges weighted by
    1 - IoU, keeping only edges with IoU strictly above the threshold;
    the resulting forest components are the face groups.  If a component
    still ends up with two boxes from one service (via a chain through
    other services), its weakest link is cut until the conflict is gone.

    The box ordering used for tie-breaks is derived from box content, so
    the result does not depend on input order.
    """
    if not boxes:
        return []
    image_ids = {b.image_id for b in boxes}
    if len(image_ids) > 1:
        raise ValidationError(
            f"group_detections expects one image, got {sorted(image_ids)}")
    image_id = boxes[0].image_id

    ordered = sorted(boxes, key=_canonical_key)
    n = len(ordered)

    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            if ordered[i].service_id == ordered[j].service_id:
                continue
            overlap = iou(ordered[i], ordered[j])
            if overlap > iou_threshold:
                edges.append((1.0 - overlap, i, j))
    edges.sort()

    parent = list(range(n))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    forest: list[tuple[float, int, int]] = []
    for weight, i, j in edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
            forest.append((weight, i, j))

    def components(forest_edges: list[tuple[float, int, int]]) -> list[list[int]]:
        comp_parent = list(range(n))

        def cfind(a: int) -> int:
            while comp_parent[a] != a:
                comp_parent[a] = comp_parent[comp_parent[a]]
                a = comp_parent[a]
            return a

        for _, i, j in forest_edges:
            ri, rj = cfind(i), cfind(j)
            if ri != rj:
                comp_parent[max(ri, rj)] = min(ri, rj)
        groups: dict[int, list[int]] = {}
        for i in range(n):
            groups.setdefault(cfind(i), []).append(i)
        return [sorted(members) for _, members in sorted(groups.items())]

    # Cut the weakest edge of any component where one service appears twice.
    while True:
        comps = components(forest)
        conflicted = None
        for members in comps:
            services = [ordered[i].service_id for i in members]
            if len(services) != len(set(services)):
                conflicted = set(members)
                break
        if conflicted is None:
            break
        in_comp = [e for e in forest if e[1] in conflicted]
        worst = max(in_comp, key=lambda e: (e[0], e[1], e[2]))
        forest.remove(worst)

    groups_out = []
    for k, members in enumerate(comps):
        groups_out.append(FaceGroup(
            face_id=f"{image_id}/f{k}",
            image_id=image_id,
            boxes=tuple(ordered[i] for i in members),
        ))
    return groups_out


def filter_eligible(groups: Sequence[FaceGroup], n_services: int) -> list[FaceGroup]:
    """Keep an image's faces only under the single-face constraint.

    An image contributes faces only when every one of the n_services
    detecting services found exactly one face in it and all those boxes
    landed in a single group.  Anything else (a missed detection, a
    second face, a split group) excludes the whole image, because face
    ids could not be kept consistent across services otherwise.
    """
    if not groups:
        return []
    image_ids = {g.image_id for g in groups}
    if len(image_ids) > 1:
        raise ValidationError(
            f"filter_eligible expects one image, got {sorted(image_ids)}")

    per_service: dict[str, int] = {}
    for g in groups:
        for b in g.boxes:
            per_service[b.service_id] = per_service.get(b.service_id, 0) + 1
    if len(per_service) != n_services:
        return []
    if any(count != 1 for count in per_service.values()):
        return []
    full = [g for g in groups if len(g.services) == n_services]
    return full


@dataclass
class DiscoveryResult:
    """Outcome of probing a comparator that has no detection API."""

    valid: set[str] = field(default_factory=set)
    invalid: set[str] = field(default_factory=set)
    scores: dict[tuple[str, str], float] = field(default_factory=dict)


def discover_single_face_images(
        comparator: Callable[[str, str], object],
        pairs: Iterable[tuple[str, str]]) -> DiscoveryResult:
    """Find single-face images using only comparison results.

    The comparator returns a confidence score for a pair of single-face
    images and the invalid marker when either side is unusable (no face,
    several faces).  A successful comparison certifies both images; an
    invalid result implicates the partner only once the other side is
    already certified.  Pairs touching a known-invalid image are skipped
    outright, and no score is ever recorded for them.
    """
    from .scoring import INVALID

    result = DiscoveryResult()
    for a, b in pairs:
        if a in result.invalid or b in result.invalid:
            continue
        outcome = comparator(a, b)
        if outcome == INVALID:
            if a in result.valid:
                result.invalid.add(b)
            if b in result.valid:
                result.invalid.add(a)
        else:
            result.scores[(a, b)] = float(outcome)  # type: ignore[arg-type]
            result.valid.add(a)
            result.valid.add(b)
    return result


def write_boxes_csv(boxes: Sequence[Box], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(DETECTIONS_HEADER)
        for b in sorted(boxes, key=lambda b: (b.image_id, _canonical_key(b))):
            writer.writerow([b.image_id, b.service_id,
                             repr(b.x), repr(b.y), repr(b.w), repr(b.h)])


def read_boxes_csv(path: str | Path) -> list[Box]:
    out: list[Box] = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != DETECTIONS_HEADER:
            raise ValidationError(f"unexpected detections header in {path}")
        for row in reader:
            out.append(Box(row[0], row[1], float(row[2]), float(row[3]),
                           float(row[4]), float(row[5])))
    return out


def write_groups_csv(groups: Sequence[FaceGroup], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(GROUPS_HEADER)
        for g in sorted(groups, key=lambda g: g.face_id):
            for b in sorted(g.boxes, key=_canonical_key):
                writer.writerow([g.face_id, g.image_id, b.service_id,
                                 repr(b.x), repr(b.y), repr(b.w), repr(b.h)])
