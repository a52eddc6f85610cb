"""Deterministic synthetic verification services with known ground truth.

A generated world fixes, per query, which crawled faces truly show the
query identity (the prevalent block), which belong to planted second
identities or small distractor clusters, and each query's demographic
group.  Synthetic services then score any face pair by drawing from
genuine or impostor distributions, entirely via counter-style hashing of
(seed, service, pair), so every value is reproducible regardless of call
order, thread count or interleaving.  Ground-truth labels make the whole
pipeline checkable end to end.
"""

from __future__ import annotations

import hashlib
import math
import random
import threading
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .detection import Box
from .errors import TransportError, ValidationError
from .evaluation import EvalCurve, curve_from_scores, genuine_impostor, norm_ppf
from .scoring import INVALID, FaceRecord, PairPlan, ScoreRecord, build_pair_plan, canonical_pair

__all__ = [
    "WorldConfig",
    "ServiceModel",
    "SimFace",
    "World",
    "SimulatedBackend",
    "generate_world",
    "simulate_score",
    "simulate_boxes",
    "is_multi_face",
    "true_curve",
]


def _digest(*parts: object) -> int:
    payload = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "big")


def _uniform(*parts: object) -> float:
    return _digest(*parts) / 2.0 ** 64


def _normal(mean: float, sd: float, *parts: object) -> float:
    u = _uniform(*parts)
    u = min(max(u, 1e-12), 1.0 - 1e-12)
    return mean + sd * norm_ppf(u)


@dataclass(frozen=True)
class WorldConfig:
    """Shape of a synthetic corpus."""

    n_queries: int
    faces_per_query: tuple[int, int]
    prevalent_fraction: tuple[float, float]  # share of faces truly showing the identity
    second_identity_prob: float = 0.0
    demographics: tuple[str, ...] = ("all",)
    seed: int = 0
    max_distractor_cluster: int = 3

    def __post_init__(self):
        lo, hi = self.faces_per_query
        flo, fhi = self.prevalent_fraction
        if self.n_queries < 1:
            raise ValidationError("n_queries must be at least 1")
        if not 1 <= lo <= hi:
            raise ValidationError(f"bad faces_per_query range ({lo}, {hi})")
        if not 0.0 < flo <= fhi <= 1.0:
            raise ValidationError(f"bad prevalent_fraction range ({flo}, {fhi})")
        if not 0.0 <= self.second_identity_prob <= 1.0:
            raise ValidationError("second_identity_prob must lie in [0, 1]")
        if not self.demographics:
            raise ValidationError("at least one demographic group is required")
        if self.max_distractor_cluster < 1:
            raise ValidationError("max_distractor_cluster must be at least 1")

    @classmethod
    def from_dict(cls, obj: Mapping) -> "WorldConfig":
        return cls(
            n_queries=int(obj["n_queries"]),
            faces_per_query=tuple(obj["faces_per_query"]),  # type: ignore[arg-type]
            prevalent_fraction=tuple(obj["prevalent_fraction"]),  # type: ignore[arg-type]
            second_identity_prob=float(obj.get("second_identity_prob", 0.0)),
            demographics=tuple(obj.get("demographics", ("all",))),
            seed=int(obj.get("seed", 0)),
            max_distractor_cluster=int(obj.get("max_distractor_cluster", 3)),
        )

    def to_dict(self) -> dict:
        return {
            "n_queries": self.n_queries,
            "faces_per_query": list(self.faces_per_query),
            "prevalent_fraction": list(self.prevalent_fraction),
            "second_identity_prob": self.second_identity_prob,
            "demographics": list(self.demographics),
            "seed": self.seed,
            "max_distractor_cluster": self.max_distractor_cluster,
        }


@dataclass(frozen=True)
class ServiceModel:
    """Behaviour of one synthetic service."""

    service_id: str
    genuine: tuple[float, float]    # (mean, sd) for same-identity pairs
    impostor: tuple[float, float]   # (mean, sd) for different-identity pairs
    score_range: tuple[float, float] = (0.0, 1.0)
    genuine_offsets: Mapping[str, float] = field(default_factory=dict)
    impostor_offsets: Mapping[str, float] = field(default_factory=dict)
    multi_face_rate: float = 0.0
    fault_rate: float = 0.0
    box_jitter: float = 0.05
    double_detection_rate: float = 0.0
    lacks_detection: bool = False

    def __post_init__(self):
        lo, hi = self.score_range
        if not lo < hi:
            raise ValidationError(f"bad score range ({lo}, {hi})")
        for name, rate in (("multi_face_rate", self.multi_face_rate),
                           ("fault_rate", self.fault_rate),
                           ("double_detection_rate", self.double_detection_rate)):
            if not 0.0 <= rate < 1.0:
                raise ValidationError(f"{name} must lie in [0, 1), got {rate}")

    @classmethod
    def from_dict(cls, obj: Mapping) -> "ServiceModel":
        return cls(
            service_id=str(obj["service_id"]),
            genuine=tuple(obj["genuine"]),  # type: ignore[arg-type]
            impostor=tuple(obj["impostor"]),  # type: ignore[arg-type]
            score_range=tuple(obj.get("score_range", (0.0, 1.0))),  # type: ignore[arg-type]
            genuine_offsets=dict(obj.get("genuine_offsets", {})),
            impostor_offsets=dict(obj.get("impostor_offsets", {})),
            multi_face_rate=float(obj.get("multi_face_rate", 0.0)),
            fault_rate=float(obj.get("fault_rate", 0.0)),
            box_jitter=float(obj.get("box_jitter", 0.05)),
            double_detection_rate=float(obj.get("double_detection_rate", 0.0)),
            lacks_detection=bool(obj.get("lacks_detection", False)),
        )

    def to_dict(self) -> dict:
        return {
            "service_id": self.service_id,
            "genuine": list(self.genuine),
            "impostor": list(self.impostor),
            "score_range": list(self.score_range),
            "genuine_offsets": dict(self.genuine_offsets),
            "impostor_offsets": dict(self.impostor_offsets),
            "multi_face_rate": self.multi_face_rate,
            "fault_rate": self.fault_rate,
            "box_jitter": self.box_jitter,
            "double_detection_rate": self.double_detection_rate,
            "lacks_detection": self.lacks_detection,
        }


@dataclass(frozen=True)
class SimFace:
    face_id: str
    image_id: str
    query_id: str
    identity: str
    demographic: str
    label: int  # ground-truth identity label, 1 or 0


@dataclass(frozen=True)
class World:
    config: WorldConfig
    faces: tuple[SimFace, ...]

    def face_records(self) -> list[FaceRecord]:
        return [FaceRecord(face_id=f.face_id, query_id=f.query_id,
                           demographic=f.demographic, label=f.label)
                for f in self.faces]

    def labels(self) -> dict[str, int]:
        return {f.face_id: f.label for f in self.faces}

    def demographics(self) -> dict[str, str]:
        return {f.face_id: f.demographic for f in self.faces}

    def identity_of(self, face_id: str) -> str:
        return self._by_id()[face_id].identity

    def faces_by_query(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for f in self.faces:
            out.setdefault(f.query_id, []).append(f.face_id)
        return {q: sorted(ids) for q, ids in out.items()}

    def crawled_counts(self) -> dict[str, int]:
        return {q: len(ids) for q, ids in self.faces_by_query().items()}

    def _by_id(self) -> dict[str, SimFace]:
        cached = self.__dict__.get("_index")
        if cached is None:
            cached = {f.face_id: f for f in self.faces}
            self.__dict__["_index"] = cached
        return cached

    def base_box(self, face_id: str) -> tuple[float, float, float, float]:
        seed = self.config.seed
        w = 80.0 + 80.0 * _uniform(seed, "boxw", face_id)
        h = w * (0.9 + 0.2 * _uniform(seed, "boxh", face_id))
        x = (480.0 - w) * _uniform(seed, "boxx", face_id)
        y = (480.0 - h) * _uniform(seed, "boxy", face_id)
        return (x, y, w, h)


def generate_world(config: WorldConfig) -> World:
    """Build a world deterministically from its config.

    Each query gets one prevalent identity covering at least
    ceil(fraction * n) faces, where the fraction is drawn from the
    configured range.  The rest of the faces are split into distractor
    identities in clusters strictly smaller than the prevalent block,
    plus, with the configured probability, one planted second identity
    of at least 5 faces (again strictly smaller than the prevalent
    block) to exercise the multiple-identities rejection.  Demographics
    rotate round-robin over the configured groups, so they stay
    balanced.  One face per image.
    """
    rng = random.Random(config.seed)
    faces: list[SimFace] = []
    lo, hi = config.faces_per_query
    flo, fhi = config.prevalent_fraction

    for q in range(config.n_queries):
        query_id = f"q{q:03d}"
        demographic = config.demographics[q % len(config.demographics)]
        n = rng.randint(lo, hi)
        fraction = rng.uniform(flo, fhi)
        prevalent = min(n, math.ceil(fraction * n))

        identities = [f"{query_id}/id0"] * prevalent
        remaining = n - prevalent
        if (config.second_identity_prob > 0.0
                and remaining >= 5 and prevalent >= 6
                and rng.random() < config.second_identity_prob):
            second = rng.randint(5, min(remaining, prevalent - 1))
            identities += [f"{query_id}/id_second"] * second
            remaining -= second
        cluster_cap = min(config.max_distractor_cluster, max(1, prevalent - 1))
        d = 0
        while remaining > 0:
            size = min(remaining, rng.randint(1, cluster_cap))
            identities += [f"{query_id}/dist{d:03d}"] * size
            remaining -= size
            d += 1
        rng.shuffle(identities)

        for k, identity in enumerate(identities):
            face_id = f"{query_id}/i{k:03d}"
            faces.append(SimFace(
                face_id=face_id, image_id=face_id, query_id=query_id,
                identity=identity, demographic=demographic,
                label=1 if identity.endswith("/id0") else 0))
    return World(config=config, faces=tuple(faces))


def is_multi_face(world: World, model: ServiceModel, image_id: str) -> bool:
    """Whether this service sees the image as containing several faces."""
    if model.multi_face_rate == 0.0:
        return False
    return _uniform(world.config.seed, "multiface", model.service_id,
                    image_id) < model.multi_face_rate


def simulate_score(world: World, model: ServiceModel,
                   face_i: str, face_j: str) -> float | str:
    """Deterministic comparison outcome for one pair.

    Same-identity pairs draw from the genuine distribution, all others
    from the impostor distribution, with per-demographic mean offsets
    applied (the canonically first face's group decides, which only
    matters for pairs that cross groups).  Draws are clipped to the
    service's native range.  Pairs touching an image the service sees as
    multi-face return the invalid marker.
    """
    a, b = canonical_pair(face_i, face_j)
    index = world._by_id()
    fa, fb = index[a], index[b]
    if is_multi_face(world, model, fa.image_id) or \
            is_multi_face(world, model, fb.image_id):
        return INVALID

    if fa.identity == fb.identity:
        mean, sd = model.genuine
        mean += model.genuine_offsets.get(fa.demographic, 0.0)
    else:
        mean, sd = model.impostor
        mean += model.impostor_offsets.get(fa.demographic, 0.0)
    value = _normal(mean, sd, world.config.seed, "score", model.service_id, a, b)
    lo, hi = model.score_range
    return min(max(value, lo), hi)


def simulate_boxes(world: World, model: ServiceModel) -> list[Box]:
    """Detection boxes this service reports, jittered around the truth.

    A service that lacks a detection API reports nothing.  With the
    configured probability an image yields a second, spurious box, which
    downstream filtering treats as a second face.
    """
    if model.lacks_detection:
        return []
    seed = world.config.seed
    boxes: list[Box] = []
    for f in world.faces:
        x, y, w, h = world.base_box(f.face_id)
        copies = 1
        if model.double_detection_rate > 0.0 and _uniform(
                seed, "double", model.service_id, f.image_id) < model.double_detection_rate:
            copies = 2
        for c in range(other := copies):
            dx = _normal(0.0, model.box_jitter * w, seed, "jx", model.service_id,
                         f.image_id, c)
            dy = _normal(0.0, model.box_jitter * h, seed, "jy", model.service_id,
                         f.image_id, c)
            dw = _normal(0.0, model.box_jitter * w, seed, "jw", model.service_id,
                         f.image_id, c)
            dh = _normal(0.0, model.box_jitter * h, seed, "jh", model.service_id,
                         f.image_id, c)
            boxes.append(Box(image_id=f.image_id, service_id=model.service_id,
                             x=x + dx, y=y + dy,
                             w=max(8.0, w + dw), h=max(8.0, h + dh)))
    return boxes


class SimulatedBackend:
    """ServiceBackend over a world and a service model.

    Scores are pure functions of (seed, service, pair).  Transient
    faults are injected per (pair, attempt), so a retried call can
    succeed deterministically; attempts are counted per pair.
    """

    def __init__(self, world: World, model: ServiceModel):
        self.world = world
        self.model = model
        self.service_id = model.service_id
        self.score_range = model.score_range
        self._attempts: dict[tuple[str, str], int] = {}
        self._lock = threading.Lock()
        self.calls = 0

    def compare(self, face_i: str, face_j: str) -> float | str:
        key = canonical_pair(face_i, face_j)
        with self._lock:
            attempt = self._attempts.get(key, 0) + 1
            self._attempts[key] = attempt
            self.calls += 1
        if self.model.fault_rate > 0.0 and _uniform(
                self.world.config.seed, "fault", self.service_id,
                key[0], key[1], attempt) < self.model.fault_rate:
            raise TransportError(
                f"{self.service_id}: injected fault for {key} (attempt {attempt})")
        return simulate_score(self.world, self.model, face_i, face_j)


def true_curve(world: World, model: ServiceModel,
               plan: PairPlan | None = None,
               confidence: float = 0.95) -> EvalCurve:
    """Evaluation curve under ground-truth labels, on the same pair plan.

    The reference every estimated curve is compared against: identical
    scores, perfect labels.
    """
    if plan is None:
        plan = build_pair_plan(world.face_records(), world.config.seed)
    records = []
    for p in plan.pairs:
        outcome = simulate_score(world, model, p.face_i, p.face_j)
        if outcome == INVALID:
            continue
        records.append(ScoreRecord(
            service=model.service_id, face_i=p.face_i, face_j=p.face_j,
            query_i=p.query_i, query_j=p.query_j,
            raw=float(outcome), disposition="ok"))
    genuine, impostor = genuine_impostor(records, world.labels(),
                                         world.demographics())
    return curve_from_scores(genuine, impostor, confidence=confidence)
