"""Pair planning, score collection, normalization and matrix assembly.

Confidence scores are collected per service over a deterministic pair
plan: every same-query face pair, plus a matched number of cross-query
pairs drawn within demographic strata.  Raw scores are kept for
evaluation; a per-service bimodal fit maps them onto a shared [0, 1]
scale for identity estimation, where the impostor mode lands at 0 and
the genuine mode at 1.
"""

from __future__ import annotations

import json
import logging
import math
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence, runtime_checkable

import numpy as np

from .errors import (CollectionAbortedError, DegenerateFitError,
                     TransportError, ValidationError)

__all__ = [
    "INVALID",
    "FaceRecord",
    "ServiceBackend",
    "PlannedPair",
    "PairPlan",
    "ScoreRecord",
    "ScoreTable",
    "ScoreStore",
    "RetryPolicy",
    "TokenBucket",
    "ModePair",
    "ConfidenceMatrix",
    "canonical_pair",
    "build_pair_plan",
    "collect_scores",
    "fit_bimodal_modes",
    "normalize_scores",
    "assemble_confidence_matrix",
]

log = logging.getLogger(__name__)

# Marker a backend returns when an input image is unusable for matching
# (no face found, more than one face).  Data, not an exception: services
# report it as a normal response.
INVALID = "invalid"

DISPOSITION_OK = "ok"
DISPOSITION_INVALID = "invalid"
DISPOSITION_FAILED = "failed"


@dataclass(frozen=True)
class FaceRecord:
    """A unified face: one id across services, tied to its query."""

    face_id: str
    query_id: str
    demographic: object
    label: int | None = None      # annotated identity label, -1/0/1
    estimated: int | None = None  # estimated identity label, -1/0/1


@runtime_checkable
class ServiceBackend(Protocol):
    """One verification service: compare two faces, get a confidence.

    compare() returns a raw score in score_range, or INVALID when either
    input is unusable.  Transient transport problems raise
    TransportError and may be retried by the caller.
    """

    service_id: str
    score_range: tuple[float, float]

    def compare(self, face_i: str, face_j: str) -> float | str:
        ...


def canonical_pair(a: str, b: str) -> tuple[str, str]:
    """Unordered pair as (min, max); comparisons are symmetric."""
    return (a, b) if a <= b else (b, a)


@dataclass(frozen=True)
class PlannedPair:
    face_i: str
    face_j: str
    query_i: str
    query_j: str

    @property
    def kind(self) -> str:
        return "same" if self.query_i == self.query_j else "cross"


@dataclass(frozen=True)
class PairPlan:
    seed: int
    same_query: tuple[PlannedPair, ...]
    cross_query: tuple[PlannedPair, ...]

    @property
    def pairs(self) -> tuple[PlannedPair, ...]:
        return self.same_query + self.cross_query


def build_pair_plan(faces: Sequence[FaceRecord], seed: int) -> PairPlan:
    """Plan which face pairs to send to every service.

    Same-query: all unordered pairs within each query.  Cross-query:
    pairs of faces from different queries within the same demographic
    stratum, sampled uniformly without replacement.  Each stratum gets as
    many cross pairs as it has same-query pairs (so overall the two sides
    are balanced), capped by what the stratum population allows.  The
    draw depends only on the seed and face ids, never on input order or
    global RNG state.
    """
    by_id: dict[str, FaceRecord] = {}
    for f in faces:
        if f.face_id in by_id:
            raise ValidationError(f"duplicate face id {f.face_id!r}")
        by_id[f.face_id] = f

    by_query: dict[str, list[str]] = {}
    query_demo: dict[str, object] = {}
    for f in sorted(by_id.values(), key=lambda f: f.face_id):
        by_query.setdefault(f.query_id, []).append(f.face_id)
        if f.query_id in query_demo and query_demo[f.query_id] != f.demographic:
            raise ValidationError(
                f"query {f.query_id!r} spans demographics "
                f"{query_demo[f.query_id]!r} and {f.demographic!r}")
        query_demo[f.query_id] = f.demographic

    same: list[PlannedPair] = []
    same_by_stratum: dict[object, int] = {}
    for qid in sorted(by_query):
        members = by_query[qid]
        stratum = query_demo[qid]
        for i in range(len(members)):
            for j in range(i + 1, len(members)):
                a, b = canonical_pair(members[i], members[j])
                same.append(PlannedPair(a, b, qid, qid))
                same_by_stratum[stratum] = same_by_stratum.get(stratum, 0) + 1

    strata: dict[object, list[str]] = {}
    for qid in sorted(by_query):
        strata.setdefault(query_demo[qid], []).append(qid)

    rng = random.Random(seed)
    cross: list[PlannedPair] = []
    for stratum in sorted(strata, key=repr):
        queries = strata[stratum]
        target = same_by_stratum.get(stratum, 0)
        if len(queries) < 2:
            log.warning("stratum %r has %d query(ies); no cross pairs possible",
                        stratum, len(queries))
            continue
        if target == 0:
            continue
        stratum_faces = [(fid, qid) for qid in queries for fid in by_query[qid]]
        total = len(stratum_faces)
        within = sum(len(by_query[q]) * (len(by_query[q]) - 1) // 2 for q in queries)
        candidates = total * (total - 1) // 2 - within
        take = min(target, candidates)
        if take < target:
            log.warning("stratum %r allows only %d of %d cross pairs",
                        stratum, candidates, target)

        picked: list[PlannedPair] = []
        if candidates <= 4 * target or candidates <= 10000:
            pool = []
            for i in range(total):
                for j in range(i + 1, total):
                    fi, qi = stratum_faces[i]
                    fj, qj = stratum_faces[j]
                    if qi == qj:
                        continue
                    a, b = canonical_pair(fi, fj)
                    qa, qb = (qi, qj) if a == fi else (qj, qi)
                    pool.append(PlannedPair(a, b, qa, qb))
            picked = pool if take == candidates else rng.sample(pool, take)
        else:
            seen: set[tuple[str, str]] = set()
            while len(picked) < take:
                i = rng.randrange(total)
                j = rng.randrange(total)
                if i == j:
                    continue
                fi, qi = stratum_faces[i]
                fj, qj = stratum_faces[j]
                if qi == qj:
                    continue
                key = canonical_pair(fi, fj)
                if key in seen:
                    continue
                seen.add(key)
                a, b = key
                qa, qb = (qi, qj) if a == fi else (qj, qi)
                picked.append(PlannedPair(a, b, qa, qb))
        picked.sort(key=lambda p: (p.face_i, p.face_j))
        cross.extend(picked)

    return PairPlan(seed=seed, same_query=tuple(same), cross_query=tuple(cross))


@dataclass(frozen=True)
class ScoreRecord:
    """One comparison outcome for one service."""

    service: str
    face_i: str
    face_j: str
    query_i: str
    query_j: str
    raw: float | None
    disposition: str
    normalized: float | None = None

    @property
    def kind(self) -> str:
        return "same" if self.query_i == self.query_j else "cross"


class ScoreTable:
    """Flat, append-only collection of score records with pair lookup."""

    def __init__(self, records: Iterable[ScoreRecord] = ()):
        self._records: list[ScoreRecord] = []
        self._index: dict[tuple[str, str, str], ScoreRecord] = {}
        for r in records:
            self.append(r)

    def append(self, record: ScoreRecord) -> None:
        key = (record.service, record.face_i, record.face_j)
        if key in self._index:
            raise ValidationError(f"duplicate score record for {key}")
        self._records.append(record)
        self._index[key] = record

    @property
    def records(self) -> tuple[ScoreRecord, ...]:
        return tuple(self._records)

    def get(self, service: str, face_i: str, face_j: str) -> ScoreRecord | None:
        a, b = canonical_pair(face_i, face_j)
        return self._index.get((service, a, b))

    def ok_records(self, service: str | None = None,
                   kind: str | None = None) -> list[ScoreRecord]:
        return [r for r in self._records
                if r.disposition == DISPOSITION_OK
                and (service is None or r.service == service)
                and (kind is None or r.kind == kind)]

    def raw_scores(self, service: str) -> np.ndarray:
        return np.array([r.raw for r in self.ok_records(service)], dtype=float)

    def services(self) -> list[str]:
        return sorted({r.service for r in self._records})

    def with_normalization(self, modes_by_service: Mapping[str, "ModePair"]) -> "ScoreTable":
        """Copy of the table with normalized values filled in per service."""
        out = ScoreTable()
        for r in self._records:
            if r.disposition == DISPOSITION_OK and r.service in modes_by_service:
                norm = float(normalize_scores(
                    np.array([r.raw]), modes_by_service[r.service])[0])
                out.append(replace(r, normalized=norm))
            else:
                out.append(r)
        return out


class ScoreStore:
    """JSONL-backed cache of score records, one object per line.

    Record keys: service, q_i, face_i, q_j, face_j, raw, disposition.
    Appending keeps canonical pair order within each batch so reruns
    produce byte-identical files.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._index: dict[tuple[str, str, str], ScoreRecord] = {}
        if self.path.exists():
            with self.path.open(encoding="utf-8") as fh:
                for line_no, line in enumerate(fh, start=1):
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        obj = json.loads(line)
                        record = ScoreRecord(
                            service=obj["service"],
                            face_i=obj["face_i"], face_j=obj["face_j"],
                            query_i=obj["q_i"], query_j=obj["q_j"],
                            raw=obj["raw"], disposition=obj["disposition"],
                        )
                    except (KeyError, ValueError) as exc:
                        raise ValidationError(
                            f"{self.path}:{line_no}: bad score record: {exc}")
                    key = (record.service, record.face_i, record.face_j)
                    self._index[key] = record

    def __len__(self) -> int:
        return len(self._index)

    def get(self, service: str, face_i: str, face_j: str) -> ScoreRecord | None:
        a, b = canonical_pair(face_i, face_j)
        return self._index.get((service, a, b))

    def append(self, records: Sequence[ScoreRecord]) -> None:
        batch = sorted(records, key=lambda r: (r.service, r.face_i, r.face_j))
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a", encoding="utf-8") as fh:
            for r in batch:
                obj = {"service": r.service, "q_i": r.query_i, "face_i": r.face_i,
                       "q_j": r.query_j, "face_j": r.face_j, "raw": r.raw,
                       "disposition": r.disposition}
                fh.write(json.dumps(obj, sort_keys=True, separators=(",", ":")))
                fh.write("\n")
                self._index[(r.service, r.face_i, r.face_j)] = r


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    base_delay: float = 0.5
    max_delay: float = 30.0
    failure_ceiling: float = 0.1  # abort when this fraction of pairs fails


class TokenBucket:
    """Simple thread-safe token bucket for backend rate limiting."""

    def __init__(self, rate: float, burst: int = 1):
        if rate <= 0:
            raise ValidationError("rate must be positive")
        self.rate = rate
        self.capacity = max(1, burst)
        self._tokens = float(self.capacity)
        self._last = time.monotonic()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = time.monotonic()
                self._tokens = min(self.capacity,
                                   self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate
            time.sleep(wait)


def _call_with_retry(backend: ServiceBackend, pair: PlannedPair,
                     retry: RetryPolicy, limiter: TokenBucket | None) -> ScoreRecord:
    lo, hi = backend.score_range
    for attempt in range(1, retry.max_attempts + 1):
        if limiter is not None:
            limiter.acquire()
        try:
            outcome = backend.compare(pair.face_i, pair.face_j)
        except TransportError as exc:
            if attempt == retry.max_attempts:
                log.warning("pair (%s, %s) failed after %d attempts: %s",
                            pair.face_i, pair.face_j, attempt, exc)
                return ScoreRecord(backend.service_id, pair.face_i, pair.face_j,
                                   pair.query_i, pair.query_j, None,
                                   DISPOSITION_FAILED)
            delay = min(retry.max_delay, retry.base_delay * 2 ** (attempt - 1))
            log.debug("retrying (%s, %s) after %s (attempt %d)",
                      pair.face_i, pair.face_j, exc, attempt)
            time.sleep(delay)
            continue
        if outcome == INVALID:
            return ScoreRecord(backend.service_id, pair.face_i, pair.face_j,
                               pair.query_i, pair.query_j, None,
                               DISPOSITION_INVALID)
        value = float(outcome)  # type: ignore[arg-type]
        if not (lo <= value <= hi):
            raise ValidationError(
                f"{backend.service_id} returned {value} outside "
                f"declared range [{lo}, {hi}]")
        return ScoreRecord(backend.service_id, pair.face_i, pair.face_j,
                           pair.query_i, pair.query_j, value, DISPOSITION_OK)
    raise AssertionError("unreachable")


def collect_scores(plan: PairPlan, backend: ServiceBackend, *,
                   store: ScoreStore | None = None,
                   retry: RetryPolicy = RetryPolicy(),
                   workers: int = 1,
                   limiter: TokenBucket | None = None) -> ScoreTable:
    """Run the plan against one backend, reusing the cache where possible.

    Cached pairs cost no backend calls, so resuming an interrupted run is
    cheap.  New results are merged in canonical pair order whatever the
    worker count, keeping the table and the cache file deterministic.
    The run aborts when the fraction of permanently failed pairs exceeds
    the retry policy's ceiling.
    """
    pairs = plan.pairs
    todo: list[PlannedPair] = []
    cached: dict[tuple[str, str], ScoreRecord] = {}
    for p in pairs:
        hit = store.get(backend.service_id, p.face_i, p.face_j) if store else None
        if hit is not None:
            cached[(p.face_i, p.face_j)] = hit
        else:
            todo.append(p)

    fresh: dict[tuple[str, str], ScoreRecord] = {}
    if todo:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(
                    lambda p: _call_with_retry(backend, p, retry, limiter), todo))
        else:
            results = [_call_with_retry(backend, p, retry, limiter) for p in todo]
        for record in results:
            fresh[(record.face_i, record.face_j)] = record
        if store is not None:
            store.append(sorted(fresh.values(),
                                key=lambda r: (r.face_i, r.face_j)))

    table = ScoreTable()
    failed = 0
    for p in pairs:
        record = cached.get((p.face_i, p.face_j)) or fresh[(p.face_i, p.face_j)]
        if record.disposition == DISPOSITION_FAILED:
            failed += 1
        table.append(record)
    if pairs and failed / len(pairs) > retry.failure_ceiling:
        raise CollectionAbortedError(
            f"{backend.service_id}: {failed}/{len(pairs)} pairs failed "
            f"(ceiling {retry.failure_ceiling:.0%})")
    return table


@dataclass(frozen=True)
class ModePair:
    """Locations of the impostor (low) and genuine (high) score modes."""

    low: float
    high: float

    def __post_init__(self):
        if not (self.low < self.high):
            raise ValidationError(f"modes must satisfy low < high, "
                                  f"got ({self.low}, {self.high})")


def fit_bimodal_modes(scores: Sequence[float] | np.ndarray, *,
                      max_iter: int = 200, tol: float = 1e-8) -> ModePair:
    """Locate the two modes of a service's raw score distribution.

    Fits a two-component 1-D Gaussian mixture by EM: means start at the
    10th and 90th percentiles, weights equal, both variances at the
    sample variance.  Convergence is a log-likelihood change below tol,
    or max_iter sweeps.  The fit is rejected as degenerate when a
    component collapses (weight under 1e-3), when the fitted means
    coincide, or when the two-component model loses the BIC comparison
    against a single Gaussian, which is what happens on unimodal input.
    Callers with odd distributions should pass modes manually instead.
    """
    x = np.asarray(scores, dtype=float)
    if x.ndim != 1 or x.size < 4:
        raise ValidationError("need a flat sample of at least 4 scores")
    if not np.all(np.isfinite(x)):
        raise ValidationError("scores contain non-finite values")
    span = float(x.max() - x.min())
    if span == 0.0:
        raise DegenerateFitError("all scores identical; specify modes manually")

    n = x.size
    means = np.percentile(x, [10.0, 90.0]).astype(float)
    weights = np.array([0.5, 0.5])
    variances = np.array([x.var(), x.var()])
    # Floor keeps atomic modes (repeated exact values) well-posed.
    var_floor = (1e-4 * span) ** 2
    variances = np.maximum(variances, var_floor)

    ll_prev = -math.inf
    ll = ll_prev
    for _ in range(max_iter):
        log_pdf = (-0.5 * (x[:, None] - means[None, :]) ** 2 / variances[None, :]
                   - 0.5 * np.log(2.0 * np.pi * variances[None, :])
                   + np.log(weights[None, :]))
        top = log_pdf.max(axis=1, keepdims=True)
        log_total = top[:, 0] + np.log(np.exp(log_pdf - top).sum(axis=1))
        ll = float(log_total.sum())
        resp = np.exp(log_pdf - log_total[:, None])

        counts = resp.sum(axis=0)
        weights = counts / n
        if weights.min() < 1e-3:
            raise DegenerateFitError(
                f"mixture component collapsed (weights {weights.round(6)}); "
                "specify modes manually")
        means = (resp * x[:, None]).sum(axis=0) / counts
        variances = (resp * (x[:, None] - means[None, :]) ** 2).sum(axis=0) / counts
        variances = np.maximum(variances, var_floor)

        if abs(ll - ll_prev) < tol:
            break
        ll_prev = ll

    single_var = max(float(x.var()), var_floor)
    ll_single = float((-0.5 * (x - x.mean()) ** 2 / single_var
                       - 0.5 * np.log(2.0 * np.pi * single_var)).sum())
    bic_two = -2.0 * ll + 5.0 * math.log(n)
    bic_single = -2.0 * ll_single + 2.0 * math.log(n)
    if bic_two >= bic_single:
        raise DegenerateFitError(
            "score distribution is not bimodal; specify modes manually")

    low, high = sorted(float(m) for m in means)
    if high - low < 1e-9 * span:
        raise DegenerateFitError(
            "fitted modes coincide; specify modes manually")
    return ModePair(low=low, high=high)


def normalize_scores(scores: Sequence[float] | np.ndarray,
                     modes: ModePair) -> np.ndarray:
    """Map raw scores onto [0, 1] with the modes at the endpoints.

    Affine map sending the low mode to 0 and the high mode to 1, clipped
    to [0, 1].  Monotone, so score order is preserved, and applying it to
    already-normalized values with modes (0, 1) is the identity.
    """
    if modes.high == modes.low:
        raise ValidationError("modes coincide; cannot normalize")
    x = np.asarray(scores, dtype=float)
    return np.clip((x - modes.low) / (modes.high - modes.low), 0.0, 1.0)


@dataclass(frozen=True)
class ConfidenceMatrix:
    """Symmetric normalized confidence matrix for one (query, service)."""

    query_id: str
    service_id: str
    face_ids: tuple[str, ...]
    matrix: np.ndarray
    dropped: tuple[str, ...] = ()

    def __post_init__(self):
        m = self.matrix
        k = len(self.face_ids)
        if m.shape != (k, k):
            raise ValidationError("matrix shape does not match face count")
        if not np.allclose(m, m.T):
            raise ValidationError("matrix is not symmetric")
        if not np.allclose(np.diag(m), 1.0):
            raise ValidationError("matrix diagonal must be 1")
        if m.size and (m.min() < 0.0 or m.max() > 1.0):
            raise ValidationError("matrix entries must lie in [0, 1]")


def assemble_confidence_matrix(query_id: str, service_id: str, table: ScoreTable,
                               *, min_faces: int = 2) -> ConfidenceMatrix | None:
    """Build the normalized same-query confidence matrix for one service.

    Faces are the query's faces seen in the table, in sorted id order.
    Missing entries (failed or invalid pairs) are resolved by repeatedly
    dropping the face with the most missing entries until the matrix is
    complete; drops are logged.  Returns None when fewer than min_faces
    remain, which marks the query as excluded downstream.
    """
    records = [r for r in table.records
               if r.service == service_id and r.query_i == query_id
               and r.query_j == query_id]
    if not records:
        return None

    faces = sorted({f for r in records for f in (r.face_i, r.face_j)})
    index = {f: i for i, f in enumerate(faces)}
    k = len(faces)
    m = np.full((k, k), np.nan)
    np.fill_diagonal(m, 1.0)
    for r in records:
        if r.disposition != DISPOSITION_OK:
            continue
        if r.normalized is None:
            raise ValidationError(
                f"record ({r.face_i}, {r.face_j}) lacks a normalized score; "
                "normalize the table before assembling matrices")
        i, j = index[r.face_i], index[r.face_j]
        m[i, j] = m[j, i] = r.normalized

    alive = list(range(k))
    dropped: list[str] = []
    while True:
        sub = m[np.ix_(alive, alive)]
        missing = np.isnan(sub).sum(axis=1)
        if missing.sum() == 0:
            break
        # Most missing entries first; ties drop the later face id.
        worst = max(range(len(alive)),
                    key=lambda t: (missing[t], faces[alive[t]]))
        dropped.append(faces[alive[worst]])
        del alive[worst]
        if len(alive) < min_faces:
            log.warning("query %r/%s: only %d usable faces after drops; excluded",
                        query_id, service_id, len(alive))
            return None
    if dropped:
        log.info("query %r/%s: dropped %d face(s) with missing scores: %s",
                 query_id, service_id, len(dropped), dropped)

    kept_faces = tuple(faces[i] for i in alive)
    return ConfidenceMatrix(query_id=query_id, service_id=service_id,
                            face_ids=kept_faces,
                            matrix=m[np.ix_(alive, alive)],
                            dropped=tuple(dropped))
