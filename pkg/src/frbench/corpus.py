"""Name lists, image reference collection and embedding-based dedup.

The corpus layer never touches image bytes.  Images are handled as opaque
references (URL or local path) obtained through a provider contract, so
the scraping backend can be swapped without touching the pipeline.  The
same dedup operation is applied twice in a full run: once on source image
embeddings and once on face crop embeddings.
"""

from __future__ import annotations

import csv
import json
import unicodedata
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import date, timedelta
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .errors import FetchError, ParseError, ValidationError

__all__ = [
    "DemographicSchema",
    "NameEntry",
    "Query",
    "ImageRef",
    "ImageRefProvider",
    "LocalManifestProvider",
    "EmbeddingProvider",
    "normalize_name",
    "format_demographic",
    "load_name_list",
    "build_query",
    "months_before",
    "fetch_image_refs",
    "fetch_image_refs_many",
    "deduplicate",
]

NAME_LIST_COLUMNS = ("name", "gender", "group", "age_band", "country")


def normalize_name(name: str) -> str:
    """Canonical form used for duplicate detection.

    Lowercases, collapses internal whitespace and strips diacritics, so
    "Ana  García " and "ana garcia" collide.
    """
    decomposed = unicodedata.normalize("NFKD", name)
    stripped = "".join(c for c in decomposed if not unicodedata.combining(c))
    return " ".join(stripped.lower().split())


@dataclass(frozen=True)
class DemographicSchema:
    """Finite sets of allowed values per demographic field."""

    genders: frozenset[str]
    groups: frozenset[str]
    age_bands: frozenset[str]

    @classmethod
    def from_values(cls, genders: Sequence[str], groups: Sequence[str],
                    age_bands: Sequence[str]) -> "DemographicSchema":
        return cls(frozenset(genders), frozenset(groups), frozenset(age_bands))

    def check(self, entry: "NameEntry", line: int | None = None) -> None:
        for field, allowed in (("gender", self.genders), ("group", self.groups),
                               ("age_band", self.age_bands)):
            value = getattr(entry, field)
            if value not in allowed:
                raise ParseError(
                    f"unknown {field} value {value!r} for {entry.name!r}", line)


@dataclass(frozen=True)
class NameEntry:
    """One row of the name list."""

    name: str
    gender: str
    group: str
    age_band: str
    country: str | None = None

    @property
    def demographic(self) -> tuple[str, str, str]:
        return (self.gender, self.group, self.age_band)


def format_demographic(key: tuple[str, ...] | str) -> str:
    if isinstance(key, str):
        return key
    return "_".join(part for part in key if part)


@dataclass(frozen=True)
class Query:
    query_id: str
    query_string: str
    entry: NameEntry


@dataclass(frozen=True)
class ImageRef:
    query_id: str
    url: str
    published_at: date | None = None


def load_name_list(path: str | Path,
                   schema: DemographicSchema | None = None) -> list[NameEntry]:
    """Read a name-list CSV (columns name,gender,group,age_band,country).

    The country column may be empty.  Names that collide after
    normalization are a hard failure rather than a silent merge, because
    two list entries mapping to one search query would pollute each
    other's corpus.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty name list", 1) from None
        header = [h.strip() for h in header]
        for required in NAME_LIST_COLUMNS[:4]:
            if required not in header:
                raise ParseError(f"missing column {required!r}", 1)
        idx = {col: header.index(col) for col in header}

        entries: list[NameEntry] = []
        seen: dict[str, int] = {}
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < len(header):
                raise ParseError("short row", line_no)

            def cell(col: str) -> str:
                return row[idx[col]].strip() if col in idx else ""

            name = cell("name")
            if not name:
                raise ParseError("empty name", line_no)
            entry = NameEntry(
                name=name,
                gender=cell("gender"),
                group=cell("group"),
                age_band=cell("age_band"),
                country=cell("country") or None,
            )
            for field in ("gender", "group", "age_band"):
                if not getattr(entry, field):
                    raise ParseError(f"empty {field} for {name!r}", line_no)
            if schema is not None:
                schema.check(entry, line_no)
            key = normalize_name(name)
            if key in seen:
                raise ValidationError(
                    f"duplicate name {name!r} at line {line_no} "
                    f"(first seen at line {seen[key]})")
            seen[key] = line_no
            entries.append(entry)
    return entries


def build_query(entry: NameEntry, query_id: str | None = None) -> Query:
    """Build the search query for a name entry.

    The query string is the name plus the country when one is given,
    single-space separated with no stray whitespace.
    """
    parts = entry.name.split()
    if entry.country:
        parts += entry.country.split()
    qs = " ".join(parts)
    return Query(query_id=query_id or normalize_name(entry.name).replace(" ", "_"),
                 query_string=qs, entry=entry)


class ImageRefProvider(Protocol):
    """Search backend contract: query string in, dated references out."""

    def search(self, query_string: str,
               max_results: int) -> list[tuple[str, str | None]]:
        """Return up to max_results (url, iso_date_or_none) pairs."""
        ...


class LocalManifestProvider:
    """Reference provider reading a local JSON manifest.

    Manifest format: {query_string: [{"url": ..., "published_at": ...}]},
    published_at optional per item.
    """

    def __init__(self, path: str | Path):
        with Path(path).open(encoding="utf-8") as fh:
            self._manifest = json.load(fh)

    def search(self, query_string: str,
               max_results: int) -> list[tuple[str, str | None]]:
        items = self._manifest.get(query_string, [])
        return [(item["url"], item.get("published_at")) for item in items[:max_results]]


class EmbeddingProvider(Protocol):
    """Embedding backend contract used by dedup."""

    def embed(self, refs: Sequence[ImageRef]) -> list[np.ndarray]:
        ...


def months_before(day: date, months: int) -> date:
    """The calendar date `months` whole months before `day` (day clamped)."""
    month_index = day.year * 12 + (day.month - 1) - months
    year, month = divmod(month_index, 12)
    month += 1
    # Clamp to the last day of the target month (e.g. Mar 31 minus 1 month).
    for dom in (day.day, 30, 29, 28):
        try:
            return date(year, month, dom)
        except ValueError:
            continue
    raise AssertionError("unreachable")


def fetch_image_refs(query: Query, provider: ImageRefProvider, *,
                     window_months: int = 12, max_results: int = 100,
                     now: date | None = None,
                     keep_unknown_dates: bool = True) -> list[ImageRef]:
    """Collect image references for a query within a recency window.

    Only references published within `window_months` before `now` pass the
    filter.  References without a date are kept by default: providers that
    cannot vouch recency should not silently lose coverage, and the flag
    lets strict runs drop them instead.  Provider dates are trusted as-is.
    """
    if now is None:
        now = date.today()
    cutoff = months_before(now, window_months)
    try:
        found = provider.search(query.query_string, max_results)
    except Exception as exc:
        raise FetchError(f"provider failed for {query.query_string!r}: {exc}") from exc

    refs: list[ImageRef] = []
    for url, raw_date in found:
        published: date | None = None
        if raw_date is not None:
            try:
                published = date.fromisoformat(raw_date)
            except ValueError as exc:
                raise FetchError(
                    f"bad date {raw_date!r} from provider for {url!r}") from exc
        if published is None:
            if not keep_unknown_dates:
                continue
        elif not (cutoff <= published <= now):
            continue
        refs.append(ImageRef(query_id=query.query_id, url=url, published_at=published))
    return refs


def fetch_image_refs_many(queries: Sequence[Query], provider: ImageRefProvider, *,
                          parallelism: int = 1,
                          **kwargs) -> dict[str, list[ImageRef]]:
    """Fetch several queries, at most `parallelism` in flight at once."""
    if parallelism <= 1:
        return {q.query_id: fetch_image_refs(q, provider, **kwargs) for q in queries}
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        futures = [(q.query_id, pool.submit(fetch_image_refs, q, provider, **kwargs))
                   for q in queries]
        return {qid: fut.result() for qid, fut in futures}


def deduplicate(items: Sequence[tuple[str, np.ndarray]],
                threshold: float = 0.9) -> list[str]:
    """Drop near-duplicates, keeping one representative per duplicate group.

    Groups are connected components of the graph linking items whose
    embedding cosine similarity exceeds `threshold` (near-duplication is
    treated as transitive).  Each group keeps its medoid, the member with
    the smallest summed cosine distance to the rest; ties go to the
    smallest id.  The result is sorted, so it does not depend on input
    order, and running the operation on its own output changes nothing.
    """
    if not items:
        return []
    ids = [item_id for item_id, _ in items]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate ids passed to deduplicate")
    vectors = np.asarray([np.asarray(vec, dtype=float) for _, vec in items])
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(norms == 0):
        bad = ids[int(np.argmin(norms))]
        raise ValidationError(f"zero-norm embedding for {bad!r}")
    unit = vectors / norms[:, None]
    sim = unit @ unit.T

    # Union-find over the similarity graph.
    parent = list(range(len(ids)))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    above = np.argwhere(np.triu(sim > threshold, k=1))
    for i, j in above:
        ri, rj = find(int(i)), find(int(j))
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)

    groups: dict[int, list[int]] = {}
    for i in range(len(ids)):
        groups.setdefault(find(i), []).append(i)

    kept: list[str] = []
    for members in groups.values():
        if len(members) == 1:
            kept.append(ids[members[0]])
            continue
        block = sim[np.ix_(members, members)]
        # Summed cosine distance to the group; medoid minimizes it.
        cost = np.sum(1.0 - block, axis=1)
        best = min(range(len(members)),
                   key=lambda k: (cost[k], ids[members[k]]))
        kept.append(ids[members[best]])
    return sorted(kept)
