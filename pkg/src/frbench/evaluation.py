"""Error-rate evaluation: FMR/FNMR curves, EER, bias and diagnostics.

Evaluation always runs on raw scores; normalization exists only for
identity estimation.  A pair counts as a match when its score is greater
than or equal to the threshold.  Genuine pairs join faces of the same
query, impostor pairs join faces of different queries within the same
demographic group, and both faces must carry label 1 under whichever
labelling (annotated or estimated) is being evaluated.  Faces labelled
-1 never contribute pairs.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import EmptyEvalSetError, ValidationError
from .estimation import LabelEstimate, SpectralResult, Thresholds, consolidate
from .scoring import ScoreRecord

__all__ = [
    "norm_ppf",
    "wilson_interval",
    "EvalSets",
    "EvalCurve",
    "BiasRow",
    "ConfusionMatrix3",
    "AblationRow",
    "genuine_impostor",
    "build_eval_sets",
    "curve_from_scores",
    "fmr_fnmr_curve",
    "equal_error_rate",
    "fnmr_at_fmr",
    "curve_discrepancy",
    "disaggregate_bias",
    "confusion_matrix",
    "agreement_rate",
    "achievable_curve",
    "majority_vote_ablation",
    "service_composition_sweep",
    "write_curves_csv",
    "write_bias_csv",
]

CURVES_HEADER = ("which", "service", "group", "threshold", "fmr", "fnmr",
                 "fmr_lo", "fmr_hi", "fnmr_lo", "fnmr_hi")
BIAS_HEADER = ("service", "group", "eer_est", "eer_ann",
               "n_genuine", "n_impostor")

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


def norm_ppf(p: float) -> float:
    """Standard normal quantile.

    Rational approximation refined by one Halley step against erfc, good
    to well below 1e-9 everywhere in (0, 1).
    """
    if not 0.0 < p < 1.0:
        raise ValidationError(f"quantile argument must lie in (0, 1), got {p}")

    a = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
         1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
    b = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
         6.680131188771972e+01, -1.328068155288572e+01)
    c = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
         -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
    d = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
         3.754408661907416e+00)
    p_low, p_high = 0.02425, 1.0 - 0.02425

    if p < p_low:
        q = math.sqrt(-2.0 * math.log(p))
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    elif p <= p_high:
        q = p - 0.5
        r = q * q
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q / \
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0)
    else:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)

    err = 0.5 * math.erfc(-x / math.sqrt(2.0)) - p
    u = err * math.sqrt(2.0 * math.pi) * math.exp(x * x / 2.0)
    return x - u / (1.0 + x * u / 2.0)


def wilson_interval(k: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion k/n.

    Exact at the boundaries: k = 0 pins the lower bound to 0 and k = n
    pins the upper bound to 1.
    """
    if n <= 0:
        raise ValidationError(f"n must be positive, got {n}")
    if not 0 <= k <= n:
        raise ValidationError(f"k must lie in [0, n], got k={k}, n={n}")
    if not 0.0 < confidence < 1.0:
        raise ValidationError(f"confidence must lie in (0, 1), got {confidence}")
    z = norm_ppf(1.0 - (1.0 - confidence) / 2.0)
    denom = n + z * z
    center = (k + z * z / 2.0) / denom
    half = z * math.sqrt(k * (n - k) / n + z * z / 4.0) / denom
    lo = 0.0 if k == 0 else max(0.0, center - half)
    hi = 1.0 if k == n else min(1.0, center + half)
    return lo, hi


def _wilson_arrays(k: np.ndarray, n: int, z: float) -> tuple[np.ndarray, np.ndarray]:
    k = k.astype(float)
    denom = n + z * z
    center = (k + z * z / 2.0) / denom
    half = z * np.sqrt(k * (n - k) / n + z * z / 4.0) / denom
    lo = np.where(k == 0, 0.0, np.maximum(0.0, center - half))
    hi = np.where(k == n, 1.0, np.minimum(1.0, center + half))
    return lo, hi


def genuine_impostor(records: Sequence[ScoreRecord],
                     labels: Mapping[str, int],
                     demographics: Mapping[str, object]) -> tuple[np.ndarray, np.ndarray]:
    """Raw genuine and impostor score multisets under one labelling.

    Genuine: same-query pairs with both faces labelled 1.  Impostor:
    cross-query pairs in the same demographic group with both faces
    labelled 1.  Pairs with a missing or failed score, a label other
    than 1, or mismatched demographics are left out.
    """
    genuine: list[float] = []
    impostor: list[float] = []
    for r in records:
        if r.disposition != "ok" or r.raw is None:
            continue
        if labels.get(r.face_i) != 1 or labels.get(r.face_j) != 1:
            continue
        if r.kind == "same":
            genuine.append(r.raw)
        elif demographics.get(r.face_i) == demographics.get(r.face_j):
            impostor.append(r.raw)
    return np.asarray(genuine, dtype=float), np.asarray(impostor, dtype=float)


@dataclass(frozen=True)
class EvalSets:
    """Genuine/impostor score multisets under both labellings."""

    genuine_annotated: np.ndarray
    impostor_annotated: np.ndarray
    genuine_estimated: np.ndarray
    impostor_estimated: np.ndarray

    def genuine(self, which: str) -> np.ndarray:
        return {"annotated": self.genuine_annotated,
                "estimated": self.genuine_estimated}[which]

    def impostor(self, which: str) -> np.ndarray:
        return {"annotated": self.impostor_annotated,
                "estimated": self.impostor_estimated}[which]


def build_eval_sets(records: Sequence[ScoreRecord],
                    annotated: Mapping[str, int],
                    estimated: Mapping[str, int],
                    demographics: Mapping[str, object]) -> EvalSets:
    """Build all four score multisets; every set must be non-empty."""
    g_ann, i_ann = genuine_impostor(records, annotated, demographics)
    g_est, i_est = genuine_impostor(records, estimated, demographics)
    for name, values in (("annotated genuine", g_ann), ("annotated impostor", i_ann),
                         ("estimated genuine", g_est), ("estimated impostor", i_est)):
        if values.size == 0:
            raise EmptyEvalSetError(f"{name} set is empty; no curve computable")
    return EvalSets(genuine_annotated=g_ann, impostor_annotated=i_ann,
                    genuine_estimated=g_est, impostor_estimated=i_est)


@dataclass(frozen=True)
class EvalCurve:
    """FMR/FNMR over all distinct thresholds, with Wilson bounds."""

    thresholds: np.ndarray
    fmr: np.ndarray
    fnmr: np.ndarray
    fmr_lo: np.ndarray
    fmr_hi: np.ndarray
    fnmr_lo: np.ndarray
    fnmr_hi: np.ndarray
    n_genuine: int
    n_impostor: int

    def __post_init__(self):
        t = self.thresholds
        if t.size < 2 or np.any(np.diff(t) <= 0):
            raise ValidationError("thresholds must be strictly increasing")
        if np.any(np.diff(self.fmr) > 0):
            raise ValidationError("FMR must be non-increasing in the threshold")
        if np.any(np.diff(self.fnmr) < 0):
            raise ValidationError("FNMR must be non-decreasing in the threshold")
        for arr in (self.fmr, self.fnmr, self.fmr_lo, self.fmr_hi,
                    self.fnmr_lo, self.fnmr_hi):
            if arr.shape != t.shape:
                raise ValidationError("curve arrays must share one length")
            if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
                raise ValidationError("rates must lie in [0, 1]")


def curve_from_scores(genuine: np.ndarray, impostor: np.ndarray,
                      confidence: float = 0.95) -> EvalCurve:
    """Compute the FMR/FNMR trade-off over every distinct score.

    FMR(t) is the fraction of impostor scores >= t, FNMR(t) the fraction
    of genuine scores < t.  Thresholds are the sorted distinct scores of
    both sets plus one sentinel on each side, so the curve always spans
    FMR 1/FNMR 0 down to FMR 0/FNMR 1.
    """
    g = np.sort(np.asarray(genuine, dtype=float))
    im = np.sort(np.asarray(impostor, dtype=float))
    if g.size == 0:
        raise EmptyEvalSetError("genuine set is empty; no curve computable")
    if im.size == 0:
        raise EmptyEvalSetError("impostor set is empty; no curve computable")

    distinct = np.unique(np.concatenate([g, im]))
    thresholds = np.concatenate([[distinct[0] - 1.0], distinct,
                                 [distinct[-1] + 1.0]])
    k_fmr = im.size - np.searchsorted(im, thresholds, side="left")
    k_fnmr = np.searchsorted(g, thresholds, side="left")

    z = norm_ppf(1.0 - (1.0 - confidence) / 2.0)
    fmr_lo, fmr_hi = _wilson_arrays(k_fmr, im.size, z)
    fnmr_lo, fnmr_hi = _wilson_arrays(k_fnmr, g.size, z)
    return EvalCurve(
        thresholds=thresholds,
        fmr=k_fmr / im.size,
        fnmr=k_fnmr / g.size,
        fmr_lo=fmr_lo, fmr_hi=fmr_hi,
        fnmr_lo=fnmr_lo, fnmr_hi=fnmr_hi,
        n_genuine=int(g.size), n_impostor=int(im.size),
    )


def fmr_fnmr_curve(sets: EvalSets, which: str,
                   confidence: float = 0.95) -> EvalCurve:
    """Curve for one labelling ("annotated" or "estimated") of the sets."""
    if which not in ("annotated", "estimated"):
        raise ValidationError(f"which must be annotated or estimated, got {which!r}")
    return curve_from_scores(sets.genuine(which), sets.impostor(which),
                             confidence=confidence)


def equal_error_rate(curve: EvalCurve) -> float:
    """Rate where FMR and FNMR cross.

    The difference FMR - FNMR is non-increasing in the threshold and
    spans +1 to -1 thanks to the sentinels, so a sign change always
    exists.  An exact crossing is returned directly; otherwise both
    rates are interpolated linearly between the bracketing thresholds
    and their common value at the crossing is returned.
    """
    d = curve.fmr - curve.fnmr
    idx = int(np.argmax(d <= 0.0))
    if d[idx] == 0.0:
        return float(curve.fmr[idx])
    a, b = idx - 1, idx
    alpha = d[a] / (d[a] - d[b])
    return float(curve.fmr[a] + alpha * (curve.fmr[b] - curve.fmr[a]))


def _fmr_fnmr_profile(curve: EvalCurve) -> tuple[np.ndarray, np.ndarray]:
    # Best achievable FNMR per distinct FMR value, as an increasing-FMR
    # sequence for interpolation.  Scanning thresholds upward, FMR falls
    # and FNMR rises, so the first threshold of each FMR plateau carries
    # that plateau's lowest FNMR.
    fmr_desc: list[float] = []
    fnmr_asc: list[float] = []
    for f, fn in zip(curve.fmr, curve.fnmr):
        if not fmr_desc or f < fmr_desc[-1]:
            fmr_desc.append(float(f))
            fnmr_asc.append(float(fn))
    return np.asarray(fmr_desc[::-1]), np.asarray(fnmr_asc[::-1])


def fnmr_at_fmr(curve: EvalCurve, fmr: float) -> float:
    """FNMR at a given FMR, linearly interpolated between curve points."""
    if not 0.0 <= fmr <= 1.0:
        raise ValidationError(f"fmr must lie in [0, 1], got {fmr}")
    xs, ys = _fmr_fnmr_profile(curve)
    return float(np.interp(fmr, xs, ys))


def curve_discrepancy(a: EvalCurve, b: EvalCurve, *,
                      log10_fmr_lo: float = -4.0, log10_fmr_hi: float = 0.0,
                      points: int = 401) -> float:
    """Area between two curves' FNMR profiles over a log10-FMR window.

    Trapezoidal integral of |FNMR_a - FNMR_b| against log10(FMR) on an
    even grid over [log10_fmr_lo, log10_fmr_hi].  Zero if and only if
    the curves agree across the window; insensitive to behaviour outside
    it.
    """
    grid = np.linspace(log10_fmr_lo, log10_fmr_hi, points)
    targets = 10.0 ** grid
    xa, ya = _fmr_fnmr_profile(a)
    xb, yb = _fmr_fnmr_profile(b)
    fa = np.interp(targets, xa, ya)
    fb = np.interp(targets, xb, yb)
    return float(_trapezoid(np.abs(fa - fb), grid))


@dataclass(frozen=True)
class BiasRow:
    """Per-group error rates for one service."""

    group: str
    eer_estimated: float | None
    eer_annotated: float | None
    eer_estimated_bounds: tuple[float, float] | None
    eer_annotated_bounds: tuple[float, float] | None
    n_genuine: int
    n_impostor: int


def _eer_with_bounds(records: Sequence[ScoreRecord], labels: Mapping[str, int],
                     demographics: Mapping[str, object],
                     confidence: float) -> tuple[float | None,
                                                 tuple[float, float] | None,
                                                 int, int]:
    g, im = genuine_impostor(records, labels, demographics)
    if g.size == 0 or im.size == 0:
        return None, None, int(g.size), int(im.size)
    curve = curve_from_scores(g, im, confidence=confidence)
    eer = equal_error_rate(curve)
    # Wilson bounds at the operating point, taking the wider envelope of
    # the false-match side (n = impostors) and false-non-match side
    # (n = genuines) so the reported interval is conservative.
    lo_f, hi_f = wilson_interval(round(eer * im.size), im.size, confidence)
    lo_n, hi_n = wilson_interval(round(eer * g.size), g.size, confidence)
    return eer, (min(lo_f, lo_n), max(hi_f, hi_n)), int(g.size), int(im.size)


def disaggregate_bias(records: Sequence[ScoreRecord],
                      annotated: Mapping[str, int],
                      estimated: Mapping[str, int],
                      demographics: Mapping[str, object],
                      confidence: float = 0.95) -> dict[str, BiasRow]:
    """Per-demographic-group EER under both labellings for one service.

    A group whose genuine or impostor set is empty is still reported,
    with missing rates, rather than dropped: silently losing a group is
    exactly the failure mode a bias table exists to expose.
    """
    groups = sorted({str(demographics[f]) for f in demographics}, key=str)
    out: dict[str, BiasRow] = {}
    for group in groups:
        in_group = {f for f, g in demographics.items() if str(g) == group}
        group_records = [r for r in records
                         if r.face_i in in_group and r.face_j in in_group]
        eer_est, bounds_est, n_g, n_i = _eer_with_bounds(
            group_records, estimated, demographics, confidence)
        eer_ann, bounds_ann, _, _ = _eer_with_bounds(
            group_records, annotated, demographics, confidence)
        out[group] = BiasRow(group=group,
                             eer_estimated=eer_est, eer_annotated=eer_ann,
                             eer_estimated_bounds=bounds_est,
                             eer_annotated_bounds=bounds_ann,
                             n_genuine=n_g, n_impostor=n_i)
    return out


@dataclass(frozen=True)
class ConfusionMatrix3:
    """3x3 annotated-vs-estimated label counts plus precondition exclusions."""

    counts: Mapping[tuple[int, int], int]  # (annotated, estimated) -> count
    n_excluded: int

    LABELS = (1, 0, -1)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def cell(self, annotated: int, estimated: int) -> int:
        return self.counts.get((annotated, estimated), 0)


def confusion_matrix(annotated: Mapping[str, int],
                     estimated: Mapping[str, int],
                     crawled_count: int) -> ConfusionMatrix3:
    """Cross-tabulate labels over faces present in both labellings.

    Faces outside either mapping (typically queries that failed the
    minimum-requirements preconditions) make up n_excluded, so the cell
    total plus n_excluded always equals the crawled face count.
    """
    counts: dict[tuple[int, int], int] = {}
    shared = set(annotated) & set(estimated)
    for face in shared:
        y, est = annotated[face], estimated[face]
        if y not in (-1, 0, 1) or est not in (-1, 0, 1):
            raise ValidationError(f"labels for {face!r} must be -1, 0 or 1")
        counts[(y, est)] = counts.get((y, est), 0) + 1
    if crawled_count < len(shared):
        raise ValidationError(
            f"crawled count {crawled_count} below labelled count {len(shared)}")
    return ConfusionMatrix3(counts=counts,
                            n_excluded=crawled_count - len(shared))


def agreement_rate(cm: ConfusionMatrix3) -> float:
    """Fraction of mutually included faces (labels in {0, 1}) that agree."""
    included = sum(cm.cell(y, est) for y in (0, 1) for est in (0, 1))
    if included == 0:
        raise ValidationError("no mutually included faces")
    return (cm.cell(1, 1) + cm.cell(0, 0)) / included


def achievable_curve(records: Sequence[ScoreRecord],
                     annotated: Mapping[str, int],
                     estimated: Mapping[str, int],
                     demographics: Mapping[str, object],
                     confidence: float = 0.95) -> EvalCurve:
    """Annotated-label curve restricted to faces the estimate kept.

    Uses annotated labels but excludes every face the estimate labelled
    -1.  Distance from this curve to the annotated curve is error due to
    exclusion alone; distance from the estimated curve to this one is
    error due to label misassignment alone.
    """
    restricted = {f: (annotated[f] if estimated.get(f, -1) != -1 else -1)
                  for f in annotated}
    g, im = genuine_impostor(records, restricted, demographics)
    return curve_from_scores(g, im, confidence=confidence)


@dataclass(frozen=True)
class AblationRow:
    service: str
    no_vote_discrepancy: float   # one service estimating alone
    voted_discrepancy: float     # consolidated labels, same service's scores


def majority_vote_ablation(per_service_labels: Mapping[str, Mapping[str, int]],
                           consolidated: Mapping[str, int],
                           records_by_service: Mapping[str, Sequence[ScoreRecord]],
                           annotated: Mapping[str, int],
                           demographics: Mapping[str, object],
                           confidence: float = 0.95) -> dict[str, AblationRow]:
    """How much the cross-service vote helps each service's evaluation.

    For every service, compares the curve discrepancy (estimated versus
    annotated labels, on that service's raw scores) between labels the
    service would estimate alone and the consolidated labels.  A
    labelling that yields no usable pairs at all scores an infinite
    discrepancy.
    """
    out: dict[str, AblationRow] = {}
    for service in sorted(records_by_service):
        records = records_by_service[service]
        ann_curve = curve_from_scores(
            *genuine_impostor(records, annotated, demographics),
            confidence=confidence)

        def discrepancy(labels: Mapping[str, int]) -> float:
            g, im = genuine_impostor(records, labels, demographics)
            if g.size == 0 or im.size == 0:
                return math.inf
            return curve_discrepancy(
                curve_from_scores(g, im, confidence=confidence), ann_curve)

        out[service] = AblationRow(
            service=service,
            no_vote_discrepancy=discrepancy(per_service_labels[service]),
            voted_discrepancy=discrepancy(consolidated),
        )
    return out


def service_composition_sweep(
        results: Mapping[str, Mapping[str, SpectralResult | None]],
        face_ids_by_query: Mapping[str, Sequence[str]],
        crawled: Mapping[str, int],
        records_by_service: Mapping[str, Sequence[ScoreRecord]],
        annotated: Mapping[str, int],
        demographics: Mapping[str, object],
        thresholds: Thresholds = Thresholds(),
        fmr_targets: Sequence[float] = (0.01, 0.001),
        min_subset: int = 3,
        confidence: float = 0.95) -> dict[str, dict[str, dict[float, float | None]]]:
    """Re-consolidate over every service subset and measure the effect.

    For each subset of at least min_subset services, labels are rebuilt
    by majority vote over just that subset, and for each member service
    the absolute FNMR gap between the estimated and annotated curves is
    reported at the target FMRs.  None marks a subset/service whose
    estimated sets came out empty.
    """
    services = sorted(records_by_service)
    ann_profiles: dict[str, EvalCurve] = {}
    for service in services:
        g, im = genuine_impostor(records_by_service[service], annotated,
                                 demographics)
        ann_profiles[service] = curve_from_scores(g, im, confidence=confidence)

    out: dict[str, dict[str, dict[float, float | None]]] = {}
    for size in range(min_subset, len(services) + 1):
        for subset in combinations(services, size):
            parts = []
            for query in sorted(face_ids_by_query):
                subset_results = {s: (results.get(query) or {}).get(s)
                                  for s in subset}
                parts.append(consolidate(query, face_ids_by_query[query],
                                         subset_results, crawled.get(query, 0),
                                         thresholds))
            labels = LabelEstimate.merge(parts).labels

            key = "+".join(subset)
            out[key] = {}
            for service in subset:
                g, im = genuine_impostor(records_by_service[service], labels,
                                         demographics)
                row: dict[float, float | None] = {}
                if g.size == 0 or im.size == 0:
                    row = {t: None for t in fmr_targets}
                else:
                    est_curve = curve_from_scores(g, im, confidence=confidence)
                    for t in fmr_targets:
                        row[t] = abs(fnmr_at_fmr(est_curve, t)
                                     - fnmr_at_fmr(ann_profiles[service], t))
                out[key][service] = row
    return out


def write_curves_csv(path: str | Path,
                     curves: Sequence[tuple[str, str, str, EvalCurve]]) -> None:
    """Dump curves (rows: which,service,group,threshold,fmr,fnmr,bounds)."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CURVES_HEADER)
        for which, service, group, curve in curves:
            for i in range(curve.thresholds.size):
                writer.writerow([
                    which, service, group,
                    repr(float(curve.thresholds[i])),
                    repr(float(curve.fmr[i])), repr(float(curve.fnmr[i])),
                    repr(float(curve.fmr_lo[i])), repr(float(curve.fmr_hi[i])),
                    repr(float(curve.fnmr_lo[i])), repr(float(curve.fnmr_hi[i])),
                ])


def write_bias_csv(path: str | Path,
                   tables: Mapping[str, Mapping[str, BiasRow]]) -> None:
    """Dump bias rows (columns service,group,eer_est,eer_ann,n_genuine,n_impostor)."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(BIAS_HEADER)
        for service in sorted(tables):
            for group in sorted(tables[service]):
                row = tables[service][group]
                writer.writerow([
                    service, group,
                    "" if row.eer_estimated is None else repr(row.eer_estimated),
                    "" if row.eer_annotated is None else repr(row.eer_annotated),
                    row.n_genuine, row.n_impostor,
                ])
