"""Benchmark 1:1 face verification services without hand-labelled identities.

The package estimates per-image identity labels directly from the pairwise
confidence scores a service returns, consolidates estimates across services
by majority vote, and computes FMR/FNMR curves, equal error rates and
demographic breakdowns from the same scores.  A deterministic service
simulator provides ground truth for validating every step.
"""

from __future__ import annotations

__version__ = "0.1.0"
