"""Traceability between core formulas/procedures and their tests.

docs/traceability.csv maps every load-bearing mechanism (an "anchor") to
the module, operation and test that exercises it. The checker fails when
an anchor is missing from the matrix or points at a test that does not
exist in the collected registry, which keeps the matrix from drifting as
the suite evolves.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from pathlib import Path

from .errors import MissingArtifactError

# one row required per mechanism; names describe what the code computes
REQUIRED_ANCHORS = (
    "continuous-change-oracle",
    "blend-synthesis",
    "recursive-midpoint-procedure",
    "visual-similarity-scores",
    "visual-text-similarity-scores",
    "confidence-score-vector",
    "keyframe-top-k-attach",
    "encoder-input-layout",
    "contextualized-hidden-states",
    "masking-scheme-selection",
    "entire-masking",
    "random-patch-masking",
    "block-masking",
    "token-reconstruction-loss",
    "caption-alignment-loss",
    "temporal-consistency-loss",
    "pretraining-objective-sum",
    "warped-negative-strategies",
    "affine-warp-parameters",
    "query-augmented-input",
    "caption-likelihood-loss",
    "greedy-and-beam-decoding",
    "learning-rate-warmup",
    "attention-cost-closed-form",
    "throughput-vs-query-length",
    "implicit-vs-explicit-path",
    "bleu4-metric",
    "cider-metric",
)


@dataclass
class TraceabilityRow:
    anchor: str
    module: str
    operation: str
    test_id: str


def read_matrix(path: str | Path) -> list[TraceabilityRow]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"traceability matrix missing: {path}")
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            rows.append(TraceabilityRow(rec["anchor"].strip(),
                                        rec["module"].strip(),
                                        rec["operation"].strip(),
                                        rec["test_id"].strip()))
    return rows


def collect_test_registry(tests_dir: str | Path) -> set[str]:
    """All ``file::test_function`` ids found under the tests directory."""
    registry = set()
    pattern = re.compile(r"^def (test_\w+)", re.MULTILINE)
    for path in sorted(Path(tests_dir).glob("test_*.py")):
        for match in pattern.finditer(path.read_text(encoding="utf-8")):
            registry.add(f"{path.name}::{match.group(1)}")
    return registry


def check_traceability(matrix_path: str | Path,
                       test_registry: set[str]) -> list[str]:
    """Problems found; empty list means the matrix is complete and live."""
    rows = read_matrix(matrix_path)
    problems = []
    seen: dict[str, int] = {}
    for row in rows:
        seen[row.anchor] = seen.get(row.anchor, 0) + 1
        if row.test_id not in test_registry:
            problems.append(
                f"anchor {row.anchor!r} references unknown test {row.test_id!r}")
    for anchor in REQUIRED_ANCHORS:
        if anchor not in seen:
            problems.append(f"anchor {anchor!r} has no matrix row")
    for anchor, count in seen.items():
        if count > 1:
            problems.append(f"anchor {anchor!r} appears {count} times")
        if anchor not in REQUIRED_ANCHORS:
            problems.append(f"anchor {anchor!r} is not in the required set")
    return problems
