"""Coverage contract between the documented operations and the test suite.

``docs/equation_ledger.csv`` maps every named formula anchor (and the
cooperative training step) to the operation implementing it and a test that
exercises it. ``check_ledger`` fails when an anchor has no row or a row points
at a test that does not exist. Extra tests are allowed.
"""
from __future__ import annotations

import ast
import csv
import subprocess
import sys
from dataclasses import dataclass, field
from pathlib import Path

REQUIRED_ANCHORS = (
    "roi-centroid",
    "centroid-weight",
    "roi-mean",
    "roi-max",
    "cosine-distance",
    "adjacency-scaled-features",
    "head-attention",
    "head-projections",
    "classifier-loss",
    "weighted-cross-entropy",
    "shifted-softmax",
    "penalty-ratio",
    "class-weight-softmax",
    "generator-loss",
    "cooperative-training-step",
)

LEDGER_PATH = Path("docs") / "equation_ledger.csv"


@dataclass
class LedgerReport:
    missing_anchors: list[str] = field(default_factory=list)
    missing_tests: list[tuple[str, str]] = field(default_factory=list)
    failed_tests: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not (self.missing_anchors or self.missing_tests or self.failed_tests)

    def __str__(self) -> str:
        if self.passed:
            return "ledger OK"
        lines = [f"anchor {a!r} has no ledger row" for a in self.missing_anchors]
        lines += [f"anchor {a!r}: test {t} not found" for a, t in self.missing_tests]
        lines += [f"test {t} failed" for t in self.failed_tests]
        return "\n".join(lines)


def read_ledger(root) -> list[dict[str, str]]:
    with open(Path(root) / LEDGER_PATH, newline="") as fh:
        return list(csv.DictReader(fh))


def _test_names(path: Path) -> set[str]:
    tree = ast.parse(path.read_text())
    return {n.name for n in tree.body if isinstance(n, (ast.FunctionDef, ast.AsyncFunctionDef))}


def check_ledger(root, run_tests: bool = False) -> LedgerReport:
    """Check every anchor has a row whose test exists; optionally run those tests."""
    root = Path(root)
    rows = read_ledger(root)
    report = LedgerReport()
    covered = set()
    cache: dict[Path, set[str]] = {}
    node_ids = []
    for row in rows:
        anchor, test = row["anchor"].strip(), row["test"].strip()
        file_part, _, name = test.partition("::")
        path = root / file_part
        if path not in cache:
            cache[path] = _test_names(path) if path.is_file() else set()
        if name.split("[")[0] in cache[path]:
            covered.add(anchor)
            node_ids.append(test)
        else:
            report.missing_tests.append((anchor, test))
    report.missing_anchors = [a for a in REQUIRED_ANCHORS if a not in covered]
    if run_tests and node_ids:
        proc = subprocess.run(
            [sys.executable, "-m", "pytest", "-q", "-rf", "-p", "no:cacheprovider", *sorted(set(node_ids))],
            cwd=root,
            capture_output=True,
            text=True,
        )
        if proc.returncode != 0:
            failed = [ln.split()[1] for ln in proc.stdout.splitlines() if ln.startswith("FAILED ")]
            report.failed_tests = failed or ["<pytest exited with status %d>" % proc.returncode]
    return report
