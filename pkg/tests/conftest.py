from __future__ import annotations

import re

import numpy as np
import pytest

from sidforge.rq import Codebook, LevelFitStats, RqConfig, RqModel, SidAssignment

_CRITERION_RE = re.compile(r"test_criterion_(\d+)_(\w+)")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion, printed after the run."""
    lines = {}
    for outcome, verdict in (("passed", "PASS"), ("failed", "FAIL"), ("error", "FAIL")):
        for report in terminalreporter.stats.get(outcome, []):
            match = _CRITERION_RE.search(getattr(report, "nodeid", ""))
            if match is None:
                continue
            number = int(match.group(1))
            label = match.group(2).replace("_", " ")
            if verdict == "FAIL" or number not in lines:
                lines[number] = f"criterion {number:2d} {verdict} - {label}"
    if lines:
        terminalreporter.write_sep("-", "acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])


def random_model(rng: np.random.Generator, levels: int, sizes, dim: int) -> RqModel:
    """A hand-built model with random centroids, no fitting involved."""
    sizes = tuple(int(k) for k in sizes)
    codebooks = []
    stats = []
    for level, k in enumerate(sizes, start=1):
        cents = np.asarray(rng.normal(size=(k, dim)), dtype=np.float32)
        cents = np.ascontiguousarray(cents)
        cents.setflags(write=False)
        codebooks.append(Codebook(level=level, centroids=cents))
        stats.append(
            LevelFitStats(level=level, configured_size=k, effective_size=k, mse_trace=(0.0,))
        )
    cfg = RqConfig(levels=levels, codebook_sizes=sizes)
    return RqModel(config=cfg, codebooks=tuple(codebooks), dim=dim, fit_stats=tuple(stats))


def assignment_from_sids(sids: dict, model_hash: str = "test") -> SidAssignment:
    return SidAssignment(sids={k: tuple(v) for k, v in sids.items()}, model_hash=model_hash)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
