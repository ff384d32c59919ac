import os
import sys
from dataclasses import replace

import pytest

from r2ive.estimator import ALL_TAGS
from r2ive.simulation import SimConfig, preset, run_monte_carlo, summarize

MC_SEED = 20240601
MC_WORKERS = int(os.environ.get("R2IVE_TEST_WORKERS", "0")) or None

_RUNS = {}


def _full(key, cfg: SimConfig):
    if key not in _RUNS:
        _RUNS[key] = run_monte_carlo(cfg, ALL_TAGS, workers=MC_WORKERS)
    return _RUNS[key]


def monte_carlo(name_or_cfg, R: int):
    """Report over replications ``0..R-1``.

    Each design is simulated once per session at R = 500; smaller R reuse the
    leading replications, which are identical because streams depend only on
    (seed, replication).
    """
    base = preset(name_or_cfg) if isinstance(name_or_cfg, str) else name_or_cfg
    cfg = replace(base, seed=MC_SEED, R=max(R, 500))
    full = _full(cfg, cfg)
    if R == cfg.R:
        return full
    records = [r for r in full.records if r["rep"] < R]
    return summarize(replace(cfg, R=R), records, full.estimators)


@pytest.fixture(scope="session")
def mc():
    return monte_carlo


@pytest.fixture
def say(capsys):
    """Print straight to the terminal, bypassing capture."""

    def _say(line):
        with capsys.disabled():
            sys.stdout.write(line + "\n")
            sys.stdout.flush()

    return _say
