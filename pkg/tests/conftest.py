import re

import numpy as np
import pytest
import torch

from bifit.config import RunConfig

_CRITERION = re.compile(r"test_criterion_(\d+)")


@pytest.fixture(autouse=True)
def _fixed_seed():
    torch.manual_seed(0)
    np.random.seed(0)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per acceptance criterion at the end of the run."""
    rows = {}
    for outcome in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(outcome, []):
            m = _CRITERION.search(getattr(report, "nodeid", ""))
            if m:
                rows[int(m.group(1))] = (outcome, report.nodeid)
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(rows):
        outcome, nodeid = rows[num]
        word = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(
            f"criterion {num:2d}: {word}  ({nodeid.split('::')[-1]})")


def tiny_config(**model_overrides) -> RunConfig:
    """Small-but-complete configuration for fast structural tests."""
    cfg = RunConfig()
    cfg.model.channels = 16
    cfg.model.heads = 2
    cfg.model.enc_layers = 1
    cfg.model.dec_layers = 2
    cfg.model.num_queries = 3
    cfg.model.mask_channels = 4
    cfg.data.frames = 2
    cfg.data.train_clips = 3
    cfg.data.val_clips = 2
    for key, value in model_overrides.items():
        setattr(cfg.model, key, value)
    return cfg.validate()
