import pytest
import torch

from c2fdft.checkpoint import Checkpoint, model_state, save_checkpoint
from c2fdft.config import config_from_text
from c2fdft.network import DftModel

TINY_CONFIG = """\
model.base_channels = 16
model.blocks_per_level = 1, 1, 1, 1
model.channels_per_level = 16, 32, 64, 128
coarse.total_iters = 20
coarse.lr_start = 0.001
coarse.patch_cycle = 16x4, 32x2
coarse.patch_period = 3
coarse.log_every = 1
coarse.ckpt_every = 10
fine.total_iters = 4
fine.patch_cycle = 16x2
fine.log_every = 1
fine.ckpt_every = 2
"""


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CONFIG)
    return path


@pytest.fixture
def random_checkpoint(tmp_path):
    """Untrained tiny model with a non-zero output conv, saved as a coarse checkpoint."""
    cfg = config_from_text(TINY_CONFIG)
    torch.manual_seed(0)
    model = DftModel(cfg.model)
    torch.nn.init.normal_(model.output.weight, std=0.05)
    path = tmp_path / "random.c2f"
    save_checkpoint(Checkpoint(cfg, "coarse", 0, model_state(model)), path)
    return path


_ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per criterion; printed in the terminal summary."""

    def record(number, ok, detail):
        _ACCEPTANCE[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[number])
