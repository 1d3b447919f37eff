import sys
import time
from dataclasses import dataclass
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from freqlens import cli  # noqa: E402
from freqlens.config import load_config  # noqa: E402
from freqlens.models import load_checkpoint  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]
DESK_CONFIG = ROOT / "configs" / "desk.json"


@dataclass
class DeskRun:
    out: Path
    config: object
    std_ckpt: Path
    adv_ckpt: Path
    seconds: float

    @property
    def std(self):
        return load_checkpoint(self.std_ckpt)

    @property
    def adv(self):
        return load_checkpoint(self.adv_ckpt)

    def test_set(self):
        return cli.load_data(self.config, "test").subset(self.config.subset)


def run_desk_pipeline(out: Path) -> DeskRun:
    """Train STD and ADV, then run every sweep and the spectrum report."""
    base = ["--config", str(DESK_CONFIG), "--out", str(out)]
    std = out / "tiny_convnet_standard.ckpt"
    adv = out / "tiny_convnet_adversarial.ckpt"
    steps = [
        ["train", *base, "--mode", "standard"],
        ["train", *base, "--mode", "adversarial"],
        ["sweep", *base, "--checkpoint", str(std), "--kind", "filter"],
        ["sweep", *base, "--checkpoint", str(std), "--kind", "merge"],
        ["sweep", *base, "--checkpoint", str(adv), "--kind", "filter"],
        ["sweep", *base, "--checkpoint", str(adv), "--kind", "merge"],
        ["spectrum", *base, "--ckpt-std", str(std), "--ckpt-adv", str(adv)],
    ]
    start = time.perf_counter()
    for argv in steps:
        code = cli.main(argv)
        assert code == 0, f"freqlens {' '.join(argv)} exited {code}"
    return DeskRun(out, load_config(DESK_CONFIG), std, adv, time.perf_counter() - start)


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    return run_desk_pipeline(tmp_path_factory.mktemp("desk"))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
