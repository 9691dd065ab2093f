import json

import pytest

from diffprobe.commands import run_command

# Tiny backbone used by the command-level tests; the acceptance suite uses
# the full toy configuration instead.
MICRO_TRAIN = {
    "base_channels": 8, "channel_multipliers": [1, 2], "norm_groups": 4, "head_channels": 8,
    "attention_resolutions": [8], "steps": 12, "batch_size": 8, "checkpoint_every": 6,
    "log_every": 4, "dataset_classes": 4, "dataset_per_class": 10,
}
MICRO_DATA = {"dataset_classes": 4, "dataset_per_class": 10}


@pytest.fixture(scope="session")
def micro_run(tmp_path_factory):
    """A finished micro train-diffusion run: (workspace, run_dir, manifest)."""
    ws = tmp_path_factory.mktemp("micro_ws")
    manifest, run_dir = run_command("train-diffusion", dict(MICRO_TRAIN), ws)
    return ws, run_dir, manifest


def write_config(path, data):
    path.write_text(json.dumps(data))
    return path


# ---------------------------------------------------------------- acceptance report

ACCEPTANCE = {}


def record_criterion(number: int, title: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE[number] = (title, passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(
            f"criterion {number}: {'PASS' if passed else 'FAIL'}  {title}"
            + (f"  [{detail}]" if detail else ""))
