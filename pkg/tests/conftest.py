import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dlif.config import TrainConfig  # noqa: E402
from dlif.synthdata import DatasetSpec, generate_dataset  # noqa: E402

TINY_TRAIN = dict(epochs=2, steps_per_epoch=2, input_size=16, stage_channels=[4, 8, 8], batch_ids_per_domain=2,
                  batch_live_per_id=2, batch_spoof_per_id=2, calib_size=24, tau=0.5, lr=2e-3)


def tiny_config(**kw):
    return TrainConfig(**{**TINY_TRAIN, **kw})


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    generate_dataset(DatasetSpec(n_domains=2, ids_per_domain=4, samples_per_id_per_liveness=4, image_size=16,
                                 seed=11), root / "src")
    generate_dataset(DatasetSpec(n_domains=1, ids_per_domain=3, samples_per_id_per_liveness=4, image_size=16,
                                 seed=12, domain_offset=3), root / "tgt")
    return root / "src", root / "tgt"


# criterion number -> (title, passed, detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def record(number: int, title: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (title, passed, detail)
    print(f"criterion {number} {'PASS' if passed else 'FAIL'}: {title} | {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number}. {title}: {detail}")
