import numpy as np
import pytest

from fas import data as D
from fas import model as M

SMALL_SYNTH = dict(
    samples_per_class=6, aco_frames=(12, 20), sem_frames=(4, 9), d_aco=6, d_sem=10,
    burst_length=4, burst_amplitude=4.0, seed=7,
)


@pytest.fixture
def small_cfg():
    return M.FasConfig(d=8, s=2, k_aco=3, k_sem=3, n_q=2, d_aco_in=6, d_sem_in=10, ffn_expansion=2)


@pytest.fixture
def small_dataset(tmp_path):
    """42 samples of tiny synthetic data on disk (28 train / 14 test)."""
    return D.generate_synthetic(D.SynthSpec(**SMALL_SYNTH), tmp_path / "ds")


def write_pair(root, sid, aco, sem):
    D.write_feature_file(root / f"{sid}.aco.fasf", D.FeatureSequence("acoustic", np.asarray(aco, np.float32)))
    D.write_feature_file(root / f"{sid}.sem.fasf", D.FeatureSequence("semantic", np.asarray(sem, np.float32)))
    return {"id": sid, "aco": f"{sid}.aco.fasf", "sem": f"{sid}.sem.fasf"}


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
