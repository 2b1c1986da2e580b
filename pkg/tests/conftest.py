import pytest

from dsinfer.data import TaskConfig
from dsinfer.embeddings import EmbeddingConfig
from dsinfer.experiments import ScenarioConfig, build_scenario
from dsinfer.models import TrainConfig

TINY = ScenarioConfig(
    task=TaskConfig(num_classes=4, signal_dim=4, noise_dim=30, class_sep=1.5),
    n_private=60, n_public=60, n_surrogate=400, n_independent=60, n_eval=200,
    victim_hidden=(24,), student_hidden=(24,), diff_arch_hidden=(16,),
    victim_train=TrainConfig(epochs=30, lr0=0.02),
    embedding=EmbeddingConfig(noise_scale=0.1, repeats_per_family=2, max_steps_blindwalk=20),
    epoch_scale=0.2,
)


@pytest.fixture(scope="session")
def tiny_scenario():
    return build_scenario(TINY)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
