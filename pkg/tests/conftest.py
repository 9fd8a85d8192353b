import numpy as np
import pytest
import torch

torch.set_num_threads(1)


def make_track(id, xs, ys=None, thetas=None, vs=None, kind="vehicle", width=2.0, height=4.5, valid=None):
    n = len(xs)
    ys = np.zeros(n) if ys is None else ys
    thetas = np.zeros(n) if thetas is None else thetas
    vs = np.zeros(n) if vs is None else vs
    from scenediff.scene import AgentTrack

    return AgentTrack(id, kind, width, height, np.stack([xs, ys, thetas, vs], axis=1), valid)


@pytest.fixture(scope="session")
def small_corpus():
    from scenediff.scenario_io import CorpusSpec, generate_corpus

    return generate_corpus(CorpusSpec(seed=3, n_scenarios=12))


@pytest.fixture
def tiny_train_config():
    from scenediff.training import TrainConfig

    return TrainConfig(
        epochs=2,
        batch_size=4,
        model_dim=16,
        heads=2,
        n_modes=2,
        n_dit_blocks=1,
        n_other_agent_blocks=1,
        n_map_blocks=1,
        n_light_blocks=1,
        diffusion_steps=10,
        seed=0,
    )


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
