import numpy as np

from scenediff.plotting import plot_many, plot_scenario


def _fake_rollouts(s, M=3):
    gt = np.stack([a.states[s.T_h :] for a in s.predicted_agents])
    traj = np.repeat(gt[:, None], M, axis=1) + np.arange(M)[None, :, None, None] * [0.5, 0.0, 0.0, 0.0]
    return traj, np.full((s.num_predicted, M), 1.0 / M)


def test_svg_is_written_and_stable(small_corpus, tmp_path):
    s = small_corpus[0]
    a = plot_scenario(s, _fake_rollouts(s), tmp_path / "a.svg")
    b = plot_scenario(s, _fake_rollouts(s), tmp_path / "b.svg")
    text = a.read_text()
    assert text.lstrip().startswith("<?xml") and "<svg" in text
    assert a.read_bytes() == b.read_bytes()


def test_plot_many_limit_and_history_only(small_corpus, tmp_path):
    paths = plot_many([s.history() for s in small_corpus[:3]], None, tmp_path, limit=2)
    assert len(paths) == 2 and all(p.exists() for p in paths)
