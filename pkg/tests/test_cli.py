import csv
import hashlib
import json

import pytest

from scenediff.cli import ABLATION_AXES, main

TINY = """\
epochs = 1
batch_size = 4
model_dim = 16
heads = 2
n_modes = 2
n_dit_blocks = 1
n_other_agent_blocks = 1
n_map_blocks = 1
n_light_blocks = 1
diffusion_steps = 5
"""


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.cfg").write_text("seed = 5\nn_scenarios = 10\n")
    (root / "train.cfg").write_text(TINY)
    assert main(["gen-data", "--spec", str(root / "spec.cfg"), "--out", str(root / "corpus.ndjson")]) == 0
    code = main(["train", "--config", str(root / "train.cfg"), "--data", str(root / "corpus.ndjson"),
                 "--out-dir", str(root / "run")])
    assert code == 0
    return root


def test_gen_data_then_train(pipeline):
    run = pipeline / "run"
    assert (run / "last.ckpt").exists() and (run / "best.ckpt").exists()
    with open(run / "metrics.csv") as fh:
        header = next(csv.reader(fh))
    assert header == ["epoch", "step", "l_diff", "l_reg", "l_cls", "l_total", "lr", "val_ade"]
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["command"] == "train"
    assert manifest["version"].startswith("v")
    assert len(manifest["config_hash"]) > 0


def test_sample_twice_is_identical(pipeline):
    outs = []
    for i in range(2):
        out = pipeline / f"roll{i}.ndjson"
        assert main(["sample", "--ckpt", str(pipeline / "run" / "best.ckpt"), "--data", str(pipeline / "corpus.ndjson"),
                     "--seed", "7", "--out", str(out), "--out-dir", str(pipeline / f"sample{i}")]) == 0
        outs.append(sha(out))
    assert outs[0] == outs[1]


def test_eval_and_plot(pipeline):
    ev = pipeline / "eval"
    assert main(["eval", "--ckpt", str(pipeline / "run" / "last.ckpt"), "--data", str(pipeline / "corpus.ndjson"),
                 "--n-samples", "2", "--out-dir", str(ev)]) == 0
    agg = json.loads((ev / "report.json").read_text())["aggregate"]
    assert agg["min_ade"] <= agg["ade"]
    roll = pipeline / "roll0.ndjson"
    if not roll.exists():
        main(["sample", "--ckpt", str(pipeline / "run" / "best.ckpt"), "--data", str(pipeline / "corpus.ndjson"),
              "--out", str(roll), "--out-dir", str(pipeline / "sample0")])
    plots = pipeline / "plots"
    assert main(["plot", "--data", str(pipeline / "corpus.ndjson"), "--rollouts", str(roll), "--limit", "2",
                 "--out-dir", str(plots)]) == 0
    assert len(list(plots.glob("*.svg"))) == 2


def test_ablate_diffusion_rows(pipeline):
    out = pipeline / "ablate"
    assert main(["ablate", "--axis", "diffusion", "--config", str(pipeline / "train.cfg"),
                 "--data", str(pipeline / "corpus.ndjson"), "--out-dir", str(out)]) == 0
    with open(out / "ablation_diffusion.csv") as fh:
        arms = [r["arm"] for r in csv.DictReader(fh)]
    assert arms == ["random-noise", "unet-like-mlp", "dit"]
    assert [a for a, _ in ABLATION_AXES["diffusion"]] == arms
    assert "| dit |" in (out / "ablation_diffusion.md").read_text()


def test_exit_codes(tmp_path, capsys):
    missing = tmp_path / "nope.ndjson"
    assert main(["train", "--data", str(missing), "--out-dir", str(tmp_path)]) == 1
    assert str(missing) in capsys.readouterr().err
    assert main(["train", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err.lower()
    (tmp_path / "bad.cfg").write_text("not_a_field = 3\n")
    assert main(["gen-data", "--spec", str(tmp_path / "bad.cfg"), "--out", str(tmp_path / "x.ndjson")]) == 1
