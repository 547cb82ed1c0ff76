import pytest

from gcsmoe import pipeline as pl
from gcsmoe.cli import OUT_ENV, main

CONFIG = """\
[data]
num_classes = 8
feature_dim = 4
head_count = 40
imbalance_ratio = 4
confusable_plan = 0:1:0.8, 2:3:0.8
seed = 1
test_per_class = 10

[pipeline]
M = 2
S = 1
feature_dim = 8
expert_hidden = 16
baseline_hidden = 16
fam_hidden = 16

[baseline]
epochs = 5

[expert]
epochs = 5

[fam]
epochs = 5

[head]
epochs = 5
"""

STAGES = ["train-baseline", "deps", "partition", "train-experts", "train-fam", "train-head", "eval"]


@pytest.fixture
def conf(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(CONFIG)
    return path


def test_stagewise_matches_run_all(tmp_path, conf, capsys):
    staged = tmp_path / "staged"
    assert main(["gen", "--config", str(conf), "--out", str(staged)]) == 0
    for cmd in STAGES:
        assert main([cmd, "--out", str(staged), "--no-figures"]) == 0, cmd
    assert main(["run-all", "--config", str(conf), "--out", str(tmp_path / "all"), "--no-figures"]) == 0
    out = capsys.readouterr().out
    assert "eval: mAP" in out and "run-all: mAP" in out
    for name in (pl.FILES["metrics"], pl.FILES["partition"], pl.FILES["head"]):
        assert (staged / name).read_bytes() == (tmp_path / "all" / name).read_bytes()


def test_figures_written(tmp_path, conf):
    out = tmp_path / "figs"
    assert main(["run-all", "--config", str(conf), "--out", str(out)]) == 0
    for name in ("pr_curves.png", "ap_vs_count.png"):
        assert (out / name).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_random_partition_repeatable(tmp_path, conf):
    out = tmp_path / "r"
    assert main(["gen", "--config", str(conf), "--out", str(out)]) == 0
    assert main(["train-baseline", "--out", str(out)]) == 0
    assert main(["deps", "--out", str(out)]) == 0
    texts = []
    for _ in range(2):
        assert main(["partition", "--out", str(out), "--mode", "random", "--seed", "7"]) == 0
        texts.append((out / pl.FILES["partition"]).read_text())
    assert texts[0] == texts[1]


def test_deps_needs_four_classes(tmp_path, conf, capsys):
    small = tmp_path / "small.ini"
    small.write_text(CONFIG.replace("num_classes = 8", "num_classes = 3").replace(", 2:3:0.8", ""))
    out = tmp_path / "s"
    assert main(["gen", "--config", str(small), "--out", str(out)]) == 0
    assert main(["train-baseline", "--out", str(out)]) == 0
    assert main(["deps", "--out", str(out)]) == 1
    assert "N >= 4" in capsys.readouterr().err


def test_missing_artifact_named(tmp_path, conf, capsys):
    out = tmp_path / "m"
    assert main(["gen", "--config", str(conf), "--out", str(out)]) == 0
    assert main(["train-experts", "--out", str(out)]) == 1
    assert "partition.txt" in capsys.readouterr().err


def test_missing_M_is_config_error(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text(CONFIG.replace("M = 2\n", ""))
    assert main(["run-all", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert "missing required key 'M'" in capsys.readouterr().err


def test_division_recorded(tmp_path, conf):
    digests = {}
    for division in ("gcs", "random"):
        out = tmp_path / division
        assert main(["run-all", "--config", str(conf), "--out", str(out), "--division", division, "--no-figures"]) == 0
        info = pl.read_manifest(out / pl.FILES["manifest"])
        assert info["meta"]["division"] == [division]
        assert f"config pipeline.division={division}" in (out / pl.FILES["manifest"]).read_text()
        digests[division] = info["stages"]["baseline"]
    # the baseline does not depend on the division
    assert digests["gcs"] == digests["random"]


def test_env_override_logged(tmp_path, conf, monkeypatch):
    target = tmp_path / "env_dir"
    monkeypatch.setenv(OUT_ENV, str(target))
    assert main(["run-all", "--config", str(conf), "--out", str(tmp_path / "ignored"), "--no-figures"]) == 0
    assert not (tmp_path / "ignored").exists()
    assert f"out_dir_override {target}" in (target / pl.FILES["manifest"]).read_text()


def test_no_out_dir(capsys):
    assert main(["deps"]) == 2
    assert OUT_ENV in capsys.readouterr().err


def test_bad_seed_rejected():
    with pytest.raises(SystemExit):
        main(["deps", "--out", "x", "--seed", "-1"])


def test_ablate_grid(tmp_path, conf):
    args = ["ablate", "--config", str(conf), "--seeds", "0,1", "--grid-M", "2,3", "--grid-S", "1,2,3"]
    outs = [tmp_path / "g1", tmp_path / "g2"]
    for out in outs:
        assert main(args + ["--out", str(out)]) == 0
    text = (outs[0] / "ablation.txt").read_text()
    cells = {}
    off = {}
    for line in text.splitlines():
        parts = line.split()
        if parts[0] == "cell":
            cells[(int(parts[1]), int(parts[2]))] = parts[3:]
        elif parts[0] == "cgc_off":
            off[int(parts[1])] = parts[2:]
    # S above M is skipped
    assert sorted(cells) == [(2, 1), (2, 2), (3, 1), (3, 2), (3, 3)]
    assert len(cells[(2, 1)]) == 3  # mean plus two seeds
    # all experts kept equals plain concatenation
    assert off[2] == cells[(2, 2)] and off[3] == cells[(3, 3)]
    for name in ("ablation.txt", "ablation.png"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
