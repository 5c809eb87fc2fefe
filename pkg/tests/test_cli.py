import json

import pytest

from casnet.cli import apply_overrides, main
from casnet.errors import ConfigError
from casnet.metrics import MetricReport
from casnet.suite import read_runs
from casnet.train import TrainConfig, desk_config

TINY_SET = ["--set", "epochs=2", "--set", "lr_decay_epoch=1", "--set", "batch_size=8",
            "--set", "data.n_samples=20", "--set", "data.height=16", "--set", "data.width=16"]


def test_overrides():
    cfg = apply_overrides(desk_config(), ["epochs=3", "lr_decay_epoch=2", "data.noise=0.1", "ablation=\"ts--\"",
                                          "insertion_mask=[true,false,false,true]"])
    assert cfg.epochs == 3 and cfg.data.noise == 0.1 and cfg.ablation.ts_minus2
    assert cfg.insertion_mask == (True, False, False, True)
    for bad in (["epochs"], ["nope=1"], ["epochs.x=1"]):
        with pytest.raises(ConfigError):
            apply_overrides(desk_config(), bad)


def test_generate_train_export(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["generate", "--out", str(data), "--n", "20", "--height", "16", "--width", "16", "--seed", "3"]) == 0
    assert len(list((data / "images").iterdir())) == 20
    run = tmp_path / "run"
    code = main(["train", "--out", str(run), "--data", str(data), "--run-id", "cas/demo",
                 "--set", "data.height=16", "--set", "data.width=16"] + TINY_SET[:6])
    assert code == 0
    out = capsys.readouterr().out
    assert MetricReport.header() in out and "cas/demo," in out
    for name in ("config.json", "run.json", "checkpoint.npz", "results.csv", "training.png"):
        assert (run / name).stat().st_size > 0
    cfg = TrainConfig.from_file(run / "config.json")
    assert cfg.data.path == str(data) and cfg.epochs == 2
    ((run_id, rep),) = read_runs(run / "results.csv")
    assert run_id == "cas/demo" and 0 <= rep.instance_f1 <= 1

    maps = tmp_path / "maps"
    assert main(["export-maps", "--checkpoint", str(run / "checkpoint.npz"), "--out", str(maps),
                 "--data", str(data), "--height", "16", "--width", "16", "--limit", "2"]) == 0
    assert len(list(maps.glob("*.pgm"))) == 2 * 4 * 2
    assert len(list(maps.glob("*_maps.png"))) == 1


def test_config_file_and_suite(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    apply_overrides(desk_config(), TINY_SET[1::2]).save(cfg)
    out = tmp_path / "suite"
    assert main(["suite", "reduction", "--config", str(cfg), "--out", str(out), "--seeds", "0"]) == 0
    text = capsys.readouterr().out
    assert "r2/seed0," in text and "r32,runs=1,failed=0" in text
    assert len(read_runs(out / "runs.csv")) == 5
    assert (out / "reduction_f1.png").exists()


def test_errors_exit_with_code_2(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path / "x"), "--set", "bogus=1"]) == 2
    assert "unknown field" in capsys.readouterr().err
    assert main(["train", "--out", str(tmp_path / "x"), "--data", str(tmp_path / "missing")] + TINY_SET) == 2
    assert main(["export-maps", "--checkpoint", str(tmp_path / "none.npz"), "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"epochs": 5, "colour": "red"}))
    assert main(["suite", "baselines", "--config", str(bad), "--out", str(tmp_path / "s")]) == 2


def test_export_rejects_network_without_maps(tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--out", str(run), "--set", "sharing_kind=\"none\""] + TINY_SET) == 0
    assert main(["export-maps", "--checkpoint", str(run / "checkpoint.npz"), "--out", str(tmp_path / "m")]) == 2
