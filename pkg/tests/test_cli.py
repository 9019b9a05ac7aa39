import json

import pytest

from ristcorr.checkpoint import save_checkpoint
from ristcorr.cli import EXIT_CONFIG, EXIT_DATA, EXIT_GATE, EXIT_NUMERIC, EXIT_OK, main
from ristcorr.config import ModelConfig
from ristcorr.model import build_model


@pytest.fixture
def dataset(tmp_path):
    out = tmp_path / "data"
    assert main(["gen-synthetic", "--instances", "4", "--pairs", "2", "--points", "48", "--out", str(out)]) == EXIT_OK
    return out


@pytest.fixture
def trained(tmp_path, dataset):
    run = tmp_path / "run"
    code = main(["train", "--manifest", str(dataset / "train.json"), "--override", "epochs=1",
                 "--override", "iters_per_epoch=2", "--override", "num_points=48", "--out", str(run)])
    assert code == EXIT_OK
    return run


def test_gen_synthetic_layout(dataset):
    train = json.loads((dataset / "train.json").read_text())
    test = json.loads((dataset / "test.json").read_text())
    assert train["category"] == "dumbbell" and len(train["pairs"]) == 4
    assert len(test["pairs"]) == 2
    assert (dataset / "shapes" / "test_0000_src.kp").exists()


def test_train_outputs_and_echo(trained):
    assert (trained / "metrics.csv").exists() and (trained / "checkpoint.rist").exists()
    assert "train.iters_per_epoch=2" in (trained / "config.txt").read_text().splitlines()


def test_override_is_echoed(tmp_path, dataset, capsys):
    main(["train", "--manifest", str(dataset / "train.json"), "--override", "lr=1e-3",
          "--override", "epochs=0", "--out", str(tmp_path / "r")])
    assert "train.lr=0.001" in capsys.readouterr().err


def test_train_deterministic(tmp_path, dataset):
    args = ["train", "--manifest", str(dataset / "train.json"), "--override", "epochs=1",
            "--override", "iters_per_epoch=2", "--override", "num_points=48", "--seed", "4"]
    main(args + ["--out", str(tmp_path / "a")])
    main(args + ["--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_missing_manifest_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert main(["train", "--manifest", str(missing), "--out", str(tmp_path)]) == EXIT_DATA
    assert str(missing) in capsys.readouterr().err


def test_unknown_override_key(tmp_path, dataset, capsys):
    code = main(["train", "--manifest", str(dataset / "train.json"), "--override", "train.learning_rate=1",
                 "--out", str(tmp_path)])
    assert code == EXIT_CONFIG
    assert "learning_rate" in capsys.readouterr().err


def test_config_file(tmp_path, dataset):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# demo\ntrain.epochs=1\ntrain.iters_per_epoch=1\ndata.manifest={dataset / 'train.json'}\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == EXIT_OK
    assert "train.epochs=1" in (tmp_path / "r" / "config.txt").read_text()


def test_infer(tmp_path, dataset, trained):
    src, tgt = dataset / "shapes" / "test_0000_src.xyz", dataset / "shapes" / "test_0000_tgt.xyz"
    out = tmp_path / "inf"
    code = main(["infer", "--checkpoint", str(trained / "checkpoint.rist"), "--source", str(src),
                 "--target", str(tgt), "--matcher", "lst", "--out", str(out)])
    assert code == EXIT_OK
    lines = (out / "correspondence.csv").read_text().splitlines()
    assert "matcher=lst" in lines[0] and len(lines) == 2 + 48
    code = main(["infer", "--checkpoint", str(trained / "checkpoint.rist"), "--source", str(src),
                 "--target", str(tgt), "--out", str(out)])
    assert code == EXIT_OK and (out / "reconstruction.xyz").exists()


def test_infer_missing_checkpoint(tmp_path, dataset):
    src = dataset / "shapes" / "test_0000_src.xyz"
    code = main(["infer", "--checkpoint", str(tmp_path / "none.rist"), "--source", str(src),
                 "--target", str(src), "--out", str(tmp_path)])
    assert code == EXIT_CONFIG


def test_eval(tmp_path, dataset, trained):
    out = tmp_path / "ev"
    code = main(["eval", "--checkpoint", str(trained / "checkpoint.rist"), "--manifest",
                 str(dataset / "test.json"), "--protocol", "aligned", "--out", str(out)])
    assert code == EXIT_OK
    doc = json.loads((out / "report.json").read_text())
    assert doc["protocol"] == "aligned" and len(doc["pairs"]) == 2
    assert (out / "pck.csv").read_text().startswith("tau,pck\n")


def test_check_equivariance_random_model(capsys):
    assert main(["check-equivariance", "--trials", "100"]) == EXIT_OK
    assert "all gates passed" in capsys.readouterr().out


def test_check_equivariance_checkpoint(tmp_path):
    path = save_checkpoint(tmp_path / "c.rist", build_model(ModelConfig.preset("test", dtype="float32")))
    assert main(["check-equivariance", "--trials", "10", "--checkpoint", str(path)]) == EXIT_OK


def test_check_equivariance_fault(capsys):
    assert main(["check-equivariance", "--trials", "3", "--inject-fault", "decoder.blocks.0"]) == EXIT_GATE
    out = capsys.readouterr()
    assert "first non-equivariant layer: decoder.blocks.0 " in out.out
    assert "decoder.blocks.0" in out.err


def test_check_equivariance_bad_args():
    assert main(["check-equivariance", "--trials", "0"]) == EXIT_CONFIG
    assert main(["check-equivariance", "--trials", "1", "--inject-fault", "nowhere"]) == EXIT_CONFIG


def test_numerical_failure_exit(tmp_path, dataset, monkeypatch):
    from ristcorr import training
    from ristcorr.errors import NumericalFailure

    def boom(*args, **kwargs):
        raise NumericalFailure("L_SR_EMD")

    monkeypatch.setattr(training, "compute_loss", boom)
    code = main(["train", "--manifest", str(dataset / "train.json"), "--override", "epochs=1",
                 "--out", str(tmp_path / "r")])
    assert code == EXIT_NUMERIC


def test_num_workers_env(tmp_path, dataset, monkeypatch):
    monkeypatch.setenv("RISTCORR_NUM_WORKERS", "-1")
    assert main(["train", "--manifest", str(dataset / "train.json"), "--out", str(tmp_path)]) == EXIT_CONFIG
    monkeypatch.setenv("RISTCORR_NUM_WORKERS", "2")
    assert main(["train", "--manifest", str(dataset / "train.json"), "--override", "epochs=1",
                 "--override", "iters_per_epoch=1", "--out", str(tmp_path / "w")]) == EXIT_OK
