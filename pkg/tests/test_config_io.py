import json

import numpy as np
import pytest

from ristcorr.config import ConfigError, ModelConfig, RunConfig, load_run_config
from ristcorr.errors import DataError
from ristcorr.geometry import PointCloud
from ristcorr.io import (
    Manifest,
    PairEntry,
    atomic_open,
    read_keypoints,
    read_manifest,
    read_point_cloud,
    write_manifest,
    write_point_cloud,
)


class TestRunConfig:
    def test_qualified_and_short_keys(self):
        cfg = RunConfig()
        cfg.apply(["train.lr=0.01", "epochs=3", "sr_terms=mse,cd", "rotation_augmentation=false"])
        assert cfg.train.lr == 0.01 and cfg.train.epochs == 3
        assert cfg.train.sr_terms == ("mse", "cd")
        assert cfg.train.rotation_augmentation is False

    def test_unknown_key_named(self):
        with pytest.raises(ConfigError, match="bogus"):
            RunConfig().apply(["train.bogus=1"])

    def test_ambiguous_key(self):
        with pytest.raises(ConfigError, match="ambiguous"):
            RunConfig().apply(["negative_slope=0.1"])

    def test_bad_values(self):
        with pytest.raises(ConfigError):
            RunConfig().apply(["train.lr=-1"])
        with pytest.raises(ConfigError):
            RunConfig().apply(["train.epochs=many"])
        with pytest.raises(ConfigError):
            RunConfig().apply(["no_equals_sign"])

    def test_preset_and_prime_sync(self):
        cfg = RunConfig()
        cfg.apply(["model.preset=full"])
        assert cfg.model.encoder.C == 170 and cfg.model.encoder.k == 20
        cfg.apply(["encoder.C_prime=12"])
        assert cfg.model.decoder.in_channels == 12

    def test_file_with_preset_last(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("encoder.k=6  # comment\n\nmodel.preset=test\n")
        cfg = load_run_config(path, ["train.seed=9"])
        assert cfg.model.encoder.k == 6 and cfg.train.seed == 9

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "none.cfg")

    def test_model_config_round_trip(self):
        cfg = ModelConfig.preset("full", dtype="float32")
        assert ModelConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


class TestFiles:
    def test_point_cloud_round_trip(self, tmp_path, rng):
        c = PointCloud(rng.normal(size=(10, 3)), labels=rng.integers(0, 3, 10))
        write_point_cloud(tmp_path / "c.xyz", c)
        back = read_point_cloud(tmp_path / "c.xyz")
        assert np.array_equal(back.points, c.points) and np.array_equal(back.labels, c.labels)

    @pytest.mark.parametrize("text", ["", "1 2\n", "1 2 x\n", "1 2 3\n1 2 3 0\n"])
    def test_malformed(self, tmp_path, text):
        (tmp_path / "bad.xyz").write_text(text)
        with pytest.raises(DataError):
            read_point_cloud(tmp_path / "bad.xyz")

    def test_missing(self, tmp_path):
        with pytest.raises(DataError, match="nothing.xyz"):
            read_point_cloud(tmp_path / "nothing.xyz")

    def test_keypoints(self, tmp_path):
        (tmp_path / "k.kp").write_text("# id index\n3 0\n5 2\n")
        assert read_keypoints(tmp_path / "k.kp") == [(3, 0), (5, 2)]
        (tmp_path / "c.xyz").write_text("0 0 0\n1 0 0\n")
        with pytest.raises(DataError):
            read_point_cloud(tmp_path / "c.xyz", keypoints_path=tmp_path / "k.kp")

    def test_manifest_relative_paths(self, tmp_path):
        sub = tmp_path / "shapes"
        for name in ("a", "b"):
            write_point_cloud(sub / f"{name}.xyz", PointCloud(np.eye(3)))
        write_manifest(tmp_path / "m.json", Manifest("chair", [PairEntry(sub / "a.xyz", sub / "b.xyz")]))
        doc = json.loads((tmp_path / "m.json").read_text())
        assert doc["pairs"][0]["source"] == "shapes/a.xyz"
        m = read_manifest(tmp_path / "m.json")
        src, tgt = m.load_pair(m.pairs[0])
        assert src.category == "chair" and len(tgt) == 3

    def test_bad_manifest(self, tmp_path):
        (tmp_path / "m.json").write_text("{not json")
        with pytest.raises(DataError):
            read_manifest(tmp_path / "m.json")
        (tmp_path / "m.json").write_text('{"category": "x"}')
        with pytest.raises(DataError):
            read_manifest(tmp_path / "m.json")

    def test_atomic_write_leaves_nothing_on_failure(self, tmp_path):
        target = tmp_path / "out.txt"
        target.write_text("old")
        with pytest.raises(RuntimeError):
            with atomic_open(target) as fh:
                fh.write("partial")
                raise RuntimeError("interrupted")
        assert target.read_text() == "old"
        assert [p.name for p in tmp_path.iterdir()] == ["out.txt"]
