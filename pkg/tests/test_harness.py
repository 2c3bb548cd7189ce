import json

import numpy as np
import pytest

from fedguard.errors import ConfigError
from fedguard.harness.cli import main
from fedguard.harness.config import ExperimentConfig, dump_config, parse_config
from fedguard.harness.runner import cmd_attack_bench, cmd_gen_data


class TestConfig:
    def test_defaults_round_trip(self):
        cfg = ExperimentConfig()
        assert parse_config(dump_config(cfg)) == cfg

    def test_parse_values(self):
        cfg = parse_config("seed = 9\nsignal_strength = 0.75\nlr_grid = 0.1,0.01\n")
        assert cfg.seed == 9
        assert cfg.signal_strength == 0.75
        assert cfg.lr_grid == (0.1, 0.01)

    def test_comments_and_blank_lines(self):
        cfg = parse_config("# a comment\n\nseed = 4  # trailing\n")
        assert cfg.seed == 4

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config("definitely_not_a_key = 1\n")

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError, match="bad value"):
            parse_config("seed = banana\n")

    def test_bad_syntax_rejected(self):
        with pytest.raises(ConfigError):
            parse_config("just some words\n")

    def test_validation(self):
        with pytest.raises(ConfigError):
            parse_config("signal_strength = 0.2\n")
        with pytest.raises(ConfigError):
            parse_config("attack_kind = nuke\n")


class TestGenData:
    def test_writes_all_files(self, tmp_path):
        cfg = ExperimentConfig(
            seed=5,
            out_dir=str(tmp_path),
            n_benign=40,
            n_malware=40,
            n_unlabeled=10,
            n_clients=3,
            client_system_apps=6,
            client_user_apps=8,
            server_system_apps=30,
            server_extra_benign=10,
            server_malware=30,
        )
        paths = cmd_gen_data(cfg)
        assert (tmp_path / "corpus.adfp").exists()
        assert (tmp_path / "server.adfp").exists()
        for i in range(3):
            assert (tmp_path / f"client_{i:02d}.adfp").exists()
        assert len(paths) == 5

    def test_same_seed_identical_files(self, tmp_path):
        base = dict(
            seed=6,
            n_benign=30,
            n_malware=30,
            n_unlabeled=8,
            n_clients=2,
            client_system_apps=5,
            client_user_apps=6,
            server_system_apps=20,
            server_extra_benign=8,
            server_malware=20,
        )
        a, b = tmp_path / "a", tmp_path / "b"
        cmd_gen_data(ExperimentConfig(out_dir=str(a), **base))
        cmd_gen_data(ExperimentConfig(out_dir=str(b), **base))
        for name in ("corpus.adfp", "server.adfp", "client_00.adfp", "client_01.adfp"):
            assert (a / name).read_bytes() == (b / name).read_bytes(), name

    def test_client_shards_mix_system_and_user(self, tmp_path):
        from fedguard import fingerprint as fp

        cfg = ExperimentConfig(
            seed=7, out_dir=str(tmp_path), n_clients=1,
            n_benign=20, n_malware=20, n_unlabeled=0,
            client_system_apps=5, client_user_apps=8,
            server_system_apps=20, server_extra_benign=5, server_malware=20,
        )
        cmd_gen_data(cfg)
        shard = fp.load_dataset(tmp_path / "client_00.adfp")
        assert (shard.provenance == fp.Provenance.SYSTEM).sum() == 5
        assert (shard.labels == fp.Label.UNLABELED).sum() == 8
        user = shard.labels == fp.Label.UNLABELED
        assert set(shard.true_labels[user].tolist()) <= {0, 1}


class TestAttackBench:
    def test_statistics(self, tmp_path):
        cfg = ExperimentConfig(seed=8, out_dir=str(tmp_path))
        result = cmd_attack_bench(cfg, draws=50_000)
        assert result["weight_multiplier_mean_over_bound"] < 0.02
        assert abs(result["feature_slice_density"] - 0.5) < 0.01
        assert result["complement_untouched"]
        assert (tmp_path / "attack_bench.json").exists()


class TestCli:
    def test_gen_data_subcommand(self, tmp_path, capsys):
        rc = main(
            [
                "gen-data",
                "--seed", "3",
                "--out-dir", str(tmp_path),
                "--set", "n_benign=20",
                "--set", "n_malware=20",
                "--set", "n_unlabeled=5",
                "--set", "n_clients=1",
                "--set", "client_system_apps=4",
                "--set", "client_user_apps=4",
                "--set", "server_system_apps=10",
                "--set", "server_extra_benign=5",
                "--set", "server_malware=10",
            ]
        )
        assert rc == 0
        out = json.loads(capsys.readouterr().out)
        assert "corpus" in out

    def test_federate_requires_seed(self, capsys):
        rc = main(["federate"])
        assert rc != 0
        err = capsys.readouterr().err
        assert err.startswith("error=E_CONFIG")
        assert err.count("\n") == 1  # single line

    def test_unknown_set_key_is_machine_readable(self, tmp_path, capsys):
        rc = main(["gen-data", "--seed", "1", "--out-dir", str(tmp_path), "--set", "bogus=1"])
        assert rc != 0
        assert capsys.readouterr().err.startswith("error=E_CONFIG")

    def test_missing_dataset_error_code(self, tmp_path, capsys):
        rc = main(["train-zoo", "--seed", "1", "--out-dir", str(tmp_path / "empty")])
        assert rc != 0
        assert capsys.readouterr().err.startswith("error=E_CONFIG")
