"""Config grammar, validation, CLI commands, output bundles."""

import os

import numpy as np
import pytest

from streamcl.cli import main
from streamcl.config import (
    ExperimentConfig,
    InvalidValue,
    ParseError,
    UnknownKey,
    parse_config_text,
    serialize,
)

TINY_FILE = """
[stream]
kind = gaussian_blobs
tasks = 2
samples_per_task = 30
test_samples = 20
[encoder]
stage_channels = 4,4,8,8
[model]
feature_channels = 4
[replay]
capacity = 15
replay_batch = 8
[loss]
n_per_task = 5
distill_variant = none
lambda_dctn = 0
[train]
batch = 10
seeds = 0,1
"""


class TestParsing:
    def test_empty_file_gives_defaults(self):
        cfg = parse_config_text("")
        base = ExperimentConfig()
        assert cfg == base
        assert cfg.train.lr == 0.03
        assert cfg.loss.lambda_dctn == 10.0
        assert cfg.loss.lambda_dcsd == 0.01
        assert cfg.loss.tau_dctn == 2.0
        assert cfg.loss.tau_teacher == 0.0001
        assert cfg.loss.tau_student == 2.0
        assert cfg.loss.n_per_task == 10
        assert cfg.replay.capacity == 50
        assert cfg.train.inner_updates == 2

    def test_negative_lambda_rejected(self):
        with pytest.raises(InvalidValue) as err:
            parse_config_text("[loss]\nlambda_dcsd = -1\n")
        assert err.value.path == "loss.lambda_dcsd"

    def test_misspelled_key_rejected(self):
        with pytest.raises(UnknownKey) as err:
            parse_config_text("[loss]\nlamda_dcsd = 0.5\n")
        assert "lamda_dcsd" in str(err.value)

    def test_unknown_section_rejected(self):
        with pytest.raises(UnknownKey):
            parse_config_text("[misc]\nx = 1\n")

    def test_bad_line_reports_number(self):
        with pytest.raises(ParseError) as err:
            parse_config_text("[train]\nlr 0.03\n")
        assert err.value.line_no == 2

    def test_type_errors_are_invalid_values(self):
        with pytest.raises(InvalidValue):
            parse_config_text("[train]\nlr = fast\n")
        with pytest.raises(InvalidValue):
            parse_config_text("[replay]\nenabled = yes\n")

    def test_round_trip(self):
        cfg = parse_config_text(TINY_FILE)
        again = parse_config_text(serialize(cfg))
        assert again == cfg

    def test_cross_field_validation(self):
        with pytest.raises(InvalidValue):
            parse_config_text("[loss]\nn_per_task = 60\n")  # exceeds capacity 50
        with pytest.raises(InvalidValue):
            parse_config_text("[loss]\ndistill_variant = tf\n")  # needs reservoir
        with pytest.raises(InvalidValue):
            parse_config_text("[encoder]\npyramid_file = x.bin\n")  # needs augment none


class TestCmdRun:
    def test_fanout_and_aggregate(self, tmp_path):
        cfg_path = tmp_path / "exp.cfg"
        cfg_path.write_text(TINY_FILE)
        out = tmp_path / "out"
        rc = main(["run", "--config", str(cfg_path), "--out", str(out)])
        assert rc == 0
        assert sorted(os.listdir(out)) == ["manifest.txt", "matrix_0.csv", "matrix_1.csv", "metrics.txt"]
        metrics = dict(line.split(" = ") for line in
                       (out / "metrics.txt").read_text().splitlines())
        per_seed = [float(metrics["acc_seed0"]), float(metrics["acc_seed1"])]
        assert float(metrics["acc_mean"]) == pytest.approx(np.mean(per_seed), abs=1e-6)
        assert "acc_std" in metrics

    def test_aggregate_mean_matches_matrix_files(self, tmp_path):
        cfg_path = tmp_path / "exp.cfg"
        cfg_path.write_text(TINY_FILE)
        out = tmp_path / "out"
        main(["run", "--config", str(cfg_path), "--out", str(out)])
        metrics = dict(line.split(" = ") for line in
                       (out / "metrics.txt").read_text().splitlines())
        for seed in (0, 1):
            rows = [[float(v) for v in line.split(",")]
                    for line in (out / f"matrix_{seed}.csv").read_text().splitlines()]
            acc = np.mean(rows[-1])
            assert float(metrics[f"acc_seed{seed}"]) == pytest.approx(acc, abs=1e-6)

    def test_refuses_overwrite_without_force(self, tmp_path, capsys):
        cfg_path = tmp_path / "exp.cfg"
        cfg_path.write_text(TINY_FILE.replace("seeds = 0,1", "seeds = 0"))
        out = tmp_path / "out"
        assert main(["run", "--config", str(cfg_path), "--out", str(out)]) == 0
        assert main(["run", "--config", str(cfg_path), "--out", str(out)]) == 2
        assert "force" in capsys.readouterr().err
        assert main(["run", "--config", str(cfg_path), "--out", str(out), "--force"]) == 0

    def test_byte_deterministic_outputs(self, tmp_path):
        cfg_path = tmp_path / "exp.cfg"
        cfg_path.write_text(TINY_FILE.replace("seeds = 0,1", "seeds = 3"))
        out1, out2 = tmp_path / "a", tmp_path / "b"
        main(["run", "--config", str(cfg_path), "--out", str(out1)])
        main(["run", "--config", str(cfg_path), "--out", str(out2)])
        for name in ("matrix_3.csv", "metrics.txt"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()

    def test_thread_cap_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MUFAN_THREADS", "2")
        cfg_path = tmp_path / "exp.cfg"
        cfg_path.write_text(TINY_FILE)
        out = tmp_path / "out"
        assert main(["run", "--config", str(cfg_path), "--out", str(out)]) == 0
        single = tmp_path / "single"
        monkeypatch.setenv("MUFAN_THREADS", "1")
        assert main(["run", "--config", str(cfg_path), "--out", str(single)]) == 0
        assert (out / "metrics.txt").read_bytes() == (single / "metrics.txt").read_bytes()

    def test_seed_override_flag(self, tmp_path):
        cfg_path = tmp_path / "exp.cfg"
        cfg_path.write_text(TINY_FILE)
        out = tmp_path / "out"
        main(["run", "--config", str(cfg_path), "--out", str(out), "--seeds", "7"])
        assert sorted(f for f in os.listdir(out) if f.startswith("matrix")) == ["matrix_7.csv"]


class TestCmdAblate:
    def test_norm_kind_axis_table(self, tmp_path):
        cfg_path = tmp_path / "exp.cfg"
        cfg_path.write_text(TINY_FILE.replace("seeds = 0,1", "seeds = 0"))
        out = tmp_path / "ab"
        rc = main(["ablate", "--config", str(cfg_path), "--axis", "model.norm_kind",
                   "--values", "bn,cn,spn", "--out", str(out)])
        assert rc == 0
        lines = (out / "ablation.csv").read_text().splitlines()
        assert lines[0] == "value,acc_mean,acc_std,fm_mean,fm_std,la_mean,la_std"
        assert [l.split(",")[0] for l in lines[1:]] == ["bn", "cn", "spn"]
        assert sorted(os.listdir(out / "bn")) == ["manifest.txt", "matrix_0.csv", "metrics.txt"]

    def test_unknown_axis_rejected(self, tmp_path, capsys):
        cfg_path = tmp_path / "exp.cfg"
        cfg_path.write_text(TINY_FILE)
        rc = main(["ablate", "--config", str(cfg_path), "--axis", "loss.no_such",
                   "--values", "1,2", "--out", str(tmp_path / "x")])
        assert rc == 2
        assert "no_such" in capsys.readouterr().err

    def test_n_per_task_axis(self, tmp_path):
        cfg_path = tmp_path / "exp.cfg"
        text = TINY_FILE.replace("distill_variant = none", "distill_variant = csd")
        text = text.replace("seeds = 0,1", "seeds = 0")
        cfg_path.write_text(text)
        out = tmp_path / "ab"
        rc = main(["ablate", "--config", str(cfg_path), "--axis", "loss.n_per_task",
                   "--values", "5,10", "--out", str(out)])
        assert rc == 0
        lines = (out / "ablation.csv").read_text().splitlines()
        assert len(lines) == 3

    def test_distill_variant_axis(self, tmp_path):
        cfg_path = tmp_path / "exp.cfg"
        text = TINY_FILE.replace("distill_variant = none", "distill_variant = csd")
        text = text.replace("tasks = 2", "tasks = 3")
        text = text.replace("seeds = 0,1", "seeds = 0")
        cfg_path.write_text(text)
        out = tmp_path / "ab"
        rc = main(["ablate", "--config", str(cfg_path), "--axis", "loss.distill_variant",
                   "--values", "csd,fsd,lsd", "--out", str(out)])
        assert rc == 0
        lines = (out / "ablation.csv").read_text().splitlines()
        assert [l.split(",")[0] for l in lines[1:]] == ["csd", "fsd", "lsd"]


class TestCmdCheck:
    def test_pristine_build_passes(self, capsys):
        assert main(["check"]) == 0
        out = capsys.readouterr().out
        assert out.count("PASS") == 5 and "FAIL" not in out

    def test_injected_fault_fails_gradient_group(self, capsys):
        assert main(["check", "--inject-fault"]) == 1
        out = capsys.readouterr().out
        assert "FAIL gradients" in out
