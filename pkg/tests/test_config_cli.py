import numpy as np
import pytest
from fractions import Fraction

from csicomp import expconfig
from csicomp.cli import main
from csicomp.errors import ConfigError
from csicomp.training import LossLog

TINY_ARGS = [
    "--set", "generator.n_c=32", "--set", "generator.n_t=8", "--set", "generator.n_cc=8",
    "--set", "generator.delay_centers=1.0,4.0", "--set", "generator.angle_centers=2.0,6.0",
    "--set", "generator.delay_spreads=0.7,1.0", "--set", "generator.angle_spreads=0.8,1.1",
    "--set", "generator.cluster_powers=1.0,0.4",
    "--set", "generator.n_train=80", "--set", "generator.n_val=30", "--set", "generator.n_test=30",
    "--set", "train.epochs=2", "--set", "train.batch_size=40",
]


def run(out, *args, seed=7):
    return main(list(args) + TINY_ARGS + ["--seed", str(seed), "--out", str(out)])


class TestConfig:
    def test_render_parse_roundtrip(self):
        cfg = expconfig.default_config("desk")
        text = expconfig.render_config(cfg)
        assert expconfig.parse_config(text) == cfg

    def test_profiles(self):
        desk = expconfig.default_config("desk")
        paper = expconfig.default_config("paper")
        assert desk.n_c == 256 and desk.n_train == 2000 and desk.epochs == 100
        assert paper.n_c == 1024 and paper.n_train == 100_000
        assert paper.n_val == 30_000 and paper.n_test == 20_000
        assert paper.epochs == 1000 and paper.batch_size == 1000

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            expconfig.parse_config("[generator]\nbogus = 3\n")

    def test_unknown_profile_rejected(self):
        with pytest.raises(ConfigError):
            expconfig.default_config("huge")

    def test_fraction_values(self):
        cfg = expconfig.parse_config("[model]\ngamma = 1/16\n")
        assert cfg.gamma == Fraction(1, 16)

    def test_patience_none(self):
        cfg = expconfig.parse_config("[train]\npatience = none\n")
        assert cfg.patience is None
        cfg = expconfig.parse_config("[train]\npatience = 12\n")
        assert cfg.patience == 12

    def test_malformed_line(self):
        with pytest.raises(ConfigError):
            expconfig.parse_config("[train]\nepochs\n")


class TestGenData:
    def test_outputs_and_determinism(self, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert run(out1, "gen-data") == 0
        assert run(out2, "gen-data") == 0
        for name in ("train.acnt", "val.acnt", "test.acnt"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()
        # resolved configs differ only in their output directory
        strip = lambda p: [l for l in (p / "resolved.cfg").read_text().splitlines()
                           if not l.startswith("out_dir")]
        assert strip(out1) == strip(out2)

    def test_refusal_without_force(self, tmp_path, capsys):
        out = tmp_path / "a"
        assert run(out, "gen-data") == 0
        assert run(out, "gen-data") == 3
        assert run(out, "gen-data", "--force") == 0

    def test_different_seed_different_data(self, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        run(out1, "gen-data")
        main(["gen-data"] + TINY_ARGS + ["--seed", "8", "--out", str(out2)])
        assert (out1 / "train.acnt").read_bytes() != (out2 / "train.acnt").read_bytes()


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run(out, "gen-data") == 0
    assert run(out, "train") == 0
    return out


class TestTrainEval:
    def test_two_stage_outputs(self, trained):
        assert (trained / "denoiser.ckpt").exists()
        assert (trained / "feedback_1-4.ckpt").exists()
        log = LossLog.read_csv(trained / "loss_log.csv")
        stages = {r[0] for r in log.rows}
        assert stages == {"denoiser", "feedback"}
        assert len(log.rows) == 4

    def test_eval_outputs(self, trained, capsys):
        assert run(trained, "eval", "--baseline", "identity") == 0
        stdout = capsys.readouterr().out
        assert "identity" in stdout and "CNR(dB)" in stdout
        lines = (trained / "results.csv").read_text().splitlines()
        assert lines[0] == "model,gamma,cnr_db,nmse_db,n_samples"
        assert len(lines) == 1 + 2 * 6

    def test_eval_missing_checkpoint(self, tmp_path, capsys):
        out = tmp_path / "fresh"
        run(out, "gen-data")
        assert run(out, "eval") == 3
        assert "expected it at" in capsys.readouterr().err

    def test_codec_outputs(self, trained, capsys):
        assert run(trained, "codec", "--index", "1") == 0
        stdout = capsys.readouterr().out
        assert "codeword length 32" in stdout
        assert "decoded NMSE" in stdout
        grid = np.loadtxt(trained / "codec_denoised_mag.csv", delimiter=",")
        assert grid.shape == (8, 8)
        codeword = np.loadtxt(trained / "codec_codeword.csv", delimiter=",")
        assert codeword.shape == (32,)

    def test_end_to_end_stage(self, trained):
        assert run(trained, "train", "--stage", "end-to-end") == 0
        assert (trained / "end_to_end_1-4.ckpt").exists()
        log = LossLog.read_csv(trained / "loss_log.csv")
        assert "end-to-end" in {r[0] for r in log.rows}

    def test_resume_reproduces_trajectory(self, tmp_path):
        base, part = tmp_path / "full", tmp_path / "part"
        run(base, "gen-data")
        run(part, "gen-data")
        assert main(["train"] + TINY_ARGS + ["--seed", "7", "--out", str(base),
                                             "--set", "train.epochs=4"]) == 0
        assert main(["train"] + TINY_ARGS + ["--seed", "7", "--out", str(part),
                                             "--set", "train.epochs=2"]) == 0
        assert main(["train", "--resume"] + TINY_ARGS + ["--seed", "7", "--out", str(part),
                                                         "--set", "train.epochs=4"]) == 0
        full_log = LossLog.read_csv(base / "loss_log.csv")
        part_log = LossLog.read_csv(part / "loss_log.csv")
        full = {(r[0], r[1]): (r[2], r[3]) for r in full_log.rows}
        part_rows = {(r[0], r[1]): (r[2], r[3]) for r in part_log.rows}
        assert set(full) == set(part_rows)
        for key, (tr, va) in full.items():
            assert part_rows[key][0] == pytest.approx(tr, abs=1e-6)
            assert part_rows[key][1] == pytest.approx(va, abs=1e-6)


class TestCountParams:
    def test_reference_ratios_match(self, capsys):
        assert main(["count-params"]) == 0
        out = capsys.readouterr().out
        for total in ("2,285,494", "712,246", "450,038", "318,934"):
            assert total in out
        assert out.count("(match)") == 4

    def test_out_of_table_ratio_has_no_reference_line(self, capsys):
        assert main(["count-params", "--set", "model.gamma=1/8"]) == 0
        out = capsys.readouterr().out
        block = out.split("gamma=")[1]  # the configured ratio prints first
        assert block.startswith("1/8")
        assert "reference" not in block
        assert "conv+dense" in block


class TestGenDataReporting:
    def test_prints_counts_and_empirical_cnr(self, tmp_path, capsys):
        assert run(tmp_path / "r", "gen-data") == 0
        out = capsys.readouterr().out
        assert "train: 80 samples" in out
        assert "val: 30 samples" in out
        assert "test: 30 samples" in out
        assert out.count("empirical") == 3


class TestExitCodes:
    def test_missing_dataset(self, tmp_path, capsys):
        assert run(tmp_path / "none", "train") == 3

    def test_bad_config_value(self, tmp_path):
        assert main(["train", "--set", "model.gamma=1/3", "--out", str(tmp_path)] + TINY_ARGS) == 2

    def test_bad_set_syntax(self, tmp_path):
        assert main(["gen-data", "--set", "nonsense", "--out", str(tmp_path)]) == 2

    def test_unknown_key(self, tmp_path):
        assert main(["gen-data", "--set", "generator.bogus=3", "--out", str(tmp_path)]) == 2

    def test_missing_config_file(self, tmp_path):
        assert main(["gen-data", "--config", str(tmp_path / "nope.cfg")]) == 3

    def test_dataset_model_dim_mismatch(self, tmp_path, capsys):
        out = tmp_path / "run"
        assert run(out, "gen-data") == 0
        code = main(["train", "--config", str(out / "resolved.cfg"),
                     "--set", "generator.n_cc=16", "--set", "generator.n_c=64"])
        assert code == 2


class TestReproducibilityFromResolvedConfig:
    def test_full_cycle(self, tmp_path):
        first = tmp_path / "first"
        assert run(first, "gen-data") == 0
        assert main(["train", "--config", str(first / "resolved.cfg")]) == 0
        assert main(["eval", "--config", str(first / "resolved.cfg")]) == 0
        second = tmp_path / "second"
        assert main(["gen-data", "--config", str(first / "resolved.cfg"),
                     "--out", str(second)]) == 0
        assert main(["train", "--config", str(second / "resolved.cfg")]) == 0
        assert main(["eval", "--config", str(second / "resolved.cfg")]) == 0
        for name in ("train.acnt", "val.acnt", "test.acnt"):
            assert (first / name).read_bytes() == (second / name).read_bytes()
        log1 = LossLog.read_csv(first / "loss_log.csv")
        log2 = LossLog.read_csv(second / "loss_log.csv")
        assert len(log1.rows) == len(log2.rows)
        for r1, r2 in zip(log1.rows, log2.rows):
            assert r1[:2] == r2[:2]
            assert r1[2] == pytest.approx(r2[2], abs=1e-6)
            assert r1[3] == pytest.approx(r2[3], abs=1e-6)
        assert (first / "results.csv").read_text() == (second / "results.csv").read_text()
