import filecmp
from pathlib import Path

import pytest

from tmttt.cli import PRESETS, build_run_config, run_command
from tmttt.config import read_kv
from tmttt.data import load_csv
from tmttt.errors import ConfigError
from tmttt.layers import CONV_VARIANTS
from tmttt.training import EvalReport

TOY = ["--set", "window.L=16", "--set", "window.T=4", "--set", "model.n1=8", "--set", "model.n2=4",
       "--set", "train.epochs=2", "--set", "train.seeds=0", "--set", "train.batch_size=64"]


def tree(directory: Path):
    return sorted(str(p.relative_to(directory)) for p in directory.rglob("*") if p.is_file() and p.name != "run.log")


def same_outputs(a: Path, b: Path):
    files = tree(a)
    assert files == tree(b)
    _, mismatch, errors = filecmp.cmpfiles(a, b, files, shallow=False)
    return not mismatch and not errors


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "toy.cfg"
    spec.write_text("M=2\nN=240\nsigma=0.05\n")
    csv_path = root / "toy.csv"
    assert run_command(["synth", "--spec", str(spec), "--out", str(csv_path)]) == 0
    assert run_command(["train", "--data", str(csv_path), *TOY, "--out", str(root / "train")]) == 0
    return root, csv_path


class TestPipeline:
    def test_synth_output(self, toy):
        _, csv_path = toy
        series = load_csv(csv_path)
        assert (series.M, series.N) == (2, 240)

    def test_train_outputs(self, toy):
        root, _ = toy
        names = tree(root / "train")
        assert {"config.txt", "run_manifest.txt", "trace.csv", "loss.png", "checkpoint/manifest.txt"} <= set(names)
        assert len((root / "train" / "trace.csv").read_text().splitlines()) == 3

    def test_eval(self, toy):
        root, csv_path = toy
        code = run_command(["eval", "--checkpoint", str(root / "train" / "checkpoint"), "--data", str(csv_path),
                            "--tta-steps", "1", "--tta-lr", "0.001", "--out", str(root / "eval")])
        assert code == 0
        rep = EvalReport.from_csv((root / "eval" / "eval.csv").read_text())
        assert [r.dataset for r in rep.rows] == ["toy", "toy+tta1"]
        assert (root / "eval" / "forecast.png").stat().st_size > 0

    def test_probe(self, toy):
        root, csv_path = toy
        code = run_command(["probe", "--checkpoint", str(root / "train" / "checkpoint"), "--data", str(csv_path),
                            "--batch", "4", "--out", str(root / "probe")])
        assert code == 0
        assert "cosine" in read_kv(root / "probe" / "probe.txt")

    def test_ablate_rows(self, toy):
        root, csv_path = toy
        out = root / "ablate"
        args = ["ablate", "--data", str(csv_path), *TOY, "--set", "train.epochs=1", "--out", str(out)]
        assert run_command(args) == 0
        rows = (out / "ablation.csv").read_text().splitlines()[1:]
        assert [r.split(",")[1] for r in rows] == list(CONV_VARIANTS)
        assert (out / "ablation_TTT_T4.png").is_file()

    def test_gradcheck(self, tmp_path):
        assert run_command(["gradcheck", "--only", "linear,ssm_lti", "--out", str(tmp_path)]) == 0
        lines = (tmp_path / "gradcheck.csv").read_text().splitlines()
        assert len(lines) == 3 and all(l.endswith("PASS") for l in lines[1:])

    def test_bench(self, tmp_path):
        code = run_command(["bench", "--lengths", "8,16,32", "--width", "4", "--trials", "1", "--out", str(tmp_path)])
        assert code == 0
        for name in ("complexity.csv", "scaling_ttt.csv", "tta_overhead.csv", "bench_summary.txt", "scaling.png"):
            assert (tmp_path / name).is_file()
        assert "slope.attention" in read_kv(tmp_path / "bench_summary.txt")


class TestErrors:
    def test_missing_data_file(self, toy, tmp_path):
        root, _ = toy
        code = run_command(["eval", "--checkpoint", str(root / "train" / "checkpoint"),
                            "--data", str(tmp_path / "absent.csv"), "--out", str(tmp_path / "e")])
        assert code == 2

    def test_missing_checkpoint(self, tmp_path):
        assert run_command(["eval", "--checkpoint", str(tmp_path), "--out", str(tmp_path / "e")]) == 2

    def test_unknown_subcommand(self, capsys):
        assert run_command(["frobnicate"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_no_subcommand(self):
        assert run_command([]) == 1

    def test_bad_key(self, tmp_path):
        assert run_command(["train", "--set", "model.wobble=1", "--out", str(tmp_path)]) == 1

    def test_bad_value(self, tmp_path):
        assert run_command(["train", "--set", "train.epochs=many", "--out", str(tmp_path)]) == 1

    def test_derived_key_rejected(self):
        with pytest.raises(ConfigError):
            build_run_config({"model.L": "96"})

    def test_malformed_csv(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("t,a\n0,1\n1,x\n")
        assert run_command(["train", "--data", str(bad), "--out", str(tmp_path / "o")]) == 2

    def test_too_short_series(self, tmp_path):
        assert run_command(["train", "--set", "synth.N=20", *TOY, "--out", str(tmp_path)]) == 2

    def test_unknown_preset(self, tmp_path):
        assert run_command(["train", "--preset", "huge", "--out", str(tmp_path)]) == 1


class TestReproducibility:
    def test_idempotent(self, toy, tmp_path):
        _, csv_path = toy
        for name in ("a", "b"):
            assert run_command(["train", "--data", str(csv_path), *TOY, "--out", str(tmp_path / name)]) == 0
        assert same_outputs(tmp_path / "a", tmp_path / "b")

    def test_config_echo_reproduces(self, toy, tmp_path):
        root, _ = toy
        echo = root / "train" / "config.txt"
        assert run_command(["train", "--config", str(echo), "--out", str(tmp_path / "again")]) == 0
        assert same_outputs(root / "train", tmp_path / "again")

    def test_synth_idempotent(self, tmp_path):
        for name in ("a.csv", "b.csv"):
            assert run_command(["synth", "--set", "N=50", "--seed", "3", "--out", str(tmp_path / name)]) == 0
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


class TestPresets:
    def test_grid(self):
        grid = {(int(v["window.L"]), int(v["window.T"])) for k, v in PRESETS.items() if k != "desk"}
        assert grid == {(L, T) for L in (720, 2880, 5760) for T in (96, 192, 336, 720)}

    @pytest.mark.parametrize("name", sorted(PRESETS))
    def test_presets_build(self, name):
        run = build_run_config(PRESETS[name])
        cfg = run.model_config(7)
        assert (cfg.n1, cfg.n2) == (64, 32) and cfg.L == run.window.L

    def test_thread_cap_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("TMTTT_THREADS", "1")
        assert run_command(["synth", "--set", "N=10", "--out", str(tmp_path / "s.csv")]) == 0
        monkeypatch.setenv("TMTTT_THREADS", "lots")
        assert run_command(["synth", "--set", "N=10", "--out", str(tmp_path / "s.csv")]) == 1
