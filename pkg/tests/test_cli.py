import json
import math

import pytest

from falign.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, PLOTS, main, parse_args, run
from falign.experiments import SYNTHETIC_ARCH, DatasetName, SwapDirection
from falign.network import WeightMode
from falign.rules import RuleTag

SMALL_SYNTHETIC = ["--dataset", "synthetic-xor", "--arch", "6,5,4,2", "--batch", "20"]


def test_train_flags_override_defaults():
    inv = parse_args(["train", "--rule", "fa", "--epochs", "10", "--seed", "7"])
    assert inv.subcommand == "train"
    assert inv.config.rule is RuleTag.FA
    assert inv.config.epochs == 10
    assert inv.config.seed == 7
    assert inv.config.learning_rate == 0.05
    assert inv.config.batch_size == 100
    assert inv.config.arch == (784, 700, 1000, 10)


def test_angle_list():
    inv = parse_args(["sweep-angle", "--angles", "0,1.5708,3.1416"])
    assert len(inv.angles) == 3
    assert inv.angles[0] == 0.0
    assert inv.angles[-1] == math.pi
    assert inv.config.epochs == 1


@pytest.mark.parametrize("argv", [
    ["train", "--lr", "-1"],
    ["train", "--angle", "4"],
    ["train", "--rule", "hebbian"],
    ["train", "--no-such-flag"],
    ["sweep-angle"],
    ["sweep-angle", "--angles", "0.5,1.0,0.5"],
    ["explode"],
])
def test_usage_errors_exit_with_2(argv):
    with pytest.raises(SystemExit) as err:
        parse_args(argv)
    assert err.value.code == EXIT_USAGE


def test_subcommand_defaults():
    assert parse_args(["swap"]).config.epochs == 50
    assert parse_args(["swap"]).direction is SwapDirection.FA_TO_BP
    assert parse_args(["train", "--dataset", "synthetic-xor"]).config.arch == SYNTHETIC_ARCH


def test_config_file_sits_between_flags_and_defaults(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text("epochs=3\nlr=0.1\nweight_mode=sign-matched\ndataset=synthetic-xor\n")
    inv = parse_args(["train", "--config", str(path), "--epochs", "5"])
    assert inv.config.epochs == 5
    assert inv.config.learning_rate == 0.1
    assert inv.config.weight_mode is WeightMode.SIGN_MATCHED
    assert inv.config.dataset is DatasetName.SYNTHETIC_XOR
    assert inv.config.batch_size == 100


@pytest.mark.parametrize("content", ["colour=red\n", "epochs=many\n"])
def test_bad_config_file(tmp_path, content):
    path = tmp_path / "run.conf"
    path.write_text(content)
    with pytest.raises(SystemExit) as err:
        parse_args(["train", "--config", str(path)])
    assert err.value.code == EXIT_USAGE


def test_out_dir_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("FALIGN_OUT_DIR", str(tmp_path))
    assert parse_args(["train"]).out_dir == tmp_path
    assert parse_args(["train", "--out", "elsewhere"]).out_dir.name == "elsewhere"


def test_gradcheck(capsys):
    assert run(parse_args(["gradcheck"])) == EXIT_OK
    assert "max relative error" in capsys.readouterr().out


def test_help_lists_every_experiment(capsys):
    assert main(["--help"]) == EXIT_OK
    out = capsys.readouterr().out
    for name in ("train", "swap", "sweep-init", "sweep-angle", "forcing", "gradcheck"):
        assert name in out
    plots = out[out.index("plots:"):]
    for name, text in PLOTS.items():
        assert f"  {name:<12} {text}" in plots
    assert set(PLOTS) == {"swap", "sweep-init", "sweep-angle", "forcing"}


def test_missing_mnist_is_a_runtime_failure(no_data_dir, tmp_path):
    assert main(["train", "--out", str(tmp_path)]) == EXIT_FAILURE


def test_train_on_synthetic_data(tmp_path):
    code = main(["train", *SMALL_SYNTHETIC, "--epochs", "1", "--seed", "4", "--out", str(tmp_path)])
    assert code == EXIT_OK
    (manifest_path,) = tmp_path.glob("*.manifest.json")
    manifest = json.loads(manifest_path.read_text())
    assert manifest["config"]["rule"] == "fa"
    assert manifest["seed"] == 4
    (metrics_path,) = tmp_path.glob("*.csv")
    assert metrics_path.read_text().startswith("step,epoch,test_accuracy,train_loss,ga_l1")


def test_sweep_angle_writes_summaries(tmp_path):
    argv = ["sweep-angle", *SMALL_SYNTHETIC, "--angles", "0,1.5", "--repetitions", "2", "--updates", "2",
            "--out", str(tmp_path)]
    assert main(argv) == EXIT_OK
    names = sorted(p.name for p in tmp_path.iterdir())
    assert any(n.endswith("-summary.csv") for n in names)
    assert any(n.endswith("-matched.csv") for n in names)


def test_swap_step_past_the_end_fails_cleanly(tmp_path):
    argv = ["swap", *SMALL_SYNTHETIC, "--epochs", "1", "--swap-step", "1000", "--out", str(tmp_path)]
    assert main(argv) == EXIT_FAILURE
