import math
import re
import subprocess
import sys

import numpy as np
import pytest

from checkerboard import cli, trainer
from checkerboard import network as net
from checkerboard.data import synthetic_image
from checkerboard.errors import ContractError, TrainingError
from checkerboard.imageio import ImageBuffer, read_image, write_image

SUBCOMMANDS = ("train", "encode", "decode", "bench", "masklab", "selftest")


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def trained(workdir):
    out = workdir / "m.ckwt"
    argv = ["train", "--out", str(out), "--corpus-size", "8", "--log", str(workdir / "log.csv")]
    for kv in ("steps=200", "batch=4", "learning_rate=0.001", "n_channels=8", "latent_channels=8"):
        argv += ["--set", kv]
    assert cli.main(argv) == cli.EXIT_OK
    return out


@pytest.fixture(scope="module")
def picture(workdir):
    x = synthetic_image(np.random.default_rng(3), 96)[:, :80, :]
    path = workdir / "in.pgm"
    write_image(path, ImageBuffer.from_float(x))
    return path


def test_full_pipeline(trained, picture, workdir, capsys):
    capsys.readouterr()
    blob = workdir / "in.ckbd"
    assert cli.main(["encode", "--weights", str(trained), str(picture), str(blob)]) == 0
    line = capsys.readouterr().out
    bpp = float(re.search(r"bpp ([0-9.]+),", line).group(1))
    assert bpp == pytest.approx(8 * blob.stat().st_size / (96 * 80), abs=1e-5)
    out = workdir / "out.pgm"
    assert cli.main(["decode", "--weights", str(trained), str(blob), str(out)]) == 0
    x = read_image(picture).to_float()
    x_hat = read_image(out).to_float()
    assert x_hat.shape == x.shape
    assert math.isfinite(trainer.psnr(x, x_hat))


def test_wrong_model_digest_exits_3(trained, picture, workdir):
    blob = workdir / "w.ckbd"
    assert cli.main(["encode", "--weights", str(trained), str(picture), str(blob)]) == 0
    other = workdir / "other.ckwt"
    net.ModelWeights.init(net.ModelWeights.load(trained).config, seed=99).save(other)
    assert cli.main(["decode", "--weights", str(other), str(blob), str(workdir / "x.pgm")]) == cli.EXIT_DECODE


def test_corrupt_inputs_exit_2(trained, workdir):
    bad = workdir / "bad.ckwt"
    bad.write_bytes(b"CKWT\x01garbage")
    assert cli.main(["encode", "--weights", str(bad), "in.pgm", "o"]) == cli.EXIT_USAGE
    junk = workdir / "junk.pgm"
    junk.write_bytes(b"P5\n2 2\n")
    assert cli.main(["encode", "--weights", str(trained), str(junk), "o"]) == cli.EXIT_USAGE
    assert cli.main(["encode", "--weights", str(trained), str(workdir / "missing.pgm"), "o"]) == cli.EXIT_USAGE


def test_divergence_exits_4(monkeypatch, workdir):
    def boom(*a, **k):
        raise TrainingError("loss is not finite", 3)

    monkeypatch.setattr(trainer, "train", boom)
    assert cli.main(["train", "--out", str(workdir / "d.ckwt"), "--set", "steps=1"]) == cli.EXIT_DIVERGED


@pytest.mark.parametrize("sub", SUBCOMMANDS)
def test_help_exits_zero(sub):
    proc = subprocess.run([sys.executable, "-m", "checkerboard", sub, "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "usage" in proc.stdout


def test_usage_errors():
    with pytest.raises(SystemExit) as exc:
        cli.main(["masklab", "table1"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit):
        cli.main([])


def test_config_file_parsing(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# desk run\nlam = 0.045\nsteps=10  # short\n\ncontext_kind = serial\nlr_decay_step = 5\n")
    cfg = cli.build_train_config(cli.read_config_file(path))
    assert cfg.lam == 0.045 and cfg.steps == 10 and cfg.lr_decay_step == 5
    assert cfg.model.context_kind == "serial"
    with pytest.raises(ContractError):
        cli.build_train_config({"colour": "red"})
    with pytest.raises(ContractError):
        cli.build_train_config({"steps": "many"})
    path.write_text("no equals sign\n")
    with pytest.raises(ContractError):
        cli.read_config_file(path)


def test_train_is_deterministic(workdir):
    digests = []
    for name in ("a", "b"):
        out = workdir / f"{name}.ckwt"
        cli.main(["train", "--out", str(out), "--corpus-size", "4", "--set", "steps=2", "--set", "batch=2",
                  "--set", "n_channels=4", "--set", "latent_channels=4"])
        digests.append(net.ModelWeights.load(out).digest())
    assert digests[0] == digests[1]


def test_masklab_commands(workdir, capsys):
    w = workdir / "super.ckwt"
    common = ["--corpus-size", "2"]
    argv = ["masklab", "train", "--out", str(w), "--steps", "2", "--set", "batch=2",
            "--set", "n_channels=4", "--set", "latent_channels=4", *common]
    assert cli.main(argv) == 0
    assert cli.main(["masklab", "table1", "--weights", str(w), "--out", str(workdir / "t1.csv"), *common]) == 0
    text = capsys.readouterr().out
    assert "non-reference" in text and "eta=  0.00%" in text
    assert cli.main(["masklab", "sweep", "--weights", str(w), *common]) == 0
    assert capsys.readouterr().out.count("single_ref") == 24


def test_bench_command(workdir, capsys):
    out = workdir / "bench.md"
    argv = ["bench", "--size", "128x64", "--variants", "checkerboard,none", "--format", "markdown", "--out", str(out)]
    assert cli.main(argv) == 0
    assert "| checkerboard |" in out.read_text()


def test_selftest_passes(capsys):
    assert cli.main(["selftest"]) == 0
    assert "FAIL" not in capsys.readouterr().out
