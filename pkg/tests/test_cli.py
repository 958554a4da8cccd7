import json
import os

import pytest

from ldguid.cli import build_parser, resolve_config, run
from ldguid.errors import ParseError, UnknownKey
from ldguid.trainer import de_from_checkpoint, load_checkpoint


def _tree(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            p = os.path.join(dirpath, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out


class TestResolveConfig:
    def test_defaults(self):
        cfg = resolve_config()
        t = cfg.train
        assert (t.beta, t.lambda_, t.learning_rate, t.de_update_period_k) == (0.5, 0.1, 1e-4, 5)

    def test_flag_beats_file(self, tmp_path):
        f = tmp_path / "c.toml"
        f.write_text("beta = 1.5\n[train]\nepochs = 3\n")
        cfg = resolve_config(f, {"beta": 0.1})
        assert cfg.train.beta == 0.1
        assert cfg.train.epochs == 3

    def test_file_beats_default(self, tmp_path):
        f = tmp_path / "c.toml"
        f.write_text("[train]\nbeta = 1.5\nlambda = 0.25\n[de]\nc_z = 8\n[synth]\nnuisance_brightness_range = [-2.0, 2.0]\n")
        cfg = resolve_config(f)
        assert (cfg.train.beta, cfg.train.lambda_, cfg.de.c_z) == (1.5, 0.25, 8)
        assert cfg.synth.nuisance_brightness_range == (-2.0, 2.0)

    def test_unknown_key(self, tmp_path):
        f = tmp_path / "c.toml"
        f.write_text("betaa = 0.3\n")
        with pytest.raises(UnknownKey, match="betaa"):
            resolve_config(f)

    def test_unknown_section(self, tmp_path):
        f = tmp_path / "c.toml"
        f.write_text("[optim]\nlr = 1\n")
        with pytest.raises(UnknownKey, match="optim"):
            resolve_config(f)

    def test_parse_error_has_line(self, tmp_path):
        f = tmp_path / "c.toml"
        f.write_text("epochs = 3\nbeta = = 2\n")
        with pytest.raises(ParseError, match="line 2"):
            resolve_config(f)

    def test_type_error_names_key(self, tmp_path):
        f = tmp_path / "c.toml"
        f.write_text("[train]\nepochs = \"many\"\n")
        with pytest.raises(ParseError, match="epochs"):
            resolve_config(f)


def test_help_for_every_subcommand(capsys):
    assert run(["--help"]) == 0
    for cmd in ("synth", "pretrain", "train", "eval", "sweep-beta", "report"):
        assert run([cmd, "--help"]) == 0
        assert "--" in capsys.readouterr().out


def test_usage_errors_exit_1(capsys):
    assert run([]) == 1
    assert run(["synth"]) == 1
    assert "usage" in capsys.readouterr().err
    assert run(["synth", "--out", "x", "--bogus", "1"]) == 1
    assert run(["frobnicate"]) == 1


def test_subcommands_registered():
    parser = build_parser()
    for cmd in ("synth", "pretrain", "train", "eval", "sweep-beta", "report"):
        assert parser.parse_args(_minimal(cmd)).command == cmd


def _minimal(cmd):
    return {
        "synth": ["synth", "--out", "d"],
        "pretrain": ["pretrain", "--data", "d", "--out", "c"],
        "train": ["train"],
        "eval": ["eval", "--ckpt", "c", "--data", "d", "--report", "r"],
        "sweep-beta": ["sweep-beta", "--data", "d", "--betas", "0.1", "--out", "o"],
        "report": ["report", "--inputs", "a", "--table", "t"],
    }[cmd]


def test_synth_byte_deterministic(tmp_path, capsys):
    args = ["synth", "--seed", "7", "--n", "64"]
    assert run(args + ["--out", str(tmp_path / "a")]) == 0
    assert run(args + ["--out", str(tmp_path / "b")]) == 0
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    assert len(a) == 3 * 64 + 3
    assert a == b
    assert '"seed": 7' in capsys.readouterr().out


def test_missing_de_checkpoint_exit_2(tmp_path, capsys):
    missing = str(tmp_path / "missing.ckpt")
    assert run(["train", "--backbone", "unet", "--de", missing]) == 2
    err = capsys.readouterr().err
    payload = json.loads(err.split("error: ", 1)[1])
    assert missing in payload["message"]


def test_bad_config_exit_2(tmp_path, capsys):
    f = tmp_path / "c.toml"
    f.write_text("betaa = 1\n")
    assert run(["synth", "--out", str(tmp_path / "d"), "--config", str(f)]) == 2
    assert "betaa" in capsys.readouterr().err


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert run(["synth", "--out", str(root / "d"), "--seed", "1", "--n", "40", "--size", "16",
                "--config", str(_write(root / "s.toml", "[synth]\nshape_size_range = [3, 6]\n"))]) == 0
    return root


def _write(path, text):
    path.write_text(text)
    return path


def test_pretrain_writes_loadable_checkpoint(small_data, capsys):
    ckpt = small_data / "de.ckpt"
    cfg = _write(small_data / "p.toml", "[de]\nc_z = 4\nbase_width = 4\n")
    code = run(["pretrain", "--data", str(small_data / "d"), "--beta", "0.5", "--out", str(ckpt),
                "--epochs", "2", "--config", str(cfg)])
    assert code == 0
    c = load_checkpoint(ckpt)
    de = de_from_checkpoint(c)
    assert de.arch.c_z == 4 and de.arch.image_size == 16
    assert c.meta["resolved_config"]["train"]["beta"] == 0.5
    assert c.meta["train_config"]["epochs"] == 2
    assert c.meta["provenance"]["dataset_hash"]
    assert "resolved config" in capsys.readouterr().out


def test_sweep_csv(small_data):
    out = small_data / "sweep.csv"
    cfg = _write(small_data / "q.toml", "[de]\nc_z = 4\nbase_width = 4\n")
    assert run(["sweep-beta", "--data", str(small_data / "d"), "--betas", "0.1,5.0", "--out", str(out),
                "--epochs", "1", "--config", str(cfg)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("# ")
    prov = json.loads(lines[0][2:])
    assert prov["config"]["train"]["epochs"] == 1
    assert prov["paper_reference"]["0.5"]["rec_loss"] == 6.12e-6
    assert lines[1] == "beta,rec_loss,adv_loss"
    assert [ln.split(",")[0] for ln in lines[2:]] == ["0.1", "5.0"]
