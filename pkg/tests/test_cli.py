import filecmp
import subprocess
import sys

import numpy as np
import pytest

from recgan import autodiff as ad
from recgan import grid
from recgan.cli import build_parser, main

CUBE = """v 0 0 0
v 1 0 0
v 1 1 0
v 0 1 0
v 0 0 1
v 1 0 1
v 1 1 1
v 0 1 1
f 1 3 2
f 1 4 3
f 5 6 7
f 5 7 8
f 1 2 6
f 1 6 5
f 2 3 7
f 2 7 6
f 3 4 8
f 3 8 7
f 4 1 5
f 4 5 8
"""

TINY_CONFIG = """encoder_channels = 2, 2, 2, 2, 2
latent_dim = 8
disc_channels = 1, 1, 1, 1, 1, 2
upsample_channels = 2
batch = 2
validate = false
"""


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def cli_data(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    assert run("make-shapes", "--out", base / "meshes", "--per-category", 3,
               "--categories", "chair", "blob", "--seed", 2) == 0
    assert run("synth", "--meshes", base / "meshes", "--out", base / "data", "--seed", 1) == 0
    (base / "tiny.cfg").write_text(TINY_CONFIG)
    return base


@pytest.fixture(scope="module")
def trained(cli_data):
    out = cli_data / "run"
    assert run("train", "--data", cli_data / "data", "--out", out, "--config",
               cli_data / "tiny.cfg", "--steps", 2, "--ckpt-every", 2) == 0
    return out / "ckpt_000002.rgpw"


def test_help_shows_defaults_for_every_subcommand(capsys):
    parser = build_parser()
    sub = next(a for a in parser._actions if a.choices and isinstance(a.choices, dict))
    for name, p in sub.choices.items():
        text = p.format_help()
        for action in p._actions:
            if action.help and action.default not in (None, False) and action.dest != "help":
                assert "default:" in text, name
        assert all(a.help for a in p._actions), name


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "recgan.cli", "--help"], capture_output=True,
                         text=True)
    assert out.returncode == 0 and "voxelize" in out.stdout
    assert subprocess.run([sys.executable, "-m", "recgan.cli", "nope"],
                          capture_output=True).returncode == 2


def test_voxelize_cube(tmp_path, capsys):
    (tmp_path / "cube.obj").write_text(CUBE)
    assert run("voxelize", "--mesh", tmp_path / "cube.obj", "--res", 16, "--out",
               tmp_path / "c.rgpp") == 0
    g = grid.read_grid(tmp_path / "c.rgpp")
    occ = g.data
    assert occ.any()
    # a solid box: occupancy equals the product of its axis projections
    zs, ys, xs = occ.any(axis=(1, 2)), occ.any(axis=(0, 2)), occ.any(axis=(0, 1))
    assert np.array_equal(occ, zs[:, None, None] & ys[None, :, None] & xs[None, None, :])
    assert zs.sum() == ys.sum() == xs.sum()


@pytest.mark.parametrize("argv", [
    ["voxelize", "--mesh", "missing.obj", "--res", "16", "--out", "x.rgpp"],
    ["voxelize", "--mesh", "missing.obj", "--res", "12", "--out", "x.rgpp"],
    ["train", "--data", "nowhere", "--out", "o"],
    ["bogus"],
    ["export", "--in", "x.rgpp"],
])
def test_usage_errors_exit_2(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2


def test_corrupt_grid_exits_3(tmp_path):
    (tmp_path / "bad.rgpp").write_bytes(b"RGPX" + bytes(20))
    assert run("export", "--in", tmp_path / "bad.rgpp", "--out", tmp_path / "o.obj") == 3


def test_bad_obj_exits_3(tmp_path):
    (tmp_path / "bad.obj").write_text("v 0 0 0\nf 1 2 3\n")
    assert run("voxelize", "--mesh", tmp_path / "bad.obj", "--res", 16, "--out",
               tmp_path / "x.rgpp") == 3


def test_invalid_config_key_exits_2(cli_data, tmp_path):
    (tmp_path / "bad.cfg").write_text("steps = 1\nwarp_speed = 9\n")
    assert run("train", "--data", cli_data / "data", "--out", tmp_path / "o", "--config",
               tmp_path / "bad.cfg") == 2


def test_synth_is_byte_identical(cli_data, tmp_path, capsys):
    assert run("synth", "--meshes", cli_data / "meshes", "--out", tmp_path / "again",
               "--seed", 1) == 0
    a, b = cli_data / "data", tmp_path / "again"
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for f in files:
        assert filecmp.cmp(a / f, b / f, shallow=False), f
    assert "pairs" in capsys.readouterr().out


def test_train_is_byte_identical_and_recae_has_no_d(cli_data, trained, tmp_path):
    out = tmp_path / "again"
    assert run("train", "--data", cli_data / "data", "--out", out, "--config",
               cli_data / "tiny.cfg", "--steps", 2, "--ckpt-every", 2) == 0
    assert (out / "ckpt_000002.rgpw").read_bytes() == trained.read_bytes()
    assert (out / "loss.csv").read_bytes() == (trained.parent / "loss.csv").read_bytes()
    assert run("train", "--data", cli_data / "data", "--out", tmp_path / "ae", "--config",
               cli_data / "tiny.cfg", "--steps", 1, "--mode", "recae") == 0
    names = ad.load_tensors(tmp_path / "ae" / "ckpt_000001.rgpw")
    assert not any(k.startswith("d/") for k in names)


def test_eval_ground_truth(cli_data, tmp_path, capsys):
    out = tmp_path / "gt.csv"
    assert run("eval", "--data", cli_data / "data", "--ground-truth", "--out", out) == 0
    rows = out.read_text().splitlines()
    header, body = rows[0].split(","), [r.split(",") for r in rows[1:]]
    assert len(body) == 2  # chair and blob
    col = header.index("iou")
    assert all(float(r[col]) == 1.0 for r in body)
    assert (tmp_path / "gt.global.csv").exists()


def test_eval_checkpoint(cli_data, trained, tmp_path):
    assert run("eval", "--data", cli_data / "data", "--ckpt", trained, "--split", "test-CV",
               "--out", tmp_path / "e.csv") == 0
    assert len((tmp_path / "e.csv").read_text().splitlines()) == 3


def test_predict_then_export(cli_data, trained, tmp_path):
    src = next((cli_data / "data").rglob("*.partial.rgpp"))
    out = tmp_path / "y.rgpp"
    assert run("predict", "--ckpt", trained, "--in", src, "--out", out) == 0
    raw = out.read_bytes()
    assert raw[:4] == b"RGPP" and raw[6] == grid.KIND_PROBABILITY
    y = grid.read_grid(out)
    assert y.resolution == 4 * grid.read_grid(src).resolution
    assert run("export", "--in", out, "--threshold", 1e-30, "--out", tmp_path / "y.obj") == 0
    text = (tmp_path / "y.obj").read_text()
    assert sum(l.startswith("f ") for l in text.splitlines()) == 6 * 2 * y.resolution ** 2


def test_predict_wrong_resolution_exits_3(trained, tmp_path):
    grid.write_grid(grid.OccupancyGrid(np.zeros((8,) * 3, dtype=bool)), tmp_path / "x.rgpp")
    assert run("predict", "--ckpt", trained, "--in", tmp_path / "x.rgpp", "--out",
               tmp_path / "y.rgpp") == 3


def test_describe_and_views(capsys):
    assert run("describe", "--profile", "desk") == 0
    assert "7,490,357" in capsys.readouterr().out
    assert run("views", "--n", 2) == 0
    assert len(capsys.readouterr().out.split()) == 8
