import csv
import json

import numpy as np
import pytest
from click.testing import CliRunner
from PIL import Image

from neuralprt import __version__
from neuralprt.cli import EXIT_CONFIG, EXIT_DATA, main
from neuralprt.imageio import read_pfm, write_pfm

SCENE = "builtin:cornell"
TINY_PROBES = ["--grid", "2", "--rays", "20", "--frames", "2", "--map-width", "20", "--map-height", "10"]


def run(*args, ok=True):
    res = CliRunner().invoke(main, [str(a) for a in args])
    if ok:
        assert res.exit_code == 0, res.output
    return res


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    run("bake", "--scene", SCENE, "--out", d / "ds.bin", "--samples", 400, "--incident", 32, "--chunk", 100)
    run("train", "--scene", SCENE, "--dataset", d / "ds.bin", "--out", d / "m.ckpt", "--iterations", 6, "--batch", 32,
        "--hidden", 16, "--layers", 1)
    return d


def test_help_and_version():
    out = run("bake", "--help").output
    assert "--incident" in out and "default: 2000" in out
    assert "--samples" in out and "default: 2048000" in out
    for cmd in ("train", "render", "render-reference", "eval", "probe-dump", "ablate"):
        assert run(cmd, "--help").exit_code == 0
    assert __version__ in run("--version").output


def test_bake_is_byte_identical(workdir):
    first = (workdir / "ds.bin").read_bytes()
    out = run("bake", "--scene", SCENE, "--out", workdir / "ds.bin", "--samples", 400, "--incident", 32, "--chunk",
              100).output
    assert (workdir / "ds.bin").read_bytes() == first
    assert json.loads(out[out.index("{"):])["n_records"] == 400


def test_train_writes_log_and_resumes(workdir):
    log = list(csv.reader(open(workdir / "m.csv")))
    assert log[0] == ["iteration", "wall_clock", "loss"]
    out = run("train", "--scene", SCENE, "--dataset", workdir / "ds.bin", "--out", workdir / "m2.ckpt",
              "--iterations", 9, "--batch", 32, "--hidden", 16, "--layers", 1, "--resume", workdir / "m.ckpt",
              "--log", workdir / "resumed.csv").output
    assert json.loads(out[out.index("{"):])["iterations"] == 9


def test_render_outputs(workdir):
    out = workdir / "render"
    run("render", "--scene", SCENE, "--checkpoint", workdir / "m.ckpt", "--out", out, *TINY_PROBES, "--width", 16,
        "--height", 12, "--di-spp", 2)
    for stem in ("gi_only", "gi_plus_di"):
        assert read_pfm(out / f"{stem}.pfm").shape == (12, 16, 3)
        side = json.loads((out / f"{stem}.json").read_text())
        assert side["command"] == "render" and side["config"]["grid"] == 2 and side["seed"] == 0
        text = Image.open(out / f"{stem}.png").text
        assert json.loads(text["neuralprt"])["command"] == "render"
    man = json.loads((out / "manifest.json").read_text())
    assert "probes.bin" in man["outputs"] and man["probes"]["frames"] == 2
    assert not (out / ".neuralprt.lock").exists()


def test_deterministic_render(workdir):
    imgs = []
    for k in range(2):
        out = workdir / f"det{k}"
        run("--deterministic", "render", "--scene", SCENE, "--checkpoint", workdir / "m.ckpt", "--out", out,
            *TINY_PROBES, "--width", 16, "--height", 16, "--mode", "gi_only")
        imgs.append((out / "gi_only.pfm").read_bytes())
    assert imgs[0] == imgs[1]


def test_reference_and_eval(workdir):
    ref = workdir / "ref"
    run("render-reference", "--scene", SCENE, "--out", ref, "--spp", 4, "--width", 16, "--height", 16)
    assert (ref / "reference_gi_only.pfm").exists() and (ref / "reference_gi_only_stderr.pfm").exists()
    a = ref / "reference_gi_only.pfm"
    write_pfm(workdir / "b.pfm", read_pfm(a) * 2)
    out = run("eval", a, workdir / "b.pfm", a, a, "--csv", workdir / "e.csv", "--tag", "gi").output
    rows = [json.loads(line) for line in out.strip().splitlines()]
    assert rows[0]["image_b"].endswith("b.pfm") and rows[1]["ssim"] == 1.0 and rows[1]["rmse"] == 0
    table = list(csv.DictReader(open(workdir / "e.csv")))
    assert [r["mode"] for r in table] == ["gi", "gi"] and float(table[0]["rmse"]) > 0


def test_probe_dump(workdir):
    out = workdir / "dump"
    run("probe-dump", "--scene", SCENE, "--out", out, *TINY_PROBES)
    assert (out / "probes.bin").exists()
    assert len(list(out.glob("probe_*.pfm"))) == 8
    assert read_pfm(out / "probe_00000.pfm").shape == (10, 20, 3)
    assert read_pfm(out / "slices" / "coeff_l0_m0.pfm").shape == (2, 4, 3)
    assert json.loads((out / "slices" / "manifest.json").read_text())["command"] == "probe-dump"


def test_ablate_rows(workdir):
    out = workdir / "ablate.csv"
    run("ablate", "--scene", SCENE, "--out", out, "--maps", "20x10,40x20", "--grids", "2,3", "--rays-list", "10",
        "--frames", 1, "--width", 16, "--height", 16, "--ref-spp", 2, "--incident", 16)
    rows = list(csv.DictReader(open(out)))
    assert [(r["knob"], r["value"]) for r in rows] == [("map", "20x10"), ("map", "40x20"), ("grid", "2"),
                                                        ("grid", "3"), ("rays", "10")]


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"bake": {"scene": SCENE, "out": str(tmp_path / "a.bin"), "samples": 30,
                                        "incident": 8}}))
    out = run("--config", cfg, "bake").output
    assert json.loads(out[out.index("{"):])["n_records"] == 30
    out = run("--config", cfg, "bake", "--samples", 12).output
    assert json.loads(out[out.index("{"):])["n_records"] == 12


def test_exit_codes(workdir, tmp_path):
    assert run("bake", "--out", tmp_path / "x.bin", ok=False).exit_code == EXIT_CONFIG
    assert run("bake", "--scene", tmp_path / "nope.json", "--out", tmp_path / "x.bin", ok=False).exit_code == \
        EXIT_CONFIG
    assert run("train", "--scene", SCENE, "--dataset", tmp_path / "nope.bin", "--out", tmp_path / "m.ckpt",
               ok=False).exit_code == EXIT_CONFIG
    (tmp_path / "junk.bin").write_bytes(b"\0" * 100)
    assert run("train", "--scene", SCENE, "--dataset", tmp_path / "junk.bin", "--out", tmp_path / "m.ckpt",
               ok=False).exit_code == EXIT_DATA
    assert run("train", "--scene", "builtin:desk", "--dataset", workdir / "ds.bin", "--out", tmp_path / "m.ckpt",
               ok=False).exit_code == EXIT_DATA
    assert run("render", "--scene", "builtin:desk", "--checkpoint", workdir / "m.ckpt", "--out", tmp_path / "r",
               ok=False).exit_code == EXIT_DATA
    (tmp_path / "bad.json").write_text("{")
    assert run("--config", tmp_path / "bad.json", "bake", ok=False).exit_code == EXIT_CONFIG
    (tmp_path / "unknown.json").write_text(json.dumps({"bake": {"colour": "red"}}))
    assert run("--config", tmp_path / "unknown.json", "bake", ok=False).exit_code == EXIT_CONFIG
    assert run("eval", workdir / "b.pfm", ok=False).exit_code == EXIT_CONFIG
    assert run("bake", "--scene", SCENE, "--out", tmp_path / "y.bin", "--samples", 0, ok=False).exit_code == \
        EXIT_CONFIG
    (tmp_path / "scene.json").write_text(json.dumps({"format_version": 9}))
    assert run("bake", "--scene", tmp_path / "scene.json", "--out", tmp_path / "z.bin", ok=False).exit_code == \
        EXIT_DATA


def test_locked_output_directory(tmp_path):
    out = tmp_path / "locked"
    out.mkdir()
    (out / ".neuralprt.lock").write_text("123")
    res = run("render-reference", "--scene", SCENE, "--out", out, "--spp", 1, "--width", 4, "--height", 4, ok=False)
    assert res.exit_code == EXIT_CONFIG and "locked" in res.output
