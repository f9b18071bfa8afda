"""Command line: bake -> train -> render, plus reference renders, metrics and probe dumps.

Options can also come from a JSON config file (``--config``) holding one
object per command (``{"bake": {...}, "train": {...}}``) with keys named like
the long options (``t_threshold`` for ``--t-threshold``). Flags given on the
command line win over the file, which wins over built-in defaults.
"""

from __future__ import annotations

import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import click
import numpy as np
from click.core import ParameterSource
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from . import __version__
from .baker import BakeConfig, Dataset, DatasetError, bake_dataset
from .geometry import SceneError
from .imageio import ImageFormatError, read_image, tonemap, write_pfm
from .metrics import MetricError, append_csv, compare
from .neural import ModelError, TrainConfig, TrainingDiverged, load_checkpoint, train
from .probes import ProbeConfig, ProbeGrid, grid_state, run_frames, write_probe_dump
from .render import GroundTruthTransfer, RenderConfig, RenderMode, render
from .scene_io import SceneFormatError, resolve_scene
from .tracer import Mode, PathConfig, render_reference

log = logging.getLogger("neuralprt")

EXIT_CONFIG = 2
EXIT_DATA = 3
THREADS_ENV = "NEURALPRT_THREADS"


class ConfigError(click.ClickException):
    exit_code = EXIT_CONFIG


class DataError(click.ClickException):
    exit_code = EXIT_DATA


@contextmanager
def _errors():
    """Map library exceptions onto the documented exit codes."""
    try:
        yield
    except click.ClickException:
        raise
    except (SceneFormatError, DatasetError, ModelError, MetricError, ImageFormatError, TrainingDiverged) as e:
        raise DataError(str(e)) from None
    except (SceneError, ValueError) as e:
        raise ConfigError(str(e)) from None


@contextmanager
def _locked(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".neuralprt.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"{out_dir} is locked by another run (remove {lock} if stale)") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


_ALIASES = {"scene": "scene_spec", "log": "log_csv"}
_FLAG = {v: k for k, v in _ALIASES.items()}


def _options(ctx: click.Context, section: str, required=("scene_spec", "out")) -> dict:
    """Merge command-line values over the config-file section over defaults."""
    params = dict(ctx.params)
    file_cfg = (ctx.obj or {}).get("file", {}).get(section, {})
    for key, value in file_cfg.items():
        k = key.replace("-", "_")
        k = _ALIASES.get(k, k)
        if k not in params:
            raise ConfigError(f"config file: unknown option '{key}' for '{section}'")
        if ctx.get_parameter_source(k) != ParameterSource.COMMANDLINE:
            params[k] = value
    for k in required:
        if params.get(k) is None:
            raise ConfigError(f"missing required option --{_FLAG.get(k, k).replace('_', '-')}")
    return params


def _manifest(ctx: click.Context, command: str, params: dict, **extra) -> dict:
    def clean(v):
        if isinstance(v, Path):
            return str(v)
        if isinstance(v, tuple):
            return list(v)
        return v

    return {"command": command, "version": __version__, "deterministic": bool((ctx.obj or {}).get("deterministic")),
            "config": {k: clean(v) for k, v in params.items()}, **extra}


def _write_manifest(path: Path, manifest: dict):
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))


def _save_image(out: Path, stem: str, img: np.ndarray, exposure: float, manifest: dict):
    """PFM + sidecar JSON, and PNG with the manifest in a text chunk."""
    write_pfm(out / f"{stem}.pfm", img)
    _write_manifest(out / f"{stem}.json", manifest)
    info = PngInfo()
    info.add_text("neuralprt", json.dumps(manifest, sort_keys=True, default=str))
    Image.fromarray(np.round(tonemap(img, exposure) * 255).astype(np.uint8)).save(out / f"{stem}.png", pnginfo=info)


def _scene(spec: str):
    if not spec.startswith("builtin:") and not Path(spec).exists():
        raise ConfigError(f"scene file {spec} does not exist")
    return resolve_scene(spec)


def _probe_config(p: dict) -> ProbeConfig:
    return ProbeConfig(n=p["grid"], rays=p["rays"], width=p["map_width"], height=p["map_height"], L=p.get("degree", 4),
                       bounces=p["probe_bounces"], seed=p["seed"])


def _probe_options(f):
    opts = [
        click.option("--frames", default=50, show_default=True, help="Probe accumulation frames."),
        click.option("--grid", default=8, show_default=True, help="Probes per axis."),
        click.option("--rays", default=100, show_default=True, help="Rays per probe per frame."),
        click.option("--map-width", default=100, show_default=True),
        click.option("--map-height", default=50, show_default=True),
        click.option("--probe-bounces", default=3, show_default=True, help="Path length of probe rays."),
    ]
    for o in reversed(opts):
        f = o(f)
    return f


@click.group()
@click.version_option(__version__)
@click.option("--config", "config_file", type=click.Path(dir_okay=False), help="JSON config file.")
@click.option("--deterministic", is_flag=True, help="Single-threaded kernels; bit-reproducible output.")
@click.option("-v", "--verbose", count=True)
@click.pass_context
def main(ctx, config_file, deterministic, verbose):
    """Neural precomputed radiance transfer with SH light probes."""
    logging.basicConfig(level=logging.WARNING - 10 * verbose, format="%(levelname)s %(name)s: %(message)s")
    file_cfg = {}
    if config_file:
        if not Path(config_file).exists():
            raise ConfigError(f"config file {config_file} does not exist")
        try:
            file_cfg = json.loads(Path(config_file).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{config_file}:{e.lineno}:{e.colno}: {e.msg}") from None
    threads = os.environ.get(THREADS_ENV)
    import numba

    if deterministic:
        numba.set_num_threads(1)
    elif threads:
        try:
            numba.set_num_threads(max(1, min(int(threads), numba.config.NUMBA_NUM_THREADS)))
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer") from None
    ctx.obj = {"file": file_cfg, "deterministic": deterministic}


# -- bake -------------------------------------------------------------------------------


@main.command()
@click.option("--scene", "scene_spec", default=None, help="Scene file or builtin:<name>.")
@click.option("--out", default=None, type=click.Path(dir_okay=False), help="Dataset file to write.")
@click.option("--samples", default=2_048_000, show_default=True, help="Surface samples (records).")
@click.option("--incident", default=2000, show_default=True, help="Incident directions per sample.")
@click.option("--t-threshold", type=float, default=None, help="Visibility distance [default: 2x object radius].")
@click.option("--degree", default=4, show_default=True, help="SH degree L.")
@click.option("--seed", default=0, show_default=True)
@click.option("--chunk", default=4096, show_default=True, help="Records per write.")
@click.pass_context
def bake(ctx, **_):
    """Bake ground-truth transfer coefficients into a dataset file."""
    p = _options(ctx, "bake")
    with _errors():
        scene = _scene(p["scene_spec"])
        cfg = BakeConfig(p["samples"], p["incident"], p["t_threshold"], p["degree"], p["seed"], p["chunk"])
        out = Path(p["out"])
        with _locked(out.parent):
            t0 = time.perf_counter()
            last = [0.0]

            def progress(done, total):
                if time.perf_counter() - last[0] > 5 or done == total:
                    last[0] = time.perf_counter()
                    click.echo(f"baked {done}/{total} ({done / total:.0%})", err=True)

            meta = _manifest(ctx, "bake", p, scene_fingerprint=scene.fingerprint(), seed=p["seed"])
            bake_dataset(scene, cfg, out, meta, progress)
        summary = Dataset.open(out).summary()
        summary["seconds"] = round(time.perf_counter() - t0, 2)
        click.echo(json.dumps(summary, indent=2))


# -- train ------------------------------------------------------------------------------


@main.command("train")
@click.option("--scene", "scene_spec", default=None)
@click.option("--dataset", default=None, type=click.Path(dir_okay=False))
@click.option("--out", default=None, type=click.Path(dir_okay=False), help="Checkpoint file to write.")
@click.option("--iterations", default=50_000, show_default=True)
@click.option("--batch", default=2048, show_default=True)
@click.option("--lr", default=1e-4, show_default=True)
@click.option("--latent-dim", default=7, show_default=True)
@click.option("--hidden", default=128, show_default=True)
@click.option("--layers", default=3, show_default=True)
@click.option("--holdout", default=0.1, show_default=True, help="Held-out fraction.")
@click.option("--object-specific", is_flag=True, help="One decoder per object.")
@click.option("--resume", type=click.Path(dir_okay=False), default=None, help="Checkpoint to continue.")
@click.option("--log", "log_csv", type=click.Path(dir_okay=False), default=None, help="Loss CSV [default: <out>.csv].")
@click.option("--seed", default=0, show_default=True)
@click.pass_context
def train_cmd(ctx, **_):
    """Jointly fit vertex latents and the decoder to a baked dataset."""
    p = _options(ctx, "train", ("scene_spec", "dataset", "out"))
    with _errors():
        for k in ("dataset", "resume"):
            if p[k] and not Path(p[k]).exists():
                raise ConfigError(f"{k} file {p[k]} does not exist")
        scene = _scene(p["scene_spec"])
        ds = Dataset.open(p["dataset"])
        ds.check_scene(scene)
        cfg = TrainConfig(batch=p["batch"], lr=p["lr"], iterations=p["iterations"], seed=p["seed"], d=p["latent_dim"],
                          hidden=p["hidden"], layers=p["layers"], holdout=p["holdout"],
                          object_specific=p["object_specific"])
        out = Path(p["out"])
        with _locked(out.parent):
            res = train(ds, scene, cfg, log_path=p["log_csv"] or out.with_suffix(".csv"), resume=p["resume"],
                        progress=lambda it, loss: click.echo(f"iter {it} loss {loss:.6g}", err=True)
                        if it % 1000 == 0 else None)
            res.model.config["run"] = _manifest(ctx, "train", p, seed=p["seed"])
            res.model.save(out, res.model._optimizer)
        click.echo(json.dumps({"iterations": res.model.iteration, "train_loss": res.train_loss,
                               "holdout_l1": res.holdout_l1, "mean_abs_t": res.mean_abs_t,
                               "holdout_ratio": None if res.holdout_l1 is None else res.holdout_l1 / res.mean_abs_t},
                              indent=2))


# -- render -----------------------------------------------------------------------------


def _transfer_source(scene, p):
    if p["checkpoint"]:
        if not Path(p["checkpoint"]).exists():
            raise ConfigError(f"checkpoint {p['checkpoint']} does not exist")
        model = load_checkpoint(p["checkpoint"])
        if model.n_vertices != scene.n_vertices:
            raise DataError(f"checkpoint has {model.n_vertices} vertices, scene has {scene.n_vertices}")
        return model
    return GroundTruthTransfer(scene, BakeConfig(n_incident=p["incident"]), seed=p["seed"])


@main.command("render")
@click.option("--scene", "scene_spec", default=None)
@click.option("--checkpoint", type=click.Path(dir_okay=False), default=None,
              help="Trained model; without it transfer is baked per pixel.")
@click.option("--out", default=None, type=click.Path(file_okay=False))
@_probe_options
@click.option("--mode", type=click.Choice(["gi_only", "gi_plus_di", "both"]), default="both", show_default=True)
@click.option("--width", default=128, show_default=True)
@click.option("--height", default=128, show_default=True)
@click.option("--specular-bounces", default=1, show_default=True)
@click.option("--exposure", default=1.0, show_default=True)
@click.option("--di-spp", default=64, show_default=True)
@click.option("--incident", default=2000, show_default=True, help="Directions for per-pixel ground-truth transfer.")
@click.option("--hanning", is_flag=True, help="Taper light coefficients over bands.")
@click.option("--seed", default=0, show_default=True)
@click.pass_context
def render_cmd(ctx, **_):
    """Converge the probe grid and render GI (and GI+DI) images."""
    p = _options(ctx, "render")
    with _errors():
        scene = _scene(p["scene_spec"])
        if scene.camera is None:
            raise ConfigError("scene has no camera")
        source = _transfer_source(scene, p)
        out = Path(p["out"])
        with _locked(out):
            grid = ProbeGrid.from_scene(scene, _probe_config(p))
            run_frames(scene, grid, p["frames"])
            man = _manifest(ctx, "render", p, seed=p["seed"], probes=grid_state(grid))
            modes = ["gi_only", "gi_plus_di"] if p["mode"] == "both" else [p["mode"]]
            res = render(scene, scene.camera, source, grid,
                         RenderConfig(modes[-1], p["width"], p["height"], p["specular_bounces"], p["exposure"],
                                      p["seed"], p["di_spp"], p["hanning"]))
            for m in modes:
                img = res.gi if m == "gi_only" else res.image
                _save_image(out, m, img, p["exposure"], man)
            write_probe_dump(grid, out / "probes.bin", p["seed"], man)
            man["outputs"] = sorted(f.name for f in out.iterdir() if not f.name.startswith("."))
            man["clamped_pixels"] = res.stats.clamped
            _write_manifest(out / "manifest.json", man)
        click.echo(json.dumps({"out": str(out), "images": modes, "clamped_pixels": res.stats.clamped}))


@main.command("render-reference")
@click.option("--scene", "scene_spec", default=None)
@click.option("--out", default=None, type=click.Path(file_okay=False))
@click.option("--spp", default=4096, show_default=True)
@click.option("--mode", type=click.Choice([m.value for m in Mode]), default="gi_only", show_default=True)
@click.option("--max-bounces", default=8, show_default=True)
@click.option("--width", default=128, show_default=True)
@click.option("--height", default=128, show_default=True)
@click.option("--exposure", default=1.0, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.pass_context
def render_reference_cmd(ctx, **_):
    """Path-traced reference image."""
    p = _options(ctx, "render-reference")
    with _errors():
        scene = _scene(p["scene_spec"])
        if scene.camera is None:
            raise ConfigError("scene has no camera")
        out = Path(p["out"])
        with _locked(out):
            ref = render_reference(scene, scene.camera.with_resolution(p["width"], p["height"]),
                                   PathConfig(p["max_bounces"], p["spp"], p["mode"], seed=p["seed"]))
            man = _manifest(ctx, "render-reference", p, seed=p["seed"])
            _save_image(out, f"reference_{p['mode']}", ref.image, p["exposure"], man)
            write_pfm(out / f"reference_{p['mode']}_stderr.pfm", ref.std_error)
            _write_manifest(out / "manifest.json", man)
        click.echo(json.dumps({"out": str(out), "mean": float(ref.image.mean()),
                               "mean_std_error": float(ref.std_error.mean())}))


# -- eval -------------------------------------------------------------------------------


@main.command("eval")
@click.argument("images", nargs=-1, required=True)
@click.option("--linear", is_flag=True, help="Compare linear radiance instead of display values.")
@click.option("--exposure", default=1.0, show_default=True)
@click.option("--tag", default="", help="Mode tag stored with every row.")
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), default=None, help="Append rows to this CSV.")
@click.pass_context
def eval_cmd(ctx, images, linear, exposure, tag, csv_path):
    """Compare image pairs: A B [A2 B2 ...]; one row per pair, in the order given."""
    if len(images) % 2:
        raise ConfigError("eval takes image pairs (an even number of paths)")
    with _errors():
        reports = []
        for a, b in zip(images[0::2], images[1::2]):
            for f in (a, b):
                if not Path(f).exists():
                    raise ConfigError(f"image {f} does not exist")
            r = compare(read_image(a), read_image(b), linear=linear, exposure=exposure, image_a=a, image_b=b,
                        mode=tag or ("linear" if linear else "display"))
            reports.append(r)
            click.echo(json.dumps(r.row()))
        if csv_path:
            append_csv(csv_path, reports)


# -- probe dump -------------------------------------------------------------------------


@main.command("probe-dump")
@click.option("--scene", "scene_spec", default=None)
@click.option("--out", default=None, type=click.Path(file_okay=False))
@_probe_options
@click.option("--seed", default=0, show_default=True)
@click.pass_context
def probe_dump_cmd(ctx, **_):
    """Write the probe index, per-probe irradiance maps and coefficient slices."""
    p = _options(ctx, "probe-dump")
    with _errors():
        scene = _scene(p["scene_spec"])
        out = Path(p["out"])
        with _locked(out):
            grid = ProbeGrid.from_scene(scene, _probe_config(p))
            run_frames(scene, grid, p["frames"])
            man = _manifest(ctx, "probe-dump", p, seed=p["seed"], probes=grid_state(grid))
            write_probe_dump(grid, out / "probes.bin", p["seed"], man)
            for i in range(grid.n_probes):
                write_pfm(out / f"probe_{i:05d}.pfm", grid.probe(i).irradiance_map.means())
            slices = out / "slices"
            slices.mkdir(exist_ok=True)
            n = grid.n
            for l, m in ((0, 0), (1, 0), (2, 0)):
                k = l * l + l + m
                # N x (N*N) tiles: row = j, column block = k (z index), i within block
                c = grid.coeffs[:, :, k].reshape(n, n, n, 3)
                img = np.concatenate([c[:, :, z].transpose(1, 0, 2) for z in range(n)], axis=1)
                write_pfm(slices / f"coeff_l{l}_m{m}.pfm", img)
            _write_manifest(slices / "manifest.json", man)
        click.echo(json.dumps({"out": str(out), "probes": grid.n_probes, "valid": int(grid.valid.sum()),
                               "stale": int(grid.stale.sum())}))


# -- ablate -----------------------------------------------------------------------------


def _ints(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x.strip()]


def _sizes(s: str) -> list[tuple[int, int]]:
    return [tuple(int(v) for v in x.lower().split("x")) for x in s.split(",") if x.strip()]


@main.command("ablate")
@click.option("--scene", "scene_spec", default=None)
@click.option("--reference", type=click.Path(dir_okay=False), default=None,
              help="GI reference PFM; rendered at --ref-spp when absent.")
@click.option("--out", default=None, type=click.Path(dir_okay=False), help="CSV file.")
@click.option("--maps", default="50x25,100x50,200x100", show_default=True)
@click.option("--grids", default="4,8,16", show_default=True)
@click.option("--rays-list", default="50,100,200", show_default=True)
@click.option("--latent-dims", default="7,23", show_default=True)
@click.option("--dataset", type=click.Path(dir_okay=False), default=None, help="Needed for the latent-dim rows.")
@click.option("--iterations", default=50_000, show_default=True, help="Training length for latent-dim rows.")
@click.option("--checkpoint", type=click.Path(dir_okay=False), default=None,
              help="Model for the probe rows; ground-truth transfer when absent.")
@click.option("--frames", default=50, show_default=True)
@click.option("--width", default=128, show_default=True)
@click.option("--height", default=128, show_default=True)
@click.option("--ref-spp", default=4096, show_default=True)
@click.option("--incident", default=2000, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.pass_context
def ablate_cmd(ctx, **_):
    """Sweep map resolution, grid size, rays per probe and latent size; one CSV row each."""
    p = _options(ctx, "ablate")
    with _errors():
        scene = _scene(p["scene_spec"])
        cam = scene.camera.with_resolution(p["width"], p["height"])
        if p["reference"]:
            ref = read_image(p["reference"])
        else:
            ref = render_reference(scene, cam, PathConfig(spp=p["ref_spp"], mode=Mode.GI_ONLY, seed=p["seed"] + 1)).image
        rows = ablation_rows(scene, cam, ref, p)
        append_csv(p["out"], rows)
        for r in rows:
            click.echo(json.dumps(r.row()))


def ablation_rows(scene, cam, ref, p) -> list:
    base = dict(grid=8, rays=100, map_width=100, map_height=50, probe_bounces=3, seed=p["seed"])
    rcfg = RenderConfig("gi_only", cam.width, cam.height, seed=p["seed"])
    if p.get("checkpoint"):
        source = load_checkpoint(p["checkpoint"])
    else:
        source = GroundTruthTransfer(scene, BakeConfig(n_incident=p["incident"]), seed=p["seed"])
    # transfer does not depend on probe settings; bake it once for all probe rows
    if isinstance(source, GroundTruthTransfer):
        source = _cached(source)

    def one(knob, value, **over):
        q = {**base, **over}
        grid = ProbeGrid.from_scene(scene, _probe_config(q))
        run_frames(scene, grid, p["frames"])
        img = render(scene, cam, source, grid, rcfg).gi
        return compare(img, ref, knob=knob, value=value)

    rows = []
    for w, h in _sizes(p["maps"]):
        rows.append(one("map", f"{w}x{h}", map_width=w, map_height=h))
    for n in _ints(p["grids"]):
        rows.append(one("grid", n, grid=n))
    for m in _ints(p["rays_list"]):
        rows.append(one("rays", m, rays=m))
    if p.get("dataset"):
        ds = Dataset.open(p["dataset"])
        grid = ProbeGrid.from_scene(scene, _probe_config(base))
        run_frames(scene, grid, p["frames"])
        for d in _ints(p["latent_dims"]):
            res = train(ds, scene, TrainConfig(iterations=p["iterations"], d=d, seed=p["seed"]))
            img = render(scene, cam, res.model, grid, rcfg).gi
            rows.append(compare(img, ref, knob="latent_dim", value=d))
    return rows


class _cached:
    """Memoise a transfer source on the G-buffer pixels it was asked for."""

    def __init__(self, source):
        self.source = source
        self.L = source.L
        self._key = None
        self._val = None

    def __call__(self, gb):
        key = (gb.position.tobytes(), gb.view.tobytes())
        if key != self._key:
            self._key, self._val = key, self.source(gb)
        return self._val


def run():  # pragma: no cover - console entry
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    main()
