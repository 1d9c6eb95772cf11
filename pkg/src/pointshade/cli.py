"""Command-line interface: data generation, training, rendering, evaluation,
benchmarks and self-tests.

Every subcommand is deterministic under a fixed seed with --threads 1 and
writes a resolved-config echo next to its output.  Exit codes: 0 success,
1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import json
import os
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import __version__

THREADS_ENV = "POINTSHADE_THREADS"


def _set_threads(n: int | None) -> int:
    import numba

    if n is None:
        n = int(os.environ.get(THREADS_ENV, numba.config.NUMBA_NUM_THREADS))
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


def _echo_config(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)


def _parse_vec3(text: str, name: str):
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) != 3:
        raise click.UsageError(f"{name} expects three comma-separated numbers, got {text!r}")
    return [float(p) for p in parts]


def _parse_lighting(spec: str | None):
    from .tracer import Lighting

    if spec in (None, "none"):
        return None
    if spec == "default-sky":
        return Lighting.default_sky()
    path = Path(spec)
    if not path.exists():
        raise click.UsageError(f"lighting spec {spec!r} is neither a preset nor a file")
    with open(path) as f:
        return Lighting.from_dict(json.load(f))


@click.group()
@click.version_option(__version__)
@click.option("--threads", "-j", type=int, default=None,
              help=f"worker threads for ray tracing (default: ${THREADS_ENV} or all cores)")
@click.pass_context
def main(ctx, threads):
    """Learned light transport on point clouds: data, training, rendering."""
    ctx.ensure_object(dict)
    ctx.obj["threads"] = _set_threads(threads)


@main.command("gen-data")
@click.option("--scenes", type=int, default=8, show_default=True, help="number of procedural scenes")
@click.option("--effect", type=str, default="ao", show_default=True, help="ao or gi")
@click.option("--points", type=int, default=20000, show_default=True, help="surface samples per cloud")
@click.option("--lightings", type=int, default=1, show_default=True, help="lighting configurations")
@click.option("--out", required=True, type=click.Path(), help="output dataset directory")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--ao-rays", type=int, default=128, show_default=True)
@click.option("--gi-rays", type=int, default=512, show_default=True)
@click.option("--bounces", type=int, default=4, show_default=True)
@click.option("--ref-size", type=int, default=256, show_default=True, help="reference image resolution")
@click.option("--split-scenes", type=str, default=None, help="explicit train,val,test scene counts")
@click.option("--split-lightings", type=str, default=None, help="explicit train,val,test lighting counts")
@click.pass_context
def gen_data(ctx, scenes, effect, points, lightings, out, seed, ao_rays, gi_rays,
             bounces, ref_size, split_scenes, split_lightings):
    """Generate a dataset: scenes, shaded point clouds, reference images."""
    from .datasets import DatasetConfig, generate_dataset

    effect = effect.lower()
    if effect not in ("ao", "gi"):
        raise click.UsageError(f"effect not supported: {effect!r} (choose ao or gi)")

    def triple(text):
        if text is None:
            return None
        parts = [int(p) for p in text.split(",")]
        if len(parts) != 3:
            raise click.UsageError("splits expect three comma-separated counts")
        return tuple(parts)

    config = DatasetConfig(
        n_scenes=scenes, n_lightings=lightings, effect=effect, n_points=points,
        seed=seed, ao_rays=ao_rays, gi_rays=gi_rays, bounces=bounces, ref_size=ref_size,
        split_scenes=triple(split_scenes), split_lightings=triple(split_lightings),
    )
    out = Path(out)
    manifest = generate_dataset(out, config, log=click.echo)
    _echo_config(out / "config.json", {"command": "gen-data", "threads": ctx.obj["threads"],
                                       "config": config.to_dict()})
    click.echo(f"wrote {len(manifest['samples'])} samples to {out}")


@main.command("train")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--variant", type=click.Choice(["ours", "2d-only", "3d-only"]), default="ours", show_default=True)
@click.option("--epochs", type=int, default=200, show_default=True)
@click.option("--batch", type=int, default=8, show_default=True)
@click.option("--lr", type=float, default=0.005, show_default=True)
@click.option("--lr-decay", type=float, default=0.7, show_default=True)
@click.option("--lr-decay-every", type=int, default=10, show_default=True)
@click.option("--out", required=True, type=click.Path(), help="output model file")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--selection-radius", type=float, default=0.075, show_default=True,
              help="Poisson radius selecting network input points")
@click.option("--latent-channels", type=int, default=8, show_default=True)
@click.option("--kernel-hidden", type=str, default="16,16", show_default=True)
@click.option("--resume", type=click.Path(exists=True), default=None, help="checkpoint to resume from")
@click.option("--dry-run", is_flag=True, help="resolve config, build the model, write the echo, exit")
@click.pass_context
def train_cmd(ctx, data_dir, variant, epochs, batch, lr, lr_decay, lr_decay_every,
              out, seed, selection_radius, latent_channels, kernel_hidden, resume, dry_run):
    """Train a model on a generated dataset."""
    from .datasets import load_manifest, load_split
    from .network import ModelConfig, build_model, save_model
    from .train import TrainConfig, train_loop, write_trace

    manifest = load_manifest(data_dir)
    effect = manifest["effect"]
    hidden = tuple(int(h) for h in kernel_hidden.split(","))
    model_config = ModelConfig(effect=effect, variant=variant, latent_channels=latent_channels,
                               selection_radius=selection_radius, kernel_hidden=hidden)
    train_config = TrainConfig(learning_rate=lr, lr_decay=lr_decay, lr_decay_every=lr_decay_every,
                               epochs=epochs, batch_size=batch, effect=effect, seed=seed,
                               selection_radius=selection_radius)
    out = Path(out)
    echo = {
        "command": "train", "data": str(data_dir), "variant": variant,
        "threads": ctx.obj["threads"], "resume": resume,
        "model_config": model_config.to_dict(), "train_config": train_config.to_dict(),
    }
    _echo_config(Path(str(out) + ".config.json"), echo)
    model = build_model(model_config, seed=seed)
    if dry_run:
        click.echo(f"dry run: {model.parameter_count()} parameters; config echoed")
        return
    train_clouds = [c for _, c in load_split(data_dir, manifest, "train")]
    val_clouds = [c for _, c in load_split(data_dir, manifest, "val")]
    if not train_clouds:
        raise click.ClickException("dataset has an empty train split")
    ckpt_dir = Path(str(out) + ".ckpts")
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    model, trace = train_loop(model, train_clouds, train_config, val_clouds=val_clouds,
                              out_dir=ckpt_dir, resume=resume, log=click.echo)
    save_model(out, model)
    write_trace(Path(str(out) + ".loss.csv"), trace)
    click.echo(f"saved model ({model.parameter_count()} parameters) to {out}")


@main.command("render")
@click.option("--model", "model_path", type=click.Path(exists=True), default=None)
@click.option("--scene", required=True, type=click.Path(exists=True), help="OBJ scene file")
@click.option("--cam-pos", type=str, default="1.9,0.7,1.9", show_default=True)
@click.option("--cam-lookat", type=str, default="0,-0.5,0", show_default=True)
@click.option("--cam-up", type=str, default="0,1,0", show_default=True)
@click.option("--cam-fov", type=float, default=45.0, show_default=True)
@click.option("--size", type=int, default=1024, show_default=True)
@click.option("--pd-radius", type=float, default=0.15, show_default=True,
              help="Poisson radius selecting the latent point set")
@click.option("--mode", type=str, default="ours", show_default=True,
              help="ours | 2d-only | 3d-only | ssao | ssgi | reference")
@click.option("--lighting", type=str, default=None, help="none | default-sky | JSON file")
@click.option("--samples", type=int, default=None, help="override surface sample count")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--no-normalize", is_flag=True, help="skip scene normalization")
@click.option("--out", required=True, type=click.Path(), help="output PFM image path")
@click.pass_context
def render_cmd(ctx, model_path, scene, cam_pos, cam_lookat, cam_up, cam_fov, size,
               pd_radius, mode, lighting, samples, seed, no_normalize, out):
    """Render one view of a scene with any mode."""
    from .images import save_pfm, save_png
    from .meshes import load_obj, normalize_scene
    from .metrics import tonemap
    from .network import load_model
    from .render import MODES, render_scene
    from .tracer import Camera

    if mode not in MODES:
        raise click.UsageError(f"unknown mode {mode!r}; expected one of {MODES}")
    model = None
    if mode in ("ours", "2d-only", "3d-only"):
        if model_path is None:
            raise click.UsageError(f"mode {mode!r} requires --model")
        model = load_model(model_path)
        if model.config.variant != mode:
            raise click.ClickException(
                f"model file declares variant {model.config.variant!r}, asked to render {mode!r}"
            )
    mesh = load_obj(scene)
    if not no_normalize:
        mesh = normalize_scene(mesh)
    camera = Camera(position=np.array(_parse_vec3(cam_pos, "--cam-pos")),
                    look_at=np.array(_parse_vec3(cam_lookat, "--cam-lookat")),
                    up=np.array(_parse_vec3(cam_up, "--cam-up")),
                    vertical_fov=cam_fov)
    light = _parse_lighting(lighting)
    t0 = time.perf_counter()
    result = render_scene(mode, mesh, camera, size, pd_radius=pd_radius, model=model,
                          lighting=light, seed=seed, n_samples=samples)
    result.stats["total_seconds"] = time.perf_counter() - t0
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_pfm(out, result.image)
    preview = result.composite if result.composite is not None else result.image
    if preview.channels == 1:
        from .images import Image

        preview = Image(values=(1.0 - preview.values), mask=preview.mask.copy())
        save_png(out.with_suffix(".png"), preview)
    else:
        save_png(out.with_suffix(".png"), tonemap(preview))
    _echo_config(Path(str(out) + ".config.json"), {
        "command": "render", "mode": mode, "scene": str(scene), "model": model_path,
        "size": size, "pd_radius": pd_radius, "seed": seed, "lighting": lighting,
        "camera": camera.to_dict(), "threads": ctx.obj["threads"], "stats": result.stats,
    })
    click.echo(json.dumps(result.stats, sort_keys=True))


@main.command("eval")
@click.option("--model", "model_spec", required=True,
              help="model file, or 'reference' / 'constant-mean' baselines")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--split", type=str, default="test", show_default=True)
@click.option("--pd-radius", type=float, default=None, help="latent selection radius (default: trained radius)")
@click.option("--size", type=int, default=None, help="render size (default: reference size)")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(), help="metrics JSON path")
@click.pass_context
def eval_cmd(ctx, model_spec, data_dir, split, pd_radius, size, seed, out):
    """3D MSE, 2D MSE and DSSIM of a model (or baseline) against a dataset."""
    from .evaluation import evaluate_model

    report = evaluate_model(model_spec, data_dir, split=split, pd_radius=pd_radius,
                            size=size, seed=seed, log=click.echo)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report["threads"] = ctx.obj["threads"]
    with open(out, "w") as f:
        json.dump(report, f, indent=1, sort_keys=True)
    agg = report["aggregate"]
    click.echo(json.dumps(agg, sort_keys=True))


@main.command("bench")
@click.option("--scene", required=True, type=click.Path(exists=True))
@click.option("--pd-radius", "radii", type=str, default="0.01,0.015,0.02", show_default=True,
              help="comma-separated Poisson radii to sweep")
@click.option("--size", type=int, default=128, show_default=True)
@click.option("--model", "model_path", type=click.Path(exists=True), default=None,
              help="model to time (default: an untrained full model)")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--no-normalize", is_flag=True)
@click.option("--out", type=click.Path(), default=None, help="write the report as JSON")
@click.pass_context
def bench_cmd(ctx, scene, radii, size, model_path, seed, no_normalize, out):
    """Latent point counts and render times across Poisson radii."""
    from .evaluation import bench_scaling

    radius_list = [float(r) for r in radii.split(",") if r]
    if not radius_list:
        raise click.UsageError("--pd-radius needs at least one value")
    report = bench_scaling(scene, radius_list, size=size, model_path=model_path,
                           seed=seed, normalize=not no_normalize, log=click.echo)
    report["threads"] = ctx.obj["threads"]
    if out:
        _echo_config(Path(out), report)
    click.echo(json.dumps(report["rows"], sort_keys=True))


@main.command("selftest")
@click.pass_context
def selftest_cmd(ctx):
    """Fast internal consistency checks; nonzero exit on any failure."""
    from .evaluation import selftest

    failures = selftest(log=click.echo)
    if failures:
        raise click.ClickException(f"{failures} self-test check(s) failed")
    click.echo("all self-tests passed")


if __name__ == "__main__":
    main()
