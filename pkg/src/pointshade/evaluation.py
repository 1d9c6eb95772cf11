"""Model evaluation against datasets, scaling benchmarks, self-tests."""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from .cloud import load_pcls
from .datasets import load_manifest, load_split
from .estimator import predict_points
from .images import Image, load_pfm
from .meshes import load_obj, normalize_scene
from .metrics import dssim, mse_2d, mse_3d, tonemap
from .network import ModelConfig, build_model, load_model
from .render import render_scene
from .seeding import derive_seed
from .tracer import Camera, Lighting

BASELINES = ("reference", "constant-mean")


def _tonemap_pair(pred: Image, ref: Image):
    """Tone-map both images with the reference's exposure so the comparison
    sees shading differences, not per-image auto-exposure."""
    lum = ref.luminance()[ref.mask]
    scale = 1.0 / max(float(np.percentile(lum, 90.0)), 1e-6)
    return tonemap(pred, scale=scale), tonemap(ref, scale=scale)


def evaluate_model(model_spec: str, data_dir, split: str = "test", pd_radius: float | None = None,
                   size: int | None = None, seed: int = 0, log=None) -> dict:
    """Per-item and aggregate {mse3d, mse2d, dssim} for a model or baseline."""
    say = log if log is not None else (lambda *_: None)
    data_dir = Path(data_dir)
    manifest = load_manifest(data_dir)
    effect = manifest["effect"]
    camera = Camera.from_dict(manifest["camera"])
    size = size or manifest["config"]["ref_size"]
    items = load_split(data_dir, manifest, split)
    if not items:
        raise ValueError(f"split {split!r} is empty")

    model = None
    constant = None
    if model_spec == "constant-mean":
        train_items = load_split(data_dir, manifest, "train")
        if not train_items:
            raise ValueError("constant-mean baseline needs a train split")
        constant = np.mean(np.concatenate([c.target for _, c in train_items], axis=0),
                           axis=0, keepdims=True)
    elif model_spec != "reference":
        model = load_model(model_spec)
        if model.config.effect != effect:
            raise ValueError(f"model effect {model.config.effect!r} does not match dataset {effect!r}")

    sample_by_name = {s["name"]: s for s in manifest["samples"]}
    rows = []
    for name, cloud in items:
        sample = sample_by_name[name]
        ref_path = data_dir / manifest["references"][name]
        ref_img = load_pfm(ref_path)
        lighting = None
        if not manifest["lighting_independent"]:
            lighting = Lighting.from_dict(manifest["lightings"][sample["lighting"]])

        if model_spec == "reference":
            pred3d = cloud.target
            pred_img = ref_img
        elif model_spec == "constant-mean":
            pred3d = np.tile(constant, (len(cloud), 1))
            values = np.tile(constant.astype(np.float32), (ref_img.height, ref_img.width, 1))
            pred_img = Image(values=values, mask=ref_img.mask.copy())
        else:
            pred3d = predict_points(model, cloud, seed=seed, selection_radius=pd_radius)
            mesh = normalize_scene(load_obj(data_dir / manifest["scenes"][sample["scene"]]))
            result = render_scene(model.config.variant, mesh, camera, size,
                                  pd_radius=pd_radius or model.config.selection_radius,
                                  model=model, lighting=lighting,
                                  seed=derive_seed(seed, "eval", name))
            pred_img = result.image
        tm_pred, tm_ref = _tonemap_pair(pred_img, ref_img)
        row = {
            "name": name,
            "mse3d": mse_3d(pred3d, cloud.target),
            "mse2d": mse_2d(tm_pred, tm_ref),
            "dssim": dssim(tm_pred, tm_ref),
        }
        rows.append(row)
        say(f"{name}: mse3d {row['mse3d']:.5f}  mse2d {row['mse2d']:.5f}  dssim {row['dssim']:.5f}")

    aggregate = {
        "mse3d": float(np.mean([r["mse3d"] for r in rows])),
        "mse2d": float(np.mean([r["mse2d"] for r in rows])),
        "dssim": float(np.mean([r["dssim"] for r in rows])),
    }
    return {"model": model_spec, "split": split, "size": size,
            "items": rows, "aggregate": aggregate}


def bench_scaling(scene_path, radii, size: int = 128, model_path=None, seed: int = 0,
                  normalize: bool = True, log=None) -> dict:
    """Sweep the latent selection radius; report counts and times."""
    say = log if log is not None else (lambda *_: None)
    mesh = load_obj(scene_path)
    if normalize:
        mesh = normalize_scene(mesh)
    if model_path is not None:
        model = load_model(model_path)
    else:
        model = build_model(ModelConfig(), seed=seed)
    camera = Camera(position=np.array([1.9, 0.7, 1.9]), look_at=np.array([0.0, -0.5, 0.0]))
    lighting = Lighting.default_sky() if model.config.effect == "gi" else None
    rows = []
    for r in sorted(radii, reverse=True):  # large radii first warm the JIT cheaply
        t0 = time.perf_counter()
        result = render_scene(model.config.variant, mesh, camera, size, pd_radius=float(r),
                              model=model, lighting=lighting, seed=seed)
        total = time.perf_counter() - t0
        row = {
            "pd_radius": float(r),
            "latent_points": int(result.stats["latent_points"]),
            "network_seconds": float(result.stats["network_seconds"]),
            "selection_seconds": float(result.stats["selection_seconds"]),
            "total_seconds": float(total),
        }
        rows.append(row)
        say(json.dumps(row, sort_keys=True))
    rows.sort(key=lambda r: r["pd_radius"])
    report = {"scene": str(scene_path), "size": size, "rows": rows}
    if len(rows) >= 2:
        counts = np.log([r["latent_points"] for r in rows])
        times = np.log([r["network_seconds"] for r in rows])
        slope = float(np.polyfit(counts, times, 1)[0])
        report["loglog_slope"] = slope
    return report


def selftest(log=None) -> int:
    """Fast internal consistency checks; returns the number of failures."""
    say = log if log is not None else (lambda *_: None)
    failures = 0

    def check(name, fn):
        nonlocal failures
        try:
            fn()
            say(f"PASS {name}")
        except Exception as e:  # noqa: BLE001 - report any failure uniformly
            failures += 1
            say(f"FAIL {name}: {e}")

    def grid_vs_linear():
        from .grid import build_grid

        rng = np.random.default_rng(0)
        pts = rng.uniform(-1, 1, size=(500, 3))
        g = build_grid(pts, cell_size=0.2)
        for _ in range(20):
            x = rng.uniform(-1, 1, size=3)
            nb = g.query_radius(x, 0.3)
            ref = np.nonzero(np.linalg.norm(pts - x, axis=1) < 0.3)[0]
            assert set(nb.indices.tolist()) == set(ref.tolist())

    def poisson_invariants():
        from .cloud import poisson_disk_indices

        rng = np.random.default_rng(1)
        pts = rng.uniform(-1, 1, size=(2000, 3))
        idx = poisson_disk_indices(pts, 0.2, seed=0)
        kept = pts[idx]
        for i in range(len(kept)):
            d = np.linalg.norm(kept[i + 1 :] - kept[i], axis=1)
            assert np.all(d >= 0.2), "min distance violated"
        mask = np.zeros(len(pts), bool)
        mask[idx] = True
        for p in pts[~mask]:
            assert np.linalg.norm(kept - p, axis=1).min() < 0.2, "not maximal"

    def conv_matches_formula():
        from .conv import MCConvLayer, mc_convolve

        rng = np.random.default_rng(2)
        pts_in = rng.uniform(-0.5, 0.5, size=(8, 3))
        pts_out = rng.uniform(-0.5, 0.5, size=(5, 3))
        feats = rng.normal(size=(8, 2))
        layer = MCConvLayer.create("selftest", 0.6, 2, 2, hidden=(4, 4), seed=0)
        for blk in layer.param_blocks():
            blk.astype(np.float64)
        h = 0.25 * 0.6
        dens = np.array([
            sum(max(0.0, 1.0 - (np.linalg.norm(p - q) / h) ** 2) for q in pts_in)
            for p in pts_in
        ])
        ours = mc_convolve(layer, pts_in, feats, pts_out, densities=dens)
        ws = [w.values for w in layer.mlp.weights]
        bs = [b.values for b in layer.mlp.biases]

        def kernel(off):
            hvec = off
            for li in range(len(ws)):
                hvec = hvec @ ws[li] + bs[li]
                if li != len(ws) - 1:
                    hvec = np.where(hvec > 0, hvec, 0.01 * hvec)
            return hvec

        for i in range(len(pts_out)):
            nbrs = [j for j in range(len(pts_in)) if np.linalg.norm(pts_out[i] - pts_in[j]) < 0.6]
            acc = np.zeros(2)
            for j in nbrs:
                g = kernel((pts_out[i] - pts_in[j]) / 0.6)
                for ci in range(2):
                    for co in range(2):
                        acc[co] += feats[j, ci] * g[ci * 2 + co] / dens[j]
            if nbrs:
                acc = acc / len(nbrs) + layer.bias.values
            assert np.allclose(ours[i], acc, rtol=1e-6, atol=1e-9), f"pixel {i} deviates"

    def conv_gradcheck():
        from . import autodiff as ad
        from .autodiff import ParamBlock, gradcheck
        from .conv import MCConvLayer, mc_convolve, plan_pairs

        rng = np.random.default_rng(3)
        pts_in = rng.uniform(-0.4, 0.4, size=(10, 3))
        pts_out = rng.uniform(-0.4, 0.4, size=(5, 3))
        layer = MCConvLayer.create("selftest-grad", 0.5, 2, 2, hidden=(4, 4), seed=1)
        pairs = plan_pairs(pts_in, pts_out, 0.5, dtype=np.float64)
        feats = ParamBlock("f", rng.normal(size=(10, 2)))

        def loss(tape):
            out = mc_convolve(layer, pts_in, tape.param(feats), pts_out, pairs=pairs, tape=tape)
            return ad.mean(ad.square(out))

        err = gradcheck(loss, layer.param_blocks() + [feats])
        assert err < 1e-4, f"gradcheck error {err:.2e}"

    def analytic_ao():
        from .meshes import TriangleMesh
        from .tracer import ao_at_point, build_bvh

        big = 50.0
        verts = np.array([[-big, 0, -big], [big, 0, -big], [big, 0, big], [-big, 0, big],
                          [-1e-4, -1, -big], [-1e-4, -1, big], [-1e-4, big, big], [-1e-4, big, -big]])
        tris = np.array([[0, 1, 2], [0, 2, 3], [4, 5, 6], [4, 6, 7]], np.int32)
        mesh = TriangleMesh(verts, tris, np.zeros(4, np.int32), np.full((1, 3), 0.5, np.float32))
        bvh = build_bvh(mesh)
        n_rays = 2048
        occ = ao_at_point(bvh, [1.0, 0.0, 0.0], [0, 1, 0], r_ao=0.5, n_rays=n_rays, seed=0)
        assert occ < 4 * np.sqrt(0.25 / n_rays), f"open plane occlusion {occ}"
        occ = ao_at_point(bvh, [0.0, 0.0, 0.0], [0, 1, 0], r_ao=0.5, n_rays=n_rays, seed=0)
        sigma = np.sqrt(0.25 / n_rays)
        assert abs(occ - 0.5) < 4 * sigma, f"half-space occlusion {occ}"

    def metric_identities():
        from .metrics import dssim as _dssim
        from .metrics import mse_2d as _mse2d
        from .metrics import tonemap as _tonemap

        rng = np.random.default_rng(4)
        img = Image(values=rng.uniform(0, 2, size=(32, 32, 3)).astype(np.float32))
        assert _mse2d(img, img) == 0.0
        assert _dssim(img, img) == 0.0
        a = _tonemap(img)
        scaled = Image(values=(img.values * 7.5))
        b = _tonemap(scaled)
        assert np.allclose(a.values, b.values, atol=1e-5)

    check("grid query equals linear scan", grid_vs_linear)
    check("poisson selection min-distance and maximality", poisson_invariants)
    check("mc convolution matches direct formula", conv_matches_formula)
    check("mc convolution gradients match finite differences", conv_gradcheck)
    check("analytic occlusion cases", analytic_ao)
    check("metric identities", metric_identities)
    return failures
