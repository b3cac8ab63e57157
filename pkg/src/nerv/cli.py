"""Command-line entry point: gen, train, render, eval, probe, bench."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import glob
import json
import os
import sys
import time

import numpy as np

from . import fields, metrics_io, scenes, training, transport
from .diffmath import autodiff as ad

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise UsageError(f"file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: invalid JSON: {e}") from None


def _resolve(defaults: dict, file_path, flags: dict) -> dict:
    """Merge with precedence flags > config file > defaults."""
    out = dict(defaults)
    if file_path:
        cfg = _read_json(file_path)
        unknown = set(cfg) - set(defaults)
        if unknown:
            raise UsageError(f"unknown keys in {file_path}: {sorted(unknown)}")
        out.update(cfg)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _write_resolved(out_dir, command, resolved):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "resolved_config.json")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump({"command": command, "config": resolved}, f, indent=1, sort_keys=True)
        f.write("\n")


def _on_off(v):
    if v is None:
        return None
    return v == "on"


# ---------------------------------------------------------------- gen


def cmd_gen(args):
    q = scenes.RenderQuality()
    defaults = dict(scene="sphere-plane", regime="ambient+point", n_train=16, n_test=0, resolution=64, seed=0,
                    n_samples=q.n_samples, n_light_steps=q.n_light_steps, n_indirect=q.n_indirect,
                    shade_samples=q.shade_samples, min_weight=q.min_weight, indirect=q.indirect)
    flags = dict(scene=args.scene, regime=args.regime, n_train=args.n, n_test=args.n_test, resolution=args.res,
                 seed=args.seed, n_samples=args.samples, n_light_steps=args.light_steps,
                 n_indirect=args.indirect_samples, indirect=_on_off(args.indirect))
    r = _resolve(defaults, args.config, flags)
    if r["regime"] not in scenes.REGIMES:
        raise UsageError(f"unknown regime {r['regime']!r}; valid regimes: {', '.join(scenes.REGIMES)}")
    if r["scene"] not in scenes.SCENES:
        raise UsageError(f"unknown scene {r['scene']!r}; valid scenes: {', '.join(scenes.SCENES)}")
    quality = scenes.RenderQuality(r["n_samples"], r["n_light_steps"], r["n_indirect"], r["shade_samples"],
                                   r["min_weight"], r["indirect"])
    spec = scenes.DatasetSpec(r["scene"], r["regime"], r["n_train"], r["n_test"], r["resolution"], r["seed"], quality)

    def progress(i, n):
        print(f"rendered {i}/{n}", file=sys.stderr, flush=True)

    scenes.generate_dataset(spec, args.out, progress=None if args.quiet else progress)
    _write_resolved(args.out, "gen", r)
    print(os.path.join(args.out, "dataset.json"))


# ---------------------------------------------------------------- train


TRAIN_FLAGS = {
    "steps": "total_steps", "batch": "batch_pixel_rays", "supervision_batch": "batch_supervision_rays",
    "samples": "n_samples", "indirect_samples": "n_indirect", "normals": "normals", "lr_start": "lr_start",
    "lr_end": "lr_end", "seed": "seed", "checkpoint_every": "checkpoint_every", "shade_samples": "shade_samples",
    "width": "width", "layers": "layers", "lam": "lam",
}


def _latest_checkpoint(out_dir):
    cands = sorted(glob.glob(os.path.join(out_dir, "step-*.nerv")))
    return cands[-1] if cands else None


def cmd_train(args):
    manifest = os.path.join(args.data, "dataset.json")
    if not os.path.exists(manifest):
        raise UsageError(f"no dataset manifest at {manifest}")
    base = training.desk_config() if args.profile == "desk" else training.TrainConfig()
    flags = {TRAIN_FLAGS[k]: getattr(args, k) for k in TRAIN_FLAGS}
    flags["indirect"] = _on_off(args.indirect)
    r = _resolve(base.to_dict(), args.config, flags)
    try:
        config = training.TrainConfig.from_dict(r)
    except ValueError as e:
        raise UsageError(str(e)) from None
    ds = scenes.Dataset(args.data)
    data = training.TrainingImages.from_dataset(ds)
    bbox = scenes.make_scene(ds.scene_name).bbox
    os.makedirs(args.out, exist_ok=True)
    latest = _latest_checkpoint(args.out) if args.resume else None
    if latest:
        trainer = training.Trainer.load(latest, data, config)
        print(f"resuming from {latest} at step {trainer.step}", file=sys.stderr)
    else:
        trainer = training.Trainer(fields.NervModel(config.architecture, bbox, seed=config.seed), config, data)
    _write_resolved(args.out, "train", dict(config.to_dict(), profile=args.profile, data=os.path.abspath(args.data)))
    log_path = os.path.join(args.out, "log.jsonl")
    t0 = time.time()
    with open(log_path, "a", encoding="utf-8", newline="\n") as log:
        while trainer.step < config.total_steps:
            step = trainer.step
            lr = trainer.lr(step)
            lb, rejected = trainer.train_step()
            if rejected or step % config.log_every == 0 or trainer.step == config.total_steps:
                log.write(training.log_line(step, lr, lb, rejected, seconds=round(time.time() - t0, 2)) + "\n")
                log.flush()
            if trainer.step % config.checkpoint_every == 0:
                trainer.save(os.path.join(args.out, f"step-{trainer.step:08d}.nerv"))
    trainer.save(os.path.join(args.out, "final.nerv"))
    print(os.path.join(args.out, "final.nerv"))


# ---------------------------------------------------------------- render helpers


def _load_model(path):
    try:
        return training.load_model(path)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {path}") from None
    except (KeyError, ValueError) as e:
        raise UsageError(f"cannot use checkpoint {path}: {e}") from None


def _render_opts(config: training.TrainConfig, args):
    return transport.RenderOptions(
        n_samples=args.samples or config.n_samples,
        n_indirect=config.n_indirect if args.indirect_samples is None else args.indirect_samples,
        vis_mode="nvf" if args.vis == "nvf" else "trace",
        indirect=config.indirect if args.indirect is None else args.indirect == "on",
        n_light_steps=args.light_steps, shade_samples=config.shade_samples, seed=args.seed,
    )


def _fields_for(model, args):
    return fields.ModelFields(model, "nvf" if args.vis == "nvf" else "trace", args.light_steps)


def _pose_list(path, res):
    d = _read_json(path)
    items = d if isinstance(d, list) else [d]
    poses = []
    for it in items:
        try:
            poses.append(scenes.CameraPose.from_dict(it.get("pose", it), res, res))
        except (KeyError, ValueError) as e:
            raise UsageError(f"{path}: bad pose: {e}") from None
    return poses


def _lighting(path):
    d = _read_json(path)
    base = os.path.dirname(os.path.abspath(path))
    try:
        return transport.LightingCondition.from_dict(
            d, env_loader=lambda f: metrics_io.read_pfm(os.path.join(base, f)).astype(float)
        )
    except (KeyError, ValueError) as e:
        raise UsageError(f"{path}: bad lighting: {e}") from None


def _save_hdr(out_dir, name, img):
    metrics_io.write_pfm(os.path.join(out_dir, name + ".pfm"), img)
    metrics_io.write_png(os.path.join(out_dir, name + ".png"), img)


def _render_breakdown(flds, pose, light, opts):
    img = scenes.render_image(flds, pose, light, opts)
    d32 = img["direct"].astype(np.float32)
    i32 = img["indirect"].astype(np.float32)
    return d32 + i32, d32, i32


# ---------------------------------------------------------------- render


def cmd_render(args):
    model, config, _ = _load_model(args.ckpt)
    poses = _pose_list(args.pose, args.res)
    light = _lighting(args.lighting)
    opts = _render_opts(config, args)
    _write_resolved(args.out, "render", dict(vars(args), func=None, render_options=vars(opts)))
    for k, pose in enumerate(poses):
        total, direct, indirect = _render_breakdown(_fields_for(model, args), pose, light, opts)
        suffix = "" if len(poses) == 1 else f"_{k:04d}"
        _save_hdr(args.out, "total" + suffix, total)
        if args.breakdown:
            _save_hdr(args.out, "direct" + suffix, direct)
            _save_hdr(args.out, "indirect" + suffix, indirect)
    print(args.out)


# ---------------------------------------------------------------- eval


def evaluate_images(pairs):
    """Metric rows for (name, predicted HDR, reference HDR) triples, computed on tone-mapped values."""
    rows = []
    for name, pred, ref in pairs:
        a = metrics_io.tone_map(np.maximum(pred, 0.0))
        b = metrics_io.tone_map(np.maximum(ref, 0.0))
        rows.append({"image": name, "psnr_db": metrics_io.psnr(a, b), "ms_ssim": metrics_io.ms_ssim(a, b)})
    return rows


def write_metrics(out_dir, rows, skipped, extra=None):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "metrics.csv"), "w", encoding="utf-8", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["image", "psnr_db", "ms_ssim"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({"image": r["image"], "psnr_db": repr(float(r["psnr_db"])), "ms_ssim": repr(float(r["ms_ssim"]))})
    summary = {
        "count": len(rows),
        "skipped": skipped,
        "mean_psnr_db": float(np.mean([r["psnr_db"] for r in rows])) if rows else None,
        "mean_ms_ssim": float(np.mean([r["ms_ssim"] for r in rows])) if rows else None,
        "metric_space": "tone-mapped x/(1+x), peak 1.0",
    }
    summary.update(extra or {})
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8", newline="\n") as f:
        json.dump(summary, f, indent=1)
        f.write("\n")
    return summary


def cmd_eval(args):
    if not os.path.exists(os.path.join(args.data, "dataset.json")):
        raise UsageError(f"no dataset manifest in {args.data}")
    if not args.ckpt and not args.images:
        raise UsageError("eval needs --ckpt or --images")
    ds = scenes.Dataset(args.data)
    entries = ds.split(args.split)
    model = config = None
    if args.ckpt:
        model, config, _ = _load_model(args.ckpt)
    _write_resolved(args.out, "eval", dict(vars(args), func=None))
    pairs, skipped = [], []
    for e in entries:
        ref_path = os.path.join(args.data, e["file"])
        if not os.path.exists(ref_path):
            print(f"warning: missing reference {e['file']}, skipped", file=sys.stderr)
            skipped.append(e["file"])
            continue
        ref = ds.image(e)
        if args.images:
            p = os.path.join(args.images, e["file"])
            if not os.path.exists(p):
                print(f"warning: missing prediction {e['file']}, skipped", file=sys.stderr)
                skipped.append(e["file"])
                continue
            pred = metrics_io.read_pfm(p)
        else:
            total, _, _ = _render_breakdown(_fields_for(model, args), ds.pose(e), ds.lighting(e), _render_opts(config, args))
            pred = total
            os.makedirs(os.path.join(args.out, os.path.dirname(e["file"])), exist_ok=True)
            _save_hdr(args.out, os.path.splitext(e["file"])[0], pred)
        pairs.append((e["file"], pred, ref))
    rows = evaluate_images(pairs)
    summary = write_metrics(args.out, rows, skipped)
    print(json.dumps(summary))


# ---------------------------------------------------------------- probe


def probe_panels(flds, model_sample, pose, light, opts):
    """Diagnostic panels at each pixel's expected termination point.

    ``model_sample`` maps points (P, 3) to a ShadingSample. Returns HDR
    ``direct``/``indirect`` and [0, 1] ``normals``, ``albedo``, ``roughness``
    and ``shadow`` images.
    """
    o, d = pose.rays()
    H, W = pose.height, pose.width
    shp = (H, W, 3)
    img = scenes.render_image(flds, pose, light, opts)
    unlit = scenes.render_image(flds, pose, light, dataclasses.replace(opts, unit_visibility=True, indirect=False))
    hit_mask = transport.ray_box(o, d, *flds.bbox)[2]
    x = o + img["depth"].reshape(-1)[:, None] * d
    normals = np.zeros((H * W, 3))
    albedo = np.zeros((H * W, 3))
    rough = np.zeros(H * W)
    idx = np.nonzero(hit_mask)[0]
    with ad.no_record():
        s = model_sample(x[idx])
    normals[idx] = (ad.value_of(s.normal) + 1.0) / 2.0 * s.valid[:, None]
    albedo[idx] = ad.value_of(s.albedo)
    rough[idx] = ad.value_of(s.roughness)
    num = img["direct"].sum(-1)
    den = unlit["direct"].sum(-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        shadow = np.where(den > 1e-12, np.clip(num / den, 0.0, 1.0), 0.0)
    return {
        "direct": img["direct"], "indirect": img["indirect"],
        "normals": normals.reshape(shp), "albedo": albedo.reshape(shp),
        "roughness": np.repeat(rough.reshape(H, W, 1), 3, axis=2),
        "shadow": np.repeat(shadow[..., None], 3, axis=2),
    }


def cmd_probe(args):
    if args.analytic:
        scene = scenes.make_scene(args.analytic)
        flds = scenes.AnalyticFields(scene, args.light_steps)
        sample = flds.sample
        opts = transport.RenderOptions(n_samples=args.samples or 64, n_indirect=args.indirect_samples or 32,
                                       vis_mode="trace", indirect=args.indirect != "off",
                                       n_light_steps=args.light_steps, min_weight=1e-6, seed=args.seed)
    else:
        model, config, _ = _load_model(args.ckpt)
        flds = _fields_for(model, args)
        sample = model.sample
        opts = _render_opts(config, args)
    pose = _pose_list(args.pose, args.res)[0]
    light = _lighting(args.lighting)
    _write_resolved(args.out, "probe", dict(vars(args), func=None, render_options=vars(opts)))
    panels = probe_panels(flds, sample, pose, light, opts)
    for name in ("direct", "indirect"):
        _save_hdr(args.out, name, panels[name])
    for name in ("normals", "albedo", "roughness", "shadow"):
        metrics_io.write_png_ldr(os.path.join(args.out, name + ".png"), panels[name])
        metrics_io.write_pfm(os.path.join(args.out, name + ".pfm"), panels[name])
    print(args.out)


# ---------------------------------------------------------------- bench


BENCH_MODES = ("nvf-direct", "brute-direct", "nvf-indirect", "brute-indirect")


def bench_rows(model, ns, d, light_steps=None, height=transport.ENV_HEIGHT, width=transport.ENV_WIDTH):
    """Measured and closed-form per-ray query counts; light-ray steps default to n."""
    lights = transport.LightingBatch([transport.LightingCondition.constant_env(1.0, height, width)])
    ell = height * width
    rows = []
    for n in ns:
        m = n if light_steps is None else light_steps
        for mode in BENCH_MODES:
            closed = transport.closed_form_counts(mode, n, ell, d, m)
            measured = None
            if mode != "brute-indirect":
                vis = "brute" if mode.startswith("brute") else "nvf"
                flds = fields.ModelFields(model, vis, m)
                opts = transport.RenderOptions(n_samples=n, n_indirect=d, vis_mode="nvf",
                                               indirect=mode.endswith("indirect"), n_light_steps=m)
                with ad.no_record():
                    measured = transport.count_queries(flds, opts, lights)
            rows.append({
                "mode": mode, "n": n, "ell": ell, "d": d if mode.endswith("indirect") else 0, "m": m,
                "density_evals": "" if measured is None else measured["density_evals"],
                "visibility_evals": "" if measured is None else measured["visibility_evals"],
                "closed_density_evals": closed["density_evals"],
                "closed_visibility_evals": closed["visibility_evals"],
                "match": "extrapolated" if measured is None else str(measured == closed).lower(),
            })
    return rows


def cmd_bench(args):
    defaults = dict(samples=[32, 64, 128, 256], indirect_samples=128, light_steps=None, seed=0,
                    env_height=transport.ENV_HEIGHT, env_width=transport.ENV_WIDTH)
    flags = dict(samples=[int(s) for s in args.samples.split(",")] if args.samples else None,
                 indirect_samples=args.indirect_samples, light_steps=args.light_steps, seed=args.seed)
    r = _resolve(defaults, args.config, flags)
    if args.ckpt:
        model, _, _ = _load_model(args.ckpt)
    else:
        model = fields.NervModel(training.desk_config().architecture, seed=r["seed"])
    _write_resolved(args.out, "bench", r)
    rows = bench_rows(model, r["samples"], r["indirect_samples"], r["light_steps"], r["env_height"], r["env_width"])
    path = os.path.join(args.out, "bench.csv")
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    print(path)
    return rows


# ---------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="nerv", description="Relightable neural fields at desk scale.")
    p.add_argument("--threads", type=int, default=None, help="cap numeric worker threads")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="render a procedural dataset")
    g.add_argument("--config")
    g.add_argument("--scene")
    g.add_argument("--regime")
    g.add_argument("--n", type=int, help="training images")
    g.add_argument("--n-test", type=int)
    g.add_argument("--res", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--samples", type=int)
    g.add_argument("--light-steps", type=int)
    g.add_argument("--indirect-samples", type=int)
    g.add_argument("--indirect", choices=["on", "off"])
    g.add_argument("--quiet", action="store_true")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="fit the fields to a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--profile", choices=["desk", "paper"], default="desk")
    t.add_argument("--steps", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--supervision-batch", type=int)
    t.add_argument("--samples", type=int)
    t.add_argument("--indirect-samples", type=int)
    t.add_argument("--shade-samples", type=int)
    t.add_argument("--normals", choices=["analytic", "mlp"])
    t.add_argument("--indirect", choices=["on", "off"])
    t.add_argument("--lr-start", type=float)
    t.add_argument("--lr-end", type=float)
    t.add_argument("--lam", type=float)
    t.add_argument("--width", type=int)
    t.add_argument("--layers", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", action="store_true")
    t.set_defaults(func=cmd_train)

    def render_flags(q):
        q.add_argument("--vis", choices=["nvf", "trace"], default="nvf")
        q.add_argument("--indirect", choices=["on", "off"])
        q.add_argument("--samples", type=int)
        q.add_argument("--indirect-samples", type=int)
        q.add_argument("--light-steps", type=int, default=64)
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--out", required=True)

    r = sub.add_parser("render", help="render a checkpoint under given pose and lighting")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--pose", required=True, help="JSON pose, or a list of poses for a camera path")
    r.add_argument("--lighting", required=True)
    r.add_argument("--res", type=int, default=64)
    r.add_argument("--breakdown", action="store_true", help="also write direct and indirect images")
    render_flags(r)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="score renders against a dataset split")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt")
    e.add_argument("--images", help="directory of precomputed predictions laid out like the dataset")
    e.add_argument("--split", default="test", choices=["train", "test"])
    render_flags(e)
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("probe", help="write normal/albedo/roughness/shadow/direct/indirect panels")
    pr.add_argument("--ckpt")
    pr.add_argument("--analytic", choices=list(scenes.SCENES), help="probe an analytic scene instead")
    pr.add_argument("--pose", required=True)
    pr.add_argument("--lighting", required=True)
    pr.add_argument("--res", type=int, default=64)
    render_flags(pr)
    pr.set_defaults(func=cmd_probe)

    b = sub.add_parser("bench", help="query-count table against closed forms")
    b.add_argument("--config")
    b.add_argument("--ckpt")
    b.add_argument("--samples", help="comma-separated sample counts")
    b.add_argument("--indirect-samples", type=int)
    b.add_argument("--light-steps", type=int)
    b.add_argument("--seed", type=int)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    if args.command == "probe" and not (args.ckpt or args.analytic):
        print("error: probe needs --ckpt or --analytic", file=sys.stderr)
        return EXIT_USAGE
    try:
        if args.threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                args.func(args)
        else:
            args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # runtime failure: report and exit 1
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
