"""Command-line entry points: gen-data, train, outpaint, evaluate, ablate-rotation.

All artifacts live under a --workdir root:
    dataset/            split directories + manifest.json
    checkpoints/<stage> raw-tensor checkpoints (vae-rgb, vae-depth, ldm)
    logs/<stage>.jsonl  one {"step", "loss"} line per step
    outputs/            outpainting results + sidecars
    reports/            evaluation / ablation JSON reports

Exit codes: 0 success, 2 invalid argument, 3 invalid state (missing stage),
4 IO error. PANODIFF_SEED overrides the config seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np
from PIL import Image
from scipy import stats

from . import autoencoder as ae
from . import diffusion as df
from . import metrics as mx
from .config import RunConfig, derive_seed, load_config
from .errors import InvalidStateError, NumericalError
from .outpaint import ModelSet, OutpaintRequest, outpaint, save_results
from .pano import MaskSpec, gen_mask, load_mask_png
from .synthdata import (generate_dataset, load_split, random_room, render_room,
                        u8_to_rgb)


def _workdir_paths(workdir):
    return {
        "dataset": os.path.join(workdir, "dataset"),
        "checkpoints": os.path.join(workdir, "checkpoints"),
        "logs": os.path.join(workdir, "logs"),
        "outputs": os.path.join(workdir, "outputs"),
        "reports": os.path.join(workdir, "reports"),
    }


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    env_seed = os.environ.get("PANODIFF_SEED")
    if env_seed is not None:
        cfg.seed = int(env_seed)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def cmd_gen_data(cfg: RunConfig, workdir, n_rooms=None) -> dict:
    paths = _workdir_paths(workdir)
    n = n_rooms if n_rooms is not None else cfg.data.n_rooms
    manifest = generate_dataset(paths["dataset"], n, cfg.data.height,
                                cfg.data.ratios, derive_seed(cfg.seed, "dataset"))
    counts = {s: sum(1 for it in manifest["items"] if it["split"] == s)
              for s in ("train", "val", "test")}
    print(f"dataset: {n} rooms at {cfg.data.height}x{2 * cfg.data.height} -> {counts}")
    return manifest


def _require_stage(checkpoint_root, stage):
    if not os.path.exists(os.path.join(checkpoint_root, stage, "manifest.json")):
        raise InvalidStateError(f"stage '{stage}' has no checkpoint; run `train --stage {stage}` first")


def _load_train_split(paths):
    if not os.path.exists(os.path.join(paths["dataset"], "manifest.json")):
        raise InvalidStateError("no dataset found; run `gen-data` first")
    panos = [p for _, p in load_split(paths["dataset"], "train")]
    if not panos:
        raise InvalidStateError("train split is empty")
    return panos


def _log_writer(paths, stage):
    os.makedirs(paths["logs"], exist_ok=True)
    return os.path.join(paths["logs"], f"{stage}.jsonl")


def cmd_train(cfg: RunConfig, workdir, stage: str, resume: bool = False) -> str:
    paths = _workdir_paths(workdir)
    ckpt_root = paths["checkpoints"]
    out = os.path.join(ckpt_root, stage)
    seed = derive_seed(cfg.seed, stage)

    if stage in ("vae-rgb", "vae-depth"):
        modality = "rgb" if stage == "vae-rgb" else "depth"
        panos = _load_train_split(paths)
        done = 0
        prior = None
        if resume and os.path.exists(os.path.join(out, "manifest.json")):
            _, manifest = ae.load_checkpoint(out)
            done = manifest.get("epochs_completed", 0)
            prior = ae.load_autoencoder(out)
        if done >= cfg.vae.epochs:
            print(f"{stage}: already trained for {done} epochs")
            return out
        with open(_log_writer(paths, stage), "a") as fh:
            def log(epoch, loss, _fh=fh, _base=done):
                _fh.write(json.dumps({"step": _base + epoch, "loss": loss}) + "\n")
            remaining = dataclasses.replace(cfg.vae, epochs=cfg.vae.epochs - done)
            model, _ = ae.train_autoencoder(panos, modality, remaining, seed=seed,
                                            d_max=cfg.data.d_max, log=log, warm_start=prior)
        ae.save_autoencoder(model, out, seed, extra={"epochs_completed": cfg.vae.epochs})
        print(f"{stage}: trained {cfg.vae.epochs - done} epochs -> {out}")
        return out

    if stage == "ldm":
        for dep in ("vae-rgb", "vae-depth"):
            _require_stage(ckpt_root, dep)
        panos = _load_train_split(paths)
        bundle = ae.AutoencoderBundle(
            rgb=ae.load_autoencoder(os.path.join(ckpt_root, "vae-rgb")),
            depth=ae.load_autoencoder(os.path.join(ckpt_root, "vae-depth")),
            d_max=cfg.data.d_max,
        )
        latents = df.encode_training_latents(panos, bundle)
        if cfg.ldm.variant == "rgb":
            latents = latents[..., :3]
        sparse = None
        if cfg.ldm.depth_sparsity_prob > 0 and cfg.ldm.variant != "rgb":
            sparse = df.encode_training_latents(
                panos, bundle, sparsity_fraction=cfg.ldm.depth_sparsity_fraction,
                seed=derive_seed(cfg.seed, "sparsity"))
        done = 0
        prior = None
        if resume and os.path.exists(os.path.join(out, "manifest.json")):
            _, manifest = df.load_checkpoint(out)
            done = manifest.get("steps_completed", 0)
            prior = df.load_denoiser(out)
        if done >= cfg.ldm.steps:
            print(f"ldm: already trained for {done} steps")
            return out
        train_cfg = dataclasses.replace(cfg.ldm, steps=cfg.ldm.steps - done)
        model, _, _ = df.train_ldm(latents, train_cfg, seed=seed, sparse_latents=sparse,
                                   log_path=_log_writer(paths, stage), warm_start=prior,
                                   log_step_base=done)
        df.save_denoiser(model, out, seed, extra={"steps_completed": cfg.ldm.steps})
        print(f"ldm: trained {cfg.ldm.steps - done} steps -> {out}")
        return out

    raise ValueError(f"unknown stage {stage!r}; expected vae-rgb, vae-depth, or ldm")


def _load_models(cfg: RunConfig, workdir) -> ModelSet:
    paths = _workdir_paths(workdir)
    return ModelSet.load(paths["checkpoints"], d_max=cfg.data.d_max,
                         sample_steps=cfg.sample.sample_steps, T=cfg.ldm.T,
                         beta_start=cfg.ldm.beta_start, beta_end=cfg.ldm.beta_end)


def cmd_outpaint(cfg: RunConfig, workdir, input_path, mask_file=None, mask_spec=None,
                 n_samples=None, align=None, composite=None, out_id=None) -> list:
    paths = _workdir_paths(workdir)
    models = _load_models(cfg, workdir)
    rgb = u8_to_rgb(np.array(Image.open(input_path).convert("RGB")))
    h, w = rgb.shape[:2]
    if mask_file:  # an explicit mask file always wins over a spec
        mask = load_mask_png(mask_file)
    elif mask_spec:
        mask = gen_mask(mask_spec, h, w)
    else:
        raise ValueError("need --mask-file or --mask-spec")
    if mask.shape != (h, w):
        raise ValueError(f"mask {mask.shape} does not match image {h}x{w}")

    request = OutpaintRequest(
        rgb=rgb, mask=mask,
        n_samples=cfg.sample.n_samples if n_samples is None else n_samples,
        align=cfg.sample.align if align is None else align,
        composite=cfg.sample.composite if composite is None else composite,
        seed=cfg.seed,
    )
    results = outpaint(request, models)
    rid = out_id or os.path.splitext(os.path.basename(input_path))[0]
    written = save_results(results, paths["outputs"], rid, request, models)
    print(f"outpaint: wrote {len(written)} files under {paths['outputs']}")
    return written


def _scan_rgb_dir(path):
    """id -> (rgb array 0..255 float, depth meters or None), over *_rgb.png files."""
    out = {}
    for root, _dirs, files in os.walk(path):
        for name in sorted(files):
            if not name.endswith("_rgb.png"):
                continue
            item_id = name[: -len("_rgb.png")]
            rgb = np.array(Image.open(os.path.join(root, name)).convert("RGB")).astype(np.float64)
            depth_path = os.path.join(root, f"{item_id}_depth.png")
            depth = None
            if os.path.exists(depth_path):
                depth = np.array(Image.open(depth_path)).astype(np.float64) / 1000.0
            out[item_id] = (rgb, depth)
    return out


def cmd_evaluate(cfg: RunConfig, workdir, result_dir, reference_dir, out_path=None) -> dict:
    paths = _workdir_paths(workdir)
    results = _scan_rgb_dir(result_dir)
    reference = _scan_rgb_dir(reference_dir)
    if not results or not reference:
        raise ValueError("result and reference directories must both contain *_rgb.png files")

    extractor = mx.FeatureExtractor(seed=cfg.eval.extractor_seed, dim=cfg.eval.feature_dim)
    fake = mx.extract_features([rgb for rgb, _ in results.values()], extractor)
    real = mx.extract_features([rgb for rgb, _ in reference.values()], extractor)
    k = min(cfg.eval.k, real.n - 1)
    density, coverage = mx.density_coverage(real, fake, k)

    report = {
        "n_result": len(results),
        "n_reference": len(reference),
        "extractor_seed": cfg.eval.extractor_seed,
        "k": k,
        "frechet": mx.frechet_distance(real, fake, shrinkage=cfg.eval.shrinkage),
        "density": density,
        "coverage": coverage,
        "lrce": mx.lrce([rgb for rgb, _ in results.values()]),
    }

    # depth accuracy over id-matched pairs (result "X_sampleK" matches reference "X")
    pairs = []
    for rid, (_, pred_depth) in results.items():
        if pred_depth is None:
            continue
        ref_id = rid.split("_sample")[0]
        if ref_id in reference and reference[ref_id][1] is not None:
            pairs.append(mx.depth_metrics(pred_depth, reference[ref_id][1]))
    if pairs:
        report["depth"] = {
            key: float(np.mean([getattr(r, key) for r in pairs]))
            for key in ("rmse", "mae", "absrel", "delta125")
        }
        report["depth"]["n_pairs"] = len(pairs)
        report["depth_available"] = True
    else:
        report["depth_available"] = False

    out_path = out_path or os.path.join(paths["reports"], "evaluate.json")
    os.makedirs(os.path.dirname(out_path), exist_ok=True)
    with open(out_path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    print(json.dumps(report, indent=2, sort_keys=True))
    return report


def seam_ablation(models: ModelSet, height: int, n_requests: int, seed: int,
                  sample_steps=None) -> dict:
    """Half-visible seam protocol: paired LRCE with and without alignment.

    Each request renders a fresh room, keeps the left half visible, and runs
    the same seeded outpainting twice (alignment on/off). Reports paired
    means, the relative reduction, and a one-sided paired t-test p-value.
    """
    if n_requests < 5:
        raise ValueError(f"need at least 5 requests for a paired test, got {n_requests}")
    if n_requests < 20:
        print(f"warning: {n_requests} requests is below the recommended 20", file=sys.stderr)

    lrce_on, lrce_off = [], []
    for i in range(n_requests):
        pano = render_room(random_room(derive_seed(seed, f"ablate-room-{i}")), height)
        mask = np.zeros((pano.height, pano.width), dtype=np.uint8)
        mask[:, : pano.width // 2] = 1
        for align, sink in ((True, lrce_on), (False, lrce_off)):
            request = OutpaintRequest(rgb=pano.rgb, mask=mask, align=align,
                                      composite=True,
                                      seed=derive_seed(seed, f"ablate-run-{i}"))
            result = outpaint(request, models)[0]
            sink.append(mx.lrce([(result.rgb + 1.0) * 127.5]))

    on, off = np.array(lrce_on), np.array(lrce_off)
    t_stat, p_value = stats.ttest_rel(off, on, alternative="greater")
    report = {
        "n_requests": n_requests,
        "lrce_aligned_mean": float(on.mean()),
        "lrce_unaligned_mean": float(off.mean()),
        "relative_reduction": float(1.0 - on.mean() / off.mean()),
        "ratio": float(on.mean() / off.mean()),
        "t_stat": float(t_stat),
        "p_value": float(p_value),
    }
    return report


def cmd_ablate_rotation(cfg: RunConfig, workdir, n_requests=20, out_path=None) -> dict:
    paths = _workdir_paths(workdir)
    models = _load_models(cfg, workdir)
    report = seam_ablation(models, cfg.data.height, n_requests,
                           derive_seed(cfg.seed, "ablation"))
    out_path = out_path or os.path.join(paths["reports"], "ablate_rotation.json")
    os.makedirs(os.path.dirname(out_path), exist_ok=True)
    with open(out_path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    print(json.dumps(report, indent=2, sort_keys=True))
    return report


def _parse_mask_spec(arg) -> MaskSpec:
    if os.path.exists(arg):
        with open(arg) as fh:
            raw = json.load(fh)
    else:
        raw = json.loads(arg)
    return MaskSpec(**raw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="panodiff",
                                     description="RGB-D panorama outpainting toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run config (defaults when omitted)")
        p.add_argument("--workdir", default="work", help="artifact root directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")

    p = sub.add_parser("gen-data", help="render the synthetic room dataset")
    common(p)
    p.add_argument("--n-rooms", type=int, default=None)

    p = sub.add_parser("train", help="train one pipeline stage")
    common(p)
    p.add_argument("--stage", required=True, choices=["vae-rgb", "vae-depth", "ldm"])
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("outpaint", help="outpaint a masked panorama")
    common(p)
    p.add_argument("--input", required=True, help="rgb png to outpaint")
    p.add_argument("--mask-file", help="8-bit mask png (overrides --mask-spec)")
    p.add_argument("--mask-spec", help="mask spec JSON (inline or a file path)")
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--align", dest="align", action="store_true", default=None)
    p.add_argument("--no-align", dest="align", action="store_false")
    p.add_argument("--composite", action="store_true", default=None)
    p.add_argument("--out-id", default=None)

    p = sub.add_parser("evaluate", help="compare a result directory to a reference")
    common(p)
    p.add_argument("--results", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--out", default=None)

    p = sub.add_parser("ablate-rotation", help="paired seam-consistency ablation")
    common(p)
    p.add_argument("--n-requests", type=int, default=20)
    p.add_argument("--out", default=None)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        if args.command == "gen-data":
            cmd_gen_data(cfg, args.workdir, n_rooms=args.n_rooms)
        elif args.command == "train":
            cmd_train(cfg, args.workdir, args.stage, resume=args.resume)
        elif args.command == "outpaint":
            spec = _parse_mask_spec(args.mask_spec) if args.mask_spec else None
            cmd_outpaint(cfg, args.workdir, args.input, mask_file=args.mask_file,
                         mask_spec=spec, n_samples=args.samples, align=args.align,
                         composite=args.composite, out_id=args.out_id)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.workdir, args.results, args.reference, out_path=args.out)
        elif args.command == "ablate-rotation":
            cmd_ablate_rotation(cfg, args.workdir, n_requests=args.n_requests,
                                out_path=args.out)
        return 0
    except (ValueError, NumericalError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except InvalidStateError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    except (OSError, json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
