"""Command-line interface: ``masque <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 model error,
5 remote service error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from masque.errors import ConfigError, DataError, MasqueError, ModelError, RemoteServiceError

log = logging.getLogger("masque")

EXIT_CODES = ((ConfigError, 2), (DataError, 3), (ModelError, 4), (RemoteServiceError, 5))
OVERRIDABLE = ("T", "guidance_scale", "tau_attn", "tau_edit", "tau_adv", "m_adv", "lambda_cosi", "lambda_lpips",
               "G", "seed", "augmentation", "adv_step", "edit_step", "inversion_steps", "source_prompt",
               "diffusion_checkpoint", "embedder_checkpoint")


def exit_code(err: BaseException) -> int:
    for cls, code in EXIT_CODES:
        if isinstance(err, cls):
            return code
    return 1


# -- helpers ------------------------------------------------------------------

def _atomic_write(path, data: bytes | str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data.encode() if isinstance(data, str) else data)
    os.replace(tmp, path)


def _write_json(path, obj):
    _atomic_write(path, json.dumps(obj, indent=1, sort_keys=True))


def read_image(path) -> np.ndarray:
    try:
        return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read image {path}: {e}") from e


def write_png(path, image, digest: str = ""):
    from PIL.PngImagePlugin import PngInfo

    import io

    info = PngInfo()
    if digest:
        info.add_text("masque-config-digest", digest)
    buf = io.BytesIO()
    Image.fromarray((np.clip(np.asarray(image), 0, 1) * 255).round().astype(np.uint8)).save(buf, "PNG",
                                                                                           pnginfo=info)
    _atomic_write(path, buf.getvalue())


def load_config(args, required=()):
    from masque.config import ProtectionConfig

    overrides = {k: getattr(args, k, None) for k in OVERRIDABLE}
    if getattr(args, "config", None):
        return ProtectionConfig.load(args.config, overrides, required)
    return ProtectionConfig.from_mapping({k: v for k, v in overrides.items() if v is not None}, required)


def _load_dataset(path):
    from masque import faces

    return faces.load(path)


# -- commands -------------------------------------------------------------------

def cmd_gen_dataset(args):
    from masque import faces

    ds = faces.generate(args.identities, args.per_identity, args.seed, args.makeup_prob, args.identity_seed)
    faces.save(ds, args.out)
    print(f"wrote {len(ds)} renders to {args.out} (digest {ds.digest()})")


def cmd_train_diffusion(args):
    from masque.diffusion.backend import ToyModelSpec
    from masque.diffusion.train import train_toy_model

    ds = _load_dataset(args.dataset)
    spec = ToyModelSpec(seed=args.seed, steps=args.steps,
                        dataset={"root": str(args.dataset), "digest": ds.digest(), "count": len(ds)})
    backend, losses = train_toy_model(ds, spec, progress=args.verbose)
    digest = backend.save(args.out, {"final_loss": float(np.mean(losses[-50:]))})
    print(f"wrote {args.out} (model digest {digest})")


def cmd_train_embedder(args):
    from masque.recognition.embedder import EmbedderSpec, train_toy_embedder

    ds = _load_dataset(args.dataset)
    spec = EmbedderSpec(seed=args.seed, width=args.width, steps=args.steps)
    emb, losses = train_toy_embedder(ds, spec, name=args.name or f"toy-{args.seed}")
    digest = emb.save(args.out, {"dataset": {"root": str(args.dataset), "digest": ds.digest()},
                                 "final_loss": float(np.mean(losses[-50:]))})
    print(f"wrote {args.out} (model digest {digest})")


def cmd_invert(args):
    from masque.inversion import invert
    from masque.models import load_diffusion

    cfg = load_config(args)
    backend = load_diffusion(cfg.diffusion_checkpoint or None)
    images = np.stack([read_image(p) for p in args.images])
    trajs = invert(backend, images, args.prompt or cfg.source_prompt, cfg.inversion_steps, cfg.inversion_lr,
                   cfg.guidance_scale)
    out = Path(args.out)
    for path, t in zip(args.images, trajs):
        dest = out if len(trajs) == 1 and out.suffix else out / (Path(path).stem + ".traj.pt")
        t.save(dest, cfg.digest())
        print(f"{path}: rmse {t.rmse:.5f} -> {dest}")


def _mask_for(args, image_path, prompt, min_area):
    from masque.editor.regions import RegionMask, build_mask, match_region

    if args.mask:
        pixel = read_image(args.mask).mean(-1) > 0.5
        return RegionMask.from_pixels(pixel, label="custom")
    sidecar = Path(image_path).with_suffix(".json")
    if not sidecar.exists():
        raise DataError(f"no --mask given and no sidecar {sidecar} with region polygons")
    meta = json.loads(sidecar.read_text())
    polys = {k: [[tuple(pt) for pt in poly] for poly in v] for k, v in meta["polygons"].items()}
    return build_mask(polys, args.region or match_region(prompt), min_area)


def cmd_protect(args):
    from masque.editor.pipeline import protect_batch
    from masque.guidance import resolve_guides
    from masque.inversion import LatentTrajectory
    from masque.models import load_diffusion, load_embedder

    cfg = load_config(args)
    backend = load_diffusion(cfg.diffusion_checkpoint or None)
    embedder = load_embedder(cfg.embedder_checkpoint or "A")
    image = read_image(args.image)
    mask = _mask_for(args, args.image, args.prompt, cfg.min_area)
    photos = np.stack([read_image(p) for p in args.guide]) if args.guide else None
    guides = resolve_guides(image, photos, cfg.G, cfg.augmentation, cfg.seed, cfg.max_shift)
    traj = [LatentTrajectory.load(args.trajectory)] if args.trajectory else None
    res = protect_batch(backend, image[None], args.prompt, [mask], [guides], cfg, embedder, trajectories=traj)
    write_png(args.out, res.images[0], cfg.digest())
    record = res.records[0].to_json()
    record["input"] = str(args.image)
    _write_json(Path(args.out).with_suffix(".json"), record)
    print(f"wrote {args.out} (config digest {cfg.digest()})")


def cmd_calibrate(args):
    from masque.harness import calibrate_on_dataset
    from masque.models import load_embedder

    embedder = load_embedder(args.embedder)
    th = calibrate_on_dataset(embedder, _load_dataset(args.dataset), args.far, args.pairs, args.seed)
    _write_json(args.out, th.to_json())
    print(f"gamma = {th.gamma:.6f} at FAR {args.far} ({th.n_pairs} pairs) -> {args.out}")


def _load_threshold(path):
    from masque.recognition.verification import VerificationThreshold

    try:
        return VerificationThreshold(**json.loads(Path(path).read_text()))
    except (OSError, ValueError, TypeError) as e:
        raise DataError(f"cannot read threshold file {path}: {e}") from e


def cmd_eval(args):
    from masque.evaluation import DEFAULT_SUITE, evaluate
    from masque.harness import build_gallery, build_records, calibrate_on_dataset, protect_records
    from masque.models import load_diffusion, load_embedder
    from masque.perceptual import get_metric

    cfg = load_config(args)
    backend = load_diffusion(cfg.diffusion_checkpoint or None)
    attacker = load_embedder(cfg.embedder_checkpoint or "A")
    judge = load_embedder(args.eval_embedder)
    ds = _load_dataset(args.dataset)
    threshold = (_load_threshold(args.threshold) if args.threshold
                 else calibrate_on_dataset(judge, ds, args.far, args.pairs, cfg.seed))
    records = build_records(ds, args.prompt, args.limit, cfg.min_area)
    if not args.no_protect:
        protect_records(backend, records, cfg, attacker, batch_size=args.batch_size)
    transforms = DEFAULT_SUITE if args.transforms is None else [t for t in args.transforms.split(",") if t]
    report = evaluate(records, judge, threshold, build_gallery(records, judge), get_metric(cfg.perceptual),
                      transforms, backend, args.isr_target, cfg.digest(), cfg.seed,
                      meta={"dataset_digest": ds.digest(), "prompt": args.prompt, "protected": not args.no_protect,
                            "judge": judge.digest(), "attacker": attacker.digest()})
    report.save(args.report, args.markdown)
    print(report.markdown())


def cmd_remote_verify(args):
    from masque.recognition.remote import ClientConfig, remote_verify

    cfg = ClientConfig.from_env(adapter=args.adapter)
    score = remote_verify(cfg, read_image(args.image_a), read_image(args.image_b))
    print(json.dumps({"score": score}))


# -- parser -------------------------------------------------------------------

def _config_flags(p):
    p.add_argument("--config", help="INI config file; flags override its values")
    p.add_argument("--T", type=int)
    p.add_argument("--guidance-scale", dest="guidance_scale", type=float)
    p.add_argument("--tau-attn", dest="tau_attn", type=int)
    p.add_argument("--tau-edit", dest="tau_edit", type=int)
    p.add_argument("--tau-adv", dest="tau_adv", type=int)
    p.add_argument("--m-adv", dest="m_adv", type=int)
    p.add_argument("--lambda-cosi", dest="lambda_cosi", type=float)
    p.add_argument("--lambda-lpips", dest="lambda_lpips", type=float)
    p.add_argument("--G", type=int, help="number of guide images")
    p.add_argument("--seed", type=int)
    p.add_argument("--augmentation", choices=("none", "hflip", "vflip", "translate"))
    p.add_argument("--adv-step", dest="adv_step", type=float)
    p.add_argument("--edit-step", dest="edit_step", type=float)
    p.add_argument("--inversion-steps", dest="inversion_steps", type=int)
    p.add_argument("--source-prompt", dest="source_prompt")
    p.add_argument("--diffusion", dest="diffusion_checkpoint", help="diffusion checkpoint (default: bundled)")
    p.add_argument("--embedder", dest="embedder_checkpoint", help="attacked embedder checkpoint (default: bundled A)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="masque", description="Makeup-based face-recognition protection (toy scale).")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-dataset", help="render a synthetic face set")
    p.add_argument("--identities", type=int, required=True)
    p.add_argument("--per-identity", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--identity-seed", type=int)
    p.add_argument("--makeup-prob", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("train-diffusion", help="train the toy latent diffusion model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=4000)
    p.set_defaults(func=cmd_train_diffusion)

    p = sub.add_parser("train-embedder", help="train a toy face embedder")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--name")
    p.set_defaults(func=cmd_train_embedder)

    p = sub.add_parser("invert", help="null-text inversion of images")
    _config_flags(p)
    p.add_argument("images", nargs="+")
    p.add_argument("--prompt", help="source prompt (default: config source_prompt)")
    p.add_argument("--out", required=True, help="trajectory file (one image) or directory")
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("protect", help="apply protective makeup to one image")
    _config_flags(p)
    p.add_argument("image")
    p.add_argument("--prompt", required=True, help='makeup prompt, e.g. "red lipstick"')
    p.add_argument("--guide", action="append", help="guide photo of the same person (repeatable)")
    p.add_argument("--mask", help="binary mask PNG (default: region polygons from the image's JSON sidecar)")
    p.add_argument("--region", help="override the region matched from the prompt")
    p.add_argument("--trajectory", help="precomputed trajectory from `masque invert`")
    p.add_argument("--out", required=True, help="output PNG; provenance goes to the .json next to it")
    p.set_defaults(func=cmd_protect)

    p = sub.add_parser("calibrate", help="verification threshold at a false acceptance rate")
    p.add_argument("--dataset", required=True)
    p.add_argument("--embedder", default="B", help='checkpoint path or bundled "A"/"B"')
    p.add_argument("--far", type=float, default=0.01)
    p.add_argument("--pairs", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("eval", help="protect a dataset and write an evaluation report")
    _config_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--prompt", default="red lipstick")
    p.add_argument("--eval-embedder", default="B", help='checkpoint path or bundled "A"/"B"')
    p.add_argument("--threshold", help="threshold JSON from `masque calibrate` (default: calibrate on the dataset)")
    p.add_argument("--far", type=float, default=0.01)
    p.add_argument("--pairs", type=int, default=1000)
    p.add_argument("--limit", type=int, help="evaluate the first N identities")
    p.add_argument("--transforms", help="comma-separated robustness transforms, e.g. identity,jpeg:75 "
                                        "(default: full suite; empty string disables)")
    p.add_argument("--isr-target", help="identity label to measure impersonation towards")
    p.add_argument("--no-protect", action="store_true", help="score the unprotected probes")
    p.add_argument("--batch-size", type=int, default=10)
    p.add_argument("--report", required=True)
    p.add_argument("--markdown")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("remote-verify", help="score two images with a remote verification service")
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.add_argument("--adapter", default="confidence")
    p.set_defaults(func=cmd_remote_verify)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except MasqueError as e:
        print(f"masque: error: {e}", file=sys.stderr)
        return exit_code(e)
    except FileNotFoundError as e:
        print(f"masque: error: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
