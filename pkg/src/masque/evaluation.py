"""Metrics and the evaluation harness.

Dodging/impersonation rates, image quality, prompt adherence (concentration
and hue accuracy), in-/out-of-mask localization and the robustness suite.
Every aggregate in a report can be recomputed from its per-image rows.
"""
from __future__ import annotations

import io
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image
from scipy import ndimage
from skimage.color import rgb2hsv
from skimage.metrics import structural_similarity

from masque.errors import ConfigError, DataError, DegenerateInput, EmptyRegion, IdentityNotInGallery, UnknownTransform
from masque.recognition.embedder import cosine
from masque.recognition.verification import Gallery, VerificationThreshold, rank_identities

REPORT_FORMAT = "masque-report/v1"
MODIFIED_THRESHOLD = 0.02

# expected hue interval (degrees) per makeup colour; black has no hue
HUE_RANGES = {
    "red": (-20.0, 20.0),
    "pink": (290.0, 350.0),
    "purple": (260.0, 300.0),
    "blue": (190.0, 260.0),
    "green": (80.0, 160.0),
    "gold": (35.0, 65.0),
    "brown": (10.0, 40.0),
}


@dataclass
class EvalRecord:
    """One identity: probe (to protect), guide and gallery photos.

    ``protected`` is filled in after protection; metrics evaluate
    ``query`` which falls back to the probe.
    """

    identity: str
    probe: np.ndarray
    guide: np.ndarray
    gallery: np.ndarray
    mask: np.ndarray | None = None  # (H, W) bool
    prompt: str = ""
    protected: np.ndarray | None = None

    @property
    def query(self) -> np.ndarray:
        return self.probe if self.protected is None else self.protected


def _t(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


def _embed(embedder, images) -> torch.Tensor:
    return embedder.embed_batch(np.stack([np.asarray(x) for x in images]))


# -- recognition rates --------------------------------------------------------

def verification_similarities(records, embedder, queries=None) -> np.ndarray:
    q = _embed(embedder, queries if queries is not None else [r.query for r in records])
    g = _embed(embedder, [r.gallery for r in records])
    return cosine(q, g).numpy()


def dsr_verification(records, embedder, threshold: VerificationThreshold, queries=None) -> float:
    """Fraction of records whose query does not verify against its gallery photo."""
    if not records:
        return 0.0
    s = verification_similarities(records, embedder, queries)
    return float(np.mean(~(s > threshold.gamma)))


def true_ranks(records, gallery: Gallery, embedder, queries=None) -> list[int]:
    """1-based rank of each record's true identity in the gallery ranking."""
    for r in records:
        if r.identity not in gallery:
            raise IdentityNotInGallery(r.identity)
    q = _embed(embedder, queries if queries is not None else [r.query for r in records])
    ranks = []
    for r, e in zip(records, q):
        labels = [label for label, _ in rank_identities(e, gallery)]
        ranks.append(labels.index(r.identity) + 1)
    return ranks


def dsr_identification(records, gallery: Gallery, embedder, k: int = 1, queries=None) -> float:
    """Fraction of records whose true identity is not among the top-k."""
    if k < 1:
        raise DataError("k must be >= 1")
    if not records:
        return 0.0
    ranks = true_ranks(records, gallery, embedder, queries)
    return float(np.mean([rank > k for rank in ranks]))


def isr(records, target: str, embedder, gallery: Gallery, threshold: VerificationThreshold | None = None) -> float:
    """Fraction of queries recognised as ``target``.

    With a threshold: similarity to any gallery photo of the target > gamma.
    Without: the target is the rank-1 identity.
    """
    if any(r.identity == target for r in records):
        raise DataError(f"impersonation target {target!r} is the identity of a record")
    if target not in gallery or not records:
        return 0.0
    q = _embed(embedder, [r.query for r in records])
    if threshold is not None:
        s = cosine(q.unsqueeze(1), gallery.entries[target].unsqueeze(0)).max(dim=1).values
        return float((s > threshold.gamma).double().mean())
    hits = [rank_identities(e, gallery)[0][0] == target for e in q]
    return float(np.mean(hits))


# -- image quality --------------------------------------------------------------

def psnr(x_p, x) -> float:
    mse = float(np.mean((np.asarray(x_p, dtype=np.float64) - np.asarray(x, dtype=np.float64)) ** 2))
    if mse == 0:
        return math.inf
    return 10 * math.log10(1.0 / mse)


def ssim(x_p, x) -> float:
    """SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03, averaged over channels."""
    return float(structural_similarity(np.asarray(x_p, dtype=np.float64), np.asarray(x, dtype=np.float64),
                                       gaussian_weights=True, sigma=1.5, win_size=11, K1=0.01, K2=0.03,
                                       use_sample_covariance=False, data_range=1.0, channel_axis=-1))


def image_quality(x_p, x, perceptual=None, strict: bool = False) -> dict:
    """PSNR / SSIM / perceptual distance. Identical images give PSNR = inf
    (or raise DegenerateInput when ``strict``)."""
    x_p, x = np.asarray(x_p), np.asarray(x)
    if x_p.shape != x.shape:
        raise DataError(f"image shapes differ: {x_p.shape} vs {x.shape}")
    p = psnr(x_p, x)
    if strict and math.isinf(p):
        raise DegenerateInput("PSNR undefined for identical images")
    out = {"psnr": p, "ssim": ssim(x_p, x)}
    if perceptual is not None:
        with torch.no_grad():
            out["perceptual"] = float(perceptual(_t(x_p), _t(x)))
    return out


# -- prompt adherence and localization ----------------------------------------

def concentration(x_p, x, mask) -> float:
    """Share of the L1 modification mass (channel-summed) inside the mask; 1 when nothing changed."""
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise EmptyRegion("mask is empty")
    diff = np.abs(np.asarray(x_p, dtype=np.float64) - np.asarray(x, dtype=np.float64)).sum(-1)
    # exactly rounded sums, so the ratio does not depend on summation order
    total = math.fsum(diff.ravel())
    if total == 0:
        return 1.0
    return math.fsum(diff[m].ravel()) / total


@dataclass(frozen=True)
class HueAccuracy:
    value: float
    modified: int

    @property
    def no_modified_pixels(self) -> bool:
        return self.modified == 0

    def __float__(self):
        return self.value


def in_hue_range(hue_deg, hue_range) -> np.ndarray:
    lo, hi = hue_range
    width = hi - lo
    if width >= 360:
        return np.ones_like(np.asarray(hue_deg), dtype=bool)
    return np.mod(np.asarray(hue_deg) - lo, 360.0) <= np.mod(width, 360.0)


def hue_accuracy(x_p, x, mask, hue_range, threshold: float = MODIFIED_THRESHOLD) -> HueAccuracy:
    """Among in-mask pixels changed by more than ``threshold`` (channel-summed |diff|),
    the fraction whose hue in ``x_p`` lies in ``hue_range`` (degrees, circular)."""
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise EmptyRegion("mask is empty")
    x_p = np.asarray(x_p, dtype=np.float64)
    changed = np.abs(x_p - np.asarray(x, dtype=np.float64)).sum(-1) > threshold
    sel = m & changed
    n = int(sel.sum())
    if n == 0:
        return HueAccuracy(0.0, 0)
    hue = rgb2hsv(np.clip(x_p, 0, 1))[..., 0][sel] * 360.0
    return HueAccuracy(float(in_hue_range(hue, hue_range).mean()), n)


def hue_range_for(prompt: str):
    words = prompt.lower().split()
    for color, rng in HUE_RANGES.items():
        if color in words:
            return rng
    return None


def _metric_fn(metric):
    if callable(metric):
        return lambda a, b: float(metric(_t(a), _t(b)))
    if metric == "mse":
        return lambda a, b: float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    from masque.perceptual import get_metric

    try:
        m = get_metric(metric)
    except ConfigError:
        raise ConfigError(f"unknown localization metric {metric!r}") from None
    return lambda a, b: float(m(_t(a), _t(b)))


def localization_delta(x_p, x, mask, metric="random-conv") -> dict:
    """Metric on the masked region pair and on the complement, each divided by
    its area fraction; delta = in - out."""
    m = np.asarray(mask, dtype=np.float64)[..., None]
    frac_in = float(m.mean())
    if frac_in == 0 or frac_in == 1:
        raise EmptyRegion("in-mask or out-of-mask region has zero area")
    fn = _metric_fn(metric)
    x_p = np.asarray(x_p, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    with torch.no_grad():
        in_score = fn(x_p * m, x * m) / frac_in
        out_score = fn(x_p * (1 - m), x * (1 - m)) / (1 - frac_in)
    return {"in_score": in_score, "out_score": out_score, "delta": in_score - out_score}


# -- robustness ---------------------------------------------------------------

def _resize(x, scale=0.5):
    t = _t(x).permute(2, 0, 1)[None]
    h, w = t.shape[-2:]
    small = torch.nn.functional.interpolate(t, scale_factor=scale, mode="bilinear", align_corners=False,
                                            antialias=True)
    back = torch.nn.functional.interpolate(small, size=(h, w), mode="bilinear", align_corners=False)
    return back[0].permute(1, 2, 0).clamp(0, 1).numpy()


def _jpeg(x, quality=75):
    # 4:4:4 so that quality alone controls the loss; 4:2:0 is far from lossless on 32 px faces
    img = Image.fromarray((np.clip(np.asarray(x), 0, 1) * 255).round().astype(np.uint8))
    buf = io.BytesIO()
    img.save(buf, format="JPEG", quality=int(quality), subsampling=0)
    return np.asarray(Image.open(io.BytesIO(buf.getvalue())).convert("RGB"), dtype=np.float64) / 255.0


def _noise(x, sigma=0.02, seed=0):
    rng = np.random.default_rng(seed)
    return np.clip(np.asarray(x) + rng.normal(0, sigma, size=np.shape(x)), 0, 1)


def _blur(x, sigma=1.0):
    return ndimage.gaussian_filter(np.asarray(x, dtype=np.float64), sigma=(sigma, sigma, 0), mode="nearest")


def _fog(x, alpha=0.3):
    return (1 - alpha) * np.asarray(x, dtype=np.float64) + alpha


def ddpm_denoise(backend, images, steps: int = 5, seed: int = 0):
    """Diffusion purification: noise the latents to grid level ``steps`` and
    run ``steps`` unconditional DDIM steps back."""
    x = _t(np.stack([np.asarray(i) for i in images]))
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        z0 = backend.encode_image(x)
        noise = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
        z = backend.schedule.add_noise(z0, noise, steps)
        null = backend.null_embedding()
        for tau in range(steps, 0, -1):
            eps, _ = backend.predict_noise(z, tau, null, null, 1.0)
            z = backend.ddim_step(z, eps, tau, tau - 1)
        return backend.decode_latent(z).clamp(0, 1).numpy()


TRANSFORMS = {
    "identity": (lambda x, p=None: np.asarray(x, dtype=np.float64), None),
    "resize": (_resize, 0.5),
    "jpeg": (_jpeg, 75),
    "gaussian_noise": (_noise, 0.02),
    "gaussian_blur": (_blur, 1.0),
    "fog": (_fog, 0.3),
    "ddpm_denoise": (None, 5),
}
DEFAULT_SUITE = ("identity", "resize", "jpeg", "gaussian_noise", "gaussian_blur", "fog", "ddpm_denoise")


def parse_transform(spec: str):
    name, _, arg = spec.partition(":")
    if name not in TRANSFORMS:
        raise UnknownTransform(f"unknown transform {name!r}; known: {sorted(TRANSFORMS)}")
    default = TRANSFORMS[name][1]
    if arg:
        try:
            param = type(default)(float(arg)) if default is not None else None
        except (TypeError, ValueError):
            raise UnknownTransform(f"bad parameter in transform {spec!r}") from None
    else:
        param = default
    return name, param


def apply_transform(spec: str, images, backend=None, seed: int = 0) -> list:
    name, param = parse_transform(spec)
    if name == "ddpm_denoise":
        if backend is None:
            raise ConfigError("ddpm_denoise needs a diffusion backend")
        return list(ddpm_denoise(backend, images, param, seed))
    fn = TRANSFORMS[name][0]
    if name == "gaussian_noise":
        return [fn(x, param, seed + i) for i, x in enumerate(images)]
    if name == "identity":
        return [fn(x) for x in images]
    return [fn(x, param) for x in images]


def transform_suite(protected, records, embedder, threshold: VerificationThreshold, transforms=DEFAULT_SUITE,
                    backend=None, seed: int = 0) -> list[dict]:
    """DSR_verification per transform of the protected images, with the delta
    against the untransformed rate."""
    base = dsr_verification(records, embedder, threshold, queries=list(protected))
    rows = []
    for spec in transforms:
        imgs = apply_transform(spec, list(protected), backend, seed)
        d = dsr_verification(records, embedder, threshold, queries=imgs)
        rows.append({"transform": spec, "dsr": d, "delta": d - base, "retained": d / base if base else None})
    return rows


# -- reports --------------------------------------------------------------------

def _mean(values):
    vals = [v for v in values if v is not None and not (isinstance(v, float) and math.isinf(v))]
    return float(np.mean(vals)) if vals else None


def _jsonable(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    return v


def _number(v):
    return math.inf if v == "inf" else -math.inf if v == "-inf" else v


def aggregate(rows: list[dict]) -> dict:
    """Aggregates as a pure function of the per-image rows."""
    agg = {"n": len(rows)}
    for key, out in (("dodged_verification", "dsr_verification"), ("dodged_rank1", "dsr_rank1"),
                     ("dodged_rank5", "dsr_rank5"), ("impersonated", "isr")):
        vals = [r[key] for r in rows if r.get(key) is not None]
        agg[out] = float(np.mean(vals)) if vals else None
    for key in ("psnr", "ssim", "perceptual", "concentration", "loc_in", "loc_out", "loc_delta", "similarity"):
        agg[key] = _mean([_number(r.get(key)) for r in rows])
    agg["psnr_infinite"] = sum(1 for r in rows if _number(r.get("psnr")) == math.inf)
    hue = [r["hue_accuracy"] for r in rows if r.get("hue_accuracy") is not None and r.get("hue_modified")]
    agg["hue_accuracy"] = float(np.mean(hue)) if hue else None
    names = sorted({k for r in rows for k in r.get("robustness", {})})
    agg["robustness"] = {n: float(np.mean([r["robustness"][n] for r in rows if n in r.get("robustness", {})]))
                         for n in names}
    return agg


@dataclass
class EvalReport:
    rows: list
    aggregates: dict
    config_digest: str = ""
    created: str = ""
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return _jsonable({"format": REPORT_FORMAT, "config_digest": self.config_digest, "created": self.created,
                          "meta": self.meta, "aggregates": self.aggregates, "rows": self.rows})

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)

    def save(self, path, markdown_path=None):
        tmp = f"{path}.tmp"
        with open(tmp, "w") as f:
            f.write(self.dumps())
        os.replace(tmp, path)
        if markdown_path:
            tmp = f"{markdown_path}.tmp"
            with open(tmp, "w") as f:
                f.write(self.markdown())
            os.replace(tmp, markdown_path)

    @classmethod
    def load(cls, path) -> "EvalReport":
        with open(path) as f:
            d = json.load(f)
        if d.get("format") != REPORT_FORMAT:
            raise DataError(f"{path} is not a {REPORT_FORMAT} report")
        return cls(d["rows"], d["aggregates"], d.get("config_digest", ""), d.get("created", ""), d.get("meta", {}))

    def markdown(self) -> str:
        a = self.aggregates

        def fmt(v):
            return "n/a" if v is None else f"{v:.4f}" if isinstance(v, float) else str(v)

        lines = ["| metric | value |", "|---|---|"]
        for k in ("n", "dsr_verification", "dsr_rank1", "dsr_rank5", "isr", "psnr", "ssim", "perceptual",
                  "concentration", "hue_accuracy", "loc_in", "loc_out", "loc_delta"):
            lines.append(f"| {k} | {fmt(a.get(k))} |")
        if a.get("robustness"):
            lines += ["", "| transform | DSR (verification) |", "|---|---|"]
            lines += [f"| {k} | {fmt(v)} |" for k, v in sorted(a["robustness"].items())]
        lines.append("")
        lines.append(f"config digest: `{self.config_digest}`")
        return "\n".join(lines) + "\n"


def recount(report: dict | EvalReport) -> dict:
    """Recompute the aggregates of a (loaded) report from its rows."""
    rows = report.rows if isinstance(report, EvalReport) else report["rows"]
    return _jsonable(aggregate(rows))


def report_timestamp() -> str:
    """UTC creation time; SOURCE_DATE_EPOCH pins it for reproducible reports."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = int(epoch) if epoch else int(time.time())
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


def evaluate(records, embedder, threshold: VerificationThreshold, gallery: Gallery | None = None,
             perceptual=None, transforms=(), backend=None, isr_target: str | None = None,
             config_digest: str = "", seed: int = 0, meta: dict | None = None) -> EvalReport:
    """Score protected records (``record.protected``) against their probes."""
    queries = [r.query for r in records]
    sims = verification_similarities(records, embedder, queries)
    ranks = true_ranks(records, gallery, embedder, queries) if gallery is not None else [None] * len(records)
    target_hits = None
    if isr_target is not None and gallery is not None:
        target_hits = [isr([r], isr_target, embedder, gallery) if r.identity != isr_target else None
                       for r in records]
    robust = {}
    for spec in transforms:
        imgs = apply_transform(spec, queries, backend, seed)
        s = verification_similarities(records, embedder, imgs)
        robust[spec] = [bool(not v > threshold.gamma) for v in s]

    rows = []
    for i, r in enumerate(records):
        q = image_quality(r.query, r.probe, perceptual)
        row = {"identity": r.identity, "prompt": r.prompt, "similarity": float(sims[i]),
               "dodged_verification": bool(not sims[i] > threshold.gamma),
               "rank": ranks[i],
               "dodged_rank1": None if ranks[i] is None else bool(ranks[i] > 1),
               "dodged_rank5": None if ranks[i] is None else bool(ranks[i] > 5),
               "impersonated": None if target_hits is None or target_hits[i] is None else bool(target_hits[i]),
               **q}
        if r.mask is not None and np.asarray(r.mask).any():
            row["concentration"] = concentration(r.query, r.probe, r.mask)
            hr = hue_range_for(r.prompt)
            if hr is not None:
                h = hue_accuracy(r.query, r.probe, r.mask, hr)
                row["hue_accuracy"], row["hue_modified"] = h.value, h.modified
            if not np.asarray(r.mask).all():
                loc = localization_delta(r.query, r.probe, r.mask, perceptual or "mse")
                row["loc_in"], row["loc_out"], row["loc_delta"] = loc["in_score"], loc["out_score"], loc["delta"]
        row["robustness"] = {k: v[i] for k, v in robust.items()}
        rows.append(_jsonable(row))
    meta = dict(meta or {})
    meta.update({"threshold": threshold.to_json(), "transforms": list(transforms), "isr_target": isr_target})
    return EvalReport(rows, _jsonable(aggregate(rows)), config_digest, report_timestamp(), _jsonable(meta))
