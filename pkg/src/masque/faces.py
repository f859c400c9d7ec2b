"""Procedural synthetic faces.

Each identity is a fixed vector of geometry and colour parameters. Individual
renders of an identity add nuisance variation (position jitter, lighting,
background, makeup). Every render comes with the polygons of its facial
regions so masks are known exactly.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from masque.errors import DataError

IMAGE_SIZE = 32
SUPERSAMPLE = 4
REGIONS = ("lips", "eyebrows", "eyes", "cheeks", "skin")

# RGB in [0, 1]
MAKEUP_COLORS = {
    "red": (0.85, 0.08, 0.10),
    "pink": (0.95, 0.45, 0.65),
    "blue": (0.15, 0.30, 0.90),
    "purple": (0.55, 0.15, 0.65),
    "gold": (0.90, 0.75, 0.20),
    "green": (0.15, 0.70, 0.25),
    "black": (0.05, 0.05, 0.05),
    "brown": (0.40, 0.22, 0.10),
}
# which colours each makeup product is drawn from during dataset generation
MAKEUP_PALETTES = {
    "lipstick": ("red", "pink", "purple", "brown"),
    "eyeshadow": ("pink", "blue", "gold", "green", "purple"),
    "eyebrow": ("blue", "black", "brown", "gold"),
    "blush": ("pink", "red"),
}
# region painted by each product
PRODUCT_REGION = {"lipstick": "lips", "eyeshadow": "eyes", "eyebrow": "eyebrows", "blush": "cheeks"}

SKIN_TONES = np.array([
    [0.96, 0.83, 0.72],
    [0.89, 0.72, 0.58],
    [0.78, 0.58, 0.43],
    [0.62, 0.44, 0.31],
    [0.45, 0.31, 0.21],
])


@dataclass(frozen=True)
class Identity:
    """Geometry and colour parameters that define one synthetic person."""

    skin: tuple[float, float, float]
    face_rx: float
    face_ry: float
    eye_dx: float
    eye_dy: float
    eye_w: float
    eye_h: float
    iris: tuple[float, float, float]
    brow_gap: float
    brow_thick: float
    brow_len: float
    brow_tilt: float
    brow_color: tuple[float, float, float]
    lip_dy: float
    lip_w: float
    lip_h: float
    lip_color: tuple[float, float, float]

    def vector(self) -> np.ndarray:
        parts = []
        for v in asdict(self).values():
            parts.extend(v if isinstance(v, (tuple, list)) else [v])
        return np.asarray(parts, dtype=np.float64)


@dataclass(frozen=True)
class RenderParams:
    dx: float = 0.0
    dy: float = 0.0
    light: float = 1.0
    background: tuple[float, float, float] = (0.5, 0.5, 0.5)
    makeup: dict = field(default_factory=dict)  # product -> colour name


@dataclass
class FaceRender:
    image: np.ndarray  # HxWx3 uint8
    identity_label: str
    identity: Identity
    params: RenderParams
    caption: str
    polygons: dict  # region -> list of polygons, each a list of (x, y) in pixel units

    @property
    def pixels(self) -> np.ndarray:
        return self.image.astype(np.float64) / 255.0


def sample_identity(rng: np.random.Generator) -> Identity:
    w = rng.uniform()
    k = min(int(w * (len(SKIN_TONES) - 1)), len(SKIN_TONES) - 2)
    frac = w * (len(SKIN_TONES) - 1) - k
    skin = (1 - frac) * SKIN_TONES[k] + frac * SKIN_TONES[k + 1]
    iris = rng.choice([[0.25, 0.15, 0.08], [0.20, 0.40, 0.70], [0.25, 0.50, 0.30], [0.10, 0.08, 0.06]])
    brow = rng.choice([[0.12, 0.08, 0.05], [0.35, 0.22, 0.10], [0.70, 0.60, 0.35], [0.05, 0.05, 0.05]])
    lip = skin * np.array([0.85, 0.55, 0.55]) + np.array([0.08, 0.0, 0.0])
    return Identity(
        skin=tuple(float(c) for c in skin),
        face_rx=float(rng.uniform(9.5, 12.5)),
        face_ry=float(rng.uniform(11.5, 14.0)),
        eye_dx=float(rng.uniform(3.5, 5.2)),
        eye_dy=float(rng.uniform(-4.2, -2.2)),
        eye_w=float(rng.uniform(1.6, 2.6)),
        eye_h=float(rng.uniform(0.9, 1.5)),
        iris=tuple(float(c) for c in iris),
        brow_gap=float(rng.uniform(2.0, 3.4)),
        brow_thick=float(rng.uniform(0.8, 1.8)),
        brow_len=float(rng.uniform(2.2, 3.4)),
        brow_tilt=float(rng.uniform(-0.5, 0.5)),
        brow_color=tuple(float(c) for c in brow),
        lip_dy=float(rng.uniform(5.0, 7.5)),
        lip_w=float(rng.uniform(2.8, 4.8)),
        lip_h=float(rng.uniform(1.0, 2.0)),
        lip_color=tuple(float(np.clip(c, 0, 1)) for c in lip),
    )


def sample_render_params(rng: np.random.Generator, makeup_prob: float = 0.5) -> RenderParams:
    makeup = {}
    for product, palette in MAKEUP_PALETTES.items():
        if rng.uniform() < makeup_prob:
            makeup[product] = str(palette[rng.integers(len(palette))])
    bg = rng.uniform(0.1, 0.9) * np.ones(3) + rng.uniform(-0.08, 0.08, size=3)
    return RenderParams(
        dx=float(rng.uniform(-1.0, 1.0)),
        dy=float(rng.uniform(-1.0, 1.0)),
        light=float(rng.uniform(0.9, 1.1)),
        background=tuple(float(c) for c in np.clip(bg, 0, 1)),
        makeup=makeup,
    )


def caption_for(makeup: dict, max_items: int = 2, rng: np.random.Generator | None = None) -> str:
    """Caption naming (up to `max_items` of) the makeup worn in a render."""
    items = [f"{color} {product}" for product, color in sorted(makeup.items())]
    if rng is not None and items:
        order = rng.permutation(len(items))
        items = [items[i] for i in order]
    items = items[:max_items]
    if not items:
        return "a face"
    return "a face with " + " and ".join(items)


def _ellipse(cx, cy, rx, ry, n=24, tilt=0.0):
    a = np.linspace(0, 2 * np.pi, n, endpoint=False)
    x, y = rx * np.cos(a), ry * np.sin(a)
    c, s = np.cos(tilt), np.sin(tilt)
    return [(float(cx + c * xi - s * yi), float(cy + s * xi + c * yi)) for xi, yi in zip(x, y)]


def _brow(cx, cy, length, thick, tilt, side):
    # slightly arched band; `side` mirrors the tilt
    xs = np.linspace(-length, length, 7)
    arch = -0.35 * thick * (1 - (xs / length) ** 2)
    ys = arch + side * tilt * xs / length
    top = [(cx + x, cy + y - thick / 2) for x, y in zip(xs, ys)]
    bottom = [(cx + x, cy + y + thick / 2) for x, y in zip(xs[::-1], ys[::-1])]
    return [(float(x), float(y)) for x, y in top + bottom]


def face_polygons(ident: Identity, params: RenderParams) -> dict:
    cx = IMAGE_SIZE / 2 + params.dx
    cy = IMAGE_SIZE / 2 + 1.0 + params.dy
    polys = {r: [] for r in REGIONS}
    polys["skin"].append(_ellipse(cx, cy, ident.face_rx, ident.face_ry, n=40))
    for side in (-1, 1):
        ex, ey = cx + side * ident.eye_dx, cy + ident.eye_dy
        polys["eyes"].append(_ellipse(ex, ey - 0.4 * ident.eye_h, 1.2 * ident.eye_w, 1.7 * ident.eye_h))
        by = ey - ident.eye_h - ident.brow_gap
        polys["eyebrows"].append(_brow(ex, by, ident.brow_len, ident.brow_thick, ident.brow_tilt, side))
        polys["cheeks"].append(_ellipse(cx + side * 0.6 * ident.face_rx, cy + 0.22 * ident.face_ry, 2.2, 1.8))
    polys["lips"].append(_ellipse(cx, cy + ident.lip_dy, ident.lip_w, ident.lip_h, n=24))
    return polys


def _rgb255(c, light=1.0):
    return tuple(int(round(255 * float(np.clip(v * light, 0, 1)))) for v in c)


def render_face(ident: Identity, params: RenderParams, label: str = "", caption: str | None = None) -> FaceRender:
    s = SUPERSAMPLE
    size = IMAGE_SIZE * s
    img = Image.new("RGB", (size, size), _rgb255(params.background))
    draw = ImageDraw.Draw(img)
    polys = face_polygons(ident, params)
    light = params.light

    def fill(poly, color):
        draw.polygon([(x * s, y * s) for x, y in poly], fill=_rgb255(color, light))

    fill(polys["skin"][0], ident.skin)
    if "blush" in params.makeup:
        blush = 0.55 * np.asarray(ident.skin) + 0.45 * np.asarray(MAKEUP_COLORS[params.makeup["blush"]])
        for p in polys["cheeks"]:
            fill(p, blush)
    if "eyeshadow" in params.makeup:
        for p in polys["eyes"]:
            fill(p, MAKEUP_COLORS[params.makeup["eyeshadow"]])
    cx = IMAGE_SIZE / 2 + params.dx
    cy = IMAGE_SIZE / 2 + 1.0 + params.dy
    for side in (-1, 1):
        ex, ey = cx + side * ident.eye_dx, cy + ident.eye_dy
        fill(_ellipse(ex, ey, ident.eye_w, ident.eye_h), (0.95, 0.95, 0.95))
        r = 0.75 * ident.eye_h
        fill(_ellipse(ex, ey, r, r, n=12), ident.iris)
    brow = MAKEUP_COLORS[params.makeup["eyebrow"]] if "eyebrow" in params.makeup else ident.brow_color
    for p in polys["eyebrows"]:
        fill(p, brow)
    lip = MAKEUP_COLORS[params.makeup["lipstick"]] if "lipstick" in params.makeup else ident.lip_color
    fill(polys["lips"][0], lip)

    arr = np.asarray(img, dtype=np.float64).reshape(IMAGE_SIZE, s, IMAGE_SIZE, s, 3).mean(axis=(1, 3))
    image = np.clip(np.round(arr), 0, 255).astype(np.uint8)
    if caption is None:
        caption = caption_for(params.makeup)
    return FaceRender(image=image, identity_label=label, identity=ident, params=params,
                      caption=caption, polygons=polys)


def rasterize(polygons, size: int = IMAGE_SIZE) -> np.ndarray:
    """Binary mask of pixels whose centres fall inside any polygon."""
    from skimage.draw import polygon2mask

    mask = np.zeros((size, size), dtype=bool)
    for poly in polygons:
        pts = np.asarray(poly, dtype=np.float64)
        if len(pts) < 3:
            continue
        # polygon2mask works in (row, col) with pixel centres at integer coordinates
        rc = np.stack([pts[:, 1] - 0.5, pts[:, 0] - 0.5], axis=1)
        mask |= polygon2mask((size, size), rc)
    return mask


# --------------------------------------------------------------------------
# datasets


@dataclass
class SyntheticFaceSet:
    root: Path | None
    renders: list[FaceRender]
    seed: int
    manifest: dict

    def __len__(self):
        return len(self.renders)

    def identities(self) -> list[str]:
        return sorted({r.identity_label for r in self.renders})

    def by_identity(self) -> dict[str, list[FaceRender]]:
        out: dict[str, list[FaceRender]] = {}
        for r in self.renders:
            out.setdefault(r.identity_label, []).append(r)
        return out

    def images(self) -> np.ndarray:
        return np.stack([r.pixels for r in self.renders])

    def digest(self) -> str:
        return self.manifest["digest"]


def identity_label(i: int) -> str:
    return f"id{i:04d}"


def make_identities(n: int, seed: int) -> list[Identity]:
    rng = np.random.default_rng([seed, 0])
    return [sample_identity(rng) for _ in range(n)]


def generate(n_identities: int, images_per_identity: int, seed: int,
             makeup_prob: float = 0.5, identity_seed: int | None = None) -> SyntheticFaceSet:
    """Render a dataset in memory.

    `identity_seed` selects the population of people; `seed` the individual
    renders. Two sets with the same identity seed depict the same people.
    """
    if n_identities < 1 or images_per_identity < 1:
        raise DataError("need at least one identity and one image per identity")
    ids = make_identities(n_identities, seed if identity_seed is None else identity_seed)
    rng = np.random.default_rng([seed, 1])
    renders = []
    for i, ident in enumerate(ids):
        for _ in range(images_per_identity):
            params = sample_render_params(rng, makeup_prob)
            cap = caption_for(params.makeup, rng=rng)
            renders.append(render_face(ident, params, identity_label(i), cap))
    manifest = _manifest(renders, seed, identity_seed)
    return SyntheticFaceSet(root=None, renders=renders, seed=seed, manifest=manifest)


def _sidecar(r: FaceRender) -> dict:
    p = r.params
    return {
        "identity": r.identity_label,
        "identity_params": asdict(r.identity),
        "render_params": {"dx": p.dx, "dy": p.dy, "light": p.light,
                          "background": list(p.background), "makeup": dict(p.makeup)},
        "caption": r.caption,
        "polygons": {k: [[list(pt) for pt in poly] for poly in v] for k, v in r.polygons.items()},
    }


def _manifest(renders, seed, identity_seed):
    h = hashlib.sha256()
    files = []
    for i, r in enumerate(renders):
        name = f"{i:05d}"
        side = json.dumps(_sidecar(r), sort_keys=True).encode()
        h.update(r.image.tobytes())
        h.update(side)
        files.append(name)
    return {"seed": seed, "identity_seed": identity_seed, "count": len(renders),
            "files": files, "digest": h.hexdigest()}


def save(ds: SyntheticFaceSet, out_dir: str | os.PathLike) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, r in zip(ds.manifest["files"], ds.renders):
        _atomic_write_bytes(out / f"{name}.png", _png_bytes(r.image))
        _atomic_write_bytes(out / f"{name}.json", json.dumps(_sidecar(r), sort_keys=True, indent=1).encode())
    _atomic_write_bytes(out / "manifest.json", json.dumps(ds.manifest, sort_keys=True, indent=1).encode())
    ds.root = out
    return out


def load(root: str | os.PathLike) -> SyntheticFaceSet:
    root = Path(root)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read dataset manifest in {root}: {e}") from e
    renders = []
    for name in manifest["files"]:
        side = json.loads((root / f"{name}.json").read_text())
        image = np.asarray(Image.open(root / f"{name}.png").convert("RGB"))
        ip = {k: tuple(v) if isinstance(v, list) else v for k, v in side["identity_params"].items()}
        rp = side["render_params"]
        params = RenderParams(dx=rp["dx"], dy=rp["dy"], light=rp["light"],
                              background=tuple(rp["background"]), makeup=rp["makeup"])
        polys = {k: [[tuple(pt) for pt in poly] for poly in v] for k, v in side["polygons"].items()}
        renders.append(FaceRender(image=image, identity_label=side["identity"], identity=Identity(**ip),
                                  params=params, caption=side["caption"], polygons=polys))
    ds = SyntheticFaceSet(root=root, renders=renders, seed=manifest["seed"], manifest=manifest)
    recomputed = _manifest(renders, manifest["seed"], manifest.get("identity_seed"))
    if recomputed["digest"] != manifest["digest"]:
        raise DataError(f"dataset in {root} does not match its manifest digest")
    return ds


def _png_bytes(image: np.ndarray) -> bytes:
    import io

    buf = io.BytesIO()
    Image.fromarray(image).save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def _atomic_write_bytes(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
