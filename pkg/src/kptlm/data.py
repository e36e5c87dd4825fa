"""Pose samples, COCO-style dataset files and the synthetic shape generator.

A dataset directory holds ``dataset.json`` (images / annotations /
categories / splits) and, for generated data, ``images.npy`` (uint8,
``N x H x W x 3``) and ``masks.npy`` (bool foreground masks). Images may
instead be referenced by ``file_name`` and are then cropped around their
bounding box and resized.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .errors import SchemaError
from .instructions import KeypointSpec, Registry

DIRECTIONS = ("top", "upper right", "right", "lower right", "bottom", "lower left", "left", "upper left")


@dataclass(frozen=True)
class CropTransform:
    """Maps normalized crop coordinates to original-image pixels: ``px = x0 + u * sx``."""

    x0: float
    y0: float
    sx: float
    sy: float

    def to_pixels(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return np.stack([self.x0 + pts[..., 0] * self.sx, self.y0 + pts[..., 1] * self.sy], axis=-1)

    def to_normalized(self, px: np.ndarray) -> np.ndarray:
        px = np.asarray(px, dtype=np.float64)
        return np.stack([(px[..., 0] - self.x0) / self.sx, (px[..., 1] - self.y0) / self.sy], axis=-1)

    def scaled(self, factor: float) -> "CropTransform":
        return CropTransform(self.x0 * factor, self.y0 * factor, self.sx * factor, self.sy * factor)


@dataclass
class PoseSample:
    image_id: int
    image: np.ndarray  # H x W x 3, float32 in [0, 1]
    category: str
    keypoints: np.ndarray  # K x 3: normalized x, y, visible
    bbox: tuple[float, float, float, float]  # original-image pixels
    crop: CropTransform
    mask: np.ndarray | None = None
    flags: list[str] = field(default_factory=list)

    @property
    def visible(self) -> np.ndarray:
        return self.keypoints[:, 2] > 0


@dataclass
class Dataset:
    samples: list[PoseSample]
    registry: Registry
    splits: dict[str, list[str]]
    warnings: list[str] = field(default_factory=list)

    def subset(self, split: str) -> list[PoseSample]:
        cats = set(self.splits.get(split, []))
        return [s for s in self.samples if s.category in cats]

    def by_id(self) -> dict[int, PoseSample]:
        return {s.image_id: s for s in self.samples}


# -- loading -------------------------------------------------------------------

DATASET_SCHEMA = {
    "type": "object",
    "required": ["images", "annotations", "categories"],
    "properties": {
        "images": {"type": "array", "items": {
            "type": "object", "required": ["id", "width", "height"],
            "properties": {"id": {"type": "integer"}, "width": {"type": "number", "exclusiveMinimum": 0},
                           "height": {"type": "number", "exclusiveMinimum": 0},
                           "file_name": {"type": "string"}, "array_index": {"type": "integer", "minimum": 0},
                           "crop": {"type": "object", "required": ["x0", "y0", "sx", "sy"]}}}},
        "annotations": {"type": "array", "items": {
            "type": "object", "required": ["image_id", "category_id", "keypoints", "bbox"],
            "properties": {"image_id": {"type": "integer"}, "category_id": {"type": "integer"},
                           "keypoints": {"type": "array", "items": {"type": "number"}},
                           "bbox": {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4}}}},
        "categories": {"type": "array", "minItems": 1, "items": {
            "type": "object", "required": ["id", "name", "keypoints"],
            "properties": {"id": {"type": "integer"}, "name": {"type": "string"},
                           "keypoints": {"type": "array", "minItems": 1, "items": {"type": "string"}},
                           "descriptions": {"type": "array", "items": {"type": "string"}}}}},
        "splits": {"type": "object", "additionalProperties": {"type": "array", "items": {"type": "string"}}},
    },
}


def _validate(doc: dict) -> None:
    try:
        jsonschema.validate(doc, DATASET_SCHEMA)
    except jsonschema.ValidationError as e:
        raise SchemaError(e.json_path, e.message) from None
    cats = {c["id"]: c for c in doc["categories"]}
    image_ids = {im["id"] for im in doc["images"]}
    for i, ann in enumerate(doc["annotations"]):
        cat = cats.get(ann["category_id"])
        if cat is None:
            raise SchemaError(f"$.annotations[{i}].category_id", f"unknown category {ann['category_id']}")
        if ann["image_id"] not in image_ids:
            raise SchemaError(f"$.annotations[{i}].image_id", f"unknown image {ann['image_id']}")
        if len(ann["keypoints"]) != 3 * len(cat["keypoints"]):
            raise SchemaError(f"$.annotations[{i}].keypoints",
                              f"expected {3 * len(cat['keypoints'])} values for category {cat['name']!r}")
        if ann["bbox"][2] <= 0 or ann["bbox"][3] <= 0:
            raise SchemaError(f"$.annotations[{i}].bbox", "width and height must be positive")


def registry_from_categories(categories: list[dict]) -> Registry:
    reg = {}
    for c in categories:
        n = len(c["keypoints"])
        desc = c.get("descriptions") or [""] * n
        alt = c.get("alt_descriptions") or [None] * n
        vague = c.get("vague_descriptions") or [None] * n
        reg[c["name"]] = [KeypointSpec(c["keypoints"][i], desc[i], c["name"], alt[i], vague[i]) for i in range(n)]
    return Registry(reg)


def crop_and_resize(img: np.ndarray, bbox, size: int, padding: float = 1.25) -> tuple[np.ndarray, CropTransform]:
    """Square crop of side ``padding * max(w, h)`` centered on the box, resized to ``size``."""
    from PIL import Image

    x, y, w, h = bbox
    side = padding * max(w, h)
    x0, y0 = x + w / 2 - side / 2, y + h / 2 - side / 2
    pil = Image.fromarray(img)
    out = pil.transform((size, size), Image.Transform.EXTENT, (x0, y0, x0 + side, y0 + side),
                        resample=Image.Resampling.BILINEAR)
    return np.asarray(out, dtype=np.float32) / 255.0, CropTransform(x0, y0, side, side)


def lint_sample(s: PoseSample, tol_px: float = 1.0) -> list[str]:
    issues = []
    px = s.crop.to_pixels(s.keypoints[:, :2])
    x, y, w, h = s.bbox
    for k in np.flatnonzero(s.visible):
        u, v = s.keypoints[k, :2]
        if not (0 <= u <= 1 and 0 <= v <= 1):
            issues.append(f"image {s.image_id} keypoint {k}: ({u:.3f}, {v:.3f}) outside the unit square")
        elif not (x - tol_px <= px[k, 0] <= x + w + tol_px and y - tol_px <= px[k, 1] <= y + h + tol_px):
            issues.append(f"image {s.image_id} keypoint {k}: outside bounding box")
    return issues


def load_dataset(path: str | Path, image_size: int = 64, drop_invalid: bool = False) -> Dataset:
    """Read and validate a dataset; lint findings are returned as warnings.

    With ``drop_invalid`` flagged keypoints are marked invisible.
    """
    path = Path(path)
    json_path = path / "dataset.json" if path.is_dir() else path
    root = json_path.parent
    doc = json.loads(json_path.read_text())
    _validate(doc)
    registry = registry_from_categories(doc["categories"])
    cat_names = {c["id"]: c["name"] for c in doc["categories"]}
    images = {im["id"]: im for im in doc["images"]}
    arrays = np.load(root / "images.npy", mmap_mode="r") if (root / "images.npy").exists() else None
    masks = np.load(root / "masks.npy", mmap_mode="r") if (root / "masks.npy").exists() else None

    samples, warnings = [], []
    for ann in doc["annotations"]:
        im = images[ann["image_id"]]
        kp_px = np.asarray(ann["keypoints"], dtype=np.float64).reshape(-1, 3)
        mask = None
        if "array_index" in im:
            if arrays is None:
                raise SchemaError(f"$.images[id={im['id']}]", "array_index given but images.npy is missing")
            pix = np.asarray(arrays[im["array_index"]], dtype=np.float32) / 255.0
            c = im.get("crop") or {"x0": 0.0, "y0": 0.0, "sx": im["width"], "sy": im["height"]}
            crop = CropTransform(float(c["x0"]), float(c["y0"]), float(c["sx"]), float(c["sy"]))
            if masks is not None:
                mask = np.asarray(masks[im["array_index"]], dtype=bool)
        elif "file_name" in im:
            from PIL import Image

            raw = np.asarray(Image.open(root / im["file_name"]).convert("RGB"))
            pix, crop = crop_and_resize(raw, ann["bbox"], image_size)
        else:
            raise SchemaError(f"$.images[id={im['id']}]", "needs file_name or array_index")
        if pix.shape != (image_size, image_size, 3):
            raise SchemaError(f"$.images[id={im['id']}]", f"image shape {pix.shape} != ({image_size}, {image_size}, 3)")
        kps = np.concatenate([crop.to_normalized(kp_px[:, :2]), (kp_px[:, 2:] > 0).astype(np.float64)], axis=1)
        s = PoseSample(int(ann["image_id"]), pix, cat_names[ann["category_id"]], kps,
                       tuple(float(v) for v in ann["bbox"]), crop, mask)
        issues = lint_sample(s)
        if issues:
            s.flags.append("lint")
            warnings.extend(issues)
            if drop_invalid:
                bad = [int(m.split("keypoint ")[1].split(":")[0]) for m in issues]
                s.keypoints[bad, 2] = 0
        samples.append(s)
    splits = doc.get("splits") or {"test": sorted(registry.categories)}
    return Dataset(samples, registry, splits, warnings)


def save_dataset(ds: Dataset, out_dir: str | Path, info: dict | None = None) -> Path:
    """Write ``dataset.json`` plus image/mask arrays; byte-identical for identical input."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cats = list(ds.registry.categories)
    cat_id = {c: i + 1 for i, c in enumerate(cats)}
    categories = []
    for c in cats:
        specs = ds.registry[c]
        entry = {"id": cat_id[c], "name": c, "keypoints": [s.name for s in specs],
                 "descriptions": [s.description for s in specs]}
        if any(s.alt_description for s in specs):
            entry["alt_descriptions"] = [s.alt_description for s in specs]
        if any(s.vague_description for s in specs):
            entry["vague_descriptions"] = [s.vague_description for s in specs]
        categories.append(entry)
    images, annotations = [], []
    for i, s in enumerate(ds.samples):
        H, W = s.image.shape[:2]
        images.append({"id": s.image_id, "width": W, "height": H, "array_index": i,
                       "crop": {"x0": s.crop.x0, "y0": s.crop.y0, "sx": s.crop.sx, "sy": s.crop.sy}})
        px = s.crop.to_pixels(s.keypoints[:, :2])
        flat = []
        for (x, y), v in zip(px, s.keypoints[:, 2]):
            flat += [round(float(x), 6), round(float(y), 6), int(v) * 2]
        annotations.append({"id": i + 1, "image_id": s.image_id, "category_id": cat_id[s.category],
                            "keypoints": flat, "bbox": [round(float(v), 6) for v in s.bbox]})
    doc = {"info": info or {}, "images": images, "annotations": annotations,
           "categories": categories, "splits": ds.splits}
    (out / "dataset.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    np.save(out / "images.npy", np.stack([np.round(s.image * 255).astype(np.uint8) for s in ds.samples]))
    if all(s.mask is not None for s in ds.samples):
        np.save(out / "masks.npy", np.stack([s.mask.astype(bool) for s in ds.samples]))
    return out


# -- synthetic shapes ------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticCategory:
    """A shape family.

    ``outline`` lists polygon vertices as (angle clockwise from up in degrees,
    radius); ``labeled`` holds the outline indices that are keypoints.
    """

    name: str
    outline: tuple[tuple[float, float], ...]
    labeled: tuple[int, ...]
    part: str = "corner"
    rotation: float = 15.0
    scale: tuple[float, float] = (0.26, 0.40)
    aspect: float = 0.15

    def keypoint_names(self) -> list[str]:
        return [f"{DIRECTIONS[round(self.outline[i][0] / 45) % 8]} {self.part}" for i in self.labeled]

    def keypoint_specs(self) -> list[KeypointSpec]:
        names = self.keypoint_names()
        n = len(names)
        specs = []
        for j, name in enumerate(names):
            nxt, prv = names[(j + 1) % n], names[(j - 1) % n]
            desc = f"Clockwise after the {prv}, before the {nxt}." if n > 2 else f"Opposite the {nxt}."
            specs.append(KeypointSpec(name, desc, self.name, alt_description=f"Next to the {nxt}.",
                                      vague_description=f"A {self.part} of the {self.name}."))
        return specs


def _regular(n: int, start: float = 0.0, r: float = 1.0):
    return tuple((start + 360.0 * i / n, r) for i in range(n))


def _star(points: int, start: float = 0.0, inner: float = 0.45):
    out = []
    for i in range(points):
        a = start + 360.0 * i / points
        out += [(a, 1.0), (a + 180.0 / points, inner)]
    return tuple(out)


def _cross(start: float = 0.0, half: float = 0.28):
    # plus sign: arm tips at start + 90 * i, outline as polar points
    pts = []
    for i in range(4):
        a = start + 90.0 * i
        d = math.degrees(math.atan2(half, 1.0))
        r_tip = math.hypot(1.0, half)
        r_in = math.hypot(half, half)
        pts += [(a - d, r_tip), (a + d, r_tip), (a + 45.0, r_in)]
    return tuple(pts)


CATALOG: tuple[SyntheticCategory, ...] = (
    SyntheticCategory("triangle", _regular(3), (0, 1, 2)),
    SyntheticCategory("square", _regular(4, 45.0), (0, 1, 2, 3)),
    SyntheticCategory("pentagon", _regular(5), (0, 1, 2, 3, 4)),
    SyntheticCategory("hexagon", _regular(6), (0, 1, 2, 3, 4, 5)),
    SyntheticCategory("diamond", ((0.0, 1.0), (90.0, 0.75), (180.0, 1.0), (270.0, 0.75)), (0, 1, 2, 3)),
    SyntheticCategory("star", _star(5), (0, 2, 4, 6, 8), part="tip"),
    SyntheticCategory("cross", _cross(), (), part="tip"),
    SyntheticCategory("house", ((0.0, 1.0), (55.0, 0.8), (140.0, 1.0), (220.0, 1.0), (305.0, 0.8)), (0, 1, 2, 3, 4)),
    SyntheticCategory("wedge", _regular(3, 60.0), (0, 1, 2)),
    SyntheticCategory("octagon", _regular(8, 0.0), tuple(range(8))),
    SyntheticCategory("saltire", _cross(45.0), (), part="tip"),
    SyntheticCategory("kite", ((0.0, 1.0), (80.0, 0.6), (180.0, 1.3), (280.0, 0.6)), (0, 1, 2, 3)),
)


def _cross_tips(cat: SyntheticCategory) -> SyntheticCategory:
    # arm tips sit midway between the two outline points of each arm end
    if cat.labeled:
        return cat
    outline = list(cat.outline)
    tips = []
    new_outline = []
    for i in range(4):
        a0, r0 = outline[3 * i]
        a1, r1 = outline[3 * i + 1]
        new_outline += [(a0, r0), ((a0 + a1) / 2, 1.0), (a1, r1), outline[3 * i + 2]]
        tips.append(4 * i + 1)
    return SyntheticCategory(cat.name, tuple(new_outline), tuple(tips), cat.part, cat.rotation, cat.scale, cat.aspect)


CATALOG = tuple(_cross_tips(c) for c in CATALOG)


def _polygon_coverage(verts: np.ndarray, size: int, ss: int = 2) -> np.ndarray:
    """Fraction of each pixel inside the polygon (even-odd rule, ss x ss supersampling)."""
    offs = (np.arange(ss) + 0.5) / ss
    coords = (np.arange(size)[:, None] + offs[None, :]).reshape(-1)
    X, Y = np.meshgrid(coords, coords)
    inside = np.zeros_like(X, dtype=bool)
    x1, y1 = verts[:, 0], verts[:, 1]
    x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
    for a, b, c, d in zip(x1, y1, x2, y2):
        if b == d:
            continue
        crosses = (b > Y) != (d > Y)
        xi = a + (Y - b) * (c - a) / (d - b)
        inside ^= crosses & (X < xi)
    return inside.reshape(size, ss, size, ss).mean(axis=(1, 3))


def render_shape(cat: SyntheticCategory, rng: np.random.Generator, size: int = 64):
    """Draw one instance; returns image, normalized keypoints (K x 2), pixel bbox and mask."""
    rot = math.radians(rng.uniform(-cat.rotation, cat.rotation))
    radius = rng.uniform(*cat.scale)
    ax = 1.0 + rng.uniform(-cat.aspect, cat.aspect)
    ang = np.radians([a for a, _ in cat.outline])
    r = np.array([rr for _, rr in cat.outline])
    local = np.stack([np.sin(ang) * r * ax, -np.cos(ang) * r / ax], axis=1)
    c, s = math.cos(rot), math.sin(rot)
    local = local @ np.array([[c, s], [-s, c]])
    scale = radius / np.abs(local).max()
    local = local * scale
    lo, hi = -local.min(axis=0) + 0.03, 1.0 - local.max(axis=0) - 0.03
    center = rng.uniform(lo, np.maximum(hi, lo))
    pts = local + center  # normalized
    verts = pts * size
    cov = _polygon_coverage(verts, size)[..., None]
    bg = rng.uniform(0.0, 0.35, size=3)
    fg = rng.uniform(0.6, 1.0, size=3)
    noise = rng.normal(0.0, 0.03, size=(size, size, 3))
    img = np.clip(bg * (1 - cov) + fg * cov + noise, 0.0, 1.0).astype(np.float32)
    img = np.round(img * 255) / 255  # match what a uint8 round trip stores
    x0, y0 = verts.min(axis=0)
    x1, y1 = verts.max(axis=0)
    bbox = (float(x0), float(y0), float(x1 - x0), float(y1 - y0))
    return img.astype(np.float32), pts[list(cat.labeled)], bbox, cov[..., 0] > 0.5


def generate_synthetic(n_categories: int = 10, images_per_category: int = 200, seed: int = 0,
                       image_size: int = 64, n_test: int | None = None, n_val: int = 0) -> Dataset:
    """Deterministic shape dataset with disjoint train/val/test category splits."""
    if n_categories < 2:
        raise ValueError("need at least two categories for a train/test split")
    if n_categories > len(CATALOG):
        raise ValueError(f"at most {len(CATALOG)} synthetic categories are available")
    rng = np.random.default_rng(seed)
    cats = list(CATALOG[:n_categories])
    n_test = max(1, round(0.2 * n_categories)) if n_test is None else n_test
    if n_test + n_val >= n_categories:
        raise ValueError("split leaves no training categories")
    order = [cats[i].name for i in rng.permutation(n_categories)]
    splits = {"train": sorted(order[n_test + n_val:]), "val": sorted(order[n_test:n_test + n_val]),
              "test": sorted(order[:n_test])}
    samples, image_id = [], 0
    for cat in cats:
        crng = np.random.default_rng([seed, CATALOG.index(cat)])
        for _ in range(images_per_category):
            img, pts, bbox, mask = render_shape(cat, crng, image_size)
            kps = np.concatenate([pts, np.ones((len(pts), 1))], axis=1)
            samples.append(PoseSample(image_id, img, cat.name, kps, bbox,
                                      CropTransform(0.0, 0.0, float(image_size), float(image_size)), mask))
            image_id += 1
    registry = Registry({c.name: c.keypoint_specs() for c in cats})
    return Dataset(samples, registry, splits)
