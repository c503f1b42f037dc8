"""Toy attribute world: schema, record sampling, glyph rendering and splits.

Every category owns a rectangular region of the canvas, and every value of a
category owns a colour, so a record renders to a fixed layout of coloured
patches. Seeded jitter (figure offset, colour/gain perturbation, pixel noise)
makes the images of one record differ from each other.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from vtbr.attributes import IDENTITY, SCENE, AttributeRecord, AttributeSchema, Category
from vtbr.errors import RenderError, SplitError

# Regions as fractions of (H, W): (row0, row1, col0, col1). Body parts move
# with the figure jitter; scene strips stay put. "background" is whatever the
# other regions leave uncovered.
FIGURE_REGIONS = {
    "hair": (0.08, 0.20, 0.31, 0.69),
    "upper": (0.22, 0.50, 0.25, 0.75),
    "lower": (0.50, 0.78, 0.28, 0.72),
    "shoes": (0.80, 0.90, 0.25, 0.75),
    "bag": (0.30, 0.55, 0.76, 0.91),
}
SCENE_REGIONS = {
    "illumination": (0.0, 0.06, 0.0, 1.0),
    "weather": (0.94, 1.0, 0.0, 1.0),
    "viewpoint": (0.62, 0.74, 0.0, 0.16),
}
BACKGROUND = "background"

# Colour words share one RGB value wherever they appear, so a red top and red
# trousers differ only in where the colour sits.
COLORS = {
    "red": (0.90, 0.10, 0.10),
    "blue": (0.10, 0.30, 0.90),
    "green": (0.10, 0.70, 0.20),
    "white": (0.95, 0.95, 0.95),
    "black": (0.08, 0.08, 0.08),
    "yellow": (0.95, 0.85, 0.10),
    "purple": (0.60, 0.10, 0.70),
    "orange": (0.95, 0.50, 0.10),
    "brown": (0.50, 0.30, 0.12),
    "grey": (0.55, 0.55, 0.55),
    "blonde": (0.95, 0.80, 0.50),
    "pink": (0.95, 0.55, 0.75),
    "cyan": (0.10, 0.80, 0.80),
}
VALUE_COLORS = {
    ("bag", "none"): "grey",
    ("bag", "backpack"): "brown",
    ("bag", "handbag"): "pink",
    ("viewpoint", "front"): "white",
    ("viewpoint", "back"): "black",
    ("viewpoint", "side"): "grey",
    ("weather", "sunny"): "yellow",
    ("weather", "rainy"): "blue",
    ("weather", "cloudy"): "grey",
    ("weather", "foggy"): "white",
    ("illumination", "bright"): "white",
    ("illumination", "dim"): "grey",
    ("illumination", "dusk"): "orange",
    ("background", "street"): "grey",
    ("background", "park"): "green",
    ("background", "mall"): "white",
    ("background", "station"): "brown",
    ("background", "campus"): "red",
    ("background", "plaza"): "yellow",
}
PALETTE = np.array(list(COLORS.values()), dtype=np.float64)


CLOTHING = ("red", "blue", "green", "white", "black", "yellow", "purple", "orange")


def toy_schema() -> AttributeSchema:
    return AttributeSchema(
        (
            Category("hair", IDENTITY, ("black", "brown", "blonde", "grey")),
            Category("upper", IDENTITY, CLOTHING),
            Category("lower", IDENTITY, CLOTHING),
            Category("shoes", IDENTITY, ("black", "white", "brown")),
            Category("bag", IDENTITY, ("none", "backpack", "handbag")),
            Category("viewpoint", SCENE, ("front", "back", "side")),
            Category("weather", SCENE, ("sunny", "rainy", "cloudy", "foggy")),
            Category("illumination", SCENE, ("bright", "dim", "dusk")),
            Category("background", SCENE, ("street", "park", "mall", "station", "campus", "plaza")),
        )
    )


TOY_TEMPLATES = (
    "a person {with <hair> hair} {wearing a <upper> top} {and <lower> trousers}"
    " {with <shoes> shoes} {carrying a <bag>} {seen from the <viewpoint>}"
    " {in <weather> weather} {under <illumination> light} {near the <background>}",
    "{a <upper> shirt} {and <lower> pants} on a pedestrian {with <hair> hair}"
    " {and <shoes> shoes} {holding a <bag>} {near the <background>}"
    " {on a <weather> day} {in <illumination> light} {from the <viewpoint>}",
)


@dataclass(frozen=True)
class RenderConfig:
    height: int = 64
    width: int = 32
    jitter: int = 2
    noise: float = 0.04
    color_jitter: float = 0.03
    gain_jitter: float = 0.03

    def to_dict(self) -> dict:
        return asdict(self)


def _box(frac, h, w, dy=0, dx=0):
    r0, r1, c0, c1 = frac
    return (
        int(round(r0 * h)) + dy,
        int(round(r1 * h)) + dy,
        int(round(c0 * w)) + dx,
        int(round(c1 * w)) + dx,
    )


def category_regions(schema: AttributeSchema, config: RenderConfig, dy: int = 0, dx: int = 0) -> dict[str, np.ndarray]:
    """Boolean (H, W) masks of the pixels each category controls."""
    h, w = config.height, config.width
    masks = {}
    covered = np.zeros((h, w), dtype=bool)
    for name in schema.names:
        if name == BACKGROUND:
            continue
        if name in FIGURE_REGIONS:
            r0, r1, c0, c1 = _box(FIGURE_REGIONS[name], h, w, dy, dx)
        elif name in SCENE_REGIONS:
            r0, r1, c0, c1 = _box(SCENE_REGIONS[name], h, w)
        else:
            raise RenderError(f"no canvas region for category {name!r}")
        m = np.zeros((h, w), dtype=bool)
        m[max(r0, 0):max(r1, 0), max(c0, 0):max(c1, 0)] = True
        masks[name] = m
        covered |= m
    if BACKGROUND in schema.names:
        masks[BACKGROUND] = ~covered
    return masks


def value_color(schema: AttributeSchema, category: str, value: str) -> np.ndarray:
    cat = schema.category(category)
    if value not in cat.values:
        raise RenderError(f"unknown value {value!r} for category {category!r}")
    name = VALUE_COLORS.get((category, value), value)
    if name in COLORS:
        return np.asarray(COLORS[name], dtype=np.float64)
    return PALETTE[cat.values.index(value) % len(PALETTE)]


def _draw_offset(rng: np.random.Generator, jitter: int) -> tuple[int, int]:
    if jitter <= 0:
        return 0, 0
    dy, dx = rng.integers(-jitter, jitter + 1, size=2)
    return int(dy), int(dx)


def figure_offset(seed: int, config: RenderConfig) -> tuple[int, int]:
    """The (dy, dx) figure shift that ``render_image`` applies for ``seed``."""
    return _draw_offset(np.random.default_rng(seed), config.jitter)


def render_image(
    record: AttributeRecord,
    seed: int,
    config: RenderConfig,
    schema: AttributeSchema,
) -> np.ndarray:
    """Render a record to a (3, H, W) float32 array in [0, 1]."""
    rng = np.random.default_rng(seed)
    h, w = config.height, config.width
    dy, dx = _draw_offset(rng, config.jitter)
    gain = 1.0 + rng.uniform(-config.gain_jitter, config.gain_jitter)

    img = np.zeros((h, w, 3), dtype=np.float64)
    regions = category_regions(schema, config, dy, dx)
    names = schema.names
    # background first so patches paint over it
    order = ([BACKGROUND] if BACKGROUND in names else []) + [n for n in names if n != BACKGROUND]
    for name in order:
        if name not in record.values:
            raise RenderError(f"record lacks category {name!r}")
        color = value_color(schema, name, record.values[name])
        color = color + rng.uniform(-config.color_jitter, config.color_jitter, size=3)
        mask = np.ones((h, w), dtype=bool) if name == BACKGROUND else regions[name]
        img[mask] = color
    img = img * gain + rng.normal(0.0, config.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).transpose(2, 0, 1).astype(np.float32)


@dataclass(frozen=True)
class DomainSpec:
    """Scene-attribute palette of one domain: category -> allowed values."""

    name: str
    scene_values: Mapping[str, Sequence[str]] = field(default_factory=dict)
    identity_offset: int = 0


DEFAULT_DOMAINS = (
    DomainSpec(
        "A",
        {
            "viewpoint": ("front", "back", "side"),
            "weather": ("sunny", "cloudy"),
            "illumination": ("bright", "dim"),
            "background": ("street", "park", "mall"),
        },
        0,
    ),
    DomainSpec(
        "B",
        {
            "viewpoint": ("front", "back", "side"),
            "weather": ("rainy", "foggy"),
            "illumination": ("dusk",  "dim"),
            "background": ("station", "campus", "plaza"),
        },
        10_000,
    ),
)

# skewed identity-level priors; "none" bag dominates so rare-attribute selection drops it
IDENTITY_WEIGHTS = {
    "bag": (0.84, 0.10, 0.06),
    "shoes": (0.6, 0.25, 0.15),
}


def sample_identities(schema: AttributeSchema, n: int, rng: np.random.Generator) -> list[dict[str, str]]:
    """Draw ``n`` identities with pairwise-distinct identity-level attributes."""
    cats = [c for c in schema.categories if c.level == IDENTITY]
    out, seen = [], set()
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 1000 * n:
            raise SplitError(f"cannot draw {n} distinct identities from the schema")
        vals = {}
        for c in cats:
            p = IDENTITY_WEIGHTS.get(c.name)
            p = np.asarray(p) / np.sum(p) if p is not None and len(p) == len(c.values) else None
            vals[c.name] = c.values[int(rng.choice(len(c.values), p=p))]
        key = tuple(vals[c.name] for c in cats)
        if key in seen:
            continue
        seen.add(key)
        out.append(vals)
    return out


def generate_records(
    schema: AttributeSchema,
    domain: DomainSpec,
    n_identities: int,
    n_cameras: int,
    seed: int,
) -> list[AttributeRecord]:
    """One record per (identity, camera). Background follows the camera."""
    rng = np.random.default_rng([seed, domain.identity_offset])
    people = sample_identities(schema, n_identities, rng)
    scene_cats = [c for c in schema.categories if c.level == SCENE]
    records = []
    for i, person in enumerate(people):
        for cam in range(n_cameras):
            vals = dict(person)
            for c in scene_cats:
                allowed = list(domain.scene_values.get(c.name, c.values))
                if c.name == BACKGROUND:
                    vals[c.name] = allowed[cam % len(allowed)]
                else:
                    vals[c.name] = allowed[int(rng.integers(len(allowed)))]
            records.append(AttributeRecord(domain.identity_offset + i, cam, vals))
    return records


Entry = tuple[int, int]  # (record index, render seed)


@dataclass(frozen=True)
class SplitManifest:
    train: tuple[Entry, ...]
    query: tuple[Entry, ...]
    gallery: tuple[Entry, ...]
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "train": [list(e) for e in self.train],
            "query": [list(e) for e in self.query],
            "gallery": [list(e) for e in self.gallery],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SplitManifest":
        conv = lambda xs: tuple((int(a), int(b)) for a, b in xs)  # noqa: E731
        return cls(conv(d["train"]), conv(d["query"]), conv(d["gallery"]), int(d.get("seed", 0)))

    def to_bytes(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True).encode()


def image_seed(split_seed: int, record_index: int, k: int, per_record: int) -> int:
    return split_seed * 1_000_003 + record_index * per_record + k


def make_split(
    records: Sequence[AttributeRecord],
    train_ratio: float,
    seed: int,
    images_per_record: int = 4,
) -> SplitManifest:
    """Identity-disjoint train/test split; test images become query + gallery.

    Each test record with at least two images gives one query image and leaves
    the rest in the gallery. With one image per record, one camera per test
    identity is used as query.
    """
    if not 0.0 < train_ratio < 1.0:
        raise SplitError(f"train ratio must lie in (0, 1) to leave a test split, got {train_ratio}")
    if images_per_record < 1:
        raise SplitError("need at least one image per record")
    rng = np.random.default_rng(seed)
    ids = sorted({r.identity_id for r in records})
    order = [ids[i] for i in rng.permutation(len(ids))]
    n_train = int(round(train_ratio * len(ids)))
    if n_train >= len(ids):
        raise SplitError("train ratio leaves no test identities")
    train_ids = set(order[:n_train])

    by_id: dict[int, list[int]] = {}
    for idx, r in enumerate(records):
        by_id.setdefault(r.identity_id, []).append(idx)

    def entries(idx):
        return [(idx, image_seed(seed, idx, k, images_per_record)) for k in range(images_per_record)]

    train, query, gallery = [], [], []
    for pid in ids:
        recs = by_id[pid]
        if pid in train_ids:
            for idx in recs:
                train.extend(entries(idx))
            continue
        cams = {records[i].camera_id for i in recs}
        if len(cams) < 2:
            raise SplitError(f"identity {pid} has a single camera and cannot be queried")
        if images_per_record >= 2:
            for idx in recs:
                es = entries(idx)
                q = int(rng.integers(len(es)))
                query.append(es[q])
                gallery.extend(e for k, e in enumerate(es) if k != q)
        else:
            q = recs[int(rng.integers(len(recs)))]
            query.extend(entries(q))
            gallery.extend(e for i in recs if i != q for e in entries(i))

    manifest = SplitManifest(tuple(train), tuple(query), tuple(gallery), seed)
    _check_cross_camera(manifest, records)
    return manifest


def _check_cross_camera(manifest: SplitManifest, records: Sequence[AttributeRecord]):
    gal = {(records[i].identity_id, records[i].camera_id) for i, _ in manifest.gallery}
    gal_ids = {}
    for pid, cam in gal:
        gal_ids.setdefault(pid, set()).add(cam)
    for i, _ in manifest.query:
        r = records[i]
        if not (gal_ids.get(r.identity_id, set()) - {r.camera_id}):
            raise SplitError(f"query of identity {r.identity_id} has no cross-camera gallery match")


def render_entries(
    records: Sequence[AttributeRecord],
    entries: Sequence[Entry],
    config: RenderConfig,
    schema: AttributeSchema,
) -> np.ndarray:
    out = np.empty((len(entries), 3, config.height, config.width), dtype=np.float32)
    for n, (idx, seed) in enumerate(entries):
        out[n] = render_image(records[idx], seed, config, schema)
    return out


_MAGIC = b"VTBRIMG1"


def save_images(path: str | Path, images: np.ndarray, meta: dict | None = None):
    """Flat binary: magic, u32 header length, JSON header, row-major f32-le data."""
    arr = np.ascontiguousarray(images, dtype="<f4")
    header = json.dumps({"shape": list(arr.shape), "dtype": "f32-le", "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(arr.tobytes())


def load_images(path: str | Path) -> tuple[np.ndarray, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise RenderError(f"{path} is not an image blob")
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + n])
    if header.get("dtype") != "f32-le":
        raise RenderError(f"unsupported dtype {header.get('dtype')!r}")
    shape = tuple(header["shape"])
    data = np.frombuffer(raw, dtype="<f4", offset=12 + n)
    if data.size != int(np.prod(shape)):
        raise RenderError(f"{path}: expected {np.prod(shape)} values, found {data.size}")
    return data.reshape(shape).astype(np.float32), header.get("meta", {})
