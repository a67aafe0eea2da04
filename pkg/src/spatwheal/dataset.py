"""On-disk case format, polygon annotations and rasterization.

A case is a directory::

    <case>/manifest.json
    <case>/img_01.png ... img_32.png   # directional images, 8-bit RGB
    <case>/full_light.png
    <case>/dark.png                    # optional, reserved

A corpus is a directory of cases plus ``corpus.json`` listing them.
See docs/dataset_format.md for the schema and a worked example.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

import jsonschema
import numpy as np
from PIL import Image

MANIFEST_VERSION = 1
N_DIRECTIONAL = 32
N_PRICKS = 12


class DataError(ValueError):
    """Malformed or incomplete case data."""


MANIFEST_SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["format_version", "case_id", "site", "mm_per_pixel", "height", "width",
                 "images", "prick_layout_mm", "annotations"],
    "properties": {
        "format_version": {"type": "integer", "minimum": 1},
        "case_id": {"type": "string", "minLength": 1},
        "site": {"type": "string"},
        "mm_per_pixel": {"type": "number", "exclusiveMinimum": 0},
        "height": {"type": "integer", "minimum": 1},
        "width": {"type": "integer", "minimum": 1},
        "images": {
            "type": "object",
            "required": ["directional", "full_light"],
            "properties": {
                "directional": {
                    "type": "object",
                    "patternProperties": {"^([1-9]|[12][0-9]|3[0-2])$": {"type": "string"}},
                    "additionalProperties": False,
                },
                "full_light": {"type": ["string", "null"]},
                "dark": {"type": ["string", "null"]},
            },
        },
        "prick_layout_mm": {
            "type": "array",
            "minItems": N_PRICKS,
            "maxItems": N_PRICKS,
            "items": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
        },
        "annotations": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["prick", "polygon"],
                "properties": {
                    "prick": {"type": "integer", "minimum": 0, "maximum": N_PRICKS - 1},
                    "polygon": {
                        "type": "array",
                        "minItems": 3,
                        "items": {"type": "array", "items": {"type": "number"},
                                  "minItems": 2, "maxItems": 2},
                    },
                },
            },
        },
    },
}

CORPUS_SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["format_version", "cases"],
    "properties": {
        "format_version": {"type": "integer", "minimum": 1},
        "cases": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["case_id", "path", "site"],
                "properties": {
                    "case_id": {"type": "string"},
                    "path": {"type": "string"},
                    "site": {"type": "string"},
                    "sha256": {"type": "string"},
                },
            },
        },
    },
}

_KNOWN_KEYS = set(MANIFEST_SCHEMA["properties"])


@dataclass
class ImageStack:
    """One prick test: directional images keyed 1..32, full-light, optional dark.

    Images are uint8 arrays of shape (H, W, 3).
    """

    case_id: str
    directional: dict[int, np.ndarray]
    full_light: np.ndarray | None
    mm_per_pixel: float
    site: str = ""
    dark: np.ndarray | None = None

    @property
    def dims(self) -> tuple[int, int]:
        for im in self._images():
            return im.shape[:2]
        raise DataError(f"stack {self.case_id!r} holds no images")

    def _images(self) -> Iterator[np.ndarray]:
        yield from (self.directional[k] for k in sorted(self.directional))
        if self.full_light is not None:
            yield self.full_light
        if self.dark is not None:
            yield self.dark

    def check(self) -> None:
        dims = {im.shape for im in self._images()}
        if len(dims) > 1:
            raise DataError(f"stack {self.case_id!r} mixes image dims {sorted(dims)}")
        for im in self._images():
            if im.dtype != np.uint8 or im.ndim != 3 or im.shape[2] != 3:
                raise DataError(f"stack {self.case_id!r}: images must be uint8 HxWx3")


@dataclass
class AnnotationSet:
    """Ground-truth polygons (pixel coordinates, x right, y down) per prick index."""

    polygons: dict[int, np.ndarray]
    prick_layout_mm: np.ndarray

    def check(self, dims: tuple[int, int]) -> None:
        h, w = dims
        for k, poly in self.polygons.items():
            if poly.ndim != 2 or poly.shape[1] != 2 or len(poly) < 3:
                raise DataError(f"polygon for prick {k} needs >= 3 (x, y) vertices")
            if (poly[:, 0].min() < 0 or poly[:, 1].min() < 0
                    or poly[:, 0].max() > w or poly[:, 1].max() > h):
                raise DataError(f"polygon for prick {k} leaves the {h}x{w} image")


@dataclass
class Case:
    stack: ImageStack
    annotations: AnnotationSet
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def case_id(self) -> str:
        return self.stack.case_id

    def gt_mask(self) -> np.ndarray:
        return union_gt_mask(self.annotations, self.stack.dims)


# ---------------------------------------------------------------------------
# rasterization


def rasterize_polygon(polygon, dims: tuple[int, int]) -> np.ndarray:
    """Boolean (H, W) mask of pixels whose centre lies inside ``polygon``.

    Pixel (r, c) has centre (c + 0.5, r + 0.5).  Insideness uses the
    even-odd rule with a half-open crossing test, so shared edges are
    assigned to exactly one side.
    """
    poly = np.asarray(polygon, dtype=np.float64)
    if poly.ndim != 2 or poly.shape[1] != 2 or len(poly) < 3:
        raise DataError("polygon needs at least 3 (x, y) vertices")
    h, w = dims
    mask = np.zeros((h, w), dtype=bool)
    x0, y0 = poly[:, 0], poly[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    r_lo = max(int(np.floor(poly[:, 1].min() - 0.5)), 0)
    r_hi = min(int(np.ceil(poly[:, 1].max() - 0.5)), h - 1)
    centres_x = np.arange(w) + 0.5
    for r in range(r_lo, r_hi + 1):
        yc = r + 0.5
        crosses = (y0 <= yc) != (y1 <= yc)
        if not crosses.any():
            continue
        xa, ya, xb, yb = x0[crosses], y0[crosses], x1[crosses], y1[crosses]
        xs = np.sort(xa + (yc - ya) * (xb - xa) / (yb - ya))
        # count of crossings strictly right of each centre: odd -> inside
        n_right = len(xs) - np.searchsorted(xs, centres_x, side="right")
        mask[r] = (n_right % 2) == 1
    return mask


def union_gt_mask(annotations: AnnotationSet, dims: tuple[int, int]) -> np.ndarray:
    mask = np.zeros(dims, dtype=bool)
    for poly in annotations.polygons.values():
        mask |= rasterize_polygon(poly, dims)
    return mask


def shoelace_area(polygon) -> float:
    p = np.asarray(polygon, dtype=np.float64)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


# ---------------------------------------------------------------------------
# manifest I/O


def directional_name(k: int) -> str:
    return f"img_{k:02d}.png"


def validate_manifest(doc: Any) -> None:
    try:
        jsonschema.validate(doc, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise DataError(f"manifest invalid at {where}: {exc.message}") from None


def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def _write_png(path: Path, arr: np.ndarray) -> None:
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="RGB").save(path, format="PNG", optimize=False)


def load_case(path) -> Case:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.is_file():
        raise DataError(f"no manifest.json in {path}")
    try:
        doc = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{mpath}: not valid JSON ({exc})") from None
    validate_manifest(doc)

    imgs = doc["images"]
    names = {int(k): v for k, v in imgs["directional"].items()}
    directional = {}
    for k in range(1, N_DIRECTIONAL + 1):
        if k not in names:
            raise DataError(f"case {doc['case_id']!r}: directional image index {k} not listed in manifest")
        f = path / names[k]
        if not f.is_file():
            raise DataError(f"case {doc['case_id']!r}: directional image index {k} missing ({f.name})")
        directional[k] = _read_png(f)
    full = _read_png(path / imgs["full_light"]) if imgs.get("full_light") else None
    dark = _read_png(path / imgs["dark"]) if imgs.get("dark") else None

    stack = ImageStack(case_id=doc["case_id"], directional=directional, full_light=full,
                       mm_per_pixel=float(doc["mm_per_pixel"]), site=doc["site"], dark=dark)
    stack.check()
    if stack.dims != (doc["height"], doc["width"]):
        raise DataError(f"case {doc['case_id']!r}: images are {stack.dims}, manifest says "
                        f"{(doc['height'], doc['width'])}")
    ann = AnnotationSet(
        polygons={a["prick"]: np.asarray(a["polygon"], dtype=np.float64) for a in doc["annotations"]},
        prick_layout_mm=np.asarray(doc["prick_layout_mm"], dtype=np.float64),
    )
    ann.check(stack.dims)
    extra = {k: v for k, v in doc.items() if k not in _KNOWN_KEYS}
    return Case(stack, ann, extra)


def case_manifest(case: Case) -> dict[str, Any]:
    s = case.stack
    h, w = s.dims
    doc = copy.deepcopy(case.extra)
    doc.update({
        "format_version": MANIFEST_VERSION,
        "case_id": s.case_id,
        "site": s.site,
        "mm_per_pixel": s.mm_per_pixel,
        "height": h,
        "width": w,
        "images": {
            "directional": {str(k): directional_name(k) for k in sorted(s.directional)},
            "full_light": "full_light.png" if s.full_light is not None else None,
            "dark": "dark.png" if s.dark is not None else None,
        },
        "prick_layout_mm": case.annotations.prick_layout_mm.tolist(),
        "annotations": [{"prick": int(k), "polygon": case.annotations.polygons[k].tolist()}
                        for k in sorted(case.annotations.polygons)],
    })
    return doc


def _atomic_dir_write(target: Path, fill) -> None:
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    try:
        fill(tmp)
        if target.exists():
            old = Path(tempfile.mkdtemp(prefix=f".{target.name}.old.", dir=target.parent))
            os.replace(target, old / "x")
            os.replace(tmp, target)
            shutil.rmtree(old)
        else:
            os.replace(tmp, target)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def save_case(case: Case, path) -> None:
    """Write ``case`` to directory ``path`` via a temp dir + rename."""
    case.stack.check()
    doc = case_manifest(case)
    validate_manifest(doc)

    def fill(d: Path):
        s = case.stack
        for k in sorted(s.directional):
            _write_png(d / directional_name(k), s.directional[k])
        if s.full_light is not None:
            _write_png(d / "full_light.png", s.full_light)
        if s.dark is not None:
            _write_png(d / "dark.png", s.dark)
        (d / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")

    _atomic_dir_write(Path(path), fill)


def case_digest(path) -> str:
    """sha256 over every file of a case directory, in name order."""
    h = hashlib.sha256()
    for f in sorted(Path(path).iterdir()):
        if f.is_file():
            h.update(f.name.encode())
            h.update(hashlib.sha256(f.read_bytes()).digest())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# corpus


def load_corpus_manifest(root) -> dict[str, Any]:
    root = Path(root)
    mpath = root / "corpus.json"
    if not mpath.is_file():
        raise DataError(f"no corpus.json in {root}")
    doc = json.loads(mpath.read_text())
    try:
        jsonschema.validate(doc, CORPUS_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise DataError(f"corpus manifest invalid: {exc.message}") from None
    return doc


def manifest_hash(root) -> str:
    """sha256 of the canonical JSON of ``corpus.json``."""
    doc = load_corpus_manifest(root)
    return hashlib.sha256(json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def iter_corpus(root) -> Iterator[Case]:
    root = Path(root)
    for entry in load_corpus_manifest(root)["cases"]:
        yield load_case(root / entry["path"])


def load_corpus(root) -> list[Case]:
    return list(iter_corpus(root))
