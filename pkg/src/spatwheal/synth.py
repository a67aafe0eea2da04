"""Deterministic synthetic prick-test cases.

Each wheal is a smooth raised plateau with an irregular elliptical outline.
The 32 directional images are Lambertian renderings of the skin height field
under low-to-high raking lights with cast shadows, so wheal edges show
bright/dark lines.  The full-light image averages the six top lights, which
leaves only a faint albedo cue.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from .dataset import (
    AnnotationSet, Case, DataError, ImageStack, N_DIRECTIONAL, N_PRICKS,
    _atomic_dir_write, case_digest, save_case, shoelace_area,
)

FULL_LIGHT_INDICES = (14, 15, 16, 17, 18, 19)


class SynthConfigError(ValueError):
    pass


def default_prick_layout_mm() -> np.ndarray:
    """Twelve prick sites (x, y) in mm around the image centre: 4 rows x 3 columns."""
    xs = (-9.0, 0.0, 9.0)
    ys = (-16.5, -5.5, 5.5, 16.5)
    return np.array([(x, y) for y in ys for x in xs], dtype=np.float64)


def light_directions() -> np.ndarray:
    """(32, 3) unit vectors pointing from skin to light; z is the skin normal.

    Lights 1-16 sit on the -x side rising from low to high elevation, 17-32
    on the +x side falling back down.  Azimuths fan out along the arm (y) so
    both outline directions get raking light.
    """
    elev = np.deg2rad(np.linspace(8.0, 80.0, 16))
    fan = np.deg2rad(np.array([-50.0, -20.0, 20.0, 50.0] * 4))
    dirs = []
    for k in range(N_DIRECTIONAL):
        if k < 16:
            e, az = elev[k], np.pi + fan[k]
        else:
            e, az = elev[31 - k], -fan[31 - k]
        dirs.append((np.cos(e) * np.cos(az), np.cos(e) * np.sin(az), np.sin(e)))
    return np.array(dirs)


@dataclass(frozen=True)
class SynthConfig:
    height: int = 192
    width: int = 128
    mm_per_pixel: float = 0.25
    presence_prob: float = 0.75
    diameter_mm: tuple[float, float] = (3.0, 7.0)
    aspect: tuple[float, float] = (0.8, 1.0)
    irregularity: float = 0.06
    elevation_mm: tuple[float, float] = (0.25, 0.6)
    edge_width_mm: float = 0.35
    center_jitter_mm: float = 0.1
    max_shift_mm: float = 2.0
    max_rotation_deg: float = 3.0
    albedo_contrast: float = 0.035
    texture_amplitude: float = 0.08
    noise_sigma: float = 0.015
    shadow_strength: float = 0.45
    sites: tuple[str, ...] = ("site_a", "site_b", "site_c", "site_d")
    depth_divisor: int = 8
    polygon_vertices: int = 64

    def __post_init__(self):
        if self.height % self.depth_divisor or self.width % self.depth_divisor:
            raise SynthConfigError(f"dims {self.height}x{self.width} not divisible by {self.depth_divisor}")
        lo, hi = self.diameter_mm
        if lo > hi:
            raise SynthConfigError("diameter range is reversed")
        if lo / self.mm_per_pixel < 1.0:
            raise SynthConfigError(f"wheal diameter {lo} mm is below one pixel")
        if not 0.0 <= self.presence_prob <= 1.0:
            raise SynthConfigError("presence_prob must lie in [0, 1]")
        if not self.sites:
            raise SynthConfigError("need at least one site key")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SynthConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise SynthConfigError(f"unknown synth config keys {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class Wheal:
    prick: int
    center_mm: np.ndarray
    semi_axes_mm: tuple[float, float]
    orientation: float
    harmonics: np.ndarray     # rows (k, amplitude, phase)
    elevation_mm: float

    def radius(self, psi: np.ndarray) -> np.ndarray:
        a, b = self.semi_axes_mm
        t = psi - self.orientation
        r = a * b / np.sqrt((b * np.cos(t)) ** 2 + (a * np.sin(t)) ** 2)
        pert = np.ones_like(psi)
        for k, amp, ph in self.harmonics:
            pert += amp * np.cos(k * psi + ph)
        return r * pert


@dataclass
class SynthCase:
    stack: ImageStack
    polygons: dict[int, np.ndarray]
    transform: tuple[float, float, float]
    true_area_mm2: dict[int, float]
    site: str
    wheals: list[Wheal] = field(default_factory=list)
    prick_layout_mm: np.ndarray = field(default_factory=default_prick_layout_mm)

    def to_case(self, config: SynthConfig | None = None) -> Case:
        extra: dict[str, Any] = {
            "synth": {
                "transform": {"tx_mm": self.transform[0], "ty_mm": self.transform[1],
                              "theta_deg": self.transform[2]},
                "true_area_mm2": {str(k): v for k, v in sorted(self.true_area_mm2.items())},
            }
        }
        if config is not None:
            extra["synth"]["config"] = config.to_dict()
        return Case(self.stack, AnnotationSet(dict(self.polygons), self.prick_layout_mm.copy()), extra)


def apply_transform(points_mm: np.ndarray, tx: float, ty: float, theta_deg: float) -> np.ndarray:
    """Rotate about the layout origin by ``theta_deg`` then translate, all in mm."""
    th = np.deg2rad(theta_deg)
    c, s = np.cos(th), np.sin(th)
    rot = np.array([[c, -s], [s, c]])
    return np.asarray(points_mm, dtype=np.float64) @ rot.T + np.array([tx, ty])


def mm_to_px(points_mm: np.ndarray, dims: tuple[int, int], mm_per_pixel: float) -> np.ndarray:
    h, w = dims
    return np.asarray(points_mm) / mm_per_pixel + np.array([w / 2.0, h / 2.0])


def px_to_mm(points_px: np.ndarray, dims: tuple[int, int], mm_per_pixel: float) -> np.ndarray:
    h, w = dims
    return (np.asarray(points_px) - np.array([w / 2.0, h / 2.0])) * mm_per_pixel


def _value_noise(rng: np.random.Generator, dims: tuple[int, int], cell_px: float) -> np.ndarray:
    h, w = dims
    gh, gw = int(np.ceil(h / cell_px)) + 2, int(np.ceil(w / cell_px)) + 2
    grid = rng.standard_normal((gh, gw))
    ys = np.arange(h) / cell_px
    xs = np.arange(w) / cell_px
    y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
    fy, fx = ys - y0, xs - x0
    fy = fy * fy * (3 - 2 * fy)
    fx = fx * fx * (3 - 2 * fx)
    g00 = grid[np.ix_(y0, x0)]
    g01 = grid[np.ix_(y0, x0 + 1)]
    g10 = grid[np.ix_(y0 + 1, x0)]
    g11 = grid[np.ix_(y0 + 1, x0 + 1)]
    top = g00 * (1 - fx) + g01 * fx
    bot = g10 * (1 - fx) + g11 * fx
    return top * (1 - fy[:, None]) + bot * fy[:, None]


def _plant_wheals(cfg: SynthConfig, rng: np.random.Generator, layout: np.ndarray,
                  transform: tuple[float, float, float]) -> list[Wheal]:
    centres = apply_transform(layout, *transform)
    wheals = []
    for i in range(N_PRICKS):
        present = rng.random() < cfg.presence_prob
        diameter = rng.uniform(*cfg.diameter_mm)
        aspect = rng.uniform(*cfg.aspect)
        orient = rng.uniform(0, np.pi)
        jitter = rng.normal(0.0, cfg.center_jitter_mm, size=2)
        ks = np.arange(2, 6)
        amps = rng.normal(0.0, cfg.irregularity, size=len(ks)) / np.sqrt(ks - 1)
        phases = rng.uniform(0, 2 * np.pi, size=len(ks))
        elev = rng.uniform(*cfg.elevation_mm)
        if not present:
            continue
        # equal-area ellipse for the drawn diameter
        a = diameter / 2.0 / np.sqrt(aspect)
        wheals.append(Wheal(i, centres[i] + jitter, (a, a * aspect), orient,
                            np.column_stack([ks, amps, phases]), elev))
    return wheals


def _height_field(cfg: SynthConfig, wheals: list[Wheal], xx_mm: np.ndarray, yy_mm: np.ndarray) -> np.ndarray:
    h = np.zeros_like(xx_mm)
    for wh in wheals:
        dx, dy = xx_mm - wh.center_mm[0], yy_mm - wh.center_mm[1]
        rho = np.hypot(dx, dy)
        psi = np.arctan2(dy, dx)
        edge = wh.radius(psi)
        h += wh.elevation_mm * 0.5 * (1.0 + np.tanh((edge - rho) / cfg.edge_width_mm))
    return h


def _inside_field(wheals: list[Wheal], xx_mm: np.ndarray, yy_mm: np.ndarray, soft_mm: float) -> np.ndarray:
    out = np.zeros_like(xx_mm)
    for wh in wheals:
        dx, dy = xx_mm - wh.center_mm[0], yy_mm - wh.center_mm[1]
        d = wh.radius(np.arctan2(dy, dx)) - np.hypot(dx, dy)
        out = np.maximum(out, 1.0 / (1.0 + np.exp(-d / soft_mm)))
    return out


def _cast_shadow(height_mm: np.ndarray, light: np.ndarray, mm_per_pixel: float, max_steps: int = 40) -> np.ndarray:
    """Occlusion depth (mm) of each pixel along the ray towards ``light``."""
    hgt, wid = height_mm.shape
    horiz = np.hypot(light[0], light[1])
    if horiz < 1e-6 or height_mm.max() <= 0:
        return np.zeros_like(height_mm)
    ux, uy = light[0] / horiz, light[1] / horiz
    rise = light[2] / horiz * mm_per_pixel        # ray rise per pixel step
    rows, cols = np.indices(height_mm.shape)
    occl = np.zeros_like(height_mm)
    top = height_mm.max()
    for t in range(1, max_steps + 1):
        if t * rise > top:
            break
        r = np.clip(np.rint(rows + t * uy).astype(int), 0, hgt - 1)
        c = np.clip(np.rint(cols + t * ux).astype(int), 0, wid - 1)
        occl = np.maximum(occl, height_mm[r, c] - t * rise - height_mm)
    return occl


def _shade(cfg: SynthConfig, height_mm: np.ndarray, albedo: np.ndarray, light: np.ndarray) -> np.ndarray:
    gy, gx = np.gradient(height_mm, cfg.mm_per_pixel)
    norm = np.sqrt(gx * gx + gy * gy + 1.0)
    lambert = np.clip((-gx * light[0] - gy * light[1] + light[2]) / norm, 0.0, None)
    diffuse = lambert / max(light[2], 0.35)
    occl = _cast_shadow(height_mm, light, cfg.mm_per_pixel)
    shadow = 1.0 - cfg.shadow_strength * np.clip(occl / 0.05, 0.0, 1.0)
    return albedo * (0.35 + 0.65 * diffuse * shadow)[..., None]


def generate_case(config: SynthConfig, seed: int, case_id: str = "synth", site: str | None = None) -> SynthCase:
    """Render one case; a pure function of ``(config, seed, case_id, site)``."""
    cfg = config
    rng = np.random.default_rng(seed)
    dims = (cfg.height, cfg.width)
    layout = default_prick_layout_mm()
    transform = (
        float(rng.uniform(-cfg.max_shift_mm, cfg.max_shift_mm)),
        float(rng.uniform(-cfg.max_shift_mm, cfg.max_shift_mm)),
        float(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)),
    )
    wheals = _plant_wheals(cfg, rng, layout, transform)

    s = cfg.mm_per_pixel
    xx_mm, yy_mm = np.meshgrid((np.arange(cfg.width) + 0.5 - cfg.width / 2) * s,
                               (np.arange(cfg.height) + 0.5 - cfg.height / 2) * s)
    height = _height_field(cfg, wheals, xx_mm, yy_mm)

    skin = np.array([0.80, 0.62, 0.52]) * rng.uniform(0.85, 1.1)
    texture = (cfg.texture_amplitude * _value_noise(rng, dims, 6.0 / s)
               + 0.3 * cfg.texture_amplitude * _value_noise(rng, dims, 1.5 / s))
    albedo = skin[None, None, :] * (1.0 + texture)[..., None]
    if wheals:
        inside = _inside_field(wheals, xx_mm, yy_mm, 0.3)
        flare = _inside_field([_grown(w, 1.5) for w in wheals], xx_mm, yy_mm, 0.6) - inside
        albedo = albedo * (1.0 + cfg.albedo_contrast * inside)[..., None]
        albedo[..., 0] *= 1.0 + 0.6 * cfg.albedo_contrast * np.clip(flare, 0, 1)

    lights = light_directions()
    renders = {}
    for k in range(1, N_DIRECTIONAL + 1):
        renders[k] = _shade(cfg, height, albedo, lights[k - 1])

    def finish(img):
        gain = rng.uniform(0.92, 1.08)
        img = img * gain + rng.normal(0.0, cfg.noise_sigma, size=img.shape)
        return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)

    directional = {k: finish(renders[k]) for k in range(1, N_DIRECTIONAL + 1)}
    full = finish(np.mean([renders[k] for k in FULL_LIGHT_INDICES], axis=0))

    polygons, areas = {}, {}
    psi = np.linspace(0.0, 2 * np.pi, cfg.polygon_vertices, endpoint=False)
    dense = np.linspace(0.0, 2 * np.pi, 4096, endpoint=False)
    for wh in wheals:
        pts_mm = wh.center_mm + wh.radius(psi)[:, None] * np.column_stack([np.cos(psi), np.sin(psi)])
        pts = mm_to_px(pts_mm, dims, s)
        pts[:, 0] = np.clip(pts[:, 0], 0.0, cfg.width)
        pts[:, 1] = np.clip(pts[:, 1], 0.0, cfg.height)
        polygons[wh.prick] = np.round(pts, 4)
        r = wh.radius(dense)
        areas[wh.prick] = float(abs(shoelace_area(np.column_stack([r * np.cos(dense), r * np.sin(dense)]))))

    stack = ImageStack(case_id=case_id, directional=directional, full_light=full,
                       mm_per_pixel=s, site=site if site is not None else cfg.sites[0])
    return SynthCase(stack, polygons, transform, areas, stack.site, wheals, layout)


def _grown(w: Wheal, by_mm: float) -> Wheal:
    a, b = w.semi_axes_mm
    return Wheal(w.prick, w.center_mm, (a + by_mm, b + by_mm), w.orientation, w.harmonics, w.elevation_mm)


def case_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_corpus(config: SynthConfig, n_cases: int, seed: int, out) -> dict[str, Any]:
    """Write ``n_cases`` cases plus corpus.json to directory ``out``.

    Sites are assigned round-robin over ``config.sites``.  Returns the corpus
    manifest document.
    """
    if n_cases < 1:
        raise SynthConfigError("n_cases must be >= 1")
    out = Path(out)

    def fill(root: Path):
        entries = []
        for i in range(n_cases):
            cid = f"case_{i:04d}"
            site = config.sites[i % len(config.sites)]
            sc = generate_case(config, case_seed(seed, i), case_id=cid, site=site)
            save_case(sc.to_case(), root / cid)
            entries.append({"case_id": cid, "path": cid, "site": site, "sha256": case_digest(root / cid)})
        doc = {"format_version": 1, "seed": seed, "generator": config.to_dict(), "cases": entries}
        (root / "corpus.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")

    try:
        _atomic_dir_write(out, fill)
    except OSError as exc:
        raise DataError(f"cannot write corpus to {out}: {exc}") from exc
    return json.loads((out / "corpus.json").read_text())



