"""Procedural occlusion masks: keypoint-centered ellipses, thickened Bezier
bands, half-plane line cuts, and morphological smoothing.

Masks are binary {0, 1} float planes. All sampling is driven by a Philox
counter-based generator, and every sampled value is recorded in a MaskSpec so
the pre-morphology union can be replayed exactly from the spec alone.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .image import ImageBuffer

_BEZIER_SAMPLES = 64


@dataclass(frozen=True)
class OcclusionConfig:
    k_max: int = 5  # max keypoint ellipses
    axis_range: tuple[float, float] = (30.0, 100.0)  # semi-axis px
    n_b_range: tuple[int, int] = (0, 5)  # Bezier band count, inclusive
    thickness_range: tuple[float, float] = (20.0, 60.0)  # Bezier band width px
    line_prob: float = 0.5
    max_line_area: float = 0.70
    morph_kernel: int = 5
    morph_close_iters: int = 1
    morph_dilate_iters: int = 3
    fill_color: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if not 0.0 <= self.line_prob <= 1.0:
            raise ValueError("line_prob must be in [0, 1]")
        if not 0.0 < self.max_line_area < 1.0:
            raise ValueError("max_line_area must be in (0, 1)")
        if self.k_max < 0:
            raise ValueError("k_max must be nonnegative")


@dataclass(frozen=True)
class EllipseSpec:
    center: tuple[float, float]
    a_x: float
    a_y: float
    angle: float  # radians


@dataclass(frozen=True)
class BezierSpec:
    c0: tuple[float, float]
    c1: tuple[float, float]
    c2: tuple[float, float]
    thickness: float


@dataclass(frozen=True)
class LineCutSpec:
    p1: tuple[float, float]
    p2: tuple[float, float]
    side: int  # +1 or -1


@dataclass(frozen=True)
class MaskSpec:
    """Every sampled value of one synthesized mask; replayable bit-exactly."""

    seed: int
    width: int
    height: int
    ellipses: tuple[EllipseSpec, ...] = ()
    beziers: tuple[BezierSpec, ...] = ()
    line_cut: LineCutSpec | None = None

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "width": self.width,
            "height": self.height,
            "ellipses": [
                {"center": list(e.center), "a_x": e.a_x, "a_y": e.a_y, "angle": e.angle}
                for e in self.ellipses
            ],
            "beziers": [
                {"c0": list(b.c0), "c1": list(b.c1), "c2": list(b.c2), "thickness": b.thickness}
                for b in self.beziers
            ],
            "line_cut": (
                None
                if self.line_cut is None
                else {"p1": list(self.line_cut.p1), "p2": list(self.line_cut.p2), "side": self.line_cut.side}
            ),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MaskSpec":
        return cls(
            seed=int(doc["seed"]),
            width=int(doc["width"]),
            height=int(doc["height"]),
            ellipses=tuple(
                EllipseSpec(tuple(e["center"]), e["a_x"], e["a_y"], e["angle"])
                for e in doc["ellipses"]
            ),
            beziers=tuple(
                BezierSpec(tuple(b["c0"]), tuple(b["c1"]), tuple(b["c2"]), b["thickness"])
                for b in doc["beziers"]
            ),
            line_cut=(
                None
                if doc.get("line_cut") is None
                else LineCutSpec(
                    tuple(doc["line_cut"]["p1"]),
                    tuple(doc["line_cut"]["p2"]),
                    int(doc["line_cut"]["side"]),
                )
            ),
        )


def ellipse_mask(center, a_x: float, a_y: float, angle: float, width: int, height: int) -> ImageBuffer:
    """Pixels whose coordinates, rotated by -angle into the ellipse frame,
    satisfy u^2/a_x^2 + v^2/a_y^2 <= 1."""
    if a_x <= 0 or a_y <= 0:
        raise ValueError("ellipse semi-axes must be positive")
    out = np.zeros((height, width), dtype=bool)
    reach = max(a_x, a_y)
    x0 = max(int(np.floor(center[0] - reach)), 0)
    x1 = min(int(np.ceil(center[0] + reach)), width - 1)
    y0 = max(int(np.floor(center[1] - reach)), 0)
    y1 = min(int(np.ceil(center[1] + reach)), height - 1)
    if x1 >= x0 and y1 >= y0:
        dx = np.arange(x0, x1 + 1, dtype=np.float64)[None, :] - center[0]
        dy = np.arange(y0, y1 + 1, dtype=np.float64)[:, None] - center[1]
        c, s = np.cos(angle), np.sin(angle)
        u = c * dx + s * dy
        v = -s * dx + c * dy
        out[y0 : y1 + 1, x0 : x1 + 1] = (u / a_x) ** 2 + (v / a_y) ** 2 <= 1.0
    return ImageBuffer(out.astype(np.float64), "mask")


def _bezier_points(c0, c1, c2, samples: int = _BEZIER_SAMPLES) -> np.ndarray:
    t = np.linspace(0.0, 1.0, samples)[:, None]
    c0 = np.asarray(c0, dtype=np.float64)
    c1 = np.asarray(c1, dtype=np.float64)
    c2 = np.asarray(c2, dtype=np.float64)
    return (1 - t) ** 2 * c0 + 2 * (1 - t) * t * c1 + t**2 * c2


def _polyline_normals(points: np.ndarray) -> np.ndarray:
    tangents = np.empty_like(points)
    tangents[1:-1] = points[2:] - points[:-2]
    tangents[0] = points[1] - points[0]
    tangents[-1] = points[-1] - points[-2]
    lengths = np.linalg.norm(tangents, axis=1)
    overall = points[-1] - points[0]
    overall_len = np.linalg.norm(overall)
    fallback = overall / overall_len if overall_len > 1e-12 else np.array([1.0, 0.0])
    unit = np.where(lengths[:, None] > 1e-12, tangents / np.maximum(lengths, 1e-300)[:, None], fallback)
    return np.stack([-unit[:, 1], unit[:, 0]], axis=1)


def _fill_polygon(vertices: np.ndarray, width: int, height: int) -> np.ndarray:
    """Even-odd scanline fill over pixel centers, boundary inclusive.

    A pixel is set when it or an infinitesimally down/left shifted copy has
    odd crossing parity; per scanline that union is exactly the closed column
    intervals [ceil(x_enter), floor(x_exit)] between sorted edge crossings.
    The extra scan at y - eps catches pixels sitting on horizontal boundary
    chains.
    """
    mask = np.zeros((height, width), dtype=bool)
    closed = np.vstack([vertices, vertices[:1]])
    x1, y1 = closed[:-1, 0], closed[:-1, 1]
    x2, y2 = closed[1:, 0], closed[1:, 1]
    keep = y1 != y2
    x1, y1, x2, y2 = x1[keep], y1[keep], x2[keep], y2[keep]
    if not len(x1):
        return mask
    lo = np.minimum(y1, y2)
    hi = np.maximum(y1, y2)
    for dy in (0.0, -1e-9):
        rows = np.arange(height, dtype=np.float64) + dy
        cross = (lo[None, :] <= rows[:, None]) & (rows[:, None] < hi[None, :])
        for r in np.flatnonzero(cross.any(axis=1)):
            sel = cross[r]
            xi = x1[sel] + (rows[r] - y1[sel]) * (x2[sel] - x1[sel]) / (y2[sel] - y1[sel])
            xi.sort()
            for k in range(0, len(xi) - 1, 2):
                a = max(int(np.ceil(xi[k])), 0)
                b = min(int(np.floor(xi[k + 1])), width - 1)
                if b >= a:
                    mask[r, a : b + 1] = True
    return mask


def bezier_mask(c0, c1, c2, thickness: float, width: int, height: int) -> ImageBuffer:
    """Quadratic Bezier curve thickened by +-thickness/2 along its normals and
    filled as a closed polygon."""
    if thickness <= 0:
        raise ValueError("bezier thickness must be positive")
    points = _bezier_points(c0, c1, c2)
    seg_lengths = np.linalg.norm(np.diff(points, axis=0), axis=1)
    if seg_lengths.sum() < 1e-9:
        warnings.warn("degenerate Bezier curve (coincident control points); empty mask")
        return ImageBuffer(np.zeros((height, width)), "mask")
    normals = _polyline_normals(points)
    offset = 0.5 * thickness * normals
    polygon = np.vstack([points + offset, (points - offset)[::-1]])
    return ImageBuffer(_fill_polygon(polygon, width, height).astype(np.float64), "mask")


def line_cut_mask(
    p1, p2, preferred_side: int, width: int, height: int, max_area: float = 0.70
) -> ImageBuffer:
    """Half-plane mask from the signed line function
    L(x, y) = (y - y1)(x2 - x1) - (x - x1)(y2 - y1).

    Pixels strictly on the preferred side are masked; pixels exactly on the
    line never are. If the preferred side covers more than max_area of the
    image the complementary side is returned instead, so with max_area >= 0.5
    the returned fraction never exceeds max_area.
    """
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    if np.allclose(p1, p2):
        raise ValueError("line cut endpoints must differ")
    if preferred_side not in (1, -1):
        raise ValueError("preferred_side must be +1 or -1")
    xs = np.arange(width, dtype=np.float64)[None, :]
    ys = np.arange(height, dtype=np.float64)[:, None]
    level = (ys - p1[1]) * (p2[0] - p1[0]) - (xs - p1[0]) * (p2[1] - p1[1])
    mask = level > 0 if preferred_side > 0 else level < 0
    if mask.mean() > max_area:
        mask = level < 0 if preferred_side > 0 else level > 0
    if mask.mean() > max_area:
        raise ValueError("both half-planes exceed max_area; requires max_area >= 0.5")
    return ImageBuffer(mask.astype(np.float64), "mask")


def _structuring_element(kernel_px: int) -> np.ndarray:
    if kernel_px < 1 or kernel_px % 2 == 0:
        raise ValueError("morphology kernel must be odd and >= 1")
    return np.ones((kernel_px, kernel_px), dtype=bool)


def morph_dilate(mask: ImageBuffer, kernel_px: int, iters: int = 1) -> ImageBuffer:
    """Binary dilation with a square structuring element; outside the image
    counts as 0."""
    structure = _structuring_element(kernel_px)
    binary = mask.data[:, :, 0] > 0.5
    if iters > 0 and kernel_px > 1:
        binary = ndimage.binary_dilation(binary, structure=structure, iterations=iters, border_value=0)
    return ImageBuffer(binary.astype(np.float64), "mask")


def morph_close(mask: ImageBuffer, kernel_px: int, iters: int = 1) -> ImageBuffer:
    """Closing = dilation then erosion, both with the same square element."""
    structure = _structuring_element(kernel_px)
    binary = mask.data[:, :, 0] > 0.5
    if iters > 0 and kernel_px > 1:
        for _ in range(iters):
            binary = ndimage.binary_dilation(binary, structure=structure, border_value=0)
            binary = ndimage.binary_erosion(binary, structure=structure, border_value=0)
    return ImageBuffer(binary.astype(np.float64), "mask")


def mask_union(masks, width: int, height: int) -> ImageBuffer:
    out = np.zeros((height, width), dtype=bool)
    for m in masks:
        out |= m.data[:, :, 0] > 0.5
    return ImageBuffer(out.astype(np.float64), "mask")


def union_from_spec(spec: MaskSpec) -> ImageBuffer:
    """Replay the recorded components into the pre-morphology union."""
    parts = [
        ellipse_mask(e.center, e.a_x, e.a_y, e.angle, spec.width, spec.height)
        for e in spec.ellipses
    ]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        parts += [
            bezier_mask(b.c0, b.c1, b.c2, b.thickness, spec.width, spec.height)
            for b in spec.beziers
        ]
    if spec.line_cut is not None:
        parts.append(
            line_cut_mask(
                spec.line_cut.p1, spec.line_cut.p2, spec.line_cut.side, spec.width, spec.height
            )
        )
    return mask_union(parts, spec.width, spec.height)


def mask_from_spec(spec: MaskSpec, cfg: OcclusionConfig) -> ImageBuffer:
    union = union_from_spec(spec)
    closed = morph_close(union, cfg.morph_kernel, cfg.morph_close_iters)
    return morph_dilate(closed, cfg.morph_kernel, cfg.morph_dilate_iters)


def synthesize_mask(
    keypoints, width: int, height: int, cfg: OcclusionConfig, seed: int
) -> tuple[MaskSpec, ImageBuffer]:
    """Sample a full occlusion mask from a 64-bit seed.

    Draw order (Philox counter-based generator): ellipse count, then per
    ellipse center index / a_x / a_y / angle; Bezier count, then per curve
    C0, C1, C2 (x before y) and thickness; the line-cut coin; then the line
    endpoints and side. With no keypoints the ellipse stage is skipped and
    consumes no draws.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    keypoints = np.asarray(keypoints, dtype=np.float64).reshape(-1, 2)

    ellipses = []
    if len(keypoints):
        n_ellipses = int(rng.integers(0, cfg.k_max, endpoint=True)) if cfg.k_max else 0
        for _ in range(n_ellipses):
            center = keypoints[int(rng.integers(0, len(keypoints)))]
            a_x = float(rng.uniform(*cfg.axis_range))
            a_y = float(rng.uniform(*cfg.axis_range))
            angle = float(rng.uniform(0.0, 2.0 * np.pi))
            ellipses.append(EllipseSpec((float(center[0]), float(center[1])), a_x, a_y, angle))

    beziers = []
    lo, hi = cfg.n_b_range
    # a forced count (lo == hi) consumes no draw
    n_beziers = int(rng.integers(lo, hi, endpoint=True)) if hi > lo else lo
    for _ in range(n_beziers):
        pts = [
            (float(rng.uniform(0.0, width)), float(rng.uniform(0.0, height)))
            for _ in range(3)
        ]
        thickness = float(rng.uniform(*cfg.thickness_range))
        beziers.append(BezierSpec(pts[0], pts[1], pts[2], thickness))

    line_cut = None
    if cfg.line_prob > 0 and rng.random() < cfg.line_prob:
        while True:
            p1 = (float(rng.uniform(0.0, width)), float(rng.uniform(0.0, height)))
            p2 = (float(rng.uniform(0.0, width)), float(rng.uniform(0.0, height)))
            if p1 != p2:
                break
        side = 1 if rng.random() < 0.5 else -1
        line_cut = LineCutSpec(p1, p2, side)

    spec = MaskSpec(
        seed=int(seed),
        width=int(width),
        height=int(height),
        ellipses=tuple(ellipses),
        beziers=tuple(beziers),
        line_cut=line_cut,
    )
    return spec, mask_from_spec(spec, cfg)


def apply_mask(image: ImageBuffer, mask: ImageBuffer, fill=(1.0, 1.0, 1.0)) -> ImageBuffer:
    """Replace masked pixels with the fill color; unmasked pixels pass through
    bit-exact."""
    if image.data.shape[:2] != mask.data.shape[:2]:
        raise ValueError(
            f"image {image.data.shape[:2]} and mask {mask.data.shape[:2]} sizes differ"
        )
    fill = np.asarray(fill, dtype=np.float64)
    masked = mask.data[:, :, 0] > 0.5
    out = image.data.copy()
    out[masked] = fill[: image.channels]
    return ImageBuffer(out, image.role)
