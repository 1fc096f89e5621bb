"""Scene refinement: render coarse cluster views, obtain refined targets from
a pluggable refiner, and descend the Gaussian parameters against the
distillation objective. Also the SCL pair sampler used when exporting refiner
training data."""

from __future__ import annotations

import subprocess
import tempfile
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy import ndimage

from .body_model import Mesh
from .cameras import Camera, CameraRig
from .image import ImageBuffer, load_png, save_png
from .metrics import optim_loss, psnr, ssim
from .renderer import (
    DEFAULT_CONFIG,
    RenderConfig,
    render_backward_packed,
    render_normal_map,
    render_packed,
)
from .scene import CrowdScene, pack_scene, unpack_into_scene


class Refiner:
    """Interface: map (coarse rgb, body normal map) to an enhanced rgb image
    of the same size with values in [0, 1]."""

    name = "refiner"

    def refine(self, rgb: ImageBuffer, normal: ImageBuffer) -> ImageBuffer:
        raise NotImplementedError


class IdentityRefiner(Refiner):
    name = "identity"

    def refine(self, rgb: ImageBuffer, normal: ImageBuffer) -> ImageBuffer:
        return rgb


class UnsharpRefiner(Refiner):
    """Classic unsharp sharpening: input + amount * (input - blur(input))."""

    name = "unsharp"

    def __init__(self, amount: float = 1.0, radius: float = 1.5):
        if radius <= 0:
            raise ValueError("unsharp radius must be positive")
        self.amount = float(amount)
        self.radius = float(radius)

    def refine(self, rgb: ImageBuffer, normal: ImageBuffer) -> ImageBuffer:
        blurred = np.stack(
            [
                ndimage.gaussian_filter(rgb.data[:, :, c], sigma=self.radius, mode="nearest")
                for c in range(rgb.channels)
            ],
            axis=2,
        )
        sharpened = rgb.data + self.amount * (rgb.data - blurred)
        return ImageBuffer(np.clip(sharpened, 0.0, 1.0), "rgb")


class ExternalRefiner(Refiner):
    """Shell out to ``command <rgb.png> <normal.png> <out.png>``.

    The command must exit 0 and write out.png with the input dimensions;
    anything else raises with the captured transcript.
    """

    name = "external"

    def __init__(self, command: list[str], timeout_seconds: float = 300.0):
        if not command:
            raise ValueError("external refiner needs a command")
        self.command = [str(c) for c in command]
        self.timeout_seconds = float(timeout_seconds)

    def refine(self, rgb: ImageBuffer, normal: ImageBuffer) -> ImageBuffer:
        with tempfile.TemporaryDirectory(prefix="crowdsplat-refine-") as tmp:
            tmp_path = Path(tmp)
            rgb_path = tmp_path / "rgb.png"
            normal_path = tmp_path / "normal.png"
            out_path = tmp_path / "out.png"
            save_png(rgb, rgb_path, bit_depth=16)
            save_png(normal, normal_path, bit_depth=16)
            argv = self.command + [str(rgb_path), str(normal_path), str(out_path)]
            try:
                proc = subprocess.run(
                    argv, capture_output=True, text=True, timeout=self.timeout_seconds
                )
            except subprocess.TimeoutExpired as exc:
                raise RuntimeError(
                    f"external refiner timed out after {self.timeout_seconds}s: {argv}"
                ) from exc
            transcript = f"stdout:\n{proc.stdout}\nstderr:\n{proc.stderr}"
            if proc.returncode != 0:
                raise RuntimeError(
                    f"external refiner exited {proc.returncode}: {argv}\n{transcript}"
                )
            if not out_path.exists():
                raise RuntimeError(f"external refiner wrote no output: {argv}\n{transcript}")
            out = load_png(out_path, "rgb")
            if (out.height, out.width) != (rgb.height, rgb.width):
                raise RuntimeError(
                    f"external refiner output is {out.width}x{out.height}, "
                    f"expected {rgb.width}x{rgb.height}\n{transcript}"
                )
            return out


def make_refiner(spec: dict) -> Refiner:
    """Instantiate a refiner from its JSON spec ({"kind": ...})."""
    kind = spec.get("kind", "identity")
    if kind == "identity":
        return IdentityRefiner()
    if kind == "unsharp":
        return UnsharpRefiner(amount=spec.get("amount", 1.0), radius=spec.get("radius", 1.5))
    if kind == "external":
        return ExternalRefiner(
            command=spec["command"], timeout_seconds=spec.get("timeout_seconds", 300.0)
        )
    raise ValueError(f"unknown refiner kind {kind!r}")


@dataclass(frozen=True)
class StepSizes:
    """Per-parameter-class learning rates; positions move least so refinement
    stays a detail pass rather than a geometry rewrite."""

    position: float = 1e-4
    log_scale: float = 1e-3
    rotation: float = 1e-3
    opacity_logit: float = 1e-2
    color: float = 1e-2

    def __post_init__(self):
        # zero freezes a parameter class
        if min(self.position, self.log_scale, self.rotation, self.opacity_logit, self.color) < 0:
            raise ValueError("step sizes must be nonnegative")


@dataclass(frozen=True)
class OptimConfig:
    iterations: int = 500
    step_sizes: StepSizes = field(default_factory=StepSizes)
    lambda_ssim: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    views_per_step: int = 4
    seed: int = 0
    render_config: RenderConfig = field(default_factory=RenderConfig)

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.views_per_step < 1:
            raise ValueError("views_per_step must be >= 1")

    def to_dict(self) -> dict:
        doc = asdict(self)
        return doc


@dataclass(frozen=True)
class SclConfig:
    rho: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must be a probability")


@dataclass
class RefinementReport:
    loss_trace: list[float]
    per_view: list[dict]
    wall_clock_seconds: float
    config: dict
    errors: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "loss_trace": self.loss_trace,
            "per_view": self.per_view,
            "wall_clock_seconds": self.wall_clock_seconds,
            "config": self.config,
            "errors": self.errors,
        }


def merge_meshes(meshes: list[Mesh]) -> Mesh:
    if not meshes:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3)))
    verts, faces, normals = [], [], []
    offset = 0
    for mesh in meshes:
        verts.append(mesh.vertices)
        faces.append(mesh.faces + offset)
        normals.append(mesh.vertex_normals)
        offset += len(mesh.vertices)
    return Mesh(np.concatenate(verts), np.concatenate(faces), np.concatenate(normals))


def generate_pseudo_gt(
    scene: CrowdScene,
    cluster: list[str],
    rig: CameraRig,
    refiner: Refiner,
    meshes: dict[str, Mesh],
    render_cfg: RenderConfig = DEFAULT_CONFIG,
) -> list[tuple[Camera, ImageBuffer]]:
    """Render the cluster from every rig camera, pass each view (with the
    cluster's merged normal map) through the refiner, and return the refined
    targets in rig order."""
    cluster = list(cluster)
    missing = [pid for pid in cluster if pid not in scene.person_ids()]
    if missing:
        raise KeyError(f"cluster persons not in scene: {missing}")
    merged = merge_meshes([meshes[pid] for pid in cluster if pid in meshes])
    packed = pack_scene(scene, cluster)
    targets = []
    for view_index, camera in enumerate(rig):
        rgb = render_packed(packed, camera, render_cfg).rgb
        normal = render_normal_map(merged, camera)
        refined = refiner.refine(rgb, normal)
        if (refined.height, refined.width) != (rgb.height, rgb.width):
            raise ValueError(
                f"refiner {refiner.name!r} returned {refined.width}x{refined.height} "
                f"for view {view_index}, expected {rgb.width}x{rgb.height}"
            )
        targets.append((camera, refined))
    return targets


class _Adam:
    """Adaptive-moment descent with bias correction. A zero gradient yields an
    exactly zero update, which the fixed-point guarantee relies on."""

    def __init__(self, shape, beta1, beta2, eps):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def step(self, grad: np.ndarray, lr: float, t: int) -> np.ndarray:
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad**2
        m_hat = self.m / (1.0 - self.beta1**t)
        v_hat = self.v / (1.0 - self.beta2**t)
        return lr * m_hat / (np.sqrt(v_hat) + self.eps)


def distill(
    scene: CrowdScene,
    targets: list[tuple[Camera, ImageBuffer]],
    cfg: OptimConfig = OptimConfig(),
    person_ids: list[str] | None = None,
) -> tuple[CrowdScene, RefinementReport]:
    """Optimize the cluster's Gaussians toward the target images.

    Every iteration renders ``views_per_step`` targets (cycling a seeded
    permutation round-robin, so all views are visited before any repeats),
    averages the distillation loss and its gradients, and applies one
    adaptive-moment update per parameter class. Only the persons in
    ``person_ids`` (default: all) change; colors are projected back into
    [0, 1] after each step and quaternions are renormalized.
    """
    if not targets:
        raise ValueError("distill needs at least one target view")
    start = time.perf_counter()
    packed = pack_scene(scene, person_ids)
    lrs = cfg.step_sizes

    before_metrics = _target_metrics(packed, targets, cfg)

    optimizers = {
        "position": _Adam(packed.positions.shape, cfg.beta1, cfg.beta2, cfg.eps),
        "log_scale": _Adam(packed.log_scales.shape, cfg.beta1, cfg.beta2, cfg.eps),
        "rotation": _Adam(packed.rotations.shape, cfg.beta1, cfg.beta2, cfg.eps),
        "opacity_logit": _Adam(packed.opacity_logits.shape, cfg.beta1, cfg.beta2, cfg.eps),
        "color": _Adam(packed.colors.shape, cfg.beta1, cfg.beta2, cfg.eps),
    }

    rng = np.random.Generator(np.random.Philox(cfg.seed))
    perm = rng.permutation(len(targets))
    cursor = 0
    loss_trace: list[float] = []

    for iteration in range(1, cfg.iterations + 1):
        view_indices = []
        for _ in range(cfg.views_per_step):
            view_indices.append(int(perm[cursor]))
            cursor = (cursor + 1) % len(perm)

        step_loss = 0.0
        g_pos = np.zeros_like(packed.positions)
        g_scale = np.zeros_like(packed.log_scales)
        g_rot = np.zeros_like(packed.rotations)
        g_logit = np.zeros_like(packed.opacity_logits)
        g_color = np.zeros_like(packed.colors)

        for view in view_indices:
            camera, target = targets[view]
            rendered = render_packed(packed, camera, cfg.render_config)
            loss, image_grad = optim_loss(target, rendered.rgb, cfg.lambda_ssim)
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"non-finite distillation loss at iteration {iteration}, view {view}"
                )
            grads = render_backward_packed(packed, camera, image_grad, cfg.render_config)
            step_loss += loss
            g_pos += grads.d_position
            g_scale += grads.d_log_scale
            g_rot += grads.d_rotation
            g_logit += grads.d_opacity_logit
            g_color += grads.d_color

        scale = 1.0 / len(view_indices)
        loss_trace.append(step_loss * scale)

        packed.positions -= optimizers["position"].step(g_pos * scale, lrs.position, iteration)
        packed.log_scales -= optimizers["log_scale"].step(g_scale * scale, lrs.log_scale, iteration)
        packed.opacity_logits -= optimizers["opacity_logit"].step(
            g_logit * scale, lrs.opacity_logit, iteration
        )
        packed.colors = np.clip(
            packed.colors - optimizers["color"].step(g_color * scale, lrs.color, iteration), 0.0, 1.0
        )
        rot_update = optimizers["rotation"].step(g_rot * scale, lrs.rotation, iteration)
        moved = np.any(rot_update != 0.0, axis=1)
        if moved.any():
            new_rot = packed.rotations[moved] - rot_update[moved]
            norms = np.linalg.norm(new_rot, axis=1, keepdims=True)
            if np.any(norms < 1e-12):
                raise RuntimeError(f"rotation collapsed to zero at iteration {iteration}")
            packed.rotations[moved] = new_rot / norms

    after_metrics = _target_metrics(packed, targets, cfg)
    per_view = [
        {
            "view": i,
            "psnr_before": before_metrics[i][0],
            "psnr_after": after_metrics[i][0],
            "ssim_before": before_metrics[i][1],
            "ssim_after": after_metrics[i][1],
        }
        for i in range(len(targets))
    ]
    report = RefinementReport(
        loss_trace=loss_trace,
        per_view=per_view,
        wall_clock_seconds=time.perf_counter() - start,
        config=cfg.to_dict(),
    )
    return unpack_into_scene(packed, scene), report


def _target_metrics(packed, targets, cfg: OptimConfig) -> list[tuple[float, float]]:
    out = []
    for camera, target in targets:
        rendered = render_packed(packed, camera, cfg.render_config).rgb
        out.append((psnr(rendered, target), ssim(rendered, target)))
    return out


def scl_kind(cfg: SclConfig, rng: np.random.Generator) -> str:
    """One mixing draw: "identity" with probability rho, else "degradation"."""
    return "identity" if rng.random() < cfg.rho else "degradation"


def scl_sample(
    pair: tuple[ImageBuffer, ImageBuffer], cfg: SclConfig, rng: np.random.Generator
) -> tuple[ImageBuffer, ImageBuffer, str]:
    """Mix degradation pairs with identity-preserving ones: with probability
    rho return (gt, gt, "identity"), else (coarse, gt, "degradation")."""
    coarse, gt = pair
    if coarse.data.shape != gt.data.shape:
        raise ValueError(
            f"pair images differ in shape: {coarse.data.shape} vs {gt.data.shape}"
        )
    if scl_kind(cfg, rng) == "identity":
        return gt, gt, "identity"
    return coarse, gt, "degradation"
