"""Differentiable Gaussian splat rendering on the CPU.

Forward: each 3D Gaussian is projected to a 2D mean and covariance with the
first-order perspective Jacobian, sorted front to back, and alpha-composited
per pixel. Tiling with conservative bounding radii is purely an acceleration;
results match an untiled per-pixel evaluation to well below 1e-5.

Backward: exact analytic gradients of the forward compositing, including the
projection Jacobian's dependence on position. Clamps, culling, and early
termination are treated straight-through (zero gradient past the boundary).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .cameras import Camera
from .image import ImageBuffer
from .scene import CrowdScene, PackedGaussians, pack_scene


@dataclass(frozen=True)
class RenderConfig:
    """Numeric knobs for the rasterizer.

    alpha_clamp bounds per-splat opacity away from 1 so the backward pass
    never divides by zero. transmittance_floor stops compositing once a pixel
    is effectively saturated; it is kept far below the 1e-5 oracle-agreement
    budget. tail_threshold bounds what a skipped splat could have contributed
    to any pixel outside its bounding radius.
    """

    alpha_clamp: float = 0.999
    transmittance_floor: float = 1e-8
    lowpass: float = 0.3  # px^2 added to the 2D covariance diagonal
    tile_size: int = 16
    tail_threshold: float = 1e-12
    count_alpha_threshold: float = 1.0 / 255.0


DEFAULT_CONFIG = RenderConfig()


@dataclass
class RenderOutput:
    rgb: ImageBuffer
    alpha: ImageBuffer
    contributing_count: np.ndarray  # (H, W) int

    def __post_init__(self):
        if self.rgb.data.shape[:2] != self.alpha.data.shape[:2]:
            raise ValueError("rgb and alpha dimensions must match")


@dataclass
class SceneGradients:
    """Per-Gaussian loss partials, ordered like the packed scene."""

    d_position: np.ndarray  # (N, 3)
    d_log_scale: np.ndarray  # (N, 3)
    d_rotation: np.ndarray  # (N, 4), tangent: orthogonal to the unit quaternion
    d_opacity_logit: np.ndarray  # (N,)
    d_color: np.ndarray  # (N, 3)
    person_slices: list

    def all_finite(self) -> bool:
        return all(
            np.all(np.isfinite(a))
            for a in (self.d_position, self.d_log_scale, self.d_rotation, self.d_opacity_logit, self.d_color)
        )


def quat_to_rotmat(quats: np.ndarray) -> np.ndarray:
    """Unit quaternions (N, 4) wxyz to rotation matrices (N, 3, 3)."""
    w, x, y, z = quats[:, 0], quats[:, 1], quats[:, 2], quats[:, 3]
    return np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    ).reshape(-1, 3, 3)


def _quat_rotmat_jacobian(quats: np.ndarray) -> np.ndarray:
    """d(rotation matrix)/d(quaternion component): (N, 4, 3, 3)."""
    w, x, y, z = quats[:, 0], quats[:, 1], quats[:, 2], quats[:, 3]
    o = np.zeros_like(w)
    d_w = np.stack([o, -z, y, z, o, -x, -y, x, o], axis=-1)
    d_x = np.stack([o, y, z, y, -2 * x, -w, z, w, -2 * x], axis=-1)
    d_y = np.stack([-2 * y, x, w, x, o, z, -w, z, -2 * y], axis=-1)
    d_z = np.stack([-2 * z, -w, x, w, -2 * z, y, x, y, o], axis=-1)
    return 2.0 * np.stack([d_w, d_x, d_y, d_z], axis=1).reshape(-1, 4, 3, 3)


def _validate_packed(packed: PackedGaussians) -> None:
    arrays = {
        "position": packed.positions,
        "log_scale": packed.log_scales,
        "rotation": packed.rotations,
        "opacity_logit": packed.opacity_logits,
        "color": packed.colors,
    }
    for name, arr in arrays.items():
        bad = ~np.isfinite(arr)
        if bad.any():
            index = int(np.flatnonzero(bad.reshape(len(arr), -1).any(axis=1))[0])
            for person_id, sl in packed.person_slices:
                if sl.start <= index < sl.stop:
                    raise ValueError(
                        f"non-finite {name} on gaussian {index - sl.start} of person {person_id!r}"
                    )
            raise ValueError(f"non-finite {name} on gaussian {index}")


class _Projection:
    """Per-Gaussian screen-space quantities shared by forward and backward."""

    __slots__ = (
        "valid", "order", "t_cam", "mean2d", "cov2d", "inv_cov", "radius",
        "rotmats", "scales_sq", "sigma_world",
    )


def _project(packed: PackedGaussians, camera: Camera, cfg: RenderConfig) -> _Projection:
    world = packed.world_positions()
    t_cam = world @ camera.rotation.T + camera.translation
    valid = t_cam[:, 2] > camera.near

    n = packed.count
    proj = _Projection()
    proj.t_cam = t_cam
    proj.valid = valid
    proj.mean2d = np.zeros((n, 2))
    proj.cov2d = np.zeros((n, 2, 2))
    proj.inv_cov = np.zeros((n, 2, 2))
    proj.radius = np.zeros(n)
    proj.rotmats = quat_to_rotmat(packed.rotations)
    proj.scales_sq = np.exp(2.0 * packed.log_scales)
    # world covariance R S^2 R^T
    proj.sigma_world = np.einsum(
        "nab,nb,ncb->nac", proj.rotmats, proj.scales_sq, proj.rotmats
    )

    if not valid.any():
        proj.order = np.zeros(0, dtype=np.int64)
        return proj

    idx = np.flatnonzero(valid)
    tx, ty, tz = t_cam[idx, 0], t_cam[idx, 1], t_cam[idx, 2]
    proj.mean2d[idx, 0] = camera.fx * tx / tz + camera.cx
    proj.mean2d[idx, 1] = camera.fy * ty / tz + camera.cy

    jac = np.zeros((len(idx), 2, 3))
    jac[:, 0, 0] = camera.fx / tz
    jac[:, 0, 2] = -camera.fx * tx / tz**2
    jac[:, 1, 1] = camera.fy / tz
    jac[:, 1, 2] = -camera.fy * ty / tz**2

    sigma_cam = np.einsum("ab,nbc,dc->nad", camera.rotation, proj.sigma_world[idx], camera.rotation)
    cov2d = np.einsum("nab,nbc,ndc->nad", jac, sigma_cam, jac)
    cov2d[:, 0, 0] += cfg.lowpass
    cov2d[:, 1, 1] += cfg.lowpass
    proj.cov2d[idx] = cov2d

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    inv = np.empty_like(cov2d)
    inv[:, 0, 0] = cov2d[:, 1, 1] / det
    inv[:, 1, 1] = cov2d[:, 0, 0] / det
    inv[:, 0, 1] = -cov2d[:, 0, 1] / det
    inv[:, 1, 0] = -cov2d[:, 1, 0] / det
    proj.inv_cov[idx] = inv

    # Conservative per-splat bounding radius: outside it the contribution to
    # any pixel is below tail_threshold.
    alpha = expit(packed.opacity_logits[idx])
    lam_max = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1]) + np.sqrt(
        0.25 * (cov2d[:, 0, 0] - cov2d[:, 1, 1]) ** 2 + cov2d[:, 0, 1] ** 2
    )
    margin = np.log(np.maximum(alpha, cfg.tail_threshold)) - np.log(cfg.tail_threshold)
    proj.radius[idx] = np.sqrt(2.0 * np.maximum(margin, 0.0) * lam_max)

    # Front-to-back depth order; stable sort breaks depth ties by index.
    depth = np.where(valid, t_cam[:, 2], np.inf)
    order = np.argsort(depth, kind="stable")
    reachable = valid[order] & (expit(packed.opacity_logits[order]) > cfg.tail_threshold)
    proj.order = order[reachable]
    return proj


def _tile_candidates(proj: _Projection, camera: Camera, cfg: RenderConfig):
    """Map each tile to the depth-sorted splats whose bounds touch it."""
    ts = cfg.tile_size
    tiles_x = (camera.width + ts - 1) // ts
    tiles_y = (camera.height + ts - 1) // ts
    buckets: dict[int, list[int]] = {}
    for g in proj.order:
        cx_, cy_ = proj.mean2d[g]
        r = proj.radius[g]
        x0 = int(np.floor(cx_ - r))
        x1 = int(np.ceil(cx_ + r))
        y0 = int(np.floor(cy_ - r))
        y1 = int(np.ceil(cy_ + r))
        if x1 < 0 or y1 < 0 or x0 >= camera.width or y0 >= camera.height:
            continue
        tx0, tx1 = max(x0 // ts, 0), min(x1 // ts, tiles_x - 1)
        ty0, ty1 = max(y0 // ts, 0), min(y1 // ts, tiles_y - 1)
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                buckets.setdefault(ty * tiles_x + tx, []).append(int(g))
    return buckets, tiles_x, tiles_y


def _tile_pixels(tile_index: int, tiles_x: int, camera: Camera, cfg: RenderConfig):
    ts = cfg.tile_size
    ty, tx = divmod(tile_index, tiles_x)
    x0, y0 = tx * ts, ty * ts
    x1, y1 = min(x0 + ts, camera.width), min(y0 + ts, camera.height)
    xs = np.arange(x0, x1, dtype=np.float64)
    ys = np.arange(y0, y1, dtype=np.float64)
    # row-major pixel order: u varies fastest
    return (x0, x1, y0, y1), np.tile(xs, y1 - y0), np.repeat(ys, x1 - x0)


def _composite_terms(packed, proj, cand, px_u, px_v, cfg):
    """Shared forward quantities for one tile's candidate list."""
    mu = proj.mean2d[cand]
    inv = proj.inv_cov[cand]
    dx = px_u[None, :] - mu[:, 0, None]  # (M, P)
    dy = px_v[None, :] - mu[:, 1, None]
    qform = (
        inv[:, 0, 0, None] * dx * dx
        + 2.0 * inv[:, 0, 1, None] * dx * dy
        + inv[:, 1, 1, None] * dy * dy
    )
    weight = np.exp(-0.5 * qform)
    sig = expit(packed.opacity_logits[cand])[:, None]
    a_raw = sig * weight
    a = np.minimum(a_raw, cfg.alpha_clamp)
    trans = np.empty_like(a)
    trans[0] = 1.0
    if len(cand) > 1:
        np.cumprod(1.0 - a[:-1], axis=0, out=trans[1:])  # exclusive product
    active = trans >= cfg.transmittance_floor
    a_eff = np.where(active, a, 0.0)
    contrib = a_eff * trans
    bg_trans = np.prod(1.0 - a_eff, axis=0)
    return dx, dy, weight, sig, a_raw, a, trans, active, a_eff, contrib, bg_trans


def render_packed(
    packed: PackedGaussians, camera: Camera, cfg: RenderConfig = DEFAULT_CONFIG
) -> RenderOutput:
    _validate_packed(packed)
    h, w = camera.height, camera.width
    bg = packed.background_color
    rgb = np.empty((h, w, 3))
    rgb[:] = bg
    alpha = np.zeros((h, w))
    count = np.zeros((h, w), dtype=np.int64)

    if packed.count:
        proj = _project(packed, camera, cfg)
        buckets, tiles_x, _ = _tile_candidates(proj, camera, cfg)
        for tile_index in sorted(buckets):
            cand = np.asarray(buckets[tile_index], dtype=np.int64)
            (x0, x1, y0, y1), px_u, px_v = _tile_pixels(tile_index, tiles_x, camera, cfg)
            _, _, _, _, a_raw, _, _, active, _, contrib, bg_trans = _composite_terms(
                packed, proj, cand, px_u, px_v, cfg
            )
            tile_rgb = contrib.T @ packed.colors[cand] + bg[None, :] * bg_trans[:, None]
            tile_shape = (y1 - y0, x1 - x0)
            rgb[y0:y1, x0:x1] = tile_rgb.reshape(*tile_shape, 3)
            alpha[y0:y1, x0:x1] = (1.0 - bg_trans).reshape(tile_shape)
            count[y0:y1, x0:x1] = (
                (active & (a_raw > cfg.count_alpha_threshold)).sum(axis=0).reshape(tile_shape)
            )

    return RenderOutput(
        rgb=ImageBuffer(np.clip(rgb, 0.0, 1.0), "rgb"),
        alpha=ImageBuffer(np.clip(alpha, 0.0, 1.0)[:, :, None], "alpha"),
        contributing_count=count,
    )


def render(
    scene: CrowdScene,
    camera: Camera,
    cfg: RenderConfig = DEFAULT_CONFIG,
    person_ids=None,
) -> RenderOutput:
    """Render the scene (or the subset ``person_ids``) from ``camera``."""
    return render_packed(pack_scene(scene, person_ids), camera, cfg)


def render_backward_packed(
    packed: PackedGaussians,
    camera: Camera,
    loss_grad: np.ndarray,
    cfg: RenderConfig = DEFAULT_CONFIG,
) -> SceneGradients:
    _validate_packed(packed)
    loss_grad = np.asarray(loss_grad, dtype=np.float64)
    if loss_grad.shape != (camera.height, camera.width, 3):
        raise ValueError(
            f"loss_grad must be ({camera.height}, {camera.width}, 3), got {loss_grad.shape}"
        )

    n = packed.count
    d_mu = np.zeros((n, 2))
    d_inv_cov = np.zeros((n, 2, 2))
    d_logit = np.zeros(n)
    d_color = np.zeros((n, 3))

    proj = _project(packed, camera, cfg) if n else None
    if n:
        bg = packed.background_color
        buckets, tiles_x, _ = _tile_candidates(proj, camera, cfg)
        # Tiles are processed in index order so gradient accumulation is a
        # deterministic reduction.
        for tile_index in sorted(buckets):
            cand = np.asarray(buckets[tile_index], dtype=np.int64)
            (x0, x1, y0, y1), px_u, px_v = _tile_pixels(tile_index, tiles_x, camera, cfg)
            g_pix = loss_grad[y0:y1, x0:x1].reshape(-1, 3)  # (P, 3)
            (dx, dy, weight, sig, a_raw, a, trans, active, a_eff, contrib, bg_trans) = (
                _composite_terms(packed, proj, cand, px_u, px_v, cfg)
            )
            colors = packed.colors[cand]

            d_color_tile = contrib @ g_pix  # (M, 3)

            # Project everything onto the loss gradient first; the suffix
            # color each splat's transmittance scales then stays (M, P).
            g_dot_c = colors @ g_pix.T  # (M, P)
            cum_g = np.cumsum(contrib * g_dot_c, axis=0)
            total_g = cum_g[-1] + (g_pix @ bg) * bg_trans  # (P,)
            g_dot_suffix = total_g[None, :] - cum_g

            d_a = g_dot_c * trans - g_dot_suffix / (1.0 - a)
            d_a_raw = np.where(active & (a_raw <= cfg.alpha_clamp), d_a, 0.0)

            d_logit_tile = (d_a_raw * a_raw * (1.0 - sig)).sum(axis=1)
            dw = d_a_raw * sig * weight  # d loss / d exponent-weight, scaled

            inv = proj.inv_cov[cand]
            adx = inv[:, 0, 0, None] * dx + inv[:, 0, 1, None] * dy
            ady = inv[:, 1, 0, None] * dx + inv[:, 1, 1, None] * dy
            d_mu_tile = np.stack([(dw * adx).sum(axis=1), (dw * ady).sum(axis=1)], axis=1)
            s_xx = -0.5 * (dw * dx * dx).sum(axis=1)
            s_xy = -0.5 * (dw * dx * dy).sum(axis=1)
            s_yy = -0.5 * (dw * dy * dy).sum(axis=1)

            d_color[cand] += d_color_tile
            d_logit[cand] += d_logit_tile
            d_mu[cand] += d_mu_tile
            d_inv_cov[cand, 0, 0] += s_xx
            d_inv_cov[cand, 0, 1] += s_xy
            d_inv_cov[cand, 1, 0] += s_xy
            d_inv_cov[cand, 1, 1] += s_yy

    return _chain_to_parameters(packed, camera, proj, d_mu, d_inv_cov, d_logit, d_color)


def _chain_to_parameters(packed, camera, proj, d_mu, d_inv_cov, d_logit, d_color) -> SceneGradients:
    n = packed.count
    grads = SceneGradients(
        d_position=np.zeros((n, 3)),
        d_log_scale=np.zeros((n, 3)),
        d_rotation=np.zeros((n, 4)),
        d_opacity_logit=d_logit,
        d_color=d_color,
        person_slices=list(packed.person_slices),
    )
    if n == 0 or proj is None or not proj.valid.any():
        return grads

    idx = np.flatnonzero(proj.valid)
    tx, ty, tz = proj.t_cam[idx, 0], proj.t_cam[idx, 1], proj.t_cam[idx, 2]
    fx, fy = camera.fx, camera.fy

    inv = proj.inv_cov[idx]
    # d/d(cov2d) from d/d(inv_cov):  dL/dC = -C^-1 G C^-1 for symmetric C
    d_cov = -np.einsum("nab,nbc,ncd->nad", inv, d_inv_cov[idx], inv)

    jac = np.zeros((len(idx), 2, 3))
    jac[:, 0, 0] = fx / tz
    jac[:, 0, 2] = -fx * tx / tz**2
    jac[:, 1, 1] = fy / tz
    jac[:, 1, 2] = -fy * ty / tz**2

    sigma_cam = np.einsum(
        "ab,nbc,dc->nad", camera.rotation, proj.sigma_world[idx], camera.rotation
    )

    # cov2d = J M J^T: gradients to M and (through J) to camera-space position
    d_m = np.einsum("nab,nac,nbd->ncd", d_cov, jac, jac)
    d_jac = np.einsum("nab,nbc->nac", d_cov, np.einsum("nab,ncb->nac", jac, sigma_cam)) + np.einsum(
        "nba,nbc->nac", d_cov, np.einsum("nab,nbc->nac", jac, sigma_cam)
    )

    d_t = np.einsum("nab,na->nb", jac, d_mu[idx])  # projection mean term
    d_t[:, 0] += d_jac[:, 0, 2] * (-fx / tz**2)
    d_t[:, 1] += d_jac[:, 1, 2] * (-fy / tz**2)
    d_t[:, 2] += (
        d_jac[:, 0, 0] * (-fx / tz**2)
        + d_jac[:, 1, 1] * (-fy / tz**2)
        + d_jac[:, 0, 2] * (2.0 * fx * tx / tz**3)
        + d_jac[:, 1, 2] * (2.0 * fy * ty / tz**3)
    )
    grads.d_position[idx] = d_t @ camera.rotation

    # world covariance chain: M = W Sigma W^T, Sigma = R S^2 R^T
    d_sigma = np.einsum("ba,nbc,cd->nad", camera.rotation, d_m, camera.rotation)
    rot = proj.rotmats[idx]
    s_sq = proj.scales_sq[idx]
    sym = d_sigma + np.swapaxes(d_sigma, 1, 2)
    d_rot = np.einsum("nab,nbc,nc->nac", sym, rot, s_sq)
    d_s_sq = np.einsum("nba,nbc,nca->na", rot, d_sigma, rot)
    grads.d_log_scale[idx] = 2.0 * s_sq * d_s_sq

    quat_jac = _quat_rotmat_jacobian(packed.rotations[idx])  # (n, 4, 3, 3)
    d_quat = np.einsum("nab,nqab->nq", d_rot, quat_jac)
    quats = packed.rotations[idx]
    radial = np.einsum("nq,nq->n", d_quat, quats)
    grads.d_rotation[idx] = d_quat - radial[:, None] * quats

    return grads


def render_backward(
    scene: CrowdScene,
    camera: Camera,
    loss_grad,
    cfg: RenderConfig = DEFAULT_CONFIG,
    person_ids=None,
) -> SceneGradients:
    """Gradients of sum(loss_grad * rgb) with respect to all Gaussian
    parameters, matching the forward pass's culling and termination."""
    if isinstance(loss_grad, ImageBuffer):
        loss_grad = loss_grad.data
    packed = pack_scene(scene, person_ids)
    return render_backward_packed(packed, camera, np.asarray(loss_grad), cfg)


def render_normal_map(mesh, camera: Camera) -> ImageBuffer:
    """Z-buffered rasterization of per-pixel view-space normals.

    Normals are interpolated with perspective correction, renormalized, and
    encoded as (n + 1) / 2 in a frame with x right, y up, z toward the viewer;
    uncovered pixels are 0.5 gray. Triangles with any vertex behind the near
    plane are culled; zero-area triangles are skipped.
    """
    h, w = camera.height, camera.width
    out = np.full((h, w, 3), 0.5)
    zbuf = np.full((h, w), np.inf)
    if len(mesh.vertices) == 0 or len(mesh.faces) == 0:
        return ImageBuffer(out, "normal")

    cam_pts = mesh.vertices @ camera.rotation.T + camera.translation
    # view-space normal frame: x right, y up, z toward the viewer
    cam_normals = mesh.vertex_normals @ camera.rotation.T
    cam_normals = cam_normals * np.array([1.0, -1.0, -1.0])

    z = cam_pts[:, 2]
    uv = np.zeros((len(cam_pts), 2))
    front = z > camera.near
    uv[front, 0] = camera.fx * cam_pts[front, 0] / z[front] + camera.cx
    uv[front, 1] = camera.fy * cam_pts[front, 1] / z[front] + camera.cy

    for tri in mesh.faces:
        i0, i1, i2 = (int(v) for v in tri)
        if not (front[i0] and front[i1] and front[i2]):
            continue
        p0, p1, p2 = uv[i0], uv[i1], uv[i2]
        area = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p1[1] - p0[1]) * (p2[0] - p0[0])
        if abs(area) < 1e-12:
            continue
        x0 = max(int(np.floor(min(p0[0], p1[0], p2[0]))), 0)
        x1 = min(int(np.ceil(max(p0[0], p1[0], p2[0]))), w - 1)
        y0 = max(int(np.floor(min(p0[1], p1[1], p2[1]))), 0)
        y1 = min(int(np.ceil(max(p0[1], p1[1], p2[1]))), h - 1)
        if x1 < x0 or y1 < y0:
            continue
        xs, ys = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
        # barycentric coordinates via signed sub-areas
        l0 = ((p1[0] - xs) * (p2[1] - ys) - (p1[1] - ys) * (p2[0] - xs)) / area
        l1 = ((p2[0] - xs) * (p0[1] - ys) - (p2[1] - ys) * (p0[0] - xs)) / area
        l2 = 1.0 - l0 - l1
        inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        if not inside.any():
            continue
        inv_z = l0 / z[i0] + l1 / z[i1] + l2 / z[i2]
        depth = np.where(inside, 1.0 / np.where(inv_z > 0, inv_z, 1.0), np.inf)
        rows, cols = ys[inside], xs[inside]
        closer = depth[inside] < zbuf[rows, cols]
        if not closer.any():
            continue
        rows, cols = rows[closer], cols[closer]
        li = np.stack([l0[inside][closer], l1[inside][closer], l2[inside][closer]], axis=1)
        zi = np.array([z[i0], z[i1], z[i2]])
        persp = (li / zi[None, :]) / inv_z[inside][closer][:, None]
        normal = persp @ np.stack([cam_normals[i0], cam_normals[i1], cam_normals[i2]])
        lengths = np.linalg.norm(normal, axis=1)
        lengths = np.where(lengths < 1e-12, 1.0, lengths)
        normal = normal / lengths[:, None]
        zbuf[rows, cols] = depth[inside][closer]
        out[rows, cols] = (normal + 1.0) / 2.0

    return ImageBuffer(np.clip(out, 0.0, 1.0), "normal")
