"""Dataset factories and end-to-end commands: synthetic crowd construction,
occlusion training pairs, refiner training pairs with SCL-mixed manifests,
cluster-wise refinement, and metric evaluation reports.

Every command is deterministic given its seed, and every output directory
carries a manifest echoing the full effective configuration.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .body_model import BodyModelData, BodyParams, Mesh, load_body_model, projected_keypoints, skin
from .cameras import Camera, CameraRig, hemisphere_rig, orbit_rig
from .distill import (
    OptimConfig,
    SclConfig,
    distill,
    generate_pseudo_gt,
    make_refiner,
    merge_meshes,
    scl_kind,
)
from .fileio import atomic_write_json, derive_seed, json_safe
from .image import ImageBuffer, load_png, save_png
from .metrics import ConvFeatureExtractor, feature_distance, psnr, ssim
from .occlusion import OcclusionConfig, apply_mask, synthesize_mask
from .renderer import render, render_normal_map
from .scene import (
    ClusterConfig,
    CrowdScene,
    PersonGaussians,
    assemble_scene,
    cluster_persons,
    init_gaussians_from_mesh,
    pack_scene,
)
from .scene_io import load_scene, save_scene
from .toy_body import toy_body_model

MANIFEST_VERSION = 1


class ConfigError(ValueError):
    """Raised with every validation problem listed at once."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"- {p}" for p in problems))


def _load_body(path_or_tag: str, base: Path | None = None) -> BodyModelData:
    if path_or_tag == "toy":
        return toy_body_model()
    path = Path(path_or_tag)
    if base is not None and not path.is_absolute():
        path = base / path
    return load_body_model(path)


def _vertex_colors(spec: dict, mesh: Mesh, problems: list[str], who: str) -> np.ndarray:
    kind = spec.get("kind", "flat")
    n = len(mesh.vertices)
    if kind == "flat":
        rgb = np.asarray(spec.get("rgb", (0.5, 0.5, 0.5)), dtype=np.float64)
        return np.tile(rgb, (n, 1))
    if kind == "checker":
        rgb_a = np.asarray(spec.get("rgb_a", (0.85, 0.85, 0.85)), dtype=np.float64)
        rgb_b = np.asarray(spec.get("rgb_b", (0.15, 0.15, 0.15)), dtype=np.float64)
        period = float(spec.get("period", 0.08))
        cells = np.floor(mesh.vertices / period).astype(np.int64)
        parity = cells.sum(axis=1) % 2
        return np.where(parity[:, None] == 0, rgb_a, rgb_b)
    if kind == "image":
        try:
            image = load_png(spec["path"], "rgb")
            camera = Camera.from_dict(spec["camera"])
        except Exception as exc:  # reported with the rest of the validation
            problems.append(f"{who}: cannot set up image-projected colors: {exc}")
            return np.full((n, 3), 0.5)
        cam_pts = mesh.vertices @ camera.rotation.T + camera.translation
        colors = np.full((n, 3), 0.5)
        in_front = cam_pts[:, 2] > camera.near
        uv = np.zeros((n, 2))
        uv[in_front] = camera.project(cam_pts[in_front])
        cols = np.round(uv[:, 0]).astype(np.int64)
        rows = np.round(uv[:, 1]).astype(np.int64)
        ok = in_front & (cols >= 0) & (cols < image.width) & (rows >= 0) & (rows < image.height)
        colors[ok] = image.data[rows[ok], cols[ok], :3]
        return colors
    problems.append(f"{who}: unknown color kind {kind!r}")
    return np.full((n, 3), 0.5)


def build_scene_from_config(
    config: dict, base: Path | None = None
) -> tuple[CrowdScene, dict[str, Mesh], dict[str, BodyParams], BodyModelData]:
    """Skin every configured person and anchor one Gaussian per vertex.

    Returns the scene (local-frame Gaussians plus root translations), the
    world-space meshes, the body parameters, and the body model.
    """
    problems: list[str] = []
    persons_cfg = config.get("persons", [])
    if not persons_cfg:
        problems.append("config lists no persons")
    ids = [p.get("person_id") for p in persons_cfg]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        problems.append(f"duplicate person ids: {dupes}")

    try:
        model = _load_body(config.get("body_model", "toy"), base)
    except Exception as exc:
        problems.append(f"body model: {exc}")
        raise ConfigError(problems)

    scale = float(config.get("gaussian_scale", 0.5))
    background = np.asarray(config.get("background", (1.0, 1.0, 1.0)), dtype=np.float64)

    persons: list[PersonGaussians] = []
    meshes: dict[str, Mesh] = {}
    params_by_id: dict[str, BodyParams] = {}
    for entry in persons_cfg:
        pid = entry.get("person_id")
        who = f"person {pid!r}"
        if not pid:
            problems.append("person entry missing person_id")
            continue
        try:
            params = BodyParams(
                shape=np.asarray(entry.get("shape", np.zeros(model.num_shape_coeffs)), dtype=np.float64),
                pose=np.asarray(
                    entry.get("pose", np.zeros((model.num_joints, 3))), dtype=np.float64
                ),
                root_translation=np.asarray(
                    entry.get("root_translation", (0.0, 0.0, 0.0)), dtype=np.float64
                ),
            )
            local_mesh = skin(
                model, BodyParams(params.shape, params.pose, np.zeros(3))
            )
            colors = _vertex_colors(entry.get("color", {}), local_mesh, problems, who)
            gaussians = init_gaussians_from_mesh(local_mesh, scale, colors)
            persons.append(PersonGaussians(pid, tuple(gaussians), params.root_translation))
            meshes[pid] = local_mesh.translated(params.root_translation)
            params_by_id[pid] = params
        except Exception as exc:
            problems.append(f"{who}: {exc}")

    if problems:
        raise ConfigError(problems)
    return assemble_scene(persons, background), meshes, params_by_id, model


def build_scene(config: dict, out_dir: str | Path, base: Path | None = None):
    """Build the scene and persist PLYs, meshes, and the scene manifest."""
    scene, meshes, _, _ = build_scene_from_config(config, base)
    effective = dict(config)
    effective.setdefault("body_model", "toy")
    effective.setdefault("background", [1.0, 1.0, 1.0])
    effective.setdefault("gaussian_scale", 0.5)
    effective.setdefault("seed", 0)
    # absent per-person shape/pose default to zeros
    manifest_path = save_scene(
        scene,
        out_dir,
        meshes=meshes,
        extra={"config": json_safe(effective), "seed": effective["seed"]},
    )
    return scene, meshes, manifest_path


def degrade_scene(
    scene: CrowdScene,
    seed: int,
    color_sigma: float = 0.2,
    opacity_jitter: float = 1.0,
    position_sigma: float = 0.002,
) -> CrowdScene:
    """Coarse-scene surrogate: seeded color noise, uniform opacity-logit
    jitter, and small positional jitter applied to a copy of the scene."""
    rng = np.random.Generator(np.random.Philox(seed))
    packed = pack_scene(scene)
    n = packed.count
    packed.colors = np.clip(packed.colors + rng.normal(0.0, color_sigma, (n, 3)), 0.0, 1.0)
    packed.opacity_logits = packed.opacity_logits + rng.uniform(-opacity_jitter, opacity_jitter, n)
    packed.positions = packed.positions + rng.normal(0.0, position_sigma, (n, 3))
    from .scene import unpack_into_scene

    return unpack_into_scene(packed, scene)


def assign_split(ids: list, fraction: float, seed: int) -> dict:
    """Deterministic train/test split with exact counts.

    round(fraction * len(ids)) entries become "train", chosen by a seeded
    permutation, so 114 ids at 0.8 always yield 91 train / 23 test.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("split fraction must be in [0, 1]")
    n = len(ids)
    n_train = int(round(fraction * n))
    rng = np.random.Generator(np.random.Philox(derive_seed(seed, "split")))
    order = rng.permutation(n)
    split = {}
    for rank, idx in enumerate(order):
        split[ids[int(idx)]] = "train" if rank < n_train else "test"
    return split


def _scene_center(scene: CrowdScene, person_ids=None) -> np.ndarray:
    packed = pack_scene(scene, person_ids)
    return packed.world_positions().mean(axis=0)


def _rig_from_spec(spec: dict, look_at, size, focal) -> CameraRig:
    kind = spec.get("kind", "orbit")
    n = int(spec.get("views", 24))
    radius = float(spec.get("radius", 3.0))
    if kind == "orbit":
        return orbit_rig(
            n, radius, elevation=float(spec.get("elevation", 0.0)), look_at=look_at,
            fx=focal, size=size,
        )
    if kind == "hemisphere":
        return hemisphere_rig(n, radius, look_at=look_at, fx=focal, size=size)
    raise ConfigError([f"unknown rig kind {kind!r}"])


def make_occlusion_pairs(config: dict, out_dir: str | Path, threads: int = 1) -> dict:
    """Per person and frontal view: a clean render, a keypoint-driven
    occlusion mask with its replayable spec, the occluded image, and a
    multi-view orbit of clean target renders."""
    out_dir = Path(out_dir)
    seed = int(config.get("seed", 0))
    width, height = (int(v) for v in config.get("image_size", (512, 512)))
    focal = float(config.get("focal", max(width, height)))
    occ_cfg = occlusion_config_from_dict(config.get("occlusion", {}))
    frontal_views = int(config.get("frontal_views", 1))
    clean_views = int(config.get("clean_views", 24))
    radius = float(config.get("radius", 3.0))
    elevation = float(config.get("elevation", 0.0))
    effective = {
        "scene": config["scene"],
        "seed": seed,
        "image_size": [width, height],
        "focal": focal,
        "frontal_views": frontal_views,
        "clean_views": clean_views,
        "radius": radius,
        "elevation": elevation,
        "occlusion": asdict(occ_cfg),
    }

    scene, meshes, params_by_id, model = build_scene_from_config(config["scene"])

    jobs = []
    for person in scene.persons:
        pid = person.person_id
        center = meshes[pid].vertices.mean(axis=0)
        frontal = orbit_rig(
            frontal_views, radius, elevation=elevation, look_at=center,
            fx=focal, size=(width, height),
        )
        clean_rig = orbit_rig(
            clean_views, radius, elevation=elevation, look_at=center,
            fx=focal, size=(width, height),
        )
        for view_index, camera in enumerate(frontal):
            jobs.append((pid, view_index, camera, clean_rig))

    def run_job(job):
        pid, view_index, camera, clean_rig = job
        sample_id = f"{pid}_v{view_index:02d}"
        full = render(scene, camera, person_ids=[pid]).rgb
        keypoints = projected_keypoints(model, params_by_id[pid], camera).points
        mask_seed = derive_seed(seed, pid, view_index)
        spec, mask = synthesize_mask(keypoints, width, height, occ_cfg, mask_seed)
        occluded = apply_mask(full, mask, occ_cfg.fill_color)
        save_png(full, out_dir / f"{sample_id}_full.png")
        save_png(occluded, out_dir / f"{sample_id}_occ.png")
        save_png(mask, out_dir / f"{sample_id}_mask.png")
        atomic_write_json(out_dir / f"{sample_id}_spec.json", spec.to_dict())
        clean_paths = []
        for clean_index, clean_cam in enumerate(clean_rig):
            path = f"{sample_id}_clean/view_{clean_index:02d}.png"
            save_png(render(scene, clean_cam, person_ids=[pid]).rgb, out_dir / path)
            clean_paths.append(path)
        return {
            "sample_id": sample_id,
            "person_id": pid,
            "view": view_index,
            "full": f"{sample_id}_full.png",
            "occluded": f"{sample_id}_occ.png",
            "mask": f"{sample_id}_mask.png",
            "spec": f"{sample_id}_spec.json",
            "mask_seed": mask_seed,
            "clean_views": clean_paths,
        }

    entries = _run_jobs(jobs, run_job, threads)
    manifest = {
        "version": MANIFEST_VERSION,
        "kind": "occlusion-pairs",
        "seed": seed,
        "config": json_safe(effective),
        "entries": entries,
    }
    atomic_write_json(out_dir / "manifest.json", manifest)
    return manifest


def _run_jobs(jobs, fn, threads: int):
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, jobs))
    return [fn(job) for job in jobs]


def occlusion_config_from_dict(doc: dict) -> OcclusionConfig:
    kwargs = {}
    for key in (
        "k_max", "axis_range", "n_b_range", "thickness_range", "line_prob",
        "max_line_area", "morph_kernel", "morph_close_iters", "morph_dilate_iters",
        "fill_color",
    ):
        if key in doc:
            value = doc[key]
            kwargs[key] = tuple(value) if isinstance(value, list) else value
    return OcclusionConfig(**kwargs)


def make_refiner_pairs(config: dict, out_dir: str | Path, threads: int = 1) -> dict:
    """For every scene: a degraded coarse twin, hemisphere renders of both,
    the merged-body normal map, an SCL-mixed pair kind per view, and an
    exact-count train/test split over scenes."""
    out_dir = Path(out_dir)
    seed = int(config.get("seed", 0))
    width, height = (int(v) for v in config.get("image_size", (256, 256)))
    focal = float(config.get("focal", max(width, height)))
    views = int(config.get("views", 126))
    radius = float(config.get("radius", 3.0))
    fraction = float(config.get("split_fraction", 0.8))
    rho = float(config.get("scl_rho", 0.2))
    degrade_cfg = {
        "color_sigma": float(config.get("degrade", {}).get("color_sigma", 0.2)),
        "opacity_jitter": float(config.get("degrade", {}).get("opacity_jitter", 1.0)),
        "position_sigma": float(config.get("degrade", {}).get("position_sigma", 0.002)),
    }
    scene_configs = config.get("scenes", [])
    if not scene_configs:
        raise ConfigError(["make-refiner-pairs needs at least one scene config"])
    effective = {
        "scenes": scene_configs,
        "seed": seed,
        "image_size": [width, height],
        "focal": focal,
        "views": views,
        "radius": radius,
        "split_fraction": fraction,
        "scl_rho": rho,
        "degrade": degrade_cfg,
    }

    scene_names = [f"scene_{i:03d}" for i in range(len(scene_configs))]
    split = assign_split(scene_names, fraction, seed)

    entries = []
    for index, scene_cfg in enumerate(scene_configs):
        name = scene_names[index]
        gt_scene, meshes, _, _ = build_scene_from_config(scene_cfg)
        coarse_scene = degrade_scene(
            gt_scene,
            derive_seed(seed, "degrade", index),
            color_sigma=degrade_cfg["color_sigma"],
            opacity_jitter=degrade_cfg["opacity_jitter"],
            position_sigma=degrade_cfg["position_sigma"],
        )
        center = _scene_center(gt_scene)
        rig = hemisphere_rig(views, radius, look_at=center, fx=focal, size=(width, height))
        merged = merge_meshes([meshes[p] for p in gt_scene.person_ids()])

        # SCL draws happen sequentially up front so threading cannot reorder
        # the random stream.
        scl_rng = np.random.Generator(np.random.Philox(derive_seed(seed, "scl", index)))
        scl_cfg = SclConfig(rho)
        kinds = [scl_kind(scl_cfg, scl_rng) for _ in range(views)]

        def run_view(job):
            view_index, camera = job
            gt_path = f"{name}/view_{view_index:03d}_gt.png"
            coarse_path = f"{name}/view_{view_index:03d}_coarse.png"
            normal_path = f"{name}/view_{view_index:03d}_normal.png"
            save_png(render(gt_scene, camera).rgb, out_dir / gt_path)
            save_png(render(coarse_scene, camera).rgb, out_dir / coarse_path)
            save_png(render_normal_map(merged, camera), out_dir / normal_path)
            kind = kinds[view_index]
            return {
                "scene": name,
                "view": view_index,
                "r_gt": gt_path,
                "r_coarse": coarse_path,
                "normal": normal_path,
                "kind": kind,
                "input": gt_path if kind == "identity" else coarse_path,
                "target": gt_path,
                "split": split[name],
            }

        entries.extend(_run_jobs(list(enumerate(rig)), run_view, threads))

    manifest = {
        "version": MANIFEST_VERSION,
        "kind": "refiner-pairs",
        "seed": seed,
        "config": json_safe(effective),
        "split_counts": {
            "train": sum(1 for v in split.values() if v == "train"),
            "test": sum(1 for v in split.values() if v == "test"),
        },
        "split": split,
        "entries": entries,
    }
    atomic_write_json(out_dir / "manifest.json", manifest)
    return manifest


def refine_command(
    scene_manifest: str | Path,
    out_dir: str | Path,
    refiner_spec: dict | None = None,
    cluster_cfg: ClusterConfig = ClusterConfig(),
    optim_cfg: OptimConfig = OptimConfig(),
    rig_spec: dict | None = None,
    image_size=(256, 256),
    focal: float | None = None,
    refresh_every: int = 0,
) -> dict:
    """Cluster the scene, refine each cluster against refiner pseudo-ground
    truths, and write updated PLYs, per-view comparison strips, and a report.

    A failing cluster is recorded and skipped; the remaining clusters still
    run. refresh_every > 0 regenerates the pseudo-ground truths from the
    partially optimized scene every that many iterations.
    """
    out_dir = Path(out_dir)
    scene, meshes = load_scene(scene_manifest)
    refiner = make_refiner(refiner_spec or {"kind": "identity"})
    rig_spec = rig_spec or {}
    width, height = (int(v) for v in image_size)
    focal = float(focal if focal is not None else max(width, height))

    clusters, noise = cluster_persons(scene, cluster_cfg)
    report: dict = {
        "version": MANIFEST_VERSION,
        "kind": "refine-report",
        "refiner": refiner.name,
        "config": json_safe(
            {
                "refiner": refiner_spec or {"kind": "identity"},
                "cluster": {"eps": cluster_cfg.eps, "min_pts": cluster_cfg.min_pts},
                "optim": optim_cfg.to_dict(),
                "rig": {
                    "kind": rig_spec.get("kind", "orbit"),
                    "views": int(rig_spec.get("views", 24)),
                    "radius": float(rig_spec.get("radius", 3.0)),
                    "elevation": float(rig_spec.get("elevation", 0.0)),
                },
                "image_size": [width, height],
                "focal": focal,
                "refresh_every": refresh_every,
            }
        ),
        "clusters": [],
        "noise": noise,
        "errors": [],
    }

    current = scene
    for cluster_index, cluster in enumerate(clusters):
        try:
            look_at = _scene_center(current, cluster)
            rig = _rig_from_spec(rig_spec, look_at, (width, height), focal)
            current, cluster_report = _refine_cluster(
                current, cluster, rig, refiner, meshes, optim_cfg, refresh_every,
                out_dir / f"cluster_{cluster_index:02d}",
            )
            cluster_report["members"] = cluster
            report["clusters"].append(cluster_report)
        except Exception as exc:
            report["errors"].append(f"cluster {cluster_index} {cluster}: {exc}")

    save_scene(current, out_dir / "scene", meshes=meshes)
    atomic_write_json(out_dir / "report.json", json_safe(report))
    return report


def _refine_cluster(scene, cluster, rig, refiner, meshes, optim_cfg, refresh_every, cluster_dir):
    chunks = [optim_cfg.iterations]
    if refresh_every and refresh_every < optim_cfg.iterations:
        chunks = [refresh_every] * (optim_cfg.iterations // refresh_every)
        leftover = optim_cfg.iterations % refresh_every
        if leftover:
            chunks.append(leftover)

    before_views = None
    current = scene
    trace: list[float] = []
    last_report = None
    for chunk in chunks:
        targets = generate_pseudo_gt(
            current, cluster, rig, refiner, meshes, optim_cfg.render_config
        )
        if before_views is None:
            before_views = [
                render(current, cam, optim_cfg.render_config, person_ids=cluster).rgb
                for cam, _ in targets
            ]
        chunk_cfg = OptimConfig(
            iterations=chunk,
            step_sizes=optim_cfg.step_sizes,
            lambda_ssim=optim_cfg.lambda_ssim,
            beta1=optim_cfg.beta1,
            beta2=optim_cfg.beta2,
            eps=optim_cfg.eps,
            views_per_step=min(optim_cfg.views_per_step, len(targets)),
            seed=optim_cfg.seed,
            render_config=optim_cfg.render_config,
        )
        current, distill_report = distill(current, targets, chunk_cfg, person_ids=cluster)
        trace.extend(distill_report.loss_trace)
        last_report = distill_report

    for view_index, (camera, target) in enumerate(targets):
        after = render(current, camera, optim_cfg.render_config, person_ids=cluster).rgb
        strip = np.concatenate([before_views[view_index].data, after.data], axis=1)
        save_png(ImageBuffer(strip, "rgb"), cluster_dir / f"view_{view_index:03d}_compare.png")

    cluster_report = last_report.to_dict()
    cluster_report["loss_trace"] = trace
    return current, json_safe(cluster_report)


def eval_command(dir_a: str | Path, dir_b: str | Path, extractor_seed: int = 0) -> dict:
    """Compare identically named PNGs in two directories with PSNR, SSIM, and
    seeded feature distance; any name mismatch is reported exhaustively."""
    dir_a, dir_b = Path(dir_a), Path(dir_b)
    names_a = {p.name for p in dir_a.glob("*.png")}
    names_b = {p.name for p in dir_b.glob("*.png")}
    if names_a != names_b:
        missing_b = sorted(names_a - names_b)
        missing_a = sorted(names_b - names_a)
        raise ValueError(
            "image sets differ: "
            f"only in {dir_a}: {missing_b}; only in {dir_b}: {missing_a}"
        )
    if not names_a:
        raise ValueError(f"no PNG files found in {dir_a}")

    extractor = ConvFeatureExtractor(seed=extractor_seed)
    rows = []
    for name in sorted(names_a):
        a = load_png(dir_a / name, "rgb")
        b = load_png(dir_b / name, "rgb")
        rows.append(
            {
                "name": name,
                "psnr": psnr(a, b),
                "ssim": ssim(a, b),
                "feature_distance": feature_distance(a, b, extractor),
            }
        )
    finite_psnr = [r["psnr"] for r in rows if math.isfinite(r["psnr"])]
    mean_psnr = float(np.mean(finite_psnr)) if finite_psnr else math.inf
    summary = {
        "version": MANIFEST_VERSION,
        "kind": "eval-report",
        "extractor_seed": extractor_seed,
        "rows": rows,
        "mean": {
            "psnr": mean_psnr,
            "ssim": float(np.mean([r["ssim"] for r in rows])),
            "feature_distance": float(np.mean([r["feature_distance"] for r in rows])),
        },
    }
    return summary


def eval_report_text(summary: dict) -> str:
    """Aligned text table of the per-image metrics plus the mean row."""
    headers = ("image", "PSNR", "SSIM", "FeatDist")
    rows = [
        (
            r["name"],
            "inf" if not math.isfinite(r["psnr"]) else f"{r['psnr']:.3f}",
            f"{r['ssim']:.4f}",
            f"{r['feature_distance']:.6f}",
        )
        for r in summary["rows"]
    ]
    mean = summary["mean"]
    rows.append(
        (
            "mean",
            "inf" if not math.isfinite(mean["psnr"]) else f"{mean['psnr']:.3f}",
            f"{mean['ssim']:.4f}",
            f"{mean['feature_distance']:.6f}",
        )
    )
    widths = [max(len(headers[c]), max(len(r[c]) for r in rows)) for c in range(4)]
    lines = ["  ".join(headers[c].ljust(widths[c]) for c in range(4))]
    for r in rows:
        lines.append("  ".join(r[c].ljust(widths[c]) for c in range(4)))
    return "\n".join(lines) + "\n"
