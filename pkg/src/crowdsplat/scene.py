"""Per-person Gaussian clouds, crowd-scene assembly, and DBSCAN grouping.

Gaussian covariance is parameterized as R * diag(exp(log_scale))^2 * R^T with
R from a unit quaternion, so it is positive definite by construction. Colors
are view independent (degree 0); view-dependent appearance is a documented
extension point, not implemented.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .body_model import Mesh


def _vec(x, n, name) -> np.ndarray:
    arr = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    if arr.shape != (n,):
        raise ValueError(f"{name} must be a {n}-vector, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Gaussian:
    """One anisotropic 3D Gaussian: position, log scales, unit quaternion
    (w, x, y, z), opacity logit, and RGB color in [0, 1]."""

    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray  # quaternion, renormalized on construction
    opacity_logit: float
    color: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", _vec(self.position, 3, "position"))
        object.__setattr__(self, "log_scale", _vec(self.log_scale, 3, "log_scale"))
        object.__setattr__(self, "color", _vec(self.color, 3, "color"))
        object.__setattr__(self, "opacity_logit", float(self.opacity_logit))
        quat = np.asarray(self.rotation, dtype=np.float64)
        if quat.shape != (4,):
            raise ValueError("rotation must be a quaternion (w, x, y, z)")
        norm = np.linalg.norm(quat)
        if not np.isfinite(norm) or norm < 1e-12:
            raise ValueError("rotation quaternion has zero or non-finite norm")
        # Quaternions already within the documented unit tolerance pass
        # through untouched so reconstruction (for example from float32 PLY
        # records) stays bit-exact; anything further out is renormalized.
        quat = np.ascontiguousarray(quat if abs(norm - 1.0) < 1e-6 else quat / norm)
        quat.setflags(write=False)
        object.__setattr__(self, "rotation", quat)
        for name in ("position", "log_scale", "color"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"gaussian {name} contains non-finite values")
        if not np.isfinite(self.opacity_logit):
            raise ValueError("opacity_logit must be finite")


@dataclass(frozen=True)
class PersonGaussians:
    """A person's Gaussians in their local frame plus the root translation
    that places them in the scene."""

    person_id: str
    gaussians: tuple[Gaussian, ...]
    root_translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gaussians", tuple(self.gaussians))
        object.__setattr__(self, "root_translation", _vec(self.root_translation, 3, "root_translation"))
        if not self.gaussians:
            raise ValueError(f"person {self.person_id!r} has no gaussians")

    def __len__(self) -> int:
        return len(self.gaussians)


@dataclass(frozen=True)
class CrowdScene:
    persons: tuple[PersonGaussians, ...]
    background_color: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        object.__setattr__(self, "persons", tuple(self.persons))
        object.__setattr__(self, "background_color", _vec(self.background_color, 3, "background_color"))
        ids = [p.person_id for p in self.persons]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            raise ValueError(f"duplicate person ids: {dupes}")

    def person(self, person_id: str) -> PersonGaussians:
        for p in self.persons:
            if p.person_id == person_id:
                return p
        raise KeyError(person_id)

    def person_ids(self) -> list[str]:
        return [p.person_id for p in self.persons]


@dataclass(frozen=True)
class ClusterConfig:
    """DBSCAN settings over person root positions. min_pts counts the point
    itself; the default min_pts=1 keeps isolated persons as singleton clusters
    so everyone gets refined."""

    eps: float = 1.5
    min_pts: int = 1

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.min_pts < 1:
            raise ValueError("min_pts must be a positive integer")


def assemble_scene(persons, background=(1.0, 1.0, 1.0)) -> CrowdScene:
    """Build a crowd scene; world positions stay lazy (local + root at render)."""
    return CrowdScene(tuple(persons), np.asarray(background, dtype=np.float64))


def init_gaussians_from_mesh(mesh: Mesh, per_vertex_scale: float, colors: np.ndarray) -> list[Gaussian]:
    """One isotropic Gaussian per vertex, sized by the local mean edge length.

    log_scale = log(per_vertex_scale * mean incident edge length), identity
    rotation, opacity sigmoid^-1(0.95).
    """
    verts = mesh.vertices
    if len(verts) == 0:
        raise ValueError("cannot build gaussians from an empty mesh")
    colors = np.asarray(colors, dtype=np.float64)
    if colors.shape != (len(verts), 3):
        raise ValueError(f"need one color per vertex: {colors.shape} vs {len(verts)} vertices")

    edge_sum = np.zeros(len(verts))
    edge_count = np.zeros(len(verts), dtype=np.int64)
    edges = set()
    for tri in mesh.faces:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (min(int(a), int(b)), max(int(a), int(b)))
            if key in edges:
                continue
            edges.add(key)
            length = float(np.linalg.norm(verts[key[0]] - verts[key[1]]))
            for v in key:
                edge_sum[v] += length
                edge_count[v] += 1
    isolated = np.flatnonzero(edge_count == 0)
    if len(isolated):
        raise ValueError(f"vertex {int(isolated[0])} has no incident edges")

    mean_edge = edge_sum / edge_count
    opacity_logit = float(np.log(0.95 / 0.05))
    identity_quat = np.array([1.0, 0.0, 0.0, 0.0])
    return [
        Gaussian(
            position=verts[i],
            log_scale=np.full(3, np.log(per_vertex_scale * mean_edge[i])),
            rotation=identity_quat,
            opacity_logit=opacity_logit,
            color=colors[i],
        )
        for i in range(len(verts))
    ]


def cluster_persons(scene: CrowdScene, cfg: ClusterConfig) -> tuple[list[list[str]], list[str]]:
    """DBSCAN over root translations (3D Euclidean distance).

    Core points have >= min_pts neighbors within eps (inclusive, counting
    self). Iteration runs in sorted person-id order and each cluster is fully
    expanded before the next seed, so border points reachable from several
    clusters join the earliest-created one and the result is independent of
    the scene's person order. Returns (clusters sorted by smallest member id,
    noise ids).
    """
    if not scene.persons:
        raise ValueError("cannot cluster an empty scene")
    ids = sorted(p.person_id for p in scene.persons)
    roots = np.stack([scene.person(i).root_translation for i in ids])
    n = len(ids)
    dist = np.linalg.norm(roots[:, None, :] - roots[None, :, :], axis=2)
    neighbors = [np.flatnonzero(dist[i] <= cfg.eps) for i in range(n)]
    is_core = np.array([len(nb) >= cfg.min_pts for nb in neighbors])

    labels = np.full(n, -1)
    cluster_count = 0
    for seed in range(n):
        if labels[seed] != -1 or not is_core[seed]:
            continue
        label = cluster_count
        cluster_count += 1
        labels[seed] = label
        queue = [seed]
        while queue:
            point = queue.pop(0)
            if not is_core[point]:
                continue
            for nb in neighbors[point]:
                if labels[nb] == -1:
                    labels[nb] = label
                    queue.append(int(nb))

    clusters = [
        [ids[i] for i in range(n) if labels[i] == label] for label in range(cluster_count)
    ]
    clusters.sort(key=lambda members: members[0])
    noise = [ids[i] for i in range(n) if labels[i] == -1]
    return clusters, noise


@dataclass
class PackedGaussians:
    """Structure-of-arrays view of selected persons, used by the renderer and
    the distillation optimizer. positions stay person-local; roots holds the
    per-gaussian root translation so world = positions + roots."""

    positions: np.ndarray  # (N, 3) person-local
    log_scales: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4) unit quaternions, wxyz
    opacity_logits: np.ndarray  # (N,)
    colors: np.ndarray  # (N, 3)
    roots: np.ndarray  # (N, 3)
    person_slices: list[tuple[str, slice]]
    background_color: np.ndarray

    @property
    def count(self) -> int:
        return len(self.positions)

    def world_positions(self) -> np.ndarray:
        return self.positions + self.roots


def pack_scene(scene: CrowdScene, person_ids=None) -> PackedGaussians:
    if person_ids is None:
        selected = list(scene.persons)
    else:
        wanted = list(person_ids)
        missing = [i for i in wanted if i not in scene.person_ids()]
        if missing:
            raise KeyError(f"person ids not in scene: {missing}")
        selected = [p for p in scene.persons if p.person_id in set(wanted)]
    blocks = []
    slices = []
    offset = 0
    for person in selected:
        g = person.gaussians
        blocks.append(
            (
                np.stack([x.position for x in g]),
                np.stack([x.log_scale for x in g]),
                np.stack([x.rotation for x in g]),
                np.array([x.opacity_logit for x in g]),
                np.stack([x.color for x in g]),
                np.broadcast_to(person.root_translation, (len(g), 3)).copy(),
            )
        )
        slices.append((person.person_id, slice(offset, offset + len(g))))
        offset += len(g)
    if not blocks:
        # Empty scenes render as pure background.
        blocks = [
            (np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3)))
        ]
    return PackedGaussians(
        positions=np.concatenate([b[0] for b in blocks]),
        log_scales=np.concatenate([b[1] for b in blocks]),
        rotations=np.concatenate([b[2] for b in blocks]),
        opacity_logits=np.concatenate([b[3] for b in blocks]),
        colors=np.concatenate([b[4] for b in blocks]),
        roots=np.concatenate([b[5] for b in blocks]),
        person_slices=slices,
        background_color=scene.background_color.copy(),
    )


def unpack_into_scene(packed: PackedGaussians, scene: CrowdScene) -> CrowdScene:
    """Rebuild a scene replacing the packed persons; everyone else is reused
    untouched (same objects, bit-identical)."""
    replacements = {}
    for person_id, sl in packed.person_slices:
        original = scene.person(person_id)
        gaussians = tuple(
            Gaussian(
                position=packed.positions[i],
                log_scale=packed.log_scales[i],
                rotation=packed.rotations[i],
                opacity_logit=float(packed.opacity_logits[i]),
                color=packed.colors[i],
            )
            for i in range(sl.start, sl.stop)
        )
        replacements[person_id] = PersonGaussians(person_id, gaussians, original.root_translation)
    persons = tuple(replacements.get(p.person_id, p) for p in scene.persons)
    return CrowdScene(persons, scene.background_color)
