"""Reduced SMPL-style parametric body: shape blendshapes, joint regression,
and linear blend skinning over an arbitrary kinematic tree.

The model is loaded from a JSON document (see ``load_body_model``), so any
joint count works; nothing here assumes a specific body-model family beyond
the blendshape + regressor + skinning-weight structure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import json
import numpy as np

_ROW_SUM_TOL = 1e-6


@dataclass(frozen=True)
class BodyModelData:
    """Template geometry plus the linear machinery that poses it.

    All arrays are read-only after construction; instances are safe to share
    across threads.
    """

    template_vertices: np.ndarray  # (V, 3) meters
    faces: np.ndarray  # (F, 3) int vertex indices
    shape_blendshapes: np.ndarray  # (V, 3, S)
    joint_regressor: np.ndarray  # (J, V), rows sum to 1
    skinning_weights: np.ndarray  # (V, J), rows sum to 1
    kinematic_parents: np.ndarray  # (J,) int, root has parent -1
    pose_blendshapes: np.ndarray | None = None  # (V, 3, 9*(J-1))
    head_joint_ids: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "template_vertices", _freeze(self.template_vertices, np.float64))
        object.__setattr__(self, "faces", _freeze(self.faces, np.int64))
        object.__setattr__(self, "shape_blendshapes", _freeze(self.shape_blendshapes, np.float64))
        object.__setattr__(self, "joint_regressor", _freeze(self.joint_regressor, np.float64))
        object.__setattr__(self, "skinning_weights", _freeze(self.skinning_weights, np.float64))
        object.__setattr__(self, "kinematic_parents", _freeze(self.kinematic_parents, np.int64))
        if self.pose_blendshapes is not None:
            object.__setattr__(self, "pose_blendshapes", _freeze(self.pose_blendshapes, np.float64))
        object.__setattr__(self, "head_joint_ids", frozenset(int(j) for j in self.head_joint_ids))
        self._validate()

    @property
    def num_vertices(self) -> int:
        return self.template_vertices.shape[0]

    @property
    def num_joints(self) -> int:
        return self.joint_regressor.shape[0]

    @property
    def num_shape_coeffs(self) -> int:
        return self.shape_blendshapes.shape[2]

    def _validate(self):
        v = self.num_vertices
        j = self.num_joints
        if self.template_vertices.ndim != 2 or self.template_vertices.shape[1] != 3:
            raise ValueError("template_vertices must be (V, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ValueError("faces must be (F, 3)")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= v):
            raise ValueError("face indices out of range")
        if self.shape_blendshapes.shape[:2] != (v, 3):
            raise ValueError(f"shape_blendshapes must be ({v}, 3, S), got {self.shape_blendshapes.shape}")
        if self.joint_regressor.shape != (j, v):
            raise ValueError(f"joint_regressor must be (J, {v}), got {self.joint_regressor.shape}")
        if self.skinning_weights.shape != (v, j):
            raise ValueError(f"skinning_weights must be ({v}, {j}), got {self.skinning_weights.shape}")
        if self.kinematic_parents.shape != (j,):
            raise ValueError(f"kinematic_parents must have {j} entries")
        if self.pose_blendshapes is not None and self.pose_blendshapes.shape != (v, 3, 9 * (j - 1)):
            raise ValueError(
                f"pose_blendshapes must be ({v}, 3, {9 * (j - 1)}), got {self.pose_blendshapes.shape}"
            )
        bad = frozenset(h for h in self.head_joint_ids if h < 0 or h >= j)
        if bad:
            raise ValueError(f"head_joint_ids out of range: {sorted(bad)}")

        if np.any(self.skinning_weights < -_ROW_SUM_TOL):
            row = int(np.argmin(self.skinning_weights.min(axis=1)))
            raise ValueError(f"skinning weights must be nonnegative (row {row})")
        sums = self.skinning_weights.sum(axis=1)
        off = np.abs(sums - 1.0) > _ROW_SUM_TOL
        if np.any(off):
            row = int(np.argmax(off))
            raise ValueError(f"skinning weight row {row} sums to {sums[row]:.6f}, expected 1")
        jsums = self.joint_regressor.sum(axis=1)
        joff = np.abs(jsums - 1.0) > _ROW_SUM_TOL
        if np.any(joff):
            row = int(np.argmax(joff))
            raise ValueError(f"joint regressor row {row} sums to {jsums[row]:.6f}, expected 1")

        _check_kinematic_tree(self.kinematic_parents)


def _freeze(arr, dtype) -> np.ndarray:
    out = np.ascontiguousarray(np.asarray(arr, dtype=dtype))
    out.setflags(write=False)
    return out


def _check_kinematic_tree(parents: np.ndarray) -> None:
    roots = np.flatnonzero(parents < 0)
    if len(roots) != 1:
        raise ValueError(f"kinematic tree must have exactly one root, found {len(roots)}")
    n = len(parents)
    if np.any(parents >= n):
        raise ValueError("kinematic parent index out of range")
    for start in range(n):
        seen = set()
        cur = start
        while cur >= 0:
            if cur in seen:
                raise ValueError(f"kinematic tree has a cycle through joint {cur}")
            seen.add(cur)
            cur = int(parents[cur])


@dataclass(frozen=True)
class BodyParams:
    """Per-person parameters: shape coefficients, per-joint axis-angle pose,
    and the root translation placing the person in the shared scene."""

    shape: np.ndarray  # (S,) unitless
    pose: np.ndarray  # (J, 3) axis-angle radians
    root_translation: np.ndarray  # (3,) meters

    def __post_init__(self):
        object.__setattr__(self, "shape", _freeze(self.shape, np.float64))
        object.__setattr__(self, "pose", _freeze(np.asarray(self.pose, dtype=np.float64).reshape(-1, 3), np.float64))
        object.__setattr__(self, "root_translation", _freeze(self.root_translation, np.float64))
        if self.root_translation.shape != (3,):
            raise ValueError("root_translation must be a 3-vector")

    @classmethod
    def rest(cls, model: BodyModelData, root_translation=(0.0, 0.0, 0.0)) -> "BodyParams":
        return cls(
            shape=np.zeros(model.num_shape_coeffs),
            pose=np.zeros((model.num_joints, 3)),
            root_translation=np.asarray(root_translation, dtype=np.float64),
        )


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray  # (V, 3) meters
    faces: np.ndarray  # (F, 3) int
    vertex_normals: np.ndarray  # (V, 3) unit

    def __post_init__(self):
        object.__setattr__(self, "vertices", _freeze(self.vertices, np.float64))
        object.__setattr__(self, "faces", _freeze(self.faces, np.int64))
        object.__setattr__(self, "vertex_normals", _freeze(self.vertex_normals, np.float64))
        norms = np.linalg.norm(self.vertex_normals, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("vertex normals must have unit length")

    def translated(self, offset) -> "Mesh":
        off = np.asarray(offset, dtype=np.float64)
        return Mesh(self.vertices + off, self.faces, self.vertex_normals)


class ProjectedKeypoints(NamedTuple):
    points: np.ndarray  # (K, 2) pixel coordinates
    behind_camera: int  # joints dropped because they project behind the camera


def rodrigues(axis_angle: np.ndarray) -> np.ndarray:
    """Axis-angle vectors (..., 3) to rotation matrices (..., 3, 3).

    Below |theta| < 1e-8 the sin/cos coefficients switch to their second-order
    Taylor expansions, so the rest pose maps to the exact identity.
    """
    aa = np.asarray(axis_angle, dtype=np.float64)
    squeeze = aa.ndim == 1
    aa = np.atleast_2d(aa)
    theta = np.linalg.norm(aa, axis=-1)
    small = theta < 1e-8
    # sin(t)/t and (1-cos(t))/t^2, with Taylor fallbacks at t -> 0
    with np.errstate(invalid="ignore", divide="ignore"):
        a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(theta) / np.where(small, 1.0, theta))
        b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(theta)) / np.where(small, 1.0, theta**2))
    kx, ky, kz = aa[:, 0], aa[:, 1], aa[:, 2]
    zeros = np.zeros_like(kx)
    k_cross = np.stack(
        [zeros, -kz, ky, kz, zeros, -kx, -ky, kx, zeros], axis=-1
    ).reshape(-1, 3, 3)
    eye = np.broadcast_to(np.eye(3), k_cross.shape)
    rot = eye + a[:, None, None] * k_cross + b[:, None, None] * (k_cross @ k_cross)
    return rot[0] if squeeze else rot


def vertex_normals_from_faces(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted average of incident face normals, renormalized.

    Vertices not referenced by any face get the fallback normal (0, 0, 1).
    """
    normals = np.zeros_like(vertices)
    if faces.size:
        v0 = vertices[faces[:, 0]]
        e1 = vertices[faces[:, 1]] - v0
        e2 = vertices[faces[:, 2]] - v0
        face_n = np.cross(e1, e2)  # magnitude = 2 * area
        for k in range(3):
            np.add.at(normals, faces[:, k], face_n)
    lengths = np.linalg.norm(normals, axis=1)
    degenerate = lengths < 1e-12
    normals[degenerate] = (0.0, 0.0, 1.0)
    lengths = np.where(degenerate, 1.0, lengths)
    return normals / lengths[:, None]


def _shaped_vertices(model: BodyModelData, shape: np.ndarray) -> np.ndarray:
    shape = np.asarray(shape, dtype=np.float64)
    if shape.shape != (model.num_shape_coeffs,):
        raise ValueError(
            f"shape has {shape.shape} coefficients, model expects {model.num_shape_coeffs}"
        )
    if not shape.any():
        return model.template_vertices.copy()
    return model.template_vertices + _blend(model.shape_blendshapes, shape)


def _blend(blendshapes: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    return np.einsum("vcs,s->vc", blendshapes, coeffs)


def regress_joints(model: BodyModelData, shape: np.ndarray) -> np.ndarray:
    """Rest-pose joint locations: regressor applied to the shaped template."""
    return model.joint_regressor @ _shaped_vertices(model, shape)


def _kinematic_transforms(model: BodyModelData, pose: np.ndarray, joints: np.ndarray):
    """Per-joint 4x4 skinning transforms (rest pose -> posed) via forward
    kinematics along the parent chain."""
    j = model.num_joints
    rots = rodrigues(pose)
    world = np.zeros((j, 4, 4))
    order = _topological_order(model.kinematic_parents)
    for k in order:
        local = np.eye(4)
        local[:3, :3] = rots[k]
        parent = int(model.kinematic_parents[k])
        if parent < 0:
            local[:3, 3] = joints[k]
            world[k] = local
        else:
            local[:3, 3] = joints[k] - joints[parent]
            world[k] = world[parent] @ local
    # subtract each joint's rest position so rest pose maps to identity
    skinning = world.copy()
    skinning[:, :3, 3] -= np.einsum("jab,jb->ja", world[:, :3, :3], joints)
    return skinning, world, rots


def _topological_order(parents: np.ndarray) -> list[int]:
    order: list[int] = []
    placed = np.zeros(len(parents), dtype=bool)
    pending = list(range(len(parents)))
    while pending:
        remaining = []
        for k in pending:
            p = int(parents[k])
            if p < 0 or placed[p]:
                order.append(k)
                placed[k] = True
            else:
                remaining.append(k)
        pending = remaining
    return order


def skin(model: BodyModelData, params: BodyParams) -> Mesh:
    """Pose the template with linear blend skinning.

    Applies shape blendshapes, optional pose blendshapes (flattened R - I over
    non-root joints), forward kinematics, per-vertex weight blending, and the
    root translation. Normals are recomputed from the deformed faces.
    """
    if params.pose.shape != (model.num_joints, 3):
        raise ValueError(
            f"pose has {params.pose.shape[0]} joints, model expects {model.num_joints}"
        )
    v_shaped = _shaped_vertices(model, params.shape)
    joints = model.joint_regressor @ v_shaped
    skinning, _, rots = _kinematic_transforms(model, params.pose, joints)

    v_posed = v_shaped
    if model.pose_blendshapes is not None:
        root = int(np.flatnonzero(model.kinematic_parents < 0)[0])
        non_root = [k for k in range(model.num_joints) if k != root]
        feature = (rots[non_root] - np.eye(3)).reshape(-1)
        if feature.any():
            v_posed = v_shaped + _blend(model.pose_blendshapes, feature)

    per_joint = np.einsum("jab,vb->vja", skinning[:, :3, :3], v_posed) + skinning[:, :3, 3][None, :, :]
    vertices = np.einsum("vj,vja->va", model.skinning_weights, per_joint) + params.root_translation
    normals = vertex_normals_from_faces(vertices, model.faces)
    return Mesh(vertices, model.faces, normals)


def posed_joints(model: BodyModelData, params: BodyParams) -> np.ndarray:
    """World-space joint positions after forward kinematics plus root translation."""
    joints = model.joint_regressor @ _shaped_vertices(model, params.shape)
    _, world, _ = _kinematic_transforms(model, params.pose, joints)
    return world[:, :3, 3] + params.root_translation


def projected_keypoints(model: BodyModelData, params: BodyParams, camera) -> ProjectedKeypoints:
    """Image-plane positions of the non-head joints.

    Joints that land behind the camera plane are dropped and counted in
    ``behind_camera`` instead of raising.
    """
    joints = posed_joints(model, params)
    keep = [k for k in range(model.num_joints) if k not in model.head_joint_ids]
    cam_pts = (camera.rotation @ joints[keep].T).T + camera.translation
    in_front = cam_pts[:, 2] > camera.near
    behind = int(np.count_nonzero(~in_front))
    visible = cam_pts[in_front]
    if len(visible) == 0:
        return ProjectedKeypoints(np.zeros((0, 2)), behind)
    u = camera.fx * visible[:, 0] / visible[:, 2] + camera.cx
    v = camera.fy * visible[:, 1] / visible[:, 2] + camera.cy
    return ProjectedKeypoints(np.stack([u, v], axis=1), behind)


def load_body_model(path: str | Path) -> BodyModelData:
    """Load and validate a body model from its JSON schema.

    Top-level keys: template_vertices (V,3), faces (F,3), shape_blendshapes
    (V,3,S), joint_regressor (J,V), skinning_weights (V,J), kinematic_parents
    (J ints, root -1), optional pose_blendshapes and head_joint_ids.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed body-model JSON {path}: {exc}") from exc
    return body_model_from_dict(doc)


def body_model_from_dict(doc: dict) -> BodyModelData:
    required = [
        "template_vertices",
        "faces",
        "shape_blendshapes",
        "joint_regressor",
        "skinning_weights",
        "kinematic_parents",
    ]
    missing = [k for k in required if k not in doc]
    if missing:
        raise ValueError(f"body-model document missing keys: {missing}")
    return BodyModelData(
        template_vertices=np.asarray(doc["template_vertices"], dtype=np.float64),
        faces=np.asarray(doc["faces"], dtype=np.int64).reshape(-1, 3),
        shape_blendshapes=np.asarray(doc["shape_blendshapes"], dtype=np.float64),
        joint_regressor=np.asarray(doc["joint_regressor"], dtype=np.float64),
        skinning_weights=np.asarray(doc["skinning_weights"], dtype=np.float64),
        kinematic_parents=np.asarray(doc["kinematic_parents"], dtype=np.int64),
        pose_blendshapes=(
            np.asarray(doc["pose_blendshapes"], dtype=np.float64)
            if doc.get("pose_blendshapes") is not None
            else None
        ),
        head_joint_ids=frozenset(doc.get("head_joint_ids", [])),
    )
