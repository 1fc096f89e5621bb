"""Bundled toy body: 5 joints, 32 vertices, no pose blendshapes.

Small enough for fast tests and CLI demos, but it exercises every code path
of the real loader (blendshapes, regressor, blended skinning weights, head
joint exclusion). Scene configs may reference it as the body model path
``"toy"`` instead of a JSON file on disk.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .body_model import BodyModelData, body_model_from_dict
from .fileio import atomic_write_json

# Joint layout: 0 root (pelvis), 1 chest, 2 head, 3 left hand, 4 right hand.
_PARENTS = [-1, 0, 1, 1, 1]
_HEAD_JOINTS = [2]

# One axis-aligned box of 8 vertices per body segment. axis/root_sign say
# along which coordinate the segment runs and which end faces the parent.
_SEGMENTS = [
    # (center, half extents, parent joint, tip joint, axis, root_sign)
    ((0.0, 0.0, 1.05), (0.12, 0.10, 0.15), 0, 1, 2, -1),  # torso: pelvis -> chest
    ((0.0, 0.0, 1.38), (0.09, 0.09, 0.09), 1, 2, 2, -1),  # head sits above chest
    ((-0.27, 0.0, 1.20), (0.15, 0.06, 0.06), 1, 3, 0, +1),  # left arm points -x
    ((0.27, 0.0, 1.20), (0.15, 0.06, 0.06), 1, 4, 0, -1),  # right arm points +x
]

# Corners on the root side of a segment blend toward the parent joint so the
# skinning weights are genuinely mixed, not rigid per box.
_NEAR_ROOT_WEIGHT = 0.75

_BOX_FACES = np.array(
    [
        [0, 2, 1], [0, 3, 2],  # -z
        [4, 5, 6], [4, 6, 7],  # +z
        [0, 1, 5], [0, 5, 4],  # -y
        [2, 3, 7], [2, 7, 6],  # +y
        [1, 2, 6], [1, 6, 5],  # +x
        [0, 4, 7], [0, 7, 3],  # -x
    ],
    dtype=np.int64,
)


def _box_vertices(center, half) -> np.ndarray:
    cx, cy, cz = center
    hx, hy, hz = half
    corners = [
        (-1, -1, -1), (1, -1, -1), (1, 1, -1), (-1, 1, -1),
        (-1, -1, 1), (1, -1, 1), (1, 1, 1), (-1, 1, 1),
    ]
    return np.array([(cx + sx * hx, cy + sy * hy, cz + sz * hz) for sx, sy, sz in corners])


def build_toy_body() -> dict:
    """The toy body as a plain dict matching the body-model JSON schema."""
    num_joints = len(_PARENTS)
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    weights: list[list[float]] = []
    regressor = np.zeros((num_joints, 8 * len(_SEGMENTS)))

    for seg_index, (center, half, parent_joint, tip_joint, axis, root_sign) in enumerate(_SEGMENTS):
        base = len(verts)
        box = _box_vertices(center, half)
        verts.extend(box.tolist())
        faces.extend((_BOX_FACES + base).tolist())

        root_side = root_sign * (box[:, axis] - center[axis]) > 0
        for corner_root_side in root_side:
            row = [0.0] * num_joints
            if corner_root_side:
                row[parent_joint] = _NEAR_ROOT_WEIGHT
                row[tip_joint] = 1.0 - _NEAR_ROOT_WEIGHT
            else:
                row[tip_joint] = 1.0
            weights.append(row)

        # Tip joint at the centroid of the segment's far face; the root joint
        # at the centroid of the torso's pelvis-side face.
        tip_face = base + np.flatnonzero(~root_side)
        regressor[tip_joint, tip_face] = 1.0 / len(tip_face)
        if seg_index == 0:
            pelvis_face = base + np.flatnonzero(root_side)
            regressor[parent_joint, pelvis_face] = 1.0 / len(pelvis_face)

    verts_arr = np.asarray(verts)
    shape_bs = np.zeros((len(verts), 3, 2))
    # coefficient 0: uniform stature change, coefficient 1: arm span change
    shape_bs[:, 2, 0] = 0.1 * (verts_arr[:, 2] - 0.9)
    shape_bs[:, 0, 1] = 0.05 * np.sign(verts_arr[:, 0]) * (np.abs(verts_arr[:, 0]) > 0.2)

    return {
        "template_vertices": verts,
        "faces": faces,
        "shape_blendshapes": shape_bs.tolist(),
        "joint_regressor": regressor.tolist(),
        "skinning_weights": weights,
        "kinematic_parents": _PARENTS,
        "pose_blendshapes": None,
        "head_joint_ids": _HEAD_JOINTS,
    }


def toy_body_model() -> BodyModelData:
    return body_model_from_dict(build_toy_body())


def write_toy_body_model(path: str | Path) -> None:
    """Write the toy body to disk in the loader's JSON schema."""
    atomic_write_json(path, build_toy_body())
