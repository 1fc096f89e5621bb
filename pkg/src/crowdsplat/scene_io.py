"""Scene persistence: per-person Gaussian PLY files, mesh JSON, and the scene
manifest tying them together."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .body_model import Mesh
from .fileio import atomic_write_bytes, atomic_write_json, load_json
from .scene import CrowdScene, Gaussian, PersonGaussians

SCENE_MANIFEST_VERSION = 1

_PLY_PROPERTIES = [
    "x", "y", "z",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
    "opacity",
    "red", "green", "blue",
]


def save_person_ply(person: PersonGaussians, path: str | Path) -> None:
    """Binary little-endian PLY, one float32 record per Gaussian.

    Scales are stored as log values, rotations as wxyz quaternions, opacity as
    a logit, and colors as floats in [0, 1].
    """
    n = len(person.gaussians)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {p}" for p in _PLY_PROPERTIES]
    header.append("end_header")
    records = np.empty((n, len(_PLY_PROPERTIES)), dtype="<f4")
    for i, g in enumerate(person.gaussians):
        records[i, 0:3] = g.position
        records[i, 3:6] = g.log_scale
        records[i, 6:10] = g.rotation
        records[i, 10] = g.opacity_logit
        records[i, 11:14] = g.color
    payload = ("\n".join(header) + "\n").encode("ascii") + records.tobytes()
    atomic_write_bytes(path, payload)


def load_person_ply(path: str | Path, person_id: str, root_translation) -> PersonGaussians:
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if end < 0:
        raise ValueError(f"{path}: missing PLY header terminator")
    header_lines = raw[:end].decode("ascii").splitlines()
    if not header_lines or header_lines[0] != "ply":
        raise ValueError(f"{path}: not a PLY file")
    if "format binary_little_endian 1.0" not in header_lines:
        raise ValueError(f"{path}: expected binary little-endian PLY")
    count = None
    props = []
    for line in header_lines:
        if line.startswith("element vertex"):
            count = int(line.split()[-1])
        elif line.startswith("property"):
            props.append(line.split()[-1])
    if count is None:
        raise ValueError(f"{path}: missing vertex element")
    if props != _PLY_PROPERTIES:
        raise ValueError(f"{path}: unexpected property layout {props}")
    body = raw[end + len(b"end_header\n"):]
    records = np.frombuffer(body, dtype="<f4", count=count * len(_PLY_PROPERTIES))
    records = records.reshape(count, len(_PLY_PROPERTIES)).astype(np.float64)
    gaussians = tuple(
        Gaussian(
            position=rec[0:3],
            log_scale=rec[3:6],
            rotation=rec[6:10],
            opacity_logit=float(rec[10]),
            color=rec[11:14],
        )
        for rec in records
    )
    return PersonGaussians(person_id, gaussians, np.asarray(root_translation, dtype=np.float64))


def save_mesh_json(mesh: Mesh, path: str | Path) -> None:
    atomic_write_json(
        path,
        {
            "vertices": mesh.vertices.tolist(),
            "faces": mesh.faces.tolist(),
            "vertex_normals": mesh.vertex_normals.tolist(),
        },
    )


def load_mesh_json(path: str | Path) -> Mesh:
    doc = load_json(path)
    return Mesh(
        vertices=np.asarray(doc["vertices"], dtype=np.float64),
        faces=np.asarray(doc["faces"], dtype=np.int64).reshape(-1, 3),
        vertex_normals=np.asarray(doc["vertex_normals"], dtype=np.float64),
    )


def save_scene(
    scene: CrowdScene,
    out_dir: str | Path,
    meshes: dict[str, Mesh] | None = None,
    extra: dict | None = None,
) -> Path:
    """Write per-person PLYs (plus optional meshes) and the scene manifest.

    Returns the manifest path. Relative paths inside the manifest are resolved
    against its directory on load.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    persons = []
    for person in scene.persons:
        ply_name = f"{person.person_id}.ply"
        save_person_ply(person, out_dir / ply_name)
        entry = {
            "person_id": person.person_id,
            "ply": ply_name,
            "root_translation": person.root_translation.tolist(),
        }
        if meshes and person.person_id in meshes:
            mesh_name = f"{person.person_id}_mesh.json"
            save_mesh_json(meshes[person.person_id], out_dir / mesh_name)
            entry["mesh"] = mesh_name
        persons.append(entry)
    manifest = {
        "version": SCENE_MANIFEST_VERSION,
        "kind": "scene",
        "background_color": scene.background_color.tolist(),
        "persons": persons,
    }
    if extra:
        manifest.update(extra)
    path = out_dir / "scene.json"
    atomic_write_json(path, manifest)
    return path


def load_scene(manifest_path: str | Path) -> tuple[CrowdScene, dict[str, Mesh]]:
    manifest_path = Path(manifest_path)
    doc = load_json(manifest_path)
    if doc.get("kind") != "scene":
        raise ValueError(f"{manifest_path} is not a scene manifest")
    base = manifest_path.parent
    persons = []
    meshes: dict[str, Mesh] = {}
    for entry in doc["persons"]:
        person = load_person_ply(
            base / entry["ply"], entry["person_id"], entry["root_translation"]
        )
        persons.append(person)
        if "mesh" in entry:
            meshes[entry["person_id"]] = load_mesh_json(base / entry["mesh"])
    scene = CrowdScene(tuple(persons), np.asarray(doc["background_color"], dtype=np.float64))
    return scene, meshes
