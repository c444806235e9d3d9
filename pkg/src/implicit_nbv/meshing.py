"""Iso-surface extraction from the occupancy field and ASCII PLY export."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from skimage import measure

from .geometry import Aabb

ISO_LEVEL = 0.5


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) metres
    faces: np.ndarray  # (F, 3) int
    colors: np.ndarray | None = None  # (V, 3) in [0, 1]

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != len(self.vertices):
                raise ValueError("one colour per vertex required")

    @staticmethod
    def empty() -> "TriangleMesh":
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=-1)

    def signed_volume(self) -> float:
        """Positive for a closed mesh with outward-facing triangles."""
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return float(np.sum(np.einsum("ij,ij->i", a, np.cross(b, c))) / 6.0)


def grid_points(box: Aabb, resolution: int) -> tuple[np.ndarray, np.ndarray]:
    """Lattice of ``resolution`` points per axis spanning the box, and its spacing."""
    axes = [np.linspace(box.p_min[i], box.p_max[i], resolution) for i in range(3)]
    g = np.meshgrid(*axes, indexing="ij")
    spacing = (box.p_max - box.p_min) / (resolution - 1)
    return np.stack([a.ravel() for a in g], axis=-1), spacing


def marching_cubes_volume(volume: np.ndarray, box: Aabb, iso: float = ISO_LEVEL) -> TriangleMesh:
    """Mesh of the ``iso`` level set of a sampled volume (values high inside)."""
    volume = np.asarray(volume, dtype=np.float64)
    if min(volume.shape) < 2:
        raise ValueError("resolution must be at least 2")
    if not (volume.min() < iso < volume.max()):
        return TriangleMesh.empty()
    spacing = (box.p_max - box.p_min) / (np.array(volume.shape) - 1)
    verts, faces, _, _ = measure.marching_cubes(
        volume,
        level=iso,
        spacing=tuple(spacing),
        gradient_direction="ascent",
        allow_degenerate=False,
        method="lorensen",
    )
    mesh = TriangleMesh(verts + box.p_min, faces)
    keep = mesh.triangle_areas() > 1e-12
    if not np.all(keep):
        mesh = TriangleMesh(mesh.vertices, mesh.faces[keep])
    return _drop_unused(mesh)


def _drop_unused(mesh: TriangleMesh) -> TriangleMesh:
    used = np.unique(mesh.faces)
    if used.size == len(mesh.vertices):
        return mesh
    remap = np.full(len(mesh.vertices), -1, dtype=np.int64)
    remap[used] = np.arange(used.size)
    colors = None if mesh.colors is None else mesh.colors[used]
    return TriangleMesh(mesh.vertices[used], remap[mesh.faces], colors)


def marching_cubes(
    field_model, resolution: int = 128, iso: float = ISO_LEVEL, box: Aabb | None = None, with_color: bool = True
) -> TriangleMesh:
    """Extract the occupancy iso-surface over the box lattice."""
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    box = field_model.box if box is None else box
    pts, _ = grid_points(box, resolution)
    vol = field_model.occupancy(pts).reshape(resolution, resolution, resolution)
    mesh = marching_cubes_volume(vol, box, iso)
    if with_color and not mesh.is_empty:
        mesh.colors = np.clip(np.asarray(field_model.query(mesh.vertices)[1]), 0.0, 1.0)
    return mesh


def export_ply(mesh: TriangleMesh, path: str | Path) -> None:
    """ASCII PLY with vertex x/y/z (+ uchar r/g/b when coloured) and triangle lists."""
    path = Path(path)
    colored = mesh.colors is not None
    lines = ["ply", "format ascii 1.0", f"element vertex {len(mesh.vertices)}"]
    lines += ["property float x", "property float y", "property float z"]
    if colored:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines += [f"element face {len(mesh.faces)}", "property list uchar int vertex_indices", "end_header"]
    if colored:
        rgb = np.round(np.clip(mesh.colors, 0.0, 1.0) * 255).astype(int)
        for v, c in zip(mesh.vertices, rgb):
            lines.append(f"{v[0]:.6f} {v[1]:.6f} {v[2]:.6f} {c[0]} {c[1]} {c[2]}")
    else:
        lines += [f"{v[0]:.6f} {v[1]:.6f} {v[2]:.6f}" for v in mesh.vertices]
    lines += [f"3 {f[0]} {f[1]} {f[2]}" for f in mesh.faces]
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


__all__ = ["ISO_LEVEL", "TriangleMesh", "grid_points", "marching_cubes_volume", "marching_cubes", "export_ply"]
