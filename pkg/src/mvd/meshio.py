"""Wavefront OBJ reading and writing, with per-vertex colors carried as the
common xyzrgb extension on vertex lines."""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError
from .scene import TriMesh


def write_obj(path, mesh: TriMesh) -> None:
    lines = []
    has_colors = mesh.colors is not None
    for i, v in enumerate(mesh.vertices):
        if has_colors:
            c = mesh.colors[i]
            lines.append(
                f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g} {c[0]:.6g} {c[1]:.6g} {c[2]:.6g}"
            )
        else:
            lines.append(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}")
    for a, b, c in mesh.faces:
        lines.append(f"f {a + 1} {b + 1} {c + 1}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_obj(path) -> TriMesh:
    verts: list[list[float]] = []
    colors: list[list[float]] = []
    faces: list[list[int]] = []
    with open(path) as f:
        for line_no, line in enumerate(f, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                nums = [float(x) for x in parts[1:]]
                if len(nums) not in (3, 6):
                    raise ConfigurationError(
                        f"obj line {line_no}: vertex needs 3 or 6 floats"
                    )
                verts.append(nums[:3])
                if len(nums) == 6:
                    colors.append(nums[3:])
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                if len(idx) < 3:
                    raise ConfigurationError(f"obj line {line_no}: face needs >= 3 vertices")
                for k in range(1, len(idx) - 1):  # fan triangulation
                    faces.append([idx[0], idx[k], idx[k + 1]])
    if not verts:
        raise ConfigurationError("obj: no vertices found")
    color_arr = None
    if colors:
        if len(colors) != len(verts):
            raise ConfigurationError("obj: some vertices carry colors, others do not")
        color_arr = np.asarray(colors)
    return TriMesh(np.asarray(verts), np.asarray(faces, dtype=np.int64), color_arr)
