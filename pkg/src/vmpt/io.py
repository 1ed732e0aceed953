"""Field export: legacy VTK unstructured grid and a nodal CSV dump.

The exported ``phi`` is the hard-phase fraction, i.e. the first component
of the unshifted phase field.
"""
import csv

import numpy as np

from .fem import TriMesh

NODAL_COLUMNS = ("x", "y", "phi", "ux", "uy")


def write_vtk(path, mesh, phi, u=None, title="phase field"):
    pts = mesh.points
    tri = mesh.triangles
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {len(pts)} double"]
    lines += [f"{x!r} {y!r} 0.0" for x, y in pts]
    lines.append(f"CELLS {len(tri)} {4 * len(tri)}")
    lines += [f"3 {a} {b} {c}" for a, b, c in tri]
    lines.append(f"CELL_TYPES {len(tri)}")
    lines += ["5"] * len(tri)
    lines += [f"POINT_DATA {len(pts)}", "SCALARS phi double 1", "LOOKUP_TABLE default"]
    lines += [repr(float(v)) for v in phi]
    if u is not None:
        lines.append("VECTORS displacement double")
        lines += [f"{ux!r} {uy!r} 0.0" for ux, uy in np.asarray(u).reshape(-1, 2)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_nodal_csv(path, mesh, phi, u=None):
    u = np.zeros(2 * mesh.n_nodes) if u is None else np.asarray(u)
    U = u.reshape(-1, 2)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(NODAL_COLUMNS)
        for (x, y), p, (ux, uy) in zip(mesh.points, phi, U):
            wr.writerow([repr(float(x)), repr(float(y)), repr(float(p)),
                         repr(float(ux)), repr(float(uy))])


def read_nodal_csv(path):
    """Returns (mesh, phi, u); the structured mesh is recovered from the coordinates."""
    data = np.genfromtxt(path, delimiter=",", names=True)
    missing = [c for c in NODAL_COLUMNS if c not in data.dtype.names]
    if missing:
        raise ValueError(f"{path}: missing columns {', '.join(missing)}")
    data = np.atleast_1d(data)
    xs, ys = np.unique(data["x"]), np.unique(data["y"])
    mesh = TriMesh(len(xs) - 1, len(ys) - 1, float(xs[-1] - xs[0]), float(ys[-1] - ys[0]))
    if len(data) != mesh.n_nodes or not np.allclose(mesh.points, np.c_[data["x"], data["y"]]):
        raise ValueError(f"{path}: nodes do not form the expected structured grid")
    u = np.c_[data["ux"], data["uy"]].ravel()
    return mesh, np.asarray(data["phi"], dtype=float), u
