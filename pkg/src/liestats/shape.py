"""Turning geometry into group-valued data.

* PCA reference frames of point clouds and SE(3) relative poses between them.
* Rigid Procrustes alignment of corresponding meshes.
* Per-face deformation gradients ("differential coordinates") of a mesh
  relative to a reference, as elements of a power of GL+(3).

Face-frame convention: for face ``(i, j, k)`` the frame is
``[v_j - v_i, v_k - v_i, n]`` with ``n`` the *unit* normal.  The Jacobian of a
face is ``G = F' F^-1``.  Unit normals make ``G = R`` exact under a rigid
rotation; for a uniform scaling by ``s`` the singular values are ``(s, s, 1)``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateConfiguration,
    DegenerateFace,
    DegenerateSpectrum,
    MeshMismatch,
    OrientationFlip,
)
from .groups import SE3, GLPlus, power

__all__ = [
    "TriangleMesh",
    "ReferenceFrame",
    "read_mesh",
    "write_mesh",
    "frame_from_pca",
    "relative_pose",
    "procrustes_align",
    "differential_coords",
]

MIN_FACE_AREA = 1e-12
FRAME_TOL = 1e-9
SPECTRAL_GAP = 1e-9


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(self.vertices)):
            raise ValueError("mesh vertices must be finite")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")
        bad = np.flatnonzero(self.face_areas() <= MIN_FACE_AREA)
        if bad.size:
            raise DegenerateFace(f"face {int(bad[0])} has area <= {MIN_FACE_AREA:g}")

    def face_areas(self):
        return 0.5 * np.linalg.norm(self._cross(), axis=-1)

    def face_normals(self):
        c = self._cross()
        return c / np.linalg.norm(c, axis=-1, keepdims=True)

    def _cross(self):
        v = self.vertices[self.faces]
        return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])

    def transformed(self, R, t=(0.0, 0.0, 0.0)) -> "TriangleMesh":
        """Copy with vertices mapped by ``x -> R x + t``."""
        return TriangleMesh(self.vertices @ np.asarray(R, float).T + np.asarray(t, float), self.faces)


@dataclass
class ReferenceFrame:
    """Origin plus orthonormal axes (columns) with determinant +1."""

    origin: np.ndarray
    axes: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)
        self.axes = np.asarray(self.axes, dtype=float).reshape(3, 3)
        if (np.abs(self.axes.T @ self.axes - np.eye(3)).max() > FRAME_TOL
                or abs(np.linalg.det(self.axes) - 1.0) > FRAME_TOL):
            raise ValueError("frame axes must be a rotation matrix")


# mesh I/O ----------------------------------------------------------------------

def _obj_index(token: str, n_vertices: int) -> int:
    k = int(token.split("/")[0])
    return k - 1 if k > 0 else n_vertices + k


def _read_obj(lines):
    vertices, faces, ignored = [], [], set()
    for lineno, raw in enumerate(lines, 1):
        parts = raw.split("#", 1)[0].split()
        if not parts:
            continue
        key = parts[0]
        try:
            if key == "v":
                vertices.append([float(x) for x in parts[1:4]])
            elif key == "f":
                if len(parts) != 4:
                    raise ValueError(f"only triangular faces are supported ({len(parts) - 1} given)")
                faces.append([_obj_index(t, len(vertices)) for t in parts[1:]])
            else:
                ignored.add(key)
        except (ValueError, IndexError) as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    if ignored:
        warnings.warn(f"ignored OBJ records: {', '.join(sorted(ignored))}", stacklevel=3)
    return vertices, faces


def _read_off(lines):
    rows = [(n, raw.split("#", 1)[0].split()) for n, raw in enumerate(lines, 1)]
    rows = [(n, r) for n, r in rows if r]
    if not rows or not rows[0][1][0].upper().endswith("OFF"):
        raise ValueError("line 1: missing OFF header")
    header = rows[0][1]
    if header[0].upper() != "OFF":
        warnings.warn(f"{header[0]} header: extra per-vertex data ignored", stacklevel=3)
    # counts may share the header line
    rows = ([(rows[0][0], header[1:])] if len(header) > 1 else []) + rows[1:]
    lineno = rows[0][0] if rows else 1
    try:
        nv, nf = int(rows[0][1][0]), int(rows[0][1][1])
        vertices, faces, extra = [], [], False
        for lineno, row in rows[1:1 + nv]:
            vertices.append([float(x) for x in row[:3]])
        for lineno, row in rows[1 + nv:1 + nv + nf]:
            if int(row[0]) != 3:
                raise ValueError(f"only triangular faces are supported ({row[0]} given)")
            faces.append([int(x) for x in row[1:4]])
            extra |= len(row) > 4
    except (ValueError, IndexError) as exc:
        raise ValueError(f"line {lineno}: {exc}") from None
    if len(vertices) != nv or len(faces) != nf:
        raise ValueError(f"OFF header announces {nv} vertices and {nf} faces, "
                         f"found {len(vertices)} and {len(faces)}")
    if extra:
        warnings.warn("ignored per-face colour data in OFF file", stacklevel=3)
    return vertices, faces


def read_mesh(path) -> TriangleMesh:
    """Read a triangle mesh from an ``.off`` or ``.obj`` file.

    Records other than vertices and triangular faces are skipped with a
    :class:`UserWarning`.
    """
    path = Path(path)
    readers = {".obj": _read_obj, ".off": _read_off}
    suffix = path.suffix.lower()
    if suffix not in readers:
        raise ValueError(f"unsupported mesh format {suffix!r} (use .off or .obj)")
    vertices, faces = readers[suffix](path.read_text().splitlines())
    return TriangleMesh(np.array(vertices, dtype=float).reshape(-1, 3),
                        np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_mesh(mesh: TriangleMesh, path) -> None:
    path = Path(path)
    fmt = lambda v: " ".join(repr(float(x)) for x in v)  # noqa: E731
    if path.suffix.lower() == ".obj":
        lines = [f"v {fmt(v)}" for v in mesh.vertices]
        lines += ["f " + " ".join(str(i + 1) for i in f) for f in mesh.faces]
    elif path.suffix.lower() == ".off":
        lines = ["OFF", f"{len(mesh.vertices)} {len(mesh.faces)} 0"]
        lines += [fmt(v) for v in mesh.vertices]
        lines += ["3 " + " ".join(str(i) for i in f) for f in mesh.faces]
    else:
        raise ValueError(f"unsupported mesh format {path.suffix!r} (use .off or .obj)")
    path.write_text("\n".join(lines) + "\n")


# frames and poses -------------------------------------------------------------

def _points(mesh_or_points):
    if isinstance(mesh_or_points, TriangleMesh):
        return mesh_or_points.vertices
    return np.asarray(mesh_or_points, dtype=float).reshape(-1, 3)


def frame_from_pca(mesh, sign_reference: ReferenceFrame | None = None) -> ReferenceFrame:
    """Frame at the vertex centroid with axes along the principal directions.

    Axes are ordered by decreasing variance.  Without a reference each axis
    is signed so that its largest-magnitude entry is positive; with a
    reference each axis is signed to point along the matching reference axis.
    A final flip restores det = +1: of the third axis without a reference,
    otherwise of the axis least aligned with its reference.

    Raises
    ------
    DegenerateSpectrum
        If two principal variances coincide (relative gap below 1e-9) or the
        points are coplanar, so the axes are not well defined.
    """
    X = _points(mesh)
    if len(X) < 4:
        raise ValueError("frame_from_pca needs at least 4 vertices")
    origin = X.mean(axis=0)
    C = (X - origin).T @ (X - origin) / len(X)
    w, V = np.linalg.eigh(C)
    w, V = w[::-1], V[:, ::-1]
    scale = max(w[0], np.finfo(float).tiny)
    if w[2] <= SPECTRAL_GAP * scale:
        raise DegenerateSpectrum("vertices are coplanar")
    gaps = -np.diff(w) / scale
    if np.any(gaps < SPECTRAL_GAP):
        raise DegenerateSpectrum(f"principal variances are (nearly) equal: {w}")
    if sign_reference is None:
        lead = V[np.argmax(np.abs(V), axis=0), np.arange(3)]
        V = V * np.where(lead < 0, -1.0, 1.0)
        if np.linalg.det(V) < 0:
            V[:, 2] *= -1
    else:
        dots = np.einsum("ij,ij->j", V, sign_reference.axes)
        V = V * np.where(dots < 0, -1.0, 1.0)
        if np.linalg.det(V) < 0:
            V[:, np.argmin(np.abs(dots))] *= -1
    return ReferenceFrame(origin, V)


def relative_pose(frame_a: ReferenceFrame, frame_b: ReferenceFrame) -> np.ndarray:
    """SE(3) element ``(O_B O_A^T, o_B - o_A)`` as a 4x4 homogeneous matrix."""
    return SE3.from_rt(frame_b.axes @ frame_a.axes.T, frame_b.origin - frame_a.origin)


# alignment and differential coordinates --------------------------------------------

def _check_same_connectivity(ref: TriangleMesh, other: TriangleMesh, what="mesh"):
    if len(ref.faces) != len(other.faces):
        raise MeshMismatch(f"{what} has {len(other.faces)} faces, reference has {len(ref.faces)}")
    if len(ref.vertices) != len(other.vertices):
        raise MeshMismatch(f"{what} has {len(other.vertices)} vertices, "
                           f"reference has {len(ref.vertices)}")
    if not np.array_equal(ref.faces, other.faces):
        raise MeshMismatch(f"{what} has a different face list than the reference")


def procrustes_align(meshes, reference_index: int = 0) -> list:
    """Rigidly align every mesh to ``meshes[reference_index]`` (no scaling).

    Uses centroid alignment plus the orthogonal Procrustes rotation with a
    determinant correction, so the result is always a proper rotation.

    Raises
    ------
    MeshMismatch
        Meshes do not share vertex count and faces.
    DegenerateConfiguration
        The cross-covariance has rank below 2 (the rotation is not unique).
    """
    meshes = list(meshes)
    ref = meshes[reference_index]
    Y = ref.vertices
    cy = Y.mean(axis=0)
    out = []
    for k, mesh in enumerate(meshes):
        if k == reference_index:
            out.append(mesh)
            continue
        _check_same_connectivity(ref, mesh, f"mesh {k}")
        X = mesh.vertices
        cx = X.mean(axis=0)
        H = (X - cx).T @ (Y - cy)
        U, s, Vt = np.linalg.svd(H)
        if s[1] <= 1e-12 * max(s[0], np.finfo(float).tiny):
            raise DegenerateConfiguration(f"mesh {k}: cross-covariance has rank < 2")
        D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
        R = Vt.T @ D @ U.T
        out.append(TriangleMesh((X - cx) @ R.T + cy, mesh.faces))
    return out


def _face_frames(mesh: TriangleMesh):
    v = mesh.vertices[mesh.faces]
    e1 = v[:, 1] - v[:, 0]
    e2 = v[:, 2] - v[:, 0]
    n = np.cross(e1, e2)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    return np.stack([e1, e2, n], axis=-1)


def differential_coords(reference: TriangleMesh, target: TriangleMesh) -> np.ndarray:
    """Per-face Jacobians of the piecewise-linear map ``reference -> target``.

    Returns an element of ``power(GLPlus(3), n_faces)``: a flat array holding
    the row-major 3x3 matrices face after face.

    Raises
    ------
    MeshMismatch
        Different connectivity.
    OrientationFlip
        Some face Jacobian has det <= 0.
    """
    _check_same_connectivity(reference, target, "target")
    F = _face_frames(reference)
    Fp = _face_frames(target)
    # G F = F'  <=>  F^T G^T = F'^T
    G = np.swapaxes(np.linalg.solve(np.swapaxes(F, -1, -2), np.swapaxes(Fp, -1, -2)), -1, -2)
    dets = np.linalg.det(G)
    bad = np.flatnonzero(~(dets > 0))
    if bad.size:
        raise OrientationFlip(f"face {int(bad[0])} is inverted by the deformation (det {dets[bad[0]]:.3g})")
    return G.reshape(-1)


def diffcoords_group(mesh: TriangleMesh):
    """The group in which :func:`differential_coords` of ``mesh`` lives."""
    return power(GLPlus(3), len(mesh.faces))
