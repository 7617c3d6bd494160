"""Iso-surface extraction, observed-space mesh sampling, and point-cloud
distance."""

from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial import cKDTree
from skimage import measure


@dataclass
class TriMesh:
    vertices: np.ndarray          # [V, 3] float
    faces: np.ndarray             # [F, 3] int
    normals: np.ndarray = None    # [V, 3] optional
    colors: np.ndarray = None     # [V, 3] optional

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size:
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise ValueError("face index out of range")
            if (self.faces[:, 0] == self.faces[:, 1]).any() or \
               (self.faces[:, 1] == self.faces[:, 2]).any() or \
               (self.faces[:, 0] == self.faces[:, 2]).any():
                raise ValueError("degenerate triangle with repeated indices")

    @property
    def empty(self):
        return len(self.faces) == 0


@dataclass
class GridField:
    resolution: int
    lo: float
    hi: float
    values: np.ndarray  # [R, R, R]

    @property
    def cell_size(self):
        return (self.hi - self.lo) / (self.resolution - 1)


def sample_grid(fieldset, t=None, resolution=128, lo=-1.0, hi=1.0,
                chunk=65536):
    """Evaluate the SDF on a cubic lattice.

    t=None samples the canonical field; with a timestamp the deformation is
    composited in, so the zero-level set lives in observed space at time t.
    """
    axis = np.linspace(lo, hi, resolution)
    X, Y, Z = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.stack([X, Y, Z], axis=-1).reshape(-1, 3)
    vals = np.empty(pts.shape[0], dtype=np.float64)
    dtype = next(fieldset.sdf.parameters()).dtype
    with torch.no_grad():
        for i in range(0, pts.shape[0], chunk):
            p = torch.tensor(pts[i:i + chunk], dtype=dtype)
            if t is not None:
                p = fieldset.deformation(p, t)
            rho, _ = fieldset.sdf(p)
            vals[i:i + chunk] = rho.double().numpy()
    return GridField(resolution=resolution, lo=lo, hi=hi,
                     values=vals.reshape(resolution, resolution, resolution))


def marching_cubes(grid: GridField, iso=0.0):
    """Standard marching cubes with linear edge interpolation.

    Triangle winding is chosen so face normals align with +grad(rho),
    i.e. outward for the positive-outside sign convention.  A grid with no
    zero crossing yields an empty mesh.
    """
    vals = grid.values
    if not np.isfinite(vals).all():
        raise ValueError("grid contains non-finite values")
    if vals.min() > iso or vals.max() < iso:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    cs = grid.cell_size
    verts, faces, normals, _ = measure.marching_cubes(
        vals, level=iso, spacing=(cs, cs, cs), gradient_direction="ascent")
    verts = verts + grid.lo
    # skimage winds triangles against the requested gradient direction, so
    # reverse the order to make cross(v1-v0, v2-v0) point along +grad(rho).
    return TriMesh(vertices=verts, faces=faces[:, ::-1], normals=normals)


def pcd(a, b):
    """Symmetric mean-chamfer distance between two point sets [N,3]/[M,3]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("point cloud distance of an empty set")
    d_ab = cKDTree(b).query(a)[0].mean()
    d_ba = cKDTree(a).query(b)[0].mean()
    return 0.5 * (d_ab + d_ba)


def sample_mesh_points(mesh: TriMesh, n=10000, rng=None):
    """Uniform area-weighted surface samples."""
    if mesh.empty:
        raise ValueError("cannot sample an empty mesh")
    rng = rng or np.random.default_rng(0)
    v = mesh.vertices
    tri = v[mesh.faces]
    areas = 0.5 * np.linalg.norm(
        np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=-1)
    probs = areas / areas.sum()
    idx = rng.choice(len(tri), size=n, p=probs)
    r1, r2 = rng.random(n), rng.random(n)
    su = np.sqrt(r1)
    bary = np.stack([1 - su, su * (1 - r2), su * r2], axis=-1)
    return np.einsum("nk,nkd->nd", bary, tri[idx])


def save_obj(path, mesh: TriMesh):
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]:.8g} {v[1]:.8g} {v[2]:.8g}\n")
        for tri in mesh.faces:
            f.write(f"f {tri[0] + 1} {tri[1] + 1} {tri[2] + 1}\n")


def save_ply(path, mesh: TriMesh):
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(mesh.vertices)}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write(f"element face {len(mesh.faces)}\n")
        f.write("property list uchar int vertex_indices\nend_header\n")
        for v in mesh.vertices:
            f.write(f"{v[0]:.8g} {v[1]:.8g} {v[2]:.8g}\n")
        for tri in mesh.faces:
            f.write(f"3 {tri[0]} {tri[1]} {tri[2]}\n")


def transform_mesh(mesh: TriMesh, scale=1.0, center=(0.0, 0.0, 0.0)):
    """Apply the de-normalization transform (normalized -> scene units)."""
    return TriMesh(vertices=mesh.vertices * scale + np.asarray(center),
                   faces=mesh.faces.copy(), normals=mesh.normals,
                   colors=mesh.colors)
