"""Dataset ingestion, unit-sphere normalization, back-projection, and the
synthetic-scene generator used as ground-truth oracle.

Dataset layout (one directory):
    color_%04d.png   8-bit RGB
    depth_%04d.bin   header: two uint32 LE (H, W), then H*W float32 LE,
                     row-major.  Depth = Euclidean distance from the camera
                     center along the pixel ray, in scene units; 0 = invalid.
    mask_%04d.png    8-bit, >=128 means foreground
    meta.json        per-frame 4x4 projection (row-major), mm-per-unit scale,
                     and the scene normalization (center + scale).
"""

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

TARGET_RADIUS = 0.9


class DatasetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Camera math (generic 4x4 projection: pixel_hom = P @ [X, 1])
# ---------------------------------------------------------------------------

def camera_center(P):
    M = P[:3, :3]
    return -np.linalg.solve(M, P[:3, 3])


def pixel_directions(P, us, vs):
    """Unit world-space directions through pixel coords (u, v)."""
    M = P[:3, :3]
    uv1 = np.stack([us, vs, np.ones_like(us)], axis=-1)
    d = np.einsum("ij,...j->...i", np.linalg.inv(M), uv1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def project(P, X):
    """World point(s) -> (u, v, w). w > 0 means in front of the camera."""
    Xh = np.concatenate([X, np.ones_like(X[..., :1])], axis=-1)
    ph = np.einsum("ij,...j->...i", P, Xh)
    return ph[..., 0] / ph[..., 2], ph[..., 1] / ph[..., 2], ph[..., 2]


@dataclass
class SceneNormalization:
    center: np.ndarray  # (3,) scene units
    scale: float        # scene units per normalized unit

    def to_normalized(self, X):
        return (X - self.center) / self.scale

    def to_scene(self, Xn):
        return Xn * self.scale + self.center

    def normalized_projection(self, P):
        T = np.eye(4)
        T[:3, :3] *= self.scale
        T[:3, 3] = self.center
        return P @ T


@dataclass
class Frame:
    color: np.ndarray   # [H, W, 3] float32 in [0, 1]
    depth: np.ndarray   # [H, W] float32, scene units, 0 = invalid
    mask: np.ndarray    # [H, W] bool
    P: np.ndarray       # [4, 4] projection, scene units
    t: float
    index: int = 0
    norm: SceneNormalization = None
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def shape(self):
        return self.depth.shape

    def rays(self):
        """(origin [3], dirs [H,W,3], gt_h [H,W]) in normalized space.

        gt_h is the along-ray ground-truth depth (0 where invalid).  Cached
        torch float32 tensors.
        """
        if "rays" not in self._cache:
            Pn = self.norm.normalized_projection(self.P)
            H, W = self.shape
            vs, us = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5,
                                 indexing="ij")
            dirs = pixel_directions(Pn, us, vs)
            origin = camera_center(Pn)
            gt_h = self.depth / self.norm.scale
            self._cache["rays"] = (
                torch.tensor(origin, dtype=torch.float32),
                torch.tensor(dirs, dtype=torch.float32),
                torch.tensor(gt_h, dtype=torch.float32))
        return self._cache["rays"]

    def backproject(self, pixel):
        """Pixel with valid depth -> 3D point in normalized scene units."""
        i, j = pixel
        d = self.depth[i, j]
        if d <= 0:
            raise DatasetError(f"invalid depth at pixel {pixel}")
        Pn = self.norm.normalized_projection(self.P)
        dir_n = pixel_directions(Pn, np.array(j + 0.5), np.array(i + 0.5))
        return camera_center(Pn) + (d / self.norm.scale) * dir_n


def backproject(frame, pixel):
    return frame.backproject(pixel)


@dataclass
class Dataset:
    frames: list
    norm: SceneNormalization
    mm_per_unit: float = 1.0
    path: str = None

    def __len__(self):
        return len(self.frames)


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------

def _write_depth(path, depth):
    depth = np.asarray(depth, dtype="<f4")
    with open(path, "wb") as f:
        f.write(struct.pack("<II", *depth.shape))
        f.write(depth.tobytes())


def _read_depth(path):
    with open(path, "rb") as f:
        H, W = struct.unpack("<II", f.read(8))
        buf = f.read(H * W * 4)
    return np.frombuffer(buf, dtype="<f4").reshape(H, W).copy()


def save_dataset(frames, out_dir, mm_per_unit=1.0, norm=None):
    """Write frames (+ optional precomputed normalization) to out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"format_version": 1, "depth_convention": "ray_distance",
            "mm_per_unit": mm_per_unit, "frames": []}
    for i, fr in enumerate(frames):
        names = {"color": f"color_{i:04d}.png", "depth": f"depth_{i:04d}.bin",
                 "mask": f"mask_{i:04d}.png"}
        Image.fromarray(np.clip(fr.color * 255.0 + 0.5, 0, 255)
                        .astype(np.uint8)).save(out / names["color"])
        _write_depth(out / names["depth"], fr.depth)
        Image.fromarray((fr.mask.astype(np.uint8)) * 255).save(out / names["mask"])
        meta["frames"].append({**names, "P": fr.P.reshape(-1).tolist()})
    if norm is not None:
        meta["normalization"] = {"center": norm.center.tolist(),
                                 "scale": float(norm.scale)}
    (out / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def load_dataset(path):
    """Load a dataset directory; timestamps are assigned t_i = i/T (1-based).

    Normalization is read from meta.json if present, otherwise computed from
    the union of mask-active back-projected depth points so the farthest one
    lands at radius TARGET_RADIUS.
    """
    root = Path(path)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise DatasetError(f"{root}: missing meta.json")
    meta = json.loads(meta_path.read_text())
    frames = []
    T = len(meta["frames"])
    if T == 0:
        raise DatasetError(f"{root}: empty dataset")
    for i, fm in enumerate(meta["frames"]):
        try:
            color = np.asarray(Image.open(root / fm["color"]),
                               dtype=np.float32) / 255.0
            depth = _read_depth(root / fm["depth"])
            mask = np.asarray(Image.open(root / fm["mask"])) >= 128
        except FileNotFoundError as e:
            raise DatasetError(f"frame {i}: missing file {e.filename}") from e
        P = np.array(fm["P"], dtype=np.float64).reshape(4, 4)
        if abs(np.linalg.det(P[:3, :3])) < 1e-12:
            raise DatasetError(f"frame {i}: non-invertible projection")
        if color.shape[:2] != depth.shape or mask.shape != depth.shape:
            raise DatasetError(f"frame {i}: shape mismatch")
        frames.append(Frame(color=color[..., :3], depth=depth, mask=mask,
                            P=P, t=(i + 1) / T, index=i))
    if "normalization" in meta:
        nm = meta["normalization"]
        norm = SceneNormalization(np.array(nm["center"], dtype=np.float64),
                                  float(nm["scale"]))
    else:
        norm = compute_normalization(frames)
    for fr in frames:
        fr.norm = norm
    return Dataset(frames=frames, norm=norm,
                   mm_per_unit=float(meta.get("mm_per_unit", 1.0)),
                   path=str(root))


def compute_normalization(frames, target_radius=TARGET_RADIUS):
    """Center/scale so all mask-active depth points fit in target_radius."""
    pts = []
    for fr in frames:
        ok = fr.mask & (fr.depth > 0)
        if not ok.any():
            continue
        vs, us = np.nonzero(ok)
        dirs = pixel_directions(fr.P, us + 0.5, vs + 0.5)
        pts.append(camera_center(fr.P) + fr.depth[ok][:, None] * dirs)
    if not pts:
        raise DatasetError("no mask-active depth points in any frame")
    pts = np.concatenate(pts, axis=0)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    center = 0.5 * (lo + hi)
    radius = np.linalg.norm(pts - center, axis=-1).max()
    return SceneNormalization(center=center, scale=radius / target_radius)


# ---------------------------------------------------------------------------
# Synthetic scenes (analytic oracle)
# ---------------------------------------------------------------------------

@dataclass
class SyntheticScene:
    kind: str = "static-sphere"  # static-sphere | translating-sphere | bulging-plane
    n_frames: int = 24
    res: int = 64
    sphere_radius: float = 0.5
    translation_amp: float = 0.12
    bump_amp: float = 0.18
    bump_sigma: float = 0.35
    plane_z: float = 0.4
    cam_dist: float = 2.0
    half_tan: float = 0.38
    tool_mask: bool = False

    def translation(self, t):
        if self.kind != "translating-sphere":
            return np.zeros(3)
        a = self.translation_amp
        return np.array([a * math.sin(2 * math.pi * t),
                         0.5 * a * (math.cos(2 * math.pi * t) - 1.0), 0.0])

    def _bump(self, x, y, t):
        a = self.bump_amp * math.sin(math.pi * t) if self.kind == "bulging-plane" else 0.0
        return a * np.exp(-(x * x + y * y) / (2 * self.bump_sigma ** 2))

    def sdf(self, p, t):
        """Signed distance (positive on the camera side), vectorized [N,3]."""
        p = np.atleast_2d(p)
        if self.kind in ("static-sphere", "translating-sphere"):
            c = self.translation(t)
            return np.linalg.norm(p - c, axis=-1) - self.sphere_radius
        # camera at -z; positive for z below the surface sheet
        return (self.plane_z - self._bump(p[..., 0], p[..., 1], t)) - p[..., 2]

    def sdf_lipschitz(self):
        if self.kind == "bulging-plane":
            gmax = self.bump_amp * math.exp(-0.5) / self.bump_sigma
            return math.sqrt(1.0 + gmax * gmax)
        return 1.0

    def normal(self, p, t):
        """Unit gradient of the SDF at p."""
        p = np.atleast_2d(p)
        if self.kind in ("static-sphere", "translating-sphere"):
            d = p - self.translation(t)
            return d / np.linalg.norm(d, axis=-1, keepdims=True)
        s2 = self.bump_sigma ** 2
        b = self._bump(p[..., 0], p[..., 1], t)
        gx = b * p[..., 0] / s2
        gy = b * p[..., 1] / s2
        g = np.stack([gx, gy, -np.ones_like(gx)], axis=-1)
        return g / np.linalg.norm(g, axis=-1, keepdims=True)

    def to_canonical(self, p, t):
        """True observed->canonical warp (inverse of the deformation program)."""
        p = np.atleast_2d(p)
        if self.kind == "translating-sphere":
            return p - self.translation(t)
        if self.kind == "bulging-plane":
            q = p.copy()
            q[..., 2] = q[..., 2] + self._bump(p[..., 0], p[..., 1], t)
            return q
        return p

    def true_displacement(self, p, t):
        return self.to_canonical(p, t) - np.atleast_2d(p)

    def albedo(self, pc):
        """Lambertian albedo, anchored to canonical surface points."""
        pc = np.atleast_2d(pc)
        r = 0.55 + 0.35 * np.sin(9.0 * pc[..., 0]) * np.cos(7.0 * pc[..., 1])
        g = 0.45 + 0.25 * np.sin(6.0 * pc[..., 1] + 1.0)
        b = 0.50 + 0.30 * np.cos(8.0 * pc[..., 0] + 5.0 * pc[..., 2])
        return np.clip(np.stack([r, g, b], axis=-1), 0.0, 1.0)

    def projection(self):
        """Pinhole camera at (0,0,-cam_dist) looking toward +z."""
        f = 0.5 * self.res / self.half_tan
        K = np.array([[f, 0, self.res / 2.0], [0, f, self.res / 2.0],
                      [0, 0, 1.0]])
        E = np.eye(4)
        E[2, 3] = self.cam_dist  # world -> camera: z_cam = z + cam_dist
        P = np.eye(4)
        P[:3, :3] = K
        return P @ E


def sphere_trace(scene, origins, dirs, t, max_steps=128, eps=1e-5, h_max=6.0):
    """First-hit distance along unit rays; NaN where the ray misses."""
    lip = scene.sdf_lipschitz()
    h = np.zeros(origins.shape[0])
    alive = np.ones(origins.shape[0], dtype=bool)
    hit = np.zeros(origins.shape[0], dtype=bool)
    for _ in range(max_steps):
        if not alive.any():
            break
        p = origins[alive] + h[alive, None] * dirs[alive]
        d = scene.sdf(p, t) / lip
        conv = d < eps
        idx = np.nonzero(alive)[0]
        hit[idx[conv]] = True
        h[alive] += np.maximum(d, 0.0)
        still = ~conv & (h[alive] < h_max)
        alive[idx[~still]] = False
    # refine converged hits with a few bisection-free Newton steps
    out = np.where(hit, h, np.nan)
    return out, hit


def generate_synthetic(scene: SyntheticScene, out_dir=None):
    """Render the analytic scene to frames (and optionally to disk).

    Color is Lambertian shading under a headlight; depth is the first-hit
    ray distance; masks cover every hit pixel (minus optional synthetic tool
    bands).  Raises on sphere-tracing non-convergence over 0.1% of expected
    foreground pixels.
    """
    P = scene.projection()
    C = camera_center(P)
    H = W = scene.res
    vs, us = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
    dirs = pixel_directions(P, us, vs).reshape(-1, 3)
    origins = np.broadcast_to(C, dirs.shape)
    frames = []
    T = scene.n_frames
    for i in range(T):
        t = (i + 1) / T
        h, hit = sphere_trace(scene, origins, dirs, t)
        pts = origins[hit] + h[hit, None] * dirs[hit]
        resid = np.abs(scene.sdf(pts, t))
        if (resid > 1e-4).sum() > max(1, 0.001 * hit.sum()):
            raise DatasetError("sphere tracing failed to converge")
        n = scene.normal(pts, t)
        l = -dirs[hit]
        lambert = np.clip((n * l).sum(-1), 0.0, 1.0)
        alb = scene.albedo(scene.to_canonical(pts, t))
        color = np.zeros((H * W, 3), dtype=np.float32)
        color[hit] = np.clip(alb * (0.25 + 0.75 * lambert[:, None]), 0, 1)
        depth = np.zeros(H * W, dtype=np.float32)
        depth[hit] = h[hit]
        mask = hit.reshape(H, W).copy()
        if scene.tool_mask:
            j0 = int((0.2 + 0.5 * ((i + 1) / T)) * W)
            mask[:, j0:j0 + max(2, W // 10)] = False
        frames.append(Frame(color=color.reshape(H, W, 3),
                            depth=depth.reshape(H, W),
                            mask=mask, P=P.copy(), t=t, index=i))
    norm = compute_normalization(frames)
    for fr in frames:
        fr.norm = norm
    if out_dir is not None:
        save_dataset(frames, out_dir, mm_per_unit=1.0, norm=norm)
    return Dataset(frames=frames, norm=norm, mm_per_unit=1.0,
                   path=str(out_dir) if out_dir else None)


SCENE_PRESETS = {
    "static-sphere": dict(kind="static-sphere"),
    "translating-sphere": dict(kind="translating-sphere"),
    "bulging-plane": dict(kind="bulging-plane"),
}
