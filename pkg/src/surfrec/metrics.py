"""Quantitative evaluation: PSNR, masked SSIM, masked depth RMSE, and the
mesh point-cloud-distance harness over held-out frames."""

import csv
import json
import math
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .geometry import marching_cubes, pcd, sample_grid, sample_mesh_points
from .renderer import RenderConfig, render_frame

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
LUMA = np.array([0.299, 0.587, 0.114])


class MetricError(ValueError):
    pass


def psnr(pred, gt, mask):
    """Masked peak-signal-to-noise ratio in dB (peak = 1).

    Zero masked MSE reports math.inf.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise MetricError("empty mask")
    err = (np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64))
    mse = (err[mask] ** 2).mean()
    if mse == 0:
        return math.inf
    return -10.0 * math.log10(mse)


def _gaussian_kernel():
    r = SSIM_WINDOW // 2
    x = np.arange(-r, r + 1)
    g = np.exp(-(x ** 2) / (2 * SSIM_SIGMA ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def _to_luma(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img @ LUMA
    return img


def ssim(pred, gt, mask):
    """Masked SSIM on luma: 11x11 Gaussian window (sigma 1.5), K1=0.01,
    K2=0.03, dynamic range 1, averaged over windows fully inside the mask."""
    mask = np.asarray(mask, dtype=bool)
    x, y = _to_luma(pred), _to_luma(gt)
    r = SSIM_WINDOW // 2
    valid = ndimage.minimum_filter(mask.astype(np.uint8), size=SSIM_WINDOW,
                                   mode="constant", cval=0).astype(bool)
    # windows touching the image border are never fully inside
    valid[:r, :] = valid[-r:, :] = False
    valid[:, :r] = valid[:, -r:] = False
    if not valid.any():
        raise MetricError("mask too small for one SSIM window")
    k = _gaussian_kernel()
    conv = lambda im: ndimage.convolve(im, k, mode="constant", cval=0.0)
    mu_x, mu_y = conv(x), conv(y)
    sxx = conv(x * x) - mu_x ** 2
    syy = conv(y * y) - mu_y ** 2
    sxy = conv(x * y) - mu_x * mu_y
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return float((num[valid] / den[valid]).mean())


def depth_rmse(pred, gt, mask):
    """Masked RMSE between depth maps, in the maps' own units."""
    mask = np.asarray(mask, dtype=bool) & (np.asarray(gt) > 0)
    if not mask.any():
        raise MetricError("no mask-active pixels with valid depth")
    err = np.asarray(pred, dtype=np.float64)[mask] - np.asarray(gt, dtype=np.float64)[mask]
    return float(np.sqrt((err ** 2).mean()))


def split_dataset(dataset):
    """Deterministic 7:1 split: every 8th frame (index % 8 == 7) is test."""
    train = [f for f in dataset.frames if f.index % 8 != 7]
    test = [f for f in dataset.frames if f.index % 8 == 7]
    return train, test


def evaluate(fieldset, dataset, rcfg: RenderConfig = None, split="test",
             out_dir=None, mesh_resolution=64, mesh_points=10000,
             chunk=4096):
    """Render every frame of the split deterministically and compute all
    metrics plus the mesh PCD.  Returns per-frame rows + averages; writes
    CSV/JSON when out_dir is given."""
    rcfg = rcfg or RenderConfig()
    train, test = split_dataset(dataset)
    frames = {"test": test, "train": train, "all": dataset.frames}[split]
    if not frames:
        raise MetricError(f"split {split!r} is empty")
    scale = dataset.norm.scale
    rows = []
    for fr in frames:
        out = render_frame(fieldset, fr, rcfg, chunk=chunk)
        mask = fr.mask
        row = {
            "frame": fr.index,
            "psnr": psnr(out["color"], fr.color, mask),
            "ssim": ssim(out["color"], fr.color, mask),
            "rmse": depth_rmse(out["depth"] * scale, fr.depth, mask),
        }
        row["rmse_mm"] = row["rmse"] * dataset.mm_per_unit
        grid = sample_grid(fieldset, t=fr.t, resolution=mesh_resolution)
        mesh = marching_cubes(grid)
        if mesh.empty:
            row["pcd"] = math.inf
        else:
            mp = sample_mesh_points(mesh, mesh_points,
                                    np.random.default_rng(fr.index))
            # the GT cloud only covers camera-visible pixels, so restrict
            # the mesh samples to the visible, unoccluded surface before
            # taking the symmetric chamfer
            margin = 3.0 * 2.0 / (mesh_resolution - 1)
            mp = mp[_visible_points(mp, fr, margin)]
            if len(mp) == 0:
                row["pcd"] = math.inf
            else:
                row["pcd"] = pcd(mp, _gt_points(fr)) * scale
        row["pcd_mm"] = row["pcd"] * dataset.mm_per_unit
        rows.append(row)
    avg = {"frame": "average"}
    for k in ("psnr", "ssim", "rmse", "rmse_mm", "pcd", "pcd_mm"):
        avg[k] = float(np.mean([r[k] for r in rows]))
    report = {"split": split, "frames": rows, "average": avg,
              "lpips": None}  # perceptual metric intentionally absent
    if out_dir is not None:
        _write_report(Path(out_dir), report)
    return report


def _visible_points(points, frame, margin):
    """Boolean mask of normalized-space points that project onto mask-active
    pixels with valid depth and are not occluded (along-ray distance within
    margin of the ground-truth depth)."""
    from .data import camera_center, project

    Pn = frame.norm.normalized_projection(frame.P)
    u, v, w = project(Pn, points)
    H, W = frame.shape
    cols = np.floor(u).astype(np.int64)
    rows = np.floor(v).astype(np.int64)
    ok = (w > 0) & (cols >= 0) & (cols < W) & (rows >= 0) & (rows < H)
    cols_c, rows_c = cols.clip(0, W - 1), rows.clip(0, H - 1)
    ok &= frame.mask[rows_c, cols_c] & (frame.depth[rows_c, cols_c] > 0)
    h = np.linalg.norm(points - camera_center(Pn), axis=-1)
    gt_h = frame.depth[rows_c, cols_c] / frame.norm.scale
    ok &= h <= gt_h + margin
    return ok


def _gt_points(frame):
    ok = frame.mask & (frame.depth > 0)
    origin, dirs, gt_h = frame.rays()
    o = origin.numpy()
    d = dirs.numpy()[ok]
    return o + gt_h.numpy()[ok][:, None] * d


def _write_report(out, report):
    out.mkdir(parents=True, exist_ok=True)
    cols = ["frame", "psnr", "ssim", "rmse", "rmse_mm", "pcd", "pcd_mm"]
    with open(out / "metrics.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for r in report["frames"] + [report["average"]]:
            w.writerow([r[c] for c in cols])
    (out / "metrics.json").write_text(
        json.dumps(report, indent=1, sort_keys=True, default=str))
