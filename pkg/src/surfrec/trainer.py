"""Optimization loop: mask-guided ray batching, rendering, loss assembly,
Adam updates with warmup + cosine decay, CSV logging and checkpoints."""

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from . import losses as L
from .autodiff import AdamState, adam_step, grad_params, load_checkpoint, save_checkpoint
from .fields import FieldConfig, FieldSet, canonical_view_dir
from .renderer import RenderConfig, intersect_sphere, render_rays

log = logging.getLogger(__name__)

BOUNDARY_BAND_PX = 5
# Second-order gradients on the uniform-ball Eikonal points dominate CPU
# cost at large batch sizes, so the point count is capped.
EIKONAL_BALL_MAX = 2048
BOUNDARY_WEIGHT = 4.0


@dataclass
class TrainConfig:
    rays_per_batch: int = 1024
    n_coarse: int = 32
    fine_steps: int = 4
    n_fine_per_step: int = 8
    iterations: int = 100000
    lr: float = 0.0005
    warmup_iters: int = 5000
    lr_decay_floor: float = 0.05
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    seed: int = 0
    precision: str = "float32"
    checkpoint_every: int = 10000
    smooth_radius: float = 0.1
    net_depth: int = 8
    net_width: int = 256
    net_skip: int = 4
    deterministic: bool = False

    @classmethod
    def desk_scale(cls, **overrides):
        """CPU-sized preset: small batch, short schedule, slim networks."""
        base = dict(rays_per_batch=256, iterations=5000, warmup_iters=250,
                    checkpoint_every=2500, net_depth=4, net_width=64,
                    net_skip=2)
        base.update(overrides)
        return cls(**base)

    def field_config(self):
        return FieldConfig(depth=self.net_depth, width=self.net_width,
                           skip=(self.net_skip,))

    def render_config(self):
        return RenderConfig(n_coarse=self.n_coarse, fine_steps=self.fine_steps,
                            n_fine_per_step=self.n_fine_per_step)

    def to_json(self):
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        if "weights" in d:
            d["weights"] = L.LossWeights(**d["weights"])
        return cls(**d)


def lr_at(iteration, cfg: TrainConfig):
    """Linear warmup from 0, then cosine decay to lr * lr_decay_floor."""
    if iteration < cfg.warmup_iters:
        return cfg.lr * iteration / cfg.warmup_iters
    span = max(cfg.iterations - cfg.warmup_iters, 1)
    frac = min((iteration - cfg.warmup_iters) / span, 1.0)
    floor = cfg.lr_decay_floor
    return cfg.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * frac)))


# ---------------------------------------------------------------------------
# Mask-guided pixel sampling
# ---------------------------------------------------------------------------

def importance_map(mask):
    """Sampling weights: 0 outside the mask, 1 inside, upweighted near
    excluded regions (within a 5-px dilation band)."""
    mask = np.asarray(mask, dtype=bool)
    w = mask.astype(np.float64)
    if (~mask).any() and mask.any():
        band = ndimage.binary_dilation(~mask, iterations=BOUNDARY_BAND_PX) & mask
        w[band] = BOUNDARY_WEIGHT
    return w


class FrameBatcher:
    """Per-frame ray tensors + importance-weighted pixel sampling."""

    def __init__(self, frame):
        self.frame = frame
        origin, dirs, gt_h = frame.rays()
        H, W = frame.shape
        self.origin = origin
        self.dirs = dirs.reshape(-1, 3)
        self.gt_h = gt_h.reshape(-1)
        self.gt_color = torch.tensor(frame.color.reshape(-1, 3),
                                     dtype=torch.float32)
        w = importance_map(frame.mask).reshape(-1)
        self.active = np.nonzero(w)[0]
        self.probs = w[self.active] / w[self.active].sum() if self.active.size else None

    def sample_pixels(self, n, rng):
        return self.active[rng.choice(self.active.size, size=n, p=self.probs)]


def sample_ray_batch(batchers, n, rng):
    """Pick a random frame, then n pixels with probability proportional to
    the frame's importance map.  Frames with empty masks are skipped."""
    order = rng.permutation(len(batchers))
    for k in order:
        fb = batchers[k]
        if fb.active.size:
            return fb, fb.sample_pixels(n, rng)
        log.warning("frame %d has an empty mask; skipped", fb.frame.index)
    raise L.DegenerateBatchError("every frame has an empty mask")


def build_batch(fb: FrameBatcher, pix):
    """Assemble ray tensors for chosen pixel indices; drops rays that miss
    the bounding sphere."""
    d = fb.dirs[pix]
    o = fb.origin.expand_as(d)
    near, far, hit = intersect_sphere(o, d)
    keep = hit
    return {
        "origins": o[keep], "dirs": d[keep],
        "near": near[keep], "far": far[keep],
        "gt_color": fb.gt_color[pix][keep], "gt_h": fb.gt_h[pix][keep],
        "t": fb.frame.t,
    }


# ---------------------------------------------------------------------------
# Train state / checkpointing
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    iteration: int
    fieldset: FieldSet
    adam: AdamState
    gen: torch.Generator
    rng: np.random.Generator

    def params(self):
        return self.fieldset.param_list()


def init_state(cfg: TrainConfig):
    torch.manual_seed(cfg.seed)
    fieldset = FieldSet(cfg.field_config())
    if cfg.precision == "float64":
        fieldset.double()
    params = fieldset.param_list()
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    rng = np.random.default_rng(cfg.seed + 2)
    return TrainState(iteration=0, fieldset=fieldset,
                      adam=AdamState.initial(params), gen=gen, rng=rng)


def save_state(path, state: TrainState, cfg: TrainConfig):
    arrays = state.fieldset.state_arrays()
    for i, (m, v) in enumerate(zip(state.adam.exp_avg, state.adam.exp_avg_sq)):
        arrays[f"adam.m.{i:04d}"] = m
        arrays[f"adam.v.{i:04d}"] = v
    arrays["rng.torch"] = state.gen.get_state().numpy()
    meta = {
        "iteration": state.iteration,
        "adam_step": state.adam.step,
        "config": asdict(cfg),
        "rng_numpy": state.rng.bit_generator.state,
    }
    save_checkpoint(path, arrays, meta)


def load_state(path):
    arrays, meta = load_checkpoint(path)
    cfg_d = meta["config"]
    cfg_d["weights"] = L.LossWeights(**cfg_d["weights"])
    cfg = TrainConfig(**cfg_d)
    state = init_state(cfg)
    state.fieldset.load_state_arrays(arrays)
    params = state.params()
    state.adam = AdamState.initial(params)
    state.adam.step = int(meta["adam_step"])
    for i, p in enumerate(params):
        state.adam.exp_avg[i] = torch.as_tensor(
            arrays[f"adam.m.{i:04d}"]).to(p.dtype).reshape(p.shape)
        state.adam.exp_avg_sq[i] = torch.as_tensor(
            arrays[f"adam.v.{i:04d}"]).to(p.dtype).reshape(p.shape)
    state.gen.set_state(torch.tensor(arrays["rng.torch"], dtype=torch.uint8))
    state.rng.bit_generator.state = meta["rng_numpy"]
    state.iteration = int(meta["iteration"])
    return state, cfg


# ---------------------------------------------------------------------------
# Steps and loop
# ---------------------------------------------------------------------------

def compute_losses(fieldset, batch, cfg: TrainConfig, gen=None):
    """Render a batch and assemble every loss term of the total objective."""
    fs = fieldset
    t = batch["t"]
    out = render_rays(fs, batch["origins"], batch["dirs"], t,
                      batch["near"], batch["far"], cfg.render_config(),
                      gen=gen, train=True)
    ray_mask = torch.ones(batch["origins"].shape[0],
                          dtype=batch["origins"].dtype)
    comp = {
        "color": L.color_loss(out["color"], batch["gt_color"], ray_mask),
        "depth": L.depth_loss(out["depth"], batch["gt_h"],
                              ray_mask * (batch["gt_h"] > 0)),
    }

    # geometry terms at ground-truth depth points (valid depths only)
    valid = batch["gt_h"] > 0
    p_o = batch["origins"][valid] + batch["gt_h"][valid, None] * batch["dirs"][valid]
    p_c = fs.deformation(p_o, t)
    rho_surf, _ = fs.sdf(p_c)
    comp["sdf"] = rho_surf.abs().mean()
    v_c = canonical_view_dir(fs.deformation, p_o, t, batch["dirs"][valid])
    comp["visible"] = L.visibility_loss(fs.sdf, p_c, v_c)
    comp["smooth"] = L.smoothness_loss(fs.sdf, p_c, cfg.smooth_radius, gen=gen)

    # Eikonal: ray samples in canonical space (gradients already on the
    # tape from rendering) + an equal number of uniform ball points
    n_ray = out["normals"].reshape(-1, 3)
    eik_ray = ((n_ray.norm(dim=-1) - 1.0) ** 2).mean()
    n_ball = min(n_ray.shape[0], EIKONAL_BALL_MAX)
    ball = L.uniform_ball(n_ball, 1.0, gen, batch["origins"].dtype)
    eik_ball = L.eikonal_loss(fs.sdf, ball)
    comp["eikonal"] = 0.5 * (eik_ray + eik_ball)

    return L.total_loss(comp, cfg.weights)


def train_step(state: TrainState, batch, cfg: TrainConfig):
    """Render a batch, assemble the total loss, take one Adam step."""
    total, report = compute_losses(state.fieldset, batch, cfg, gen=state.gen)
    try:
        grads = grad_params(total, state.params())
    except FloatingPointError as e:
        raise L.TrainingFault(f"non-finite gradient at iteration "
                              f"{state.iteration}: {e}") from e
    adam_step(state.adam, state.params(), grads, lr_at(state.iteration, cfg))
    state.iteration += 1
    return report


def train(dataset, cfg: TrainConfig, out_dir, state=None, log_every=50):
    """Run the loop; writes loss.csv, periodic and final checkpoints.

    Returns the final TrainState.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    if state is None:
        state = init_state(cfg)
    batchers = [FrameBatcher(fr) for fr in dataset.frames]
    names = [n for n, _ in cfg.weights.items()]
    mode = "a" if state.iteration else "w"
    with open(out / "loss.csv", mode, newline="") as f:
        w = csv.writer(f)
        if mode == "w":
            w.writerow(["iteration", "lr", "total", *names, "s"])
        while state.iteration < cfg.iterations:
            fb, pix = sample_ray_batch(batchers, cfg.rays_per_batch, state.rng)
            batch = build_batch(fb, pix)
            report = train_step(state, batch, cfg)
            it = state.iteration
            if it % log_every == 0 or it == cfg.iterations:
                s = float(state.fieldset.deviation.s.detach())
                w.writerow([it, f"{lr_at(it - 1, cfg):.6g}",
                            f"{report.total:.6g}",
                            *[f"{report.components[n]:.6g}" for n in names],
                            f"{s:.6g}"])
                f.flush()
            if cfg.checkpoint_every and it % cfg.checkpoint_every == 0 \
                    and it < cfg.iterations:
                save_state(out / f"ckpt_{it:07d}.srfc", state, cfg)
    save_state(out / "final.srfc", state, cfg)
    return state
