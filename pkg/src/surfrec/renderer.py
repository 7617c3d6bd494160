"""Ray generation, hierarchical sampling, and unbiased volume rendering.

Opacity comes from the logistic CDF of the signed distance: alpha over a ray
section is max((phi(rho_front) - phi(rho_back)) / phi(rho_front), 0), which
makes the rendered depth converge to the first zero crossing as the deviation
s shrinks.  Section-front/back SDFs are estimated from the midpoint SDF and
its directional derivative along the ray (exact for locally affine SDFs).
"""

from dataclasses import dataclass

import torch

from .fields import canonical_view_dir

PHI_GUARD = 1e-12
BOUND_RADIUS = 1.0


class RayMissesBounds(ValueError):
    """The pixel ray does not intersect the scene bounding sphere."""


class RenderFault(RuntimeError):
    """A field produced a non-finite output while rendering."""


@dataclass
class RenderConfig:
    n_coarse: int = 32
    fine_steps: int = 4
    n_fine_per_step: int = 8
    up_sample_inv_s: float = 32.0  # sharpening inverse scale, doubles per step

    @property
    def n_total(self):
        return self.n_coarse + self.fine_steps * self.n_fine_per_step


@dataclass
class Ray:
    origin: torch.Tensor     # (3,)
    direction: torch.Tensor  # (3,), unit
    near: float
    far: float
    t: float = 0.0
    pixel: tuple = None


@dataclass
class RaySampleSet:
    h: torch.Tensor       # [N] ascending depths
    x: torch.Tensor       # [N, 3] sample positions (observed space)
    rho: torch.Tensor     # [N]
    color: torch.Tensor   # [N, 3]
    alpha: torch.Tensor   # [N]
    T: torch.Tensor       # [N] transmittance
    weight: torch.Tensor  # [N] = T * alpha


# ---------------------------------------------------------------------------
# Rays
# ---------------------------------------------------------------------------

def intersect_sphere(origins, dirs, radius=BOUND_RADIUS):
    """Ray/sphere intersection interval. Returns (near, far, hit_mask).

    near is clamped to 0 for origins inside the sphere.
    """
    b = (origins * dirs).sum(-1)
    c = (origins * origins).sum(-1) - radius * radius
    disc = b * b - c
    hit = disc > 0
    sq = torch.sqrt(torch.clamp(disc, min=0.0))
    near = torch.clamp(-b - sq, min=0.0)
    far = -b + sq
    hit = hit & (far > 1e-9) & (far > near)
    return near, far, hit


def make_ray(frame, pixel, norm=None):
    """Build the normalized-space ray through a pixel center of a frame.

    `frame` must expose `rays()` (see data.Frame).  Raises RayMissesBounds
    when the ray does not cross the unit bounding sphere.
    """
    origin, dirs, _ = frame.rays()
    i, j = pixel
    d = dirs[i, j]
    o = origin
    near, far, hit = intersect_sphere(o[None], d[None])
    if not bool(hit[0]):
        raise RayMissesBounds(f"pixel {pixel} misses the bounding sphere")
    return Ray(origin=o, direction=d, near=float(near[0]), far=float(far[0]),
               t=frame.t, pixel=(i, j))


# ---------------------------------------------------------------------------
# Opacity primitives
# ---------------------------------------------------------------------------

def phi(rho, s):
    """Logistic CDF of the signed distance, (1 + exp(-rho/s))^-1."""
    if not torch.is_tensor(rho):
        rho = torch.tensor(float(rho))
    return torch.sigmoid(rho / s)


def alpha(rho_front, rho_back, s):
    """Section opacity max((phi(front) - phi(back)) / phi(front), 0)."""
    pf = phi(rho_front, s)
    pb = phi(rho_back, s)
    a = torch.clamp((pf - pb) / torch.clamp(pf, min=PHI_GUARD), min=0.0)
    return torch.where(pf < PHI_GUARD, torch.zeros_like(a), a)


def transmittance(alphas):
    """T_i = prod_{j<i} (1 - alpha_j) along the last dim."""
    shifted = torch.cat([torch.ones_like(alphas[..., :1]),
                         (1.0 - alphas[..., :-1])], dim=-1)
    return torch.cumprod(shifted, dim=-1)


def composite(colors, depths, alphas):
    """Weighted sums C = sum T a c, D = sum T a h; also returns sum of weights.

    colors: [..., N, 3]; depths/alphas: [..., N].
    """
    T = transmittance(alphas)
    w = T * alphas
    C = (w.unsqueeze(-1) * colors).sum(dim=-2)
    D = (w * depths).sum(dim=-1)
    return C, D, w.sum(dim=-1)


# ---------------------------------------------------------------------------
# Hierarchical sampling
# ---------------------------------------------------------------------------

def _sample_pdf(bins, weights, n_samples, gen=None):
    """Inverse-CDF draw of n_samples depths from per-interval weights.

    bins: [B, N]; weights: [B, N-1].  Deterministic (stratum midpoints) when
    gen is None.
    """
    weights = weights + 1e-5
    pdf = weights / weights.sum(dim=-1, keepdim=True)
    cdf = torch.cumsum(pdf, dim=-1)
    cdf = torch.cat([torch.zeros_like(cdf[..., :1]), cdf], dim=-1)
    if gen is None:
        u = torch.linspace(0.5 / n_samples, 1.0 - 0.5 / n_samples, n_samples,
                           dtype=bins.dtype)
        u = u.expand(*bins.shape[:-1], n_samples)
    else:
        u = torch.rand(*bins.shape[:-1], n_samples, generator=gen,
                       dtype=bins.dtype)
    u = u.contiguous()
    idx = torch.searchsorted(cdf, u, right=True)
    below = torch.clamp(idx - 1, min=0)
    above = torch.clamp(idx, max=cdf.shape[-1] - 1)
    cdf_lo = torch.gather(cdf, -1, below)
    cdf_hi = torch.gather(cdf, -1, above)
    bin_lo = torch.gather(bins, -1, torch.clamp(below, max=bins.shape[-1] - 1))
    bin_hi = torch.gather(bins, -1, torch.clamp(above, max=bins.shape[-1] - 1))
    denom = torch.where(cdf_hi - cdf_lo < 1e-9, torch.ones_like(cdf_lo),
                        cdf_hi - cdf_lo)
    frac = (u - cdf_lo) / denom
    return bin_lo + frac * (bin_hi - bin_lo)


def _coarse_depths(near, far, n, gen=None):
    """Stratified coarse depths; midpoints when gen is None."""
    B = near.shape[0]
    if gen is None:
        u = torch.full((B, n), 0.5, dtype=near.dtype)
    else:
        u = torch.rand(B, n, generator=gen, dtype=near.dtype)
    steps = (torch.arange(n, dtype=near.dtype) + u) / n
    return near[:, None] + (far - near)[:, None] * steps


def sample_depths(fieldset, origins, dirs, t, near, far, cfg: RenderConfig,
                  gen=None):
    """Hierarchical depth sampling along a ray batch.

    Coarse stratified depths, then `fine_steps` importance rounds drawing
    from alpha weights computed with fixed sharpening deviations
    1 / (up_sample_inv_s * 2^k).  Field queries run without grad.
    """
    z = _coarse_depths(near, far, cfg.n_coarse, gen)
    if cfg.fine_steps == 0:
        return z
    with torch.no_grad():
        rho = _sdf_at(fieldset, origins, dirs, z, t)
        for k in range(cfg.fine_steps):
            s_k = 1.0 / (cfg.up_sample_inv_s * (2.0 ** k))
            a = alpha(rho[..., :-1], rho[..., 1:], s_k)
            w = transmittance(a) * a
            z_new = _sample_pdf(z, w, cfg.n_fine_per_step, gen)
            rho_new = _sdf_at(fieldset, origins, dirs, z_new, t)
            z = torch.cat([z, z_new], dim=-1)
            rho = torch.cat([rho, rho_new], dim=-1)
            z, order = torch.sort(z, dim=-1)
            rho = torch.gather(rho, -1, order)
    return z


def _sdf_at(fieldset, origins, dirs, z, t):
    pts = origins[:, None, :] + dirs[:, None, :] * z[..., None]
    flat = pts.reshape(-1, 3)
    xc = fieldset.deformation(flat, t)
    rho, _ = fieldset.sdf(xc)
    return rho.reshape(z.shape)


def dedup_depths(h, tol=1e-9):
    """Drop later entries of ascending-depth pairs closer than tol (1D)."""
    keep = torch.ones_like(h, dtype=torch.bool)
    keep[1:] = (h[1:] - h[:-1]) > tol
    return h[keep]


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def render_rays(fieldset, origins, dirs, t, near, far, cfg: RenderConfig = None,
                gen=None, train=True, s_override=None):
    """Render a ray batch; returns a dict of per-ray and per-sample tensors.

    origins/dirs: [B, 3] (dirs unit); near/far: [B].  gen=None gives
    deterministic midpoint sampling.  All per-sample tensors keep the graph
    when train=True.
    """
    cfg = cfg or RenderConfig()
    z = sample_depths(fieldset, origins, dirs, t, near, far, cfg, gen)
    n = z.shape[-1]
    dists = torch.cat([z[..., 1:] - z[..., :-1],
                       ((far - near) / n)[:, None]], dim=-1)
    h = z + 0.5 * dists  # section midpoints; the actual sample depths
    pts = (origins[:, None, :] + dirs[:, None, :] * h[..., None]).reshape(-1, 3)
    B = origins.shape[0]

    with torch.enable_grad():
        pts = pts.detach().requires_grad_(True)
        xc = fieldset.deformation(pts, t)
        rho, feat = fieldset.sdf(xc)
        n_c = torch.autograd.grad(rho, xc, torch.ones_like(rho),
                                  create_graph=train)[0]
        jac = fieldset.deformation.jacobian(pts, t, create_graph=train)
    if not train:
        rho, feat, n_c, jac = (v.detach() for v in (rho, feat, n_c, jac))
        xc = xc.detach()

    v_flat = dirs[:, None, :].expand(B, n, 3).reshape(-1, 3)
    v_c = canonical_view_dir(fieldset.deformation, pts, t, v_flat,
                             create_graph=train, jac=jac)
    colors = fieldset.radiance(xc, v_c, n_c, feat)

    # directional derivative of rho along the ray, for section-end estimates
    n_o = torch.einsum("nij,ni->nj", jac, n_c) + n_c  # (I + J)^T n_c
    cos = torch.clamp((n_o * v_flat).sum(-1), max=0.0).reshape(B, n)
    rho_b = rho.reshape(B, n)
    s = s_override if s_override is not None else fieldset.deviation.s
    half = 0.5 * dists
    a = alpha(rho_b - cos * half, rho_b + cos * half, s)

    C, D, acc = composite(colors.reshape(B, n, 3), h, a)
    if not (torch.isfinite(C).all() and torch.isfinite(D).all()):
        bad = (~torch.isfinite(C).all(dim=-1) | ~torch.isfinite(D)).nonzero()
        raise RenderFault(f"non-finite render output for rays {bad.flatten().tolist()}")
    return {
        "color": C, "depth": D, "acc": acc,
        "h": h, "alpha": a, "weights": transmittance(a) * a,
        "rho": rho_b, "points": pts.reshape(B, n, 3),
        "canonical": xc.reshape(B, n, 3), "normals": n_c.reshape(B, n, 3),
        "normals_observed": n_o.reshape(B, n, 3),
        "view_canonical": v_c.reshape(B, n, 3),
        "sample_colors": colors.reshape(B, n, 3),
    }


def render_frame(fieldset, frame, cfg: RenderConfig = None, chunk=4096):
    """Deterministically render every mask-active pixel of a frame.

    Returns numpy images: color [H,W,3], depth [H,W] (along-ray, normalized
    units), normal [H,W,3] (observed-space, unit where defined), acc [H,W].
    Pixels outside the mask, or whose rays miss the bounding sphere, stay 0.
    """
    cfg = cfg or RenderConfig()
    dtype = next(fieldset.sdf.parameters()).dtype
    origin, dirs, _ = frame.rays()
    H, W = frame.shape
    mask = torch.tensor(frame.mask.reshape(-1), dtype=torch.bool)
    d_all = dirs.reshape(-1, 3).to(dtype)
    o_all = origin.to(dtype).expand_as(d_all)
    near, far, hit = intersect_sphere(o_all, d_all)
    sel = (mask & hit).nonzero().flatten()
    color = torch.zeros(H * W, 3)
    depth = torch.zeros(H * W)
    normal = torch.zeros(H * W, 3)
    acc = torch.zeros(H * W)
    for i in range(0, sel.numel(), chunk):
        idx = sel[i:i + chunk]
        out = render_rays(fieldset, o_all[idx], d_all[idx], frame.t,
                          near[idx], far[idx], cfg, gen=None, train=False)
        color[idx] = out["color"].detach()
        depth[idx] = out["depth"].detach()
        acc[idx] = out["acc"].detach()
        n = (out["weights"][..., None] * out["normals_observed"]).sum(dim=-2)
        nn = n.norm(dim=-1, keepdim=True)
        normal[idx] = (n / torch.clamp(nn, min=1e-9)).detach()
    return {"color": color.reshape(H, W, 3).numpy(),
            "depth": depth.reshape(H, W).numpy(),
            "normal": normal.reshape(H, W, 3).numpy(),
            "acc": acc.reshape(H, W).numpy()}


def sample_ray(fieldset, ray: Ray, cfg: RenderConfig = None, gen=None):
    """Full sample set for a single ray (deterministic unless gen given)."""
    cfg = cfg or RenderConfig()
    out = render_rays(fieldset,
                      ray.origin[None], ray.direction[None], ray.t,
                      torch.tensor([ray.near]), torch.tensor([ray.far]),
                      cfg, gen=gen, train=False)
    h = out["h"][0]
    keep = torch.ones_like(h, dtype=torch.bool)
    keep[1:] = (h[1:] - h[:-1]) > 1e-9
    T = transmittance(out["alpha"])[0]
    return RaySampleSet(h=h[keep], x=out["points"][0][keep],
                        rho=out["rho"][0][keep],
                        color=out["sample_colors"][0][keep],
                        alpha=out["alpha"][0][keep], T=T[keep],
                        weight=out["weights"][0][keep])


def render_ray(fieldset, ray: Ray, cfg: RenderConfig = None, gen=None,
               s_override=None):
    """Color and depth of one ray."""
    out = render_rays(fieldset,
                      ray.origin[None], ray.direction[None], ray.t,
                      torch.tensor([ray.near]), torch.tensor([ray.far]),
                      cfg, gen=gen, train=False, s_override=s_override)
    return out["color"][0], out["depth"][0]
