"""The six training losses and their weighted total.

Rendering terms: masked L1 on color and depth.  Geometry terms regularize
the SDF net: Eikonal (unit gradient), surface SDF (zero at ground-truth
depth points), visibility (back-facing normals w.r.t. the canonical view
direction), and smoothness (nearby gradients agree).  Every sum over a set
is implemented as a mean so magnitudes are batch-size invariant.
"""

from dataclasses import dataclass, fields as dc_fields

import torch


class DegenerateBatchError(ValueError):
    """No mask-active rays in the batch."""


class TrainingFault(RuntimeError):
    """A loss component or gradient went non-finite."""


@dataclass
class LossWeights:
    color: float = 1.0
    depth: float = 1.0
    eikonal: float = 0.1
    sdf: float = 1.0
    visible: float = 0.1
    smooth: float = 0.1

    def items(self):
        return [(f.name, getattr(self, f.name)) for f in dc_fields(self)]


@dataclass
class LossReport:
    components: dict
    total: float

    def scalar_components(self):
        return {k: float(v) for k, v in self.components.items()}


def color_loss(pred, gt, mask):
    """Mean over mask-active rays of the per-ray L1 color error."""
    return _masked_l1(pred, gt, mask)


def depth_loss(pred, gt, mask):
    """Mean over mask-active rays of the absolute depth error."""
    return _masked_l1(pred, gt, mask)


def _masked_l1(pred, gt, mask):
    mask = mask.to(pred.dtype)
    n = mask.sum()
    if n.item() == 0:
        raise DegenerateBatchError("all rays masked out")
    err = (pred - gt).abs()
    if err.dim() > 1:
        err = err.sum(dim=-1)
    return (err * mask).sum() / n


def eikonal_loss(sdf_field, points):
    """Mean squared deviation of |grad rho| from 1 over sample points."""
    if points.numel() == 0:
        raise DegenerateBatchError("empty Eikonal sample set")
    g = sdf_field.normal(points, create_graph=torch.is_grad_enabled())
    return ((g.norm(dim=-1) - 1.0) ** 2).mean()


def sdf_surface_loss(fieldset, depth_points, t):
    """Mean |rho| at ground-truth surface points warped to canonical space."""
    if depth_points.numel() == 0:
        raise DegenerateBatchError("empty surface point set")
    rho, _ = fieldset.sdf(fieldset.deformation(depth_points, t))
    return rho.abs().mean()


def visibility_loss(sdf_field, canonical_points, view_dirs):
    """Mean hinge on <grad rho, v_c>; zero when normals face the camera."""
    if canonical_points.numel() == 0:
        raise DegenerateBatchError("empty visibility point set")
    g = sdf_field.normal(canonical_points, create_graph=torch.is_grad_enabled())
    return torch.relu((g * view_dirs).sum(dim=-1)).mean()


def uniform_ball(n, radius=1.0, gen=None, dtype=torch.float32):
    v = torch.randn(n, 3, generator=gen, dtype=dtype)
    v = v / v.norm(dim=-1, keepdim=True)
    r = torch.rand(n, 1, generator=gen, dtype=dtype) ** (1.0 / 3.0)
    return v * r * radius


def smoothness_loss(sdf_field, canonical_points, radius=0.1, gen=None,
                    eps=None):
    """Mean L1 gap between gradients at a point and a ball-perturbed neighbor.

    eps overrides the random perturbation (for tests).
    """
    if canonical_points.numel() == 0:
        raise DegenerateBatchError("empty smoothness point set")
    if eps is None:
        eps = uniform_ball(canonical_points.shape[0], radius, gen,
                           canonical_points.dtype)
    cg = torch.is_grad_enabled()
    g0 = sdf_field.normal(canonical_points, create_graph=cg)
    g1 = sdf_field.normal(canonical_points + eps, create_graph=cg)
    return (g0 - g1).abs().sum(dim=-1).mean()


def total_loss(components, weights: LossWeights):
    """Weighted sum of the named components; raises on NaN, keeps a report."""
    total = None
    vals = {}
    for name, lam in weights.items():
        c = components[name]
        cv = c.detach() if torch.is_tensor(c) else torch.tensor(float(c))
        if not torch.isfinite(cv):
            raise TrainingFault(f"loss component {name!r} is non-finite")
        vals[name] = float(cv)
        term = lam * c
        total = term if total is None else total + term
    report = LossReport(components=vals, total=float(total.detach() if torch.is_tensor(total) else total))
    return total, report
