"""Shared test utilities: finite-difference oracles and engineered fields.

The engineered fields are real network modules whose weights are set by hand
so they compute exact closed-form functions (affine SDFs, linear warps) on
the unit ball.  Hidden pre-activations are shifted by +2 so the relu /
softplus units stay on their linear branch for every test input.
"""

import numpy as np
import torch

from surfrec.fields import (DeformationField, FieldConfig, FieldSet,
                            SdfField)

# Tiny shape shared by the engineered fields: no positional encoding so the
# first layer sees raw coordinates.
TINY_CFG = FieldConfig(depth=2, width=8, skip=(), enc_warp=0, enc_sdf=0)

ACT_SHIFT = 2.0  # keeps hidden pre-activations positive on the unit ball


def make_affine_sdf(n, b, scale=1.0, cfg=TINY_CFG, dtype=torch.float32):
    """SdfField computing rho(x) = scale * <n, x> + b exactly on |x| <~ 1."""
    f = SdfField(cfg)
    n = torch.as_tensor(n, dtype=torch.float32)
    with torch.no_grad():
        l0, l1 = f.mlp.layers
        l0.weight.zero_()
        l0.bias.fill_(ACT_SHIFT)
        l0.weight[0] = n
        l1.weight.zero_()
        l1.bias.fill_(b - scale * ACT_SHIFT)
        l1.weight[0, 0] = scale
    return f.to(dtype) if dtype != torch.float32 else f


def make_linear_deformation(A=None, c=None, cfg=TINY_CFG,
                            dtype=torch.float32):
    """DeformationField computing dx = A x + c exactly on |x| <~ 1.

    A: 3x3 (rows must have norm < ~1 so pre-activations stay positive),
    c: 3-vector; either may be None for zero.
    """
    f = DeformationField(cfg)
    A = torch.zeros(3, 3) if A is None else torch.as_tensor(A, dtype=torch.float32)
    c = torch.zeros(3) if c is None else torch.as_tensor(c, dtype=torch.float32)
    with torch.no_grad():
        l0, l1 = f.mlp.layers
        l0.weight.zero_()
        l0.bias.fill_(ACT_SHIFT)
        l0.weight[:3, :3] = A  # input is (x, t); t column stays zero
        l1.weight.zero_()
        l1.bias.copy_(c - ACT_SHIFT)
        for i in range(3):
            l1.weight[i, i] = 1.0
    return f.to(dtype) if dtype != torch.float32 else f


def make_stub_fieldset(sdf=None, deformation=None, s=None, cfg=TINY_CFG,
                       seed=0):
    """FieldSet with engineered sub-fields swapped in."""
    torch.manual_seed(seed)
    fs = FieldSet(cfg)
    if sdf is not None:
        fs.sdf = sdf
    if deformation is not None:
        fs.deformation = deformation
    if s is not None:
        with torch.no_grad():
            fs.deviation.theta.fill_(float(np.log(s)) / fs.deviation.SCALE)
    return fs


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def fd_input_grad(fn, x, h=1e-5):
    """Central-difference gradient of scalar fn at x ([..., d] tensor)."""
    x = x.detach().clone()
    g = torch.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        fp = float(fn(x).detach())
        flat[i] = orig - h
        fm = float(fn(x).detach())
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def fd_param_grads(loss_fn, params, h=1e-5):
    """Central-difference gradients of loss_fn() w.r.t. each parameter."""
    grads = []
    for p in params:
        g = torch.zeros_like(p)
        flat = p.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            fp = float(loss_fn().detach())
            flat[i] = orig - h
            fm = float(loss_fn().detach())
            flat[i] = orig
            gf[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def max_rel_err(analytic, numeric, floor=1e-6):
    """Elementwise |a - n| / max(|a|, |n|, floor), maximized over all."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = a.detach().double()
        n = n.detach().double()
        denom = torch.maximum(torch.maximum(a.abs(), n.abs()),
                              torch.tensor(floor, dtype=torch.float64))
        worst = max(worst, float(((a - n).abs() / denom).max()))
    return worst
