"""Differentiable-computation core.

MLPs with skip connections, positional encoding, nested gradient queries and a
hand-rolled Adam step, all on top of torch's reverse-mode tape (CPU only).
Also owns the versioned checkpoint format used by every other module.
"""

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

CHECKPOINT_MAGIC = b"SRFC0001"


class ConfigurationError(ValueError):
    """Bad network/shape configuration."""


# ---------------------------------------------------------------------------
# Positional encoding
# ---------------------------------------------------------------------------

def encoded_dim(in_dim, n_freqs):
    return in_dim * (1 + 2 * n_freqs)


def positional_encode(x, n_freqs):
    """Encode x as [x, sin(2^k pi x), cos(2^k pi x)] for k = 0..n_freqs-1.

    x: [..., d] tensor.  Returns [..., d * (1 + 2 * n_freqs)].  The raw input
    is always kept as the leading block.
    """
    out = [x]
    for k in range(n_freqs):
        ang = (2.0 ** k) * math.pi * x
        out.append(torch.sin(ang))
        out.append(torch.cos(ang))
    return torch.cat(out, dim=-1)


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------

@dataclass
class MlpSpec:
    in_dim: int
    out_dim: int
    depth: int = 8
    width: int = 256
    skip_layers: tuple = (4,)
    hidden_activation: str = "relu"  # relu | softplus (beta=100)
    output_activation: str = "none"  # none | sigmoid
    encoding_freqs: int = 0

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1 or self.depth < 1 or self.width < 1:
            raise ConfigurationError("all MLP dimensions must be >= 1")
        if any(s <= 0 or s >= self.depth for s in self.skip_layers):
            raise ConfigurationError("skip indices must lie in 1..depth-1")
        if self.hidden_activation not in ("relu", "softplus"):
            raise ConfigurationError(f"unknown activation {self.hidden_activation!r}")
        if self.output_activation not in ("none", "sigmoid"):
            raise ConfigurationError(f"unknown output activation {self.output_activation!r}")

    @property
    def encoded_in_dim(self):
        return encoded_dim(self.in_dim, self.encoding_freqs)


SOFTPLUS_BETA = 100.0


def _hidden_act(name):
    if name == "relu":
        return torch.relu
    return lambda x: nn.functional.softplus(x, beta=SOFTPLUS_BETA)


class Mlp(nn.Module):
    """Affine stack with optional input-concat skip connections.

    `depth` affine layers; hidden activation after all but the last, the
    configured output activation after the last.  Layers listed in
    `skip_layers` receive [hidden, encoded_input] concatenated.
    """

    def __init__(self, spec: MlpSpec):
        super().__init__()
        self.spec = spec
        e = spec.encoded_in_dim
        layers = []
        for l in range(spec.depth):
            din = e if l == 0 else spec.width
            if l in spec.skip_layers:
                din += e
            dout = spec.out_dim if l == spec.depth - 1 else spec.width
            layers.append(nn.Linear(din, dout))
        self.layers = nn.ModuleList(layers)
        self._act = _hidden_act(spec.hidden_activation)

    def forward(self, x, return_hidden=False):
        if x.shape[-1] != self.spec.in_dim:
            raise ConfigurationError(
                f"expected input dim {self.spec.in_dim}, got {x.shape[-1]}")
        enc = positional_encode(x, self.spec.encoding_freqs)
        h = enc
        last_hidden = enc
        for l, lin in enumerate(self.layers):
            if l in self.spec.skip_layers:
                h = torch.cat([h, enc], dim=-1)
            h = lin(h)
            if l < self.spec.depth - 1:
                h = self._act(h)
                last_hidden = h
        if self.spec.output_activation == "sigmoid":
            h = torch.sigmoid(h)
        if return_hidden:
            return h, last_hidden
        return h


def mlp_forward(mlp, x):
    return mlp(x)


# ---------------------------------------------------------------------------
# Gradient queries
# ---------------------------------------------------------------------------

def grad_input(y, x, create_graph=True):
    """Gradient of per-sample scalar y w.r.t. input x.

    y: [..., 1] or [...] scalar field values produced from x with
    requires_grad.  Returns a tensor shaped like x.  With create_graph=True
    the result stays on the tape so losses built from it can be
    differentiated w.r.t. parameters (nested differentiation).
    """
    ones = torch.ones_like(y)
    (g,) = torch.autograd.grad(y, x, grad_outputs=ones, create_graph=create_graph,
                               retain_graph=True)
    return g


def grad_params(loss, params, create_graph=False, allow_unused=True):
    """Gradients of a scalar loss w.r.t. a parameter list.

    Parameters the loss does not depend on get zero gradients.  Raises
    FloatingPointError on any non-finite gradient.
    """
    grads = torch.autograd.grad(loss, list(params), create_graph=create_graph,
                                allow_unused=allow_unused)
    out = []
    for p, g in zip(params, grads):
        if g is None:
            g = torch.zeros_like(p)
        elif not torch.isfinite(g).all():
            raise FloatingPointError("non-finite parameter gradient")
        out.append(g)
    return out


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    exp_avg: list = field(default_factory=list)
    exp_avg_sq: list = field(default_factory=list)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def initial(cls, params):
        return cls(step=0,
                   exp_avg=[torch.zeros_like(p) for p in params],
                   exp_avg_sq=[torch.zeros_like(p) for p in params])


def adam_step(state, params, grads, lr):
    """One bias-corrected Adam update, in place on params."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            m_hat = m / bc1
            v_hat = v / bc2
            p.add_(m_hat / (v_hat.sqrt() + state.eps), alpha=-lr)
    return state


# ---------------------------------------------------------------------------
# Checkpoint format (versioned, byte-deterministic, round-trip exact)
# ---------------------------------------------------------------------------

def save_checkpoint(path, arrays, meta=None):
    """Write named arrays + JSON metadata as one deterministic binary file.

    arrays: dict name -> np.ndarray (any dtype) or torch.Tensor.  Writing the
    same content twice produces identical bytes.
    """
    entries = []
    blobs = []
    for name in sorted(arrays):
        a = arrays[name]
        if isinstance(a, torch.Tensor):
            a = a.detach().cpu().numpy()
        a = np.ascontiguousarray(a)
        blob = a.astype(a.dtype.newbyteorder("<")).tobytes()
        entries.append({"name": name, "dtype": str(a.dtype),
                        "shape": list(a.shape), "nbytes": len(blob)})
        blobs.append(blob)
    header = json.dumps({"version": 1, "meta": meta or {}, "arrays": entries},
                        sort_keys=True, ensure_ascii=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path):
    """Read a checkpoint; returns (arrays dict, meta dict)."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode())
        if header.get("version") != 1:
            raise ValueError(f"{path}: unsupported checkpoint version")
        arrays = {}
        for e in header["arrays"]:
            buf = f.read(e["nbytes"])
            a = np.frombuffer(buf, dtype=np.dtype(e["dtype"]).newbyteorder("<"))
            arrays[e["name"]] = a.reshape(e["shape"]).copy()
    return arrays, header["meta"]
