"""The three neural fields plus the trainable deviation scalar.

A deformation net warps observed points into a canonical frame, an SDF net
models the canonical shape (surface = zero-level set, positive on the camera
side), and a radiance net predicts color from canonical position, direction,
normal and the SDF feature vector.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .autodiff import Mlp, MlpSpec, encoded_dim, grad_input, positional_encode


class DegenerateDeformationError(RuntimeError):
    """(I + J) v collapsed to ~zero; the warp folded onto itself."""


@dataclass
class FieldConfig:
    """Network shapes. Defaults follow the published per-scene setup; the
    desk-scale preset shrinks width/depth so CPU runs stay tractable."""
    depth: int = 8
    width: int = 256
    skip: tuple = (4,)
    enc_warp: int = 6       # frequencies for (x, t) in the deformation net
    enc_sdf: int = 6        # frequencies for x in the SDF net
    enc_rad_x: int = 10     # frequencies for position in the radiance net
    enc_rad_v: int = 4      # frequencies for direction in the radiance net
    sphere_radius: float = 0.8   # geometric-initialization bias
    init_deviation: float = 0.3

    @property
    def feat_dim(self):
        # geometry feature = last hidden representation of the SDF net
        return self.width


def _broadcast_time(x, t):
    if not torch.is_tensor(t):
        t = torch.tensor(float(t), dtype=x.dtype)
    t = t.to(x.dtype)
    if t.dim() == 0:
        t = t.expand(x.shape[0])
    return t.reshape(-1, 1)


class DeformationField(nn.Module):
    """(x_o, t) -> displacement; canonical position is x_o + displacement.

    The output layer is zero-initialized so training starts from the
    identity warp.
    """

    def __init__(self, cfg: FieldConfig):
        super().__init__()
        self.mlp = Mlp(MlpSpec(in_dim=4, out_dim=3, depth=cfg.depth,
                               width=cfg.width, skip_layers=cfg.skip,
                               hidden_activation="relu",
                               encoding_freqs=cfg.enc_warp))
        last = self.mlp.layers[-1]
        nn.init.zeros_(last.weight)
        nn.init.zeros_(last.bias)

    def displacement(self, x, t):
        return self.mlp(torch.cat([x, _broadcast_time(x, t)], dim=-1))

    def forward(self, x, t):
        return x + self.displacement(x, t)

    def jacobian(self, x, t, create_graph=True):
        """d displacement / d x, shape [N, 3, 3] (rows = output components)."""
        with torch.enable_grad():
            xg = x if x.requires_grad else x.detach().requires_grad_(True)
            d = self.displacement(xg, t)
            rows = [grad_input(d[:, i], xg, create_graph=create_graph)
                    for i in range(3)]
        return torch.stack(rows, dim=1)


def deform(field, x, t):
    return field(x, t)


def deform_jacobian(field, x, t, create_graph=True):
    return field.jacobian(x, t, create_graph=create_graph)


def canonical_view_dir(field, x, t, v, create_graph=True, jac=None):
    """v_c = (I + J) v_o, renormalized to unit length.

    Raises DegenerateDeformationError when the transformed direction is
    numerically zero (pathological warp).
    """
    J = field.jacobian(x, t, create_graph=create_graph) if jac is None else jac
    vc = v + torch.einsum("nij,nj->ni", J, v)
    n = vc.norm(dim=-1, keepdim=True)
    if (n < 1e-8).any():
        raise DegenerateDeformationError("(I + J) v vanished for some ray")
    return vc / n


class SdfField(nn.Module):
    """x_c -> (signed distance, geometry feature).

    Softplus(beta=100) hidden activations keep the net twice differentiable,
    which the Eikonal/normal regularizers need.  Geometric initialization
    makes the fresh net approximate rho(x) = |x| - sphere_radius.
    """

    def __init__(self, cfg: FieldConfig):
        super().__init__()
        self.cfg = cfg
        self.mlp = Mlp(MlpSpec(in_dim=3, out_dim=1, depth=cfg.depth,
                               width=cfg.width, skip_layers=cfg.skip,
                               hidden_activation="softplus",
                               encoding_freqs=cfg.enc_sdf))
        self._geometric_init()

    def _geometric_init(self):
        spec = self.mlp.spec
        e = spec.encoded_in_dim
        for l, lin in enumerate(self.mlp.layers):
            w = lin.weight
            n_out = w.shape[0]
            nn.init.zeros_(lin.bias)
            if l == spec.depth - 1:
                nn.init.normal_(w, mean=math.sqrt(math.pi) / math.sqrt(spec.width),
                                std=1e-4)
                nn.init.constant_(lin.bias, -self.cfg.sphere_radius)
            elif l == 0:
                nn.init.normal_(w, 0.0, math.sqrt(2.0) / math.sqrt(n_out))
                with torch.no_grad():
                    w[:, 3:] = 0.0  # encoding bands start flat
            elif l in spec.skip_layers:
                # 1/sqrt(2) keeps activation variance unchanged by the concat
                nn.init.normal_(w, 0.0, 1.0 / math.sqrt(n_out))
                with torch.no_grad():
                    w[:, spec.width + 3:] = 0.0
            else:
                nn.init.normal_(w, 0.0, math.sqrt(2.0) / math.sqrt(n_out))
        self._refit_output_layer()

    def _refit_output_layer(self, n=4096, margin_radius=1.8, ridge=1e-6):
        """Least-squares fit of the output layer to |x| - sphere_radius.

        Tightens the random geometric init to a close sphere approximation
        (and a near-unit gradient) over the sampling domain.  Deterministic:
        uses its own fixed generator.
        """
        gen = torch.Generator().manual_seed(0x5D0)
        p = torch.randn(n, 3, generator=gen, dtype=torch.float64)
        r = torch.rand(n, 1, generator=gen, dtype=torch.float64) ** (1.0 / 3.0)
        p = p / p.norm(dim=-1, keepdim=True) * r * margin_radius
        with torch.no_grad():
            spec = self.mlp.spec
            x = p.to(self.mlp.layers[0].weight.dtype)
            _, h = self.mlp(x, return_hidden=True)
            if (spec.depth - 1) in spec.skip_layers:
                h = torch.cat([h, positional_encode(x, spec.encoding_freqs)],
                              dim=-1)
            A = torch.cat([h.double(), torch.ones(n, 1, dtype=torch.float64)], dim=-1)
            y = p.norm(dim=-1) - self.cfg.sphere_radius
            gram = A.T @ A + ridge * torch.eye(A.shape[1], dtype=torch.float64)
            sol = torch.linalg.solve(gram, A.T @ y)
            last = self.mlp.layers[-1]
            last.weight.copy_(sol[:-1].reshape(1, -1).to(last.weight.dtype))
            last.bias.copy_(sol[-1:].to(last.bias.dtype))

    def forward(self, x):
        out, hidden = self.mlp(x, return_hidden=True)
        return out[..., 0], hidden

    def sdf(self, x):
        return self(x)

    def normal(self, x, create_graph=True):
        """Raw (unnormalized) gradient of the SDF w.r.t. position."""
        with torch.enable_grad():
            xg = x if x.requires_grad else x.detach().requires_grad_(True)
            rho, _ = self(xg)
            return grad_input(rho, xg, create_graph=create_graph)


def observed_normal(deform_field, sdf_field, p_o, t, create_graph=True):
    """Gradient of x -> rho(x + displacement(x, t)) at p_o.

    Equals (I + J)^T n_c by the chain rule; computed here as one composite
    differentiation pass.
    """
    with torch.enable_grad():
        pg = p_o if p_o.requires_grad else p_o.detach().requires_grad_(True)
        rho, _ = sdf_field(deform_field(pg, t))
        return grad_input(rho, pg, create_graph=create_graph)


class RadianceField(nn.Module):
    """(x_c, v_c, n_c, feature) -> rgb in [0,1]^3 (sigmoid output)."""

    def __init__(self, cfg: FieldConfig):
        super().__init__()
        self.cfg = cfg
        in_dim = (encoded_dim(3, cfg.enc_rad_x) + encoded_dim(3, cfg.enc_rad_v)
                  + 3 + cfg.feat_dim)
        self.mlp = Mlp(MlpSpec(in_dim=in_dim, out_dim=3, depth=cfg.depth,
                               width=cfg.width, skip_layers=cfg.skip,
                               hidden_activation="relu",
                               output_activation="sigmoid",
                               encoding_freqs=0))

    def forward(self, x, v, n, feat):
        inp = torch.cat([positional_encode(x, self.cfg.enc_rad_x),
                         positional_encode(v, self.cfg.enc_rad_v),
                         n, feat], dim=-1)
        return self.mlp(inp)


class DeviationParam(nn.Module):
    """Trainable logistic deviation, s = exp(SCALE * theta) > 0.

    The inner scale amplifies the parameter's effective learning rate: the
    deviation must travel an order of magnitude during training while the
    network weights move by small steps.
    """

    SCALE = 10.0

    def __init__(self, initial=0.3):
        super().__init__()
        self.theta = nn.Parameter(torch.tensor(math.log(initial) / self.SCALE))

    @property
    def s(self):
        return torch.exp(self.SCALE * self.theta)


class FieldSet(nn.Module):
    """Bundle of the four trainable components."""

    def __init__(self, cfg: FieldConfig = None):
        super().__init__()
        self.cfg = cfg or FieldConfig()
        self.deformation = DeformationField(self.cfg)
        self.sdf = SdfField(self.cfg)
        self.radiance = RadianceField(self.cfg)
        self.deviation = DeviationParam(self.cfg.init_deviation)

    def param_list(self):
        return list(self.parameters())

    def state_arrays(self, prefix="fields."):
        return {prefix + k: v.detach() for k, v in self.state_dict().items()}

    def load_state_arrays(self, arrays, prefix="fields."):
        sd = self.state_dict()
        new = {}
        for k, v in sd.items():
            a = arrays[prefix + k]
            new[k] = torch.as_tensor(a).to(v.dtype).reshape(v.shape)
        self.load_state_dict(new)
