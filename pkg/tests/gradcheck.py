"""Central finite-difference oracle shared by the gradient tests."""

import copy

import torch
from torch import nn

from sourcefree.models import ArchSpec, build_model

STEP = 1e-3
TOL = 1e-4


def smooth_tiny_model(seed, num_positive=3, num_outputs=6, v_dim=5, u_dim=4, hidden=6):
    """Vector-input model with tanh in place of ReLU so finite differences never cross a kink."""
    arch = ArchSpec(input_kind="vector", input_dim=v_dim, hidden_dim=hidden, u_dim=u_dim)
    model = build_model(arch, num_positive, num_outputs, seed).double()
    for seq in (model.Fs, model.G):
        for k, m in enumerate(seq):
            if isinstance(m, nn.ReLU):
                seq[k] = nn.Tanh()
    return model


def finite_difference(fn, params, step=STEP):
    grads = []
    for p in params:
        g = torch.zeros_like(p)
        flat = p.data.view(-1)
        for k in range(flat.numel()):
            old = flat[k].item()
            flat[k] = old + step
            hi = fn().item()
            flat[k] = old - step
            lo = fn().item()
            flat[k] = old
            g.view(-1)[k] = (hi - lo) / (2 * step)
        grads.append(g)
    return torch.cat([g.view(-1) for g in grads])


def analytic(fn, params):
    for p in params:
        p.grad = None
    fn().backward()
    return torch.cat([(p.grad if p.grad is not None else torch.zeros_like(p)).view(-1) for p in params])


def relative_error(fn, params) -> float:
    params = [p for p in params if p.requires_grad]
    ga = analytic(fn, params)
    with torch.no_grad():
        gn = finite_difference(fn, params)
    return float((ga - gn).norm() / gn.norm().clamp_min(1e-12))
