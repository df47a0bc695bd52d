"""Network components: backbone M, feature extractor F, classifier D, decoder G."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import torch
from torch import nn


@dataclass
class ArchSpec:
    """Desk-scale architecture. ``input_kind='vector'`` makes M the identity."""

    input_kind: str = "image"
    in_channels: int = 3
    conv_widths: tuple[int, ...] = (16, 32, 64)
    input_dim: int = 0  # vector inputs only
    hidden_dim: int = 64
    u_dim: int = 16

    @property
    def v_dim(self) -> int:
        return self.conv_widths[-1] if self.input_kind == "image" else self.input_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_widths"] = list(self.conv_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        d = dict(d)
        d["conv_widths"] = tuple(d.get("conv_widths", cls.conv_widths))
        return cls(**d)


def conv_backbone(in_channels: int, widths) -> nn.Sequential:
    layers: list[nn.Module] = []
    prev = in_channels
    for k, width in enumerate(widths):
        layers += [nn.Conv2d(prev, width, 3, padding=1), nn.ReLU()]
        if k < len(widths) - 1:
            layers.append(nn.MaxPool2d(2))
        prev = width
    layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
    return nn.Sequential(*layers)


def mlp(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, out_dim))


class ProcurementModel(nn.Module):
    """Generative source classifier: ``D(Fs(M(x)))`` with decoder ``G: u -> v``."""

    def __init__(self, arch: ArchSpec, num_positive: int, num_outputs: int):
        super().__init__()
        self.arch = arch
        self.num_positive = num_positive
        self.num_outputs = num_outputs
        if arch.input_kind == "image":
            self.M = conv_backbone(arch.in_channels, arch.conv_widths)
        elif arch.input_kind == "vector":
            self.M = nn.Identity()
        else:
            raise ValueError(f"unknown input kind {arch.input_kind!r}")
        self.Fs = mlp(arch.v_dim, arch.hidden_dim, arch.u_dim)
        self.D = nn.Linear(arch.u_dim, num_outputs)
        self.G = mlp(arch.u_dim, arch.hidden_dim, arch.v_dim)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.arch.v_dim, self.arch.u_dim, self.num_outputs

    def forward(self, x):
        return self.D(self.Fs(self.M(x)))

    def embed(self, x):
        return self.Fs(self.M(x))


def build_model(arch: ArchSpec, num_positive: int, num_outputs: int, seed: int) -> ProcurementModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ProcurementModel(arch, num_positive, num_outputs)


def module_checksum(*modules: nn.Module) -> str:
    h = hashlib.sha256()
    for m in modules:
        for name, t in m.state_dict().items():
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()

