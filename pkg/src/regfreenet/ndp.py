"""Neighboring Distance Perception front-end.

Three parallel dilated 3x3x3 convolutions look at the input at different
receptive fields. Each branch is pooled to a 4x4x4 grid of graph nodes by a
keypoint network, passed through a two-layer graph convolution, upsampled back
and added to the branch features. The three fused branches are concatenated
and merged by a 1x1x1 convolution.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

NODE_GRID = (4, 4, 4)
NUM_NODES = 64


@dataclass(frozen=True)
class NDPConfig:
    dilation_rates: tuple[int, int, int] = (2, 3, 4)
    branch_channels: int = 16
    node_grid: tuple[int, int, int] = NODE_GRID
    gcn_hidden: int = 32
    # "uniform": complete graph, every node averages all 64 (self included).
    # "grid": 6-neighbour lattice with self loops, symmetric normalisation.
    adjacency: str = "uniform"

    def __post_init__(self):
        rates = tuple(int(r) for r in self.dilation_rates)
        if len(rates) != 3 or any(r < 1 for r in rates):
            raise ValueError(f"need three dilation rates >= 1, got {rates}")
        if not rates[0] < rates[1] < rates[2]:
            raise ValueError(f"dilation rates must be strictly increasing, got {rates}")
        grid = tuple(int(g) for g in self.node_grid)
        if len(grid) != 3 or grid[0] * grid[1] * grid[2] != NUM_NODES:
            raise ValueError(f"node grid must hold exactly 64 nodes, got {grid}")
        if self.adjacency not in ("uniform", "grid"):
            raise ValueError(f"unknown adjacency {self.adjacency!r}")
        object.__setattr__(self, "dilation_rates", rates)
        object.__setattr__(self, "node_grid", grid)

    def to_dict(self) -> dict:
        return asdict(self)


def uniform_adjacency(n: int = NUM_NODES) -> torch.Tensor:
    return torch.full((n, n), 1.0 / n)


def grid_adjacency(grid=NODE_GRID) -> torch.Tensor:
    idx = torch.arange(grid[0] * grid[1] * grid[2]).reshape(grid)
    a = torch.eye(idx.numel())
    for dim in range(3):
        src = idx.narrow(dim, 0, grid[dim] - 1).reshape(-1)
        dst = idx.narrow(dim, 1, grid[dim] - 1).reshape(-1)
        a[src, dst] = 1.0
        a[dst, src] = 1.0
    d = a.sum(1).rsqrt()
    return d[:, None] * a * d[None, :]


class DilatedBranch(nn.Module):
    """3x3x3 convolution with dilation ``rate`` and same-size padding, then ReLU."""

    def __init__(self, in_channels: int, out_channels: int, rate: int):
        super().__init__()
        self.rate = rate
        self.conv = nn.Conv3d(in_channels, out_channels, 3, padding=rate, dilation=rate)

    def forward(self, x):
        if min(x.shape[-3:]) <= self.rate:
            raise ValueError(
                f"spatial size {tuple(x.shape[-3:])} too small for dilation {self.rate}"
            )
        return F.relu(self.conv(x))


class KNet(nn.Module):
    """Keypoint network: conv + adaptive average pooling to 64 node vectors.

    Replicate padding keeps a constant field constant under any kernel whose
    weights sum to one. Output is ``(B, 64, C)`` with nodes in (z, y, x)
    raster order of the 4x4x4 grid.
    """

    def __init__(self, channels: int, node_grid=NODE_GRID):
        super().__init__()
        self.node_grid = tuple(node_grid)
        self.conv = nn.Conv3d(channels, channels, 3, padding=1, padding_mode="replicate")

    def features(self, x):
        return F.relu(self.conv(x))

    def forward(self, x):
        if any(s < g for s, g in zip(x.shape[-3:], self.node_grid)):
            raise ValueError(
                f"spatial size {tuple(x.shape[-3:])} smaller than node grid {self.node_grid}"
            )
        pooled = F.adaptive_avg_pool3d(self.features(x), self.node_grid)
        return pooled.flatten(2).transpose(1, 2)


class GCN(nn.Module):
    """Two rounds of dense aggregation followed by a per-node linear map + ReLU."""

    def __init__(self, channels: int, hidden: int, adjacency: torch.Tensor):
        super().__init__()
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)
        self.register_buffer("adjacency", adjacency.clone())

    def forward(self, nodes):
        if nodes.shape[-2] != self.adjacency.shape[0]:
            raise ValueError(
                f"expected {self.adjacency.shape[0]} nodes, got {nodes.shape[-2]}"
            )
        a = self.adjacency.to(nodes.dtype)
        h = F.relu(self.fc1(a @ nodes))
        return F.relu(self.fc2(a @ h))


class NDP(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, config: NDPConfig | None = None):
        super().__init__()
        self.config = config = config or NDPConfig()
        c = config.branch_channels
        adj = uniform_adjacency() if config.adjacency == "uniform" else grid_adjacency(config.node_grid)
        self.branches = nn.ModuleList(DilatedBranch(in_channels, c, r) for r in config.dilation_rates)
        self.knets = nn.ModuleList(KNet(c, config.node_grid) for _ in range(3))
        self.gcns = nn.ModuleList(GCN(c, config.gcn_hidden, adj) for _ in range(3))
        self.integrate = nn.Conv3d(3 * c, out_channels, 1)

    def branch_outputs(self, x):
        """Per-branch ``(D_j, fused_j)`` pairs; exposed for inspection and tests."""
        out = []
        for branch, knet, gcn in zip(self.branches, self.knets, self.gcns):
            d = branch(x)
            g = gcn(knet(d))
            g = g.transpose(1, 2).reshape(d.shape[0], d.shape[1], *self.config.node_grid)
            g = F.interpolate(g, size=d.shape[-3:], mode="trilinear", align_corners=False)
            out.append((d, d + g))
        return out

    def forward(self, x):
        fused = torch.cat([f for _, f in self.branch_outputs(x)], dim=1)
        return F.relu(self.integrate(fused))
