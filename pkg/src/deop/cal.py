"""Per-proposal anchor heatmaps that reweight encoder features before pooling.

Two decoders are provided. The query decoder refines learnable anchor queries
against the feature map and turns each one into a spatial softmax gated by its
proposal mask. The conv decoder runs every mask-weighted feature map through a
conv-BN-ReLU stack and a 1-channel conv, then a spatial softmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import numcore as nc
from .masks import MaskSet, resample
from .numcore import ContractError, ShapeError, Tensor


@dataclass
class HeatmapSet:
    heatmaps: Tensor          # [N, Hg, Wg], nonnegative

    def __post_init__(self):
        if self.heatmaps.ndim != 3:
            raise ShapeError(f"HeatmapSet expects [N, H, W], got {self.heatmaps.shape}")
        if (self.heatmaps.data < 0).any():
            raise ContractError("heatmaps must be nonnegative")

    @property
    def n(self) -> int:
        return self.heatmaps.shape[0]

    def numpy(self) -> np.ndarray:
        return self.heatmaps.data


@dataclass
class AnchorQueries:
    q: Tensor                 # [N, C]

    def __post_init__(self):
        if self.q.ndim != 2:
            raise ShapeError(f"anchor queries must be [N, C], got {self.q.shape}")


@dataclass(frozen=True)
class CALConfig:
    kind: str = "query"       # query | conv
    layers: int = 1
    num_queries: int = 8
    num_heads: int = 2        # self-attention heads, including the output layer
    conv_width: int = 64

    def __post_init__(self):
        if self.kind not in ("query", "conv"):
            raise ContractError(f"unknown heatmap decoder {self.kind!r}")
        if self.layers < (1 if self.kind == "conv" else 0):
            raise ContractError(f"{self.kind} decoder needs more layers than {self.layers}")


def token_masks(M, grid: tuple[int, int]) -> Tensor:
    m = M.masks if isinstance(M, MaskSet) else M
    return resample(m, grid) if m.shape[1:] != tuple(grid) else m


def heatmap_from_queries(q: Tensor, F_V: Tensor, M: Tensor) -> Tensor:
    """``softmax_p(q F_V^T / sqrt(d)) * M`` for ``q [N, d]``, ``F_V [H, W, d]``, ``M [N, H, W]``."""
    H, W, d = F_V.shape
    if q.shape[1] != d:
        raise ShapeError(f"query width {q.shape[1]} does not match feature width {d}")
    if M.shape != (q.shape[0], H, W):
        raise ShapeError(f"masks {M.shape} do not match {q.shape[0]} queries on a {H}x{W} grid")
    logits = nc.scale(q @ nc.transpose(nc.reshape(F_V, (H * W, d))), d ** -0.5)
    att = nc.softmax(logits, axis=1)
    return nc.reshape(att, (q.shape[0], H, W)) * M


def init_query_decoder(rng, cfg: CALConfig, d: int) -> dict:
    p = {"q": nn.normal(rng, (cfg.num_queries, d), 0.02)}
    for i in range(cfg.layers):
        p.update(nn.init_attention(rng, f"dec{i}.sa", d))
        p.update(nn.init_layer_norm(f"dec{i}.ln1", d))
        p.update(nn.init_attention(rng, f"dec{i}.ca", d, cross=True))
        p.update(nn.init_layer_norm(f"dec{i}.ln2", d))
        p.update(nn.init_mlp(rng, f"dec{i}.mlp", d, 4 * d))
        p.update(nn.init_layer_norm(f"dec{i}.ln3", d))
    p.update(nn.init_attention(rng, "out.sa", d))
    p.update(nn.init_layer_norm("out.ln", d))
    return p


def query_heatmap_decoder(q: AnchorQueries, F_V: Tensor, M, K: int, params: dict,
                          n_heads: int = 2) -> HeatmapSet:
    """K post-norm decoder layers (self-attn, cross-attn to F_V, MLP), then the heatmap layer."""
    if K < 0:
        raise ContractError("K must be >= 0")
    H, W, d = F_V.shape
    x = q.q
    if x.shape[1] != d:
        raise ShapeError(f"query width {x.shape[1]} does not match feature width {d}")
    mem = nc.reshape(F_V, (H * W, d))
    for i in range(K):
        x = nn.layer_norm(x + nn.self_attention(x, params, f"dec{i}.sa", n_heads), params, f"dec{i}.ln1")
        x = nn.layer_norm(x + nn.multi_head_attention(x, mem, params, f"dec{i}.ca", n_heads),
                          params, f"dec{i}.ln2")
        x = nn.layer_norm(x + nn.mlp(x, params, f"dec{i}.mlp"), params, f"dec{i}.ln3")
    x = nn.layer_norm(x + nn.self_attention(x, params, "out.sa", n_heads), params, "out.ln")
    return HeatmapSet(heatmap_from_queries(x, F_V, token_masks(M, (H, W))))


# ---------------------------------------------------------------- conv decoder

def init_conv_decoder(rng, cfg: CALConfig, d: int) -> dict:
    p, cin = {}, d
    for i in range(cfg.layers):
        p[f"cbr{i}.w"] = Tensor(rng.normal(0, (9 * cin) ** -0.5, (3, 3, cin, cfg.conv_width)),
                                requires_grad=True)
        p[f"cbr{i}.b"] = nn.zeros(cfg.conv_width)
        p[f"cbr{i}.bn.g"] = nn.ones(cfg.conv_width)
        p[f"cbr{i}.bn.b"] = nn.zeros(cfg.conv_width)
        cin = cfg.conv_width
    p["head.w"] = Tensor(rng.normal(0, (9 * cin) ** -0.5, (3, 3, cin, 1)), requires_grad=True)
    p["head.b"] = nn.zeros(1)
    return p


class BatchNormState:
    """Running mean/variance per CBR block (momentum 0.1, unbiased variance)."""

    def __init__(self, K: int, width: int, momentum: float = 0.1):
        self.momentum = momentum
        self.mean = [np.zeros(width) for _ in range(K)]
        self.var = [np.ones(width) for _ in range(K)]

    def update(self, i: int, x: np.ndarray) -> None:
        flat = x.reshape(-1, x.shape[-1])
        n = flat.shape[0]
        mu = flat.mean(axis=0)
        var = flat.var(axis=0) * (n / max(n - 1, 1))
        m = self.momentum
        self.mean[i] = (1 - m) * self.mean[i] + m * mu
        self.var[i] = (1 - m) * self.var[i] + m * var


def _bn_eval(x: Tensor, mean: np.ndarray, var: np.ndarray, g: Tensor, b: Tensor,
             eps: float = 1e-5) -> Tensor:
    inv = 1.0 / np.sqrt(var + eps)
    xhat = nc.scale_channels(nc.add_bias(x, Tensor(-mean)), Tensor(inv))
    return nc.add_bias(nc.scale_channels(xhat, g), b)


def conv_heatmap_decoder(F_V: Tensor, M, K: int, params: dict, state: BatchNormState | None = None,
                         train: bool = True) -> HeatmapSet:
    """``softmax_p(conv(CBR_K(...CBR_1(F_V * M_n))))`` for every proposal ``n``."""
    if K < 1:
        raise ContractError("conv heatmap decoder needs K >= 1")
    H, W, d = F_V.shape
    m = token_masks(M, (H, W))
    n = m.shape[0]
    # [N, H, W, d]: every proposal's mask scales the shared feature map
    x = nc.scale_rows(nc.stack([F_V] * n), m)
    for i in range(K):
        x = nc.conv2d(x, params[f"cbr{i}.w"], params[f"cbr{i}.b"], pad=1)
        g, b = params[f"cbr{i}.bn.g"], params[f"cbr{i}.bn.b"]
        if train or state is None:
            if state is not None:
                state.update(i, x.data)
            x = nc.batch_norm(x, g, b)
        else:
            x = _bn_eval(x, state.mean[i], state.var[i], g, b)
        x = nc.relu(x)
    x = nc.conv2d(x, params["head.w"], params["head.b"], pad=1)
    logits = nc.reshape(x, (n, H * W))
    return HeatmapSet(nc.reshape(nc.softmax(logits, axis=1), (n, H, W)))


class HeatmapDecoder:
    """Parameters and state for either decoder kind."""

    def __init__(self, cfg: CALConfig, d: int, seed: int = 0):
        self.cfg, self.d = cfg, d
        rng = np.random.default_rng(seed)
        if cfg.kind == "query":
            self.params = init_query_decoder(rng, cfg, d)
            self.bn = None
        else:
            self.params = init_conv_decoder(rng, cfg, d)
            self.bn = BatchNormState(cfg.layers, cfg.conv_width)
        self.training = True

    def train(self, mode: bool = True) -> "HeatmapDecoder":
        self.training = mode
        return self

    def __call__(self, F_V: Tensor, M) -> HeatmapSet:
        if self.cfg.kind == "query":
            n = (M.n if isinstance(M, MaskSet) else M.shape[0])
            if n != self.cfg.num_queries:
                raise ShapeError(f"{n} proposals for {self.cfg.num_queries} anchor queries")
            return query_heatmap_decoder(AnchorQueries(self.params["q"]), F_V, M, self.cfg.layers,
                                         self.params, self.cfg.num_heads)
        return conv_heatmap_decoder(F_V, M, self.cfg.layers, self.params, self.bn, self.training)
