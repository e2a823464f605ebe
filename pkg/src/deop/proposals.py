"""Class-agnostic mask proposals: a small learned network, an oracle source,
Hungarian matching and the dice + focal mask loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import numcore as nc
from .hungarian import linear_sum_assignment
from .masks import MaskSet, resample, resample_array
from .metrics import SegLabelMap
from .numcore import Tensor

__all__ = ["MaskSet", "ProposalNetConfig", "ProposalNet", "LossWeights", "propose",
           "oracle_masks", "gt_segments", "hungarian_match", "mask_loss", "match_cost"]


class CapacityError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    dice: float = 1.0
    focal: float = 20.0
    smooth: float = 1.0      # dice smoothing
    gamma: float = 2.0
    alpha: float = 0.25


@dataclass(frozen=True)
class ProposalNetConfig:
    image_size: int = 64
    in_channels: int = 3
    channels: tuple = (16, 32, 32)
    embed_dim: int = 32
    num_queries: int = 8
    decoder_layers: int = 2
    num_heads: int = 2

    @property
    def mask_size(self) -> int:
        return self.image_size // 4

    def architecture(self) -> dict:
        return {k: getattr(self, k) for k in ("image_size", "in_channels", "channels", "embed_dim",
                                              "num_queries", "decoder_layers", "num_heads")}


def _coords(n: int) -> np.ndarray:
    t = (np.arange(n) + 0.5) / n * 2 - 1
    yy, xx = np.meshgrid(t, t, indexing="ij")
    return np.stack([yy, xx], axis=-1)


def _upsample_hwc(x: Tensor, size: int) -> Tensor:
    """Bilinear resize of a ``[H, W, C]`` map."""
    chw = nc.transpose(x, (2, 0, 1))
    return nc.transpose(resample(chw, (size, size)), (1, 2, 0))


class ProposalNet:
    """Stride-2 conv backbone, pixel decoder and a query transformer decoder.

    There is no classification head: ``masks = sigmoid(mask_embed @ F_P^T)``.
    """

    def __init__(self, cfg: ProposalNetConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        c1, c2, c3 = cfg.channels
        E = cfg.embed_dim
        p = {}
        cin = cfg.in_channels
        for i, cout in enumerate(cfg.channels):
            p[f"bb{i}.w"] = Tensor(rng.normal(0, (9 * cin) ** -0.5, (3, 3, cin, cout)), requires_grad=True)
            p[f"bb{i}.b"] = nn.zeros(cout)
            cin = cout
        p["lat.w"] = Tensor(rng.normal(0, c2 ** -0.5, (1, 1, c2, E)), requires_grad=True)
        p["lat.b"] = nn.zeros(E)
        p["top.w"] = Tensor(rng.normal(0, c3 ** -0.5, (1, 1, c3, E)), requires_grad=True)
        p["top.b"] = nn.zeros(E)
        p["pix.w"] = Tensor(rng.normal(0, (9 * (E + 2)) ** -0.5, (3, 3, E + 2, E)), requires_grad=True)
        p["pix.b"] = nn.zeros(E)
        p["pix_out.w"] = Tensor(rng.normal(0, E ** -0.5, (1, 1, E, E)), requires_grad=True)
        p["pix_out.b"] = nn.zeros(E)
        p["mem.w"] = nn.linear_init(rng, c3, E)
        p["mem.b"] = nn.zeros(E)
        grid = cfg.image_size // 8
        p["mem_pos"] = nn.normal(rng, (grid * grid, E), 0.1)
        p["query"] = nn.normal(rng, (cfg.num_queries, E), 1.0)
        for i in range(cfg.decoder_layers):
            p.update(nn.init_attention(rng, f"dec{i}.ca", E, cross=True))
            p.update(nn.init_layer_norm(f"dec{i}.ln1", E))
            p.update(nn.init_attention(rng, f"dec{i}.sa", E))
            p.update(nn.init_layer_norm(f"dec{i}.ln2", E))
            p.update(nn.init_mlp(rng, f"dec{i}.mlp", E, 2 * E))
            p.update(nn.init_layer_norm(f"dec{i}.ln3", E))
        p.update(nn.init_mlp(rng, "mask_embed", E, E))
        self.params = p
        self._coords = Tensor(_coords(cfg.mask_size))

    def set_frozen(self, frozen: bool) -> None:
        for t in self.params.values():
            t.requires_grad = not frozen

    def features(self, image) -> tuple[Tensor, Tensor]:
        """Per-pixel embeddings ``F_P [mask_size^2, E]`` and mask embeddings ``[N, E]``."""
        cfg, p = self.cfg, self.params
        img = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
        x = Tensor(img.transpose(1, 2, 0)[None])
        feats = []
        for i in range(len(cfg.channels)):
            x = nc.relu(nc.conv2d(x, p[f"bb{i}.w"], p[f"bb{i}.b"], stride=2, pad=1))
            feats.append(x)
        c2, c3 = feats[1], feats[2]
        s = cfg.mask_size
        top = nc.conv2d(c3, p["top.w"], p["top.b"])[0]
        lat = nc.conv2d(c2, p["lat.w"], p["lat.b"])[0]
        fused = lat + _upsample_hwc(top, s)
        fused = nc.concat([fused, self._coords], axis=-1)
        pix = nc.relu(nc.conv2d(nc.reshape(fused, (1, s, s, cfg.embed_dim + 2)), p["pix.w"], p["pix.b"], pad=1))
        f_p = nc.conv2d(pix, p["pix_out.w"], p["pix_out.b"])
        f_p = nc.reshape(f_p, (s * s, cfg.embed_dim))

        g = c3.shape[1]
        mem = nn.linear(nc.reshape(c3, (g * g, c3.shape[-1])), p["mem.w"], p["mem.b"]) + p["mem_pos"]
        q = p["query"]
        for i in range(cfg.decoder_layers):
            q = nn.layer_norm(q + nn.multi_head_attention(q, mem, p, f"dec{i}.ca", cfg.num_heads), p, f"dec{i}.ln1")
            q = nn.layer_norm(q + nn.self_attention(q, p, f"dec{i}.sa", cfg.num_heads), p, f"dec{i}.ln2")
            q = nn.layer_norm(q + nn.mlp(q, p, f"dec{i}.mlp"), p, f"dec{i}.ln3")
        emb = nn.mlp(q, p, "mask_embed")
        return f_p, emb

    def mask_logits(self, image) -> Tensor:
        f_p, emb = self.features(image)
        s = self.cfg.mask_size
        return nc.reshape(emb @ nc.transpose(f_p), (self.cfg.num_queries, s, s))

    def __call__(self, image) -> MaskSet:
        return MaskSet(nc.sigmoid(self.mask_logits(image)))


def propose(image, net: ProposalNet) -> MaskSet:
    return net(image)


# ------------------------------------------------------------------ gt / oracle

def gt_segments(label_map: SegLabelMap) -> tuple[np.ndarray, list[int]]:
    """Binary ``[S, H, W]`` masks, one per labeled class region, with their class ids."""
    lab = label_map.labels
    ids = [int(c) for c in np.unique(lab) if c != label_map.ignore]
    if not ids:
        return np.zeros((0,) + lab.shape), []
    return np.stack([(lab == c).astype(np.float64) for c in ids]), ids


def _boundary(mask: np.ndarray) -> np.ndarray:
    """Pixels whose 4-neighbourhood contains the other mask value."""
    m = mask.astype(bool)
    b = np.zeros_like(m)
    b[1:] |= m[1:] != m[:-1]
    b[:-1] |= m[:-1] != m[1:]
    b[:, 1:] |= m[:, 1:] != m[:, :-1]
    b[:, :-1] |= m[:, :-1] != m[:, 1:]
    return b


def oracle_masks(label_map: SegLabelMap, jitter: float, n: int, seed: int = 0) -> MaskSet:
    """One binary mask per gt segment, zero-padded to ``n``; optional boundary jitter."""
    if not 0.0 <= jitter <= 1.0:
        raise ValueError(f"jitter {jitter} outside [0, 1]")
    segs, _ = gt_segments(label_map)
    if len(segs) > n:
        raise CapacityError(f"{len(segs)} segments exceed proposal capacity {n}")
    out = np.zeros((n,) + label_map.shape)
    out[:len(segs)] = segs
    if jitter > 0:
        rng = np.random.default_rng(seed)
        for k in range(len(segs)):
            flip = _boundary(segs[k]) & (rng.random(label_map.shape) < jitter)
            out[k][flip] = 1.0 - out[k][flip]
    return MaskSet(Tensor(out))


# ----------------------------------------------------------------- matching/loss

def _flat(x: np.ndarray) -> np.ndarray:
    return x.reshape(x.shape[0], -1)


def match_cost(pred: np.ndarray, gt: np.ndarray, w: LossWeights = LossWeights()) -> np.ndarray:
    """``[P, G]`` cost of pairing every prediction with every gt mask (same formulas as the loss)."""
    p = np.clip(_flat(pred), 1e-12, 1 - 1e-12)
    g = _flat(gt)
    inter = p @ g.T
    dice = 1.0 - (2 * inter + w.smooth) / (p.sum(1)[:, None] + g.sum(1)[None, :] + w.smooth)
    # focal split into target-1 and target-0 parts so it is linear in g
    pos = w.alpha * (1 - p) ** w.gamma * -np.log(p)
    neg = (1 - w.alpha) * p ** w.gamma * -np.log(1 - p)
    focal = (pos @ g.T + neg @ (1 - g).T) / p.shape[1]
    return w.dice * dice + w.focal * focal


def hungarian_match(pred: MaskSet, gt: MaskSet, w: LossWeights = LossWeights()) -> list[tuple[int, int]]:
    """Minimum-cost one-to-one (pred, gt) pairs; empty gt masks are skipped."""
    g = gt.numpy()
    keep = np.flatnonzero(_flat(g).sum(1) > 0)
    if keep.size == 0:
        return []
    p = pred.numpy()
    if p.shape[1:] != g.shape[1:]:
        p = resample_array(p, g.shape[1:])
    cost = match_cost(p, g[keep], w)
    rows, cols = linear_sum_assignment(cost)
    return sorted((int(r), int(keep[c])) for r, c in zip(rows, cols))


def _safe_log(x: Tensor) -> Tensor:
    return nc.log(nc.clamp(x, 1e-12, 1.0))


def dice_focal(p: Tensor, g: np.ndarray, w: LossWeights = LossWeights()) -> tuple[Tensor, Tensor]:
    """Per-row dice and pixel-averaged focal losses for ``p [K, P]`` vs targets ``g [K, P]``."""
    G = Tensor(g)
    ones = Tensor(np.ones(p.shape))
    inter = nc.sum(p * G, axis=1)
    denom = nc.add_scalar(nc.sum(p, axis=1) + Tensor(g.sum(1)), w.smooth)
    dice = nc.scale(nc.add_scalar(nc.scale(inter, 2.0), w.smooth) * nc.reciprocal(denom), -1.0)
    dice = nc.add_scalar(dice, 1.0)

    q = ones - p
    bce = nc.neg(G * _safe_log(p) + Tensor(1 - g) * _safe_log(q))
    p_t = p * G + q * Tensor(1 - g)
    one_minus = ones - p_t
    mod = one_minus * one_minus if w.gamma == 2.0 else nc.exp(nc.scale(_safe_log(one_minus), w.gamma))
    alpha_t = Tensor(w.alpha * g + (1 - w.alpha) * (1 - g))
    focal = nc.mean(alpha_t * mod * bce, axis=1)
    return dice, focal


def mask_loss(pred: MaskSet, gt: MaskSet, assignment, w: LossWeights = LossWeights()) -> Tensor:
    """Sum over matched pairs of ``dice_w * dice + focal_w * focal``."""
    if not assignment:
        return Tensor(0.0)
    pi = np.array([a for a, _ in assignment])
    gi = np.array([b for _, b in assignment])
    p = pred.masks
    g = gt.numpy()
    if p.shape[1:] != g.shape[1:]:
        g = resample_array(g, p.shape[1:])
    k = len(pi)
    pk = nc.reshape(p[pi], (k, p.shape[1] * p.shape[2]))
    dice, focal = dice_focal(pk, _flat(g[gi]), w)
    return nc.sum(nc.scale(dice, w.dice) + nc.scale(focal, w.focal))


def unmatched_loss(pred: MaskSet, assignment, w: LossWeights = LossWeights()) -> Tensor:
    """Dice + focal of every unmatched prediction against an empty target.

    Spare queries are pushed toward empty masks so they do not leak into
    the per-pixel assembly later on.
    """
    used = {a for a, _ in assignment}
    rest = np.array([i for i in range(pred.n) if i not in used], dtype=int)
    if rest.size == 0:
        return Tensor(0.0)
    p = pred.masks
    pk = nc.reshape(p[rest], (rest.size, p.shape[1] * p.shape[2]))
    dice, focal = dice_focal(pk, np.zeros(pk.shape), w)
    return nc.sum(nc.scale(dice, w.dice) + nc.scale(focal, w.focal))
