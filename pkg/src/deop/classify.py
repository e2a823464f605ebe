"""Segment pooling, class-embedding classification and per-pixel assembly."""

from __future__ import annotations

import hashlib
from typing import NamedTuple

import numpy as np

from . import numcore as nc
from .masks import MaskSet, resample
from .numcore import ContractError, ShapeError, Tensor
from .proposals import LossWeights, dice_focal

POOL_EPS = 1e-6
DEFAULT_TAU = 0.07


class ProtocolError(RuntimeError):
    """Training data violates the seen-only protocol."""


def name_seed(text: str) -> int:
    """Stable 64-bit seed derived from a string."""
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def seeded_unit(text: str, d: int) -> np.ndarray:
    v = np.random.default_rng(name_seed(text)).normal(size=d)
    return v / np.linalg.norm(v)


def name_embedding(name: str, d: int, scheme: str = "name") -> np.ndarray:
    """Unit vector for a class name.

    ``name``: one seeded Gaussian per full name. ``words``: normalized sum of
    per-word Gaussians, so names sharing a word share a direction.
    """
    if scheme == "name":
        return seeded_unit(name, d)
    if scheme == "words":
        v = sum(seeded_unit(w, d) for w in name.split())
        return v / np.linalg.norm(v)
    raise ValueError(f"unknown embedding scheme {scheme!r}")


class ClassEmbeddingTable:
    """Frozen base rows plus learnable offsets; only seen rows may move."""

    def __init__(self, names, seen, d: int, base: np.ndarray | None = None, scheme: str = "name"):
        self.names = list(names)
        self.seen = np.asarray(seen, dtype=bool)
        if len(self.seen) != len(self.names):
            raise ShapeError("one seen flag per class name is required")
        if base is None:
            base = np.stack([name_embedding(n, d, scheme) for n in self.names])
        if base.shape != (len(self.names), d):
            raise ShapeError(f"base embeddings {base.shape}, expected {(len(self.names), d)}")
        self.base = Tensor(base)
        self.offsets = Tensor(np.zeros_like(base), requires_grad=True)

    @property
    def num_classes(self) -> int:
        return len(self.names)

    @property
    def dim(self) -> int:
        return self.base.shape[1]

    def seen_ids(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.seen)]

    def unseen_ids(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(~self.seen)]

    def offset_mask(self) -> np.ndarray:
        """Boolean update mask for the offsets: unseen rows stay fixed."""
        return np.broadcast_to(self.seen[:, None], self.offsets.shape).copy()

    def embeddings(self) -> Tensor:
        return self.base + self.offsets


class PoolResult(NamedTuple):
    features: Tensor          # [N, d]
    degenerate: np.ndarray    # [N] bool, all-zero weight map


class ClassifyResult(NamedTuple):
    probs: Tensor             # [N, C] softmax over the active classes, 0 elsewhere
    logits: Tensor            # [N, C] cosine / tau, 0 outside the active classes
    degenerate: np.ndarray    # [N] bool, zero-norm segment embedding


class SegPrediction(NamedTuple):
    scores: Tensor            # O, [C, H, W]
    labels: np.ndarray        # [H, W] argmax over classes


def _weights(weights) -> Tensor:
    if isinstance(weights, Tensor):
        return weights
    if hasattr(weights, "heatmaps"):
        return weights.heatmaps
    if isinstance(weights, MaskSet):
        return weights.masks
    return Tensor(weights)


def pool(F_V: Tensor, weights) -> PoolResult:
    """``F_I[n] = sum_p w[n,p] F_V[p] / (sum_p w[n,p] + eps)`` for ``F_V [H, W, d]``."""
    w = _weights(weights)
    if F_V.ndim != 3 or w.ndim != 3 or w.shape[1:] != F_V.shape[:2]:
        raise ShapeError(f"pool: weights {w.shape} do not match feature grid {F_V.shape}")
    H, W, d = F_V.shape
    n = w.shape[0]
    w2 = nc.reshape(w, (n, H * W))
    num = w2 @ nc.reshape(F_V, (H * W, d))
    mass = nc.sum(w2, axis=1)
    out = nc.scale_rows(num, nc.reciprocal(nc.add_scalar(mass, POOL_EPS)))
    return PoolResult(out, mass.data <= 0)


def classify_segments(F_I: Tensor, table: ClassEmbeddingTable, tau: float = DEFAULT_TAU,
                      classes=None) -> ClassifyResult:
    """Cosine similarity to every class embedding over ``tau``, softmax per segment.

    ``classes`` restricts the softmax to a subset (for example the seen classes
    during training); the other columns are constant zero.
    """
    if tau <= 0:
        raise ContractError(f"temperature {tau} must be positive")
    if F_I.ndim != 2 or F_I.shape[1] != table.dim:
        raise ShapeError(f"segment embeddings {F_I.shape} do not match table width {table.dim}")
    zi = nc.l2_normalize_rows(F_I)
    zt = nc.l2_normalize_rows(table.embeddings())
    logits = nc.scale(zi @ nc.transpose(zt), 1.0 / tau)
    degenerate = np.linalg.norm(F_I.data, axis=1) < 1e-12
    C = table.num_classes
    if classes is None or len(classes) == C:
        return ClassifyResult(nc.softmax(logits, axis=1), logits, degenerate)
    cols = np.asarray(sorted(classes))
    sub = nc.softmax(logits[:, cols], axis=1)
    scatter = np.zeros((len(cols), C))
    scatter[np.arange(len(cols)), cols] = 1.0
    S = Tensor(scatter)
    return ClassifyResult(sub @ S, logits[:, cols] @ S, degenerate)


def assemble_scores(F_C: Tensor, M, size: tuple[int, int] | None = None) -> Tensor:
    """``O[c, p] = sum_n F_C[n, c] M[n, p]`` with ``M`` bilinearly resized to ``size``."""
    m = M.masks if isinstance(M, MaskSet) else M
    if size is not None:
        m = resample(m, size)
    n, H, W = m.shape
    if F_C.shape[0] != n:
        raise ShapeError(f"{F_C.shape[0]} score rows for {n} masks")
    O = nc.transpose(F_C) @ nc.reshape(m, (n, H * W))
    return nc.reshape(O, (F_C.shape[1], H, W))


def assemble_prediction(F_C: Tensor, M, size: tuple[int, int] | None = None) -> SegPrediction:
    O = assemble_scores(F_C, M, size)
    return SegPrediction(O, np.argmax(O.data, axis=0))


def training_loss(O: Tensor, gt, seen, w: LossWeights = LossWeights(), ignore: int = 255) -> Tensor:
    """Dice + focal between per-class score maps and binary targets, seen classes only.

    The per-pixel softmax runs over the seen columns of ``O`` so unseen columns
    get exactly zero gradient. Ignore pixels are dropped from both terms.
    """
    labels = gt.labels if hasattr(gt, "labels") else np.asarray(gt)
    seen = sorted(int(c) for c in seen)
    C, H, W = O.shape
    if labels.shape != (H, W):
        raise ShapeError(f"label map {labels.shape} does not match scores {(H, W)}")
    present = set(np.unique(labels).tolist()) - {ignore}
    bad = present - set(seen)
    if bad:
        raise ProtocolError(f"training labels contain non-seen classes {sorted(bad)}")
    keep = np.flatnonzero(labels.reshape(-1) != ignore)
    flat = nc.reshape(O, (C, H * W))
    s = nc.softmax(flat[np.asarray(seen)], axis=0)
    if keep.size < H * W:
        s = s[:, keep]
    lab = labels.reshape(-1)[keep]
    target = (lab[None, :] == np.asarray(seen)[:, None]).astype(np.float64)
    dice, focal = dice_focal(s, target, w)
    return nc.sum(nc.scale(dice, w.dice) + nc.scale(focal, w.focal))
