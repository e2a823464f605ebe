"""Finite-difference checks of every differentiable path, grouped by module."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import numcore as nc
from .cal import CALConfig, HeatmapDecoder
from .classify import ClassEmbeddingTable, assemble_scores, classify_segments, pool, training_loss
from .encoder import EncoderConfig, PromptConfig, SeveranceSpec, ViTEncoder
from .masks import MaskSet
from .numcore import GradTape, Tensor, grad_check
from .proposals import LossWeights, ProposalNet, ProposalNetConfig, dice_focal, mask_loss, unmatched_loss

TOLERANCE = 1e-4
TARGETS = ("numcore", "encoder", "proposals", "cal", "classify", "deop")


def check_params(loss: Callable[[], Tensor], params: dict, rng, per_param: int = 6,
                 eps: float = 1e-6) -> float:
    """Worst relative error over a few random coordinates of every parameter.

    The error per coordinate is ``|fd - ad| / max(1, |fd|, |ad|)``.
    """
    keys = list(params)
    flags = {k: params[k].requires_grad for k in keys}
    for k in keys:
        params[k].requires_grad = True
    try:
        with GradTape() as tape:
            out = loss()
        grads = dict(zip(keys, tape.gradient(out, [params[k] for k in keys])))
        worst = 0.0
        for k in keys:
            t = params[k]
            flat = t.data.reshape(-1)
            ad = grads[k].reshape(-1)
            for i in rng.choice(t.size, size=min(per_param, t.size), replace=False):
                keep = flat[i]
                flat[i] = keep + eps
                fp = loss().item()
                flat[i] = keep - eps
                fm = loss().item()
                flat[i] = keep
                fd = (fp - fm) / (2 * eps)
                worst = max(worst, abs(fd - ad[i]) / max(1.0, abs(fd), abs(ad[i])))
        return worst
    finally:
        for k in keys:
            params[k].requires_grad = flags[k]


def _numcore(rng) -> dict:
    x = Tensor(rng.normal(size=(3, 4)))
    w = Tensor(rng.normal(size=(4, 5)))
    img = Tensor(rng.normal(size=(2, 5, 5, 3)))
    k = Tensor(rng.normal(size=(3, 3, 3, 2)))
    g, b = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=4))
    r34, rimg = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=img.shape))
    cases = {
        "matmul": lambda t: nc.sum(nc.gelu(t @ w)),
        "softmax": lambda t: nc.sum(nc.softmax(t, axis=1) * Tensor(np.arange(12.0).reshape(3, 4))),
        "log_softmax": lambda t: nc.sum(nc.log_softmax(t, axis=0) * Tensor(np.linspace(0, 1, 12).reshape(3, 4))),
        "layer_norm": lambda t: nc.sum(nc.sigmoid(nc.layer_norm(t, g, b))),
        "gelu": lambda t: nc.sum(nc.gelu(t)),
        "l2_normalize": lambda t: nc.sum(nc.l2_normalize_rows(t) * r34),
        "scale_rows": lambda t: nc.sum(nc.scale_rows(t, nc.exp(nc.sum(t, axis=1))) * t),
    }
    out = {k_: grad_check(f, x) for k_, f in cases.items()}
    out["conv2d"] = grad_check(lambda t: nc.sum(nc.sigmoid(nc.conv2d(t, k, pad=1))), img,
                               coords=range(0, img.size, 7))
    out["batch_norm"] = grad_check(
        lambda t: nc.sum(nc.sigmoid(nc.batch_norm(t, Tensor(np.ones(3)), Tensor(np.zeros(3))))
                         * rimg), img, coords=range(0, img.size, 11))
    return out


def tiny_encoder_config(severance: SeveranceSpec | None = None, prompt: str = "off",
                        frozen: bool = False) -> EncoderConfig:
    """16 tokens, d=8, two layers."""
    sev = severance or SeveranceSpec.last_layer(2, "gps", 0.5)
    return EncoderConfig(8, 2, 8, 2, 2, 3, 2, sev, PromptConfig.parse(prompt), frozen)


def _encoder(rng) -> dict:
    out = {}
    masks = MaskSet(Tensor(rng.random((3, 4, 4))))
    for name, sev in (("plain", SeveranceSpec.none(2)), ("gps", SeveranceSpec.last_layer(2, "gps", 0.5)),
                      ("mps", SeveranceSpec.parse("none,mps"))):
        enc = ViTEncoder(tiny_encoder_config(sev, "add"), seed=1)
        enc.prompt_params["prompt"].data[...] = rng.normal(0, 0.1, (16, 8))
        image = rng.random((3, 8, 8))
        probe = Tensor(rng.normal(size=(4, 4, 8)))
        loss = lambda: nc.sum(enc(image, masks) * probe)  # noqa: E731
        out[name] = check_params(loss, enc.trainable(), rng, 4)
    return out


def _proposals(rng) -> dict:
    w = LossWeights()
    p = Tensor(rng.uniform(0.05, 0.95, (3, 16)))
    g = (rng.random((3, 16)) < 0.4).astype(float)
    out = {
        "dice": grad_check(lambda t: nc.sum(dice_focal(t, g, w)[0]), p),
        "focal": grad_check(lambda t: nc.sum(dice_focal(t, g, w)[1]), p),
    }
    gt = MaskSet(Tensor(g.reshape(3, 4, 4)))
    assign = [(0, 1), (2, 0)]
    out["mask_loss"] = grad_check(lambda t: mask_loss(MaskSet(nc.reshape(t, (3, 4, 4))), gt, assign, w), p)
    out["unmatched_loss"] = grad_check(
        lambda t: unmatched_loss(MaskSet(nc.reshape(t, (3, 4, 4))), assign, w), p)
    cfg = ProposalNetConfig(16, 3, (4, 4, 4), 8, 3, 1, 2)
    net = ProposalNet(cfg, seed=2)
    image = rng.random((3, 16, 16))
    gtm = MaskSet(Tensor((rng.random((2, 4, 4)) < 0.5).astype(float)))
    out["network"] = check_params(lambda: mask_loss(net(image), gtm, [(0, 0), (1, 1)], w), net.params, rng, 2)
    return out


def _cal(rng) -> dict:
    F_V = Tensor(rng.normal(size=(4, 4, 8)))
    M = MaskSet(Tensor(rng.random((3, 4, 4))))
    probe = Tensor(rng.normal(size=(3, 4, 4)))
    out = {}
    for kind, K in (("query", 0), ("query", 1), ("conv", 1)):
        dec = HeatmapDecoder(CALConfig(kind, K, 3, 2, 6), 8, seed=3)
        out[f"{kind}{K}.params"] = check_params(lambda: nc.sum(dec(F_V, M).heatmaps * probe), dec.params, rng, 3)
        out[f"{kind}{K}.features"] = grad_check(lambda t: nc.sum(dec(t, M).heatmaps * probe), F_V,
                                                 coords=range(0, F_V.size, 5))
    return out


def _classify(rng) -> dict:
    table = ClassEmbeddingTable(["a", "b", "c"], [True, True, False], 8)
    table.offsets.data[...] = rng.normal(0, 0.1, table.offsets.shape)
    F_V = Tensor(rng.normal(size=(4, 4, 8)))
    W = Tensor(rng.random((2, 4, 4)))
    labels = np.array([[0, 0, 1, 1]] * 4)
    r28, r388 = Tensor(rng.normal(size=(2, 8))), Tensor(rng.normal(size=(3, 8, 8)))
    out = {
        "pool": grad_check(lambda t: nc.sum(pool(t, W).features * r28), F_V),
        "classify": grad_check(lambda t: nc.sum(classify_segments(pool(t, W).features, table, 0.5).probs
                                                * Tensor(np.arange(6.0).reshape(2, 3))), F_V),
        "assemble": grad_check(lambda t: nc.sum(assemble_scores(t, W, (8, 8)) * r388),
                               Tensor(rng.random((2, 3)))),
        "training_loss": grad_check(lambda t: training_loss(t, labels, [0, 1]), Tensor(rng.normal(size=(3, 4, 4)))),
    }
    return out


def deop_loss_fn(kind: str, seed: int = 0):
    """A 2-class 8x8 sample through the full trainable path; returns (loss closure, params)."""
    rng = np.random.default_rng(seed)
    enc = ViTEncoder(tiny_encoder_config(SeveranceSpec.last_layer(2, "gps", 1.0), "add", frozen=True), seed)
    enc.prompt_params["prompt"].data[...] = rng.normal(0, 0.1, (16, 8))
    table = ClassEmbeddingTable(["left thing", "right thing"], [True, True], 8)
    dec = HeatmapDecoder(CALConfig(kind, 1, 2, 2, 6), 8, seed=seed + 1)
    image = rng.random((3, 8, 8))
    labels = np.zeros((8, 8), dtype=int)
    labels[:, 4:] = 1
    soft = np.stack([(labels == 0), (labels == 1)]).astype(float) * 0.8 + 0.1
    masks = MaskSet(Tensor(soft))

    def loss():
        F_V = enc(image, masks)
        r = classify_segments(pool(F_V, dec(F_V, masks)).features, table, 0.5)
        return training_loss(assemble_scores(r.logits, masks, (8, 8)), labels, [0, 1])

    params = {"prompt": enc.prompt_params["prompt"], "offsets": table.offsets}
    params.update({f"cal.{k}": v for k, v in dec.params.items()})
    return loss, params


def _deop(rng) -> dict:
    out = {}
    for kind in ("query", "conv"):
        loss, params = deop_loss_fn(kind)
        out[kind] = check_params(loss, params, rng, 4)
    return out


_RUNNERS = {"numcore": _numcore, "encoder": _encoder, "proposals": _proposals, "cal": _cal,
            "classify": _classify, "deop": _deop}


def run(targets=TARGETS, seed: int = 0) -> dict[str, dict[str, float]]:
    """``{module: {check: max relative error}}`` for the requested modules."""
    out = {}
    for t in targets:
        if t not in _RUNNERS:
            raise ValueError(f"unknown gradcheck target {t!r}; expected one of {', '.join(TARGETS)}")
        out[t] = _RUNNERS[t](np.random.default_rng(seed))
    return out
