"""One-pass versus multi-pass classification cost: an analytic FLOP model and wall-clock timing.

FLOP conventions: a multiply-accumulate is 2 FLOPs, so a dense ``[n, a] @ [a, b]``
costs ``2nab``; elementwise work is charged per element with the weights in
``CostModel`` (layer norm 8, softmax 4, GELU 8, ReLU 1, add 1).
"""

from __future__ import annotations

import csv
import dataclasses
import io
import statistics
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .cal import CALConfig
from .classify import classify_segments, pool
from .encoder import EncoderConfig, PromptConfig, SeveranceSpec, ViTEncoder
from .masks import MaskSet, resample_array
from .numcore import Tensor


@dataclass(frozen=True)
class CostModel:
    """Per-element charges for non-matmul work."""

    layer_norm: int = 8       # mean, variance, normalize, affine
    softmax: int = 4          # max shift, exp, sum, divide
    gelu: int = 8
    relu: int = 1
    add: int = 1
    batch_norm: int = 8

    # -------------------------------------------------------------- primitives
    def linear(self, n: int, fin: int, fout: int, bias: bool = True) -> int:
        return 2 * n * fin * fout + (n * fout if bias else 0)

    def attention_core(self, nq: int, nk: int, d: int, heads: int) -> int:
        """Scores, scaling, softmax and weighted sum for ``heads`` heads of width ``d/heads``."""
        return 2 * nq * nk * d + heads * nq * nk + self.softmax * heads * nq * nk + 2 * nq * nk * d

    def mlp(self, n: int, d: int, hidden: int) -> int:
        return self.linear(n, d, hidden) + self.gelu * n * hidden + self.linear(n, hidden, d)

    # ---------------------------------------------------------------- encoder
    def patch_embed(self, cfg: EncoderConfig) -> int:
        T, d = cfg.num_patches, cfg.embed_dim
        pp = cfg.in_channels * cfg.patch_size ** 2
        return self.linear(T, pp, d) + self.add * T * d

    def block(self, cfg: EncoderConfig, T: int, mode: str = "none", alpha: float = 0.0,
              n_masks: int = 0) -> int:
        """One pre-norm transformer block over ``T`` tokens with the given severance."""
        d, h = cfg.embed_dim, cfg.num_heads
        f = 2 * self.layer_norm * T * d + self.linear(T, d, 3 * d) + self.linear(T, d, d)
        if mode == "none" or (mode == "gps" and alpha == 0.0):
            f += self.attention_core(T, T, d, h)
        elif mode == "gps" and alpha < 1.0:
            f += self.attention_core(T, T, d, h) + 3 * h * T * T
        elif mode == "mps":
            P = cfg.num_patches
            f += 2 * P * P * n_masks + 2 * P * P + 2 * T * T * d
        # gps with alpha == 1 passes the values through unchanged
        f += self.mlp(T, d, cfg.mlp_ratio * d) + 2 * self.add * T * d
        return f

    def encoder(self, cfg: EncoderConfig, n_masks: int = 0) -> int:
        T = cfg.num_patches + int(cfg.class_token)
        if cfg.prompt.mode == "prepend":
            T += cfg.prompt.length
        f = self.patch_embed(cfg)
        if cfg.prompt.mode == "add":
            f += self.add * cfg.num_patches * cfg.embed_dim
        for mode, alpha in cfg.severance.layers:
            f += self.block(cfg, T, mode, alpha, n_masks)
        return f + self.layer_norm * T * cfg.embed_dim

    # -------------------------------------------------------------- decoders
    def resample(self, n: int, src: int, dst: int) -> int:
        """Separable bilinear resize of ``n`` square maps."""
        if src == dst:
            return 0
        return 2 * n * dst * src * src + 2 * n * dst * src * dst

    def query_decoder(self, cal: CALConfig, d: int, tokens: int) -> int:
        N, h = cal.num_queries, cal.num_heads
        f = 0
        for _ in range(cal.layers):
            f += self.linear(N, d, 3 * d) + self.attention_core(N, N, d, h) + self.linear(N, d, d)
            f += self.linear(N, d, d) + self.linear(tokens, d, 2 * d)
            f += self.attention_core(N, tokens, d, h) + self.linear(N, d, d)
            f += self.mlp(N, d, 4 * d)
            f += 3 * (self.add * N * d + self.layer_norm * N * d)
        f += self.linear(N, d, 3 * d) + self.attention_core(N, N, d, h) + self.linear(N, d, d)
        f += self.add * N * d + self.layer_norm * N * d
        # heatmap: similarity, scaling, spatial softmax, mask gating
        f += 2 * N * tokens * d + N * tokens + self.softmax * N * tokens + N * tokens
        return f

    def conv_decoder(self, cal: CALConfig, d: int, tokens: int) -> int:
        N, w = cal.num_queries, cal.conv_width
        f = N * tokens * d
        cin = d
        for _ in range(cal.layers):
            f += 2 * 9 * cin * w * N * tokens + N * tokens * w
            f += (self.batch_norm + self.relu) * N * tokens * w
            cin = w
        f += 2 * 9 * cin * N * tokens + N * tokens
        return f + self.softmax * N * tokens

    def pool_classify(self, N: int, tokens: int, d: int, C: int) -> int:
        f = 2 * N * tokens * d + N * tokens + 2 * N * d          # weighted sum, mass, divide
        f += 3 * N * d + 3 * C * d                               # row normalization
        return f + 2 * N * C * d + N * C + self.softmax * N * C


def flops_one_pass(enc: EncoderConfig, cal: CALConfig | None, N: int, num_classes: int,
                   mask_grid: int | None = None, model: CostModel = CostModel()) -> dict:
    """FLOPs of the one-pass stream split into its terms; ``total`` sums them."""
    T, d = enc.num_patches, enc.embed_dim
    g = enc.grid
    terms = {"encoder": model.encoder(enc, N)}
    terms["masks"] = model.resample(N, mask_grid, g) if mask_grid else 0
    if cal is None:
        terms["cal"] = 0
    else:
        if cal.num_queries != N:
            cal = dataclasses.replace(cal, num_queries=N)
        terms["cal"] = (model.query_decoder(cal, d, T) if cal.kind == "query"
                        else model.conv_decoder(cal, d, T))
    terms["pool_classify"] = model.pool_classify(N, T, d, num_classes)
    terms["total"] = sum(terms.values())
    return terms


def plain_encoder_config(enc: EncoderConfig) -> EncoderConfig:
    """The same encoder without severance or prompts, as a multi-pass method would run it."""
    return dataclasses.replace(enc, severance=SeveranceSpec.none(enc.num_layers),
                               prompt=PromptConfig("off"))


def flops_multi_pass(enc: EncoderConfig, n_prime: int, model: CostModel = CostModel()) -> int:
    """``n_prime`` full passes of the plain encoder, one per resized crop."""
    if n_prime < 1:
        raise ValueError("n_prime must be >= 1")
    return n_prime * model.encoder(plain_encoder_config(enc))


# ------------------------------------------------------------------ timing

def masked_crop(image: np.ndarray, mask: np.ndarray, size: int) -> np.ndarray:
    """Bounding box of ``mask >= 0.5``, pixels outside the mask zeroed, resized to ``size``.

    ``image`` is ``[C, H, W]``; ``mask`` is any resolution and is resized to
    the image first. An empty mask falls back to the whole image.
    """
    C, H, W = image.shape
    m = resample_array(mask[None], (H, W))[0] >= 0.5
    if not m.any():
        return resample_array(image, (size, size))
    ys, xs = np.nonzero(m)
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    crop = (image * m)[:, y0:y1, x0:x1]
    return resample_array(crop, (size, size))


class MultiPass:
    """Classify each proposal by encoding its masked crop separately."""

    def __init__(self, encoder: ViTEncoder, table, tau: float, normalize):
        cfg = plain_encoder_config(encoder.cfg)
        self.encoder = ViTEncoder(cfg, 0)
        self.encoder.params = encoder.params
        self.table, self.tau, self.normalize = table, tau, normalize
        g = cfg.grid
        self._all = np.ones((1, g, g))

    def classify(self, image: np.ndarray, masks: np.ndarray, n_prime: int, full: bool = False):
        size = self.encoder.cfg.image_size
        feats = []
        for i in range(n_prime):
            crop = image if full else masked_crop(image, masks[i % len(masks)], size)
            F_V = self.encoder(self.normalize(crop))
            feats.append(pool(F_V, self._all).features.data[0])
        return classify_segments(Tensor(np.stack(feats)), self.table, self.tau).probs.data


@dataclass
class BenchRow:
    n_prime: int
    flops_one: int
    flops_multi: int
    t_one_ms: float
    t_multi_ms: float

    @property
    def ratio_flops(self) -> float:
        return self.flops_multi / self.flops_one

    @property
    def ratio_time(self) -> float:
        return self.t_multi_ms / self.t_one_ms


@dataclass
class BenchReport:
    rows: list[BenchRow]
    n_images: int
    warmup: int
    extra: dict = field(default_factory=dict)

    COLUMNS = ("n_prime", "flops_one", "flops_multi", "ratio_flops", "t_one_ms", "t_multi_ms",
               "ratio_time")

    def row(self, n_prime: int) -> BenchRow:
        return next(r for r in self.rows if r.n_prime == n_prime)

    def _values(self, r: BenchRow) -> list:
        return [r.n_prime, r.flops_one, r.flops_multi, f"{r.ratio_flops:.4f}", f"{r.t_one_ms:.3f}",
                f"{r.t_multi_ms:.3f}", f"{r.ratio_time:.4f}"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows:
            w.writerow(self._values(r))
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"images = {self.n_images}", f"warmup = {self.warmup}"]
        lines += [f"{k} = {v}" for k, v in self.extra.items()]
        for r in self.rows:
            for k, v in zip(self.COLUMNS[1:], self._values(r)[1:]):
                lines.append(f"n{r.n_prime}.{k} = {v}")
        return "\n".join(lines) + "\n"


def _median_ms(fn, items, warmup: int) -> float:
    times = []
    for i, item in enumerate(items):
        t0 = time.perf_counter()
        fn(item)
        dt = time.perf_counter() - t0
        if i >= warmup:
            times.append(dt * 1000.0)
    return statistics.median(times)


def timed_compare(stream, samples: list, masks: list[MaskSet], n_primes, n_images: int = 20,
                  warmup: int = 3, normalize=None) -> BenchReport:
    """Median per-image wall-clock of the one-pass stream and of ``N'``-crop multi-pass.

    Runs with BLAS limited to one thread. The one-pass time covers the encoder,
    heatmap decoder, pooling and classification; the multi-pass time covers
    cropping, ``N'`` encoder passes and classification.
    """
    if not samples:
        raise ValueError("timed_compare needs at least one image")
    if normalize is None:
        from .pipeline import normalize_image as normalize
    total = warmup + n_images
    idx = [i % len(samples) for i in range(total)]
    items = [(samples[i].image.data, masks[i]) for i in idx]
    multi = MultiPass(stream.encoder, stream.table, stream.cfg.tau, normalize)
    enc_cfg = stream.encoder.cfg
    cal = stream.decoder.cfg if stream.decoder is not None else None
    N = masks[0].n
    one = flops_one_pass(enc_cfg, cal, N, stream.table.num_classes, masks[0].grid[0])
    rows = []
    with threadpool_limits(limits=1):
        t_one = _median_ms(lambda it: stream.segment_scores(it[0], it[1]), items, warmup)
        for n_prime in n_primes:
            t_multi = _median_ms(lambda it: multi.classify(it[0], it[1].numpy(), n_prime), items, warmup)
            rows.append(BenchRow(n_prime, one["total"], flops_multi_pass(enc_cfg, n_prime),
                                 t_one, t_multi))
    extra = {f"flops_one.{k}": v for k, v in one.items() if k != "total"}
    return BenchReport(rows, n_images, warmup, extra)


def time_encoder_only(encoder: ViTEncoder, images: list, warmup: int = 3, normalize=None) -> float:
    """Median milliseconds of one plain encoder pass per image (single-threaded)."""
    if normalize is None:
        from .pipeline import normalize_image as normalize
    with threadpool_limits(limits=1):
        return _median_ms(lambda im: encoder(normalize(im)), images, warmup)
