"""Miniature ViT encoder with per-layer patch severance and visual prompts."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import numcore as nc
from .masks import MaskSet, resample_array
from .numcore import ContractError, ShapeError, Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SeveranceSpec:
    """Attention mixing per layer: ``("none", 0.0)``, ``("gps", alpha)`` or ``("mps", 0.0)``."""

    layers: tuple

    def __post_init__(self):
        for mode, alpha in self.layers:
            if mode not in ("none", "gps", "mps"):
                raise ConfigError(f"unknown severance mode {mode!r}")
            if not 0.0 <= alpha <= 1.0:
                raise ContractError(f"severance alpha {alpha} outside [0, 1]")

    @classmethod
    def none(cls, num_layers: int) -> "SeveranceSpec":
        return cls(tuple(("none", 0.0) for _ in range(num_layers)))

    @classmethod
    def last_layer(cls, num_layers: int, mode: str = "gps", alpha: float = 1.0) -> "SeveranceSpec":
        layers = [("none", 0.0)] * (num_layers - 1) + [(mode, alpha if mode == "gps" else 0.0)]
        return cls(tuple(layers))

    @classmethod
    def parse(cls, text: str) -> "SeveranceSpec":
        """Parse ``"none,none,none,gps:1.0"`` (``mps`` takes no argument)."""
        layers = []
        for item in text.split(","):
            item = item.strip()
            mode, _, arg = item.partition(":")
            layers.append((mode, float(arg) if arg else 0.0))
        return cls(tuple(layers))

    def __str__(self) -> str:
        return ",".join(f"gps:{a:g}" if m == "gps" else m for m, a in self.layers)

    @property
    def uses_masks(self) -> bool:
        return any(m == "mps" for m, _ in self.layers)


@dataclass(frozen=True)
class PromptConfig:
    mode: str = "add"       # off | prepend | add
    length: int = 0         # prompt count for prepend mode

    def __post_init__(self):
        if self.mode not in ("off", "prepend", "add"):
            raise ConfigError(f"unknown prompt mode {self.mode!r}")
        if self.mode == "prepend" and self.length < 1:
            raise ConfigError("prepend prompts need length >= 1")

    @classmethod
    def parse(cls, text: str) -> "PromptConfig":
        mode, _, arg = text.partition(":")
        return cls(mode, int(arg) if arg else 0)

    def __str__(self) -> str:
        return f"prepend:{self.length}" if self.mode == "prepend" else self.mode


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 32
    num_layers: int = 4
    num_heads: int = 2
    in_channels: int = 3
    mlp_ratio: int = 4
    severance: SeveranceSpec | None = None
    prompt: PromptConfig = field(default_factory=PromptConfig)
    frozen: bool = True
    class_token: bool = False

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.embed_dim % self.num_heads:
            raise ConfigError("embed_dim must be divisible by num_heads")
        if self.severance is None:
            object.__setattr__(self, "severance", SeveranceSpec.last_layer(self.num_layers))
        if len(self.severance.layers) != self.num_layers:
            raise ConfigError(f"severance has {len(self.severance.layers)} entries, "
                              f"expected {self.num_layers}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    def architecture(self) -> dict:
        """Fields that determine parameter shapes (checkpoint fingerprint)."""
        return {k: getattr(self, k) for k in ("image_size", "patch_size", "embed_dim", "num_layers",
                                              "num_heads", "in_channels", "mlp_ratio", "class_token")}


# ------------------------------------------------------------------ operations

def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """``[C, H, W]`` -> ``[tokens, C*p*p]`` with row-major patch order."""
    C, H, W = image.shape
    g_h, g_w = H // patch, W // patch
    x = image.reshape(C, g_h, patch, g_w, patch).transpose(1, 3, 0, 2, 4)
    return x.reshape(g_h * g_w, C * patch * patch)


def patch_embed(image, cfg: EncoderConfig, params: dict) -> Tensor:
    """Linear projection of non-overlapping patches plus positional embedding."""
    img = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
    if img.shape != expected:
        raise ShapeError(f"patch_embed: image {img.shape}, expected {expected}")
    patches = Tensor(patchify(img, cfg.patch_size))
    tokens = nn.linear(patches, params["patch.w"], params["patch.b"])
    return tokens + params["pos"]


def apply_prompts(tokens: Tensor, prompt: PromptConfig, prompt_param: Tensor | None) -> Tensor:
    if prompt.mode == "off":
        return tokens
    if prompt.mode == "prepend":
        if prompt_param is None or prompt_param.shape[1] != tokens.shape[1]:
            raise ShapeError("prepend prompt width does not match tokens")
        return nc.concat([prompt_param, tokens], axis=0)
    if prompt_param is None or prompt_param.shape != tokens.shape:
        raise ShapeError(f"add prompt shape {None if prompt_param is None else prompt_param.shape}"
                         f" does not match tokens {tokens.shape}")
    return tokens + prompt_param


def _identity_heads(n_heads: int, T: int) -> Tensor:
    return Tensor(np.broadcast_to(np.eye(T), (n_heads, T, T)))


def gps_attention(x: Tensor, alpha: float, params: dict, prefix: str, n_heads: int) -> Tensor:
    """Self-attention whose per-head weights are ``alpha*I + (1-alpha)*softmax(QK^T/sqrt(dh))``."""
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"gps alpha {alpha} outside [0, 1]")
    q, k, v = nn.qkv_heads(x, params, prefix, n_heads)
    if alpha == 1.0:
        mixed = v
    else:
        w = nn.attention_probs(q, k)
        if alpha > 0.0:
            w = nc.scale(w, 1.0 - alpha) + nc.scale(_identity_heads(n_heads, x.shape[0]), alpha)
        mixed = w @ v
    out = nn.merge_heads(mixed)
    return nn.linear(out, params[f"{prefix}.proj_w"], params[f"{prefix}.proj_b"])


def mps_weights(token_masks: np.ndarray, n_prefix: int = 0) -> np.ndarray:
    """Row-normalized mask-guided attention ``A[i] = sum_j M[j, i] * M[j]``.

    ``token_masks`` is ``[N, patches]``. Rows with no mass attend to themselves;
    prefix tokens (prompts, class token) attend only to themselves.
    """
    M = np.asarray(token_masks, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] == 0:
        raise ContractError("mps attention needs a non-empty [N, tokens] mask set")
    A = M.T @ M
    rows = A.sum(axis=1, keepdims=True)
    empty = rows[:, 0] <= 0
    A = np.divide(A, rows, out=np.zeros_like(A), where=rows > 0)
    A[empty, empty] = 0.0
    A[np.flatnonzero(empty), np.flatnonzero(empty)] = 1.0
    T = n_prefix + M.shape[1]
    W = np.eye(T)
    W[n_prefix:, n_prefix:] = A
    return W


def mps_attention(x: Tensor, masks: MaskSet, grid: int, params: dict, prefix: str,
                  n_heads: int, n_prefix: int = 0) -> Tensor:
    if masks is None or masks.n == 0:
        raise ContractError("mps attention requires a non-empty MaskSet")
    token_masks = resample_array(masks.numpy(), (grid, grid)).reshape(masks.n, -1)
    W = mps_weights(token_masks, n_prefix)
    if W.shape[0] != x.shape[0]:
        raise ShapeError(f"mps weights {W.shape} do not match {x.shape[0]} tokens")
    _, _, v = nn.qkv_heads(x, params, prefix, n_heads)
    out = nn.merge_heads(Tensor(np.broadcast_to(W, (n_heads,) + W.shape)) @ v)
    return nn.linear(out, params[f"{prefix}.proj_w"], params[f"{prefix}.proj_b"])


# --------------------------------------------------------------------- encoder

class ViTEncoder:
    """Encoder body parameters live in ``params``; prompts in ``prompt_params``."""

    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d, pp = cfg.embed_dim, cfg.in_channels * cfg.patch_size ** 2
        p = {"patch.w": nn.linear_init(rng, pp, d), "patch.b": nn.zeros(d),
             "pos": nn.normal(rng, (cfg.num_patches, d), 0.02)}
        if cfg.class_token:
            p["cls"] = nn.normal(rng, (1, d), 0.02)
        for i in range(cfg.num_layers):
            p.update(nn.init_layer_norm(f"blk{i}.ln1", d))
            p.update(nn.init_attention(rng, f"blk{i}.attn", d))
            p.update(nn.init_layer_norm(f"blk{i}.ln2", d))
            p.update(nn.init_mlp(rng, f"blk{i}.mlp", d, cfg.mlp_ratio * d))
        p.update(nn.init_layer_norm("ln_f", d))
        self.params = p
        self.prompt_params = {}
        if cfg.prompt.mode == "add":
            self.prompt_params["prompt"] = nn.zeros(cfg.num_patches, d)
        elif cfg.prompt.mode == "prepend":
            self.prompt_params["prompt"] = nn.normal(rng, (cfg.prompt.length, d), 0.02)
        self.set_frozen(cfg.frozen)

    def set_frozen(self, frozen: bool) -> None:
        self.frozen = frozen
        for t in self.params.values():
            t.requires_grad = not frozen

    def trainable(self) -> dict:
        out = dict(self.prompt_params)
        if not self.frozen:
            out.update(self.params)
        return out

    def all_params(self) -> dict:
        out = dict(self.params)
        out.update({f"prompt.{k}": v for k, v in self.prompt_params.items()})
        return out

    @property
    def n_prefix(self) -> int:
        n = int(self.cfg.class_token)
        if self.cfg.prompt.mode == "prepend":
            n += self.cfg.prompt.length
        return n

    def tokens(self, image, masks: MaskSet | None = None, trace: list | None = None,
               severance: SeveranceSpec | None = None) -> Tensor:
        """Final token sequence ``[prefix + patches, d]`` after the last layer norm."""
        cfg = self.cfg
        sev = severance or cfg.severance
        if sev.uses_masks and masks is None:
            raise ConfigError("mps severance requested but no MaskSet supplied")
        p = self.params
        x = patch_embed(image, cfg, p)
        x = apply_prompts(x, cfg.prompt, self.prompt_params.get("prompt"))
        if cfg.class_token:
            x = nc.concat([p["cls"], x], axis=0)
        for i, (mode, alpha) in enumerate(sev.layers):
            h = nn.layer_norm(x, p, f"blk{i}.ln1")
            if mode == "mps":
                a = mps_attention(h, masks, cfg.grid, p, f"blk{i}.attn", cfg.num_heads, self.n_prefix)
            elif mode == "gps":
                a = gps_attention(h, alpha, p, f"blk{i}.attn", cfg.num_heads)
            else:
                a = nn.self_attention(h, p, f"blk{i}.attn", cfg.num_heads)
            if trace is not None:
                trace.append(a)
            x = x + a
            x = x + nn.mlp(nn.layer_norm(x, p, f"blk{i}.ln2"), p, f"blk{i}.mlp")
        return nn.layer_norm(x, p, "ln_f")

    def encode(self, image, masks: MaskSet | None = None, trace: list | None = None,
               severance: SeveranceSpec | None = None) -> Tensor:
        """Visual feature map ``F_V`` of shape ``[grid, grid, d]``."""
        x = self.tokens(image, masks, trace, severance)
        if self.n_prefix:
            x = x[self.n_prefix:]
        g = self.cfg.grid
        return nc.reshape(x, (g, g, self.cfg.embed_dim))

    __call__ = encode
