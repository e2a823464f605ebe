"""Run configuration: a flat ``key = value`` file plus command-line overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .cal import CALConfig
from .encoder import EncoderConfig, PromptConfig, SeveranceSpec
from .proposals import ProposalNetConfig

MODES = ("baseline", "baseline+", "+ps", "+cal", "deop")


class ConfigFileError(ValueError):
    pass


def _doc(default, help_: str, unit: str = ""):
    return dataclasses.field(default=default, metadata={"help": help_, "unit": unit})


@dataclass
class RunConfig:
    data: str = _doc("data", "dataset directory produced by gen-data", "path")
    out: str = _doc("run", "output directory for checkpoints and reports", "path")
    seed: int = _doc(0, "master seed for initialization and sample order")

    image_size: int = _doc(64, "input side length", "px")
    patch_size: int = _doc(8, "encoder patch side", "px")
    embed_dim: int = _doc(32, "encoder width d")
    num_layers: int = _doc(4, "encoder blocks L")
    num_heads: int = _doc(2, "attention heads in encoder and heatmap decoder")
    mlp_ratio: int = _doc(4, "encoder MLP hidden width / d")
    severance: str = _doc("auto", "per-layer severance list, e.g. none,none,none,gps:1.0; "
                                  "auto derives it from mode")
    prompt: str = _doc("add", "visual prompt mode: off | add | prepend:<n>")

    pretrain_steps: int = _doc(20000, "encoder alignment pretraining steps", "samples")
    pretrain_lr: float = _doc(1e-3, "pretraining peak learning rate (Adam)")
    pretrain_classes: str = _doc("all", "classes rendered for pretraining: all | seen")
    class_embedding: str = _doc("name", "class vectors: name (one seeded Gaussian per name) | "
                                        "words (sum of per-word Gaussians)")

    prop_channels: str = _doc("16,32,32", "proposal backbone channels per stride-2 stage")
    prop_embed: int = _doc(32, "proposal pixel/mask embedding width")
    num_queries: int = _doc(8, "proposals per image N")
    prop_layers: int = _doc(2, "proposal transformer decoder layers")
    prop_steps: int = _doc(5000, "proposal training steps", "samples")
    prop_lr: float = _doc(3e-3, "proposal peak learning rate")
    prop_optimizer: str = _doc("adam", "sgd | adam")
    prop_augment: int = _doc(1, "random flips/rotations of proposal training images (0 or 1)")
    prop_empty_weight: float = _doc(0.2, "weight of the empty-mask loss on unmatched queries")

    mode: str = _doc("deop", "classification stream: baseline | baseline+ | +ps | +cal | deop")
    cal_kind: str = _doc("query", "heatmap decoder: query | conv")
    cal_layers: int = _doc(1, "heatmap decoder depth K")
    cal_width: int = _doc(64, "conv decoder channels")
    steps: int = _doc(1000, "classification-stream training steps", "batches")
    batch: int = _doc(8, "images per step")
    lr: float = _doc(0.002, "classification-stream learning rate")
    optimizer: str = _doc("sgd", "sgd | adam")
    lr_schedule: str = _doc("constant", "classification-stream learning rate schedule: constant | cosine "
                                        "(linear warmup then cosine decay)")
    offset_lr_scale: float = _doc(0.01, "learning-rate multiplier for the seen-class embedding offsets")
    tau: float = _doc(0.07, "cosine-similarity temperature")
    score_mode: str = _doc("softmax", "segment scores combined with masks: softmax | raw")

    recall_thresholds: str = _doc("0.3,0.5", "IoU thresholds for proposal recall")
    log_every: int = _doc(100, "steps between loss log lines")

    # ---------------------------------------------------------------- helpers
    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigFileError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        for key, allowed in (("pretrain_classes", ("seen", "all")),
                             ("class_embedding", ("name", "words")), ("score_mode", ("softmax", "raw")),
                             ("optimizer", ("sgd", "adam")), ("lr_schedule", ("constant", "cosine")),
                             ("prop_optimizer", ("sgd", "adam")),
                             ("cal_kind", ("query", "conv"))):
            if getattr(self, key) not in allowed:
                raise ConfigFileError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")

    @property
    def uses_ps(self) -> bool:
        return self.mode in ("+ps", "deop")

    @property
    def uses_cal(self) -> bool:
        return self.mode in ("+cal", "deop")

    @property
    def uses_visual_prompt(self) -> bool:
        return self.mode != "baseline"

    def severance_spec(self) -> SeveranceSpec:
        if self.severance != "auto":
            return SeveranceSpec.parse(self.severance)
        if self.uses_ps:
            return SeveranceSpec.last_layer(self.num_layers, "gps", 1.0)
        return SeveranceSpec.none(self.num_layers)

    def encoder_config(self, frozen: bool = True) -> EncoderConfig:
        prompt = PromptConfig.parse(self.prompt) if self.uses_visual_prompt else PromptConfig("off")
        return EncoderConfig(self.image_size, self.patch_size, self.embed_dim, self.num_layers,
                             self.num_heads, 3, self.mlp_ratio, self.severance_spec(), prompt, frozen)

    def proposal_config(self) -> ProposalNetConfig:
        ch = tuple(int(c) for c in self.prop_channels.split(","))
        return ProposalNetConfig(self.image_size, 3, ch, self.prop_embed, self.num_queries,
                                 self.prop_layers, self.num_heads)

    def cal_config(self) -> CALConfig:
        return CALConfig(self.cal_kind, self.cal_layers, self.num_queries, self.num_heads, self.cal_width)

    def thresholds(self) -> list[float]:
        return [float(t) for t in self.recall_thresholds.split(",") if t.strip()]

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, value: str):
    f = _FIELDS.get(key)
    if f is None:
        raise ConfigFileError(f"unknown config key {key!r}")
    kind = type(f.default)
    try:
        return kind(value)
    except ValueError as exc:
        raise ConfigFileError(f"{key}: cannot read {value!r} as {kind.__name__}") from exc


def parse_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigFileError(f"{source}:{n}: expected key = value")
        key = key.strip().replace("-", "_")
        out[key] = _coerce(key, value.strip())
    return out


def build(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    values = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        values.update(parse_text(p.read_text(), str(p)))
    for k, v in (overrides or {}).items():
        values[k] = _coerce(k, v) if isinstance(v, str) else v
    return RunConfig(**values)


def reference_text() -> str:
    """Every key with its default, unit and meaning (for the README and --help)."""
    rows = []
    for f in fields(RunConfig):
        unit = f" [{f.metadata['unit']}]" if f.metadata.get("unit") else ""
        rows.append(f"{f.name} = {f.default}{unit}  # {f.metadata['help']}")
    return "\n".join(rows)
