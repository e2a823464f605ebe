"""Training stages, evaluation and artifact I/O for the two-stream segmenter.

Stages, each producing one checkpoint in the run directory:

    pretrain_encoder  ->  encoder.ckpt   region/class-embedding alignment on
                                         procedurally rendered scenes
    train_proposals   ->  proposals.ckpt class-agnostic masks, Hungarian + dice/focal
    train_deop        ->  stream-<mode>.ckpt  prompts, class offsets, heatmap decoder

The encoder body and the proposal network are frozen after their own stage.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import numcore as nc
from .cal import HeatmapDecoder, token_masks
from .classify import ClassEmbeddingTable, assemble_scores, classify_segments, pool, training_loss
from .config import RunConfig
from .encoder import PromptConfig, SeveranceSpec, ViTEncoder
from .masks import MaskSet
from .metrics import SegLabelMap, EvalReport, best_proposal_iou, build_report, confusion_matrix
from .numcore import GradTape, Tensor
from .optim import Adam, make_optimizer
from .proposals import ProposalNet, gt_segments, hungarian_match, mask_loss, unmatched_loss
from .synthdata import Manifest, load, read_manifest, render_scene, write_pnm

log = logging.getLogger("deop")

IMAGE_MEAN, IMAGE_STD = 0.5, 0.25


class TrainingDiverged(RuntimeError):
    pass


class FreezeViolation(RuntimeError):
    pass


def normalize_image(image) -> Tensor:
    x = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    return Tensor((x - IMAGE_MEAN) / IMAGE_STD)


def lr_at(step: int, total: int, peak: float, warmup: int = 100) -> float:
    """Linear warmup then cosine decay to zero."""
    if total <= 0:
        return peak
    w = min(1.0, (step + 1) / max(1, min(warmup, total)))
    return peak * w * 0.5 * (1.0 + math.cos(math.pi * step / total))


def _check_finite(loss: Tensor, step: int, stage: str) -> None:
    if not np.isfinite(loss.item()):
        raise TrainingDiverged(f"{stage}: non-finite loss at step {step}")


def _digest(params: dict) -> dict[str, bytes]:
    return {k: v.data.tobytes() for k, v in params.items()}


# ------------------------------------------------------------------ fingerprints

def encoder_fingerprint(cfg: RunConfig) -> str:
    return ckpt.fingerprint({"encoder": cfg.encoder_config().architecture()})


def proposal_fingerprint(cfg: RunConfig) -> str:
    return ckpt.fingerprint({"proposals": cfg.proposal_config().architecture()})


def stream_fingerprint(cfg: RunConfig, num_classes: int) -> str:
    arch = {"encoder": cfg.encoder_config().architecture(), "prompt": str(cfg.encoder_config().prompt),
            "mode": cfg.mode, "classes": num_classes}
    if cfg.uses_cal:
        arch["cal"] = cfg.cal_config().__dict__
    return ckpt.fingerprint(arch)


def run_path(cfg: RunConfig, name: str) -> Path:
    return Path(cfg.out) / name


def stream_ckpt_name(mode: str) -> str:
    return "stream-" + mode.replace("+", "plus") + ".ckpt"


# ------------------------------------------------------------------ data access

@dataclass
class Data:
    manifest: Manifest
    train: list
    val: list

    @classmethod
    def open(cls, root, splits=("train", "val")) -> "Data":
        m = read_manifest(root)
        return cls(m, load(root, "train") if "train" in splits else [],
                   load(root, "val") if "val" in splits else [])


def class_table(manifest: Manifest, d: int, scheme: str = "name") -> ClassEmbeddingTable:
    return ClassEmbeddingTable(manifest.names(), [c.seen for c in manifest.classes], d, scheme=scheme)


# ------------------------------------------------------------- encoder pretraining

def pretrain_encoder(cfg: RunConfig, manifest: Manifest) -> tuple[ViTEncoder, list[float]]:
    """Align region-pooled encoder features with the class embeddings.

    Scenes are rendered on the fly from their own seed stream, never from the
    dataset's images. This stage stands in for a vision-language model that
    was pretrained elsewhere: with ``pretrain_classes = all`` it knows every
    class name, with ``seen`` it only knows the seen ones.
    """
    spec = manifest.dataset_spec()
    enc_cfg = dataclasses.replace(cfg.encoder_config(), prompt=PromptConfig("off"), frozen=False,
                                  severance=SeveranceSpec.none(cfg.num_layers))
    enc = ViTEncoder(enc_cfg, cfg.seed)
    table = class_table(manifest, cfg.embed_dim, cfg.class_embedding)
    classes = manifest.seen_ids() if cfg.pretrain_classes == "seen" else list(range(manifest.num_classes))
    shapes = [c for c in classes if c != 0]
    rng = np.random.default_rng([cfg.seed, 7])
    keys = list(enc.params)
    opt = Adam(enc.params, cfg.pretrain_lr)
    losses, grid = [], enc_cfg.grid
    for step in range(cfg.pretrain_steps):
        k = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
        ids = [int(c) for c in rng.choice(shapes, size=min(k, len(shapes)), replace=False)]
        rgb, lab = render_scene(rng, ids, spec, step)
        present = [c for c in [0] + ids if (lab == c).any()]
        m = MaskSet(Tensor(np.stack([(lab == c).astype(np.float64) for c in present])))
        with GradTape() as tape:
            F = enc(normalize_image(rgb.transpose(2, 0, 1) / 255.0))
            F_I = pool(F, token_masks(m, (grid, grid))).features
            r = classify_segments(F_I, table, cfg.tau, classes=classes)
            logp = nc.log(nc.clamp(r.probs, 1e-12, 1.0))
            loss = nc.neg(nc.mean(logp[np.arange(len(present)), np.asarray(present)]))
        _check_finite(loss, step, "pretrain-encoder")
        grads = tape.gradient(loss, [enc.params[k] for k in keys])
        opt.step(dict(zip(keys, grads)), lr_at(step, cfg.pretrain_steps, cfg.pretrain_lr, 200))
        losses.append(loss.item())
        if cfg.log_every and step % (cfg.log_every * 10) == 0:
            log.info("pretrain step %d loss %.4f", step, loss.item())
    enc.set_frozen(True)
    return enc, losses


def save_encoder(cfg: RunConfig, enc: ViTEncoder) -> Path:
    path = run_path(cfg, "encoder.ckpt")
    path.parent.mkdir(parents=True, exist_ok=True)
    ckpt.save(path, ckpt.state_of(enc.params), encoder_fingerprint(cfg))
    return path


def load_encoder(cfg: RunConfig, path=None) -> ViTEncoder:
    tensors, _ = ckpt.load(path or run_path(cfg, "encoder.ckpt"), encoder_fingerprint(cfg))
    enc = ViTEncoder(cfg.encoder_config(frozen=True), cfg.seed)
    ckpt.assign(enc.params, tensors)
    return enc


# ------------------------------------------------------------------- proposals

def dihedral(image: np.ndarray, labels: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """One of the 8 flips/rotations of a ``[C, H, W]`` image and its ``[H, W]`` labels."""
    img, lab = np.rot90(image, k % 4, axes=(1, 2)), np.rot90(labels, k % 4)
    if k >= 4:
        img, lab = img[:, :, ::-1], lab[:, ::-1]
    return np.ascontiguousarray(img), np.ascontiguousarray(lab)


def train_proposals(cfg: RunConfig, train: list, steps: int | None = None) -> tuple[ProposalNet, list[float]]:
    steps = cfg.prop_steps if steps is None else steps
    net = ProposalNet(cfg.proposal_config(), cfg.seed)
    keys = list(net.params)
    opt = make_optimizer(cfg.prop_optimizer, net.params, cfg.prop_lr)
    rng = np.random.default_rng([cfg.seed, 11])
    losses = []
    for step in range(steps):
        smp = train[int(rng.integers(len(train)))]
        img, lab = smp.image.data, smp.label.labels
        if cfg.prop_augment:
            img, lab = dihedral(img, lab, int(rng.integers(8)))
        segs, _ = gt_segments(SegLabelMap(lab))
        gt = MaskSet(Tensor(segs))
        with GradTape() as tape:
            pred = net(normalize_image(img))
            match = hungarian_match(pred, gt)
            loss = mask_loss(pred, gt, match)
            if cfg.prop_empty_weight > 0:
                loss = loss + nc.scale(unmatched_loss(pred, match), cfg.prop_empty_weight)
        _check_finite(loss, step, "train-proposals")
        grads = tape.gradient(loss, [net.params[k] for k in keys])
        lr = lr_at(step, steps, cfg.prop_lr)
        if isinstance(opt, Adam):
            opt.step(dict(zip(keys, grads)), lr)
        else:
            opt.lr = lr
            opt.step(dict(zip(keys, grads)))
        losses.append(loss.item())
        if cfg.log_every and step % (cfg.log_every * 5) == 0:
            log.info("proposals step %d loss %.4f", step, loss.item())
    net.set_frozen(True)
    return net, losses


def save_proposals(cfg: RunConfig, net: ProposalNet) -> Path:
    path = run_path(cfg, "proposals.ckpt")
    path.parent.mkdir(parents=True, exist_ok=True)
    ckpt.save(path, ckpt.state_of(net.params), proposal_fingerprint(cfg))
    return path


def load_proposals(cfg: RunConfig, path=None) -> ProposalNet:
    tensors, _ = ckpt.load(path or run_path(cfg, "proposals.ckpt"), proposal_fingerprint(cfg))
    net = ProposalNet(cfg.proposal_config(), cfg.seed)
    ckpt.assign(net.params, tensors)
    net.set_frozen(True)
    return net


def propose_all(net: ProposalNet, samples: list) -> list[MaskSet]:
    return [MaskSet(Tensor(net(normalize_image(s.image)).numpy())) for s in samples]


# ------------------------------------------------------------ classification stream

@dataclass
class Stream:
    """Everything the classification stream needs at inference."""

    cfg: RunConfig
    encoder: ViTEncoder
    table: ClassEmbeddingTable
    decoder: HeatmapDecoder | None = None
    history: list = field(default_factory=list)

    @classmethod
    def build(cls, cfg: RunConfig, encoder: ViTEncoder, manifest: Manifest) -> "Stream":
        dec = HeatmapDecoder(cfg.cal_config(), cfg.embed_dim, cfg.seed + 1) if cfg.uses_cal else None
        return cls(cfg, encoder, class_table(manifest, cfg.embed_dim, cfg.class_embedding), dec)

    def trainable(self) -> dict:
        out = {}
        if self.cfg.uses_visual_prompt:
            out.update({f"prompt.{k}": v for k, v in self.encoder.prompt_params.items()})
        out["table.offsets"] = self.table.offsets
        if self.decoder is not None:
            out.update({f"cal.{k}": v for k, v in self.decoder.params.items()})
        return out

    def weights(self, F_V: Tensor, masks: MaskSet):
        if self.decoder is not None:
            return self.decoder(F_V, masks)
        g = F_V.shape[:2]
        return token_masks(masks, g)

    def segment_scores(self, image, masks: MaskSet, classes=None):
        F_V = self.encoder(normalize_image(image), masks=masks)
        r = classify_segments(pool(F_V, self.weights(F_V, masks)).features, self.table,
                              self.cfg.tau, classes)
        return r

    def predict(self, image, masks: MaskSet) -> np.ndarray:
        r = self.segment_scores(image, masks)
        F_C = r.probs if self.cfg.score_mode == "softmax" else r.logits
        size = (self.cfg.image_size, self.cfg.image_size)
        return np.argmax(assemble_scores(F_C, masks, size).data, axis=0)

    def loss(self, image, masks: MaskSet, label) -> Tensor:
        seen = self.table.seen_ids()
        r = self.segment_scores(image, masks, classes=seen)
        size = label.shape
        return training_loss(assemble_scores(r.logits, masks, size), label, seen)

    # ---------------------------------------------------------- persistence
    def state(self) -> dict[str, np.ndarray]:
        out = ckpt.state_of(self.trainable())
        if self.decoder is not None and self.decoder.bn is not None:
            for i, (m, v) in enumerate(zip(self.decoder.bn.mean, self.decoder.bn.var)):
                out[f"bn.mean{i}"], out[f"bn.var{i}"] = m.copy(), v.copy()
        return out

    def load_state(self, tensors: dict) -> None:
        ckpt.assign(self.trainable(), tensors)
        if self.decoder is not None and self.decoder.bn is not None:
            for i in range(len(self.decoder.bn.mean)):
                self.decoder.bn.mean[i] = tensors[f"bn.mean{i}"].copy()
                self.decoder.bn.var[i] = tensors[f"bn.var{i}"].copy()


def train_deop(cfg: RunConfig, encoder: ViTEncoder, proposal_net: ProposalNet | None, data: Data,
               train_masks: list[MaskSet] | None = None, steps: int | None = None) -> Stream:
    """Train prompts, seen-class offsets and the heatmap decoder with everything else frozen."""
    steps = cfg.steps if steps is None else steps
    stream = Stream.build(cfg, encoder, data.manifest)
    if train_masks is None:
        train_masks = propose_all(proposal_net, data.train)
    frozen = dict(encoder.params)
    if proposal_net is not None:
        frozen.update({f"proposals.{k}": v for k, v in proposal_net.params.items()})
    before = _digest(frozen)
    params = stream.trainable()
    keys = list(params)
    masks = {"table.offsets": stream.table.offset_mask()}
    opt = make_optimizer(cfg.optimizer, params, cfg.lr, masks, {"table.offsets": cfg.offset_lr_scale})
    rng = np.random.default_rng([cfg.seed, 13])
    if stream.decoder is not None:
        stream.decoder.train(True)
    for step in range(steps):
        idx = rng.integers(len(data.train), size=cfg.batch)
        acc = {k: np.zeros(params[k].shape) for k in keys}
        total = 0.0
        for i in idx:
            smp = data.train[int(i)]
            with GradTape() as tape:
                loss = stream.loss(smp.image, train_masks[int(i)], smp.label)
            _check_finite(loss, step, "train-deop")
            for k, g in zip(keys, tape.gradient(loss, [params[k] for k in keys])):
                acc[k] += g
            total += loss.item()
        grads = {k: g / cfg.batch for k, g in acc.items()}
        lr = cfg.lr if cfg.lr_schedule == "constant" else lr_at(step, steps, cfg.lr, 50)
        if isinstance(opt, Adam):
            opt.step(grads, lr)
        else:
            opt.lr = lr
            opt.step(grads)
        stream.history.append(total / cfg.batch)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("deop[%s] step %d loss %.4f", cfg.mode, step, total / cfg.batch)
    if stream.decoder is not None:
        stream.decoder.train(False)
    after = _digest(frozen)
    moved = [k for k in before if before[k] != after[k]]
    if moved:
        raise FreezeViolation(f"frozen parameters changed during training: {moved[:5]}")
    return stream


def save_stream(cfg: RunConfig, stream: Stream) -> Path:
    path = run_path(cfg, stream_ckpt_name(cfg.mode))
    path.parent.mkdir(parents=True, exist_ok=True)
    ckpt.save(path, stream.state(), stream_fingerprint(cfg, stream.table.num_classes))
    return path


def load_stream(cfg: RunConfig, encoder: ViTEncoder, manifest: Manifest, path=None) -> Stream:
    stream = Stream.build(cfg, encoder, manifest)
    tensors, _ = ckpt.load(path or run_path(cfg, stream_ckpt_name(cfg.mode)),
                           stream_fingerprint(cfg, stream.table.num_classes))
    stream.load_state(tensors)
    if stream.decoder is not None:
        stream.decoder.train(False)
    return stream


# ------------------------------------------------------------------- evaluation

def proposal_recall(masks: list[MaskSet], samples: list, seen: set, thresholds) -> tuple[dict, dict, dict]:
    best_all, best_seen, best_unseen = [], [], []
    for m, s in zip(masks, samples):
        segs, ids = gt_segments(s.label)
        if not ids:
            continue
        best = best_proposal_iou(m, MaskSet(Tensor(segs)))
        for b, c in zip(best, ids):
            best_all.append(b)
            (best_seen if c in seen else best_unseen).append(b)

    def table(v):
        v = np.asarray(v)
        return {t: float((v >= t).mean()) if v.size else 1.0 for t in thresholds}

    return table(best_all), table(best_seen), table(best_unseen)


def evaluate(cfg: RunConfig, stream: Stream, samples: list, masks: list[MaskSet],
             dump_dir: str | Path | None = None) -> EvalReport:
    C = stream.table.num_classes
    cm = np.zeros((C, C), dtype=np.int64)
    if dump_dir is not None:
        Path(dump_dir).mkdir(parents=True, exist_ok=True)
    for i, (s, m) in enumerate(zip(samples, masks)):
        pred = stream.predict(s.image, m)
        cm += confusion_matrix(pred, s.label, C)
        if dump_dir is not None:
            write_pnm(Path(dump_dir) / f"pred_{i:04d}.pgm", pred.astype(np.uint8))
            if stream.decoder is not None:
                dump_heatmaps(stream, s.image, m, Path(dump_dir) / f"heat_{i:04d}.pgm")
    seen = stream.table.seen_ids()
    r_all, r_seen, r_unseen = proposal_recall(masks, samples, set(seen), cfg.thresholds())
    return build_report(cm, seen, stream.table.unseen_ids(), r_all, r_seen, r_unseen)


def heatmap_image(heatmaps: np.ndarray, scale: int = 8) -> np.ndarray:
    """Tile ``[N, h, w]`` heatmaps side by side, each scaled to its own max, as uint8."""
    tiles = []
    for h in heatmaps:
        top = h.max()
        t = h / top if top > 0 else h
        tiles.append(np.kron(t, np.ones((scale, scale))))
    return (np.concatenate(tiles, axis=1) * 255 + 0.5).astype(np.uint8)


def dump_heatmaps(stream: Stream, image, masks: MaskSet, path: Path) -> np.ndarray:
    F_V = stream.encoder(normalize_image(image), masks=masks)
    w = stream.weights(F_V, masks)
    arr = w.numpy() if hasattr(w, "numpy") else w.data
    img = heatmap_image(arr)
    write_pnm(path, img)
    return arr
