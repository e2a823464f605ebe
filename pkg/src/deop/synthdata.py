"""Deterministic synthetic shapes dataset with a seen/unseen class split.

On-disk layout (all paths relative to the dataset root)::

    manifest.txt           text manifest, see ``write_manifest``
    train/NNNN.ppm         binary PPM (P6), maxval 255
    train/NNNN.pgm         binary PGM (P5), one byte per pixel = class id
    val/NNNN.ppm, val/NNNN.pgm
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .classify import name_seed
from .metrics import SegLabelMap
from .numcore import Tensor

SHAPES = ("circle", "square", "triangle")
TEXTURES = ("solid", "striped", "checkered")
DEFAULT_UNSEEN = ("checkered circle", "striped square", "solid triangle")
MANIFEST_VERSION = 1


class GenerationError(RuntimeError):
    pass


class ParseError(ValueError):
    def __init__(self, path, offset: int, msg: str):
        super().__init__(f"{path}: byte {offset}: {msg}")
        self.path, self.offset = str(path), offset


@dataclass(frozen=True)
class ClassInfo:
    id: int
    name: str
    seen: bool
    shape: str | None = None
    texture: str | None = None


@dataclass(frozen=True)
class DatasetSpec:
    image_size: int = 64
    shapes: tuple = SHAPES
    textures: tuple = TEXTURES
    unseen: tuple = DEFAULT_UNSEEN
    n_train: int = 200
    n_val: int = 50
    noise: float = 0.04
    seed: int = 0
    min_shapes: int = 2
    max_shapes: int = 5
    min_size: int = 14
    max_size: int = 22
    gap: int = 4             # minimum empty pixels between shape bounding boxes

    def catalog(self) -> list[ClassInfo]:
        out = [ClassInfo(0, "background", True)]
        for s in self.shapes:
            for t in self.textures:
                name = f"{t} {s}"
                out.append(ClassInfo(len(out), name, name not in self.unseen, s, t))
        names = {c.name for c in out}
        missing = set(self.unseen) - names
        if missing:
            raise ValueError(f"unseen classes {sorted(missing)} are not in the catalog")
        return out

    @property
    def num_classes(self) -> int:
        return 1 + len(self.shapes) * len(self.textures)

    def seen_ids(self) -> list[int]:
        return [c.id for c in self.catalog() if c.seen]

    def unseen_ids(self) -> list[int]:
        return [c.id for c in self.catalog() if not c.seen]


# ------------------------------------------------------------------- rendering

def shape_mask(shape: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if shape == "circle":
        r = size / 2
        return (yy - r) ** 2 + (xx - r) ** 2 <= r * r
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "triangle":
        half = yy / size * (size / 2)
        return np.abs(xx - size / 2) <= half
    raise ValueError(f"unknown shape {shape!r}")


def texture_pattern(texture: str, size: int) -> np.ndarray:
    """1 where the base colour shows, 0 where the dark tone shows."""
    yy, xx = np.mgrid[0:size, 0:size]
    if texture == "solid":
        return np.ones((size, size))
    if texture == "striped":
        return ((yy // 2) % 2 == 0).astype(float)
    if texture == "checkered":
        return (((yy // 3) + (xx // 3)) % 2 == 0).astype(float)
    raise ValueError(f"unknown texture {texture!r}")


def _color(rng: np.random.Generator, bg: np.ndarray) -> np.ndarray:
    for _ in range(100):
        c = rng.uniform(0.0, 1.0, 3)
        if np.abs(c - bg).max() > 0.35 and c.max() > 0.5:
            return c
    return 1.0 - bg


def _place(rng, size_img: int, sizes: list[int], gap: int, tries: int = 200):
    boxes = []
    for s in sizes:
        for _ in range(tries):
            y, x = rng.integers(0, size_img - s + 1, 2)
            if all(y + s + gap <= by or by + bs + gap <= y or x + s + gap <= bx or bx + bs + gap <= x
                   for by, bx, bs in boxes):
                boxes.append((int(y), int(x), s))
                break
        else:
            return None
    return boxes


def render_scene(rng: np.random.Generator, class_ids: list[int], spec: DatasetSpec,
                 index: int = -1, size_range: tuple[int, int] | None = None):
    """Draw the given shape classes on a noisy background -> (uint8 RGB [H,W,3], uint8 labels)."""
    cat = spec.catalog()
    n = spec.image_size
    lo, hi = size_range or (spec.min_size, spec.max_size)
    bg = rng.uniform(0.3, 0.7) + rng.uniform(-0.06, 0.06, 3)
    img = np.broadcast_to(bg, (n, n, 3)).copy()
    labels = np.zeros((n, n), dtype=np.uint8)
    for attempt in range(20):
        # shrink the size range on every retry so crowded scenes still fit
        top = max(lo, hi - attempt)
        sizes = [int(rng.integers(lo, top + 1)) for _ in class_ids]
        boxes = _place(rng, n, sizes, spec.gap)
        if boxes is not None:
            break
    else:
        raise GenerationError(f"sample {index}: could not place {len(class_ids)} shapes")
    for cid, (y, x, s) in zip(class_ids, boxes):
        info = cat[cid]
        m = shape_mask(info.shape, s)
        col = _color(rng, bg)
        pat = texture_pattern(info.texture, s)[..., None]
        patch = pat * col + (1 - pat) * col * 0.3
        region = img[y:y + s, x:x + s]
        region[m] = patch[m]
        labels[y:y + s, x:x + s][m] = cid
    img = img + rng.normal(0.0, spec.noise, img.shape)
    return (np.clip(img, 0, 1) * 255 + 0.5).astype(np.uint8), labels


def _sample_classes(rng, spec: DatasetSpec, split: str) -> list[int]:
    k = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    seen = [c for c in spec.seen_ids() if c != 0]
    unseen = spec.unseen_ids()
    if split == "train" or not unseen:
        pool = seen
        return [int(c) for c in rng.choice(pool, size=min(k, len(pool)), replace=False)]
    first = int(rng.choice(unseen))
    rest = [c for c in seen + unseen if c != first]
    return [first] + [int(c) for c in rng.choice(rest, size=min(k, len(rest) + 1) - 1, replace=False)]


_SPLIT_CODE = {"train": 0, "val": 1}


def generate_sample(spec: DatasetSpec, split: str, index: int):
    rng = np.random.default_rng([spec.seed, _SPLIT_CODE[split], index])
    return render_scene(rng, _sample_classes(rng, spec, split), spec, index)


def generate_arrays(spec: DatasetSpec, split: str) -> list[tuple[np.ndarray, np.ndarray]]:
    n = spec.n_train if split == "train" else spec.n_val
    return [generate_sample(spec, split, i) for i in range(n)]


# ------------------------------------------------------------------------- PNM

def write_pnm(path: Path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    if arr.ndim == 3:
        head = f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n"
    else:
        head = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n"
    Path(path).write_bytes(head.encode("ascii") + arr.tobytes())


def read_pnm(path) -> np.ndarray:
    """Parse binary P5/P6 with maxval <= 255; raises ParseError with the byte offset."""
    raw = Path(path).read_bytes()
    if raw[:2] not in (b"P5", b"P6"):
        raise ParseError(path, 0, f"bad magic {raw[:2]!r}")
    channels = 3 if raw[:2] == b"P6" else 1
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ParseError(path, pos, "expected an integer header field")
        fields.append(int(raw[start:pos]))
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise ParseError(path, pos, "missing whitespace after header")
    pos += 1
    w, h, maxval = fields
    if not 0 < maxval < 256:
        raise ParseError(path, pos, f"unsupported maxval {maxval}")
    need = w * h * channels
    if len(raw) - pos < need:
        raise ParseError(path, len(raw), f"truncated pixel data: {len(raw) - pos} of {need} bytes")
    data = np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos)
    return data.reshape((h, w, 3) if channels == 3 else (h, w)).copy()


# -------------------------------------------------------------------- manifest

def write_manifest(root: Path, spec: DatasetSpec) -> None:
    lines = [f"deop-synth {MANIFEST_VERSION}",
             f"image_size {spec.image_size}", f"seed {spec.seed}", f"noise {spec.noise!r}",
             f"train {spec.n_train}", f"val {spec.n_val}",
             f"shapes {spec.min_shapes} {spec.max_shapes} {spec.min_size} {spec.max_size} {spec.gap}",
             f"classes {spec.num_classes}"]
    for c in spec.catalog():
        lines.append("\t".join(["class", str(c.id), c.name, "seen" if c.seen else "unseen",
                                 str(name_seed(c.name))]))
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")


@dataclass
class Manifest:
    image_size: int
    seed: int
    n_train: int
    n_val: int
    classes: list[ClassInfo] = field(default_factory=list)
    noise: float = 0.04
    shape_counts: tuple = (2, 5)
    shape_sizes: tuple = (14, 22)
    gap: int = 4

    def dataset_spec(self) -> DatasetSpec:
        shapes = tuple(dict.fromkeys(c.shape for c in self.classes if c.shape))
        textures = tuple(dict.fromkeys(c.texture for c in self.classes if c.texture))
        return DatasetSpec(self.image_size, shapes, textures,
                           tuple(c.name for c in self.classes if not c.seen), self.n_train,
                           self.n_val, self.noise, self.seed, *self.shape_counts, *self.shape_sizes,
                           self.gap)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def seen_ids(self) -> list[int]:
        return [c.id for c in self.classes if c.seen]

    def unseen_ids(self) -> list[int]:
        return [c.id for c in self.classes if not c.seen]

    def names(self) -> list[str]:
        return [c.name for c in self.classes]


def read_manifest(root) -> Manifest:
    path = Path(root) / "manifest.txt"
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    kv, classes = {}, []
    offset = 0
    for line in path.read_text().splitlines(keepends=True):
        parts = line.rstrip("\n").split("\t") if line.startswith("class\t") else line.split()
        try:
            if parts and parts[0] == "class":
                _, cid, name, flag, _ = parts
                shape, texture = (name.split()[1], name.split()[0]) if " " in name else (None, None)
                classes.append(ClassInfo(int(cid), name, flag == "seen", shape, texture))
            elif parts:
                kv[parts[0]] = parts[1:]
        except ValueError as exc:
            raise ParseError(path, offset, f"malformed line {line!r}") from exc
        offset += len(line.encode())
    if int(kv.get("classes", ["-1"])[0]) != len(classes):
        raise ParseError(path, offset, "class count does not match class lines")
    try:
        sh = [int(v) for v in kv["shapes"]]
        return Manifest(int(kv["image_size"][0]), int(kv["seed"][0]), int(kv["train"][0]),
                        int(kv["val"][0]), classes, float(kv["noise"][0]), tuple(sh[:2]), tuple(sh[2:4]),
                        sh[4])
    except (KeyError, IndexError, ValueError) as exc:
        raise ParseError(path, 0, f"missing or malformed header field: {exc}") from exc


# ------------------------------------------------------------------ generate/load

def generate(spec: DatasetSpec, out) -> Path:
    root = Path(out)
    for split in ("train", "val"):
        (root / split).mkdir(parents=True, exist_ok=True)
        for i, (img, lab) in enumerate(generate_arrays(spec, split)):
            write_pnm(root / split / f"{i:04d}.ppm", img)
            write_pnm(root / split / f"{i:04d}.pgm", lab)
    write_manifest(root, spec)
    return root


class Sample(NamedTuple):
    image: Tensor          # [3, H, W], values in [0, 1]
    label: SegLabelMap


def image_tensor(rgb: np.ndarray) -> Tensor:
    return Tensor(rgb.transpose(2, 0, 1) / 255.0)


def iter_split(root, split: str) -> Iterator[Sample]:
    root = Path(root)
    n = len(list((root / split).glob("*.ppm")))
    for i in range(n):
        rgb = read_pnm(root / split / f"{i:04d}.ppm")
        lab = read_pnm(root / split / f"{i:04d}.pgm")
        if rgb.ndim != 3 or lab.ndim != 2:
            raise ParseError(root / split / f"{i:04d}", 0, "unexpected channel count")
        yield Sample(image_tensor(rgb), SegLabelMap(lab))


def load(root, split: str = "train") -> list[Sample]:
    return list(iter_split(root, split))


def class_histogram(samples, num_classes: int) -> np.ndarray:
    h = np.zeros(num_classes, dtype=np.int64)
    for s in samples:
        lab = s.label.labels if isinstance(s, Sample) else s
        h += np.bincount(np.asarray(lab).reshape(-1), minlength=num_classes)[:num_classes]
    return h
