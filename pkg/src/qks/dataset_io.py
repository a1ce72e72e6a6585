"""QTF tensor files, dataset manifests, batching and the synthetic
planted-region generator.

QTF layout (all integers little-endian)::

    offset  size        field
    0       4           magic b"QTF1"
    4       1           dtype code: 1 = float32, 2 = float64
    5       1           rank
    6       2           reserved, zero
    8       8 * rank    dims, u64 each
    ...     prod(dims) * itemsize   row-major payload
"""

from __future__ import annotations

import json
import math
import os
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .numerics import Rng, Tensor
from .prompt_pool import LabelEmbeddingTable, TemplateEmbeddingBank, combine_templates

MAGIC = b"QTF1"
_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}

MANIFEST_FORMAT = "qks-manifest/1"


class QtfError(ValueError):
    pass


class QtfFormatError(QtfError):
    """Not a QTF file (bad magic or truncated header)."""


class QtfVersionError(QtfError):
    """Unknown dtype code or nonzero reserved field."""


class QtfCorruptionError(QtfError):
    """Payload length disagrees with the header."""


class ManifestError(ValueError):
    pass


# ---------------------------------------------------------------------------
# tensor files
# ---------------------------------------------------------------------------


def encode_tensor(t: Tensor) -> bytes:
    t = np.asarray(t)
    code = _DTYPE_CODES.get(np.dtype(t.dtype.type))
    if code is None:
        raise TypeError(f"QTF stores float32/float64 only, got {t.dtype}")
    if t.ndim > 255:
        raise ValueError("rank exceeds 255")
    header = MAGIC + struct.pack("<BBH", code, t.ndim, 0)
    header += struct.pack(f"<{t.ndim}Q", *t.shape)
    return header + np.ascontiguousarray(t, dtype=_CODES[code]).tobytes()


def decode_tensor(buf: bytes, source: str = "<bytes>") -> Tensor:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise QtfFormatError(f"{source}: not a QTF1 file")
    code, rank, reserved = struct.unpack_from("<BBH", buf, 4)
    if code not in _CODES:
        raise QtfVersionError(f"{source}: unknown dtype code {code}")
    if reserved != 0:
        raise QtfVersionError(f"{source}: reserved header field is {reserved}")
    off = 8 + 8 * rank
    if len(buf) < off:
        raise QtfCorruptionError(f"{source}: truncated header")
    dims = struct.unpack_from(f"<{rank}Q", buf, 8)
    dt = _CODES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(buf) - off != expected:
        raise QtfCorruptionError(
            f"{source}: payload is {len(buf) - off} bytes, header declares {expected}"
        )
    arr = np.frombuffer(buf, dtype=dt, offset=off).reshape(dims)
    return arr.astype(dt.newbyteorder("="), copy=True)


def write_tensor(path, t: Tensor) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(encode_tensor(t))


def read_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return decode_tensor(fh.read(), str(path))


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


@dataclass
class Manifest:
    root: Path
    data: dict

    @property
    def name(self) -> str:
        return self.data["name"]

    @property
    def n_labels(self) -> int:
        return len(self.data["label_names"])

    @property
    def seen(self) -> List[int]:
        return list(self.data["seen"])

    @property
    def unseen(self) -> List[int]:
        return list(self.data["unseen"])

    @property
    def seen_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_labels, dtype=bool)
        mask[self.seen] = True
        return mask

    def path(self, rel: str) -> Path:
        return self.root / rel

    def images(self, split: str) -> List[dict]:
        try:
            return self.data["splits"][split]
        except KeyError:
            raise ManifestError(f"manifest has no split {split!r}") from None

    def label_table(self) -> LabelEmbeddingTable:
        bank = TemplateEmbeddingBank(
            embeddings=[read_tensor(self.path(p)) for p in self.data["template_embeddings"]],
            label_names=list(self.data["label_names"]),
            templates=list(self.data.get("templates", [])),
        )
        return combine_templates(bank, self.seen_mask)


def validate_manifest(data: dict, root: Path, check_files: bool = True) -> None:
    required = ("name", "d", "C", "H", "W", "label_names", "seen", "unseen",
                "template_embeddings", "splits")
    missing = [k for k in required if k not in data]
    if missing:
        raise ManifestError(f"manifest missing keys: {missing}")
    n = len(data["label_names"])
    seen, unseen = set(data["seen"]), set(data["unseen"])
    if seen & unseen:
        raise ManifestError(f"labels both seen and unseen: {sorted(seen & unseen)}")
    if seen | unseen != set(range(n)):
        raise ManifestError("seen and unseen lists must partition the label indices")
    if not data["template_embeddings"]:
        raise ManifestError("no template embedding files")
    for split, images in data["splits"].items():
        for img in images:
            labels = img["labels"]
            if labels != sorted(set(labels)):
                raise ManifestError(f"{img['id']}: labels must be sorted and unique")
            if any(not 0 <= i < n for i in labels):
                raise ManifestError(f"{img['id']}: label index out of range")
            if split == "train" and not set(labels) <= seen:
                bad = sorted(set(labels) - seen)
                raise ManifestError(f"train image {img['id']} annotated with unseen labels {bad}")
    if not check_files:
        return
    HW, C, d = data["H"] * data["W"], data["C"], data["d"]
    for rel in data["template_embeddings"]:
        _check_shape(root / rel, (n, d))
    for images in data["splits"].values():
        for img in images:
            _check_shape(root / img["features"], (HW, C))


def _check_shape(path: Path, shape):
    if not path.exists():
        raise FileNotFoundError(f"missing file: {path}")
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) < 8 or head[:4] != MAGIC:
            raise QtfFormatError(f"{path}: not a QTF1 file")
        rank = head[5]
        raw = fh.read(8 * rank)
        if len(raw) != 8 * rank:
            raise QtfFormatError(f"{path}: truncated header")
        dims = struct.unpack(f"<{rank}Q", raw)
    if tuple(dims) != tuple(shape):
        raise ManifestError(f"{path}: shape {dims}, manifest implies {shape}")


def load_manifest(path, check_files: bool = True) -> Manifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    with open(path) as fh:
        data = json.load(fh)
    validate_manifest(data, path.parent, check_files=check_files)
    return Manifest(path.parent, data)


def save_manifest(manifest_data: dict, root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    validate_manifest(manifest_data, root, check_files=True)
    out = root / "manifest.json"
    with open(out, "w") as fh:
        json.dump(manifest_data, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return out


# ---------------------------------------------------------------------------
# loading and batching
# ---------------------------------------------------------------------------


@dataclass
class SplitData:
    """A split held in memory: features ``(N, HW, C)``, boolean targets
    ``(N, n_labels)`` and image ids."""

    features: Tensor
    targets: np.ndarray
    ids: List[str]

    def __len__(self) -> int:
        return len(self.ids)


def load_split(manifest: Manifest, split: str, dtype=np.float32) -> SplitData:
    images = manifest.images(split)
    HW, C = manifest.data["H"] * manifest.data["W"], manifest.data["C"]
    feats = np.empty((len(images), HW, C), dtype=dtype)
    targets = np.zeros((len(images), manifest.n_labels), dtype=bool)
    for i, img in enumerate(images):
        p = manifest.path(img["features"])
        if not p.exists():
            raise FileNotFoundError(f"missing feature file: {p}")
        feats[i] = read_tensor(p)
        targets[i, img["labels"]] = True
    return SplitData(feats, targets, [img["id"] for img in images])


def epoch_order(n: int, shuffle_seed: int, epoch: int) -> np.ndarray:
    return Rng(shuffle_seed, 0xBA7C, epoch).permutation(n)


def load_batches(
    source, batch_size: int, shuffle_seed: int, epoch: int = 0, split: str = "train"
) -> Iterator[Tuple[Tensor, np.ndarray, np.ndarray]]:
    """Yield ``(features, targets, indices)`` for one epoch.

    ``source`` is a Manifest or an already loaded SplitData. The order is a
    permutation drawn from ``(shuffle_seed, epoch)``; the last batch may be
    short.
    """
    data = load_split(source, split) if isinstance(source, Manifest) else source
    order = epoch_order(len(data), shuffle_seed, epoch)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield data.features[idx], data.targets[idx], idx


def batch_stream(data: SplitData, batch_size: int, shuffle_seed: int):
    """Endless batches, reshuffled every epoch."""
    epoch = 0
    while True:
        yield from load_batches(data, batch_size, shuffle_seed, epoch)
        epoch += 1


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

_TEMPLATE_TEXT = (
    "a photo of a {}.",
    "there is a {} in the scene.",
    "a picture containing a {}.",
    "an image with a {} in it.",
    "a cropped photo of the {}.",
    "a close-up photo of a {}.",
)


@dataclass
class SyntheticConfig:
    H: int = 8
    W: int = 8
    d: int = 32
    n_seen: int = 40
    n_unseen: int = 10
    n_train: int = 2000
    n_test: int = 400
    labels_min: int = 1
    labels_max: int = 3
    region_min: int = 2
    region_max: int = 4
    alpha: float = 1.0
    sigma: float = 0.1
    K: int = 4
    tau: float = 0.1
    shared: float = 0.0
    seed: int = 0

    def validate(self):
        if self.n_seen < 1 or self.n_unseen < 1:
            raise ValueError("n_seen and n_unseen must be >= 1")
        if not 0.0 <= self.shared < 1.0:
            raise ValueError("shared must lie in [0, 1)")
        if self.sigma < 0 or self.tau < 0:
            raise ValueError("sigma and tau must be >= 0")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not 1 <= self.region_min <= self.region_max:
            raise ValueError("need 1 <= region_min <= region_max")
        if self.region_max > min(self.H, self.W):
            raise ValueError(
                f"region size {self.region_max} does not fit a {self.H}x{self.W} grid"
            )
        if not 1 <= self.labels_min <= self.labels_max <= self.n_seen:
            raise ValueError("need 1 <= labels_min <= labels_max <= n_seen")
        if self.d % 2:
            raise ValueError("d must be even")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def _plant_image(rng: Rng, cfg: SyntheticConfig, protos, pool):
    k = int(rng.integers(cfg.labels_min, cfg.labels_max))
    labels = np.sort(pool[rng.choice(pool.size, k)])
    mask = np.full((cfg.H, cfg.W), -1, dtype=np.int64)
    # ascending label order: a later label overwrites an earlier one
    for lab in labels:
        h = int(rng.integers(cfg.region_min, cfg.region_max))
        w = int(rng.integers(cfg.region_min, cfg.region_max))
        top = int(rng.integers(0, cfg.H - h))
        left = int(rng.integers(0, cfg.W - w))
        mask[top:top + h, left:left + w] = lab
    planted = np.zeros((cfg.H * cfg.W, cfg.d))
    flat = mask.reshape(-1)
    on = flat >= 0
    planted[on] = cfg.alpha * protos[flat[on]]
    noise = rng.normal(cfg.sigma, (cfg.H * cfg.W, cfg.d)) if cfg.sigma > 0 else 0.0
    visible = sorted(int(i) for i in np.unique(flat[on]))
    return (planted + noise).astype(np.float32), mask, visible


def generate_synthetic(cfg: SyntheticConfig, out_dir) -> Manifest:
    """Write a planted-region dataset under ``out_dir`` and return its manifest.

    Each label gets a unit-norm prototype. An image carries a few labels,
    each painted into a random rectangle as ``alpha * prototype``; every cell
    then gets N(0, sigma^2) noise. Train images draw from seen labels only,
    test images from all labels. A label fully covered by a later one is
    dropped from the annotation. Per-template label embeddings are
    ``prototype + N(0, tau^2)``.
    """
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = cfg.n_seen + cfg.n_unseen
    rng = Rng(cfg.seed, 0x5E7)

    protos = rng.normal(1.0, (n, cfg.d))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    if cfg.shared > 0:
        common = rng.normal(1.0, cfg.d)
        common /= np.linalg.norm(common)
        protos = math.sqrt(cfg.shared) * common + math.sqrt(1.0 - cfg.shared) * protos
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    seen = list(range(cfg.n_seen))
    unseen = list(range(cfg.n_seen, n))

    emb_paths, templates = [], []
    trng = rng.child(1)
    for k in range(cfg.K):
        e = protos + (trng.normal(cfg.tau, protos.shape) if cfg.tau > 0 else 0.0)
        rel = f"embeddings/template_{k:03d}.qtf"
        write_tensor(out / rel, e.astype(np.float32))
        emb_paths.append(rel)
        base = _TEMPLATE_TEXT[k % len(_TEMPLATE_TEXT)]
        templates.append(base if k < len(_TEMPLATE_TEXT) else f"{base} #{k}")
    write_tensor(out / "prototypes.qtf", protos.astype(np.float32))

    splits = {}
    mask_paths = {}
    for s_idx, (split, count, pool) in enumerate(
        (("train", cfg.n_train, np.array(seen)), ("test", cfg.n_test, np.arange(n)))
    ):
        irng = rng.child(2 + s_idx)
        entries, masks = [], np.empty((count, cfg.H, cfg.W), dtype=np.float32)
        for i in range(count):
            feats, mask, labels = _plant_image(irng, cfg, protos, pool)
            rel = f"{split}/{i:06d}.qtf"
            write_tensor(out / rel, feats)
            masks[i] = mask
            entries.append({"id": f"{split}_{i:06d}", "features": rel, "labels": labels})
        splits[split] = entries
        mask_paths[split] = f"{split}/masks.qtf"
        write_tensor(out / mask_paths[split], masks)

    data = {
        "format": MANIFEST_FORMAT,
        "name": f"synthetic-seed{cfg.seed}",
        "d": cfg.d,
        "C": cfg.d,
        "H": cfg.H,
        "W": cfg.W,
        "label_names": [f"label_{i:03d}" for i in range(n)],
        "seen": seen,
        "unseen": unseen,
        "templates": templates,
        "template_embeddings": emb_paths,
        "splits": splits,
        "generator": {
            "kind": "planted-regions",
            "config": asdict(cfg),
            "masks": mask_paths,
            "prototypes": "prototypes.qtf",
        },
    }
    save_manifest(data, out)
    return Manifest(out, data)


def ground_truth_masks(manifest: Manifest, split: str) -> np.ndarray:
    """Per-image ``H x W`` label grids (-1 = background) of a synthetic set."""
    gen = manifest.data.get("generator")
    if not gen or "masks" not in gen:
        raise ManifestError("manifest carries no ground-truth masks")
    return read_tensor(manifest.path(gen["masks"][split])).astype(np.int64)
