"""Dataset ingestion, synthetic toy sets, and checkpoint persistence.

Loaders are pure and datasets immutable after load. Pixel bytes map
linearly from [0, 255] onto [-1, 1]; both endpoints are exact.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, replace

import numpy as np

from . import bitcore
from .errors import DataError
from .nn.config import config_to_text, parse_config
from .nn.network import Network

CHECKPOINT_MAGIC = b"BNCK"
PACKED_MAGIC = b"BNPK"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # [N, C, H, W] float32 in [-1, 1]
    labels: np.ndarray  # [N] int64 in [0, class_count)
    class_count: int
    split: str = "train"

    def validate(self) -> None:
        if self.images.ndim != 4:
            raise DataError(f"images must be [N, C, H, W], got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise DataError("label count != image count")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError(f"labels outside [0, {self.class_count})")
        if self.images.size and (self.images.min() < -1.0 or self.images.max() > 1.0):
            raise DataError("images not normalized to [-1, 1]")

    def __len__(self):
        return len(self.labels)


@dataclass(frozen=True)
class ToySpec:
    generator: str  # gaussian_blobs | xor_rings
    n: int
    classes: int
    dim: int = 2
    noise: float = 0.1
    seed: int = 0


def _bytes_to_unit(raw: np.ndarray) -> np.ndarray:
    return ((raw.astype(np.float64) * 2.0) / 255.0 - 1.0).astype(np.float32)


def load_idx(images_path, labels_path=None, class_count=10) -> Dataset:
    """Read big-endian IDX image data (optionally with a label file)."""
    with open(images_path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise DataError(f"{images_path}: truncated IDX header")
    zero, dtype_code, ndim = struct.unpack(">HBB", blob[:4])
    if zero != 0 or dtype_code != 0x08:
        raise DataError(f"{images_path}: bad IDX magic {blob[:4].hex()}")
    if ndim not in (2, 3):
        raise DataError(f"{images_path}: expected 2-D or 3-D image data, got {ndim}-D")
    head = 4 + 4 * ndim
    if len(blob) < head:
        raise DataError(f"{images_path}: truncated IDX dims")
    dims = struct.unpack(f">{ndim}I", blob[4:head])
    count = int(np.prod(dims))
    if len(blob) != head + count:
        raise DataError(f"{images_path}: payload is {len(blob) - head} bytes, expected {count}")
    raw = np.frombuffer(blob, dtype=np.uint8, offset=head).reshape(dims)
    if ndim == 2:
        raw = raw[:, None, None, :]
    else:
        raw = raw[:, None, :, :]
    images = _bytes_to_unit(raw)

    n = dims[0]
    if labels_path is not None:
        with open(labels_path, "rb") as fh:
            lb = fh.read()
        if len(lb) < 8:
            raise DataError(f"{labels_path}: truncated IDX header")
        zero, dtype_code, ndim_l, n_l = struct.unpack(">HBBI", lb[:8])
        if zero != 0 or dtype_code != 0x08 or ndim_l != 1:
            raise DataError(f"{labels_path}: bad IDX label magic")
        if len(lb) != 8 + n_l:
            raise DataError(f"{labels_path}: truncated label payload")
        if n_l != n:
            raise DataError(f"label count {n_l} != image count {n}")
        labels = np.frombuffer(lb, dtype=np.uint8, offset=8).astype(np.int64)
    else:
        labels = np.zeros(n, dtype=np.int64)
    ds = Dataset(images=images, labels=labels, class_count=class_count, split="unlabeled" if labels_path is None else "train")
    ds.validate()
    return ds


def load_cifar10_bin(path) -> Dataset:
    """CIFAR-10 binary batches: rows of 1 label byte + 3072 pixel bytes (RGB planes)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) == 0 or len(blob) % 3073:
        raise DataError(f"{path}: size {len(blob)} is not a multiple of 3073")
    rows = np.frombuffer(blob, dtype=np.uint8).reshape(-1, 3073)
    labels = rows[:, 0].astype(np.int64)
    images = _bytes_to_unit(rows[:, 1:].reshape(-1, 3, 32, 32))
    ds = Dataset(images=images, labels=labels, class_count=10)
    ds.validate()
    return ds


# ------------------------------------------------------------------ toy sets


def _balanced_labels(n, classes, rng):
    labels = np.arange(n, dtype=np.int64) % classes
    rng.shuffle(labels)
    return labels


def _blob_centers(classes, dim, rng):
    if dim == 2:
        angles = 2 * np.pi * np.arange(classes) / classes + np.pi / classes
        return 0.5 + 0.3 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return rng.uniform(0.2, 0.8, (classes, dim))


def make_toy(spec: ToySpec) -> Dataset:
    """Synthetic datasets, reproducible under seed, classes balanced within 1."""
    if spec.n < spec.classes:
        raise DataError(f"n={spec.n} smaller than class count {spec.classes}")
    rng = np.random.default_rng(np.random.SeedSequence([0x70F0, spec.seed]))
    if spec.generator == "gaussian_blobs":
        labels = _balanced_labels(spec.n, spec.classes, rng)
        centers = _blob_centers(spec.classes, spec.dim, rng)
        pos = centers[labels] + rng.normal(0, spec.noise, (spec.n, spec.dim))
        pos = np.clip(pos, 0.0, 1.0)
        images = (pos * 2 - 1).astype(np.float32).reshape(spec.n, 1, 1, spec.dim)
    elif spec.generator == "xor_rings":
        if spec.classes != 2:
            raise DataError("xor_rings is a two-class generator")
        labels = _balanced_labels(spec.n, 2, rng)
        quad = rng.integers(0, 2, spec.n)
        sx = np.where(quad == 0, 1.0, -1.0)
        sy = np.where(labels == 1, -sx, sx)  # XOR pattern: class = sign(x*y)
        pos = 0.5 + 0.22 * np.stack([sx, sy], axis=1)
        pos = np.clip(pos + rng.normal(0, spec.noise, (spec.n, 2)), 0.0, 1.0)
        images = (pos * 2 - 1).astype(np.float32).reshape(spec.n, 1, 1, 2)
    else:
        raise DataError(f"unknown toy generator {spec.generator!r}")
    ds = Dataset(images=images, labels=labels, class_count=spec.classes)
    ds.validate()
    return ds


def render_points_to_images(points01: np.ndarray, size: int = 8, sharpness: float = 1.1) -> np.ndarray:
    """Render 2-D points in [0, 1]^2 as single-channel Gaussian bumps in [-1, 1]."""
    n = len(points01)
    px = points01[:, 0] * (size - 1)
    py = points01[:, 1] * (size - 1)
    rr, cc = np.mgrid[0:size, 0:size].astype(np.float64)
    d2 = (rr[None] - py[:, None, None]) ** 2 + (cc[None] - px[:, None, None]) ** 2
    img = np.exp(-d2 / (2 * sharpness**2))
    return (img * 2 - 1).astype(np.float32).reshape(n, 1, size, size)


def make_blob_images(n, classes, *, noise=0.1, seed=0, size=8, sharpness=1.1) -> Dataset:
    """Gaussian-blob toy points rendered as size x size images."""
    vec = make_toy(ToySpec("gaussian_blobs", n, classes, dim=2, noise=noise, seed=seed))
    pos = (vec.images.reshape(n, 2) + 1) / 2
    ds = Dataset(
        images=render_points_to_images(pos, size=size, sharpness=sharpness),
        labels=vec.labels,
        class_count=classes,
    )
    ds.validate()
    return ds


def split_dataset(ds: Dataset, train_n: int) -> tuple[Dataset, Dataset]:
    tr = replace(ds, images=ds.images[:train_n], labels=ds.labels[:train_n], split="train")
    te = replace(ds, images=ds.images[train_n:], labels=ds.labels[train_n:], split="test")
    return tr, te


# -------------------------------------------------------- checkpoint container
#
# container layout (all little-endian):
#   magic[4] version:u32 config_len:u32 config_utf8
#   nsections:u32 { name_len:u32 name kind:u8 payload }
#   sha256[32] over everything before it
# kinds: 0 = float32 array (rank:u32 dims:u32* data), 1 = packed bit tensor
#        (len:u64 + bitcore bytes)


def _encode_sections(sections) -> bytes:
    parts = []
    for name, value in sections:
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        if isinstance(value, bitcore.PackedBitTensor):
            payload = bitcore.to_bytes(value)
            parts.append(b"\x01" + struct.pack("<Q", len(payload)))
            parts.append(payload)
        else:
            arr = np.ascontiguousarray(value, dtype=np.float32)
            parts.append(b"\x00" + struct.pack("<I", arr.ndim))
            parts.append(np.asarray(arr.shape, dtype="<u4").tobytes())
            parts.append(arr.astype("<f4").tobytes())
    return b"".join(parts)


def _container_bytes(magic: bytes, config_text: str, sections) -> bytes:
    cfg = config_text.encode()
    body = (
        magic
        + struct.pack("<II", FORMAT_VERSION, len(cfg))
        + cfg
        + struct.pack("<I", len(sections))
        + _encode_sections(sections)
    )
    return body + hashlib.sha256(body).digest()


def _parse_container(blob: bytes, magic: bytes):
    if len(blob) < 44 or blob[:4] != magic:
        raise DataError(f"bad checkpoint magic (wanted {magic!r})")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise DataError("checkpoint corrupt: hash mismatch")
    version, cfg_len = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    off = 12
    config_text = blob[off : off + cfg_len].decode()
    off += cfg_len
    (nsec,) = struct.unpack("<I", blob[off : off + 4])
    off += 4
    sections = {}
    try:
        for _ in range(nsec):
            (nlen,) = struct.unpack("<I", blob[off : off + 4])
            off += 4
            name = blob[off : off + nlen].decode()
            off += nlen
            kind = blob[off]
            off += 1
            if kind == 1:
                (plen,) = struct.unpack("<Q", blob[off : off + 8])
                off += 8
                sections[name] = bitcore.from_bytes(blob[off : off + plen])
                off += plen
            elif kind == 0:
                (rank,) = struct.unpack("<I", blob[off : off + 4])
                off += 4
                dims = np.frombuffer(blob, dtype="<u4", count=rank, offset=off)
                off += 4 * rank
                count = int(np.prod(dims)) if rank else 1
                arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
                off += 4 * count
                sections[name] = arr.reshape(dims).astype(np.float32)
            else:
                raise DataError(f"unknown section kind {kind}")
    except struct.error as e:
        raise DataError(f"truncated checkpoint: {e}") from None
    return config_text, sections


def checkpoint_bytes(net: Network) -> bytes:
    """Float checkpoint: canonical config text + all shadow state as f32."""
    return _container_bytes(CHECKPOINT_MAGIC, config_to_text(net.config), net.state_items())


def save_checkpoint(net: Network, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(net))


def load_checkpoint_bytes(blob: bytes) -> Network:
    config_text, sections = _parse_container(blob, CHECKPOINT_MAGIC)
    cfg = parse_config(config_text)
    net = Network.from_config(cfg, seed=0, init="zeros")
    net.load_state_items(sections)
    return net


def load_checkpoint(path) -> Network:
    with open(path, "rb") as fh:
        return load_checkpoint_bytes(fh.read())


def packed_export_bytes(net: Network) -> bytes:
    """Inference-only export: packed sign bits + scales for binary layers,
    full f32 state for everything else."""
    sections = []
    for lay in net.layers:
        prefix = f"layer{lay.index:03d}"
        if getattr(lay, "weight_bits", 32) == 1:
            if lay.is_stale():
                lay.refresh()
            sections.append((f"{prefix}.wbits", lay.packed_weights))
            sections.append((f"{prefix}.scale", lay.scale))
            if lay.b is not None:
                sections.append((f"{prefix}.b", lay.b.value))
        else:
            for key, p in lay.params().items():
                sections.append((f"{prefix}.{key}", p.value))
            for key, buf in lay.buffers().items():
                sections.append((f"{prefix}.{key}", buf))
    return _container_bytes(PACKED_MAGIC, config_to_text(net.config), sections)


def save_packed(net: Network, path) -> None:
    with open(path, "wb") as fh:
        fh.write(packed_export_bytes(net))


def load_packed_bytes(blob: bytes) -> Network:
    config_text, sections = _parse_container(blob, PACKED_MAGIC)
    cfg = parse_config(config_text)
    net = Network.from_config(cfg, seed=0, init="zeros")
    for lay in net.layers:
        prefix = f"layer{lay.index:03d}"
        if getattr(lay, "weight_bits", 32) == 1:
            bits = sections[f"{prefix}.wbits"]
            lay.w.value = bitcore.unpack(bits, net.dtype).reshape(lay.w.value.shape)
            lay.scale = sections[f"{prefix}.scale"].astype(net.dtype)
            lay.scale_frozen = True
            if lay.b is not None:
                lay.b.value = sections[f"{prefix}.b"].astype(net.dtype)
            lay.mark_updated()
            lay.refresh()
        else:
            for key, p in lay.params().items():
                p.value = sections[f"{prefix}.{key}"].astype(net.dtype).copy()
            for key in lay.buffers():
                setattr(lay, key, sections[f"{prefix}.{key}"].astype(net.dtype).copy())
    return net


def load_packed(path) -> Network:
    with open(path, "rb") as fh:
        return load_packed_bytes(fh.read())
