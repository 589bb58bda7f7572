"""IDX corpus ingestion, 32x32 padding, rescaling, one-hot targets and batching."""

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConsistencyError, ContractError, FormatError
from .tensor import Rng

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
NUM_CLASSES = 10
SIDE = 32

# stream purpose id for epoch permutations (see Rng.child)
SHUFFLE_STREAM = 2

_RANGES = {"raw": (0.0, 255.0), "unit": (0.0, 1.0), "symmetric": (-1.0, 1.0)}


@dataclass
class Dataset:
    """Images ``(count, 1, H, W)`` plus integer labels for one split.

    ``value_range`` is ``"raw"`` (bytes straight from the IDX file),
    ``"unit"`` ([0, 1]) or ``"symmetric"`` ([-1, 1]).
    """

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    value_range: str = "raw"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ConsistencyError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise ContractError(f"images must be (count, 1, H, W), got {self.images.shape}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES):
            raise ContractError(f"labels must lie in [0, {NUM_CLASSES - 1}]")
        lo, hi = _RANGES[self.value_range]
        if self.images.size and (self.images.min() < lo or self.images.max() > hi):
            raise ContractError(f"pixel values outside the declared {self.value_range} range [{lo}, {hi}]")

    def __len__(self):
        return len(self.labels)

    def subset(self, indices, split=None):
        indices = np.asarray(indices)
        if indices.dtype != bool:
            indices = indices.astype(np.int64)
        return Dataset(self.images[indices], self.labels[indices], split or self.split, self.value_range)


def _open(path):
    return gzip.open(path, "rb") if str(path).endswith(".gz") else open(path, "rb")


def read_idx(path, expected_magic):
    """Parse an unsigned-byte IDX file into an array of its declared shape."""
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header ({len(raw)} bytes)")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08X}, expected 0x{expected_magic:08X}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header, file ends at byte offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = int(np.prod(dims))
    if len(raw) < header + need:
        raise FormatError(
            f"{path}: truncated payload at byte offset {len(raw)}; "
            f"expected {need} bytes from offset {header} (through offset {header + need})"
        )
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=header).reshape(dims)


def load_idx(image_path, label_path, split="train"):
    """Load an IDX image/label pair as a raw-range :class:`Dataset`."""
    images = read_idx(image_path, IMAGE_MAGIC)
    labels = read_idx(label_path, LABEL_MAGIC)
    if len(images) != len(labels):
        raise ConsistencyError(
            f"{image_path} holds {len(images)} images but {label_path} holds {len(labels)} labels"
        )
    return Dataset(images[:, None, :, :].copy(), labels.astype(np.int64), split, "raw")


def pad_to_32(images):
    """Zero-pad ``(..., H, W)`` images to 32x32, centred; odd margins put the extra pixel bottom/right."""
    h, w = images.shape[-2:]
    if h > SIDE or w > SIDE:
        raise ContractError(f"cannot pad {h}x{w} images to {SIDE}x{SIDE}")
    if (h, w) == (SIDE, SIDE):
        return images
    top, left = (SIDE - h) // 2, (SIDE - w) // 2
    pad = [(0, 0)] * (images.ndim - 2) + [(top, SIDE - h - top), (left, SIDE - w - left)]
    return np.pad(images, pad)


def rescale(images, mode):
    """Map raw bytes to [0, 1] (``unit``) or [-1, 1] (``symmetric``) as float32."""
    x = np.asarray(images, dtype=np.float64)
    if mode == "unit":
        out = x / 255.0
    elif mode == "symmetric":
        out = x / 127.5 - 1.0
    else:
        raise ContractError(f"unknown rescale mode {mode!r}")
    return out.astype(np.float32)


def prepare(dataset, mode):
    """Pad a raw dataset to 32x32 and rescale it."""
    if dataset.value_range != "raw":
        raise ContractError(f"dataset is already rescaled ({dataset.value_range})")
    return Dataset(rescale(pad_to_32(dataset.images), mode), dataset.labels, dataset.split, mode)


def one_hot(label, k):
    if not 0 <= label < k:
        raise ContractError(f"label {label} outside [0, {k})")
    v = np.zeros(k, dtype=np.float32)
    v[label] = 1.0
    return v


def one_hot_batch(labels, k):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"labels outside [0, {k})")
    out = np.zeros((len(labels), k), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def epoch_batches(count, batch_size, seed, epoch=0, drop_last=False):
    """Index arrays for one epoch: a fresh seeded permutation cut into batches."""
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    if count == 0:
        raise ContractError("cannot batch an empty dataset")
    order = Rng(seed).child(SHUFFLE_STREAM, epoch).permutation(count)
    stop = count - count % batch_size if drop_last else count
    return [order[i:i + batch_size] for i in range(0, stop, batch_size)]


def batch_iter(dataset, batch_size, seed, drop_last=False, epoch=0):
    """Yield ``(images, labels)`` batches for one epoch of ``dataset``."""
    for idx in epoch_batches(len(dataset), batch_size, seed, epoch, drop_last):
        yield dataset.images[idx], dataset.labels[idx]


def batch_for_step(count, batch_size, seed, step, drop_last=True):
    """Indices of the batch consumed at global step ``step`` (0-based), across epochs."""
    per_epoch = count // batch_size if drop_last else -(-count // batch_size)
    if per_epoch == 0:
        raise ContractError(f"{count} samples cannot fill one batch of {batch_size}")
    epoch, k = divmod(step, per_epoch)
    return epoch_batches(count, batch_size, seed, epoch, drop_last)[k]


_SPLIT_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    "validation": ("val-images-idx3-ubyte", "val-labels-idx1-ubyte"),
}


def _find(data_dir, stem):
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        path = os.path.join(data_dir, name)
        if os.path.exists(path):
            return path
    return None


def load_corpus(data_dir, val_size=10000):
    """Load train/test/validation raw splits from an MNIST-style directory.

    Without validation files, the last ``val_size`` training samples become the
    validation split (60000 MNIST training images -> 50000 / 10000).
    """
    splits = {}
    for split, (img, lab) in _SPLIT_FILES.items():
        ip, lp = _find(data_dir, img), _find(data_dir, lab)
        if ip and lp:
            splits[split] = load_idx(ip, lp, split)
    if "train" not in splits:
        raise FileNotFoundError(f"no train-images-idx3-ubyte / train-labels-idx1-ubyte in {data_dir}")
    if "validation" not in splits and val_size > 0:
        train = splits["train"]
        cut = len(train) - min(val_size, len(train) // 6)
        splits["validation"] = train.subset(np.arange(cut, len(train)), "validation")
        splits["train"] = train.subset(np.arange(cut), "train")
    return splits
