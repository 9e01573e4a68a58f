"""Datasets: IDX byte codec, synthetic rate task, label noise, batching."""

import struct
from dataclasses import dataclass

import numpy as np

from .rng import derive


@dataclass(frozen=True)
class IdxHeader:
    """Parsed IDX metadata: element type is always unsigned byte (0x08)."""

    rank: int
    shape: tuple


def parse_idx(data):
    """Decode IDX bytes into (float64 array scaled to [0, 1], header).

    Layout: two zero bytes, type code 0x08, rank byte, big-endian uint32
    extents, then the uint8 payload.  Exact length is required; trailing
    bytes are an error.
    """
    if len(data) < 4:
        raise ValueError("idx: truncated header")
    if data[0] != 0 or data[1] != 0:
        raise ValueError("idx: first two bytes must be zero")
    if data[2] != 0x08:
        raise ValueError(f"idx: unsupported type code 0x{data[2]:02x}, only 0x08")
    rank = data[3]
    if rank < 1:
        raise ValueError("idx: rank must be >= 1")
    head = 4 + 4 * rank
    if len(data) < head:
        raise ValueError("idx: truncated extents")
    shape = struct.unpack(">" + "I" * rank, data[4:head])
    count = 1
    for n in shape:
        count *= n
    if len(data) != head + count:
        raise ValueError(f"idx: payload length {len(data) - head}, expected {count}")
    raw = np.frombuffer(data, dtype=np.uint8, offset=head).reshape(shape)
    return raw.astype(np.float64) / 255.0, IdxHeader(rank, shape)


def write_idx(values):
    """Encode a [0, 1] float array as IDX bytes; inverse of :func:`parse_idx`."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim < 1 or values.ndim > 255:
        raise ValueError("idx: rank must be in [1, 255]")
    if values.size and (values.min() < 0.0 or values.max() > 1.0):
        raise ValueError("idx: values must lie in [0, 1]")
    if any(n >= 2**32 for n in values.shape):
        raise ValueError("idx: extent exceeds uint32")
    raw = np.round(values * 255.0).astype(np.uint8)
    header = bytes([0, 0, 0x08, values.ndim])
    header += struct.pack(">" + "I" * values.ndim, *values.shape)
    return header + raw.tobytes()


def read_idx_file(path):
    with open(path, "rb") as fh:
        return parse_idx(fh.read())


def write_idx_file(path, values):
    with open(path, "wb") as fh:
        fh.write(write_idx(values))


@dataclass
class Dataset:
    """Inputs in [0, 1], integer labels, and stable per-sample ids.

    ``inputs`` is (N, C, H, W) for static data or (N, T, C, H, W) for
    pre-binned frame sequences.
    """

    inputs: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.inputs.ndim not in (4, 5):
            raise ValueError("dataset inputs must be 4-d or 5-d")
        n = self.inputs.shape[0]
        if self.labels.shape != (n,) or self.ids.shape != (n,):
            raise ValueError("dataset arrays disagree on sample count")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label out of range")

    def __len__(self):
        return self.inputs.shape[0]


def take(ds, n):
    """First ``n`` samples as a new dataset."""
    return Dataset(ds.inputs[:n], ds.labels[:n], ds.ids[:n], ds.num_classes)


def load_idx_dataset(images_path, labels_path, num_classes=None, limit=None):
    """Pair an IDX image file with an IDX label file."""
    images, hdr = read_idx_file(images_path)
    if hdr.rank == 3:
        images = images[:, None, :, :]
    elif hdr.rank != 4:
        raise ValueError(f"idx images: rank {hdr.rank} not supported")
    label_floats, label_hdr = read_idx_file(labels_path)
    if label_hdr.rank != 1:
        raise ValueError("idx labels: rank must be 1")
    labels = np.round(label_floats * 255.0).astype(np.int64)
    if labels.shape[0] != images.shape[0]:
        raise ValueError("idx: image and label counts differ")
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    ds = Dataset(images, labels, np.arange(images.shape[0], dtype=np.int64), num_classes)
    return take(ds, limit) if limit else ds


def class_templates(num_classes, features):
    """Deterministic rate templates: one disjoint feature block per class,
    each at a distinct intensity.  Independent of any seed."""
    if features < num_classes or features % num_classes:
        raise ValueError("features must be a positive multiple of num_classes")
    block = features // num_classes
    templates = np.zeros((num_classes, features))
    for k in range(num_classes):
        intensity = 0.55 + 0.45 * (k + 1) / num_classes
        templates[k, k * block : (k + 1) * block] = intensity
    return templates


def synth_rate_dataset(n_per_class, num_classes, features, seed, noise=0.1,
                       id_offset=0):
    """Linearly separable rate-coded task: class template plus uniform noise.

    Inputs are (N, 1, 1, features) in [0, 1]; samples are class-major and
    ids run from ``id_offset``.  Templates depend only on (num_classes,
    features), so differently seeded splits share them.
    """
    templates = class_templates(num_classes, features)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    n = labels.shape[0]
    rng = np.random.Generator(np.random.Philox(key=derive(seed, "synth")))
    x = templates[labels] + rng.uniform(-noise, noise, size=(n, features))
    np.clip(x, 0.0, 1.0, out=x)
    ids = np.arange(id_offset, id_offset + n, dtype=np.int64)
    return Dataset(x.reshape(n, 1, 1, features), labels.astype(np.int64), ids,
                   num_classes)


@dataclass(frozen=True)
class NoiseManifest:
    """Which samples had labels flipped, and from/to what."""

    rho: float
    entries: tuple  # (sample_id, original_label, flipped_label), sorted by id

    def flipped_ids(self):
        return frozenset(e[0] for e in self.entries)


def inject_label_noise(ds, rho, seed):
    """Flip a fraction ``rho`` of labels to different, uniformly drawn classes.

    Returns the corrupted dataset and a manifest of every flip.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must be in [0, 1], got {rho}")
    n = len(ds)
    n_flip = int(round(rho * n))
    rng = np.random.Generator(np.random.Philox(key=derive(seed, "label-noise")))
    chosen = rng.choice(n, size=n_flip, replace=False)
    labels = ds.labels.copy()
    entries = []
    for pos in chosen:
        original = int(labels[pos])
        # uniform over the other classes
        flipped = int(rng.integers(ds.num_classes - 1))
        if flipped >= original:
            flipped += 1
        labels[pos] = flipped
        entries.append((int(ds.ids[pos]), original, flipped))
    entries.sort()
    noisy = Dataset(ds.inputs, labels, ds.ids, ds.num_classes)
    return noisy, NoiseManifest(rho, tuple(entries))


def batches(ds, batch_size, seed=None, shuffle=True):
    """Yield (ids, inputs, labels) minibatches; the last one may be short.

    Order is a permutation drawn from ``seed`` alone (pass a per-epoch
    derived seed to reshuffle between epochs), or sequential when not
    shuffling.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(ds)
    if shuffle:
        rng = np.random.Generator(np.random.Philox(key=derive(seed, "shuffle")))
        order = rng.permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        sel = order[start : start + batch_size]
        yield ds.ids[sel], ds.inputs[sel], ds.labels[sel]
