"""Dataset ingestion: local-cache loaders for standard image sets plus a
fully synthetic moons-image task that needs no network access.

Real datasets are read from ``$NOFROST_DATA_DIR`` (default
``~/.cache/nofrost-data``); missing files trigger one download attempt with
checksum verification and otherwise fail with instructions.  The synthetic
task renders two interleaved half-moons as dim Gaussian blobs on a noisy
canvas — small enough to train in seconds, fragile enough that undefended
models break under small L-inf attacks.
"""

from __future__ import annotations

import gzip
import hashlib
import os
import pickle
import tarfile
import urllib.request
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

DATA_DIR_ENV = "NOFROST_DATA_DIR"
DATASETS = ("mnist", "fashion_mnist", "cifar10", "synthetic_moons_images")

MOONS_DEFAULTS = {
    "train_size": 4000,
    "test_size": 1000,
    "image_size": 16,
    "noise": 0.18,        # planar scatter of the moon points
    "blob_sigma": 2.5,    # px; wide blobs spread class evidence over many pixels
    "amplitude": 0.14,    # dim blobs keep the signal comparable to small eps balls
    "bg_noise": 0.06,     # per-pixel canvas noise
}


class DatasetUnavailableError(RuntimeError):
    """Dataset missing locally and could not be downloaded."""


@dataclass
class DataSplit:
    images: torch.Tensor  # [N, C, H, W] float32 in [0, 1]
    labels: torch.Tensor  # [N] long

    def __len__(self):
        return self.images.shape[0]


@dataclass
class DatasetBundle:
    name: str
    train: DataSplit
    test: DataSplit
    num_classes: int

    @property
    def in_channels(self):
        return self.train.images.shape[1]

    @property
    def image_size(self):
        return self.train.images.shape[-1]


# ---------------------------------------------------------------------------
# synthetic moons images

def make_moons_points(n, noise, rng):
    n_outer = n // 2
    n_inner = n - n_outer
    t_outer = rng.uniform(0.0, np.pi, n_outer)
    t_inner = rng.uniform(0.0, np.pi, n_inner)
    pts = np.concatenate([
        np.stack([np.cos(t_outer), np.sin(t_outer)], axis=1),
        np.stack([1.0 - np.cos(t_inner), 0.5 - np.sin(t_inner)], axis=1),
    ])
    labels = np.concatenate([np.zeros(n_outer, dtype=np.int64),
                             np.ones(n_inner, dtype=np.int64)])
    pts = pts + rng.normal(0.0, noise, pts.shape)
    perm = rng.permutation(n)
    return pts[perm], labels[perm]


def render_moons_images(points, labels, image_size, blob_sigma, amplitude,
                        bg_noise, rng):
    s = image_size
    # fixed planar window that contains both moons with margin
    x0, x1, y0, y1 = -1.6, 2.6, -1.1, 1.6
    px = (points[:, 0] - x0) / (x1 - x0) * (s - 1)
    py = (points[:, 1] - y0) / (y1 - y0) * (s - 1)
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    blobs = amplitude * np.exp(
        -((xx[None] - px[:, None, None]) ** 2 + (yy[None] - py[:, None, None]) ** 2)
        / (2.0 * blob_sigma ** 2))
    canvas = blobs + rng.normal(0.0, bg_noise, blobs.shape)
    canvas = np.clip(canvas, 0.0, 1.0).astype(np.float32)
    return (torch.from_numpy(canvas).unsqueeze(1),
            torch.from_numpy(np.asarray(labels, dtype=np.int64)))


def make_moons_images(n, seed=0, **overrides):
    """Render n moon points as single-channel images; returns (images, labels)."""
    p = {**MOONS_DEFAULTS, **overrides}
    rng = np.random.default_rng(seed)
    points, labels = make_moons_points(n, p["noise"], rng)
    return render_moons_images(points, labels, p["image_size"], p["blob_sigma"],
                               p["amplitude"], p["bg_noise"], rng)


# ---------------------------------------------------------------------------
# real datasets (download-or-fail with checksum verification)

_MNIST_URLS = {
    "mnist": "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "fashion_mnist": "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/",
}
_MNIST_FILES = {
    "mnist": (
        ("train-images-idx3-ubyte.gz", "f68b3c2dcbeaaa9fbdd348bbdeb94873"),
        ("train-labels-idx1-ubyte.gz", "d53e105ee54ea40749a09fcbcd1e9432"),
        ("t10k-images-idx3-ubyte.gz", "9fb629c4189551a2d022fa330f9573f3"),
        ("t10k-labels-idx1-ubyte.gz", "ec29112dd5afa0611ce80d1b7f02629c"),
    ),
    "fashion_mnist": (
        ("train-images-idx3-ubyte.gz", "8d4fb7e6c68d591d4c3dfef9ec88bf0d"),
        ("train-labels-idx1-ubyte.gz", "25c81989df183df01b3e8a0aad5dffbe"),
        ("t10k-images-idx3-ubyte.gz", "bef4ecab320f06d8554ea6380940ec79"),
        ("t10k-labels-idx1-ubyte.gz", "bb300cfdad3c16e7a12a480ee83cd310"),
    ),
}
_CIFAR_URL = "https://www.cs.toronto.edu/~kriz/cifar-10-python.tar.gz"
_CIFAR_MD5 = "c58f30108f718f92721af3b95e74349a"


def default_data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, Path.home() / ".cache" / "nofrost-data"))


def _md5(path: Path) -> str:
    h = hashlib.md5()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fetch(url, dest: Path, md5: str):
    if dest.exists():
        if _md5(dest) == md5:
            return
        raise DatasetUnavailableError(
            f"{dest} exists but fails its checksum (expected md5 {md5}); "
            f"delete it and retry or re-download from {url}")
    dest.parent.mkdir(parents=True, exist_ok=True)
    try:
        urllib.request.urlretrieve(url, dest)
    except Exception as exc:
        raise DatasetUnavailableError(
            f"{dest.name} is not cached and downloading {url} failed ({exc}); "
            f"fetch it manually into {dest.parent}") from exc
    if _md5(dest) != md5:
        dest.unlink(missing_ok=True)
        raise DatasetUnavailableError(f"download of {url} failed its checksum")


def _read_idx(path: Path) -> np.ndarray:
    with gzip.open(path, "rb") as fh:
        magic = int.from_bytes(fh.read(4), "big")
        ndim = magic % 256
        shape = [int.from_bytes(fh.read(4), "big") for _ in range(ndim)]
        return np.frombuffer(fh.read(), dtype=np.uint8).reshape(shape)


def _load_mnist_like(name, data_dir: Path):
    base = data_dir / name
    url_base = _MNIST_URLS[name]
    for fname, md5 in _MNIST_FILES[name]:
        _fetch(url_base + fname, base / fname, md5)
    files = [base / f for f, _ in _MNIST_FILES[name]]
    train_x, train_y = _read_idx(files[0]), _read_idx(files[1])
    test_x, test_y = _read_idx(files[2]), _read_idx(files[3])

    def split(x, y):
        images = torch.from_numpy(x.astype(np.float32) / 255.0).unsqueeze(1)
        return DataSplit(images, torch.from_numpy(y.astype(np.int64)))

    return split(train_x, train_y), split(test_x, test_y)


def _load_cifar10(data_dir: Path):
    archive = data_dir / "cifar10" / "cifar-10-python.tar.gz"
    _fetch(_CIFAR_URL, archive, _CIFAR_MD5)

    def read_batches(names):
        xs, ys = [], []
        with tarfile.open(archive, "r:gz") as tf:
            for name in names:
                with tf.extractfile(f"cifar-10-batches-py/{name}") as fh:
                    batch = pickle.loads(fh.read(), encoding="bytes")
                xs.append(batch[b"data"])
                ys.extend(batch[b"labels"])
        x = np.concatenate(xs).reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
        return DataSplit(torch.from_numpy(x), torch.tensor(ys, dtype=torch.long))

    train = read_batches([f"data_batch_{i}" for i in range(1, 6)])
    test = read_batches(["test_batch"])
    return train, test


# ---------------------------------------------------------------------------
# subsetting and the public loader

def stratified_subset(split: DataSplit, fraction: float, seed: int) -> DataSplit:
    """Seeded per-class subsample keeping round(fraction * count) of each class,
    in original dataset order."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    if fraction == 1.0:
        return split
    rng = np.random.default_rng(seed)
    labels = split.labels.numpy()
    keep = []
    for cls in np.unique(labels):
        idx = np.nonzero(labels == cls)[0]
        take = int(round(fraction * len(idx)))
        keep.append(rng.permutation(idx)[:take])
    keep = np.sort(np.concatenate(keep))
    return DataSplit(split.images[keep], split.labels[torch.from_numpy(keep)])


def load_dataset(name: str, data_dir=None, subset_fraction: float = 1.0,
                 seed: int = 0, params: dict | None = None) -> DatasetBundle:
    """Load one of the supported datasets as a train/test bundle.

    ``params`` tunes the synthetic task (see MOONS_DEFAULTS) and is rejected
    for real datasets.  ``subset_fraction`` stratified-subsamples both splits
    under ``seed``.
    """
    if name not in DATASETS:
        raise ValueError(f"unknown dataset {name!r}; expected one of {DATASETS}")
    params = dict(params or {})
    if name == "synthetic_moons_images":
        unknown = set(params) - set(MOONS_DEFAULTS)
        if unknown:
            raise ValueError(f"unknown moons params {sorted(unknown)}")
        p = {**MOONS_DEFAULTS, **params}
        train_images, train_labels = make_moons_images(p["train_size"], seed=seed, **{
            k: p[k] for k in ("image_size", "noise", "blob_sigma", "amplitude", "bg_noise")})
        test_images, test_labels = make_moons_images(p["test_size"], seed=seed + 1, **{
            k: p[k] for k in ("image_size", "noise", "blob_sigma", "amplitude", "bg_noise")})
        train = DataSplit(train_images, train_labels)
        test = DataSplit(test_images, test_labels)
        num_classes = 2
    else:
        if params:
            raise ValueError(f"dataset {name} takes no params, got {sorted(params)}")
        base = Path(data_dir) if data_dir is not None else default_data_dir()
        if name == "cifar10":
            train, test = _load_cifar10(base)
        else:
            train, test = _load_mnist_like(name, base)
        num_classes = 10
    train = stratified_subset(train, subset_fraction, seed)
    test = stratified_subset(test, subset_fraction, seed + 1)
    return DatasetBundle(name=name, train=train, test=test, num_classes=num_classes)
