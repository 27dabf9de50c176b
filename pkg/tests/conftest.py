import gzip
import os
import struct
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

MNIST_DIR = os.environ.get("VIBGUARD_MNIST_DIR", "/root/data/mnist")
CIFAR_DIR = os.environ.get("VIBGUARD_CIFAR_DIR", "/root/data/cifar10")


def write_idx(path, arr, magic, compress=False):
    arr = np.asarray(arr, dtype=np.uint8)
    head = struct.pack(">I", magic) + struct.pack(">" + "I" * arr.ndim, *arr.shape)
    opener = gzip.open if compress else open
    with opener(path, "wb") as f:
        f.write(head + arr.tobytes())


def write_mnist_dir(directory, m=60, seed=0, split="train"):
    """Synthetic MNIST-format files: class c images are bright in row band c."""
    rng = np.random.default_rng(seed)
    labels = np.arange(m) % 10
    rng.shuffle(labels)
    imgs = rng.integers(0, 40, size=(m, 28, 28))
    for i, c in enumerate(labels):
        imgs[i, 2 * c + 4:2 * c + 8, 6:22] = rng.integers(180, 256, size=(4, 16))
    img_name, lab_name = {"train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
                          "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")}[split]
    write_idx(os.path.join(directory, img_name), imgs, 0x803)
    write_idx(os.path.join(directory, lab_name), labels, 0x801)
    return imgs, labels


@pytest.fixture
def mnist_like_dir(tmp_path):
    d = tmp_path / "mnist"
    d.mkdir()
    write_mnist_dir(str(d), 80, 0, "train")
    write_mnist_dir(str(d), 40, 1, "test")
    return str(d)


def quantized_dataset(m=40, shape=(1, 4, 4), classes=3, seed=0):
    from vibguard.data import Dataset

    rng = np.random.default_rng(seed)
    d = int(np.prod(shape))
    codes = rng.integers(0, 256, size=(m, d))
    labels = np.arange(m) % classes
    return Dataset(codes.astype(np.float32) / np.float32(255.0), labels.astype(np.int64), shape,
                   classes)


def blob_dataset(m=200, shape=(1, 6, 6), classes=3, seed=0, spread=0.08, noise_seed=None):
    """Well-separated class blobs in [0, 1]^d; ``noise_seed`` redraws points around the same centers."""
    from vibguard.data import Dataset

    rng = np.random.default_rng(seed)
    d = int(np.prod(shape))
    centers = rng.uniform(0.2, 0.8, size=(classes, d))
    if noise_seed is not None:
        rng = np.random.default_rng([seed, noise_seed])
    labels = np.arange(m) % classes
    x = np.clip(centers[labels] + spread * rng.standard_normal((m, d)), 0, 1)
    return Dataset(x.astype(np.float32), labels.astype(np.int64), shape, classes)


@pytest.fixture
def blobs():
    return blob_dataset()


@pytest.fixture(scope="session")
def blob_net():
    from vibguard import classifier as C

    ds = blob_dataset()
    net = C.build("mlp2", 3, ds.shape, seed=0)
    C.train(net, ds, C.TrainConfig(epochs=30, batch_size=32, lr=3e-3, seed=0))
    return net


def linear_net(w, b):
    """``linear`` preset with explicit weights: logits = x @ w + b."""
    from vibguard import classifier as C

    w = np.asarray(w, np.float32)
    d, c = w.shape
    return C.Network("linear", (1, 1, d), c, None, [w, np.asarray(b, np.float32)])


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
