"""Small image classifiers: presets, training, evaluation and a binary model format."""
from __future__ import annotations

import contextlib
import copy
import json
import logging
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

MODEL_MAGIC = b"VIBGNET\x00"
MODEL_VERSION = 1


class ModelFormatError(ValueError):
    pass


class ChecksumError(ModelFormatError):
    pass


class ArchitectureMismatch(ModelFormatError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


def preset_layers(name, num_classes):
    if name == "mlp2":
        return [{"type": "flatten"}, {"type": "dense", "units": 128}, {"type": "relu"},
                {"type": "dense", "units": num_classes}]
    if name == "cnn-small":
        return [
            {"type": "conv", "filters": 16, "kernel": 3, "padding": "same"}, {"type": "relu"},
            {"type": "maxpool"},
            {"type": "conv", "filters": 32, "kernel": 3, "padding": "same"}, {"type": "relu"},
            {"type": "maxpool"},
            {"type": "flatten"},
            {"type": "dense", "units": 128}, {"type": "relu"},
            {"type": "dense", "units": num_classes},
        ]
    if name == "linear":
        return [{"type": "flatten"}, {"type": "dense", "units": num_classes}]
    raise ValueError(f"unknown architecture preset {name!r} (known: mlp2, cnn-small, linear)")


def _param_shapes(layers, input_shape):
    """Walk the layer list, returning parameter shapes and the output shape."""
    shape = tuple(input_shape)
    shapes = []
    for layer in layers:
        kind = layer["type"]
        if kind == "conv":
            c, h, w = shape
            k = layer["kernel"]
            shapes += [(layer["filters"], c, k, k), (layer["filters"],)]
            if layer.get("padding", "valid") == "valid":
                h, w = h - k + 1, w - k + 1
            shape = (layer["filters"], h, w)
        elif kind == "maxpool":
            c, h, w = shape
            shape = (c, h // 2, w // 2)
        elif kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif kind == "dense":
            shapes += [(shape[0], layer["units"]), (layer["units"],)]
            shape = (layer["units"],)
        elif kind != "relu":
            raise ValueError(f"unknown layer type {kind!r}")
    return shapes, shape


class Network:
    """Layered classifier. ``forward`` returns (N, C) log-probabilities."""

    def __init__(self, arch, input_shape, num_classes, layers=None, params=None):
        self.arch = arch
        self.input_shape = tuple(int(v) for v in input_shape)
        self.num_classes = int(num_classes)
        self.layers = layers if layers is not None else preset_layers(arch, num_classes)
        shapes, out = _param_shapes(self.layers, self.input_shape)
        if out != (self.num_classes,):
            raise ValueError(f"{arch}: output shape {out} does not match {num_classes} classes")
        if params is None:
            params = [np.zeros(s, dtype=np.float32) for s in shapes]
        if [tuple(p.shape) for p in params] != shapes:
            raise ArchitectureMismatch(f"{arch}: parameter shapes {[p.shape for p in params]} "
                                       f"do not match descriptor {shapes}")
        self.params = [Tensor(p, requires_grad=True) for p in params]

    @property
    def descriptor(self):
        return {"arch": self.arch, "input_shape": list(self.input_shape),
                "num_classes": self.num_classes, "layers": self.layers}

    @property
    def dim(self):
        return int(np.prod(self.input_shape))

    def num_parameters(self):
        return sum(p.data.size for p in self.params)

    def logits(self, x):
        """Pre-softmax scores. ``x`` is (N, d), (N, C, H, W) array or Tensor."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float32))
        if x.data.ndim == 1:
            x = T.reshape(x, (1, -1))
        if x.shape[1:] != self.input_shape:
            if int(np.prod(x.shape[1:])) != self.dim:
                raise T.ShapeError(f"input: expected images of shape {self.input_shape}, "
                                   f"got {x.shape[1:]}")
            x = T.reshape(x, (x.shape[0],) + self.input_shape)
        it = iter(self.params)
        for layer in self.layers:
            kind = layer["type"]
            if kind == "conv":
                x = T.add_bias(T.conv2d(x, next(it), layer.get("padding", "valid")), next(it))
            elif kind == "dense":
                x = T.add_bias(T.matmul(x, next(it)), next(it))
            elif kind == "relu":
                x = T.relu(x)
            elif kind == "maxpool":
                x = T.maxpool2x2(x)
            elif kind == "flatten":
                x = T.flatten(x)
        return x

    def forward(self, x):
        return T.log_softmax(self.logits(x))

    __call__ = forward

    def predict_logits(self, x, batch_size=500):
        x = np.asarray(x, dtype=np.float32)
        out = []
        with no_grad():
            for s in range(0, len(x), batch_size):
                out.append(self.logits(x[s:s + batch_size]).data)
        return np.concatenate(out) if out else np.zeros((0, self.num_classes), np.float32)

    def predict(self, x, batch_size=500):
        # np.argmax returns the first maximum: ties go to the lowest class index
        return self.predict_logits(x, batch_size).argmax(axis=1)

    def predict_proba(self, x, batch_size=500):
        z = self.predict_logits(x, batch_size).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def copy(self):
        return Network(self.arch, self.input_shape, self.num_classes, copy.deepcopy(self.layers),
                       [p.data.copy() for p in self.params])

    @contextlib.contextmanager
    def frozen(self):
        """Treat parameters as constants (input gradients only, no parameter grads)."""
        prev = [p.requires_grad for p in self.params]
        for p in self.params:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, r in zip(self.params, prev):
                p.requires_grad = r

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def checksum(self):
        crc = 0
        for p in self.params:
            crc = zlib.crc32(p.data.tobytes(), crc)
        return crc

    def same_architecture(self, other):
        return self.descriptor == other.descriptor


def build(arch, num_classes=10, input_shape=(1, 28, 28), seed=0):
    """New network with He-uniform weights and zero biases, deterministic in ``seed``."""
    net = Network(arch, input_shape, num_classes)
    rng = np.random.default_rng(seed)
    for p in net.params:
        if p.data.ndim == 1:
            continue
        fan_in = p.data.shape[0] if p.data.ndim == 2 else int(np.prod(p.data.shape[1:]))
        limit = np.sqrt(6.0 / fan_in)
        p.data[...] = rng.uniform(-limit, limit, size=p.data.shape).astype(np.float32)
    return net


# ---------------------------------------------------------------- optimizers

class SGD:
    def __init__(self, params, lr):
        self.params = params
        self.lr = np.float32(lr)

    def step(self):
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        step = np.float32(self.lr * np.sqrt(c2) / c1)
        eps = np.float32(self.eps * np.sqrt(c2))
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= np.float32(self.b1)
            m += np.float32(1 - self.b1) * g
            v *= np.float32(self.b2)
            v += np.float32(1 - self.b2) * g * g
            p.data -= step * m / (np.sqrt(v) + eps)


def make_optimizer(kind, params, lr):
    if kind == "adam":
        return Adam(params, lr)
    if kind == "sgd":
        return SGD(params, lr)
    raise ValueError(f"unknown optimizer {kind!r}")


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 64
    lr: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainTrace:
    loss: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)


def _check_input(net, dataset):
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if dataset.dim != net.dim:
        raise T.ShapeError(f"dataset images have {dataset.dim} pixels, "
                           f"{net.arch} expects {net.input_shape}")


def fit_batches(net, images, batch_loss, epochs, batch_size, lr, optimizer="adam", seed=0,
                on_batch=None):
    """Shared minibatch loop. ``batch_loss(net, idx)`` returns (loss Tensor, n_correct).

    Returns a :class:`TrainTrace`. Raises :class:`TrainingDiverged` on a
    non-finite loss.
    """
    opt = make_optimizer(optimizer, net.params, lr)
    rng = np.random.default_rng(seed)
    trace = TrainTrace()
    m = len(images)
    for epoch in range(epochs):
        order = rng.permutation(m)
        tot_loss, tot_correct = 0.0, 0
        for s in range(0, m, batch_size):
            idx = order[s:s + batch_size]
            net.zero_grad()
            try:
                # non-finite values are detected and reported explicitly below
                with np.errstate(over="ignore", invalid="ignore"):
                    loss, correct = batch_loss(net, idx)
            except T.NonFiniteError as e:
                raise TrainingDiverged(f"epoch {epoch + 1}: non-finite values ({e}); "
                                       f"learning rate {lr} is probably too high") from e
            lv = float(loss.data)
            if not np.isfinite(lv):
                raise TrainingDiverged(f"epoch {epoch + 1}: loss is {lv}; "
                                       f"learning rate {lr} is probably too high")
            T.backward(loss)
            opt.step()
            if on_batch is not None:
                on_batch(lv)
            tot_loss += lv * len(idx)
            tot_correct += correct
        trace.loss.append(tot_loss / m)
        trace.accuracy.append(100.0 * tot_correct / m)
        log.info("epoch %d/%d  loss %.4f  acc %.2f%%", epoch + 1, epochs, trace.loss[-1],
                 trace.accuracy[-1])
    return trace


def train(net, dataset, cfg):
    """Cross-entropy training in place. Returns (net, trace)."""
    _check_input(net, dataset)
    X, y = dataset.images, dataset.labels

    def batch_loss(net, idx):
        logp = net.forward(X[idx])
        return T.nll_loss(logp, y[idx]), int((logp.data.argmax(axis=1) == y[idx]).sum())

    trace = fit_batches(net, X, batch_loss, cfg.epochs, cfg.batch_size, cfg.lr, cfg.optimizer,
                        cfg.seed)
    return net, trace


def evaluate(net, dataset, batch_size=500):
    """Top-1 accuracy in percent."""
    _check_input(net, dataset)
    pred = net.predict(dataset.images, batch_size)
    return 100.0 * float((pred == dataset.labels).sum()) / len(dataset)


def accuracy_on(net, images, labels, batch_size=500):
    if len(images) == 0:
        raise ValueError("no images to evaluate")
    return 100.0 * float((net.predict(images, batch_size) == np.asarray(labels)).sum()) / len(images)


# ---------------------------------------------------------------- serialization

def save(net, path):
    desc = json.dumps(net.descriptor, sort_keys=True).encode("utf-8")
    parts = [MODEL_MAGIC, struct.pack("<HI", MODEL_VERSION, len(desc)), desc,
             struct.pack("<I", len(net.params))]
    for p in net.params:
        a = np.ascontiguousarray(p.data, dtype="<f4")
        parts.append(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    body = b"".join(parts)
    with open(path, "wb") as f:
        f.write(body + struct.pack("<I", zlib.crc32(body)))


def load(path, arch=None):
    """Read a model file. Pass ``arch`` to insist on a specific preset."""
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < len(MODEL_MAGIC) + 4 or buf[:len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: not a vibguard model file")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError(f"{path}: checksum mismatch (file truncated or corrupted)")
    off = len(MODEL_MAGIC)
    version, dlen = struct.unpack_from("<HI", body, off)
    if version != MODEL_VERSION:
        raise ModelFormatError(f"{path}: format version {version}, expected {MODEL_VERSION}")
    off += 6
    desc = json.loads(body[off:off + dlen].decode("utf-8"))
    off += dlen
    if arch is not None and desc["arch"] != arch:
        raise ArchitectureMismatch(f"{path}: holds a {desc['arch']!r} model, expected {arch!r}")
    (nparams,) = struct.unpack_from("<I", body, off)
    off += 4
    params = []
    for _ in range(nparams):
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        n = int(np.prod(shape))
        params.append(np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32))
        off += 4 * n
    if off != len(body):
        raise ModelFormatError(f"{path}: {len(body) - off} trailing bytes")
    return Network(desc["arch"], desc["input_shape"], desc["num_classes"], desc["layers"], params)
