"""Gradient-based adversarial attacks against a :class:`~vibguard.classifier.Network`.

All attacks are batched: they take (n, d) images in [0, 1] and return an
:class:`AdversarialSet`. Every adversarial image is clamped to [0, 1], and
``success`` means the network's prediction changed.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .vib import l1_distance

log = logging.getLogger(__name__)

KINDS = ("fgsm", "pgd", "deepfool", "jsma", "cw_l2")
ADV_MAGIC = b"VIBGADV\x00"
ADV_VERSION = 1
CW_BOX = np.float32(1.0 - 1e-6)


def parse_epsilon(value):
    """``0.3`` -> 0.3, ``"8/255"`` -> 8/255."""
    if isinstance(value, str) and "/" in value:
        num, den = value.split("/")
        return float(num) / float(den)
    return float(value)


@dataclass
class AttackConfig:
    kind: str
    epsilon: float = 0.3
    step_size: float | None = None
    steps: int = 10
    random_start: bool = False
    max_iters: int = 50
    overshoot: float = 0.02
    theta: float = 0.1
    gamma: float = 1.0
    c: float = 1e-2
    iters: int = 200
    binary_search_steps: int = 5
    kappa: float = 0.0
    lr: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; expected one of {KINDS}")
        self.epsilon = parse_epsilon(self.epsilon)
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.kind == "pgd":
            if self.step_size is None:
                self.step_size = self.epsilon / 4
            if self.steps < 1 or self.step_size > self.epsilon + 1e-12:
                raise ValueError("pgd needs steps >= 1 and step_size <= epsilon")
        if self.kind == "jsma" and not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if min(self.max_iters, self.iters, self.binary_search_steps) < 1:
            raise ValueError("iteration counts must be >= 1")

    @property
    def label(self):
        if self.kind in ("fgsm", "pgd"):
            return f"{self.kind}(eps={self.epsilon:.4g})"
        return self.kind

    def to_json(self):
        return asdict(self)


@dataclass
class AttackResult:
    adversarial: np.ndarray
    index: int
    success: bool
    perturbation_l1: float
    perturbation_linf: float


@dataclass
class AdversarialSet:
    """Adversarial images for a batch of originals, row-aligned with ``indices``."""

    images: np.ndarray
    indices: np.ndarray
    labels: np.ndarray
    success: np.ndarray
    perturbation_l1: np.ndarray
    perturbation_linf: np.ndarray
    config: dict = field(default_factory=dict)
    dataset_id: str = ""

    def __len__(self):
        return len(self.images)

    def results(self):
        return [AttackResult(self.images[k], int(self.indices[k]), bool(self.success[k]),
                             float(self.perturbation_l1[k]), float(self.perturbation_linf[k]))
                for k in range(len(self))]

    @property
    def success_rate(self):
        return 100.0 * float(self.success.mean()) if len(self) else 0.0

    def save(self, path):
        n, d = self.images.shape
        header = json.dumps({"dataset": self.dataset_id, "config": self.config, "count": n,
                             "dim": d, "labels": [int(v) for v in self.labels]},
                            sort_keys=True).encode()
        rec = np.dtype([("index", "<u4"), ("success", "u1"), ("image", "<f4", (d,))])
        arr = np.empty(n, dtype=rec)
        arr["index"] = self.indices
        arr["success"] = self.success
        arr["image"] = self.images
        with open(path, "wb") as f:
            f.write(ADV_MAGIC + struct.pack("<HI", ADV_VERSION, len(header)) + header)
            f.write(arr.tobytes())

    @classmethod
    def load(cls, path, originals=None):
        """Read an adversarial set. ``originals`` (the source Dataset) restores
        the perturbation magnitudes; without it they are NaN."""
        with open(path, "rb") as f:
            buf = f.read()
        if buf[:len(ADV_MAGIC)] != ADV_MAGIC:
            raise ValueError(f"{path}: not an adversarial-set file")
        off = len(ADV_MAGIC)
        version, hlen = struct.unpack_from("<HI", buf, off)
        if version != ADV_VERSION:
            raise ValueError(f"{path}: version {version}, expected {ADV_VERSION}")
        off += 6
        header = json.loads(buf[off:off + hlen])
        off += hlen
        n, d = header["count"], header["dim"]
        rec = np.dtype([("index", "<u4"), ("success", "u1"), ("image", "<f4", (d,))])
        if len(buf) - off != n * rec.itemsize:
            raise ValueError(f"{path}: expected {n} records of {rec.itemsize} bytes")
        arr = np.frombuffer(buf, dtype=rec, count=n, offset=off)
        images = arr["image"].astype(np.float32)
        idx = arr["index"].astype(np.int64)
        if originals is not None:
            x0 = originals.images[idx]
            l1, linf = _magnitudes(images, x0)
        else:
            l1 = linf = np.full(n, np.nan)
        return cls(images, idx, np.asarray(header["labels"], dtype=np.int64),
                   arr["success"].astype(bool), l1, linf, header["config"], header["dataset"])


def _magnitudes(x_adv, x0):
    l1 = np.array([l1_distance(a, b) for a, b in zip(x_adv, x0)])
    linf = np.abs(x_adv.astype(np.float64) - x0).max(axis=1) if len(x0) else np.zeros(0)
    return l1, linf


def _finish(net, x0, x_adv, labels, indices, cfg, pred0=None):
    x_adv = np.clip(x_adv, 0.0, 1.0).astype(np.float32)
    if pred0 is None:
        pred0 = net.predict(x0)
    success = net.predict(x_adv) != pred0
    l1, linf = _magnitudes(x_adv, x0)
    return AdversarialSet(x_adv, np.asarray(indices, dtype=np.int64), np.asarray(labels, np.int64),
                          success, l1, linf, cfg.to_json() if cfg else {})


def _as_batch(x):
    x = np.asarray(x, dtype=np.float32)
    return (x[None], True) if x.ndim == 1 else (x, False)


# ---------------------------------------------------------------- gradients

def loss_input_grad(net, x, y):
    """d/dx of the mean NLL loss at integer labels ``y``."""
    with net.frozen():
        xt = Tensor(x, requires_grad=True)
        loss = T.nll_loss(net.forward(xt), y)
        T.backward(loss)
    if not np.isfinite(xt.grad).all():
        raise T.NonFiniteError("input gradient contains NaN/Inf")
    return xt.grad


def logits_and_jacobian(net, x, chunk=64):
    """Logits (n, C) and their input Jacobian (n, C, d)."""
    n, d = x.shape
    C = net.num_classes
    Z = np.empty((n, C), np.float32)
    J = np.empty((n, C, d), np.float32)
    eye = np.eye(C, dtype=np.float32)
    with net.frozen():
        for s in range(0, n, chunk):
            xb = x[s:s + chunk]
            b = len(xb)
            # one replica of each image per class, each seeded with its one-hot cotangent
            xt = Tensor(np.repeat(xb, C, axis=0), requires_grad=True)
            z = net.logits(xt)
            T.backward(z, np.tile(eye, (b, 1)))
            Z[s:s + b] = z.data[::C]
            J[s:s + b] = xt.grad.reshape(b, C, d)
    return Z, J


def vjp_input(net, x, cotangent):
    """Logits and d(sum(cotangent * logits))/dx."""
    with net.frozen():
        xt = Tensor(x, requires_grad=True)
        z = net.logits(xt)
        T.backward(z, cotangent)
    return z.data, xt.grad


# ---------------------------------------------------------------- FGSM / PGD

def fgsm_batch(net, x, y, epsilon):
    eps = np.float32(epsilon)
    if eps < 0:
        raise ValueError("epsilon must be >= 0")
    g = loss_input_grad(net, x, y)
    return np.clip(x + eps * np.sign(g), 0.0, 1.0).astype(np.float32)


def pgd_batch(net, x, y, epsilon, step_size, steps, random_start=False, seeds=None):
    eps = np.float32(epsilon)
    alpha = np.float32(step_size)
    if steps < 1 or alpha > eps:
        raise ValueError("pgd needs steps >= 1 and step_size <= epsilon")
    lo, hi = x - eps, x + eps
    xa = x.copy()
    if random_start:
        if seeds is None:
            seeds = np.arange(len(x))
        noise = np.stack([np.random.default_rng(s).uniform(-eps, eps, x.shape[1]) for s in seeds])
        xa = np.clip(x + noise.astype(np.float32), 0.0, 1.0)
    for _ in range(steps):
        g = loss_input_grad(net, xa, y)
        xa = xa + alpha * np.sign(g)
        xa = np.clip(np.clip(xa, lo, hi), 0.0, 1.0).astype(np.float32)
    return xa


def fgsm(net, x, y, epsilon):
    xb, single = _as_batch(x)
    yb = np.atleast_1d(y)
    res = _finish(net, xb, fgsm_batch(net, xb, yb, epsilon), yb, np.arange(len(xb)),
                  AttackConfig("fgsm", epsilon=epsilon))
    return res.results()[0] if single else res


def pgd(net, x, y, epsilon, step_size, steps, random_start=False, seed=0):
    xb, single = _as_batch(x)
    yb = np.atleast_1d(y)
    seeds = [[seed, i] for i in range(len(xb))]
    xa = pgd_batch(net, xb, yb, epsilon, step_size, steps, random_start, seeds)
    cfg = AttackConfig("pgd", epsilon=epsilon, step_size=step_size, steps=steps,
                       random_start=random_start, seed=seed)
    res = _finish(net, xb, xa, yb, np.arange(len(xb)), cfg)
    return res.results()[0] if single else res


# ---------------------------------------------------------------- DeepFool

def deepfool_batch(net, x, max_iters=50, overshoot=0.02, y=None):
    """Multiclass DeepFool. Images already misclassified w.r.t. ``y`` are returned as is.

    Returns (x_adv, iterations used per image).
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    n = len(x)
    k0 = net.predict(x)
    x_adv = x.copy()
    r_tot = np.zeros_like(x, dtype=np.float64)
    iters = np.zeros(n, dtype=np.int64)
    active = np.ones(n, dtype=bool) if y is None else (k0 == np.asarray(y))
    for _ in range(max_iters):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        Z, J = logits_and_jacobian(net, x_adv[idx])
        still = Z.argmax(axis=1) == k0[idx]
        if not still.all():
            active[idx[~still]] = False
            idx, Z, J = idx[still], Z[still], J[still]
            if idx.size == 0:
                break
        rows = np.arange(len(idx))
        f = Z.astype(np.float64) - Z[rows, k0[idx]][:, None]
        w = J.astype(np.float64) - J[rows, k0[idx]][:, None, :]
        norm = np.linalg.norm(w, axis=2)
        with np.errstate(divide="ignore", invalid="ignore"):
            pert = np.abs(f) / norm
        pert[rows, k0[idx]] = np.inf
        degenerate = (norm == 0)
        degenerate[rows, k0[idx]] = False
        if degenerate.any():
            log.debug("deepfool: %d zero-gradient class differences skipped", int(degenerate.sum()))
        pert[degenerate] = np.inf
        lbest = pert.argmin(axis=1)
        stuck = ~np.isfinite(pert[rows, lbest])
        if stuck.any():
            log.warning("deepfool: %d images have no usable class gradient; stopping them",
                        int(stuck.sum()))
            active[idx[stuck]] = False
        ok = ~stuck
        wl = w[rows, lbest]
        fl = f[rows, lbest]
        nl = norm[rows, lbest]
        r = np.zeros_like(wl)
        r[ok] = (np.abs(fl[ok]) / nl[ok] ** 2)[:, None] * wl[ok]
        r_tot[idx] += r
        iters[idx[ok]] += 1
        x_adv[idx] = np.clip(x[idx] + (1 + overshoot) * r_tot[idx], 0.0, 1.0).astype(np.float32)
    return x_adv, iters


def deepfool(net, x, max_iters=50, overshoot=0.02, y=None):
    xb, single = _as_batch(x)
    xa, _ = deepfool_batch(net, xb, max_iters, overshoot, None if y is None else np.atleast_1d(y))
    labels = np.atleast_1d(y) if y is not None else net.predict(xb)
    res = _finish(net, xb, xa, labels, np.arange(len(xb)),
                  AttackConfig("deepfool", max_iters=max_iters, overshoot=overshoot))
    return res.results()[0] if single else res


# ---------------------------------------------------------------- JSMA

def saliency_pair(alpha, beta, domain):
    """Best pixel pair for an increasing perturbation.

    ``alpha``: gradient of the target logit; ``beta``: summed gradient of the
    other logits. A pair (p, q) is admissible when alpha_p + alpha_q > 0 and
    beta_p + beta_q < 0; the score is (alpha_p + alpha_q) * |beta_p + beta_q|.
    Returns (p, q) with p < q, or None when no pair is admissible.
    """
    cand = np.flatnonzero(domain)
    if cand.size < 2:
        return None
    a = alpha[cand].astype(np.float64)
    b = beta[cand].astype(np.float64)
    A = a[:, None] + a[None, :]
    B = b[:, None] + b[None, :]
    score = np.where((A > 0) & (B < 0), A * -B, -np.inf)
    np.fill_diagonal(score, -np.inf)
    # keep p < q only so argmax picks the lexicographically first best pair
    score[np.tril_indices(cand.size)] = -np.inf
    k = int(score.argmax())
    if not np.isfinite(score.flat[k]):
        return None
    p, q = divmod(k, cand.size)
    return int(cand[p]), int(cand[q])


def jsma_batch(net, x, targets, theta=0.1, gamma=1.0, untargeted=False):
    """Pairwise-saliency JSMA, increasing pixels by ``theta`` per step.

    At most ``floor(gamma * d / 2)`` pair updates are made, so no more than
    ``gamma * d`` pixels change. With ``theta < 1`` a pixel can be picked again
    until it saturates at 1. Returns (x_adv, pairs used per image).
    """
    n, d = x.shape
    max_pairs = int(np.floor(gamma * d / 2))
    x_adv = x.copy()
    used = np.zeros(n, dtype=np.int64)
    if max_pairs == 0:
        return x_adv, used
    targets = np.asarray(targets)
    k0 = net.predict(x)
    domain = x_adv < 1.0
    active = np.ones(n, dtype=bool)
    C = net.num_classes
    for _ in range(max_pairs):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        onehot = np.eye(C, dtype=np.float32)[targets[idx]]
        Z, ga = vjp_input(net, x_adv[idx], onehot)
        _, gall = vjp_input(net, x_adv[idx], np.ones_like(onehot))
        pred = Z.argmax(axis=1)
        done = (pred == targets[idx]) | (untargeted & (pred != k0[idx]))
        for pos, i in enumerate(idx):
            if done[pos]:
                active[i] = False
                continue
            pair = saliency_pair(ga[pos], gall[pos] - ga[pos], domain[i])
            if pair is None:
                active[i] = False
                continue
            for p in pair:
                x_adv[i, p] = min(1.0, x_adv[i, p] + theta)
                if x_adv[i, p] >= 1.0:
                    domain[i, p] = False
            used[i] += 1
    return x_adv, used


def runner_up(net, x):
    z = net.predict_logits(x)
    z[np.arange(len(z)), z.argmax(axis=1)] = -np.inf
    return z.argmax(axis=1)


def jsma(net, x, target_class=None, theta=0.1, gamma=1.0):
    """Targeted JSMA; with ``target_class=None`` the runner-up class is targeted."""
    xb, single = _as_batch(x)
    pred = net.predict(xb)
    untargeted = target_class is None
    targets = runner_up(net, xb) if untargeted else np.broadcast_to(np.atleast_1d(target_class), (len(xb),))
    if not untargeted and (targets == pred).any():
        raise ValueError("target_class must differ from the current prediction")
    xa, _ = jsma_batch(net, xb, targets, theta, gamma, untargeted)
    res = _finish(net, xb, xa, pred, np.arange(len(xb)),
                  AttackConfig("jsma", theta=theta, gamma=gamma), pred0=pred)
    return res.results()[0] if single else res


# ---------------------------------------------------------------- Carlini-Wagner l2

def cw_to_image(w):
    return ((np.tanh(w) * CW_BOX + 1) * np.float32(0.5)).astype(np.float32)


def cw_from_image(x):
    return np.arctanh((2 * x.astype(np.float64) - 1) * float(CW_BOX)).astype(np.float32)


def _cw_margin(Z, y, kappa):
    rows = np.arange(len(Z))
    other = Z.copy()
    other[rows, y] = -np.inf
    t = other.argmax(axis=1)
    return Z[rows, y] - Z[rows, t], t


def cw_l2_batch(net, x, y, c=1e-2, iters=200, binary_search_steps=5, kappa=0.0, lr=1e-2,
                c_range=(1e-4, 1e2), trace=None):
    """C&W l2 with tanh box constraint, Adam, and per-image binary search on c."""
    if iters < 1 or binary_search_steps < 1:
        raise ValueError("iters and binary_search_steps must be >= 1")
    n, d = x.shape
    y = np.asarray(y)
    C = net.num_classes
    c_lo, c_hi_cap = c_range
    cs = np.full(n, c, dtype=np.float64)
    lo = np.full(n, c_lo)
    hi = np.full(n, np.inf)
    best_l2 = np.full(n, np.inf)
    best_adv = x.copy()
    fallback_margin = np.full(n, np.inf)
    fallback = x.copy()
    w0 = cw_from_image(x)
    eye = np.eye(C, dtype=np.float32)
    b1, b2, eps = 0.9, 0.999, 1e-8
    for _ in range(binary_search_steps):
        w = w0.copy()
        m = np.zeros_like(w)
        v = np.zeros_like(w)
        found = np.zeros(n, dtype=bool)
        cvec = cs.astype(np.float32)[:, None]
        for it in range(1, iters + 1):
            xa = cw_to_image(w)
            with net.frozen():
                xt = Tensor(xa, requires_grad=True)
                z = net.logits(xt)
                margin, t = _cw_margin(z.data, y, kappa)
                # only the hinge's active branch carries gradient
                active = (margin > -kappa).astype(np.float32)[:, None]
                cot = (eye[y] - eye[t]) * cvec * active
                T.backward(z, cot)
            l2 = ((xa.astype(np.float64) - x) ** 2).sum(axis=1)
            if trace is not None:
                trace.append(xa)
            succ = (margin <= -kappa) & (z.data.argmax(axis=1) != y) if kappa > 0 else (z.data.argmax(axis=1) != y)
            improve = succ & (l2 < best_l2)
            best_l2[improve] = l2[improve]
            best_adv[improve] = xa[improve]
            found |= succ
            worse = ~succ & (margin < fallback_margin) & ~np.isfinite(best_l2)
            fallback_margin[worse] = margin[worse]
            fallback[worse] = xa[worse]
            gx = 2 * (xa - x) + xt.grad
            gw = gx * (np.float32(0.5) * CW_BOX) * (1 - np.tanh(w) ** 2)
            if not np.isfinite(gw).all():
                raise T.NonFiniteError("cw_l2: gradient contains NaN/Inf")
            m = b1 * m + (1 - b1) * gw
            v = b2 * v + (1 - b2) * gw * gw
            mhat = m / (1 - b1 ** it)
            vhat = v / (1 - b2 ** it)
            w = (w - lr * mhat / (np.sqrt(vhat) + eps)).astype(np.float32)
        hi = np.where(found, np.minimum(hi, cs), hi)
        lo = np.where(found, lo, np.maximum(lo, cs))
        bracketed = np.isfinite(hi)
        cs = np.where(bracketed, (lo + hi) / 2, np.minimum(cs * 10, c_hi_cap))
    out = np.where(np.isfinite(best_l2)[:, None], best_adv, fallback)
    return out.astype(np.float32), best_l2


def cw_l2(net, x, y, c=1e-2, iters=200, binary_search_steps=5, kappa=0.0, lr=1e-2):
    xb, single = _as_batch(x)
    yb = np.atleast_1d(y)
    xa, _ = cw_l2_batch(net, xb, yb, c, iters, binary_search_steps, kappa, lr)
    cfg = AttackConfig("cw_l2", c=c, iters=iters, binary_search_steps=binary_search_steps,
                       kappa=kappa, lr=lr)
    res = _finish(net, xb, xa, yb, np.arange(len(xb)), cfg)
    return res.results()[0] if single else res


# ---------------------------------------------------------------- suite

def generate(net, images, labels, cfg, indices=None, batch_size=100):
    """Run one configured attack over a batch of images."""
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels)
    if indices is None:
        indices = np.arange(len(images))
    indices = np.asarray(indices)
    out = []
    for s in range(0, len(images), batch_size):
        x, y, ix = images[s:s + batch_size], labels[s:s + batch_size], indices[s:s + batch_size]
        if cfg.kind == "fgsm":
            xa = fgsm_batch(net, x, y, cfg.epsilon)
        elif cfg.kind == "pgd":
            xa = pgd_batch(net, x, y, cfg.epsilon, cfg.step_size, cfg.steps, cfg.random_start,
                           [[cfg.seed, int(i)] for i in ix])
        elif cfg.kind == "deepfool":
            xa, _ = deepfool_batch(net, x, cfg.max_iters, cfg.overshoot, y)
        elif cfg.kind == "jsma":
            xa, _ = jsma_batch(net, x, runner_up(net, x), cfg.theta, cfg.gamma, untargeted=True)
        else:
            xa, _ = cw_l2_batch(net, x, y, cfg.c, cfg.iters, cfg.binary_search_steps, cfg.kappa,
                                cfg.lr)
        out.append(xa)
    xa = np.concatenate(out) if out else np.zeros_like(images)
    res = _finish(net, images, xa, labels, indices, cfg)
    log.info("%s: success %.1f%%", cfg.label, res.success_rate)
    return res


def run_attack_suite(net, dataset, configs, batch_size=100):
    """Attack every image of ``dataset`` with each config.

    Returns ``(sets, accuracy)`` where ``accuracy[k]`` is the network's
    accuracy (%) on the k-th adversarial set.
    """
    from .classifier import accuracy_on

    sets, acc = [], []
    for cfg in configs:
        adv = generate(net, dataset.images, dataset.labels, cfg, batch_size=batch_size)
        adv.dataset_id = f"{dataset.name}/{dataset.split}/{len(dataset)}"
        sets.append(adv)
        acc.append(accuracy_on(net, adv.images, adv.labels))
    return sets, acc
