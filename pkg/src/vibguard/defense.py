"""VIB-bounded Gaussian distillation defense and an adversarial-training baseline.

The student starts as a copy of the teacher and is trained to match the
teacher's clean-input probabilities on noisy copies of each image, where the
noise std of image i is its bound sigma_i(k).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .classifier import ArchitectureMismatch, TrainTrace, fit_batches

log = logging.getLogger(__name__)


@dataclass
class DefenseConfig:
    n: int = 20
    k: float = 1.0
    epochs: int = 10
    lr: float = 1e-3
    clamp: bool = True
    seed: int = 0
    batch_size: int = 64

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if not self.k > 0:
            raise ValueError(f"k must be positive, got {self.k}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be positive")


def sample_rng(seed, i, j):
    """Generator for perturbation j of image i; independent of any other (i, j)."""
    return np.random.default_rng([int(seed), int(i), int(j)])


def perturb(x, sigma, rng, clamp=True):
    noise = (sigma * rng.standard_normal(x.shape[-1])).astype(np.float32)
    out = x + noise
    return np.clip(out, 0.0, 1.0) if clamp else out


class PerturbedSet:
    """The m*n noisy inputs of the distillation set.

    Sample ``s`` is perturbation ``j = s % n`` of image ``i = s // n``.
    Samples are regenerated on demand from (seed, i, j), so materializing
    the set and reading batches lazily give identical images.
    """

    def __init__(self, images, sigma, n, seed, clamp=True):
        self.images = images
        self.sigma = np.asarray(sigma, dtype=np.float64)
        self.n = int(n)
        self.seed = int(seed)
        self.clamp = clamp
        if len(self.sigma) != len(images):
            raise ValueError(f"{len(images)} images but {len(self.sigma)} sigma values")

    def __len__(self):
        return len(self.images) * self.n

    @property
    def base_index(self):
        return np.repeat(np.arange(len(self.images)), self.n)

    def sample(self, s):
        i, j = divmod(int(s), self.n)
        return perturb(self.images[i], self.sigma[i], sample_rng(self.seed, i, j), self.clamp)

    def batch(self, idx):
        idx = np.asarray(idx)
        out = np.empty((len(idx), self.images.shape[1]), dtype=np.float32)
        for r, s in enumerate(idx):
            out[r] = self.sample(s)
        return out

    def materialize(self):
        return self.batch(np.arange(len(self)))


def sample_perturbations(dataset, vib_table, n, k, seed, clamp=True):
    """Noisy copies of every image with per-image std sigma_i(k)."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if len(vib_table) != len(dataset):
        raise ValueError(f"VIB table has {len(vib_table)} entries, dataset has {len(dataset)} "
                         f"images: every index needs an entry")
    return PerturbedSet(dataset.images, vib_table.sigma_at(float(k)), n, seed, clamp)


def kl_loss(teacher_probs, student_log_probs):
    """KL(teacher || student) for one probability vector (float) or a batch (mean Tensor)."""
    if isinstance(student_log_probs, T.Tensor):
        return T.kl_div(teacher_probs, student_log_probs)
    out = T.kl_div(np.asarray(teacher_probs, np.float32), np.asarray(student_log_probs, np.float32))
    return float(out.data)


def teacher_targets(teacher, images):
    # same float32 softmax as the student's loss, so a student equal to the
    # teacher on an unperturbed input gets an exactly zero gradient
    probs = T.softmax_data(teacher.predict_logits(images))
    T.check_probabilities(probs, atol=1e-5)
    return probs


def train_defense(teacher, dataset, vib_table, cfg, on_batch=None):
    """Distill ``teacher`` onto the perturbed set. Returns (student, trace).

    The teacher's parameters are never written to.
    """
    student = teacher.copy()
    if not student.same_architecture(teacher):
        raise ArchitectureMismatch("student architecture differs from teacher")
    if dataset.dim != teacher.dim:
        raise T.ShapeError(f"dataset images have {dataset.dim} pixels, teacher expects "
                           f"{teacher.input_shape}")
    if cfg.epochs == 0:
        return student, TrainTrace()
    before = teacher.checksum()
    pset = sample_perturbations(dataset, vib_table, cfg.n, cfg.k, cfg.seed, cfg.clamp)
    targets = teacher_targets(teacher, dataset.images)
    base = pset.base_index

    def batch_loss(net, idx):
        x = pset.batch(idx)
        p = targets[base[idx]]
        z = net.logits(x)
        correct = int((z.data.argmax(axis=1) == p.argmax(axis=1)).sum())
        return T.kl_div_logits(p, z), correct

    log.info("defense: %d images x %d perturbations, k=%g", len(dataset), cfg.n, cfg.k)
    trace = fit_batches(student, np.empty(len(pset)), batch_loss, cfg.epochs, cfg.batch_size,
                        cfg.lr, "adam", cfg.seed, on_batch)
    if teacher.checksum() != before:
        raise RuntimeError("teacher parameters changed during distillation")
    return student, trace


def adversarial_training_baseline(net, dataset, adv_set, epochs, lr, batch_size=64, seed=0):
    """Fine-tune a copy of ``net`` on clean plus adversarial images with true labels."""
    model = net.copy()
    if epochs == 0:
        return model
    if epochs < 0 or not lr > 0:
        raise ValueError("epochs must be >= 0 and lr positive")
    X = np.concatenate([dataset.images, adv_set.images]).astype(np.float32)
    y = np.concatenate([dataset.labels, dataset.labels[adv_set.indices]])

    def batch_loss(net, idx):
        logp = net.forward(X[idx])
        return T.nll_loss(logp, y[idx]), int((logp.data.argmax(axis=1) == y[idx]).sum())

    fit_batches(model, X, batch_loss, epochs, batch_size, lr, "adam", seed)
    return model
