"""End-to-end acceptance criteria on real MNIST and CIFAR-10.

Expensive artifacts (teachers, full-train VIB tables, adversarial sets,
defense models) are cached under ``$VIBGUARD_CACHE`` (default
``/root/cache/acceptance``) together with the wall-clock time it took to
build them, so reruns only pay for the cheap checks. Delete the directory
to rebuild everything. Each criterion prints one ``criterion N: PASS|FAIL``
line, repeated in the terminal summary.
"""
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

import oracles
from conftest import CIFAR_DIR, MNIST_DIR
from vibguard import attacks as A
from vibguard import classifier as C
from vibguard import data as D
from vibguard import defense as F
from vibguard import evaluation as E
from vibguard import vib as V
from vibguard._accel import backend_name
from vibguard.cli import timing_comparison
from vibguard.tensor import Tensor, backward, nll_loss

pytestmark = pytest.mark.acceptance

CACHE = Path(os.environ.get("VIBGUARD_CACHE", "/root/cache/acceptance"))
KS = [1.0, 2.0, 2.5, 3.0]
TEST_PER_CLASS = 100      # 1000-image attack subsets
DEFENSE_EPOCHS = 1        # over every training image, m * 20 noisy samples
AT_PER_CLASS = 200        # 2000-image adversarial-training subsets
TEACHER_EPOCHS = {"mnist": 5, "cifar10": 10}
CW = dict(c=1e-2, iters=200, binary_search_steps=5)

RESULTS = []


def record(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    RESULTS.append(line)
    CACHE.mkdir(parents=True, exist_ok=True)
    with open(CACHE / "summary.txt", "a") as f:
        f.write(time.strftime("%Y-%m-%d %H:%M:%S ") + line + "\n")
    assert ok, line


def _have(name):
    d = MNIST_DIR if name == "mnist" else CIFAR_DIR
    return os.path.isdir(d)


needs_data = pytest.mark.skipif(not (_have("mnist") and _have("cifar10")),
                                reason="MNIST/CIFAR-10 not found (set VIBGUARD_MNIST_DIR/CIFAR_DIR)")


# ---------------------------------------------------------------- cache

def _meta_path(key):
    return CACHE / f"{key}.meta.json"


def cached(key, path, build, load):
    """Load ``CACHE/path`` or build it with ``build(full_path) -> meta``; returns (obj, meta)."""
    CACHE.mkdir(parents=True, exist_ok=True)
    full = CACHE / path
    if not full.exists() or not _meta_path(key).exists():
        t0 = time.perf_counter()
        meta = build(str(full)) or {}
        meta["seconds"] = time.perf_counter() - t0
        meta["backend"] = backend_name()
        _meta_path(key).write_text(json.dumps(meta, indent=2, sort_keys=True))
    return load(str(full)), json.loads(_meta_path(key).read_text())


_DATA = {}


def dataset(name, split):
    if (name, split) not in _DATA:
        if name == "mnist":
            _DATA[name, split] = D.load_mnist_dir(MNIST_DIR, split)
        else:
            _DATA[name, split] = D.load_cifar10_dir(CIFAR_DIR, split)
    return _DATA[name, split]


def subset_indices(name, split, per_class, seed=0):
    return D.subsample_indices(dataset(name, split), per_class, seed)


def attack_subset(name):
    return dataset(name, "test").take(subset_indices(name, "test", TEST_PER_CLASS, 1))


def teacher(name):
    def build(path):
        train = dataset(name, "train")
        net = C.build("cnn-small", train.num_classes, train.shape, seed=0)
        _, trace = C.train(net, train, C.TrainConfig(epochs=TEACHER_EPOCHS[name], seed=0))
        C.save(net, path)
        return {"epochs": TEACHER_EPOCHS[name], "train_loss": trace.loss,
                "test_acc": C.evaluate(net, dataset(name, "test"))}

    return cached(f"teacher_{name}", f"teacher_{name}.bin", build, C.load)


def full_vib(name):
    def build(path):
        table = V.compute_vib_table(dataset(name, "train"), KS)
        table.to_csv(path)
        return {"m": len(table), "summaries": [s.to_json() for s in table.summaries()]}

    return cached(f"vib_{name}", f"vib_{name}.csv", build, V.VibTable.from_csv)


def adv_set(name, cfg, tag, net=None, data=None, net_key="teacher"):
    data = data if data is not None else attack_subset(name)

    def build(path):
        model = net if net is not None else teacher(name)[0]
        (adv,), (acc,) = A.run_attack_suite(model, data, [cfg])
        adv.save(path)
        return {"accuracy": acc, "success_rate": adv.success_rate}

    return cached(f"adv_{name}_{net_key}_{tag}", f"adv_{name}_{net_key}_{tag}.bin", build,
                  lambda p: A.AdversarialSet.load(p, originals=data))


def defense_key(name, n=20, k=1.0, per_class=None, subset_seed=2, epochs=DEFENSE_EPOCHS):
    scope = "full" if per_class is None else f"pc{per_class}s{subset_seed}"
    return f"defense_{name}_n{n}_k{k:g}_{scope}_e{epochs}"


def defense_model(name, n=20, k=1.0, per_class=None, subset_seed=2, epochs=DEFENSE_EPOCHS):
    """Distilled student; the full training set unless ``per_class`` is given."""
    def build(path):
        sub, table = dataset(name, "train"), full_vib(name)[0]
        if per_class is not None:
            idx = subset_indices(name, "train", per_class, subset_seed)
            sub, table = sub.take(idx), table.take(idx)
        student, trace = F.train_defense(teacher(name)[0], sub, table,
                                         F.DefenseConfig(n=n, k=k, epochs=epochs, lr=1e-3, seed=0))
        C.save(student, path)
        return {"images": len(sub), "n": n, "k": k, "epochs": epochs, "train_loss": trace.loss}

    key = defense_key(name, n, k, per_class, subset_seed, epochs)
    return cached(key, f"{key}.bin", build, C.load)


DEEPFOOL = A.AttackConfig("deepfool", max_iters=50, overshoot=0.02)
CWL2 = A.AttackConfig("cw_l2", **CW)


# ---------------------------------------------------------------- criteria

def _gradcheck_net(arch, seed):
    net = C.build(arch, 10, (1, 4, 4), seed=seed)
    rng = np.random.default_rng(1000 + seed)
    x = rng.random((2, 16)).astype(np.float32)
    y = rng.integers(0, 10, 2)
    xt = Tensor(x, requires_grad=True)
    backward(nll_loss(net.forward(xt), y))
    pg, xg = oracles.fd_gradients(net.layers, [p.data for p in net.params], x, y, net.input_shape,
                                  h=1e-7)
    worst = 0.0
    for a, f in zip([p.grad for p in net.params] + [xt.grad], pg + [xg]):
        a = a.astype(np.float64)
        err = np.abs(a - f) / np.maximum(1e-3 * np.maximum(np.abs(a), np.abs(f)), 1e-5)
        worst = max(worst, float(err.max()))
    return worst


def test_criterion_01_gradient_correctness():
    t0 = time.perf_counter()
    worst = max(_gradcheck_net(arch, s) for arch in ("cnn-small", "mlp2") for s in range(20))
    dt = time.perf_counter() - t0
    # worst <= 1 means every entry is inside max(1e-3 relative, 1e-5 absolute)
    record(1, worst <= 1.0 and dt < 60,
           f"worst error/tolerance {worst:.3f} over 40 networks (1x4x4 inputs), {dt:.1f}s")


@needs_data
def test_criterion_02_vib_oracle_equivalence():
    t0 = time.perf_counter()
    same = {}
    for name in ("mnist", "cifar10"):
        sub = dataset(name, "train").take(subset_indices(name, "train", 100, 3))
        jb, db = V.nearest_other_class_all(sub.images, sub.labels, "blocked")
        jn, dn = V.nearest_other_class_all(sub.images, sub.labels, "naive")
        same[name] = bool(np.array_equal(jb, jn) and np.array_equal(db, dn))
    dt = time.perf_counter() - t0
    record(2, all(same.values()) and dt < 60, f"bitwise equal {same}, {dt:.1f}s")


@needs_data
def test_criterion_03_vib_scaling_law():
    worst, count = 0.0, 0
    for name in ("mnist", "cifar10"):
        table = full_vib(name)[0]
        for k1 in KS:
            for k2 in KS:
                s1, s2 = table.sigma_at(k1), table.sigma_at(k2)
                zero = s1 == 0
                assert np.array_equal(zero, s2 == 0)
                ratio = s2[~zero] / s1[~zero]
                ulps = np.abs(ratio - k1 / k2) / np.spacing(k1 / k2)
                worst = max(worst, float(ulps.max(initial=0)))
                count += len(s1)
    record(3, worst <= 1.0, f"max deviation {worst:.2f} ulp over {count} (image, k1, k2) checks")


@needs_data
def test_criterion_04_sigma_ordering():
    (tm, mm), (tc, mc) = full_vib("mnist"), full_vib("cifar10")
    sm, sc = tm.summary(1.0), tc.summary(1.0)
    secs = mm["seconds"] + mc["seconds"]
    detail = (f"mean sigma(k=1) CIFAR-10 {sc.sigma_mean:.4f} vs MNIST {sm.sigma_mean:.4f}; "
              f"min/max MNIST {sm.sigma_min:.4f}/{sm.sigma_max:.4f}, CIFAR-10 "
              f"{sc.sigma_min:.4f}/{sc.sigma_max:.4f}; full NN search {secs / 60:.1f} min on "
              f"{os.cpu_count()} core(s)")
    record(4, sc.sigma_mean > sm.sigma_mean, detail)


@needs_data
def test_criterion_05_vulnerability_claim():
    dm = full_vib("mnist")[0].distance.mean()
    dc = full_vib("cifar10")[0].distance.mean()
    pm, pc = (adv_set(n, DEEPFOOL, "deepfool")[0] for n in ("mnist", "cifar10"))
    mag_m = pm.perturbation_l1[pm.success].mean()
    mag_c = pc.perturbation_l1[pc.success].mean()
    ok = dm > dc and mag_m > mag_c
    record(5, ok, f"mean NN distance MNIST {dm:.4f} vs CIFAR-10 {dc:.4f}; mean DeepFool l1 "
                  f"MNIST {mag_m:.4f} vs CIFAR-10 {mag_c:.4f}")


@needs_data
def test_criterion_06_teacher_quality():
    (_, mm), (_, mc) = teacher("mnist"), teacher("cifar10")
    ok = (mm["test_acc"] >= 98 and mc["test_acc"] >= 65 and mm["seconds"] < 1800
          and mc["seconds"] < 1800)
    record(6, ok, f"MNIST {mm['test_acc']:.2f}% in {mm['epochs']} epochs ({mm['seconds'] / 60:.1f} "
                  f"min); CIFAR-10 {mc['test_acc']:.2f}% in {mc['epochs']} epochs "
                  f"({mc['seconds'] / 60:.1f} min)")


ATTACK_BANDS = [
    ("mnist", DEEPFOOL, "deepfool", 50.0),
    ("mnist", A.AttackConfig("jsma", theta=0.1, gamma=1.0), "jsma_t0.1_g1", 5.0),
    ("mnist", CWL2, "cw_l2", 20.0),
    ("mnist", A.AttackConfig("fgsm", epsilon=0.3), "fgsm_0.3", 40.0),
    ("cifar10", DEEPFOOL, "deepfool", 45.0),
    ("cifar10", A.AttackConfig("fgsm", epsilon="8/255"), "fgsm_8_255", 30.0),
]


@needs_data
def test_criterion_07_attack_potency():
    parts, ok = [], True
    for name, cfg, tag, band in ATTACK_BANDS:
        net = teacher(name)[0]
        adv = adv_set(name, cfg, tag)[0]
        acc = C.accuracy_on(net, adv.images, adv.labels)
        ok &= acc <= band
        parts.append(f"{name} {tag} {acc:.1f}% (<= {band:g})")
    record(7, ok, "; ".join(parts))


@needs_data
def test_criterion_08_defense_recovery():
    parts, ok = [], True
    for name in ("mnist", "cifar10"):
        net = teacher(name)[0]
        student, meta = defense_model(name)
        test = dataset(name, "test")
        clean_t, clean_s = C.evaluate(net, test), C.evaluate(student, test)
        ok &= clean_s >= clean_t - 1.5 and meta["seconds"] < 3600
        parts.append(f"{name} clean {clean_t:.2f}->{clean_s:.2f}")
        for cfg, tag, need in ((DEEPFOOL, "deepfool", 30.0), (CWL2, "cw_l2", 40.0)):
            adv = adv_set(name, cfg, tag)[0]
            a_t = C.accuracy_on(net, adv.images, adv.labels)
            a_s = C.accuracy_on(student, adv.images, adv.labels)
            ok &= a_s - a_t >= need
            parts.append(f"{name} {tag} {a_t:.1f}->{a_s:.1f} (need +{need:g})")
        parts.append(f"{name} distillation {meta['seconds'] / 60:.1f} min")
    record(8, ok, "; ".join(parts))


def test_criterion_09_effectiveness_properties():
    rng = np.random.default_rng(0)
    ok = E.effectiveness_from_arrays([True] * 5, [0.1, 0.2, 0.3, 0.4, 0.5], 0.25) == 40.0
    ok &= E.effectiveness_from_arrays([True, True], [0.01, 0.02], 0.05) == 100.0
    ok &= E.effectiveness_from_arrays([True, True], [0.01, 0.02], 0.0) == 0.0
    for _ in range(2000):
        m = int(rng.integers(1, 50))
        succ = rng.random(m) < 0.7
        mag = rng.random(m) * rng.choice([1e-3, 1.0, 10.0])
        b1, b2 = np.sort(rng.random(2) * mag.max() * 1.2)
        e1 = E.effectiveness_from_arrays(succ, mag, b1)
        e2 = E.effectiveness_from_arrays(succ, mag, b2)
        c = 2.0 ** int(rng.integers(-30, 30))
        ok &= 0 <= e1 <= e2 <= 100
        ok &= E.effectiveness_from_arrays(succ, mag * c, b1 * c) == e1
        ok &= e1 == 100.0 * np.sum(succ & (mag <= b1)) / m
    record(9, bool(ok), "examples exact; monotonicity, range and scale invariance on 2000 draws")


@needs_data
def test_criterion_10_zero_noise_fixed_point():
    net = teacher("mnist")[0]
    idx = subset_indices("mnist", "train", 100, 4)
    sub = dataset("mnist", "train").take(idx)
    zero = V.VibTable(np.zeros(len(sub), np.int64), np.zeros(len(sub)), [1.0])
    losses = []
    student, _ = F.train_defense(net, sub, zero, F.DefenseConfig(n=2, k=1.0, epochs=1, seed=0),
                                 losses.append)
    test = dataset("mnist", "test")
    delta = abs(C.evaluate(student, test) - C.evaluate(net, test))
    record(10, delta <= 0.5 and max(losses) <= 1e-3,
           f"clean accuracy delta {delta:.2f} points; max per-batch KL {max(losses):.2e} over "
           f"{len(losses)} batches")


@needs_data
def test_criterion_11_adversarial_training_comparison():
    name = "cifar10"
    net = teacher(name)[0]
    idx = subset_indices(name, "train", AT_PER_CLASS, 5)
    at_data = dataset(name, "train").take(idx)
    baselines = [("deepfool", DEEPFOOL)] + [
        (f"fgsm_{e}_255", A.AttackConfig("fgsm", epsilon=f"{e}/255")) for e in (2, 8, 16)]
    models = {}
    for tag, cfg in baselines:
        def build(path, cfg=cfg, tag=tag):
            adv = adv_set(name, cfg, f"train_{tag}", data=at_data)[0]
            model = F.adversarial_training_baseline(net, at_data, adv, epochs=10, lr=1e-3)
            C.save(model, path)
            return {"images": len(at_data)}

        models[tag] = cached(f"at_{name}_{tag}", f"at_{name}_{tag}.bin", build, C.load)[0]
    # same images, epochs and learning rate as the baselines
    student = defense_model(name, per_class=AT_PER_CLASS, subset_seed=5, epochs=10)[0]
    parts, ok = [], True
    for cfg, tag in ((DEEPFOOL, "deepfool"), (CWL2, "cw_l2")):
        adv = adv_set(name, cfg, tag)[0]
        ours = C.accuracy_on(student, adv.images, adv.labels)
        at = {t: C.accuracy_on(m, adv.images, adv.labels) for t, m in models.items()}
        best = max(at, key=at.get)
        ok &= ours >= at[best] - 2
        parts.append(f"{tag}: defense {ours:.1f} vs best AT ({best}) {at[best]:.1f}")
    record(11, ok, f"{len(at_data)}-image training subset; " + "; ".join(parts))


@needs_data
def test_criterion_12_complexity():
    net = teacher("mnist")[0]
    sizes = [500, 1000, 2000, 4000]
    idx = subset_indices("mnist", "train", 400, 6)
    sub = dataset("mnist", "train").take(idx)
    table = full_vib("mnist")[0].take(idx)
    rows = timing_comparison(net, sub, table, sizes, n=20, k=1.0, pgd_steps=10, epsilon=0.3)
    t = [r["defense_prep_time"] for r in rows]
    ratios = [b / a for a, b in zip(t, t[1:])]
    cheaper = all(r["defense_prep_time"] < r["adversarial_training_prep_time"] for r in rows)
    detail = "; ".join(f"{r['size']}: sampling {r['defense_prep_time']:.2f}s, PGD-10 "
                       f"{r['adversarial_training_prep_time']:.2f}s" for r in rows)
    record(12, max(ratios) <= 2.5 and cheaper,
           f"{detail}; doubling ratios {', '.join(f'{x:.2f}' for x in ratios)}")


@needs_data
def test_criterion_13_pgd_white_box():
    name = "mnist"
    cfg = A.AttackConfig("pgd", epsilon=0.3, step_size=0.075, steps=10)
    data = attack_subset(name)
    net, student = teacher(name)[0], defense_model(name)[0]
    drops = {}
    for key, model in (("teacher", net), ("defense", student)):
        adv = adv_set(name, cfg, "pgd_0.3", net=model,
                      net_key=key if key == "teacher" else defense_key(name))[0]
        clean = C.accuracy_on(model, data.images, data.labels)
        drops[key] = (clean, C.accuracy_on(model, adv.images, adv.labels))
    dt = drops["teacher"][0] - drops["teacher"][1]
    dd = drops["defense"][0] - drops["defense"][1]
    record(13, dt - dd >= 20,
           f"teacher {drops['teacher'][0]:.1f}->{drops['teacher'][1]:.1f} (drop {dt:.1f}); defense "
           f"{drops['defense'][0]:.1f}->{drops['defense'][1]:.1f} (drop {dd:.1f}); need gap >= 20")
