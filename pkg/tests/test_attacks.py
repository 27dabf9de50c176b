import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import blob_dataset, linear_net
from vibguard import attacks as A
from vibguard import tensor as T
from vibguard.vib import l1_distance

ULP1 = float(np.spacing(np.float32(1.0)))


@pytest.fixture(scope="module")
def blob_set():
    return blob_dataset(60, noise_seed=4)


def _binary_linear(seed=0, d=6):
    rng = np.random.default_rng(seed)
    w = rng.uniform(-1, 1, (d, 2))
    w[np.abs(w[:, 0] - w[:, 1]) < 0.1, 0] += 0.5
    return linear_net(w, rng.uniform(-0.2, 0.2, 2)), w.astype(np.float32)


def test_config_validation():
    assert A.AttackConfig("fgsm", epsilon="8/255").epsilon == pytest.approx(8 / 255)
    assert A.AttackConfig("pgd", epsilon=0.3).step_size == pytest.approx(0.075)
    with pytest.raises(ValueError, match="kind"):
        A.AttackConfig("bim")
    with pytest.raises(ValueError, match="gamma"):
        A.AttackConfig("jsma", gamma=0)
    with pytest.raises(ValueError, match="step_size"):
        A.AttackConfig("pgd", epsilon=0.1, step_size=0.2)
    with pytest.raises(ValueError):
        A.AttackConfig("fgsm", epsilon=-0.1)


def test_fgsm_zero_budget_is_identity(blob_net, blob_set):
    res = A.fgsm(blob_net, blob_set.images, blob_set.labels, 0.0)
    np.testing.assert_array_equal(res.images, blob_set.images)
    correct = blob_net.predict(blob_set.images) == blob_set.labels
    assert not res.success[correct].any()


@pytest.mark.parametrize("label", [0, 1])
def test_fgsm_binary_linear_closed_form(label):
    net, w = _binary_linear()
    x = np.full(6, 0.5, np.float32)
    eps = 0.2
    # d NLL / dx = (1 - p_y) (w_other - w_y): its sign does not depend on p
    expected = np.clip(x + np.float32(eps) * np.sign(w[:, 1 - label] - w[:, label]), 0, 1)
    res = A.fgsm(net, x, label, eps)
    np.testing.assert_array_equal(res.adversarial, expected)


def test_pgd_single_full_step_equals_fgsm_bitwise(blob_net, blob_set):
    x, y = blob_set.images, blob_set.labels
    for eps in (0.05, 0.3, 1.0):
        a = A.fgsm_batch(blob_net, x, y, eps)
        b = A.pgd_batch(blob_net, x, y, eps, eps, 1, random_start=False)
        np.testing.assert_array_equal(a, b)


@given(st.floats(0.0, 0.5), st.integers(1, 6), st.booleans(), st.integers(0, 1000))
def test_pgd_every_iterate_in_ball(blob_net, eps, steps, random_start, seed):
    ds = blob_dataset(12, seed=seed)
    x, y = ds.images, ds.labels
    for t in range(1, steps + 1):
        xa = A.pgd_batch(blob_net, x, y, eps, eps / 4, t, random_start, [[seed, i] for i in range(12)])
        assert np.abs(xa.astype(np.float64) - x).max() <= eps + ULP1
        assert xa.min() >= 0 and xa.max() <= 1


@given(st.floats(0.0, 1.0))
def test_fgsm_budget(blob_net, eps):
    ds = blob_dataset(20, seed=9)
    xa = A.fgsm_batch(blob_net, ds.images, ds.labels, eps)
    assert np.abs(xa.astype(np.float64) - ds.images).max() <= eps + ULP1


def test_pgd_random_start_depends_on_image_index_not_batch(blob_net, blob_set):
    cfg = A.AttackConfig("pgd", epsilon=0.1, steps=2, random_start=True, seed=3)
    whole = A.generate(blob_net, blob_set.images, blob_set.labels, cfg, batch_size=60)
    split = A.generate(blob_net, blob_set.images, blob_set.labels, cfg, batch_size=7)
    np.testing.assert_array_equal(whole.images, split.images)


def test_deepfool_binary_linear_is_hyperplane_projection():
    net, w = _binary_linear(1)
    x = np.full((1, 6), 0.5, np.float32)
    z = net.predict_logits(x)[0].astype(np.float64)
    k0 = int(z.argmax())
    wd = w[:, 1 - k0].astype(np.float64) - w[:, k0]
    f = z[1 - k0] - z[k0]
    r = abs(f) / (wd @ wd) * wd
    xa, iters = A.deepfool_batch(net, x, max_iters=50, overshoot=0.02)
    assert iters[0] == 1
    np.testing.assert_allclose(xa[0], x[0] + 1.02 * r, atol=1e-6)
    assert net.predict(xa)[0] != k0


@given(st.integers(0, 2**32 - 1))
def test_deepfool_linear_multiclass_at_most_two_iterations(seed):
    rng = np.random.default_rng(seed)
    net = linear_net(rng.uniform(-3, 3, (8, 4)), rng.uniform(-0.1, 0.1, 4))
    x = rng.uniform(0.45, 0.55, (5, 8)).astype(np.float32)
    xa, iters = A.deepfool_batch(net, x, max_iters=50, overshoot=0.02)
    # the bound holds when the box constraint never binds
    inside = (xa > 0).all(axis=1) & (xa < 1).all(axis=1)
    assert iters[inside].max(initial=0) <= 2
    assert (net.predict(xa)[inside] != net.predict(x)[inside]).all()


def test_deepfool_already_misclassified_returns_input(blob_net, blob_set):
    pred = blob_net.predict(blob_set.images)
    wrong = (pred + 1) % 3
    res = A.deepfool(blob_net, blob_set.images, y=wrong)
    np.testing.assert_array_equal(res.images, blob_set.images)
    assert (res.perturbation_l1 == 0).all()


def test_deepfool_zero_gradient_classes_are_skipped():
    # class 2 has the same weights as class 0: its difference vector is zero
    w = np.array([[1.0, -1.0, 1.0], [0.5, 0.2, 0.5]])
    net = linear_net(w, [0.3, 1.0, 0.3])
    x = np.array([[0.5, 0.5]], np.float32)
    xa, iters = A.deepfool_batch(net, x)
    assert net.predict(xa)[0] == 1 and iters[0] >= 1


def _saliency_oracle(alpha, beta, domain):
    best, pair = -np.inf, None
    for p, q in itertools.combinations(np.flatnonzero(domain), 2):
        a, b = float(alpha[p]) + alpha[q], float(beta[p]) + beta[q]
        if a > 0 and b < 0 and a * -b > best:
            best, pair = a * -b, (int(p), int(q))
    return pair


@given(st.integers(2, 9).flatmap(lambda d: st.tuples(
    arrays(np.float32, d, elements=st.floats(-2, 2, width=32)),
    arrays(np.float32, d, elements=st.floats(-2, 2, width=32)),
    arrays(np.bool_, d))))
def test_saliency_pair_matches_exhaustive_search(args):
    alpha, beta, domain = args
    assert A.saliency_pair(alpha, beta, domain) == _saliency_oracle(alpha, beta, domain)


def test_saliency_pair_two_pixel_logistic_model():
    # two pixels, logits [0, w.x]: target is class 1
    w = np.array([0.7, 0.4], np.float32)
    alpha, beta = w, -w
    assert A.saliency_pair(alpha, beta, np.array([True, True])) == (0, 1)
    assert A.saliency_pair(-w, w, np.array([True, True])) is None


def test_jsma_no_pairs_allowed_is_a_failure_result(blob_net, blob_set):
    res = A.jsma(blob_net, blob_set.images[:5], gamma=0.01)
    np.testing.assert_array_equal(res.images, blob_set.images[:5])
    assert not res.success.any()


@pytest.mark.parametrize("gamma", [0.1, 0.3])
def test_jsma_pixel_budget_and_step(blob_net, blob_set, gamma):
    x = blob_set.images
    res = A.jsma(blob_net, x, gamma=gamma, theta=1.0)
    changed = res.images != x
    assert changed.sum(axis=1).max() <= gamma * x.shape[1]
    np.testing.assert_array_equal(res.images[changed], 1.0)


def test_jsma_small_theta_only_raises_pixels(blob_net, blob_set):
    x = blob_set.images
    res = A.jsma(blob_net, x, gamma=0.3, theta=0.1)
    delta = res.images - x
    assert delta.min() >= 0
    assert (delta != 0).sum(axis=1).max() <= 0.3 * x.shape[1]
    # each step adds theta unless the pixel saturates
    steps = np.round(delta / np.float32(0.1))
    unsat = (delta != 0) & (res.images < 1)
    np.testing.assert_allclose(delta[unsat], steps[unsat] * 0.1, atol=1e-5)


def test_jsma_targeted_requires_other_class(blob_net, blob_set):
    pred = blob_net.predict(blob_set.images[:1])
    with pytest.raises(ValueError, match="target"):
        A.jsma(blob_net, blob_set.images[:1], target_class=int(pred[0]))
    res = A.jsma(blob_net, blob_set.images[:1], target_class=int((pred[0] + 1) % 3), gamma=1.0)
    assert res.images.min() >= 0 and res.images.max() <= 1


def test_cw_misclassified_input_needs_no_perturbation(blob_net, blob_set):
    x = blob_set.images[:4]
    wrong = (blob_net.predict(x) + 1) % 3
    xa, _ = A.cw_l2_batch(blob_net, x, wrong, iters=20, binary_search_steps=2)
    assert np.linalg.norm(xa.astype(np.float64) - x, axis=1).max() <= 1e-3


def test_cw_iterates_stay_strictly_inside_unit_box(blob_net):
    x = np.zeros((2, 36), np.float32)
    x[1] = 1.0
    seen = []
    A.cw_l2_batch(blob_net, x, [0, 1], iters=15, binary_search_steps=2, trace=seen)
    allx = np.stack(seen)
    assert allx.min() > 0 and allx.max() < 1


def test_cw_finds_small_successful_perturbations(blob_net, blob_set):
    res = A.cw_l2(blob_net, blob_set.images[:10], blob_set.labels[:10], iters=100)
    assert res.success.mean() >= 0.8
    fgsm = A.fgsm(blob_net, blob_set.images[:10], blob_set.labels[:10], 0.5)
    assert res.perturbation_l1[res.success].mean() < fgsm.perturbation_l1.mean()


def test_nan_gradient_is_reported():
    net = linear_net(np.full((4, 2), np.nan), np.zeros(2))
    with pytest.raises(T.NonFiniteError):
        A.fgsm(net, np.zeros(4, np.float32), 0, 0.1)


@pytest.mark.parametrize("kind", A.KINDS)
def test_outputs_in_unit_box_and_metrics_shared(blob_net, blob_set, kind):
    cfg = A.AttackConfig(kind, epsilon=0.3, iters=30, binary_search_steps=2)
    res = A.generate(blob_net, blob_set.images[:12], blob_set.labels[:12], cfg)
    assert res.images.min() >= 0 and res.images.max() <= 1
    np.testing.assert_array_equal(res.success, blob_net.predict(res.images)
                                  != blob_net.predict(blob_set.images[:12]))
    for k in range(len(res)):
        assert res.perturbation_l1[k] == l1_distance(res.images[k], blob_set.images[k])


def test_adversarial_set_roundtrip(tmp_path, blob_net, blob_set):
    cfg = A.AttackConfig("fgsm", epsilon=0.2)
    (adv,), _ = A.run_attack_suite(blob_net, blob_set, [cfg])
    adv.save(tmp_path / "a.bin")
    back = A.AdversarialSet.load(tmp_path / "a.bin", originals=blob_set)
    np.testing.assert_array_equal(back.images, adv.images)
    np.testing.assert_array_equal(back.indices, adv.indices)
    np.testing.assert_array_equal(back.success, adv.success)
    np.testing.assert_array_equal(back.labels, adv.labels)
    np.testing.assert_array_equal(back.perturbation_l1, adv.perturbation_l1)
    assert back.config == cfg.to_json()
    raw = (tmp_path / "a.bin").read_bytes()
    (tmp_path / "b.bin").write_bytes(raw[:-3])
    with pytest.raises(ValueError, match="records"):
        A.AdversarialSet.load(tmp_path / "b.bin")


def test_suite_empty_and_deterministic(blob_net, blob_set):
    assert A.run_attack_suite(blob_net, blob_set, []) == ([], [])
    cfgs = [A.AttackConfig("pgd", epsilon=0.2, steps=3, random_start=True, seed=5),
            A.AttackConfig("deepfool")]
    s1, acc1 = A.run_attack_suite(blob_net, blob_set, cfgs)
    s2, acc2 = A.run_attack_suite(blob_net, blob_set, cfgs)
    assert acc1 == acc2
    for a, b in zip(s1, s2):
        np.testing.assert_array_equal(a.images, b.images)
    from vibguard.classifier import evaluate
    assert all(a <= evaluate(blob_net, blob_set) for a in acc1)
