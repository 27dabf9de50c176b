"""Effectiveness scores, accuracy tables and distribution exports."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .classifier import accuracy_on


def _arrays(results):
    """(success, perturbation_l1) from an AdversarialSet or a list of AttackResult."""
    if hasattr(results, "perturbation_l1") and hasattr(results, "success"):
        return np.asarray(results.success, bool), np.asarray(results.perturbation_l1, np.float64)
    results = list(results)
    return (np.array([r.success for r in results], dtype=bool),
            np.array([r.perturbation_l1 for r in results], dtype=np.float64))


def effectiveness_from_arrays(success, magnitude, sigma_mean):
    success = np.asarray(success, dtype=bool)
    magnitude = np.asarray(magnitude, dtype=np.float64)
    if success.size == 0:
        raise ValueError("effectiveness needs at least one attack result")
    if not sigma_mean >= 0:
        raise ValueError(f"sigma_mean must be >= 0, got {sigma_mean}")
    hits = int(np.count_nonzero(success & (magnitude <= sigma_mean)))
    return 100.0 * hits / success.size


def effectiveness_score(attack_results, sigma_mean):
    """Percent of attacked samples that were misclassified with l1 perturbation <= sigma_mean.

    The denominator counts every attacked sample, so the score never exceeds
    the attack's success rate.
    """
    return effectiveness_from_arrays(*_arrays(attack_results), sigma_mean)


def within_bound_percent(attack_results, sigma_mean):
    """Percent of samples whose perturbation is inside the bound, success ignored."""
    _, mag = _arrays(attack_results)
    if mag.size == 0:
        raise ValueError("no attack results")
    return 100.0 * int(np.count_nonzero(mag <= sigma_mean)) / mag.size


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    @property
    def total(self):
        return int(self.counts.sum())

    def to_json(self):
        return {"edges": [float(e) for e in self.edges], "counts": [int(c) for c in self.counts]}


def _histogram(values, bins):
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    values = np.asarray(values, dtype=np.float64)
    hi = float(values.max()) if values.size else 0.0
    # all-zero samples still need a non-degenerate range
    edges = np.linspace(0.0, hi if hi > 0 else 1.0, bins + 1)
    counts, _ = np.histogram(values, bins=edges)
    return Histogram(edges, counts.astype(np.int64))


def vulnerability_histogram(vib_table, bins=20):
    """Histogram of nearest other-class distances, uniform bins over [0, max d]."""
    if len(vib_table) == 0:
        raise ValueError("empty VIB table")
    return _histogram(vib_table.distance, bins)


def perturbation_histogram(attack_results, bins=20):
    """Histogram of l1 perturbation magnitudes of the successful attacks only."""
    success, mag = _arrays(attack_results)
    return _histogram(mag[success], bins)


@dataclass
class EvalReport:
    meta: dict
    clean: dict
    rows: list = field(default_factory=list)
    histograms: dict = field(default_factory=dict)

    def to_dict(self):
        return {"meta": self.meta, "clean": self.clean, "rows": self.rows,
                "histograms": {k: h.to_json() for k, h in self.histograms.items()}}

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"
        if path is not None:
            with open(path, "w") as f:
                f.write(text)
        return text

    def to_csv(self, path):
        defense_cols = [f"defense_n{d['n']}_k{d['k']:g}" for d in self.clean.get("defense", [])]
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["attack", "eps", "orig_acc"] + defense_cols
                       + ["effectiveness", "within_bound"])
            for r in self.rows:
                w.writerow([r["attack"], "" if r["eps"] is None else repr(r["eps"]),
                            repr(r["orig_acc"])] + [repr(d["acc"]) for d in r["defense"]]
                           + [repr(r["effectiveness"]), repr(r["within_bound"])])


def build_report(teacher, dataset, attack_sets=(), vib_summaries=(), defenses=(), vib_table=None,
                 bins=20, meta=None):
    """Accuracy and effectiveness table over attack sets, in the given order.

    ``defenses`` is a sequence of ``(n, k, network)``. ``vib_summaries`` are
    :class:`~vibguard.vib.VibSummary` records; the first one's sigma_mean is
    the bound used for ``effectiveness`` and ``within_bound``. Every
    summary's score is also listed under ``effectiveness_by_k``.

    ``within_bound`` (share of adversarial samples inside the bound, success
    ignored) is the quantity one may read as an estimated accuracy of the
    defense; it is reported separately from the effectiveness score.
    """
    summaries = list(vib_summaries)
    if attack_sets and not summaries:
        raise ValueError("scoring attacks needs at least one VIB summary")
    clean = {"orig_acc": accuracy_on(teacher, dataset.images, dataset.labels),
             "defense": [{"n": int(n), "k": float(k), "acc": accuracy_on(net, dataset.images,
                                                                       dataset.labels)}
                         for n, k, net in defenses]}
    rows, hists = [], {}
    if vib_table is not None:
        hists["class_distance"] = vulnerability_histogram(vib_table, bins)
    for adv in attack_sets:
        cfg = adv.config or {}
        kind = cfg.get("kind", "unknown")
        label = f"{kind}(eps={cfg['epsilon']:.4g})" if kind in ("fgsm", "pgd") else kind
        sm = summaries[0].sigma_mean
        rows.append({
            "attack": label,
            "eps": cfg.get("epsilon") if kind in ("fgsm", "pgd") else None,
            "orig_acc": accuracy_on(teacher, adv.images, adv.labels),
            "defense": [{"n": int(n), "k": float(k), "acc": accuracy_on(net, adv.images, adv.labels)}
                        for n, k, net in defenses],
            "success_rate": adv.success_rate,
            "effectiveness": effectiveness_score(adv, sm),
            "within_bound": within_bound_percent(adv, sm),
            "effectiveness_by_k": [{"k": s.k, "sigma_mean": s.sigma_mean,
                                    "score": effectiveness_score(adv, s.sigma_mean)}
                                   for s in summaries],
        })
        hists[f"perturbation/{label}"] = perturbation_histogram(adv, bins)
    info = {"dataset": dataset.name, "split": dataset.split, "size": len(dataset),
            "vib": [s.to_json() for s in summaries], "attacks": [a.config for a in attack_sets]}
    info.update(meta or {})
    return EvalReport(info, clean, rows, hists)
