"""``vibguard`` command line: ingest, train, vib, attack, defend, eval, pipeline, timing.

Every subcommand that writes ``--out X`` also writes ``X.manifest.json`` with
the resolved config, derived seeds, sha256 digests of inputs and outputs,
and per-phase timings. The manifest is written even when the command fails.
"""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import sys
import time
import traceback
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from . import attacks as A
from . import classifier as C
from . import data as D
from . import defense as F
from . import evaluation as E
from . import vib as V
from ._accel import backend_name, set_threads

log = logging.getLogger("vibguard")

PHASES = ("ingest", "train", "vib", "attack", "defend", "eval", "timing")


def phase_seed(seed, phase, counter=0):
    """Independent 63-bit seed for ``phase`` derived from the global seed.

    Counter-based: the phase's position and ``counter`` form the spawn key,
    so adding phases never shifts the streams of existing ones.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=(PHASES.index(phase), int(counter)))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    subcommand: str
    config: dict
    seeds: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    error: str | None = None

    @contextlib.contextmanager
    def phase(self, name):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t0

    def add_input(self, path):
        if path is not None and os.path.exists(path):
            self.inputs[path] = sha256(path)

    def add_output(self, path):
        self.outputs[path] = sha256(path)

    def to_json(self):
        return {"subcommand": self.subcommand, "config": self.config, "seeds": self.seeds,
                "inputs": self.inputs, "outputs": self.outputs, "timings": self.timings,
                "error": self.error, "version": __version__, "backend": backend_name()}

    def write(self, out_path):
        with open(f"{out_path}.manifest.json", "w") as f:
            json.dump(self.to_json(), f, indent=2, sort_keys=True)
            f.write("\n")


class UsageError(Exception):
    """A flag is missing or malformed; reported with exit status 2."""


# ---------------------------------------------------------------- argument parsing

def _common(p):
    p.add_argument("--seed", type=int, help="global seed (default 0)")
    p.add_argument("--threads", type=int, help="worker threads for parallel kernels "
                   "(falls back to VIBGUARD_THREADS); 1 gives bit-reproducible runs")
    p.add_argument("--config", help="JSON file of flag defaults; explicit flags win")
    p.add_argument("--log-level", default="INFO")


def _attack_flags(p):
    p.add_argument("--epsilon", help="l-inf budget, e.g. 0.3 or 8/255 (fgsm, pgd)")
    p.add_argument("--step-size", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--random-start", action="store_true", default=None)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--overshoot", type=float)
    p.add_argument("--theta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--c", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--binary-search-steps", type=int)
    p.add_argument("--kappa", type=float)


def build_parser():
    parser = argparse.ArgumentParser(prog="vibguard", description="VIB computation, attack scoring and bounded-noise distillation.")
    parser.add_argument("--version", action="version", version=f"vibguard {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")

    p = sub.add_parser("ingest", help="read MNIST/CIFAR-10 files into a dataset .npz")
    p.add_argument("--mnist-dir")
    p.add_argument("--cifar-dir")
    p.add_argument("--split", choices=["train", "test"])
    p.add_argument("--per-class", type=int, help="keep this many images per class")
    p.add_argument("--out")
    _common(p)

    p = sub.add_parser("train", help="train a classifier")
    p.add_argument("--data")
    p.add_argument("--arch", choices=["cnn-small", "mlp2", "linear"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--optimizer", choices=["adam", "sgd"])
    p.add_argument("--out")
    _common(p)

    p = sub.add_parser("vib", help="nearest other-class distances and per-image bounds")
    p.add_argument("--data")
    p.add_argument("--k", type=float, nargs="+", help="one or more divisors (default 1)")
    p.add_argument("--method", choices=["blocked", "naive"])
    p.add_argument("--out", help="CSV table; the min/mean/max summary goes to OUT.summary.json")
    _common(p)

    p = sub.add_parser("attack", help="generate an adversarial set")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--kind", choices=list(A.KINDS))
    _attack_flags(p)
    p.add_argument("--out")
    _common(p)

    p = sub.add_parser("defend", help="distill a teacher on VIB-bounded Gaussian noise")
    p.add_argument("--teacher")
    p.add_argument("--vib")
    p.add_argument("--data")
    p.add_argument("--n", type=int)
    p.add_argument("--k", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--no-clamp", action="store_true", default=None)
    p.add_argument("--out")
    _common(p)

    p = sub.add_parser("eval", help="accuracy/effectiveness report (JSON + CSV)")
    p.add_argument("--model")
    p.add_argument("--defense", action="append",
                   help="defense model; n and k come from its manifest or a PATH:n:k suffix")
    p.add_argument("--adv", action="append")
    p.add_argument("--data", help="clean evaluation set")
    p.add_argument("--vib-summary")
    p.add_argument("--vib", help="VIB table CSV for the class-distance histogram")
    p.add_argument("--bins", type=int)
    p.add_argument("--out")
    _common(p)

    p = sub.add_parser("pipeline", help="ingest, train, vib, attack, defend, eval in one run")
    p.add_argument("--mnist-dir")
    p.add_argument("--cifar-dir")
    p.add_argument("--per-class", type=int)
    p.add_argument("--test-per-class", type=int)
    p.add_argument("--arch", choices=["cnn-small", "mlp2", "linear"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--attacks", nargs="+", help="attack kinds, fgsm/pgd optionally as kind:eps")
    p.add_argument("--n", type=int)
    p.add_argument("--k", type=float)
    p.add_argument("--defense-epochs", type=int)
    p.add_argument("--out", help="directory for all artifacts")
    _common(p)

    p = sub.add_parser("timing", help="perturbation sampling vs PGD generation wall clock")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--vib")
    p.add_argument("--sizes", type=int, nargs="+")
    p.add_argument("--n", type=int)
    p.add_argument("--k", type=float)
    p.add_argument("--out")
    _common(p)
    return parser


DEFAULTS = {
    "seed": 0, "split": "train", "arch": "cnn-small", "epochs": 5, "lr": 1e-3, "batch_size": 64,
    "optimizer": "adam", "k": None, "method": "blocked", "n": 20, "bins": 20,
    "per_class": None, "test_per_class": None, "defense_epochs": 10,
    "attacks": ["fgsm", "deepfool", "cw_l2"], "sizes": [100, 200, 400],
}

COMMAND_DEFAULTS = {"defend": {"epochs": 10}}

REQUIRED = {
    "ingest": ["out"],
    "train": ["data", "out"],
    "vib": ["data", "out"],
    "attack": ["model", "data", "kind", "out"],
    "defend": ["teacher", "vib", "data", "out"],
    "eval": ["model", "data", "out"],
    "pipeline": ["out"],
    "timing": ["model", "data", "vib", "out"],
}


def resolve(args, parser):
    """Merge flags > --config JSON > defaults into a plain dict."""
    cfg = dict(DEFAULTS)
    cfg.update(COMMAND_DEFAULTS.get(args.command, {}))
    if args.config:
        try:
            with open(args.config) as f:
                cfg.update({k.replace("-", "_"): v for k, v in json.load(f).items()})
        except (OSError, ValueError) as e:
            raise UsageError(f"--config {args.config}: {e}") from e
    cfg.update({k: v for k, v in vars(args).items() if v is not None})
    if cfg.get("threads") is None and os.environ.get("VIBGUARD_THREADS"):
        cfg["threads"] = int(os.environ["VIBGUARD_THREADS"])
    missing = [f"--{k.replace('_', '-')}" for k in REQUIRED[args.command] if cfg.get(k) is None]
    if args.command in ("ingest", "pipeline") and not (cfg.get("mnist_dir") or cfg.get("cifar_dir")):
        missing.insert(0, "--mnist-dir")
    if missing:
        raise UsageError(f"{args.command}: missing required flag(s): {', '.join(missing)} "
                         f"(or --cifar-dir instead of --mnist-dir)"
                         if "--mnist-dir" in missing else
                         f"{args.command}: missing required flag(s): {', '.join(missing)}")
    return cfg


# ---------------------------------------------------------------- subcommands

def _ingest(cfg, man, split=None, per_class=None, seed_counter=0):
    split = split or cfg["split"]
    if cfg.get("mnist_dir"):
        ds = D.load_mnist_dir(cfg["mnist_dir"], split)
        for name in D.MNIST_FILES[split]:
            with contextlib.suppress(FileNotFoundError):
                man.add_input(D._find(cfg["mnist_dir"], name))
    else:
        ds = D.load_cifar10_dir(cfg["cifar_dir"], split)
    if per_class:
        seed = phase_seed(cfg["seed"], "ingest", seed_counter)
        man.seeds[f"ingest/{split}"] = seed
        ds = D.subsample(ds, per_class, seed)
    return ds


def cmd_ingest(cfg, man):
    with man.phase("ingest"):
        ds = _ingest(cfg, man, per_class=cfg.get("per_class"))
        ds.save(cfg["out"])
    man.add_output(cfg["out"])
    print(f"{ds.name} {ds.split}: {len(ds)} images, d={ds.dim} -> {cfg['out']}")


def _load_data(path, man):
    man.add_input(path)
    return D.Dataset.load(path)


def cmd_train(cfg, man):
    ds = _load_data(cfg["data"], man)
    seed = phase_seed(cfg["seed"], "train")
    man.seeds["train"] = seed
    with man.phase("train"):
        net = C.build(cfg["arch"], ds.num_classes, ds.shape, seed)
        tc = C.TrainConfig(cfg["epochs"], cfg["batch_size"], cfg["lr"], cfg["optimizer"], seed)
        _, trace = C.train(net, ds, tc)
    C.save(net, cfg["out"])
    man.add_output(cfg["out"])
    man.config["trace"] = {"loss": trace.loss, "accuracy": trace.accuracy}
    print(f"train accuracy {trace.accuracy[-1]:.2f}% -> {cfg['out']}")


def cmd_vib(cfg, man):
    ds = _load_data(cfg["data"], man)
    ks = cfg["k"] or [1.0]
    with man.phase("vib"):
        table = V.compute_vib_table(ds, ks, cfg["method"])
    table.to_csv(cfg["out"])
    summary_path = cfg["out"] + ".summary.json"
    table.summary_json(summary_path)
    man.add_output(cfg["out"])
    man.add_output(summary_path)
    for s in table.summaries():
        print(f"k={s.k:g}: sigma min {s.sigma_min:.5f} mean {s.sigma_mean:.5f} max {s.sigma_max:.5f}")


def _attack_config(cfg, kind, seed):
    keys = ["epsilon", "step_size", "steps", "random_start", "max_iters", "overshoot", "theta",
            "gamma", "c", "iters", "binary_search_steps", "kappa"]
    return A.AttackConfig(kind, seed=seed, **{k: cfg[k] for k in keys if cfg.get(k) is not None})


def cmd_attack(cfg, man):
    ds = _load_data(cfg["data"], man)
    man.add_input(cfg["model"])
    net = C.load(cfg["model"])
    seed = phase_seed(cfg["seed"], "attack")
    man.seeds["attack"] = seed
    acfg = _attack_config(cfg, cfg["kind"], seed)
    with man.phase("attack"):
        (adv,), (acc,) = A.run_attack_suite(net, ds, [acfg])
    adv.dataset_id = f"{ds.name}/{ds.split}/{len(ds)}/{sha256(cfg['data'])[:16]}"
    adv.save(cfg["out"])
    man.add_output(cfg["out"])
    man.config["attack"] = acfg.to_json()
    print(f"{acfg.label}: accuracy {acc:.2f}%, success {adv.success_rate:.2f}% -> {cfg['out']}")


def cmd_defend(cfg, man):
    ds = _load_data(cfg["data"], man)
    man.add_input(cfg["teacher"])
    man.add_input(cfg["vib"])
    teacher = C.load(cfg["teacher"])
    table = V.VibTable.from_csv(cfg["vib"])
    seed = phase_seed(cfg["seed"], "defend")
    man.seeds["defend"] = seed
    dcfg = F.DefenseConfig(cfg["n"], cfg["k"] if cfg["k"] is not None else 1.0,
                           cfg["epochs"], cfg["lr"],
                           not cfg.get("no_clamp"), seed, cfg["batch_size"])
    with man.phase("defend"):
        student, _ = F.train_defense(teacher, ds, table, dcfg)
    C.save(student, cfg["out"])
    man.add_output(cfg["out"])
    man.config["defense"] = {"n": dcfg.n, "k": dcfg.k, "epochs": dcfg.epochs, "lr": dcfg.lr}
    print(f"defense n={dcfg.n} k={dcfg.k:g}: clean train-set accuracy "
          f"{C.evaluate(student, ds):.2f}% -> {cfg['out']}")


def _defense_spec(spec):
    parts = spec.rsplit(":", 2)
    if len(parts) == 3 and _isnum(parts[1]) and _isnum(parts[2]):
        return parts[0], int(parts[1]), float(parts[2])
    mpath = spec + ".manifest.json"
    if not os.path.exists(mpath):
        raise UsageError(f"--defense {spec}: no manifest beside it; pass PATH:n:k")
    with open(mpath) as f:
        d = json.load(f)["config"]["defense"]
    return spec, int(d["n"]), float(d["k"])


def _isnum(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


def cmd_eval(cfg, man):
    ds = _load_data(cfg["data"], man)
    man.add_input(cfg["model"])
    teacher = C.load(cfg["model"])
    defenses = []
    for spec in cfg.get("defense") or []:
        path, n, k = _defense_spec(spec)
        man.add_input(path)
        defenses.append((n, k, C.load(path)))
    advs = []
    for path in cfg.get("adv") or []:
        man.add_input(path)
        advs.append(A.AdversarialSet.load(path, originals=ds))
    summaries = []
    if cfg.get("vib_summary"):
        man.add_input(cfg["vib_summary"])
        summaries = V.load_summaries(cfg["vib_summary"])
    table = None
    if cfg.get("vib"):
        man.add_input(cfg["vib"])
        table = V.VibTable.from_csv(cfg["vib"])
    with man.phase("eval"):
        report = E.build_report(teacher, ds, advs, summaries, defenses, table, cfg["bins"],
                                meta={"seed": cfg["seed"]})
    report.to_json(cfg["out"])
    csv_path = os.path.splitext(cfg["out"])[0] + ".csv"
    report.to_csv(csv_path)
    man.add_output(cfg["out"])
    man.add_output(csv_path)
    _print_report(report)


def _print_report(report):
    print(f"clean: original {report.clean['orig_acc']:.2f}%  "
          + "  ".join(f"defense(n={d['n']},k={d['k']:g}) {d['acc']:.2f}%"
                      for d in report.clean["defense"]))
    for r in report.rows:
        print(f"{r['attack']}: original {r['orig_acc']:.2f}%  "
              + "  ".join(f"defense(n={d['n']},k={d['k']:g}) {d['acc']:.2f}%" for d in r["defense"])
              + f"  effectiveness {r['effectiveness']:.2f}")


def _parse_attack(spec):
    kind, _, eps = spec.partition(":")
    return kind, (A.parse_epsilon(eps) if eps else None)


def cmd_pipeline(cfg, man):
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    p = lambda name: os.path.join(out, name)  # noqa: E731
    with man.phase("ingest"):
        train = _ingest(cfg, man, "train", cfg.get("per_class"), 0)
        test = _ingest(cfg, man, "test", cfg.get("test_per_class") or cfg.get("per_class"), 1)
        train.save(p("train.npz"))
        test.save(p("test.npz"))
    tseed = phase_seed(cfg["seed"], "train")
    man.seeds["train"] = tseed
    with man.phase("train"):
        teacher = C.build(cfg["arch"], train.num_classes, train.shape, tseed)
        C.train(teacher, train, C.TrainConfig(cfg["epochs"], cfg["batch_size"], cfg["lr"],
                                              cfg["optimizer"], tseed))
        C.save(teacher, p("teacher.bin"))
    k = cfg["k"] if cfg["k"] is not None else 1.0
    with man.phase("vib"):
        table = V.compute_vib_table(train, sorted({1.0, 2.0, float(k)}))
        table.to_csv(p("vib.csv"))
        table.summary_json(p("vib.summary.json"))
    advs = []
    with man.phase("attack"):
        for c, spec in enumerate(cfg["attacks"]):
            kind, eps = _parse_attack(spec)
            seed = phase_seed(cfg["seed"], "attack", c)
            man.seeds[f"attack/{spec}"] = seed
            acfg = _attack_config(dict(cfg, epsilon=eps) if eps is not None else cfg, kind, seed)
            (adv,), _ = A.run_attack_suite(teacher, test, [acfg])
            adv.dataset_id = f"{test.name}/{test.split}/{len(test)}"
            adv.save(p(f"adv_{c}_{kind}.bin"))
            advs.append(adv)
    dseed = phase_seed(cfg["seed"], "defend")
    man.seeds["defend"] = dseed
    with man.phase("defend"):
        dcfg = F.DefenseConfig(cfg["n"], k, cfg["defense_epochs"], cfg["lr"], True, dseed,
                               cfg["batch_size"])
        student, _ = F.train_defense(teacher, train, table, dcfg)
        C.save(student, p("defense.bin"))
    with man.phase("eval"):
        primary = table.summary(k)
        report = E.build_report(teacher, test, advs, [primary], [(dcfg.n, dcfg.k, student)],
                                table, cfg["bins"], meta={"seed": cfg["seed"]})
        report.to_json(p("report.json"))
        report.to_csv(p("report.csv"))
    for name in sorted(os.listdir(out)):
        if not name.endswith(".manifest.json"):
            man.add_output(p(name))
    _print_report(report)


def _best_time(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def timing_comparison(net, dataset, vib_table, sizes, n=20, k=1.0, pgd_steps=10, epsilon=0.3,
                      seed=0, repeat=3):
    """Wall clock of perturbation sampling vs PGD generation on the first ``size`` images.

    Each time is the best of ``repeat`` runs. Returns a list of
    ``{size, defense_prep_time, adversarial_training_prep_time}``.
    """
    if repeat < 1:
        raise ValueError("repeat must be >= 1")
    sizes = [int(s) for s in sizes]
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("sizes must be strictly increasing")
    if sizes and sizes[-1] > len(dataset):
        raise ValueError(f"largest size {sizes[-1]} exceeds dataset size {len(dataset)}")
    sigma = vib_table.sigma_at(float(k))
    pcfg = A.AttackConfig("pgd", epsilon=epsilon, step_size=epsilon / 4, steps=pgd_steps, seed=seed)
    rows = []
    for size in sizes:
        sub = dataset.take(np.arange(size))
        t_def = _best_time(lambda: F.PerturbedSet(sub.images, sigma[:size], n, seed).materialize(),
                           repeat)
        t_adv = _best_time(lambda: A.generate(net, sub.images, sub.labels, pcfg), repeat)
        rows.append({"size": size, "defense_prep_time": t_def,
                     "adversarial_training_prep_time": t_adv})
    return rows


def cmd_timing(cfg, man):
    ds = _load_data(cfg["data"], man)
    man.add_input(cfg["model"])
    man.add_input(cfg["vib"])
    net = C.load(cfg["model"])
    table = V.VibTable.from_csv(cfg["vib"])
    with man.phase("timing"):
        rows = timing_comparison(net, ds, table, cfg["sizes"], cfg["n"],
                                 cfg["k"] if cfg["k"] is not None else 1.0,
                                 seed=phase_seed(cfg["seed"], "timing"))
    with open(cfg["out"], "w") as f:
        json.dump(rows, f, indent=2)
    man.add_output(cfg["out"])
    for r in rows:
        print(f"size {r['size']}: sampling {r['defense_prep_time']:.3f}s  "
              f"pgd {r['adversarial_training_prep_time']:.3f}s")


COMMANDS = {"ingest": cmd_ingest, "train": cmd_train, "vib": cmd_vib, "attack": cmd_attack,
            "defend": cmd_defend, "eval": cmd_eval, "pipeline": cmd_pipeline,
            "timing": cmd_timing}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 2
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = resolve(args, parser)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"vibguard: error: {e}", file=sys.stderr)
        return 2
    if cfg.get("threads") is not None:
        set_threads(cfg["threads"])
    man = RunManifest(args.command, {k: v for k, v in cfg.items() if k not in ("log_level",)})
    manifest_at = os.path.join(cfg["out"], "run") if args.command == "pipeline" else cfg["out"]
    code = 0
    try:
        COMMANDS[args.command](cfg, man)
    except UsageError as e:
        man.error = str(e)
        print(f"vibguard: error: {e}", file=sys.stderr)
        code = 2
    except Exception as e:  # noqa: BLE001 - reported in the manifest and as exit status
        man.error = f"{type(e).__name__}: {e}"
        log.debug("%s", traceback.format_exc())
        print(f"vibguard: {args.command} failed: {man.error}", file=sys.stderr)
        code = 1
    with contextlib.suppress(OSError):
        if args.command == "pipeline":
            os.makedirs(cfg["out"], exist_ok=True)
        man.write(manifest_at)
    return code


if __name__ == "__main__":
    sys.exit(main())
