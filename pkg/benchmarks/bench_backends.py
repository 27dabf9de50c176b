"""Numba vs pure-numpy kernels.

Kernel rows call both implementations directly in one process. The
end-to-end rows run a training step and a VIB search in subprocesses with
VIBGUARD_BACKEND set, so they measure what a user gets from the env flag.

    python3 benchmarks/bench_backends.py [--quick] [--json out.json]
"""
import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from vibguard import _kernels as K
from vibguard import _nnsearch as NN


def best_of(fn, repeat):
    fn()  # warm-up, includes numba compilation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_rows(quick):
    rng = np.random.default_rng(0)
    repeat = 3 if quick else 7
    x = rng.random((64, 16, 28, 28), dtype=np.float32)
    cols = K.im2col_np(x, 3, 3, 1)
    m = 500 if quick else 2000
    codes = rng.integers(0, 256, (m, 784)).astype(np.uint8)
    floats = rng.random((m, 784), dtype=np.float32)
    labels = np.arange(m) % 10
    cases = [
        ("im2col 64x16x28x28", lambda: K.im2col_np(x, 3, 3, 1), lambda: K.im2col_nb(x, 3, 3, 1)),
        ("col2im 64x16x28x28", lambda: K.col2im_np(cols, x.shape, 3, 3, 1),
         lambda: K.col2im_nb(cols, x.shape, 3, 3, 1)),
        ("maxpool2 64x16x28x28", lambda: K.maxpool2_np(x), lambda: K.maxpool2_nb(x)),
        (f"NN search uint8 {m}x784",
         lambda: NN.blocked_search(codes, labels, codes, labels, True, use_numba=False),
         lambda: NN.blocked_search(codes, labels, codes, labels, True, use_numba=True)),
        (f"NN search float {m}x784",
         lambda: NN.blocked_search(floats, labels, floats, labels, False, use_numba=False),
         lambda: NN.blocked_search(floats, labels, floats, labels, False, use_numba=True)),
    ]
    rows = []
    for name, f_np, f_nb in cases:
        t_np, t_nb = best_of(f_np, repeat), best_of(f_nb, repeat)
        rows.append({"case": name, "numpy_s": t_np, "numba_s": t_nb, "speedup": t_np / t_nb})
    return rows


END_TO_END = """
import time, numpy as np
from vibguard import classifier as C, vib as V
from vibguard.data import Dataset
rng = np.random.default_rng(0)
m = {m}
x = (rng.integers(0, 256, (m, 784)) / 255).astype(np.float32)
ds = Dataset(x, (np.arange(m) % 10).astype(np.int64), (1, 28, 28), 10)
net = C.build("cnn-small", 10, seed=0)
C.train(net, ds.take(np.arange(64)), C.TrainConfig(epochs=1))  # warm-up
t0 = time.perf_counter(); C.train(net, ds, C.TrainConfig(epochs=1)); t1 = time.perf_counter()
V.compute_vib_table(ds.take(np.arange(50)))  # warm-up
t2 = time.perf_counter(); V.compute_vib_table(ds); t3 = time.perf_counter()
print(t1 - t0, t3 - t2)
"""


def end_to_end_rows(quick):
    m = 512 if quick else 2048
    out = {}
    for backend in ("numpy", "numba"):
        env = dict(os.environ, VIBGUARD_BACKEND=backend)
        res = subprocess.run([sys.executable, "-c", END_TO_END.format(m=m)], env=env,
                             capture_output=True, text=True, check=True)
        out[backend] = [float(v) for v in res.stdout.split()]
    names = [f"train epoch cnn-small, {m} MNIST-sized images", f"VIB table, {m} images"]
    return [{"case": n, "numpy_s": out["numpy"][i], "numba_s": out["numba"][i],
             "speedup": out["numpy"][i] / out["numba"][i]} for i, n in enumerate(names)]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--quick", action="store_true", help="smaller inputs, fewer repeats")
    ap.add_argument("--json", help="also write the rows to this file")
    args = ap.parse_args(argv)
    rows = kernel_rows(args.quick) + end_to_end_rows(args.quick)
    width = max(len(r["case"]) for r in rows)
    print(f"{'case':<{width}}  {'numpy (s)':>10}  {'numba (s)':>10}  {'speedup':>8}")
    for r in rows:
        print(f"{r['case']:<{width}}  {r['numpy_s']:>10.4f}  {r['numba_s']:>10.4f}  "
              f"{r['speedup']:>7.1f}x")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rows, f, indent=2)


if __name__ == "__main__":
    main()
