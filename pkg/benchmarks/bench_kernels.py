"""Compare the compiled and numpy kernel backends.

Times each hot kernel on the shapes the default desk-scale model actually
runs, then a full single-frame forward pass and one training step, once per
backend. Prints a CSV to stdout; pass ``--out`` to also write it to a file.

    python3 benchmarks/bench_kernels.py --repeats 50
"""

import argparse
import csv
import io
import statistics
import sys
import time

import numpy as np

from gatedssd import kernels
from gatedssd.model import GatedSSD, ModelConfig
from gatedssd.tensor import compute_threads
from gatedssd.trainer import prepare_targets, synthesize_dataset
from gatedssd.losses import LossConfig

# (N, C, H, W) and (kernel, stride, pad) taken from the default backbone.
IM2COL_CASES = [((1, 3, 96, 96), (3, 2, 1)), ((1, 24, 12, 12), (3, 1, 1)), ((32, 8, 48, 48), (3, 2, 1))]
DEPTHWISE_CASES = [((1, 24, 48, 48), 2), ((1, 72, 12, 12), 2), ((32, 24, 48, 48), 2)]


def _time(fn, repeats):
    fn()  # warm-up
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(samples)


def kernel_cases(rng):
    for shape, (k, s, p) in IM2COL_CASES:
        x = rng.standard_normal(shape).astype(np.float32)
        label = f"im2col {shape} k{k} s{s}"
        yield label, lambda x=x, k=k, s=s, p=p: kernels.active.im2col(x, k, k, s, s, p, p)
        n, c, h, w = shape
        cols = kernels.active.im2col(x, k, k, s, s, p, p)
        yield (f"col2im {shape} k{k} s{s}",
               lambda cols=cols, n=n, c=c, h=h, w=w, k=k, s=s, p=p:
               kernels.active.col2im(cols, n, c, h, w, k, k, s, s, p, p))
    for shape, s in DEPTHWISE_CASES:
        x = rng.standard_normal(shape).astype(np.float32)
        w = rng.standard_normal((shape[1], 1, 3, 3)).astype(np.float32)
        b = np.zeros(shape[1], np.float32)
        y = kernels.active.depthwise_forward(x, w, b, s, s, 1, 1)
        yield f"depthwise_fwd {shape} s{s}", lambda x=x, w=w, b=b, s=s: kernels.active.depthwise_forward(x, w, b, s, s, 1, 1)
        yield (f"depthwise_bwd {shape} s{s}",
               lambda x=x, w=w, dy=y, s=s: kernels.active.depthwise_backward(x, w, dy, s, s, 1, 1))


def model_cases():
    model = GatedSSD(ModelConfig(), seed=0)
    data = synthesize_dataset(32, seed=0)
    x = model.preprocess(data.images)
    labels, targets = prepare_targets(model, data, LossConfig())
    frame = x[:1]
    yield "forward 1 frame", lambda: model.detect_raw(model.features(frame))
    yield ("train step batch 32",
           lambda: model.loss_and_grads(x, labels, targets, data.frame_labels, LossConfig()))


def run(repeats):
    rows = []
    for backend in kernels.available_backends():
        kernels.use_backend(backend)
        rng = np.random.default_rng(0)
        with compute_threads(1):
            for label, fn in [*kernel_cases(rng), *model_cases()]:
                rows.append((label, backend, _time(fn, repeats)))
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--out")
    args = ap.parse_args(argv)
    rows = run(args.repeats)
    by_case = {}
    for label, backend, ms in rows:
        by_case.setdefault(label, {})[backend] = ms
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["case", "cython_ms", "python_ms", "speedup"])
    for label, t in by_case.items():
        cy, py = t.get("cython"), t.get("python")
        speedup = f"{py / cy:.2f}" if cy and py else ""
        writer.writerow([label, "" if cy is None else f"{cy:.4f}", f"{py:.4f}", speedup])
    sys.stdout.write(buf.getvalue())
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(buf.getvalue())
    if "cython" not in kernels.available_backends():
        print("# compiled backend not built; python column only", file=sys.stderr)


if __name__ == "__main__":
    main()
