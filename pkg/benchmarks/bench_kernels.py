"""Compiled versus pure-python kernels at the default detector sizes.

Run ``python benchmarks/bench_kernels.py`` after building the extension. Each
kernel is timed on the same inputs under every importable backend and the
outputs are compared for equality.
"""
import argparse
import timeit

import numpy as np

from sdcot._kernels import backends


def _inputs(rng):
    cloud = rng.uniform(-5, 5, size=(1024, 3))
    seeds = cloud[:128]
    boxes = np.column_stack([rng.uniform(-3, 3, (64, 3)), rng.uniform(0.5, 1.5, (64, 3)), rng.uniform(-np.pi, np.pi, 64)])
    scores = rng.random(64)
    grouped = rng.normal(size=(128, 16, 32))
    return {
        "fps 1024->128": lambda k: k.fps(cloud, 128, 0),
        "ball_query 128x1024 r0.6 k16": lambda k: k.ball_query(seeds, cloud, 0.6, 16),
        "iou_matrix 64x64": lambda k: k.iou_matrix(boxes, boxes),
        "nms 64 @0.25": lambda k: k.nms(boxes, scores, 0.25),
        "group_max 128x16x32": lambda k: k.group_max(grouped),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    kernels = backends()
    cases = _inputs(np.random.default_rng(0))
    names = list(kernels)
    print(f"{'kernel':<30}" + "".join(f"{n + ' ms':>14}" for n in names) + f"{'speed-up':>10}  equal")
    for label, call in cases.items():
        times, outs = {}, {}
        for n, k in kernels.items():
            outs[n] = call(k)
            number = max(1, int(0.2 / max(timeit.timeit(lambda: call(k), number=1), 1e-6)))
            times[n] = 1e3 * min(timeit.repeat(lambda: call(k), number=number, repeat=args.repeat)) / number
        ratio = times["python"] / times["compiled"] if "compiled" in times else float("nan")
        equal = all(_same(outs[names[0]], outs[n]) for n in names[1:])
        print(f"{label:<30}" + "".join(f"{times[n]:>14.3f}" for n in names) + f"{ratio:>9.1f}x  {equal}")
    if "compiled" not in kernels:
        print("compiled extension not built; only the python backend was timed")


if __name__ == "__main__":
    main()
