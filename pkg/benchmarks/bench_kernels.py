"""Compare the compiled and NumPy kernel backends on render and backward passes.

    python benchmarks/bench_kernels.py [--sizes 16,32,64] [--scale 4] [--repeat 5] [--threads 1,4]

For each LR grid size ``n`` a one-Gaussian-per-pixel field (default kernel) is
rendered at ``n * scale`` with the tiled path, then differentiated with an L1
loss gradient.  Reports the best-of-``repeat`` wall time per backend and the
maximum absolute difference between the backends' outputs.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from splat2d import _backend
from splat2d.autograd import backward
from splat2d.gauss import field_from_grid
from splat2d.render import RenderConfig, rasterize


def _best(fn, repeat: int) -> tuple[float, object]:
    best, out = float("inf"), None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def run(sizes, scale: int, repeat: int, threads_list) -> list[dict]:
    rng = np.random.default_rng(0)
    rows = []
    for n in sizes:
        field = field_from_grid(rng.random((3, n, n)))
        for threads in threads_list:
            cfg = RenderConfig(out_width=n * scale, out_height=n * scale, normalization="unnormalized", threads=threads)
            upstream = rng.standard_normal((3, n * scale, n * scale))
            result = {"lr": n, "out": n * scale, "threads": threads}
            outputs = {}
            for name in _backend.available():
                with _backend.use_backend(name):
                    t_fwd, img = _best(lambda: rasterize(field, cfg), repeat)
                    t_bwd, grads = _best(lambda: backward(field, cfg, upstream).v, repeat)
                result[f"{name}_render_ms"] = 1000 * t_fwd
                result[f"{name}_backward_ms"] = 1000 * t_bwd
                outputs[name] = (img, grads)
            if len(outputs) == 2:
                (a_img, a_g), (b_img, b_g) = outputs.values()
                result["max_abs_diff"] = float(max(np.abs(a_img - b_img).max(), np.abs(a_g - b_g).max()))
            rows.append(result)
    return rows


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", default="16,32,64")
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--threads", default="1,4")
    args = p.parse_args(argv)
    sizes = [int(s) for s in args.sizes.split(",")]
    threads = [int(t) for t in args.threads.split(",")]
    rows = run(sizes, args.scale, args.repeat, threads)
    names = _backend.available()
    header = ["lr", "out", "threads"] + [f"{n}_{k}_ms" for n in names for k in ("render", "backward")]
    if len(names) == 2:
        header += ["speedup_render", "max_abs_diff"]
    print(" ".join(f"{h:>18}" for h in header))
    for r in rows:
        if len(names) == 2:
            r["speedup_render"] = r["python_render_ms"] / r["cython_render_ms"]
        print(" ".join(f"{r[h]:>18.4g}" if isinstance(r[h], float) else f"{r[h]:>18}" for h in header))


if __name__ == "__main__":
    main()
