"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--samples 500]
"""

from __future__ import annotations

import time

import click
import numpy as np

from arm_meter import _purepy

try:
    from arm_meter import _kernels
except ImportError:
    _kernels = None


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def cases(samples: int, rng: np.random.Generator):
    x = rng.random((samples, 4, 16, 16), dtype=np.float32)
    w = (rng.standard_normal((8, 4, 3, 3)) * 0.2).astype(np.float32)
    b = np.zeros(8, dtype=np.float32)
    dy = rng.standard_normal((samples, 8, 16, 16)).astype(np.float32)
    values = rng.standard_normal((32, samples * 10))
    pa = rng.random(256)
    pb = rng.random(256)
    pa /= pa.sum()
    pb /= pb.sum()
    return {
        "conv3x3_forward": lambda k: k.conv3x3_forward(x, w, b),
        "conv3x3_backward": lambda k: k.conv3x3_backward(x, w, dy),
        "filter_histograms": lambda k: k.filter_histograms(values, -2.0, 2.0, 256),
        "cdf_l1 (x1000)": lambda k: [k.cdf_l1(pa, pb) for _ in range(1000)],
    }


@click.command()
@click.option("--repeat", type=int, default=5, show_default=True)
@click.option("--samples", type=int, default=500, show_default=True)
def main(repeat: int, samples: int):
    if _kernels is None:
        raise click.ClickException("compiled extension not built; run `pip install --no-build-isolation -e .`")
    rng = np.random.default_rng(0)
    click.echo(f"{'kernel':<22}{'cython s':>12}{'numpy s':>12}{'speedup':>10}")
    for name, call in cases(samples, rng).items():
        fast = best_of(lambda: call(_kernels), repeat)
        slow = best_of(lambda: call(_purepy), repeat)
        click.echo(f"{name:<22}{fast:>12.4f}{slow:>12.4f}{slow / fast:>9.1f}x")


if __name__ == "__main__":
    main()
