"""Time the numba kernels against their pure-numpy twins.

Both implementations are importable regardless of ``DEPSCREEN_NUMBA``; the
flag only decides which one the library dispatches to.  With ``--model`` the
script also times one training step of the default network under each
backend (each in a fresh interpreter, since the flag is read at import).

    python3 benchmarks/bench_kernels.py [--repeat 5] [--model]
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from depscreen import kernels
from depscreen.dsp import design_lowpass


def best_of(fn, repeat):
    fn()  # warm-up (triggers JIT compilation)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    taps = design_lowpass(0.225, 63).taps
    audio = rng.standard_normal(16000 * 15)
    spec = rng.random((1873, 257))
    x = rng.standard_normal((16, 16, 58, 58)).astype(np.float32)  # (C, N, H+2p, W+2p)
    oh = ow = 56
    cols = kernels.im2col_numpy(x, 3, 3, 1, oh, ow)
    return [
        ("fir_decimate 15 s @ 16 kHz", kernels.fir_decimate_numba, kernels.fir_decimate_numpy, (audio, taps, 2)),
        ("resize 1873x257 -> 224x224", kernels.resize_bilinear_numba, kernels.resize_bilinear_numpy, (spec, 224, 224)),
        ("im2col 16ch x16 56x56 3x3", kernels.im2col_numba, kernels.im2col_numpy, (x, 3, 3, 1, oh, ow)),
        ("col2im 16ch x16 56x56 3x3", kernels.col2im_numba, kernels.col2im_numpy, (cols, x.shape, 3, 3, 1, oh, ow)),
    ]


_STEP = """
import time, numpy as np
from depscreen import BACKEND
from depscreen.nn import Model, ModelConfig
m = Model(ModelConfig.from_arch("mini-18"), seed=0)
x = np.random.default_rng(0).random((16, 3, 224, 224), dtype=np.float32)
y = np.arange(16) % 2
m.loss_and_grads(x, y)
t = []
for _ in range({repeat}):
    t0 = time.perf_counter(); m.loss_and_grads(x, y); t.append(time.perf_counter() - t0)
print(BACKEND, min(t))
"""


def model_step(flag, repeat):
    env = dict(os.environ, DEPSCREEN_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", _STEP.format(repeat=repeat)], env=env,
                         capture_output=True, text=True, check=True).stdout.split()
    return out[0], float(out[1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--model", action="store_true", help="also time a full train step")
    a = ap.parse_args()

    rng = np.random.default_rng(0)
    print(f"{'kernel':<30}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}  max|diff|")
    for name, fast, slow, args in cases(rng):
        t_fast = best_of(lambda: fast(*args), a.repeat)
        t_slow = best_of(lambda: slow(*args), a.repeat)
        diff = float(np.max(np.abs(np.asarray(fast(*args), np.float64) - np.asarray(slow(*args), np.float64))))
        print(f"{name:<30}{t_fast * 1e3:>10.2f}{t_slow * 1e3:>10.2f}{t_slow / t_fast:>8.2f}x  {diff:.2e}")

    if a.model:
        print()
        for flag in ("1", "0"):
            backend, t = model_step(flag, a.repeat)
            print(f"mini-18 train step, batch 16 @ 224, backend={backend:<6} {t * 1e3:8.1f} ms")


if __name__ == "__main__":
    main()
