"""Compare the compiled and NumPy surface kernels.

    python benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from vibssm import _kernels_py, shapegen
from vibssm.shapegen import fibonacci_sphere

try:
    from vibssm import _kernels as _compiled
except ImportError:
    _compiled = None


def cases():
    fam = shapegen.ShapeFamily.create()
    p = shapegen.sample_shape_params(fam, 0)
    coef = fam.surface_coefficients(p)
    grid = shapegen.voxel_centres((32, 32, 32)).reshape(-1, 3)
    dirs = fibonacci_sphere(128)
    q = fam.surface_points(dirs, p) * np.random.default_rng(0).uniform(0.8, 1.2, (128, 1))
    d0 = dirs + np.random.default_rng(1).normal(0, 0.1, dirs.shape)
    return {
        "implicit_sdf (32^3 voxels)": lambda m: m.implicit_sdf(grid, fam.radii, fam.exponents, coef),
        "project_to_surface (128 points)": lambda m: m.project_to_surface(q, d0, fam.radii, fam.exponents, coef,
                                                                          max_iter=1000),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = {"numpy": _kernels_py}
    if _compiled is not None:
        backends["cython"] = _compiled
    else:
        print("compiled extension not built; timing NumPy only")
    print(f"{'kernel':34s} " + " ".join(f"{b:>12s}" for b in backends) + "   speedup")
    for name, fn in cases().items():
        times = {b: min(timeit.repeat(lambda: fn(m), number=1, repeat=args.repeat)) for b, m in backends.items()}
        speed = f"{times['numpy'] / times['cython']:8.1f}x" if "cython" in times else ""
        print(f"{name:34s} " + " ".join(f"{t * 1e3:10.2f}ms" for t in times.values()) + "  " + speed)


if __name__ == "__main__":
    main()
