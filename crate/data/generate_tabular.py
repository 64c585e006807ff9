"""Generates tabular_500.csv, a synthetic regression fixture.

Six numeric features, one three-level categorical column and a smooth
nonlinear target with additive Gaussian noise.
"""

from pathlib import Path

import numpy as np

N = 500
SEED = 20240501


def main() -> None:
    rng = np.random.default_rng(SEED)
    x = rng.uniform(-1.0, 1.0, size=(N, 6))
    x[:, 2] = 0.6 * x[:, 0] + 0.4 * rng.uniform(-1.0, 1.0, size=N)
    hull = rng.choice(["a", "b", "c"], size=N)
    offset = {"a": 0.0, "b": 0.5, "c": -0.4}
    y = (
        np.sin(2.0 * x[:, 0])
        + 0.5 * x[:, 1] ** 2
        + np.exp(x[:, 3]) * 0.3
        - 0.4 * x[:, 4] * x[:, 5]
        + np.array([offset[h] for h in hull])
        + 0.1 * rng.standard_normal(N)
    )
    path = Path(__file__).with_name("tabular_500.csv")
    with path.open("w") as f:
        f.write("x1,x2,x3,x4,x5,x6,hull,y\n")
        for i in range(N):
            nums = ",".join(f"{v:.6f}" for v in x[i])
            f.write(f"{nums},{hull[i]},{y[i]:.6f}\n")


if __name__ == "__main__":
    main()
