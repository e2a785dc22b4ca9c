"""Monte-Carlo calibration of the cluster-task noise level.

Finds the isotropic noise sigma at which the Bayes-optimal (nearest true mean)
classifier reaches the target accuracy on 5-way tasks with means drawn
uniformly on the radius-1 sphere in 20 dimensions.
"""

import argparse

import numpy as np
from scipy.optimize import brentq


def bayes_accuracy(sigma, n_way=5, dim=20, radius=1.0, n_samples=100_000, seed=0):
    rng = np.random.default_rng(seed)
    per_task = 50
    n_tasks = n_samples // per_task
    correct = 0
    for _ in range(n_tasks):
        means = rng.standard_normal((n_way, dim))
        means *= radius / np.linalg.norm(means, axis=1, keepdims=True)
        labels = rng.integers(n_way, size=per_task)
        x = means[labels] + sigma * rng.standard_normal((per_task, dim))
        d = ((x[:, None, :] - means[None]) ** 2).sum(-1)
        correct += int((d.argmin(1) == labels).sum())
    return correct / (n_tasks * per_task)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--target", type=float, default=0.90)
    ap.add_argument("--samples", type=int, default=100_000)
    args = ap.parse_args()
    # common random numbers (fixed seed) keep the curve monotone for the root finder
    sigma = brentq(lambda s: bayes_accuracy(s, n_samples=args.samples) - args.target, 0.1, 1.0, xtol=1e-4)
    print(f"sigma={sigma:.4f} accuracy={bayes_accuracy(sigma, n_samples=args.samples, seed=1):.4f}")


if __name__ == "__main__":
    main()
