"""Independent PyTorch MAML on sinusoid regression, used as a sanity reference.

Same setup as the ``sinusoid-maml`` preset: 1-80-80-1 ReLU learner, Glorot
init, one inner step with alpha 0.1, Adam outer loop, meta-batch 4, 15 query
points per training task. Reports the final model's mean test MSE over
300 tasks with 100 query points each.

    python3 scripts/reference_maml_torch.py --shots 20 --steps 4000
"""

import argparse

import numpy as np
import torch


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--shots", type=int, default=20)
    ap.add_argument("--steps", type=int, default=4000)
    ap.add_argument("--lr", type=float, default=0.001)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    torch.set_num_threads(1)
    rng = np.random.default_rng(args.seed)
    f64 = torch.float64

    def glorot(n_in, n_out):
        bound = np.sqrt(6.0 / (n_in + n_out))
        return torch.tensor(rng.uniform(-bound, bound, (n_in, n_out)), dtype=f64, requires_grad=True)

    def zeros(n):
        return torch.zeros(1, n, dtype=f64, requires_grad=True)

    params = [glorot(1, 80), zeros(80), glorot(80, 80), zeros(80), glorot(80, 1), zeros(1)]

    def net(p, x):
        h = torch.relu(x @ p[0] + p[1])
        h = torch.relu(h @ p[2] + p[3])
        return h @ p[4] + p[5]

    def task(k, m):
        a, w, b = rng.uniform(0.1, 5.0), rng.uniform(0.8, 1.2), rng.uniform(0.0, np.pi)
        xs, xq = rng.uniform(-5, 5, (k, 1)), rng.uniform(-5, 5, (m, 1))
        t = lambda v: torch.tensor(v, dtype=f64)
        return t(xs), t(a * np.sin(w * xs + b)), t(xq), t(a * np.sin(w * xq + b))

    def adapt(xs, ys, create_graph):
        loss = ((net(params, xs) - ys) ** 2).mean()
        grads = torch.autograd.grad(loss, params, create_graph=create_graph)
        return [p - 0.1 * g for p, g in zip(params, grads)]

    opt = torch.optim.Adam(params, lr=args.lr)
    for _ in range(args.steps):
        opt.zero_grad()
        total = 0.0
        for _ in range(4):
            xs, ys, xq, yq = task(args.shots, 15)
            total = total + ((net(adapt(xs, ys, True), xq) - yq) ** 2).mean()
        total.backward()
        opt.step()

    errs = []
    for _ in range(300):
        xs, ys, xq, yq = task(args.shots, 100)
        errs.append(((net(adapt(xs, ys, False), xq) - yq) ** 2).mean().item())
    print(f"shots {args.shots} steps {args.steps} lr {args.lr}: test MSE {np.mean(errs):.3f}")


if __name__ == "__main__":
    main()
