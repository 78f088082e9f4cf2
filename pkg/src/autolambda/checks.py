"""Numerical self-checks: random-graph gradient checks, the head-partition
invariant and finite-difference vs exact meta-gradients on random nets."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import CheckReport, grad_check
from .network import MultiTaskNet, NetworkSpec, build_network, flatten
from .weighting import autolambda_meta_grad_exact, autolambda_meta_grad_fd

OPS = ("matmul", "add", "mul", "elementwise_tanh", "elementwise_relu", "exp", "scale", "sum", "mse_loss", "softmax_cross_entropy")


def random_graph(rng: np.random.Generator) -> Tuple[Callable, Dict[str, np.ndarray], set]:
    """A random scalar graph that uses every primitive at least once.

    Returns ``(builder, params, ops_used)`` for :func:`grad_check`.
    """
    n = int(rng.integers(2, 6))
    d = int(rng.integers(2, 5))
    h = int(rng.integers(2, 6))
    k = int(rng.integers(2, 4))
    x = rng.normal(size=(n, d))
    target = rng.normal(size=(n, k))
    labels = rng.integers(0, k, size=n)
    params = {
        "W1": rng.normal(0, 0.7, size=(d, h)),
        "b1": rng.normal(0, 0.3, size=h),
        "W2": rng.normal(0, 0.7, size=(d, h)),
        "b2": rng.normal(0.5, 0.3, size=h),
        "W3": rng.normal(0, 0.7, size=(h, k)),
        "s": rng.normal(0, 0.5, size=k),
    }
    c = float(rng.uniform(-0.8, 0.8))
    # random arrangement: which branch feeds the exp, and whether the relu
    # branch multiplies before or after the output layer
    swap = bool(rng.integers(2))
    late_mul = bool(rng.integers(2))

    def builder(p):
        a = ad.tanh(ad.add(ad.matmul(x, p["W1"]), p["b1"]))
        r = ad.relu(ad.add(ad.matmul(x, p["W2"]), p["b2"]))
        if swap:
            a, r = r, a
        e = ad.exp(ad.scale(a, c))
        if late_mul:
            z = ad.mul(ad.matmul(e, p["W3"]), ad.matmul(r, p["W3"]))
        else:
            z = ad.matmul(ad.mul(e, r), p["W3"])
        loss = ad.add(ad.mse_loss(z, target), ad.softmax_cross_entropy(z, labels))
        return ad.add(loss, ad.scale(ad.sum(ad.mul(p["s"], p["s"])), 0.1))

    return builder, params, set(OPS)


def random_graph_checks(n: int = 100, seed: int = 0, tol: float = 1e-4) -> List[CheckReport]:
    rng = np.random.default_rng(seed)
    reports = []
    for _ in range(n):
        builder, params, _ = random_graph(rng)
        reports.append(grad_check(builder, params, tol=tol))
    return reports


def random_net(rng: np.random.Generator, max_params: int = 200) -> Tuple[MultiTaskNet, dict, dict]:
    """Small random multi-task net plus a train and a val batch for every task."""
    while True:
        K = int(rng.integers(2, 5))
        d = int(rng.integers(2, 5))
        width = int(rng.integers(3, 7))
        outs = [int(rng.integers(1, 3)) for _ in range(K)]
        kinds = ["softmax_ce" if (o == 2 and rng.random() < 0.3) else "mse" for o in outs]
        spec = NetworkSpec(d, [width], [[o] for o in outs], "tanh", int(rng.integers(1 << 30)), kinds)
        net = build_network(spec)
        if net.num_parameters() <= max_params:
            break
    nb = int(rng.integers(4, 9))

    def batch():
        x = rng.normal(size=(nb, d))
        out = {}
        for t in range(K):
            y = rng.integers(0, outs[t], size=nb) if kinds[t] == "softmax_ce" else rng.normal(size=(nb, outs[t]))
            out[t] = (x, y)
        return out

    return net, batch(), batch()


@dataclass
class MetaCheck:
    cosine: float
    rel_l2: float
    oracle_rel: float


def lookahead_oracle(net: MultiTaskNet, train, val, lam, primary, lr: float, h: float = 1e-4) -> np.ndarray:
    """Dense central differences of ``L_pri(val, theta - lr * grad sum_i lam_i L_i(train))`` in every lambda_i."""
    lam = np.asarray(lam, dtype=np.float64)

    def objective(l):
        g, _ = net.weighted_loss_and_grad(train, l)
        p = {k: v - lr * g[k] for k, v in net.params.items()}
        return float(np.sum(list(net.loss_values({t: val[t] for t in primary}, list(primary), p).values())))

    out = np.zeros(len(lam))
    for i in range(len(lam)):
        step = np.zeros(len(lam))
        step[i] = h
        out[i] = (objective(lam + step) - objective(lam - step)) / (2.0 * h)
    return out


def meta_grad_checks(n: int = 50, seed: int = 0, lr: float = 0.1) -> List[MetaCheck]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        net, train, val = random_net(rng)
        K = net.num_tasks
        lam = rng.uniform(0.05, 1.0, size=K)
        primary = sorted(rng.choice(K, size=int(rng.integers(1, K + 1)), replace=False).tolist())
        exact = autolambda_meta_grad_exact(net, train, val, lam, primary, lr)
        fd = autolambda_meta_grad_fd(net, train, val, lam, primary, lr)
        oracle = lookahead_oracle(net, train, val, lam, primary, lr)
        ne = np.linalg.norm(exact)
        cos = float(exact @ fd / (ne * np.linalg.norm(fd))) if ne > 0 else 1.0
        out.append(MetaCheck(cos, float(np.linalg.norm(fd - exact) / max(ne, 1e-300)), float(np.linalg.norm(oracle - exact) / max(ne, 1e-300))))
    return out


def partition_violations(n: int = 20, seed: int = 0) -> int:
    """Count nonzero head gradients of task i with respect to another task's head."""
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n):
        net, train, _ = random_net(rng)
        for t in range(net.num_tasks):
            g = net.task_grad(t, train[t])
            for j in range(net.num_tasks):
                if j != t:
                    bad += int(np.count_nonzero(flatten(g, net.groups[f"task{j}"])))
    return bad
