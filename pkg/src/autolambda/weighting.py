"""Task-weighting strategies: Auto-Lambda and the Equal/DWA/Uncertainty/GCS baselines.

Every strategy exposes the same two calls used by the training loop:
``prepare(net, pair, rng)`` runs once per iteration before the parameter
update (Auto-Lambda's meta step lives here), and ``grads(net, batches)``
returns the gradient of the weighted training loss plus per-task loss values.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import GradientMap, Tape
from .network import MultiTaskNet, flatten


class EmptyPrimarySet(ValueError):
    pass


class BadSize(ValueError):
    pass


class ZeroLoss(ZeroDivisionError):
    pass


class ZeroGradient(ValueError):
    pass


# -- Auto-Lambda ----------------------------------------------------------------


@dataclass(frozen=True)
class LambdaState:
    lam: np.ndarray
    primary: Tuple[int, ...]
    beta: float = 1e-4
    init: float = 0.1
    floor: Optional[float] = 1e-3  # None -> unclamped
    eps_rule: str = "scaled"  # scaled | fixed
    eps: float = 0.01
    sample_size: Optional[int] = None  # K'; None -> all tasks
    optimizer: str = "sgd"  # sgd | adam
    adam_m: Optional[np.ndarray] = None
    adam_v: Optional[np.ndarray] = None
    adam_t: int = 0

    def __post_init__(self):
        lam = np.array(self.lam, dtype=np.float64)
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "primary", tuple(sorted(set(int(p) for p in self.primary))))
        if not self.primary:
            raise EmptyPrimarySet("primary task set is empty")
        if any(p < 0 or p >= len(lam) for p in self.primary):
            raise ValueError("primary task index out of range")
        if self.sample_size is not None and not 1 <= self.sample_size <= len(lam):
            raise BadSize(f"K'={self.sample_size} outside [1, {len(lam)}]")
        if self.eps_rule not in ("scaled", "fixed"):
            raise ValueError(f"unknown eps rule {self.eps_rule!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown lambda optimizer {self.optimizer!r}")
        if self.floor is not None and np.any(lam < self.floor):
            object.__setattr__(self, "lam", np.maximum(lam, self.floor))

    @classmethod
    def initial(cls, num_tasks: int, primary: Sequence[int], init: float = 0.1, **kw) -> "LambdaState":
        return cls(np.full(num_tasks, float(init)), tuple(primary), init=init, **kw)

    @property
    def num_tasks(self) -> int:
        return len(self.lam)


def _primary_direction(net, train, val, lam, primary, lr, tasks):
    """Virtual SGD step on the weighted training loss, then the primary val gradient there."""
    g_train, _ = net.weighted_loss_and_grad(train, lam, tasks)
    theta_prime = net.virtual_step(g_train, lr)
    missing = [p for p in primary if p not in val]
    if missing:
        raise KeyError(f"no validation batch for primary tasks {missing}")
    d, _ = net.weighted_loss_and_grad(val, np.ones(net.num_tasks), list(primary), params=theta_prime)
    return d


def _check_primary(primary):
    if not primary:
        raise EmptyPrimarySet("primary task set is empty")


def autolambda_meta_grad_exact(net: MultiTaskNet, train, val, lam, primary, lr: float, tasks=None) -> np.ndarray:
    """Meta-gradient via explicit inner products ``-lr <grad L_i(train, theta), d>``.

    ``d`` is the gradient of the summed primary validation loss at the
    one-step lookahead parameters. Entries for tasks outside ``tasks`` are 0.
    """
    _check_primary(primary)
    tasks = list(range(net.num_tasks)) if tasks is None else sorted(tasks)
    lam = np.asarray(lam, dtype=np.float64)
    d = _primary_direction(net, train, val, lam, primary, lr, tasks)
    keys = list(net.params)
    dv = flatten(d, keys)
    g = np.zeros(net.num_tasks)
    for t in tasks:
        gi = net.task_grad(t, train[t])
        g[t] = -lr * float(flatten(gi, keys) @ dv)
    return g


def fd_epsilon(direction: GradientMap, rule: str = "scaled", eps: float = 0.01) -> float:
    if rule == "fixed":
        return eps
    norm = float(np.sqrt(np.sum([np.sum(v * v) for v in direction.values()])))
    return eps / norm if norm > 0 else 0.0


def autolambda_meta_grad_fd(
    net: MultiTaskNet, train, val, lam, primary, lr: float, eps: float = 0.01, eps_rule: str = "scaled", tasks=None
) -> np.ndarray:
    """Meta-gradient by central differences of the task losses along ``d``.

    ``theta± = theta ± e*d`` with ``e = eps / ||d||`` (scaled rule) or
    ``e = eps`` (fixed rule); entry i is
    ``-lr (L_i(theta+) - L_i(theta-)) / (2e)``.
    """
    _check_primary(primary)
    tasks = list(range(net.num_tasks)) if tasks is None else sorted(tasks)
    lam = np.asarray(lam, dtype=np.float64)
    d = _primary_direction(net, train, val, lam, primary, lr, tasks)
    e = fd_epsilon(d, eps_rule, eps)
    g = np.zeros(net.num_tasks)
    if e == 0.0 or not tasks:
        return g
    plus, minus = net.perturb(d, e)
    lp = net.loss_values(train, tasks, params=plus)
    lm = net.loss_values(train, tasks, params=minus)
    for t in tasks:
        g[t] = -lr * (lp[t] - lm[t]) / (2.0 * e)
    return g


ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def autolambda_update(state: LambdaState, g) -> LambdaState:
    """One step on the weights with rate ``beta``, clamped at ``state.floor``.

    ``sgd`` is ``lam - beta * g``. ``adam`` rescales ``g`` by bias-corrected
    running moments, so each entry moves by roughly ``beta`` per step.
    Entries with ``g == 0`` (unsampled tasks) are left alone by either.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.shape != state.lam.shape:
        raise ValueError(f"meta-gradient has shape {g.shape}, expected {state.lam.shape}")
    extra = {}
    if state.optimizer == "sgd":
        step = g
    else:
        b1, b2 = ADAM_BETAS
        m = np.zeros_like(g) if state.adam_m is None else state.adam_m
        v = np.zeros_like(g) if state.adam_v is None else state.adam_v
        active = g != 0
        m = np.where(active, b1 * m + (1 - b1) * g, m)
        v = np.where(active, b2 * v + (1 - b2) * g * g, v)
        t = state.adam_t + 1
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        step = np.where(active, m_hat / (np.sqrt(v_hat) + ADAM_EPS), 0.0)
        extra = {"adam_m": m, "adam_v": v, "adam_t": t}
    lam = state.lam - state.beta * step
    if state.floor is not None:
        lam = np.maximum(lam, state.floor)
    return replace(state, lam=lam, **extra)


def stochastic_task_subset(K: int, k: int, rng: np.random.Generator) -> np.ndarray:
    if not 1 <= k <= K:
        raise BadSize(f"K'={k} outside [1, {K}]")
    if k == K:
        return np.arange(K)
    return np.sort(rng.choice(K, k, replace=False))


# -- baselines ----------------------------------------------------------------


def dwa_weights(history: Sequence[Sequence[float]], temperature: float = 2.0) -> np.ndarray:
    """Dynamic Weight Average from per-epoch mean losses (oldest first)."""
    if not len(history):
        raise ValueError("empty loss history")
    K = len(history[-1])
    if len(history) < 2:
        return np.ones(K)
    prev, last = np.asarray(history[-2], dtype=np.float64), np.asarray(history[-1], dtype=np.float64)
    if np.any(prev == 0):
        raise ZeroLoss("zero epoch loss in DWA history")
    r = last / prev
    z = r / temperature
    z = np.exp(z - z.max())
    return K * z / z.sum()


def uncertainty_weighted_loss(losses: Sequence[ad.Tensor], s: ad.Tensor) -> ad.Tensor:
    """``sum_i exp(-s_i) L_i + s_i`` with ``s`` a vector of log-variances."""
    K = len(losses)
    if s.shape != (K,):
        raise ad.ShapeMismatch(f"s has shape {s.shape}, expected ({K},)")
    return _masked_uncertainty(dict(enumerate(losses)), s, range(K))


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroGradient("cosine of a zero vector")
    return float(a @ b / (na * nb))


def gcs_weights(per_task_grads: Sequence[np.ndarray], primary_grad: np.ndarray, primary: Sequence[int], mode: str = "binary") -> np.ndarray:
    """Gradient-cosine gating of auxiliary tasks over shared-parameter gradients.

    Primary tasks keep weight 1. An auxiliary gets 1 (``binary``) or its
    cosine (``cosine``) when the cosine with the primary gradient is
    positive, 0 otherwise; an undefined cosine counts as 0.
    """
    if mode not in ("binary", "cosine"):
        raise ValueError(f"unknown GCS mode {mode!r}")
    primary = set(primary)
    lam = np.zeros(len(per_task_grads))
    for i, g in enumerate(per_task_grads):
        if i in primary:
            lam[i] = 1.0
            continue
        try:
            c = cosine(np.asarray(g), np.asarray(primary_grad))
        except ZeroGradient:
            c = 0.0
        if c > 0:
            lam[i] = 1.0 if mode == "binary" else c
    return lam


# -- strategy objects used by the training loop -------------------------------


class Strategy:
    name = "base"

    def __init__(self, num_tasks: int, mask: Optional[Sequence[float]] = None):
        self.num_tasks = num_tasks
        self.mask = np.ones(num_tasks) if mask is None else np.asarray(mask, dtype=np.float64)

    def weights(self) -> np.ndarray:
        return self.mask.copy()

    def prepare(self, net: MultiTaskNet, pair, rng) -> None:
        pass

    def end_epoch(self, mean_losses: np.ndarray) -> None:
        pass

    def grads(self, net: MultiTaskNet, batches) -> Tuple[GradientMap, Dict[int, float]]:
        return net.weighted_loss_and_grad(batches, self.weights())

    def apply_extra(self, lr: float) -> None:
        """Update strategy-owned trainable state after the network step."""

    def state(self) -> dict:
        return {"weights": self.weights().tolist()}


class Equal(Strategy):
    """Constant weights (1, or a 0/1 mask for fixed task groupings)."""

    name = "equal"


class DWA(Strategy):
    name = "dwa"

    def __init__(self, num_tasks: int, temperature: float = 2.0, mask=None):
        super().__init__(num_tasks, mask)
        self.temperature = temperature
        self.history: List[np.ndarray] = []
        self._lam = np.ones(num_tasks)

    def weights(self) -> np.ndarray:
        return self._lam * self.mask

    def end_epoch(self, mean_losses):
        self.history = (self.history + [np.asarray(mean_losses, dtype=np.float64)])[-2:]
        self._lam = dwa_weights(self.history, self.temperature)


class Uncertainty(Strategy):
    """Learned log-variances ``s``; effective weight of task i is ``exp(-s_i)``."""

    name = "uncertainty"

    def __init__(self, num_tasks: int, mask=None, init: float = 0.0):
        super().__init__(num_tasks, mask)
        self.s = np.full(num_tasks, float(init))
        self._s_grad = np.zeros(num_tasks)

    def weights(self) -> np.ndarray:
        return np.exp(-self.s) * self.mask

    def grads(self, net, batches):
        tasks = [t for t in sorted(batches) if self.mask[t] != 0]
        with Tape() as tape:
            losses = net.task_losses(batches, sorted(batches))
            s = tape.param("__uncertainty_s", self.s)
            total = _masked_uncertainty(losses, s, tasks)
            grads = tape.backward(total)
        self._s_grad = grads.pop("__uncertainty_s")
        return grads, {t: float(v.data) for t, v in losses.items()}

    def apply_extra(self, lr):
        self.s = self.s - lr * self._s_grad

    def state(self):
        return {"weights": self.weights().tolist(), "log_var": self.s.tolist()}


def _masked_uncertainty(losses, s, tasks):
    K = s.shape[0]
    total = None
    for i in tasks:
        onehot = np.zeros(K)
        onehot[i] = 1.0
        si = ad.sum(ad.mul(s, onehot))
        term = ad.add(ad.mul(ad.exp(ad.scale(si, -1.0)), losses[i]), si)
        total = term if total is None else ad.add(total, term)
    return total


class GCS(Strategy):
    name = "gcs"

    def __init__(self, num_tasks: int, primary: Sequence[int], mode: str = "binary", mask=None):
        super().__init__(num_tasks, mask)
        self.primary = tuple(sorted(primary))
        if not self.primary:
            raise EmptyPrimarySet("GCS needs a primary task")
        self.mode = mode
        self._lam = np.ones(num_tasks)

    def weights(self):
        return self._lam * self.mask

    def prepare(self, net, pair, rng):
        shared = net.groups["shared"]
        per_task = net.per_task_grads(pair.train)
        flat = [flatten(per_task[t], shared) for t in range(self.num_tasks)]
        primary = np.sum([flat[p] for p in self.primary], axis=0)
        self._lam = gcs_weights(flat, primary, self.primary, self.mode)


class AutoLambda(Strategy):
    """Learned weights updated by the one-step lookahead meta-gradient.

    ``mode`` picks the finite-difference (``fd``) or inner-product
    (``exact``) meta-gradient.
    """

    name = "autolambda"

    def __init__(self, state: LambdaState, lr: float, mode: str = "fd", mask=None):
        super().__init__(state.num_tasks, mask)
        if mode not in ("fd", "exact"):
            raise ValueError(f"unknown Auto-Lambda mode {mode!r}")
        self.lambda_state = state
        self.lr = lr
        self.mode = mode
        self.last_meta_grad = np.zeros(state.num_tasks)

    def weights(self):
        return self.lambda_state.lam * self.mask

    def prepare(self, net, pair, rng):
        st = self.lambda_state
        tasks = None
        if st.sample_size is not None and st.sample_size < st.num_tasks:
            tasks = stochastic_task_subset(st.num_tasks, st.sample_size, rng).tolist()
        if self.mode == "fd":
            g = autolambda_meta_grad_fd(net, pair.train, pair.val, self.weights(), st.primary, self.lr, st.eps, st.eps_rule, tasks)
        else:
            g = autolambda_meta_grad_exact(net, pair.train, pair.val, self.weights(), st.primary, self.lr, tasks)
        g = g * (self.mask != 0)
        self.last_meta_grad = g
        self.lambda_state = autolambda_update(st, g)

    def state(self):
        return {"weights": self.weights().tolist(), "meta_grad": self.last_meta_grad.tolist()}
