"""Hard-parameter-sharing multi-task MLP on top of :mod:`autolambda.autodiff`."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import GradientMap, Tape, Tensor

# task -> (inputs, targets)
Batches = Mapping[int, Tuple[np.ndarray, np.ndarray]]


class InvalidSpec(ValueError):
    pass


class UnknownTask(KeyError):
    pass


class MissingDirection(KeyError):
    pass


@dataclass
class NetworkSpec:
    input_dim: int
    trunk_layers: List[int]
    head_layers: List[List[int]]
    activation: str = "tanh"
    seed: int = 0
    loss_kinds: Optional[List[str]] = None
    zero_head_output: bool = False  # start every head's last layer at zero

    @property
    def num_tasks(self) -> int:
        return len(self.head_layers)

    def validate(self) -> None:
        if self.input_dim < 1:
            raise InvalidSpec("input_dim must be >= 1")
        if not self.head_layers:
            raise InvalidSpec("need at least one task head")
        if any(w < 1 for w in self.trunk_layers):
            raise InvalidSpec("trunk widths must be >= 1")
        for h in self.head_layers:
            if not h or any(w < 1 for w in h):
                raise InvalidSpec("head layers need >= 1 width, each >= 1")
        if self.activation not in ("tanh", "relu"):
            raise InvalidSpec(f"unknown activation {self.activation!r}")
        if self.loss_kinds is not None:
            if len(self.loss_kinds) != self.num_tasks:
                raise InvalidSpec("one loss kind per head")
            bad = set(self.loss_kinds) - {"mse", "softmax_ce"}
            if bad:
                raise InvalidSpec(f"unknown loss kinds {sorted(bad)}")


class ParamSnapshot(Mapping):
    """Read-only copy of a parameter set."""

    __slots__ = ("_data",)

    def __init__(self, params: Mapping[str, np.ndarray], copy: bool = True):
        data = {}
        for k, v in params.items():
            a = np.array(v, dtype=np.float64, copy=True) if copy else v
            a.setflags(write=False)
            data[k] = a
        self._data = data

    def __getitem__(self, key: str) -> np.ndarray:
        return self._data[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def __setattr__(self, name, value):
        if hasattr(self, "_data"):
            raise AttributeError("ParamSnapshot is immutable")
        object.__setattr__(self, name, value)


class MultiTaskNet:
    """Shared trunk followed by one head per task.

    Parameters live in ``self.params`` as plain arrays, keyed by stable names
    (``trunk.0.W``, ``head1.0.b``, ...). ``self.groups`` partitions the names
    into ``"shared"`` and ``"task<i>"`` (0-based task index).
    """

    def __init__(self, spec: NetworkSpec):
        spec.validate()
        self.spec = spec
        self.num_tasks = spec.num_tasks
        self.loss_kinds = list(spec.loss_kinds or ["mse"] * spec.num_tasks)
        self._act = ad.tanh if spec.activation == "tanh" else ad.relu
        rng = np.random.default_rng(spec.seed)
        self.params: Dict[str, np.ndarray] = {}
        self.groups: Dict[str, List[str]] = {"shared": []}
        self._trunk: List[Tuple[str, str]] = []
        self._heads: List[List[Tuple[str, str]]] = []

        fan_in = spec.input_dim
        for i, width in enumerate(spec.trunk_layers):
            self._trunk.append(self._add_layer(rng, f"trunk.{i}", fan_in, width, "shared"))
            fan_in = width
        trunk_out = fan_in
        for t, layers in enumerate(spec.head_layers):
            group = f"task{t}"
            self.groups[group] = []
            fan_in = trunk_out
            head = []
            for i, width in enumerate(layers):
                head.append(self._add_layer(rng, f"head{t}.{i}", fan_in, width, group))
                fan_in = width
            if spec.zero_head_output:
                for name in head[-1]:
                    self.params[name][...] = 0.0
            self._heads.append(head)

    def _add_layer(self, rng, prefix, fan_in, fan_out, group):
        bound = 1.0 / np.sqrt(fan_in)
        w, b = f"{prefix}.W", f"{prefix}.b"
        self.params[w] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        self.params[b] = rng.uniform(-bound, bound, size=(fan_out,))
        self.groups[group] += [w, b]
        return w, b

    # -- forward -----------------------------------------------------------

    def _bind(self, params: Optional[Mapping[str, np.ndarray]]) -> Dict[str, Tensor]:
        params = self.params if params is None else params
        tape = ad.active_tape()
        if tape is None:
            return {k: Tensor(v, _checked=True) for k, v in params.items()}
        return {k: tape.param(k, v) for k, v in params.items()}

    def _check_task(self, task: int) -> None:
        if not 0 <= task < self.num_tasks:
            raise UnknownTask(task)

    def _trunk_forward(self, x, p) -> Tensor:
        h = x
        for w, b in self._trunk:
            h = self._act(ad.add(ad.matmul(h, p[w]), p[b]))
        return h

    def _head_forward(self, task, h, p) -> Tensor:
        layers = self._heads[task]
        for i, (w, b) in enumerate(layers):
            h = ad.add(ad.matmul(h, p[w]), p[b])
            if i < len(layers) - 1:
                h = self._act(h)
        return h

    def _loss(self, task, out, y) -> Tensor:
        if self.loss_kinds[task] == "softmax_ce":
            return ad.softmax_cross_entropy(out, y)
        y = np.asarray(y, dtype=np.float64)
        if y.ndim == 1:
            y = y.reshape(-1, 1)
        if y.shape != out.shape:
            raise ad.ShapeMismatch(f"task {task}: target {y.shape} vs output {out.shape}")
        return ad.mse_loss(out, y)

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise ad.ShapeMismatch(f"input shape {x.shape}, expected (n, {self.spec.input_dim})")
        return x

    def predict(self, task: int, x, params=None) -> np.ndarray:
        self._check_task(task)
        p = {k: Tensor(v, _checked=True) for k, v in (self.params if params is None else params).items()}
        return self._head_forward(task, self._trunk_forward(self._check_input(x), p), p).data

    def task_loss(self, task: int, batch, params=None) -> Tensor:
        """Unweighted loss of ``task`` on ``batch = (x, y)``."""
        self._check_task(task)
        x, y = batch
        p = self._bind(params)
        out = self._head_forward(task, self._trunk_forward(self._check_input(x), p), p)
        return self._loss(task, out, y)

    def task_losses(self, batches: Batches, tasks: Optional[Iterable[int]] = None, params=None) -> Dict[int, Tensor]:
        """Per-task losses; tasks sharing the same input array share one trunk pass."""
        tasks = sorted(batches) if tasks is None else list(tasks)
        p = self._bind(params)
        trunk_cache: Dict[int, Tensor] = {}
        out = {}
        for t in tasks:
            self._check_task(t)
            if t not in batches:
                raise UnknownTask(f"no batch for task {t}")
            x, y = batches[t]
            key = id(x)
            if key not in trunk_cache:
                trunk_cache[key] = self._trunk_forward(self._check_input(x), p)
            out[t] = self._loss(t, self._head_forward(t, trunk_cache[key], p), y)
        return out

    def loss_values(self, batches: Batches, tasks=None, params=None) -> Dict[int, float]:
        """Plain evaluation, nothing recorded."""
        token = ad._active.set(None)
        try:
            return {t: float(v.data) for t, v in self.task_losses(batches, tasks, params).items()}
        finally:
            ad._active.reset(token)

    # -- gradients ---------------------------------------------------------

    def weighted_loss_and_grad(self, batches: Batches, weights: Sequence[float], tasks=None, params=None):
        """Gradient of ``sum_i w_i L_i``; also returns the per-task loss values."""
        tasks = sorted(batches) if tasks is None else list(tasks)
        with Tape() as tape:
            losses = self.task_losses(batches, tasks, params)
            total = None
            for t in tasks:
                term = ad.scale(losses[t], weights[t])
                total = term if total is None else ad.add(total, term)
            if total is None:
                total = ad.scale(tape.constant(0.0), 0.0)
            grads = tape.backward(total)
        return grads, {t: float(v.data) for t, v in losses.items()}

    def weighted_multi_task_grad(self, batches: Batches, weights: Sequence[float], tasks=None, params=None) -> GradientMap:
        if len(weights) != self.num_tasks:
            raise ValueError(f"need {self.num_tasks} weights, got {len(weights)}")
        return self.weighted_loss_and_grad(batches, weights, tasks, params)[0]

    def task_grad(self, task: int, batch, params=None) -> GradientMap:
        with Tape() as tape:
            loss = self.task_loss(task, batch, params)
            return tape.backward(loss)

    def per_task_grads(self, batches: Batches, tasks=None, params=None) -> Dict[int, GradientMap]:
        tasks = sorted(batches) if tasks is None else list(tasks)
        return {t: self.task_grad(t, batches[t], params) for t in tasks}

    # -- parameter bookkeeping --------------------------------------------

    def snapshot(self) -> ParamSnapshot:
        return ParamSnapshot(self.params)

    def restore(self, snap: Mapping[str, np.ndarray]) -> None:
        if set(snap) != set(self.params):
            raise KeyError("snapshot keys do not match network parameters")
        for k in self.params:
            self.params[k] = np.array(snap[k], dtype=np.float64, copy=True)

    def sgd_step(self, grads: GradientMap, lr: float) -> None:
        if lr <= 0:
            raise ValueError("lr must be positive")
        for k, g in grads.items():
            self.params[k] = self.params[k] - lr * g

    def virtual_step(self, grads: GradientMap, lr: float) -> ParamSnapshot:
        """The parameters one plain SGD step would produce; ``self`` untouched."""
        if lr <= 0:
            raise ValueError("lr must be positive")
        new = {k: v - lr * grads[k] if k in grads else v.copy() for k, v in self.params.items()}
        return ParamSnapshot(new, copy=False)

    def perturb(self, direction: GradientMap, eps: float) -> Tuple[ParamSnapshot, ParamSnapshot]:
        missing = set(self.params) - set(direction)
        if missing:
            raise MissingDirection(sorted(missing))
        if eps <= 0:
            raise ValueError("eps must be positive")
        plus = {k: v + eps * direction[k] for k, v in self.params.items()}
        minus = {k: v - eps * direction[k] for k, v in self.params.items()}
        return ParamSnapshot(plus, copy=False), ParamSnapshot(minus, copy=False)

    def num_parameters(self) -> int:
        return int(np.sum([v.size for v in self.params.values()]))


def build_network(spec: NetworkSpec) -> MultiTaskNet:
    return MultiTaskNet(spec)


@dataclass
class SGD:
    """SGD with optional momentum and L2 weight decay."""

    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    _velocity: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def step(self, net: MultiTaskNet, grads: GradientMap) -> None:
        if self.momentum == 0.0 and self.weight_decay == 0.0:
            net.sgd_step(grads, self.lr)
            return
        for k, g in grads.items():
            if self.weight_decay:
                g = g + self.weight_decay * net.params[k]
            if self.momentum:
                v = self._velocity.get(k)
                v = g if v is None else self.momentum * v + g
                self._velocity[k] = v
                g = v
            net.params[k] = net.params[k] - self.lr * g


def flatten(grads: Mapping[str, np.ndarray], keys: Optional[Sequence[str]] = None) -> np.ndarray:
    keys = list(grads) if keys is None else keys
    if not keys:
        return np.zeros(0)
    return np.concatenate([np.ravel(grads[k]) for k in keys])
