"""Synthetic task families with planted relatedness, plus CSV ingestion.

A family holds a fixed training pool, a held-out validation pool and a test
set for every task. In single-domain families every task reads the *same*
input array object, so batches of different tasks share one trunk pass.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import Bounds, LinearConstraint, milp

SPLITS = ("train", "val", "test")
BATCH_MODES = ("swap", "disjoint_split", "no_swap")


class InfeasiblePlan(ValueError):
    pass


class PoolExhausted(ValueError):
    pass


class IoError(OSError):
    pass


class SchemaMismatch(ValueError):
    pass


class NonNumericCell(ValueError):
    pass


@dataclass(frozen=True)
class TaskInfo:
    name: str
    loss: str = "mse"  # mse | softmax_ce
    output_dim: int = 1  # regression width, or number of classes

    @property
    def metric(self) -> str:
        return "accuracy" if self.loss == "softmax_ce" else "mse"

    @property
    def lower_is_better(self) -> bool:
        return self.loss != "softmax_ce"


@dataclass(frozen=True)
class RelatednessPlan:
    """Planted fraction of shared teacher features between task pairs.

    ``rho[i, j] * min(m_i, m_j)`` input features are shared by tasks i and j,
    where ``m_i`` is the number of features task i reads.
    """

    rho: np.ndarray
    teacher_seed: int = 0
    features_per_task: object = 10  # int or one int per task

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=np.float64)
        object.__setattr__(self, "rho", rho)
        if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
            raise InfeasiblePlan("rho must be square")
        if not np.allclose(np.diag(rho), 1.0):
            raise InfeasiblePlan("rho diagonal must be 1")
        if not np.allclose(rho, rho.T):
            raise InfeasiblePlan("rho must be symmetric")
        if rho.min() < 0 or rho.max() > 1:
            raise InfeasiblePlan("rho entries must lie in [0, 1]")

    @property
    def num_tasks(self) -> int:
        return self.rho.shape[0]

    def sizes(self) -> List[int]:
        m = self.features_per_task
        if isinstance(m, (int, np.integer)):
            return [int(m)] * self.num_tasks
        m = [int(v) for v in m]
        if len(m) != self.num_tasks:
            raise InfeasiblePlan("one feature count per task")
        return m

    def shared_counts(self) -> np.ndarray:
        sizes = self.sizes()
        if min(sizes) < 1:
            raise InfeasiblePlan("every task needs at least one feature")
        k = self.num_tasks
        counts = np.zeros((k, k), dtype=np.int64)
        for i in range(k):
            for j in range(k):
                raw = self.rho[i, j] * min(sizes[i], sizes[j]) if i != j else sizes[i]
                c = int(round(raw))
                if abs(raw - c) > 1e-9:
                    raise InfeasiblePlan(f"rho[{i},{j}]={self.rho[i, j]} is not a multiple of 1/{min(sizes[i], sizes[j])}")
                counts[i, j] = c
        return counts


def realize_overlaps(plan: RelatednessPlan, input_dim: Optional[int]) -> List[Tuple[int, ...]]:
    """Pick feature subsets whose pairwise intersections match the plan exactly.

    Solves a small integer program over Venn regions (one count per nonempty
    task subset), minimising the number of features used. ``input_dim=None``
    lifts the cap on the feature pool.
    """
    counts = plan.shared_counts()
    k = plan.num_tasks
    offdiag = counts[~np.eye(k, dtype=bool)]
    if not offdiag.any():
        regions = {(i,): int(counts[i, i]) for i in range(k)}
    else:
        if k > 12:
            raise InfeasiblePlan("exact overlap realization supports at most 12 tasks")
        subsets = [s for r in range(1, k + 1) for s in itertools.combinations(range(k), r)]
        rows, rhs = [], []
        for i in range(k):
            rows.append([1.0 if i in s else 0.0 for s in subsets])
            rhs.append(counts[i, i])
        for i, j in itertools.combinations(range(k), 2):
            rows.append([1.0 if (i in s and j in s) else 0.0 for s in subsets])
            rhs.append(counts[i, j])
        a = np.array(rows)
        b = np.array(rhs, dtype=np.float64)
        res = milp(
            c=np.ones(len(subsets)),
            constraints=LinearConstraint(a, b, b),
            integrality=np.ones(len(subsets)),
            bounds=Bounds(0, np.inf),
        )
        if not res.success:
            raise InfeasiblePlan("no set system realizes these overlaps")
        regions = {s: int(round(n)) for s, n in zip(subsets, res.x) if round(n) > 0}
    total = int(np.sum(list(regions.values())))
    if input_dim is not None and total > input_dim:
        raise InfeasiblePlan(f"plan needs {total} input features, input_dim is {input_dim}")
    members: List[List[int]] = [[] for _ in range(k)]
    cursor = 0
    for s in sorted(regions, key=lambda s: (len(s), s)):
        for _ in range(regions[s]):
            for i in s:
                members[i].append(cursor)
            cursor += 1
    return [tuple(sorted(m)) for m in members]


@dataclass(frozen=True)
class Teacher:
    """One random 1-hidden-layer tanh net shared by all tasks.

    With ``kind="masked"`` the planted features are input coordinates: task i
    sees only its own inputs (others are zeroed). With ``kind="units"`` they
    are hidden units: task i reads the full input but only its own units, so
    a task whose units are a subset of another's computes part of its
    representation. Outputs are standardised with fixed reference statistics.
    """

    weights: np.ndarray  # (input_dim, width)
    bias: np.ndarray
    readout: np.ndarray
    masks: np.ndarray  # (K, input_dim) or (K, width), 0/1
    mean: np.ndarray
    std: np.ndarray
    kind: str = "masked"  # masked | units

    def hidden(self, task: int, x: np.ndarray) -> np.ndarray:
        if self.kind == "units":
            return np.tanh(x @ self.weights + self.bias) * self.masks[task]
        return np.tanh((x * self.masks[task]) @ self.weights + self.bias)

    def raw(self, task: int, x: np.ndarray) -> np.ndarray:
        return self.hidden(task, x) @ self.readout

    def __call__(self, task: int, x: np.ndarray) -> np.ndarray:
        return (self.raw(task, x) - self.mean[task]) / self.std[task]


@dataclass(frozen=True)
class TaskFamily:
    tasks: Tuple[TaskInfo, ...]
    inputs: Mapping[str, Tuple[np.ndarray, ...]]
    targets: Mapping[str, Tuple[np.ndarray, ...]]
    single_domain: bool = True
    features: Optional[Tuple[Tuple[int, ...], ...]] = None
    plan: Optional[RelatednessPlan] = None
    teacher: Optional[Teacher] = field(default=None, repr=False)

    def __post_init__(self):
        if not self.tasks:
            raise ValueError("a family needs at least one task")
        for split in SPLITS:
            if len(self.inputs[split]) != self.num_tasks or len(self.targets[split]) != self.num_tasks:
                raise ValueError(f"split {split!r} must hold one array per task")
            for x, y in zip(self.inputs[split], self.targets[split]):
                if len(x) != len(y):
                    raise ValueError("inputs and targets disagree in length")

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    @property
    def names(self) -> List[str]:
        return [t.name for t in self.tasks]

    @property
    def directions(self) -> List[int]:
        """``l_i``: 1 when lower metric values are better."""
        return [1 if t.lower_is_better else 0 for t in self.tasks]

    @property
    def input_dim(self) -> int:
        return self.inputs["train"][0].shape[1]

    def pool_size(self, split: str = "train", task: int = 0) -> int:
        return len(self.inputs[split][task])

    def data(self, split: str, task: int) -> Tuple[np.ndarray, np.ndarray]:
        return self.inputs[split][task], self.targets[split][task]

    def batches(self, split: str, tasks: Optional[Sequence[int]] = None) -> Dict[int, Tuple[np.ndarray, np.ndarray]]:
        tasks = range(self.num_tasks) if tasks is None else tasks
        return {t: self.data(split, t) for t in tasks}

    def select(self, tasks: Sequence[int]) -> "TaskFamily":
        """Family restricted to ``tasks`` (in the given order)."""
        tasks = list(tasks)
        pick = lambda seq: tuple(seq[t] for t in tasks)  # noqa: E731
        feats = None if self.features is None else pick(self.features)
        return replace(
            self,
            tasks=pick(self.tasks),
            inputs={s: pick(v) for s, v in self.inputs.items()},
            targets={s: pick(v) for s, v in self.targets.items()},
            features=feats,
            plan=None,
            teacher=None,
        )


def _labels_from_scores(scores: np.ndarray, edges: np.ndarray) -> np.ndarray:
    return np.searchsorted(edges, scores, side="right").astype(np.int64)


def gen_teacher_family(
    K: int,
    input_dim: int,
    plan: RelatednessPlan,
    noise_std: float = 0.1,
    seed: int = 0,
    *,
    n_train: int = 512,
    n_val: int = 256,
    n_test: int = 1024,
    teacher_width: int = 16,
    teacher_gain: float = 1.5,
    classes: Optional[Sequence[Optional[int]]] = None,
    single_domain: bool = True,
    names: Optional[Sequence[str]] = None,
    teacher_kind: str = "masked",
) -> TaskFamily:
    """Regression (or thresholded classification) tasks over overlapping feature subsets.

    The teacher weights depend on ``plan.teacher_seed`` only, the sampled
    inputs and observation noise on ``seed``. For ``teacher_kind="units"``
    the feature pool is the teacher's hidden layer and ``teacher_width`` is
    unused (each task reads ``features_per_task`` units).
    """
    if K < 2:
        raise InfeasiblePlan("need K >= 2 tasks")
    if plan.num_tasks != K:
        raise InfeasiblePlan(f"plan describes {plan.num_tasks} tasks, K={K}")
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    classes = list(classes) if classes is not None else [None] * K
    if len(classes) != K:
        raise ValueError("one class count (or None) per task")
    for c in classes:
        if c is not None and not 2 <= c <= 5:
            raise ValueError("classification tasks use 2-5 classes")
    if teacher_kind not in ("masked", "units"):
        raise ValueError(f"unknown teacher kind {teacher_kind!r}")
    units = teacher_kind == "units"
    features = realize_overlaps(plan, None if units else input_dim)
    sizes = plan.sizes()
    width = 1 + max(max(f) for f in features) if units else teacher_width
    fan_in = input_dim if units else max(sizes)

    trng = np.random.default_rng(plan.teacher_seed)
    masks = np.zeros((K, width if units else input_dim))
    for i, f in enumerate(features):
        masks[i, list(f)] = 1.0
    w = trng.normal(0.0, 1.0, size=(input_dim, width))
    w *= teacher_gain / np.sqrt(fan_in)
    b = trng.normal(0.0, 0.1, size=width)
    v = trng.normal(0.0, 1.0, size=width) / np.sqrt(width)
    ref = trng.normal(size=(4096, input_dim))
    proto = Teacher(w, b, v, masks, np.zeros(K), np.ones(K), teacher_kind)
    ref_out = [proto.raw(i, ref) for i in range(K)]
    teacher = replace(
        proto,
        mean=np.array([o.mean() for o in ref_out]),
        std=np.array([max(o.std(), 1e-12) for o in ref_out]),
    )
    edges = [
        None if c is None else np.quantile(teacher(i, ref), np.arange(1, c) / c)
        for i, c in enumerate(classes)
    ]

    rng = np.random.default_rng(seed)
    sizes_by_split = {"train": n_train, "val": n_val, "test": n_test}
    inputs, targets = {}, {}
    for split in SPLITS:
        n = sizes_by_split[split]
        if single_domain:
            x = rng.normal(size=(n, input_dim))
            xs = (x,) * K
        else:
            xs = tuple(rng.normal(size=(n, input_dim)) for _ in range(K))
        ys = []
        for i in range(K):
            clean = teacher(i, xs[i])
            if classes[i] is None:
                ys.append((clean + noise_std * rng.normal(size=n)).reshape(-1, 1))
            else:
                ys.append(_labels_from_scores(clean + noise_std * rng.normal(size=n), edges[i]))
        inputs[split] = xs
        targets[split] = tuple(ys)

    names = list(names) if names is not None else [f"task{i}" for i in range(K)]
    infos = tuple(
        TaskInfo(names[i], "mse", 1) if classes[i] is None else TaskInfo(names[i], "softmax_ce", classes[i])
        for i in range(K)
    )
    return TaskFamily(infos, inputs, targets, single_domain, tuple(features), plan, teacher)


def add_noise_task(family: TaskFamily, seed: int = 0, dim: int = 4, name: str = "noise") -> TaskFamily:
    """Append a task whose target is a fixed uniform [0, 1) vector per sample."""
    rng = np.random.default_rng(seed)
    inputs, targets = {}, {}
    for split in SPLITS:
        x = family.inputs[split][0]
        inputs[split] = family.inputs[split] + (x,)
        targets[split] = family.targets[split] + (rng.uniform(0.0, 1.0, size=(len(x), dim)),)
    feats = None if family.features is None else family.features + ((),)
    return replace(
        family,
        tasks=family.tasks + (TaskInfo(name, "mse", dim),),
        inputs=inputs,
        targets=targets,
        features=feats,
    )


@dataclass
class BatchPair:
    train: Dict[int, Tuple[np.ndarray, np.ndarray]]
    val: Dict[int, Tuple[np.ndarray, np.ndarray]]
    train_index: Dict[int, np.ndarray]
    val_index: Dict[int, np.ndarray]


def sample_batch_pair(
    family: TaskFamily,
    batch_size: int,
    mode: str,
    primary: Sequence[int],
    rng: np.random.Generator,
) -> BatchPair:
    """Draw a training batch for every task and a validation batch for ``primary``.

    ``swap`` takes two disjoint batches from the training pool,
    ``disjoint_split`` takes the validation batch from the held-out pool and
    ``no_swap`` reuses the training batch.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if mode not in BATCH_MODES:
        raise ValueError(f"unknown batch mode {mode!r}")
    primary = sorted(set(primary))
    if not primary or not all(0 <= p < family.num_tasks for p in primary):
        raise ValueError("primary set must be a nonempty subset of the tasks")

    def draw(task_pool: int, task: int):
        n = family.pool_size("train", task_pool)
        if mode == "swap":
            if 2 * batch_size > n:
                raise PoolExhausted(f"swap needs {2 * batch_size} samples, pool has {n}")
            idx = rng.choice(n, 2 * batch_size, replace=False)
            return idx[:batch_size], idx[batch_size:]
        if batch_size > n:
            raise PoolExhausted(f"batch of {batch_size} from pool of {n}")
        tr = rng.choice(n, batch_size, replace=False)
        if mode == "no_swap":
            return tr, tr
        nv = family.pool_size("val", task)
        if batch_size > nv:
            raise PoolExhausted(f"batch of {batch_size} from validation pool of {nv}")
        return tr, rng.choice(nv, batch_size, replace=False)

    train, val, tri, vai = {}, {}, {}, {}
    if family.single_domain:
        tr, va = draw(0, 0)
        x_tr = family.inputs["train"][0][tr]
        vsplit = "val" if mode == "disjoint_split" else "train"
        x_va = family.inputs[vsplit][0][va]
        for t in range(family.num_tasks):
            train[t] = (x_tr, family.targets["train"][t][tr])
            tri[t] = tr
        for t in primary:
            val[t] = (x_va, family.targets[vsplit][t][va])
            vai[t] = va
    else:
        vsplit = "val" if mode == "disjoint_split" else "train"
        for t in range(family.num_tasks):
            tr, va = draw(t, t)
            train[t] = (family.inputs["train"][t][tr], family.targets["train"][t][tr])
            tri[t] = tr
            if t in primary:
                val[t] = (family.inputs[vsplit][t][va], family.targets[vsplit][t][va])
                vai[t] = va
    return BatchPair(train, val, tri, vai)


def transfer_probe(family: TaskFamily, source: int, target: int, ridge: float = 1e-3) -> float:
    """Test MSE of ridge regression from ``source``'s teacher features to ``target``'s labels."""
    if family.teacher is None:
        raise ValueError("family has no teacher")
    x_tr, y_tr = family.data("train", target)
    x_te, y_te = family.data("test", target)
    h_tr = family.teacher.hidden(source, x_tr)
    h_te = family.teacher.hidden(source, x_te)
    h_tr = np.hstack([h_tr, np.ones((len(h_tr), 1))])
    h_te = np.hstack([h_te, np.ones((len(h_te), 1))])
    gram = h_tr.T @ h_tr + ridge * len(h_tr) * np.eye(h_tr.shape[1])
    coef = np.linalg.solve(gram, h_tr.T @ np.asarray(y_tr, dtype=np.float64).reshape(len(h_tr), -1))
    resid = h_te @ coef - np.asarray(y_te, dtype=np.float64).reshape(len(h_te), -1)
    return float(np.mean(resid**2))


# -- CSV -----------------------------------------------------------------------


def _task_columns(spec) -> Tuple[List[str], str]:
    if isinstance(spec, Mapping):
        cols, loss = spec.get("columns"), spec.get("loss", "mse")
    else:
        cols, loss = spec, "mse"
    if not isinstance(cols, (list, tuple)) or not cols:
        raise SchemaMismatch("each task needs a nonempty column list")
    if loss not in ("mse", "softmax_ce"):
        raise SchemaMismatch(f"unknown loss {loss!r}")
    if loss == "softmax_ce" and len(cols) != 1:
        raise SchemaMismatch("classification tasks take a single label column")
    return list(cols), loss


def load_csv_dataset(
    path,
    schema: Mapping,
    seed: int = 0,
    fractions: Sequence[float] = (0.6, 0.2, 0.2),
) -> TaskFamily:
    """Single-domain family from a headed, numeric, UTF-8 CSV file.

    ``schema`` maps ``"x"`` to the input columns and every other key to a
    task: either a list of target columns (regression) or
    ``{"columns": [...], "loss": "mse" | "softmax_ce"}``. An optional
    ``"split"`` entry names a column holding train/val/test labels;
    otherwise rows are shuffled under ``seed`` and cut by ``fractions``.
    """
    schema = dict(schema)
    if "x" not in schema:
        raise SchemaMismatch("schema must name input columns under 'x'")
    x_cols = list(schema.pop("x"))
    split_col = schema.pop("split", None)
    if not schema:
        raise SchemaMismatch("schema names no tasks")
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            rows = list(reader)
    except OSError as exc:
        raise IoError(str(exc)) from exc
    except UnicodeDecodeError as exc:
        raise IoError(f"{path}: not UTF-8") from exc
    if header is None:
        raise SchemaMismatch("missing header row")
    header = [h.strip() for h in header]
    col = {h: i for i, h in enumerate(header)}
    task_specs = {name: _task_columns(spec) for name, spec in schema.items()}
    needed = x_cols + [c for cols, _ in task_specs.values() for c in cols] + ([split_col] if split_col else [])
    missing = [c for c in needed if c not in col]
    if missing:
        raise SchemaMismatch(f"columns not in file: {missing}")

    def column(name):
        out = np.empty(len(rows))
        for r, row in enumerate(rows):
            if len(row) != len(header):
                raise SchemaMismatch(f"row {r + 2} has {len(row)} cells, header has {len(header)}")
            try:
                out[r] = float(row[col[name]])
            except ValueError:
                raise NonNumericCell(f"row {r + 2}, column {name!r}: {row[col[name]]!r}") from None
            if not np.isfinite(out[r]):
                raise NonNumericCell(f"row {r + 2}, column {name!r}: non-finite")
        return out

    x = np.column_stack([column(c) for c in x_cols]) if x_cols else np.zeros((len(rows), 0))
    ys, infos = [], []
    for name, (cols, loss) in task_specs.items():
        y = np.column_stack([column(c) for c in cols])
        if loss == "softmax_ce":
            lab = y[:, 0]
            if np.any(lab != np.round(lab)) or np.any(lab < 0):
                raise NonNumericCell(f"task {name!r}: class labels must be nonnegative integers")
            ys.append(lab.astype(np.int64))
            infos.append(TaskInfo(name, loss, int(lab.max()) + 1 if len(lab) else 1))
        else:
            ys.append(y)
            infos.append(TaskInfo(name, loss, y.shape[1]))

    rng = np.random.default_rng(seed)
    if split_col:
        labels = [rows[r][col[split_col]].strip() for r in range(len(rows))]
        bad = set(labels) - set(SPLITS)
        if bad:
            raise SchemaMismatch(f"unknown split labels {sorted(bad)}")
        parts = {s: rng.permutation(np.flatnonzero(np.array(labels) == s)) for s in SPLITS}
    else:
        fr = np.asarray(fractions, dtype=np.float64)
        if fr.shape != (3,) or np.any(fr < 0) or not np.isclose(fr.sum(), 1.0):
            raise ValueError("fractions must be three nonnegative numbers summing to 1")
        perm = rng.permutation(len(rows))
        n_tr = int(round(fr[0] * len(rows)))
        n_va = int(round(fr[1] * len(rows)))
        parts = {"train": perm[:n_tr], "val": perm[n_tr:n_tr + n_va], "test": perm[n_tr + n_va:]}

    inputs, targets = {}, {}
    for s in SPLITS:
        xs = x[parts[s]]
        inputs[s] = (xs,) * len(infos)
        targets[s] = tuple(y[parts[s]] for y in ys)
    return TaskFamily(tuple(infos), inputs, targets, single_domain=True)


def export_csv(family: TaskFamily, path) -> Dict:
    """Write a single-domain family to CSV; returns the schema that reloads it."""
    if not family.single_domain:
        raise ValueError("only single-domain families can be exported")
    d = family.input_dim
    x_cols = [f"x{j}" for j in range(d)]
    schema: Dict = {"x": x_cols}
    header = list(x_cols)
    for t, info in enumerate(family.tasks):
        if info.loss == "softmax_ce":
            cols = [f"{info.name}"]
            schema[info.name] = {"columns": cols, "loss": "softmax_ce"}
        else:
            width = np.asarray(family.targets["train"][t]).reshape(family.pool_size("train", t), -1).shape[1]
            cols = [f"{info.name}_{j}" for j in range(width)]
            schema[info.name] = cols
        header += cols
    header.append("split")
    schema["split"] = "split"
    try:
        with open(Path(path), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for s in SPLITS:
                x = family.inputs[s][0]
                ys = [np.asarray(y).reshape(len(x), -1) for y in family.targets[s]]
                for r in range(len(x)):
                    row = [repr(float(v)) for v in x[r]]
                    for t, y in enumerate(ys):
                        if family.tasks[t].loss == "softmax_ce":
                            row.append(str(int(y[r, 0])))
                        else:
                            row += [repr(float(v)) for v in y[r]]
                    row.append(s)
                    w.writerow(row)
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return schema
