"""Per-task binary datasets with labels in {-1, +1}."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import ConfigurationError
from ..rng import RngStream


@dataclass
class TaskData:
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=float).ravel()
        if self.X.shape[0] != self.y.size:
            raise ConfigurationError(f"{self.X.shape[0]} feature rows but {self.y.size} labels")
        if not np.all(np.isin(self.y, (-1.0, 1.0))):
            raise ConfigurationError("labels must be -1 or +1")
        self.pos = np.flatnonzero(self.y > 0)
        self.neg = np.flatnonzero(self.y < 0)
        if self.pos.size == 0 or self.neg.size == 0:
            raise ConfigurationError("every task needs at least one positive and one negative sample")

    @property
    def n_plus(self) -> int:
        return int(self.pos.size)

    @property
    def n_minus(self) -> int:
        return int(self.neg.size)


@dataclass
class TaskDataset:
    tasks: list[TaskData]

    def __post_init__(self):
        if not self.tasks:
            raise ConfigurationError("dataset has no tasks")
        dims = {t.X.shape[1] for t in self.tasks}
        if len(dims) != 1:
            raise ConfigurationError(f"tasks disagree on feature dimension: {sorted(dims)}")

    @property
    def m(self) -> int:
        return len(self.tasks)

    @property
    def d(self) -> int:
        return self.tasks[0].X.shape[1]

    def __getitem__(self, k: int) -> TaskData:
        return self.tasks[k]


def load_tasks(paths: Sequence[str | Path] | str | Path, delimiter: str = ",", task_column: bool = False,
               skip_header: int = 0) -> TaskDataset:
    """Load tasks from delimited text.

    Each row is ``label, features...`` with one file per task.  With
    ``task_column=True`` a single file holds ``task_id, label, features...``
    and task ids are 0-based consecutive integers.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    if task_column:
        if len(paths) != 1:
            raise ConfigurationError("task_column mode expects exactly one file")
        raw = np.loadtxt(paths[0], delimiter=delimiter, skiprows=skip_header, ndmin=2)
        ids = raw[:, 0]
        if not np.array_equal(ids, np.round(ids)) or ids.min() < 0:
            raise ConfigurationError("task ids must be nonnegative integers")
        ids = ids.astype(int)
        return TaskDataset([TaskData(raw[ids == k, 2:], raw[ids == k, 1]) for k in range(ids.max() + 1)])
    tasks = []
    for p in paths:
        raw = np.loadtxt(p, delimiter=delimiter, skiprows=skip_header, ndmin=2)
        tasks.append(TaskData(raw[:, 1:], raw[:, 0]))
    return TaskDataset(tasks)


def make_separable_tasks(seed: int, m: int = 2, n: int = 500, d: int = 10, pos_frac: float = 0.1,
                         gap: float = 1.0) -> TaskDataset:
    """Linearly separable tasks: positives are the top ``pos_frac`` along a random unit direction,
    pushed a further ``gap`` along it."""
    if not 0 < pos_frac < 1:
        raise ConfigurationError(f"pos_frac must lie in (0, 1), got {pos_frac}")
    n_pos = int(round(pos_frac * n))
    if not 1 <= n_pos < n:
        raise ConfigurationError("need at least one sample of each class")
    tasks = []
    for k in range(m):
        gen = RngStream(seed, ("separable", k)).generator()
        u = gen.standard_normal(d)
        u /= np.linalg.norm(u)
        X = gen.standard_normal((n, d))
        order = np.argsort(X @ u)
        y = -np.ones(n)
        y[order[n - n_pos:]] = 1.0
        X[y > 0] += gap * u
        tasks.append(TaskData(X, y))
    return TaskDataset(tasks)
