"""Streaming summarization: merge-reduce coreset buffer, reservoir baselines
and the continual/streaming scenario runner.

The buffer keeps s slots of m/s points each. Every incoming batch is
compressed into a fresh slot with a default mass; when the buffer overflows,
the two slots picked by select_index are merged: their points form the union,
each side's losses scaled by its slot mass, and the union is re-summarized.
Slot masses add, so a slot's mass stays proportional to the number of raw
points it represents.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import baselines, models, proxy, select
from .data import WeightedDataset, concat_datasets
from .errors import CoreselectError

__all__ = [
    "Summarizer",
    "bilevel_summarizer",
    "uniform_summarizer",
    "BufferSlot",
    "StreamBuffer",
    "select_index",
    "Reservoir",
    "ClassBalancingReservoir",
    "ScenarioConfig",
    "ScenarioResult",
    "run_scenario",
]


# ---------------------------------------------------------------------------
# summarizers


@dataclass(frozen=True)
class Summarizer:
    """Compresses a weighted dataset to at most m points.

    fn(ds, m, seed) -> CoresetState over ds's rows, honoring ds.weights as
    per-point loss scales for both the inner and outer objectives.
    greedy_prefix marks constructions whose size-j result is the prefix of the
    size-m result, so shrinking is exact truncation.
    """

    fn: object
    greedy_prefix: bool = True

    def __call__(self, ds: WeightedDataset, m: int, seed: int) -> select.CoresetState:
        if ds.n <= m:
            return select.CoresetState(tuple(range(ds.n)), ds.weights.copy())
        return self.fn(ds, m, seed)


def bilevel_summarizer(family: str = "multiclass-logistic", l2_reg: float = 1e-2,
                       n_classes: int | None = None,
                       kernel: proxy.KernelSpec | None = None,
                       q: int = 32, batch: int = 1,
                       hcfg=None, initial_pool: int = 1,
                       budget: models.SolveBudget | None = None) -> Summarizer:
    """Unweighted batch-forward bilevel selection, optionally on Nystrom
    proxy features (the default summarizer for buffer merges)."""

    def run(ds: WeightedDataset, m: int, seed: int) -> select.CoresetState:
        work = ds
        if kernel is not None:
            nmap = proxy.nystrom_fit(ds, min(q, ds.n), kernel, seed)
            work = nmap.transform_dataset(ds)
        inner = models.InnerProblem(work, family, l2_reg, n_classes)
        outer = models.OuterObjective(work, family, n_classes,
                                      weights=ds.weights)
        cfg = select.SelectionConfig(variant="forward-batch", m=m, batch=batch,
                                     seed=seed, initial_pool=initial_pool)
        obj = select.BilevelObjective(inner, outer, hcfg, budget)
        return select.batch_forward_select_objective(obj, cfg,
                                                     atom_weights=ds.weights)

    return Summarizer(run, greedy_prefix=True)


def uniform_summarizer() -> Summarizer:
    def run(ds: WeightedDataset, m: int, seed: int) -> select.CoresetState:
        idx = baselines.uniform_select(ds, m, seed)
        w = np.zeros(ds.n)
        sel = np.asarray(idx, dtype=np.int64)
        w[sel] = ds.weights[sel]
        return select.CoresetState(tuple(idx), w)

    return Summarizer(run, greedy_prefix=False)


def _materialize(ds: WeightedDataset, state: select.CoresetState) -> WeightedDataset:
    idx = np.asarray(state.selected, dtype=np.int64)
    labels = None if ds.labels is None else ds.labels[idx]
    return WeightedDataset(ds.features[idx], labels, state.weights[idx])


# ---------------------------------------------------------------------------
# merge-reduce buffer


def select_index(betas) -> int:
    """Pick the first slot of the pair to merge; 1-based like the buffer's
    bookkeeping. With s resident slots plus one overflow slot: return s when
    s == 1 or beta_{s-1} > beta_s; otherwise the smallest i with
    beta_i == beta_{i+1}; if no equal adjacent pair exists, the last two slots.
    """
    betas = list(betas)
    s = len(betas) - 1
    if s < 1:
        raise CoreselectError("select_index needs at least two slots")
    if s == 1 or betas[s - 2] > betas[s - 1]:
        return s
    for i in range(s):
        if betas[i] == betas[i + 1]:
            return i + 1
    return s


@dataclass
class BufferSlot:
    coreset: WeightedDataset
    beta: float


class StreamBuffer:
    """Fixed-capacity merge-reduce buffer: s slots of m/s points."""

    def __init__(self, capacity: int, slots: int, summarizer: Summarizer,
                 default_beta: float = 1.0, seed: int = 0):
        if capacity < 1 or slots < 1:
            raise CoreselectError("capacity and slots must be >= 1")
        if capacity % slots != 0:
            raise CoreselectError("capacity must be divisible by the slot count")
        if default_beta <= 0:
            raise CoreselectError("default_beta must be positive")
        self.capacity = capacity
        self.slot_count = slots
        self.slot_size = capacity // slots
        self.summarizer = summarizer
        self.default_beta = default_beta
        self.slots: list[BufferSlot] = []
        self._seed_seq = np.random.SeedSequence(seed)

    def _next_seed(self) -> int:
        return int(self._seed_seq.spawn(1)[0].generate_state(1)[0])

    @property
    def betas(self) -> list[float]:
        return [slot.beta for slot in self.slots]

    @property
    def point_count(self) -> int:
        return sum(slot.coreset.n for slot in self.slots)

    def contents(self) -> WeightedDataset:
        """Union of the slot coresets, weights scaled to absolute mass."""
        if not self.slots:
            raise CoreselectError("buffer is empty")
        parts = [slot.coreset.with_weights(slot.coreset.weights * slot.beta)
                 for slot in self.slots]
        return concat_datasets(parts)

    def insert(self, batch: WeightedDataset) -> "StreamBuffer":
        """Compress the batch into a new slot; merge two slots on overflow.

        On summarizer failure the buffer is left unchanged and the error is
        re-raised.
        """
        state = self.summarizer(batch, self.slot_size, self._next_seed())
        fresh = _materialize(batch, state)
        fresh = fresh.with_weights(fresh.weights / self.default_beta)
        new_slots = list(self.slots)
        new_slots.append(BufferSlot(fresh, self.default_beta))
        if len(new_slots) > self.slot_count:
            k = select_index([sl.beta for sl in new_slots])
            i = k - 1
            left, right = new_slots[i], new_slots[i + 1]
            scaled = [
                left.coreset.with_weights(left.coreset.weights * left.beta),
                right.coreset.with_weights(right.coreset.weights * right.beta),
            ]
            union = concat_datasets(scaled)
            merged_state = self.summarizer(union, self.slot_size,
                                           self._next_seed())
            beta = left.beta + right.beta
            merged = _materialize(union, merged_state)
            merged = merged.with_weights(merged.weights / beta)
            new_slots[i] = BufferSlot(merged, beta)
            del new_slots[i + 1]
        self.slots = new_slots
        return self


# ---------------------------------------------------------------------------
# reservoir baselines


class Reservoir:
    """Classic algorithm-R reservoir: the t-th point is kept with probability
    capacity/t."""

    def __init__(self, capacity: int, seed: int):
        if capacity < 1:
            raise CoreselectError("capacity must be >= 1")
        self.capacity = capacity
        self.rng = np.random.default_rng(seed)
        self.items: list = []
        self.count = 0

    def update(self, point, label=None) -> "Reservoir":
        self.count += 1
        if len(self.items) < self.capacity:
            self.items.append((point, label))
        else:
            j = int(self.rng.integers(self.count))
            if j < self.capacity:
                self.items[j] = (point, label)
        return self

    def labels(self) -> list:
        return [label for _, label in self.items]


class ClassBalancingReservoir:
    """Class-balancing reservoir: evicts from the largest class for new
    classes; within a full class, replaces a random same-class member with
    probability (class count in buffer) / (class count seen)."""

    def __init__(self, capacity: int, seed: int):
        if capacity < 1:
            raise CoreselectError("capacity must be >= 1")
        self.capacity = capacity
        self.rng = np.random.default_rng(seed)
        self.items: list = []
        self.seen: dict = {}
        self.full: set = set()

    def _counts(self) -> dict:
        counts: dict = {}
        for _, label in self.items:
            counts[label] = counts.get(label, 0) + 1
        return counts

    def _mark_largest(self) -> None:
        counts = self._counts()
        if not counts:
            return
        peak = max(counts.values())
        for label, count in counts.items():
            if count == peak:
                self.full.add(label)

    def update(self, point, label) -> "ClassBalancingReservoir":
        self.seen[label] = self.seen.get(label, 0) + 1
        if len(self.items) < self.capacity:
            self.items.append((point, label))
            if len(self.items) == self.capacity:
                self._mark_largest()
            return self
        counts = self._counts()
        if label not in self.full:
            peak = max(counts.values())
            largest = [c for c, v in counts.items() if v == peak]
            victim_class = largest[int(self.rng.integers(len(largest)))]
            self.full.add(victim_class)
            members = [i for i, (_, c) in enumerate(self.items)
                       if c == victim_class]
            victim = members[int(self.rng.integers(len(members)))]
            self.items[victim] = (point, label)
            self._mark_largest()
        else:
            mc = counts.get(label, 0)
            nc = self.seen[label]
            if mc > 0 and self.rng.uniform() <= mc / nc:
                members = [i for i, (_, c) in enumerate(self.items)
                           if c == label]
                victim = members[int(self.rng.integers(len(members)))]
                self.items[victim] = (point, label)
        return self

    def labels(self) -> list:
        return [label for _, label in self.items]


# ---------------------------------------------------------------------------
# scenario runner


@dataclass(frozen=True)
class ScenarioConfig:
    mode: str  # "continual" | "streaming"
    replay_strength: float
    memory: int
    slots: int = 1
    model_family: str = "multiclass-logistic"
    l2_reg: float = 1e-2
    n_classes: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("continual", "streaming"):
            raise CoreselectError("mode must be 'continual' or 'streaming'")
        if self.replay_strength < 0:
            raise CoreselectError("replay_strength must be >= 0")


@dataclass
class ScenarioResult:
    """Per-step accuracies: rows are (step, task, accuracy)."""

    rows: list = field(default_factory=list)
    average_accuracy: float = 0.0

    def per_task_final(self) -> dict:
        final: dict = {}
        for step, task, acc in self.rows:
            final[task] = acc
        return final

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("step,task,accuracy\n")
            for step, task, acc in self.rows:
                fh.write(f"{step},{task},{format(acc, '.17g')}\n")

    def to_json(self) -> str:
        return json.dumps({
            "rows": [[s, t, a] for s, t, a in self.rows],
            "average_accuracy": self.average_accuracy,
        })


def _accuracy(params: models.ModelParams, ds: WeightedDataset) -> float:
    pred = models.predict(params, ds.features)
    return float((pred == ds.labels).mean())


def _train(train_sets, train_weights, cfg: ScenarioConfig, warm):
    whole = concat_datasets(train_sets)
    weights = np.concatenate(train_weights)
    problem = models.InnerProblem(whole, cfg.model_family, cfg.l2_reg,
                                  cfg.n_classes)
    return models.solve_inner(problem, weights, warm_start=warm)


def run_scenario(cfg: ScenarioConfig, train_parts, test_tasks,
                 summarizer: Summarizer) -> ScenarioResult:
    """Run a continual or streaming scenario with replay.

    continual: train_parts is one dataset per task; after training on task t
    (current-task mean loss + replay_strength * per-summary mean losses) the
    task is summarized to floor(memory/t) points and earlier summaries shrink
    to the same size (prefix truncation for greedy summarizers, re-run
    otherwise). streaming: train_parts is an ordered StreamBatch/Dataset list;
    replay comes from the merge-reduce buffer's current contents.

    Evaluates accuracy on every test task after each step; the reported
    average is over test tasks at the end.
    """
    result = ScenarioResult()
    params = None

    if cfg.mode == "continual":
        summaries: list[tuple[WeightedDataset, select.CoresetState]] = []
        for t, task in enumerate(train_parts, start=1):
            sets = [task]
            weights = [np.full(task.n, 1.0 / task.n)]
            for summary_ds, state in summaries:
                mat = _materialize(summary_ds, state)
                total = mat.weights.sum()
                sets.append(mat)
                weights.append(cfg.replay_strength * mat.weights
                               / max(total, 1e-300))
            params = _train(sets, weights, cfg, params)
            per_task = cfg.memory // t
            if per_task < 1:
                raise CoreselectError("memory too small for this many tasks")
            shrunk = []
            for summary_ds, state in summaries:
                if len(state.selected) > per_task:
                    if summarizer.greedy_prefix:
                        state = state.truncate(per_task)
                    else:
                        mat = _materialize(summary_ds, state)
                        sub = summarizer(mat, per_task, cfg.seed + t)
                        summary_ds, state = mat, sub
                shrunk.append((summary_ds, state))
            new_state = summarizer(task, per_task, cfg.seed + t)
            summaries = shrunk + [(task, new_state)]
            for j, test in enumerate(test_tasks):
                result.rows.append((t, j, _accuracy(params, test)))
    else:
        buffer = StreamBuffer(cfg.memory, cfg.slots, summarizer, seed=cfg.seed)
        for step, part in enumerate(train_parts, start=1):
            batch = part.dataset if hasattr(part, "dataset") else part
            sets = [batch]
            weights = [np.full(batch.n, 1.0 / batch.n)]
            if buffer.slots:
                mem = buffer.contents()
                total = mem.weights.sum()
                sets.append(mem)
                weights.append(cfg.replay_strength * mem.weights
                               / max(total, 1e-300))
            params = _train(sets, weights, cfg, params)
            buffer.insert(batch)
            for j, test in enumerate(test_tasks):
                result.rows.append((step, j, _accuracy(params, test)))

    final = result.per_task_final()
    result.average_accuracy = float(np.mean(list(final.values()))) if final else 0.0
    return result
