"""Class-embedding registry and unit-hypersphere arithmetic.

The registry holds one embedding per known class, ordered by the task that
introduced it. Entries from finished tasks are frozen and never change
again. From the registry we derive the mean known direction, a synthesized
unknown-class prompt (the generic-object embedding pushed away from the
known mean), and the prompt matrix consumed by the detection head.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .errors import DegenerateMean, DuplicateClass, EmptyRegistry, ParseError, ZeroVector

UNKNOWN_LABEL = "unknown"
GENERIC_OBJECT_KEY = "object"

_EPS = 1e-12


def normalize(v: np.ndarray) -> np.ndarray:
    """Scale `v` to unit L2 norm. Raises ZeroVector below 1e-12."""
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n < _EPS:
        raise ZeroVector(f"cannot normalize vector with norm {n:.3e}")
    return v / n


@dataclass(frozen=True)
class ClassEntry:
    """One registered class: name, its embedding, owning task, frozen flag."""

    name: str
    embedding: np.ndarray
    task_id: int
    frozen: bool

    def __post_init__(self):
        emb = np.asarray(self.embedding, dtype=np.float64)
        if emb.ndim != 1 or emb.size < 2:
            raise ValueError(f"class {self.name!r}: embedding must be a vector of dim >= 2")
        if not np.all(np.isfinite(emb)):
            raise ValueError(f"class {self.name!r}: embedding has non-finite entries")
        object.__setattr__(self, "embedding", emb)


@dataclass(frozen=True)
class ClassEmbeddingRegistry:
    """Ordered per-task class embeddings plus the generic-object direction.

    Immutable: `register_task` returns a new registry. `alpha` weights the
    known-mean subtraction when synthesizing the unknown prompt.
    """

    entries: tuple[ClassEntry, ...]
    generic_object: np.ndarray
    alpha: float = 0.4

    def __post_init__(self):
        gen = np.asarray(self.generic_object, dtype=np.float64)
        if gen.ndim != 1 or not np.all(np.isfinite(gen)):
            raise ValueError("generic_object must be a finite vector")
        object.__setattr__(self, "generic_object", gen)
        object.__setattr__(self, "entries", tuple(self.entries))
        if not 0.0 <= self.alpha <= 2.0:
            raise ValueError(f"alpha must lie in [0, 2], got {self.alpha}")
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise DuplicateClass("class names must be unique")
        task_ids = [e.task_id for e in self.entries]
        if any(t < 1 for t in task_ids):
            raise ValueError("task ids start at 1")
        if any(b < a for a, b in zip(task_ids, task_ids[1:])):
            raise ValueError("task ids must be non-decreasing along the registry order")
        for e in self.entries:
            if e.embedding.shape != gen.shape:
                raise ValueError(f"class {e.name!r}: dim {e.embedding.size} != {gen.size}")

    @property
    def num_known(self) -> int:
        return len(self.entries)

    @property
    def dim(self) -> int:
        return int(self.generic_object.size)

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    @property
    def current_task(self) -> int:
        return max((e.task_id for e in self.entries), default=0)

    def entry(self, name: str) -> ClassEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def with_embeddings(self, embeddings: dict[str, np.ndarray]) -> "ClassEmbeddingRegistry":
        """Copy with the non-frozen entries' embeddings replaced."""
        new_entries = []
        for e in self.entries:
            if e.name in embeddings:
                if e.frozen:
                    raise ValueError(f"refusing to overwrite frozen embedding {e.name!r}")
                new_entries.append(replace(e, embedding=np.array(embeddings[e.name], dtype=np.float64)))
            else:
                new_entries.append(e)
        return replace(self, entries=tuple(new_entries))


def mean_known_embedding(registry: ClassEmbeddingRegistry) -> np.ndarray:
    """Mean of the normalized known embeddings. Generally not unit norm."""
    if registry.num_known == 0:
        raise EmptyRegistry("mean of known embeddings needs at least one class")
    acc = np.zeros(registry.dim, dtype=np.float64)
    for e in registry.entries:
        acc += normalize(e.embedding)
    return acc / registry.num_known


def pseudo_unknown_embedding(registry: ClassEmbeddingRegistry) -> np.ndarray:
    """Generic-object embedding shifted away from the known-class mean.

    Returns `generic_object - alpha * mean_dir` where `mean_dir` is the
    unit-normalized mean of the known embeddings. The result is left
    unnormalized; the cosine-similarity head makes its scale irrelevant.
    """
    mean = mean_known_embedding(registry)
    norm = float(np.linalg.norm(mean))
    if norm < _EPS:
        raise DegenerateMean("known-class embeddings cancel; mean direction undefined")
    return registry.generic_object - registry.alpha * (mean / norm)


def prompt_matrix(registry: ClassEmbeddingRegistry, include_unknown: bool) -> np.ndarray:
    """Stack known embeddings in registry order; optionally append the
    synthesized unknown prompt as the final row."""
    rows = [e.embedding for e in registry.entries]
    if include_unknown:
        rows.append(pseudo_unknown_embedding(registry))
    return np.stack(rows, axis=0)


def prompt_labels(registry: ClassEmbeddingRegistry, include_unknown: bool) -> list[str]:
    """Row labels matching `prompt_matrix`; the appended row is UNKNOWN."""
    labels = registry.names
    if include_unknown:
        labels.append(UNKNOWN_LABEL)
    return labels


def register_task(
    registry: ClassEmbeddingRegistry,
    new_classes: list[tuple[str, np.ndarray]],
) -> ClassEmbeddingRegistry:
    """Freeze every existing entry and append the new task's classes.

    New entries arrive unfrozen with task_id = previous max + 1.
    """
    existing = {e.name for e in registry.entries}
    fresh_names = [name for name, _ in new_classes]
    if len(set(fresh_names)) != len(fresh_names):
        raise DuplicateClass(f"duplicate names within new classes: {fresh_names}")
    clash = existing.intersection(fresh_names)
    if clash:
        raise DuplicateClass(f"classes already registered: {sorted(clash)}")
    next_task = registry.current_task + 1
    entries = [replace(e, frozen=True) for e in registry.entries]
    for name, emb in new_classes:
        entries.append(ClassEntry(name=name, embedding=np.asarray(emb, dtype=np.float64),
                                  task_id=next_task, frozen=False))
    return replace(registry, entries=tuple(entries))


@dataclass(frozen=True)
class TaskSchedule:
    """Ordered class introduction plan: task_id -> class names.

    Classes never listed are the implicit unknown set.
    """

    tasks: tuple[tuple[int, tuple[str, ...]], ...]

    def __post_init__(self):
        ids = [t for t, _ in self.tasks]
        if ids != list(range(1, len(ids) + 1)):
            raise ValueError(f"task ids must be contiguous from 1, got {ids}")
        seen: set[str] = set()
        for _, names in self.tasks:
            for n in names:
                if n in seen:
                    raise DuplicateClass(f"class {n!r} appears in more than one task")
                seen.add(n)
        object.__setattr__(
            self, "tasks", tuple((t, tuple(names)) for t, names in self.tasks)
        )

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def classes_for(self, task_id: int) -> tuple[str, ...]:
        for t, names in self.tasks:
            if t == task_id:
                return names
        raise KeyError(task_id)

    def known_at(self, task_id: int) -> tuple[str, ...]:
        """All classes introduced at or before `task_id`."""
        out: list[str] = []
        for t, names in self.tasks:
            if t <= task_id:
                out.extend(names)
        return tuple(out)

    def previously_known_at(self, task_id: int) -> tuple[str, ...]:
        out: list[str] = []
        for t, names in self.tasks:
            if t < task_id:
                out.extend(names)
        return tuple(out)


def _round9(x: float) -> float:
    return float(f"{float(x):.9g}")


def save_embedding_file(path, embeddings: dict[str, np.ndarray]) -> None:
    """Write a name -> vector JSON map at 9 significant digits.

    The key "object" is reserved for the generic-object embedding. Values
    already at 9 significant digits round-trip byte-identically.
    """
    payload = {
        name: [_round9(v) for v in np.asarray(vec, dtype=np.float64)]
        for name, vec in embeddings.items()
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_embedding_file(path) -> dict[str, np.ndarray]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid embedding file: {exc}", path=str(path)) from exc
    out: dict[str, np.ndarray] = {}
    for name, values in raw.items():
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 1:
            raise ParseError(f"embedding {name!r} is not a flat vector", path=str(path))
        out[name] = arr
    return out
