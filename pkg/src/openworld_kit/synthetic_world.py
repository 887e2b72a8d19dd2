"""Deterministic generator of desk-scale open-world detection problems.

A world is a set of class prototypes on the unit hypersphere: known classes
spread over a ring around a hidden axis, near-OOD classes placed a fixed
small angle from designated known partners, and far-OOD classes clustered
well away from every known class. Scenes are feature pyramids whose
foreground locations carry noisy copies of the owning prototype and whose
background stays dissimilar to every prototype. Never-introduced classes
appear in train/cal scenes as unlabeled foreground, mirroring open-world
data where unknowns are present but unannotated.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .embedding_space import GENERIC_OBJECT_KEY, TaskSchedule, save_embedding_file
from .errors import InfeasibleSpec, ParseError
from .owod_eval import GtRecord, TaskSplitSpec, save_task_split, write_gt_jsonl
from .pyramid import (
    FeaturePyramid,
    LayerGeometry,
    PyramidGeometry,
    read_pyramid_blob,
    write_pyramid_blob,
)
from .seeding import derive_rng

KIND_KNOWN = "known"
KIND_NOOD = "nood"
KIND_FOOD = "food"

MANIFEST_NAME = "manifest.json"
EMBEDDINGS_NAME = "embeddings.json"
TASK_SPLIT_NAME = "task_split.json"


@dataclass(frozen=True)
class WorldSpec:
    """Geometry and content of a synthetic world."""

    dim: int = 16
    known_per_task: tuple[int, ...] = (5, 5, 5)
    n_nood: int = 4
    n_food: int = 4
    nood_angle: float = 0.25
    food_min_angle: float = 1.2
    noise_sigma: float = 0.1
    text_noise_sigma: float = 0.05
    pyramid_layers: tuple[tuple[int, int, float], ...] = ((16, 16, 16.0), (8, 8, 32.0))
    level_thresholds: tuple[float, ...] = (0.0, 64.0)
    box_size_ranges: tuple[tuple[float, float], ...] = ((20.0, 56.0), (72.0, 150.0))
    boxes_per_scene: tuple[int, int] = (3, 6)
    scenes_per_split: tuple[tuple[str, int], ...] = (("train", 60), ("cal", 20), ("test", 40))
    unknown_box_ratio: float = 0.3
    box_jitter: float = 0.0
    background_max_cos: float = 0.3
    # ring/cluster shaping for the prototype construction
    known_angle_range: tuple[float, float] = (1.05, 1.3)
    food_axis_angle: float = 1.55
    food_spread: float = 0.2
    foodward_cap: float = 0.15
    clearance_slack: float = 0.1
    food_alignment_alpha: float = 0.4
    min_unknown_margin: float = 0.05
    max_draws: int = 1_000_000

    def __post_init__(self):
        if self.dim < 4:
            raise ValueError("dim must be at least 4")
        if not 0.0 < self.nood_angle < np.pi:
            raise ValueError("nood_angle must lie in (0, pi)")
        if not 0.0 < self.food_min_angle < np.pi:
            raise ValueError("food_min_angle must lie in (0, pi)")
        if self.n_nood < 0 or self.n_food < 0 or any(c < 0 for c in self.known_per_task):
            raise ValueError("class counts must be nonnegative")
        if any(c < 0 for _, c in self.scenes_per_split):
            raise ValueError("scene counts must be nonnegative")
        if self.n_nood > sum(self.known_per_task):
            raise ValueError("need at least one distinct known partner per near-OOD class")
        if len(self.box_size_ranges) != len(self.pyramid_layers):
            raise ValueError("one box size range per pyramid layer")
        if len(self.level_thresholds) != len(self.pyramid_layers):
            raise ValueError("one lower size threshold per pyramid layer")

    @property
    def num_known(self) -> int:
        return sum(self.known_per_task)

    @property
    def num_unknown(self) -> int:
        return self.n_nood + self.n_food

    def geometry(self) -> PyramidGeometry:
        return PyramidGeometry(
            layers=tuple(LayerGeometry(h, w, float(s)) for h, w, s in self.pyramid_layers),
            level_thresholds=tuple(self.level_thresholds) + (float("inf"),),
        )

    def image_extent(self) -> tuple[float, float]:
        g0 = self.pyramid_layers[0]
        return g0[1] * g0[2], g0[0] * g0[2]

    def scene_count(self, split: str) -> int:
        for name, count in self.scenes_per_split:
            if name == split:
                return count
        raise KeyError(split)


@dataclass(frozen=True)
class WorldClass:
    name: str
    kind: str                # known | nood | food
    task_id: int | None      # None for never-introduced classes
    prototype: np.ndarray
    partner: str | None = None  # nearest known class, for near-OOD classes


@dataclass(frozen=True)
class World:
    spec: WorldSpec
    seed: int
    classes: tuple[WorldClass, ...]
    generic_object: np.ndarray
    text_embeddings: dict[str, np.ndarray]

    @property
    def geometry(self) -> PyramidGeometry:
        return self.spec.geometry()

    @property
    def known_classes(self) -> tuple[WorldClass, ...]:
        return tuple(c for c in self.classes if c.kind == KIND_KNOWN)

    @property
    def unknown_classes(self) -> tuple[WorldClass, ...]:
        return tuple(c for c in self.classes if c.kind != KIND_KNOWN)

    def class_named(self, name: str) -> WorldClass:
        for c in self.classes:
            if c.name == name:
                return c
        raise KeyError(name)

    def schedule(self) -> TaskSchedule:
        tasks = []
        for t in range(1, len(self.spec.known_per_task) + 1):
            names = tuple(c.name for c in self.classes if c.task_id == t)
            tasks.append((t, names))
        return TaskSchedule(tasks=tuple(tasks))

    def task_split(self) -> TaskSplitSpec:
        return TaskSplitSpec(tasks=self.schedule().tasks)


def _angle(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.arccos(np.clip(a @ b, -1.0, 1.0)))


class _DrawBudget:
    def __init__(self, limit: int):
        self.limit = limit
        self.used = 0

    def spend(self, n: int = 1) -> None:
        self.used += n
        if self.used > self.limit:
            raise InfeasibleSpec(
                f"world construction exhausted {self.limit} rejection draws")


def _random_tangent(rng: np.random.Generator, axes: list[np.ndarray], dim: int,
                    budget: _DrawBudget) -> np.ndarray:
    """Unit vector orthogonal to every axis in `axes`."""
    while True:
        budget.spend()
        v = rng.normal(size=dim)
        for ax in axes:
            v -= (v @ ax) * ax
        n = np.linalg.norm(v)
        if n > 1e-8:
            return v / n


def _rotate_from(base: np.ndarray, tangent: np.ndarray, angle: float) -> np.ndarray:
    return np.cos(angle) * base + np.sin(angle) * tangent


def make_world(spec: WorldSpec, seed: int) -> World:
    """Build prototypes, synthetic text embeddings, and the generic-object
    direction.

    Known prototypes land on a ring around a hidden axis with pairwise
    angles of at least twice the near-OOD offset, and each near-OOD
    prototype sits at exactly the configured offset from its own known
    partner. Far-OOD prototypes cluster around a center placed at a fixed
    angle off the known axis; known draws are kept clear of that center
    (and capped in how far their tangent leans toward it), which is what
    lets the generic-object direction, pushed away from the known mean,
    land closer to every far-OOD prototype than to any known embedding.
    That margin, and a positive cosine from the generic-object embedding
    to every prototype, are checked explicitly; violations restart
    construction, and running out of restarts or rejection draws raises
    InfeasibleSpec.
    """
    budget = _DrawBudget(spec.max_draws)
    last_error = "no attempts made"
    for attempt in range(64):
        rng = derive_rng(seed, "world", attempt)
        try:
            return _build_world(spec, seed, rng, budget)
        except _RetryWorld as exc:
            last_error = str(exc)
            continue
    raise InfeasibleSpec(f"world construction failed: {last_error}")


class _RetryWorld(Exception):
    pass


def _build_world(spec: WorldSpec, seed: int, rng: np.random.Generator,
                 budget: _DrawBudget) -> World:
    dim = spec.dim
    axis = _random_tangent(rng, [], dim, budget)
    min_known_gap = 2.0 * spec.nood_angle
    clearance = spec.food_min_angle + spec.clearance_slack
    lo, hi = spec.known_angle_range

    food_center = None
    foodward = None
    if spec.n_food > 0:
        foodward = _random_tangent(rng, [axis], dim, budget)
        food_center = _rotate_from(axis, foodward, spec.food_axis_angle)

    knowns: list[np.ndarray] = []
    tries = 0
    while len(knowns) < spec.num_known:
        budget.spend()
        tries += 1
        if tries > 40_000:
            raise _RetryWorld("known prototypes did not fit the ring")
        theta = rng.uniform(lo, hi)
        tangent = _random_tangent(rng, [axis], dim, budget)
        cand = _rotate_from(axis, tangent, theta)
        if foodward is not None and tangent @ foodward > spec.foodward_cap:
            continue
        if food_center is not None and _angle(cand, food_center) < clearance:
            continue
        if any(_angle(cand, k) < min_known_gap for k in knowns):
            continue
        knowns.append(cand)

    noods: list[tuple[np.ndarray, int]] = []
    nood_axis_cap = hi + spec.nood_angle / 2.0
    for k in range(spec.n_nood):
        partner = knowns[k]
        placed = False
        for _ in range(2_000):
            budget.spend()
            tangent = _random_tangent(rng, [partner], dim, budget)
            cand = _rotate_from(partner, tangent, spec.nood_angle)
            if _angle(cand, axis) > nood_axis_cap:
                continue
            dists = [_angle(cand, known) for known in knowns]
            if int(np.argmin(dists)) == k:
                noods.append((cand, k))
                placed = True
                break
        if not placed:
            raise _RetryWorld("near-OOD prototype could not keep its partner nearest")

    foods: list[np.ndarray] = []
    tries = 0
    while len(foods) < spec.n_food:
        budget.spend()
        tries += 1
        if tries > 40_000:
            raise _RetryWorld("far-OOD prototypes did not fit their cluster")
        offset = rng.uniform(0.0, spec.food_spread)
        tangent = _random_tangent(rng, [food_center], dim, budget)
        cand = _rotate_from(food_center, tangent, offset)
        if any(_angle(cand, k) < spec.food_min_angle for k in knowns):
            continue
        foods.append(cand)

    prototypes = knowns + [p for p, _ in noods] + foods
    mean = np.mean(prototypes, axis=0)
    norm = np.linalg.norm(mean)
    if norm < 1e-9:
        raise _RetryWorld("prototype mean degenerated")
    generic = mean / norm
    if min(float(generic @ p) for p in prototypes) <= 0.0:
        raise _RetryWorld("generic-object direction left some prototype behind")

    classes: list[WorldClass] = []
    known_names: list[str] = []
    idx = 0
    for t, count in enumerate(spec.known_per_task, start=1):
        for i in range(count):
            name = f"class_t{t}_{i}"
            classes.append(WorldClass(name=name, kind=KIND_KNOWN, task_id=t,
                                      prototype=knowns[idx]))
            known_names.append(name)
            idx += 1
    for i, (proto, partner_idx) in enumerate(noods):
        classes.append(WorldClass(name=f"nood_{i}", kind=KIND_NOOD, task_id=None,
                                  prototype=proto, partner=known_names[partner_idx]))
    for i, proto in enumerate(foods):
        classes.append(WorldClass(name=f"food_{i}", kind=KIND_FOOD, task_id=None,
                                  prototype=proto))

    text: dict[str, np.ndarray] = {}
    for c in classes:
        if c.kind != KIND_KNOWN:
            continue
        noise = _random_tangent(rng, [c.prototype], spec.dim, budget)
        raw = c.prototype + spec.text_noise_sigma * rng.normal() * noise
        text[c.name] = raw / np.linalg.norm(raw)

    # the shifted generic prompt must sit closer to every far-OOD prototype
    # than to any known embedding, with margin
    if foods:
        stacked = np.stack([text[n] for n in known_names])
        mean_dir = stacked.mean(axis=0)
        mean_dir /= np.linalg.norm(mean_dir)
        shifted = generic - spec.food_alignment_alpha * mean_dir
        shifted /= np.linalg.norm(shifted)
        best_known = max(float(shifted @ t) for t in stacked)
        worst_food = min(float(shifted @ f) for f in foods)
        if worst_food - best_known < spec.min_unknown_margin:
            raise _RetryWorld(
                f"unknown-prompt margin {worst_food - best_known:.3f} below "
                f"{spec.min_unknown_margin}")

    return World(spec=spec, seed=seed, classes=tuple(classes),
                 generic_object=generic, text_embeddings=text)


# ---------------------------------------------------------------------------
# scenes


@dataclass(frozen=True)
class SceneBox:
    box: tuple[float, float, float, float]
    class_name: str


@dataclass(frozen=True)
class Scene:
    scene_id: str
    pyramid: FeaturePyramid
    gt: tuple[SceneBox, ...]


def _intersects(a, b) -> bool:
    return not (a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1])


def _sample_boxes(world: World, rng: np.random.Generator) -> list[SceneBox]:
    spec = world.spec
    geometry = world.geometry
    img_w, img_h = spec.image_extent()
    lo, hi = spec.boxes_per_scene
    n_boxes = int(rng.integers(lo, hi + 1))
    known = [c.name for c in world.known_classes]
    unknown = [c.name for c in world.unknown_classes]
    boxes: list[SceneBox] = []
    for _ in range(n_boxes):
        if unknown and rng.random() < spec.unknown_box_ratio:
            name = unknown[int(rng.integers(len(unknown)))]
        else:
            name = known[int(rng.integers(len(known)))]
        level = int(rng.integers(geometry.num_layers))
        size_lo, size_hi = spec.box_size_ranges[level]
        long_side = float(rng.uniform(size_lo, size_hi))
        stride = geometry.layers[level].stride
        short_side = float(np.clip(long_side * rng.uniform(0.6, 1.0),
                                   stride * 1.05, long_side))
        if rng.random() < 0.5:
            w, h = long_side, short_side
        else:
            w, h = short_side, long_side
        placed = None
        for _ in range(200):
            x1 = float(rng.uniform(0.0, img_w - w))
            y1 = float(rng.uniform(0.0, img_h - h))
            cand = (x1, y1, x1 + w, y1 + h)
            if not any(_intersects(cand, sb.box) for sb in boxes):
                placed = cand
                break
        if placed is not None:
            boxes.append(SceneBox(box=placed, class_name=name))
    return boxes


def _background_features(world: World, count: int,
                         rng: np.random.Generator) -> np.ndarray:
    """Unit vectors kept dissimilar to every prototype."""
    spec = world.spec
    protos = np.stack([c.prototype for c in world.classes])
    out = np.empty((count, spec.dim))
    pending = np.arange(count)
    while pending.size:
        draw = rng.normal(size=(pending.size, spec.dim))
        draw /= np.linalg.norm(draw, axis=1, keepdims=True)
        ok = (draw @ protos.T).max(axis=1) < spec.background_max_cos
        out[pending[ok]] = draw[ok]
        pending = pending[~ok]
    return out


def generate_scene(world: World, split: str, index: int) -> Scene:
    """Materialize one scene, seeded by (world seed, split, index)."""
    rng = derive_rng(world.seed, "scene", split, index)
    spec = world.spec
    geometry = world.geometry
    gt = _sample_boxes(world, rng)

    layers: list[np.ndarray] = []
    box_fields: list[np.ndarray] = []
    for g in geometry.layers:
        feats = _background_features(world, g.height * g.width, rng)
        layers.append(feats.reshape(g.height, g.width, spec.dim))
        cells = np.zeros((g.height, g.width, 4))
        for r in range(g.height):
            for c in range(g.width):
                cells[r, c] = g.cell_box(r, c)
        box_fields.append(cells)

    for sb in gt:
        level = geometry.level_for_box(sb.box)
        g = geometry.layers[level]
        cx, cy = g.centers()
        x1, y1, x2, y2 = sb.box
        inside = (cx >= x1) & (cx < x2) & (cy >= y1) & (cy < y2)
        rows, cols = np.nonzero(inside)
        proto = world.class_named(sb.class_name).prototype
        # noise_sigma scales the total perturbation norm, not each coordinate
        scale = spec.noise_sigma / np.sqrt(spec.dim)
        noisy = proto[None, :] + scale * rng.normal(size=(rows.size, spec.dim))
        noisy /= np.linalg.norm(noisy, axis=1, keepdims=True)
        layers[level][rows, cols] = noisy
        emitted = np.array(sb.box, dtype=np.float64)
        for r, c in zip(rows, cols):
            if spec.box_jitter > 0.0:
                jitter = rng.uniform(-spec.box_jitter, spec.box_jitter, size=4) * g.stride
                box_fields[level][r, c] = emitted + jitter
            else:
                box_fields[level][r, c] = emitted

    pyramid = FeaturePyramid(geometry=geometry, layers=tuple(layers),
                             box_field=tuple(box_fields))
    return Scene(scene_id=f"{split}-{index:04d}", pyramid=pyramid, gt=tuple(gt))


# ---------------------------------------------------------------------------
# export / import


def _spec_to_json(spec: WorldSpec) -> dict:
    return asdict(spec)


def _spec_from_json(raw: dict) -> WorldSpec:
    def tup(x):
        return tuple(tuple(v) if isinstance(v, list) else v for v in x)
    raw = dict(raw)
    for key in ("known_per_task", "pyramid_layers", "level_thresholds",
                "box_size_ranges", "boxes_per_scene", "scenes_per_split",
                "known_angle_range"):
        raw[key] = tup(raw[key])
    return WorldSpec(**raw)


def export_world(world: World, out_dir) -> None:
    """Write the manifest, the embedding file, and the task split."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": 1,
        "seed": world.seed,
        "spec": _spec_to_json(world.spec),
        "classes": [
            {
                "name": c.name, "kind": c.kind, "task_id": c.task_id,
                "partner": c.partner, "prototype": c.prototype.tolist(),
            }
            for c in world.classes
        ],
        "tasks": {str(t): list(names) for t, names in world.schedule().tasks},
    }
    with open(out / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    embeddings = dict(world.text_embeddings)
    embeddings[GENERIC_OBJECT_KEY] = world.generic_object
    save_embedding_file(out / EMBEDDINGS_NAME, embeddings)
    save_task_split(out / TASK_SPLIT_NAME, world.task_split())


def load_world(out_dir) -> World:
    path = Path(out_dir) / MANIFEST_NAME
    try:
        with open(path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad world manifest: {exc}", path=str(path)) from exc
    spec = _spec_from_json(manifest["spec"])
    classes = tuple(
        WorldClass(name=c["name"], kind=c["kind"], task_id=c["task_id"],
                   prototype=np.asarray(c["prototype"], dtype=np.float64),
                   partner=c.get("partner"))
        for c in manifest["classes"]
    )
    from .embedding_space import load_embedding_file
    embeddings = load_embedding_file(Path(out_dir) / EMBEDDINGS_NAME)
    generic = embeddings.pop(GENERIC_OBJECT_KEY)
    return World(spec=spec, seed=int(manifest["seed"]), classes=classes,
                 generic_object=generic, text_embeddings=embeddings)


def _gt_visible_in_split(world: World, split: str, class_name: str) -> bool:
    # never-introduced classes are unlabeled outside the test split
    if split == "test":
        return True
    return world.class_named(class_name).task_id is not None


def export_split(world: World, split: str, out_dir) -> list[Scene]:
    """Write every scene blob of a split plus its ground-truth JSON lines."""
    out = Path(out_dir) / "scenes" / split
    out.mkdir(parents=True, exist_ok=True)
    records: list[GtRecord] = []
    scenes: list[Scene] = []
    for index in range(world.spec.scene_count(split)):
        scene = generate_scene(world, split, index)
        scenes.append(scene)
        write_pyramid_blob(out / f"{scene.scene_id}.pyr", scene.pyramid)
        for sb in scene.gt:
            if _gt_visible_in_split(world, split, sb.class_name):
                records.append(GtRecord(scene_id=scene.scene_id, box=sb.box,
                                        class_name=sb.class_name))
    write_gt_jsonl(out / "gt.jsonl", records)
    return scenes


@dataclass(frozen=True)
class LoadedScene:
    scene_id: str
    pyramid: FeaturePyramid
    gt: tuple[SceneBox, ...]


def load_split(world: World, split: str, out_dir) -> list[LoadedScene]:
    """Read a split back from disk in scene-id order."""
    base = Path(out_dir) / "scenes" / split
    from .owod_eval import read_gt_jsonl
    gt_by_scene: dict[str, list[SceneBox]] = {}
    for rec in read_gt_jsonl(base / "gt.jsonl"):
        gt_by_scene.setdefault(rec.scene_id, []).append(
            SceneBox(box=rec.box, class_name=rec.class_name))
    thresholds = world.geometry.level_thresholds
    scenes = []
    for blob in sorted(base.glob("*.pyr")):
        scene_id = blob.stem
        pyramid = read_pyramid_blob(blob, thresholds)
        scenes.append(LoadedScene(scene_id=scene_id, pyramid=pyramid,
                                  gt=tuple(gt_by_scene.get(scene_id, ()))))
    return scenes
