"""Procedural compositional benchmark: scenes of colored shapes on a grid,
a closed caption grammar, an exact oracle parser, editing pairs, and a
six-category evaluator (single object, two object, counting, colors,
position, attribute binding) aggregated by unweighted mean.

The parser inverts the renderer exactly on clean images, which removes
detector noise from every downstream score.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import ppm
from .rng import stream

# Palette: the six saturated corners of the RGB cube (white is background,
# black is excluded to keep anchors maximally separated from both).
COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
}
COLOR_NAMES = list(COLORS)
SHAPES = ["circle", "square", "triangle"]
COUNT_WORDS = {2: "two", 3: "three", 4: "four"}

VOCAB = (
    ["<pad>", "a", "and", "above", "below", "left", "right", "of",
     "one", "two", "three", "four", "make", "the", "add", "remove"]
    + COLOR_NAMES
    + SHAPES
    + [s + "s" for s in SHAPES]
)
PAD_ID = 0
WORD2ID = {w: i for i, w in enumerate(VOCAB)}

CATEGORIES = ["single_object", "two_object", "counting",
              "colors", "position", "attribute_binding"]

# Parser calibration (see tests: survives additive noise sigma=0.05).
FG_DIST = 0.45        # distance from white beyond which a pixel is foreground
COLOR_TOL = 0.35      # max distance from the nearest palette anchor
MIN_BLOB = 8          # fewer foreground pixels than this counts as empty
MIN_IOU = 0.30        # weakest acceptable shape-template match


class VocabError(ValueError):
    pass


def encode(words) -> list[int]:
    if isinstance(words, str):
        words = words.split()
    ids = []
    for w in words:
        if w not in WORD2ID:
            raise VocabError(f"unknown word {w!r}; vocabulary: {' '.join(VOCAB)}")
        ids.append(WORD2ID[w])
    return ids


def decode(ids) -> str:
    return " ".join(VOCAB[i] for i in ids if i != PAD_ID)


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cell: tuple  # (row, col)


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple
    grid: int = 2
    canvas: int = 16

    def __post_init__(self):
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise ValueError("objects must occupy distinct cells")
        if not 0 <= len(self.objects) <= self.grid * self.grid:
            raise ValueError("too many objects for the grid")


@lru_cache(maxsize=None)
def shape_mask(shape: str, cell_px: int) -> np.ndarray:
    """Boolean cell_px x cell_px stencil, centered, radius cell_px//2 - 1."""
    r = cell_px // 2 - 1
    c = cell_px // 2
    ys, xs = np.mgrid[0:cell_px, 0:cell_px]
    dy, dx = ys - c, xs - c
    if shape == "circle":
        return dy * dy + dx * dx <= r * r
    if shape == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) <= r
    if shape == "triangle":
        return (np.abs(dy) <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    raise ValueError(f"unknown shape {shape!r}")


def render(spec: SceneSpec) -> np.ndarray:
    """Deterministic rasterization to float32 [-1, 1], white background."""
    img = np.ones((spec.canvas, spec.canvas, 3), dtype=np.float32)
    cell_px = spec.canvas // spec.grid
    for obj in spec.objects:
        row, col = obj.cell
        mask = shape_mask(obj.shape, cell_px)
        tile = img[row * cell_px:(row + 1) * cell_px, col * cell_px:(col + 1) * cell_px]
        tile[mask] = np.array(COLORS[obj.color], dtype=np.float32)
    return img * 2.0 - 1.0


def caption(spec: SceneSpec, variant: int = 0) -> list[int]:
    """Deterministic caption over the closed vocabulary."""
    objs = sorted(spec.objects, key=lambda o: o.cell)
    if len(objs) == 0:
        raise ValueError("cannot caption an empty scene")
    if len(objs) == 1:
        o = objs[0]
        return encode(["a", o.color, o.shape])
    shapes = {o.shape for o in objs}
    if len(shapes) == 1 and len(objs) >= 2:
        return encode([COUNT_WORDS[len(objs)], objs[0].shape + "s"])
    if len(objs) == 2:
        a, b = objs
        if a.cell[1] == b.cell[1] and a.cell[0] != b.cell[0]:
            upper, lower = (a, b) if a.cell[0] < b.cell[0] else (b, a)
            if variant % 2 == 0:
                return encode(["a", upper.color, upper.shape, "above",
                               "a", lower.color, lower.shape])
            return encode(["a", lower.color, lower.shape, "below",
                           "a", upper.color, upper.shape])
        if a.cell[0] == b.cell[0] and a.cell[1] != b.cell[1]:
            lft, rgt = (a, b) if a.cell[1] < b.cell[1] else (b, a)
            if variant % 2 == 0:
                return encode(["a", lft.color, lft.shape, "left", "of",
                               "a", rgt.color, rgt.shape])
            return encode(["a", rgt.color, rgt.shape, "right", "of",
                           "a", lft.color, lft.shape])
        return encode(["a", a.color, a.shape, "and", "a", b.color, b.shape])
    words = []
    for i, o in enumerate(objs):
        if i:
            words.append("and")
        words.extend(["a", o.color, o.shape])
    return encode(words)


_ANCHORS = np.array([COLORS[c] for c in COLOR_NAMES], dtype=np.float32)


def parse(img: np.ndarray, grid: int | None = None):
    """Invert render(); returns a SceneSpec or None on failure.

    Accepts [-1,1] or [0,1] inputs (auto-detected by range).
    """
    img = np.asarray(img, dtype=np.float32)
    if img.min() < -0.004:
        img = (img + 1.0) / 2.0
    img = np.clip(img, 0.0, 1.0)
    canvas = img.shape[0]
    if grid is None:
        grid = 2 if canvas <= 16 else 3
    cell_px = canvas // grid
    objects = []
    for row in range(grid):
        for col in range(grid):
            tile = img[row * cell_px:(row + 1) * cell_px, col * cell_px:(col + 1) * cell_px]
            dist_white = np.sqrt(((tile - 1.0) ** 2).sum(axis=-1))
            fg = dist_white > FG_DIST
            if fg.sum() < MIN_BLOB:
                continue
            mean_color = tile[fg].mean(axis=0)
            dists = np.sqrt(((_ANCHORS - mean_color) ** 2).sum(axis=-1))
            ci = int(dists.argmin())
            if dists[ci] > COLOR_TOL:
                return None
            best_shape, best_iou = None, -1.0
            for shape in SHAPES:
                tmpl = shape_mask(shape, cell_px)
                iou = (fg & tmpl).sum() / (fg | tmpl).sum()
                if iou > best_iou:
                    best_shape, best_iou = shape, iou
            if best_iou < MIN_IOU:
                return None
            objects.append(SceneObject(best_shape, COLOR_NAMES[ci], (row, col)))
    return SceneSpec(tuple(objects), grid=grid, canvas=canvas)


# ---------------------------------------------------------------------------
# editing

@dataclass(frozen=True)
class EditOp:
    kind: str             # recolor | add | remove
    obj_index: int = -1   # for recolor/remove
    color: str = ""       # for recolor
    obj: SceneObject | None = None  # for add


@dataclass(frozen=True)
class EditSpec:
    source: SceneSpec
    op: EditOp
    target: SceneSpec


def apply_edit(source: SceneSpec, op: EditOp) -> SceneSpec:
    objs = list(source.objects)
    if op.kind == "recolor":
        o = objs[op.obj_index]
        objs[op.obj_index] = SceneObject(o.shape, op.color, o.cell)
    elif op.kind == "remove":
        del objs[op.obj_index]
    elif op.kind == "add":
        objs.append(op.obj)
    else:
        raise ValueError(f"unknown edit kind {op.kind!r}")
    return SceneSpec(tuple(objs), grid=source.grid, canvas=source.canvas)


def edit_instruction(spec: EditSpec) -> list[int]:
    op = spec.op
    if op.kind == "recolor":
        o = spec.source.objects[op.obj_index]
        return encode(["make", "the", o.shape, op.color])
    if op.kind == "add":
        return encode(["add", "a", op.obj.color, op.obj.shape])
    if op.kind == "remove":
        o = spec.source.objects[op.obj_index]
        return encode(["remove", "the", o.color, o.shape])
    raise ValueError(op.kind)


# ---------------------------------------------------------------------------
# sampling

def _random_cell(rng, grid, used):
    free = [(r, c) for r in range(grid) for c in range(grid) if (r, c) not in used]
    return free[rng.integers(len(free))]


def random_scene(rng, grid=2, canvas=16, max_objects=4) -> SceneSpec:
    count = int(rng.integers(1, min(max_objects, grid * grid) + 1))
    used, objs = set(), []
    for _ in range(count):
        cell = _random_cell(rng, grid, used)
        used.add(cell)
        objs.append(SceneObject(SHAPES[rng.integers(3)],
                                COLOR_NAMES[rng.integers(6)], cell))
    return SceneSpec(tuple(sorted(objs, key=lambda o: o.cell)), grid=grid, canvas=canvas)


@dataclass
class TaskCase:
    category: str
    spec: SceneSpec
    tokens: list


def sample_task(rng, category: str, grid=2, canvas=16) -> TaskCase:
    """Draw one (prompt, ground-truth scene) pair for a category."""
    def obj(shape, color, cell):
        return SceneObject(shape, color, cell)

    def two_cells_diagonal():
        r1, c1 = int(rng.integers(grid)), int(rng.integers(grid))
        others = [(r, c) for r in range(grid) for c in range(grid)
                  if r != r1 and c != c1]
        r2, c2 = others[rng.integers(len(others))]
        return (r1, c1), (r2, c2)

    if category in ("single_object", "colors"):
        spec = SceneSpec((obj(SHAPES[rng.integers(3)], COLOR_NAMES[rng.integers(6)],
                              (int(rng.integers(grid)), int(rng.integers(grid)))),),
                         grid=grid, canvas=canvas)
        return TaskCase(category, spec, caption(spec))
    if category in ("two_object", "attribute_binding"):
        s1, s2 = rng.choice(3, size=2, replace=False)
        if category == "attribute_binding":
            c1, c2 = rng.choice(6, size=2, replace=False)
        else:
            c1, c2 = rng.integers(6), rng.integers(6)
        cell1, cell2 = two_cells_diagonal()
        objs = tuple(sorted([obj(SHAPES[s1], COLOR_NAMES[c1], cell1),
                             obj(SHAPES[s2], COLOR_NAMES[c2], cell2)],
                            key=lambda o: o.cell))
        spec = SceneSpec(objs, grid=grid, canvas=canvas)
        return TaskCase(category, spec, caption(spec))
    if category == "counting":
        k = int(rng.integers(2, min(4, grid * grid) + 1))
        shape = SHAPES[rng.integers(3)]
        used, objs = set(), []
        for _ in range(k):
            cell = _random_cell(rng, grid, used)
            used.add(cell)
            objs.append(obj(shape, COLOR_NAMES[rng.integers(6)], cell))
        spec = SceneSpec(tuple(sorted(objs, key=lambda o: o.cell)), grid=grid, canvas=canvas)
        return TaskCase(category, spec, caption(spec))
    if category == "position":
        s1, s2 = rng.choice(3, size=2, replace=False)
        vertical = bool(rng.integers(2))
        a_idx, b_idx = rng.choice(grid, size=2, replace=False)
        fixed = int(rng.integers(grid))
        if vertical:
            cell1, cell2 = (int(a_idx), fixed), (int(b_idx), fixed)
        else:
            cell1, cell2 = (fixed, int(a_idx)), (fixed, int(b_idx))
        objs = tuple(sorted([obj(SHAPES[s1], COLOR_NAMES[rng.integers(6)], cell1),
                             obj(SHAPES[s2], COLOR_NAMES[rng.integers(6)], cell2)],
                            key=lambda o: o.cell))
        spec = SceneSpec(objs, grid=grid, canvas=canvas)
        return TaskCase(category, spec, caption(spec, variant=int(rng.integers(2))))
    raise ValueError(f"unknown category {category!r}")


def sample_edit(rng, grid=2, canvas=16, kinds=("recolor",)) -> EditSpec:
    kind = kinds[rng.integers(len(kinds))]
    if kind == "recolor":
        src = SceneSpec((SceneObject(SHAPES[rng.integers(3)], COLOR_NAMES[rng.integers(6)],
                                     (int(rng.integers(grid)), int(rng.integers(grid)))),),
                        grid=grid, canvas=canvas)
        old = src.objects[0].color
        new = COLOR_NAMES[rng.integers(6)]
        while new == old:
            new = COLOR_NAMES[rng.integers(6)]
        op = EditOp("recolor", obj_index=0, color=new)
    elif kind == "add":
        src = random_scene(rng, grid, canvas, max_objects=grid * grid - 1)
        used = {o.cell for o in src.objects}
        cell = _random_cell(rng, grid, used)
        op = EditOp("add", obj=SceneObject(SHAPES[rng.integers(3)],
                                           COLOR_NAMES[rng.integers(6)], cell))
    elif kind == "remove":
        src = random_scene(rng, grid, canvas, max_objects=grid * grid)
        # pick an object whose (color, shape) is unique so the instruction is unambiguous
        candidates = [i for i, o in enumerate(src.objects)
                      if sum(1 for q in src.objects
                             if (q.color, q.shape) == (o.color, o.shape)) == 1]
        if not candidates:
            return sample_edit(rng, grid, canvas, kinds)
        op = EditOp("remove", obj_index=candidates[int(rng.integers(len(candidates)))])
    else:
        raise ValueError(kind)
    return EditSpec(src, op, apply_edit(src, op))


# ---------------------------------------------------------------------------
# scoring

@dataclass
class CategoryScores:
    single_object: float
    two_object: float
    counting: float
    colors: float
    position: float
    attribute_binding: float

    @property
    def overall(self) -> float:
        return (self.single_object + self.two_object + self.counting
                + self.colors + self.position + self.attribute_binding) / 6.0

    def as_dict(self) -> dict:
        d = {c: getattr(self, c) for c in CATEGORIES}
        d["overall"] = self.overall
        return d


def score_case(case: TaskCase, parsed) -> bool:
    if parsed is None:
        return False
    gt = case.spec.objects
    objs = parsed.objects
    if case.category == "single_object":
        return any(o.shape == gt[0].shape for o in objs)
    if case.category == "colors":
        return any(o.shape == gt[0].shape and o.color == gt[0].color for o in objs)
    if case.category == "two_object":
        return all(any(o.shape == g.shape for o in objs) for g in gt)
    if case.category == "counting":
        shape = gt[0].shape
        return sum(1 for o in objs if o.shape == shape) == len(gt)
    if case.category == "position":
        g1, g2 = gt
        for o1 in objs:
            if o1.shape != g1.shape:
                continue
            for o2 in objs:
                if o2 is o1 or o2.shape != g2.shape:
                    continue
                drow = np.sign(g1.cell[0] - g2.cell[0])
                dcol = np.sign(g1.cell[1] - g2.cell[1])
                if (np.sign(o1.cell[0] - o2.cell[0]) == drow
                        and np.sign(o1.cell[1] - o2.cell[1]) == dcol):
                    return True
        return False
    if case.category == "attribute_binding":
        return all(any(o.shape == g.shape and o.color == g.color for o in objs)
                   for g in gt)
    raise ValueError(case.category)


def make_suite(seed: int, per_category: int = 64, grid=2, canvas=16) -> list[TaskCase]:
    cases = []
    for category in CATEGORIES:
        for i in range(per_category):
            rng = stream(seed, f"suite-{category}", i)
            cases.append(sample_task(rng, category, grid=grid, canvas=canvas))
    return cases


def evaluate(sample_fn, suite: list[TaskCase], grid=2):
    """Score sample_fn(case) -> image over the suite.

    Unparseable images count as failures; nothing aborts the run.
    Returns (CategoryScores, per-prompt records).
    """
    per_cat = {c: [] for c in CATEGORIES}
    records = []
    for case in suite:
        img = sample_fn(case)
        parsed = parse(img, grid=grid)
        ok = score_case(case, parsed)
        per_cat[case.category].append(ok)
        records.append({
            "category": case.category,
            "prompt": decode(case.tokens),
            "parsed": None if parsed is None else [
                {"shape": o.shape, "color": o.color, "cell": list(o.cell)}
                for o in parsed.objects],
            "success": bool(ok),
        })
    scores = CategoryScores(**{c: float(np.mean(per_cat[c])) if per_cat[c] else 0.0
                               for c in CATEGORIES})
    return scores, records


def oracle_sample_fn(case: TaskCase) -> np.ndarray:
    """Perfect model: renders the ground-truth scene behind the prompt."""
    return render(case.spec)


# ---------------------------------------------------------------------------
# dataset files

def gen_dataset(out_dir, n: int, kind: str, seed: int, grid=2, canvas=16,
                edit_kinds=("recolor", "add", "remove")) -> str:
    """Write n samples (PPM images + JSONL index); byte-deterministic in
    (n, kind, seed). Returns the index path."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if kind not in ("t2i", "edit"):
        raise ValueError(f"unknown dataset kind {kind!r}")
    os.makedirs(out_dir, exist_ok=True)
    index_path = os.path.join(out_dir, "index.jsonl")
    with open(index_path, "w") as fh:
        for i in range(n):
            rng = stream(seed, f"dataset-{kind}", i)
            if kind == "t2i":
                category = CATEGORIES[int(rng.integers(len(CATEGORIES)))]
                case = sample_task(rng, category, grid=grid, canvas=canvas)
                name = f"t2i_{i:06d}.ppm"
                try:
                    ppm.write_ppm(os.path.join(out_dir, name),
                                  ppm.model_to_01(render(case.spec)))
                except OSError as exc:
                    raise OSError(f"failed writing sample {i}: {exc}") from exc
                row = {"id": i, "kind": "t2i", "caption_ids": case.tokens,
                       "caption": decode(case.tokens), "image": name}
            else:
                es = sample_edit(rng, grid=grid, canvas=canvas, kinds=edit_kinds)
                sname, tname = f"edit_{i:06d}_src.ppm", f"edit_{i:06d}_tgt.ppm"
                instr = edit_instruction(es)
                try:
                    ppm.write_ppm(os.path.join(out_dir, sname),
                                  ppm.model_to_01(render(es.source)))
                    ppm.write_ppm(os.path.join(out_dir, tname),
                                  ppm.model_to_01(render(es.target)))
                except OSError as exc:
                    raise OSError(f"failed writing sample {i}: {exc}") from exc
                row = {"id": i, "kind": "edit", "instruction_ids": instr,
                       "instruction": decode(instr), "source": sname, "target": tname}
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return index_path
