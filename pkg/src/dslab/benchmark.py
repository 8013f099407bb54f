"""
Depth Template Benchmark: four multiple-choice sub-tasks built from scenes, and
a free-text scorer.

Item generators are pure functions of (scene, seed). ``build_benchmark`` fills
per-task quotas round-robin over scenes, cycling through each scene's eligible
slots so small scene sets can still satisfy large quotas.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, ResourceError
from .scene import DEFAULT_OBJECT_LABELS, DEFAULT_SCENE_LABELS, SceneRecord, region_mean_depth

SCENE_CLASSIFICATION = "SceneClassification"
RECOGNITION = "Recognition"
DISTANCE_JUDGE = "DistanceJudge"
SECURITY = "Security"
TASKS = (SCENE_CLASSIFICATION, RECOGNITION, DISTANCE_JUDGE, SECURITY)
CANDIDATE_COUNT = {SCENE_CLASSIFICATION: 3, RECOGNITION: 4, DISTANCE_JUDGE: 2, SECURITY: 4}
_ID_PREFIX = {SCENE_CLASSIFICATION: "sc", RECOGNITION: "rec", DISTANCE_JUDGE: "dj", SECURITY: "sec"}

TABLE1_QUOTAS = {SCENE_CLASSIFICATION: 1786, RECOGNITION: 3793, DISTANCE_JUDGE: 5737, SECURITY: 2157}
EPS_TIE = 0.05

SC_PROMPT = "what type of scene is shown in this depth map ? options : {options} ."
REC_PROMPT = "what object is located in region {region} of this depth map ? options : {options} ."
DJ_PROMPT = "which object is farther from the viewpoint : {a} or {b} ?"
SEC_PROMPT = "which of these objects does not appear in this depth map ? options : {options} ."


@dataclass
class QaItem:
    item_id: str
    task: str
    prompt: str
    candidates: list[str]
    answer_index: int
    provenance: dict = field(default_factory=dict)

    @property
    def answer(self) -> str:
        return self.candidates[self.answer_index]

    def validate(self) -> None:
        if self.task not in CANDIDATE_COUNT:
            raise ContractError(f"{self.item_id}: unknown task {self.task!r}")
        if len(self.candidates) != CANDIDATE_COUNT[self.task]:
            raise ContractError(f"{self.item_id}: {self.task} needs {CANDIDATE_COUNT[self.task]} candidates")
        if not 0 <= self.answer_index < len(self.candidates):
            raise ContractError(f"{self.item_id}: answer_index out of range")
        if len(set(self.candidates)) != len(self.candidates):
            raise ContractError(f"{self.item_id}: duplicate candidates")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "QaItem":
        return cls(d["item_id"], d["task"], d["prompt"], list(d["candidates"]), int(d["answer_index"]),
                   dict(d.get("provenance", {})))


@dataclass
class BenchmarkStats:
    counts: dict[str, int]
    percentages: dict[str, float]
    total: int

    @classmethod
    def from_items(cls, items: Sequence[QaItem]) -> "BenchmarkStats":
        counts = {t: 0 for t in TASKS}
        for item in items:
            counts[item.task] += 1
        total = sum(counts.values())
        pct = {t: round(100.0 * c / total, 2) if total else 0.0 for t, c in counts.items()}
        return cls(counts, pct, total)

    def to_dict(self) -> dict:
        return {"counts": self.counts, "percentages": self.percentages, "total": self.total}


def region_ref(rec: SceneRecord, obj_index: int) -> str:
    """Normalised bbox as ``[x0,y0,x1,y1]`` with two decimals."""
    x, y, w, h = rec.objects[obj_index].bbox
    W, H = rec.image.width, rec.image.height
    return "[{:.2f},{:.2f},{:.2f},{:.2f}]".format(x / W, y / H, (x + w) / W, (y + h) / H)


def object_ref(rec: SceneRecord, obj_index: int) -> str:
    """Label followed by its normalised bbox, e.g. ``chair [0.10,0.20,0.30,0.40]``."""
    return f"{rec.objects[obj_index].label} {region_ref(rec, obj_index)}"


def _options(cands: Sequence[str]) -> str:
    return " , ".join(cands)


def _shuffled(rng: np.random.Generator, truth: str, distractors: Sequence[str]) -> tuple[list[str], int]:
    cands = [truth, *distractors]
    order = rng.permutation(len(cands))
    cands = [cands[i] for i in order]
    return cands, int(np.flatnonzero(order == 0)[0])


def gen_scene_classification(rec: SceneRecord, rng_seed: int, scene_labels: Sequence[str] = DEFAULT_SCENE_LABELS,
                             item_id: str | None = None) -> QaItem:
    if len(set(scene_labels)) < 3:
        raise ConfigurationError("scene classification needs a vocabulary of at least 3 labels")
    rng = np.random.default_rng(rng_seed)
    pool = [s for s in scene_labels if s != rec.scene_label]
    picks = rng.choice(len(pool), size=2, replace=False)
    cands, answer = _shuffled(rng, rec.scene_label, [pool[i] for i in picks])
    return QaItem(item_id or f"sc-{rec.scene_id}", SCENE_CLASSIFICATION, SC_PROMPT.format(options=_options(cands)),
                  cands, answer, {"scene_id": rec.scene_id, "objects": []})


def gen_recognition(rec: SceneRecord, object_index: int, rng_seed: int,
                    object_labels: Sequence[str] = DEFAULT_OBJECT_LABELS, item_id: str | None = None) -> QaItem:
    if not rec.objects:
        raise ContractError(f"{rec.scene_id}: recognition needs at least one object")
    if len(set(object_labels)) < 4:
        raise ConfigurationError("recognition needs an object vocabulary of at least 4 labels")
    truth = rec.objects[object_index].label
    rng = np.random.default_rng(rng_seed)
    pool = [o for o in object_labels if o != truth]
    picks = rng.choice(len(pool), size=3, replace=False)
    cands, answer = _shuffled(rng, truth, [pool[i] for i in picks])
    prompt = REC_PROMPT.format(region=region_ref(rec, object_index), options=_options(cands))
    return QaItem(item_id or f"rec-{rec.scene_id}-{object_index}", RECOGNITION, prompt, cands, answer,
                  {"scene_id": rec.scene_id, "objects": [object_index]})


def gen_distance_judge(rec: SceneRecord, i: int, j: int, rng_seed: int, eps_tie: float = EPS_TIE,
                       item_id: str | None = None) -> QaItem | None:
    """Which of objects i and j is farther; None when their mean depths are within ``eps_tie``."""
    if i == j or not (0 <= i < len(rec.objects) and 0 <= j < len(rec.objects)):
        raise ContractError(f"{rec.scene_id}: distance judge needs two distinct valid objects, got {i}, {j}")
    di = region_mean_depth(rec.image, rec.objects[i])
    dj = region_mean_depth(rec.image, rec.objects[j])
    if abs(di - dj) < eps_tie:
        return None
    far, near = (i, j) if di > dj else (j, i)
    truth, other = object_ref(rec, far), object_ref(rec, near)
    if truth == other:
        return None
    rng = np.random.default_rng(rng_seed)
    cands, answer = _shuffled(rng, truth, [other])
    prompt = DJ_PROMPT.format(a=cands[0], b=cands[1])
    return QaItem(item_id or f"dj-{rec.scene_id}-{i}-{j}", DISTANCE_JUDGE, prompt, cands, answer,
                  {"scene_id": rec.scene_id, "objects": sorted([i, j])})


def gen_security(rec: SceneRecord, rng_seed: int, object_labels: Sequence[str] = DEFAULT_OBJECT_LABELS,
                 item_id: str | None = None) -> QaItem | None:
    """Three present labels plus one absent; None if either side is unavailable."""
    present = sorted({o.label for o in rec.objects})
    absent = [o for o in object_labels if o not in present]
    if len(present) < 3 or not absent:
        return None
    rng = np.random.default_rng(rng_seed)
    picks = rng.choice(len(present), size=3, replace=False)
    truth = absent[int(rng.integers(len(absent)))]
    cands, answer = _shuffled(rng, truth, [present[k] for k in sorted(picks)])
    return QaItem(item_id or f"sec-{rec.scene_id}", SECURITY, SEC_PROMPT.format(options=_options(cands)), cands,
                  answer, {"scene_id": rec.scene_id, "objects": []})


def _item_seed(seed: int, task_index: int, n: int) -> int:
    return int(np.random.SeedSequence([seed, task_index, n]).generate_state(1)[0])


def _normalize_quotas(quotas) -> dict[str, int]:
    if isinstance(quotas, Mapping):
        q = {t: int(quotas.get(t, 0)) for t in TASKS}
    else:
        q = dict(zip(TASKS, (int(v) for v in quotas)))
    if any(v < 0 for v in q.values()):
        raise ConfigurationError("quotas must be non-negative")
    return q


def scaled_quotas(total: int) -> dict[str, int]:
    """Table 1 proportions scaled to roughly ``total`` items."""
    whole = sum(TABLE1_QUOTAS.values())
    return {t: max(1, round(total * c / whole)) for t, c in TABLE1_QUOTAS.items()}


def build_benchmark(scenes: Sequence[SceneRecord], quotas, seed: int,
                    scene_labels: Sequence[str] = DEFAULT_SCENE_LABELS,
                    object_labels: Sequence[str] = DEFAULT_OBJECT_LABELS,
                    eps_tie: float = EPS_TIE) -> tuple[list[QaItem], BenchmarkStats]:
    quotas = _normalize_quotas(quotas)
    slots: dict[str, list[list[tuple]]] = {t: [] for t in TASKS}
    for rec in scenes:
        slots[SCENE_CLASSIFICATION].append([(rec,)])
        slots[RECOGNITION].append([(rec, k) for k in range(len(rec.objects))])
        depths = [region_mean_depth(rec.image, o) for o in rec.objects]
        slots[DISTANCE_JUDGE].append([(rec, i, j) for i, j in itertools.combinations(range(len(depths)), 2)
                                      if abs(depths[i] - depths[j]) >= eps_tie
                                      and object_ref(rec, i) != object_ref(rec, j)])
        labels = {o.label for o in rec.objects}
        ok = len(labels) >= 3 and any(o not in labels for o in object_labels)
        slots[SECURITY].append([(rec,)] if ok else [])

    items: list[QaItem] = []
    for t_index, task in enumerate(TASKS):
        need = quotas[task]
        if need == 0:
            continue
        per_scene = [s for s in slots[task] if s]
        if not per_scene:
            raise ResourceError(f"quota for {task} unsatisfiable: no eligible scene among {len(scenes)}")
        n = 0
        for p in itertools.count():
            for scene_slots in per_scene:
                if n == need:
                    break
                slot = scene_slots[p % len(scene_slots)]
                rs = _item_seed(seed, t_index, n)
                iid = f"{_ID_PREFIX[task]}-{n:05d}"
                rec = slot[0]
                if task == SCENE_CLASSIFICATION:
                    item = gen_scene_classification(rec, rs, scene_labels, iid)
                elif task == RECOGNITION:
                    item = gen_recognition(rec, slot[1], rs, object_labels, iid)
                elif task == DISTANCE_JUDGE:
                    item = gen_distance_judge(rec, slot[1], slot[2], rs, eps_tie, iid)
                else:
                    item = gen_security(rec, rs, object_labels, iid)
                assert item is not None  # slots are pre-filtered
                items.append(item)
                n += 1
            if n == need:
                break
    return items, BenchmarkStats.from_items(items)


# -- scoring --------------------------------------------------------------------

def _matches(candidate: str, response: str) -> bool:
    pattern = r"(?<!\w)" + re.escape(candidate.lower()) + r"(?!\w)"
    return re.search(pattern, response.lower()) is not None


def classify_response(item: QaItem, response: str | None) -> str:
    """One of: correct, wrong, ambiguous, no_match, missing."""
    if response is None:
        return "missing"
    if not isinstance(response, str):
        return "no_match"
    hits = [k for k, c in enumerate(item.candidates) if _matches(c, response)]
    if not hits:
        return "no_match"
    if len(hits) > 1:
        return "ambiguous"
    return "correct" if hits[0] == item.answer_index else "wrong"


@dataclass
class ScoreReport:
    accuracy: dict[str, float | None]
    macro_average: float | None
    counts: dict[str, int]
    correct: dict[str, int]
    confusion: dict[str, dict[str, int]]
    missing: list[str]

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "accuracy_percent": {t: (None if a is None else round(100 * a, 2)) for t, a in self.accuracy.items()},
            "macro_average": self.macro_average,
            "macro_average_percent": None if self.macro_average is None else round(100 * self.macro_average, 2),
            "counts": self.counts,
            "correct": self.correct,
            "confusion": self.confusion,
            "missing": self.missing,
        }


def score_answers(items: Iterable[QaItem], responses: Mapping[str, str]) -> ScoreReport:
    """Per-task accuracy and their unweighted mean; missing responses count as wrong."""
    outcomes = ("correct", "wrong", "ambiguous", "no_match", "missing")
    confusion = {t: {o: 0 for o in outcomes} for t in TASKS}
    missing = []
    for item in items:
        resp = responses.get(item.item_id)
        if resp is None:
            missing.append(item.item_id)
        confusion[item.task][classify_response(item, resp)] += 1
    counts = {t: sum(confusion[t].values()) for t in TASKS}
    correct = {t: confusion[t]["correct"] for t in TASKS}
    acc = {t: (correct[t] / counts[t] if counts[t] else None) for t in TASKS}
    present = [a for a in acc.values() if a is not None]
    macro = sum(present) / len(present) if present else None
    return ScoreReport(acc, macro, counts, correct, confusion, missing)


def write_benchmark(path, items: Sequence[QaItem]) -> None:
    from .io import write_jsonl

    write_jsonl(path, [it.to_dict() for it in items])


def read_benchmark(path) -> list[QaItem]:
    from .io import read_jsonl

    return [QaItem.from_dict(d) for d in read_jsonl(path)]


def read_responses(path) -> dict[str, str]:
    from .io import read_jsonl

    return {str(d["item_id"]): d.get("text") for d in read_jsonl(path)}
