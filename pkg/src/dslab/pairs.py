"""
Training material built from scenes: depth-text-bbox pairs for contrastive
alignment, the all-ones mask replacement sampler, and template instructions.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .benchmark import DJ_PROMPT, EPS_TIE, REC_PROMPT, object_ref, region_ref
from .errors import ConfigurationError, ContractError
from .scene import DEFAULT_OBJECT_LABELS, DepthImage, SceneRecord, region_mean_depth
from .text import ASSISTANT, USER

COMPLEX_REASONING = "ComplexReasoning"
MULTI_ROUND_DIALOGUE = "MultiRoundDialogue"
DETAILED_DESCRIPTION = "DetailedDescription"
KINDS = (COMPLEX_REASONING, MULTI_ROUND_DIALOGUE, DETAILED_DESCRIPTION)

DESCRIBE_PROMPT = "describe this depth map in detail ."
DESCRIBE_ANSWER = "this is a {scene} . it contains {objects} . from near to far : {order} ."
DESCRIBE_EMPTY = "this is a {scene} . it contains no objects ."
CLOSER_PROMPT = "which object is closer to the camera : {a} or {b} ?"
CLOSER_ANSWER = "the {near} is closer than the {far} ."
RECOGNITION_ANSWER = "{label}"
TEMPLATE_TEXTS = (DESCRIBE_PROMPT, DESCRIBE_ANSWER, DESCRIBE_EMPTY, CLOSER_PROMPT, CLOSER_ANSWER,
                  "and", USER, ASSISTANT)

Embedder = Callable[..., np.ndarray]


@dataclass(frozen=True, eq=False)
class TrainingPair:
    scene_id: str
    object_index: int  # -1 for a whole-scene pair
    depth: DepthImage
    mask: np.ndarray  # [H, W] of {0, 1}
    caption: str
    replaced: bool = False

    def validate(self) -> None:
        if self.mask.shape != self.depth.depth.shape:
            raise ContractError(f"{self.scene_id}: mask shape {self.mask.shape} != depth shape")
        if not np.isin(self.mask, (0.0, 1.0)).all():
            raise ContractError(f"{self.scene_id}: mask entries must be 0 or 1")
        if self.replaced and not (self.mask == 1.0).all():
            raise ContractError(f"{self.scene_id}: replaced pair must carry the all-ones mask")

    def to_dict(self) -> dict:
        return {"scene_id": self.scene_id, "object_index": self.object_index,
                "caption": self.caption, "replaced": self.replaced}


@dataclass
class InstructionSample:
    scene_id: str
    kind: str
    turns: list[tuple[str, str]]
    # (nearer, farther) object index pairs asserted by the assistant text
    claims: list[tuple[int, int]] = field(default_factory=list)

    def validate(self) -> None:
        if not self.turns:
            raise ContractError("instruction sample without turns")
        for k, (role, _) in enumerate(self.turns):
            if role != ("user" if k % 2 == 0 else "assistant"):
                raise ContractError(f"{self.scene_id}: turns must alternate user/assistant")
        users = sum(role == "user" for role, _ in self.turns)
        if self.kind == MULTI_ROUND_DIALOGUE and users < 2:
            raise ContractError("multi-round dialogue needs at least two user turns")
        if self.kind != MULTI_ROUND_DIALOGUE and users != 1:
            raise ContractError(f"{self.kind} has exactly one user turn")

    def to_dict(self) -> dict:
        return {"scene_id": self.scene_id, "kind": self.kind,
                "turns": [{"role": r, "text": t} for r, t in self.turns],
                "claims": [list(c) for c in self.claims]}

    @classmethod
    def from_dict(cls, d: dict) -> "InstructionSample":
        return cls(d["scene_id"], d["kind"], [(t["role"], t["text"]) for t in d["turns"]],
                   [tuple(c) for c in d.get("claims", [])])


# -- caption scoring ---------------------------------------------------------------

def score_captions(rec: SceneRecord, embed_text: Embedder, embed_depth: Embedder) -> tuple[str, list[float]]:
    """Cosine similarity of every caption with the depth image; returns the best caption."""
    if not rec.captions:
        raise ContractError(f"{rec.scene_id}: no captions to score")
    img = np.asarray(embed_depth(rec.image), dtype=np.float64)
    scores = []
    for cap in rec.captions:
        txt = np.asarray(embed_text(cap), dtype=np.float64)
        if txt.shape != img.shape:
            raise ContractError(f"embedding dimension mismatch: text {txt.shape} vs depth {img.shape}")
        denom = np.linalg.norm(txt) * np.linalg.norm(img)
        scores.append(float(txt @ img / denom) if denom > 0 else 0.0)
    best = int(np.argmax(scores))  # first maximum wins ties
    return rec.captions[best], scores


def object_mask(rec: SceneRecord, index: int) -> np.ndarray:
    if index < 0:
        return np.ones((rec.image.height, rec.image.width))
    return rec.objects[index].mask_matrix(rec.image.width, rec.image.height)


def build_pairs(scenes: Sequence[SceneRecord], embedders: tuple[Embedder, Embedder] | None,
                seed: int = 0) -> list[TrainingPair]:
    """One pair per (scene, object) sharing the scene's best caption.

    Without embedders the first caption is used. Output is ordered by scene_id
    then object index. ``seed`` is accepted for interface symmetry; the
    construction itself has no randomness.
    """
    if not scenes:
        raise ContractError("build_pairs needs at least one scene")
    pairs: list[TrainingPair] = []
    for rec in sorted(scenes, key=lambda r: r.scene_id):
        caption = score_captions(rec, *embedders)[0] if embedders else rec.captions[0]
        indices = range(len(rec.objects)) if rec.objects else [-1]
        for k in indices:
            pairs.append(TrainingPair(rec.scene_id, k, rec.image, object_mask(rec, k), caption, False))
    return pairs


def pairs_from_records(rows: Sequence[dict], scenes: Sequence[SceneRecord]) -> list[TrainingPair]:
    """Rebuild pairs from their JSONL rows and the scene files they reference."""
    by_id = {r.scene_id: r for r in scenes}
    out = []
    for row in rows:
        rec = by_id[row["scene_id"]]
        k = int(row["object_index"])
        replaced = bool(row.get("replaced", False))
        mask = np.ones((rec.image.height, rec.image.width)) if replaced else object_mask(rec, k)
        out.append(TrainingPair(rec.scene_id, k, rec.image, mask, row["caption"], replaced))
    return out


def apply_sampling(pairs: Sequence[TrainingPair], r: float, seed: int) -> list[TrainingPair]:
    """Independently, with probability r, swap a pair's mask for the all-ones mask."""
    if not 0.0 <= r <= 1.0:
        raise ConfigurationError(f"sample ratio {r} outside [0, 1]")
    draws = np.random.default_rng(seed).random(len(pairs)) < r
    out = []
    for pair, hit in zip(pairs, draws):
        if hit:
            out.append(replace(pair, mask=np.ones_like(pair.mask), replaced=True))
        else:
            out.append(pair)
    return out


# -- instruction synthesis ----------------------------------------------------------

def _ordered_pairs(rec: SceneRecord, depths: list[float]) -> list[tuple[int, int]]:
    return [(i, j) for i, j in itertools.combinations(range(len(depths)), 2)
            if abs(depths[i] - depths[j]) >= EPS_TIE and object_ref(rec, i) != object_ref(rec, j)]


def _join_labels(labels: list[str]) -> str:
    items = [f"a {lab}" for lab in labels]
    if len(items) == 1:
        return items[0]
    return " , ".join(items[:-1]) + " and " + items[-1]


def synth_instructions(rec: SceneRecord, seed: int, per_kind: int = 1,
                       object_labels: Sequence[str] = DEFAULT_OBJECT_LABELS) -> list[InstructionSample]:
    """Template-filled instruction samples whose answers follow from the scene itself."""
    rng = np.random.default_rng(seed)
    depths = [region_mean_depth(rec.image, o) for o in rec.objects]
    out: list[InstructionSample] = []
    pairs = _ordered_pairs(rec, depths)

    for _ in range(per_kind if pairs else 0):
        i, j = pairs[int(rng.integers(len(pairs)))]
        a, b = (i, j) if rng.random() < 0.5 else (j, i)
        near, far = (a, b) if depths[a] < depths[b] else (b, a)
        if rng.random() < 0.5:
            prompt = CLOSER_PROMPT.format(a=object_ref(rec, a), b=object_ref(rec, b))
            answer = CLOSER_ANSWER.format(near=object_ref(rec, near), far=object_ref(rec, far))
        else:
            prompt = DJ_PROMPT.format(a=object_ref(rec, a), b=object_ref(rec, b))
            answer = object_ref(rec, far)
        out.append(InstructionSample(rec.scene_id, COMPLEX_REASONING,
                                     [("user", prompt), ("assistant", answer)], [(near, far)]))

    for _ in range(per_kind if pairs else 0):
        i, j = pairs[int(rng.integers(len(pairs)))]
        target = i if rng.random() < 0.5 else j
        truth = rec.objects[target].label
        pool = [o for o in object_labels if o != truth]
        opts = [truth] + [pool[k] for k in rng.choice(len(pool), size=3, replace=False)]
        opts = [opts[k] for k in rng.permutation(4)]
        q1 = REC_PROMPT.format(region=region_ref(rec, target), options=" , ".join(opts))
        a, b = (i, j) if rng.random() < 0.5 else (j, i)
        near, far = (a, b) if depths[a] < depths[b] else (b, a)
        q2 = DJ_PROMPT.format(a=object_ref(rec, a), b=object_ref(rec, b))
        out.append(InstructionSample(rec.scene_id, MULTI_ROUND_DIALOGUE, [
            ("user", q1), ("assistant", RECOGNITION_ANSWER.format(label=truth)),
            ("user", q2), ("assistant", object_ref(rec, far)),
        ], [(near, far)]))

    if rec.objects:
        order = sorted(range(len(depths)), key=lambda k: (depths[k], k))
        answer = DESCRIBE_ANSWER.format(scene=rec.scene_label,
                                        objects=_join_labels([o.label for o in rec.objects]),
                                        order=" , ".join(rec.objects[k].label for k in order))
        claims = [(order[k], order[k + 1]) for k in range(len(order) - 1)]
    else:
        answer, claims = DESCRIBE_EMPTY.format(scene=rec.scene_label), []
    out.append(InstructionSample(rec.scene_id, DETAILED_DESCRIPTION,
                                 [("user", DESCRIBE_PROMPT), ("assistant", answer)], claims))
    return out


def synth_instruction_set(scenes: Sequence[SceneRecord], seed: int, per_kind: int = 1,
                          object_labels: Sequence[str] = DEFAULT_OBJECT_LABELS) -> list[InstructionSample]:
    """Instruction samples for a scene list; scene k draws from its own stream spawned from ``seed``."""
    out: list[InstructionSample] = []
    for k, rec in enumerate(scenes):
        rec_seed = int(np.random.SeedSequence([seed, k]).generate_state(1)[0])
        out.extend(synth_instructions(rec, rec_seed, per_kind, object_labels))
    return out
