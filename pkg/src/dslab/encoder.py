"""
Dual-stream depth encoder and text tower trained with a symmetric contrastive loss.

The vision side projects the normalised depth map and the binary object mask
through two separate patch projections and adds the resulting token matrices
before a class token and learned positions are attached. At inference the mask
defaults to all ones.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, ConfigurationError, TrainingError
from .layers import Block, LayerNorm, Linear, load_into
from .scene import DepthImage, SceneRecord
from .tensor import ParamGroup, Tensor
from .text import PAD, Vocab

ZERO_SHOT_TEMPLATE = "a depth map of a {label}"


@dataclass
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 8
    dim: int = 64
    vision_layers: int = 2
    text_layers: int = 2
    heads: int = 2
    mlp_ratio: int = 2
    max_text_len: int = 16
    tau_init: float = 0.07
    lr: float = 0.01
    epochs: int = 40
    batch_size: int = 16
    sample_ratio: float = 0.1
    freeze_text: bool = False
    lr_schedule: str = "cosine"  # lr * (1 + cos(pi * step / steps)) / 2, or "constant"

    def validate(self) -> None:
        if self.image_size % self.patch_size:
            raise ConfigurationError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        for f in ("image_size", "patch_size", "dim", "vision_layers", "text_layers", "heads",
                  "mlp_ratio", "max_text_len", "epochs", "batch_size"):
            if getattr(self, f) < 1:
                raise ConfigurationError(f"{f} must be >= 1")
        if self.dim % self.heads:
            raise ConfigurationError("dim must be divisible by heads")
        if not 0 <= self.sample_ratio <= 1:
            raise ConfigurationError("sample_ratio must lie in [0, 1]")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigurationError("lr_schedule must be 'constant' or 'cosine'")
        if self.lr < 0 or self.tau_init <= 0:
            raise ConfigurationError("lr must be >= 0 and tau_init > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown encoder keys: {sorted(unknown)}")
        return cls(**d)


class DualEncoder:
    def __init__(self, config: EncoderConfig, vocab: Vocab, seed: int = 0):
        config.validate()
        self.config = config
        self.vocab = vocab
        rng = np.random.default_rng(seed)
        D, p = config.dim, config.patch_size
        n_tok = (config.image_size // p) ** 2
        fan = p * p
        # vision
        self.depth_w = T.init_uniform(rng, (D, 1, p, p), fan)
        self.depth_b = T.zeros_param((D,))
        self.bbox_w = T.init_uniform(rng, (D, 1, p, p), fan)
        self.bbox_b = T.zeros_param((D,))
        self.cls = T.init_uniform(rng, (1, 1, D), D)
        self.vpos = T.init_uniform(rng, (1, n_tok + 1, D), D)
        self.vblocks = [Block(rng, D, config.heads, config.mlp_ratio) for _ in range(config.vision_layers)]
        self.vln = LayerNorm(D)
        self.vproj = Linear(rng, D, D, bias=False)
        # text
        self.tok = T.init_uniform(rng, (len(vocab), D), D)
        self.tpos = T.init_uniform(rng, (1, config.max_text_len, D), D)
        self.tblocks = [Block(rng, D, config.heads, config.mlp_ratio) for _ in range(config.text_layers)]
        self.tln = LayerNorm(D)
        self.tproj = Linear(rng, D, D, bias=False)
        self.log_tau = Tensor(np.array(math.log(config.tau_init)), requires_grad=True)
        self._groups = self._make_groups()

    def _make_groups(self) -> list[ParamGroup]:
        return [
            ParamGroup("vision.depth_conv", [self.depth_w, self.depth_b]),
            ParamGroup("vision.bbox_conv", [self.bbox_w, self.bbox_b]),
            ParamGroup("vision.embed", [self.cls, self.vpos]),
            ParamGroup("vision.blocks", [t for b in self.vblocks for t in b.params()]),
            ParamGroup("vision.head", self.vln.params() + self.vproj.params()),
            ParamGroup("text.embed", [self.tok, self.tpos]),
            ParamGroup("text.blocks", [t for b in self.tblocks for t in b.params()]),
            ParamGroup("text.head", self.tln.params() + self.tproj.params()),
            ParamGroup("text.temperature", [self.log_tau]),
        ]

    # -- parameter groups -----------------------------------------------------------
    def groups(self) -> list[ParamGroup]:
        return self._groups

    def group(self, name: str) -> ParamGroup:
        for g in self._groups:
            if g.name == name:
                return g
        raise KeyError(name)

    def vision_groups(self) -> list[ParamGroup]:
        return [g for g in self._groups if g.name.startswith("vision.")]

    def text_groups(self) -> list[ParamGroup]:
        return [g for g in self._groups if g.name.startswith("text.")]

    def set_frozen(self, prefix: str, frozen: bool) -> None:
        for g in self._groups:
            if g.name.startswith(prefix):
                g.frozen = frozen

    def load_groups(self, groups: Sequence[ParamGroup]) -> None:
        by_name = {g.name: g for g in groups}
        for g in self._groups:
            if g.name not in by_name:
                raise ContractError(f"checkpoint lacks group {g.name!r}")
            load_into(g.tensors, by_name[g.name].tensors)
            g.frozen = by_name[g.name].frozen

    # -- forward passes ----------------------------------------------------------------
    def vision_tokens(self, depth: np.ndarray | Tensor, mask: np.ndarray | Tensor) -> Tensor:
        """Final-layer token features [B, 1 + n_patches, D] (class token first)."""
        depth = T._lift(depth)
        mask = T._lift(mask)
        if depth.shape != mask.shape:
            raise ContractError(f"mask shape {mask.shape} != depth shape {depth.shape}")
        B = depth.shape[0]
        h_d = T.patch_project(depth.reshape(B, 1, *depth.shape[1:]), self.depth_w, self.depth_b)
        h_m = T.patch_project(mask.reshape(B, 1, *mask.shape[1:]), self.bbox_w, self.bbox_b)
        h_v = h_d + h_m
        cls = self.cls + Tensor(np.zeros((B, 1, self.config.dim)))
        x = T.concat([cls, h_v], axis=1) + self.vpos
        for blk in self.vblocks:
            x = blk(x)
        return self.vln(x)

    def vision_features(self, depth, mask) -> Tensor:
        """Unit-norm image embeddings [B, D] from normalised depth [B, H, W] and masks."""
        tokens = self.vision_tokens(depth, mask)
        return T.l2_normalize(self.vproj(tokens[:, 0, :]))

    def token_ids(self, texts: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        L = self.config.max_text_len
        rows = []
        for text in texts:
            ids = self.vocab.encode(text)[:L]
            if not ids:
                raise ContractError("cannot encode empty text")
            rows.append(ids)
        width = max(len(r) for r in rows)
        ids = np.full((len(rows), width), self.vocab.id(PAD), dtype=np.int64)
        valid = np.zeros((len(rows), width))
        for i, r in enumerate(rows):
            ids[i, :len(r)] = r
            valid[i, :len(r)] = 1.0
        return ids, valid

    def text_features(self, texts: Sequence[str]) -> Tensor:
        ids, valid = self.token_ids(texts)
        B, L = ids.shape
        x = T.embedding(self.tok, ids) + self.tpos[:, :L, :]
        key_mask = ((1.0 - valid) * -1e9)[:, None, None, :]
        for blk in self.tblocks:
            x = blk(x, key_mask)
        x = self.tln(x)
        w = valid / valid.sum(axis=1, keepdims=True)
        pooled = (x * w[:, :, None]).sum(axis=1)
        return T.l2_normalize(self.tproj(pooled))

    def encode_vision(self, depth: DepthImage, mask: np.ndarray | None = None) -> np.ndarray:
        m = np.ones_like(depth.depth) if mask is None else np.asarray(mask, dtype=np.float64)
        if m.shape != depth.depth.shape:
            raise ContractError(f"mask shape {m.shape} != depth shape {depth.depth.shape}")
        with T.no_grad():
            return self.vision_features(depth.normalized()[None], m[None]).data[0]

    def encode_text(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise ContractError("cannot encode empty text")
        with T.no_grad():
            return self.text_features([text]).data[0]

    def embedders(self):
        return self.encode_text, self.encode_vision

    def batch_loss(self, depth: np.ndarray, mask: np.ndarray, captions: Sequence[str]) -> Tensor:
        v = self.vision_features(depth, mask)
        t = self.text_features(captions)
        return contrastive_loss(v, t, self.log_tau)

    # -- persistence -------------------------------------------------------------------
    def save(self, directory: str | Path, name: str = "encoder") -> None:
        from .io import write_json

        directory = Path(directory)
        T.save_checkpoint(directory / f"{name}.ckpt", self._groups)
        write_json(directory / f"{name}.json", {"config": asdict(self.config), "vocab": self.vocab.to_list()})

    @classmethod
    def load(cls, directory: str | Path, name: str = "encoder") -> "DualEncoder":
        from .io import read_json

        directory = Path(directory)
        meta = read_json(directory / f"{name}.json")
        model = cls(EncoderConfig.from_dict(meta["config"]), Vocab.from_list(meta["vocab"]))
        model.load_groups(T.load_checkpoint(directory / f"{name}.ckpt"))
        return model


def contrastive_loss(vision: Tensor, text: Tensor, log_tau: Tensor) -> Tensor:
    """Symmetric InfoNCE: mean of image->text and text->image cross-entropy on logits V T^T / tau."""
    n = vision.shape[0]
    if n == 0:
        raise ContractError("contrastive loss needs at least one pair")
    if vision.shape != text.shape:
        raise ContractError(f"embedding shapes differ: {vision.shape} vs {text.shape}")
    logits = (vision @ text.T) * T.texp(-log_tau)
    target = np.arange(n)
    return (T.softmax_cross_entropy(logits, target) + T.softmax_cross_entropy(logits.T, target)) * 0.5


# -- training ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    wall_time: float


def _stack(pairs) -> tuple[np.ndarray, np.ndarray, list[str]]:
    depth = np.stack([p.depth.normalized() for p in pairs])
    mask = np.stack([p.mask for p in pairs])
    return depth, mask, [p.caption for p in pairs]


def train_encoder(pairs: Sequence, config: EncoderConfig, seed: int, vocab: Vocab,
                  model: DualEncoder | None = None) -> tuple[DualEncoder, list[EpochRecord]]:
    """Minibatch SGD over shuffled pairs; mask sampling is expected upstream."""
    if not pairs:
        raise ContractError("train_encoder needs at least one pair")
    model = model or DualEncoder(config, vocab, seed)
    model.set_frozen("vision.", False)
    model.set_frozen("text.", config.freeze_text)
    groups = model.groups()
    rng = np.random.default_rng(seed + 1)
    curve: list[EpochRecord] = []
    step = 0
    total = config.epochs * -(-len(pairs) // config.batch_size)
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        order = rng.permutation(len(pairs))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [pairs[i] for i in order[start:start + config.batch_size]]
            depth, mask, caps = _stack(batch)
            loss = model.batch_loss(depth, mask, caps)
            if not np.isfinite(loss.item()):
                raise TrainingError(f"non-finite contrastive loss at step {step}")
            loss.backward()
            lr = config.lr
            if config.lr_schedule == "cosine":
                lr *= 0.5 * (1.0 + math.cos(math.pi * step / total))
            T.sgd_step(groups, lr)
            losses.append(loss.item())
            step += 1
        curve.append(EpochRecord(epoch + 1, float(np.mean(losses)), time.perf_counter() - t0))
    return model, curve


def curve_csv(curve: Sequence[EpochRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "mean_loss", "wall_time_s"])
    for rec in curve:
        w.writerow([rec.epoch, f"{rec.mean_loss:.10f}", f"{rec.wall_time:.3f}"])
    return buf.getvalue()


# -- zero-shot ---------------------------------------------------------------------------

def zero_shot_classify(model: DualEncoder, depth: DepthImage, labels: Sequence[str],
                       prompt_template: str = ZERO_SHOT_TEMPLATE) -> tuple[str, np.ndarray]:
    """Nearest label prompt to the image embedding under the all-ones mask."""
    if not labels:
        raise ContractError("zero-shot classification needs at least one label")
    img = model.encode_vision(depth)
    with T.no_grad():
        txt = model.text_features([prompt_template.format(label=l) for l in labels]).data
    scores = txt @ img
    return labels[int(np.argmax(scores))], scores


def zero_shot_accuracy(model: DualEncoder, scenes: Sequence[SceneRecord], labels: Sequence[str],
                       prompt_template: str = ZERO_SHOT_TEMPLATE, batch_size: int = 64) -> tuple[float, list[str]]:
    with T.no_grad():
        txt = model.text_features([prompt_template.format(label=l) for l in labels]).data
        preds: list[str] = []
        for start in range(0, len(scenes), batch_size):
            chunk = scenes[start:start + batch_size]
            depth = np.stack([s.image.normalized() for s in chunk])
            img = model.vision_features(depth, np.ones_like(depth)).data
            preds.extend(labels[int(k)] for k in np.argmax(img @ txt.T, axis=1))
    correct = sum(p == s.scene_label for p, s in zip(preds, scenes))
    return correct / len(scenes), preds


def curve_to_json(curve: Sequence[EpochRecord]) -> str:
    return json.dumps([asdict(c) for c in curve])


def train_caption_scorer(scenes: Sequence[SceneRecord], config: EncoderConfig, seed: int,
                         vocab: Vocab) -> DualEncoder:
    """Encoder trained on every (scene, caption) pair under the all-ones mask.

    Used to rank a scene's captions when no pretrained scorer is supplied.
    """
    from .pairs import TrainingPair

    pool = [TrainingPair(r.scene_id, -1, r.image, np.ones_like(r.image.depth), c, True)
            for r in scenes for c in r.captions]
    model, _ = train_encoder(pool, config, seed, vocab)
    return model
