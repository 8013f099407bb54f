"""
Depth-conditioned toy language model: a frozen depth encoder, an MLP projection
into the LM's token space, and a small causal decoder.

Training runs in two stages. Alignment trains only the projection on captions;
SFT trains the projection and the LM on instruction dialogues. The encoder is
frozen in both, including its temperature.
"""

from __future__ import annotations

import copy
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .benchmark import DISTANCE_JUDGE, QaItem, score_answers
from .encoder import DualEncoder, EpochRecord
from .errors import ConfigurationError, ContractError, TrainingError
from .layers import Block, LayerNorm, Linear, causal_mask, load_into
from .pairs import InstructionSample, TrainingPair
from .scene import SceneRecord
from .tensor import ParamGroup, Tensor
from .text import ASSISTANT, BOS, EOS, PAD, USER, Vocab

ALIGNMENT = "Alignment"
SFT = "SFT"


@dataclass
class LMConfig:
    dim: int = 64
    layers: int = 2
    heads: int = 2
    mlp_ratio: int = 2
    context: int = 128
    image_tokens: str = "cls"  # "cls": one projected token; "patches": one per patch
    lr: float = 0.25
    align_lr: float = 0.25
    pretrain_epochs: int = 10
    align_epochs: int = 3
    sft_epochs: int = 10
    batch_size: int = 16

    def validate(self) -> None:
        if self.image_tokens not in ("cls", "patches"):
            raise ConfigurationError("image_tokens must be 'cls' or 'patches'")
        if self.dim % self.heads:
            raise ConfigurationError("LM dim must be divisible by heads")
        for f in ("dim", "layers", "heads", "context", "batch_size"):
            if getattr(self, f) < 1:
                raise ConfigurationError(f"{f} must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "LMConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown lm keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class StagePolicy:
    stage: str
    encoder_frozen: bool = True
    projection_frozen: bool = False
    lm_frozen: bool = True

    def validate(self) -> None:
        if self.stage == ALIGNMENT:
            if not (self.encoder_frozen and self.lm_frozen and not self.projection_frozen):
                raise ConfigurationError("alignment trains the projection only")
        elif self.stage == SFT:
            if not self.encoder_frozen:
                raise ConfigurationError("SFT keeps the depth encoder frozen")
            if self.projection_frozen and self.lm_frozen:
                raise ConfigurationError("SFT must train the projection, the LM, or both")
        else:
            raise ConfigurationError(f"unknown stage {self.stage!r}")

    @classmethod
    def alignment(cls) -> "StagePolicy":
        return cls(ALIGNMENT, True, False, True)

    @classmethod
    def sft(cls, which: str = "both") -> "StagePolicy":
        flags = {"both": (False, False), "mlp_only": (False, True), "llm_only": (True, False)}
        if which not in flags:
            raise ConfigurationError(f"unknown SFT variant {which!r}")
        return cls(SFT, True, *flags[which])


class ProjectionMLP:
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int):
        self.fc1 = Linear(rng, d_in, d_out)
        self.fc2 = Linear(rng, d_out, d_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))

    def params(self) -> list[Tensor]:
        return self.fc1.params() + self.fc2.params()


class ToyLM:
    """Causal decoder with the output head tied to the token embedding."""

    def __init__(self, rng: np.random.Generator, vocab_size: int, config: LMConfig):
        E = config.dim
        self.config = config
        self.tok = T.init_uniform(rng, (vocab_size, E), E)
        self.pos = T.init_uniform(rng, (1, config.context, E), E)
        self.blocks = [Block(rng, E, config.heads, config.mlp_ratio) for _ in range(config.layers)]
        self.ln_f = LayerNorm(E)

    def logits(self, x: Tensor) -> Tensor:
        """Input embeddings [B, L, E] -> next-token logits [B, L, V]."""
        L = x.shape[1]
        x = x + self.pos[:, :L, :]
        mask = causal_mask(L)
        for blk in self.blocks:
            x = blk(x, mask)
        return self.ln_f(x) @ self.tok.T

    def params(self) -> list[Tensor]:
        return [self.tok, self.pos] + [t for b in self.blocks for t in b.params()] + self.ln_f.params()


@dataclass
class TokenSequence:
    ids: list[int]
    supervised: list[bool]


class DepthLM:
    def __init__(self, encoder: DualEncoder, config: LMConfig, seed: int = 0, vocab: Vocab | None = None):
        config.validate()
        self.encoder = encoder
        self.config = config
        self.vocab = vocab or encoder.vocab
        rng = np.random.default_rng(seed)
        self.projection = ProjectionMLP(rng, encoder.config.dim, config.dim)
        self.lm = ToyLM(rng, len(self.vocab), config)
        self.projection_group = ParamGroup("projection", self.projection.params())
        self.lm_group = ParamGroup("lm", self.lm.params())
        self._feature_cache: dict = {}

    @property
    def n_image_tokens(self) -> int:
        if self.config.image_tokens == "cls":
            return 1
        return (self.encoder.config.image_size // self.encoder.config.patch_size) ** 2

    def groups(self) -> list[ParamGroup]:
        return self.encoder.groups() + [self.projection_group, self.lm_group]

    def apply_policy(self, policy: StagePolicy) -> None:
        policy.validate()
        for g in self.encoder.groups():
            g.frozen = policy.encoder_frozen
        self.projection_group.frozen = policy.projection_frozen
        self.lm_group.frozen = policy.lm_frozen

    # -- image features -----------------------------------------------------------
    def image_features(self, depth: np.ndarray, mask: np.ndarray) -> Tensor:
        """Encoder output fed to the projection: [B, n_img, D_enc]."""
        train_encoder = any(not g.frozen for g in self.encoder.groups())
        if train_encoder:
            return self._encode(depth, mask)
        with T.no_grad():
            return self._encode(depth, mask)

    def _encode(self, depth, mask) -> Tensor:
        if self.config.image_tokens == "cls":
            v = self.encoder.vision_features(depth, mask)
            return v.reshape(v.shape[0], 1, v.shape[1])
        return self.encoder.vision_tokens(depth, mask)[:, 1:, :]

    def cached_features(self, key, depth: np.ndarray, mask: np.ndarray) -> np.ndarray:
        if key not in self._feature_cache:
            self._feature_cache[key] = self.image_features(depth[None], mask[None]).data[0]
        return self._feature_cache[key]

    # -- sequences ----------------------------------------------------------------
    def caption_sequence(self, caption: str) -> TokenSequence:
        body = self.vocab.encode(caption) + [self.vocab.id(EOS)]
        ids = [self.vocab.id(BOS)] + body
        return TokenSequence(ids, [False] + [True] * len(body))

    def dialogue_sequence(self, turns: Sequence[tuple[str, str]]) -> TokenSequence:
        ids, sup = [self.vocab.id(BOS)], [False]
        for role, text in turns:
            if role == "user":
                part = [self.vocab.id(USER)] + self.vocab.encode(text) + [self.vocab.id(ASSISTANT)]
                ids += part
                sup += [False] * len(part)
            else:
                part = self.vocab.encode(text) + [self.vocab.id(EOS)]
                ids += part
                sup += [True] * len(part)
        return TokenSequence(ids, sup)

    def prompt_ids(self, prompt: str) -> list[int]:
        return self.dialogue_sequence([("user", prompt)]).ids

    # -- forward --------------------------------------------------------------------
    def batch_logits(self, feats: Tensor | np.ndarray, token_ids: np.ndarray) -> Tensor:
        """Logits for [image tokens, token_ids]; ``feats`` is [B, n_img, D_enc]."""
        img = self.projection(T._lift(feats))
        txt = T.embedding(self.lm.tok, token_ids)
        return self.lm.logits(T.concat([img, txt], axis=1))

    def batch_loss(self, feats, seqs: Sequence[TokenSequence]) -> Tensor:
        n_img = self.n_image_tokens
        width = max(len(s.ids) for s in seqs)
        if n_img + width > self.config.context:
            raise ContractError(f"sequence of {n_img + width} tokens exceeds context {self.config.context}")
        B = len(seqs)
        ids = np.full((B, width), self.vocab.id(PAD), dtype=np.int64)
        sup = np.zeros((B, width))
        for i, s in enumerate(seqs):
            ids[i, :len(s.ids)] = s.ids
            sup[i, :len(s.ids)] = s.supervised
        if not sup.any():
            raise ContractError("no supervised target positions")
        logits = self.batch_logits(feats, ids)
        V = logits.shape[-1]
        # position p predicts the token at p + 1; text token t sits at position n_img + t
        pred = logits[:, n_img - 1:n_img - 1 + width, :].reshape(B * width, V)
        return T.softmax_cross_entropy(pred, ids.reshape(-1), sup.reshape(-1))

    def text_batch_loss(self, seqs: Sequence[TokenSequence]) -> Tensor:
        """Language-model loss with the image slots left blank (zero vectors)."""
        B = len(seqs)
        blank = np.zeros((B, self.n_image_tokens, self.config.dim))
        width = max(len(s.ids) for s in seqs)
        ids = np.full((B, width), self.vocab.id(PAD), dtype=np.int64)
        sup = np.zeros((B, width))
        for i, s in enumerate(seqs):
            ids[i, :len(s.ids)] = s.ids
            sup[i, :len(s.ids)] = s.supervised
        x = T.concat([Tensor(blank), T.embedding(self.lm.tok, ids)], axis=1)
        logits = self.lm.logits(x)
        n_img, V = self.n_image_tokens, logits.shape[-1]
        pred = logits[:, n_img - 1:n_img - 1 + width, :].reshape(B * width, V)
        return T.softmax_cross_entropy(pred, ids.reshape(-1), sup.reshape(-1))

    def position_losses(self, feats, seq: TokenSequence) -> np.ndarray:
        """Per-token negative log-likelihood of every supervised position (nan elsewhere)."""
        n_img = self.n_image_tokens
        ids = np.array([seq.ids])
        with T.no_grad():
            logits = self.batch_logits(np.asarray(feats)[None], ids).data[0]
        out = np.full(len(seq.ids), np.nan)
        for t, s in enumerate(seq.supervised):
            if s:
                row = logits[n_img - 1 + t]
                z = row - row.max()
                out[t] = np.log(np.exp(z).sum()) - z[seq.ids[t]]
        return out

    def generate(self, depth, mask, prompt: str, max_tokens: int = 24) -> str:
        """Greedy decoding until <eos>, ``max_tokens`` or the context limit."""
        feats = self.image_features(depth.normalized()[None], np.asarray(mask, dtype=np.float64)[None]).data
        return self.decode_response(self.greedy_ids(feats, self.prompt_ids(prompt), max_tokens))

    def greedy_ids(self, feats: np.ndarray, ids: Sequence[int], max_tokens: int) -> list[int]:
        """Emitted token ids, including a terminating <eos> when one is produced."""
        if max_tokens < 1:
            raise ContractError("max_tokens must be >= 1")
        ids = list(ids)
        out: list[int] = []
        eos = self.vocab.id(EOS)
        with T.no_grad():
            for _ in range(max_tokens):
                if self.n_image_tokens + len(ids) >= self.config.context:
                    break
                logits = self.batch_logits(feats, np.array([ids])).data[0, -1]
                nxt = int(np.argmax(logits))  # lowest id on ties
                out.append(nxt)
                if nxt == eos:
                    break
                ids.append(nxt)
        return out

    def decode_response(self, ids: Sequence[int]) -> str:
        return self.vocab.decode([i for i in ids if i != self.vocab.id(EOS)])

    # -- persistence ----------------------------------------------------------------
    def save(self, directory: str | Path, name: str = "lm") -> None:
        from .io import write_json

        directory = Path(directory)
        T.save_checkpoint(directory / f"{name}.ckpt", [self.projection_group, self.lm_group])
        write_json(directory / f"{name}.json", {"config": asdict(self.config), "vocab": self.vocab.to_list()})

    @classmethod
    def load(cls, directory: str | Path, encoder: DualEncoder, name: str = "lm") -> "DepthLM":
        from .io import read_json

        directory = Path(directory)
        meta = read_json(directory / f"{name}.json")
        model = cls(encoder, LMConfig.from_dict(meta["config"]), vocab=Vocab.from_list(meta["vocab"]))
        groups = {g.name: g for g in T.load_checkpoint(directory / f"{name}.ckpt")}
        if set(groups) != {"projection", "lm"}:
            raise ContractError(f"LM checkpoint has groups {sorted(groups)}")
        load_into(model.projection_group.tensors, groups["projection"].tensors)
        load_into(model.lm_group.tensors, groups["lm"].tensors)
        return model

    def clone(self) -> "DepthLM":
        """Copy projection and LM; the encoder object is shared (always frozen here)."""
        twin = copy.copy(self)
        twin.projection = copy.deepcopy(self.projection)
        twin.lm = copy.deepcopy(self.lm)
        twin.projection_group = ParamGroup("projection", twin.projection.params(), self.projection_group.frozen)
        twin.lm_group = ParamGroup("lm", twin.lm.params(), self.lm_group.frozen)
        twin._feature_cache = self._feature_cache
        return twin


def forward_multimodal(model: DepthLM, depth, mask, prompt_ids: Sequence[int], target_ids: Sequence[int]) -> Tensor:
    """Depth-conditioned LM loss on the target positions of [image, prompt, target]."""
    if len(target_ids) == 0:
        raise ContractError("empty target: no supervised positions")
    seq = TokenSequence(list(prompt_ids) + list(target_ids), [False] * len(prompt_ids) + [True] * len(target_ids))
    depth_arr = depth.normalized() if hasattr(depth, "normalized") else np.asarray(depth, dtype=np.float64)
    feats = model.image_features(depth_arr[None], np.asarray(mask, dtype=np.float64)[None])
    return model.batch_loss(feats, [seq])


# -- training --------------------------------------------------------------------

def _examples(model: DepthLM, data, policy: StagePolicy, scenes: Mapping[str, SceneRecord]):
    out = []
    for item in data:
        if policy.stage == ALIGNMENT:
            if not isinstance(item, TrainingPair):
                raise ConfigurationError("alignment consumes TrainingPairs")
            key = (item.scene_id, item.object_index, item.replaced)
            feats = model.cached_features(key, item.depth.normalized(), item.mask)
            out.append((feats, model.caption_sequence(item.caption)))
        else:
            if not isinstance(item, InstructionSample):
                raise ConfigurationError("SFT consumes InstructionSamples")
            rec = scenes[item.scene_id]
            key = (item.scene_id, -1, True)
            feats = model.cached_features(key, rec.image.normalized(), np.ones_like(rec.image.depth))
            out.append((feats, model.dialogue_sequence(item.turns)))
    return out


def pretrain_lm(model: DepthLM, texts: Sequence[str], config: LMConfig, seed: int,
                epochs: int | None = None) -> list[EpochRecord]:
    """Text-only warm-up of the LM so alignment has a language model to align to.

    Only the LM group moves; the projection and encoder are untouched.
    """
    if not texts:
        raise ContractError("pretrain_lm needs text")
    seqs = [model.caption_sequence(t) for t in texts]
    saved = [g.frozen for g in model.groups()]
    for g in model.groups():
        g.frozen = g is not model.lm_group
    rng = np.random.default_rng(seed)
    curve: list[EpochRecord] = []
    t0 = time.perf_counter()
    try:
        for epoch in range(config.pretrain_epochs if epochs is None else epochs):
            order = rng.permutation(len(seqs))
            losses = []
            for start in range(0, len(order), config.batch_size):
                loss = model.text_batch_loss([seqs[i] for i in order[start:start + config.batch_size]])
                if not np.isfinite(loss.item()):
                    raise TrainingError(f"non-finite LM loss in pretraining epoch {epoch + 1}")
                loss.backward()
                T.sgd_step([model.lm_group], config.lr)
                losses.append(loss.item())
            curve.append(EpochRecord(epoch + 1, float(np.mean(losses)), time.perf_counter() - t0))
    finally:
        for g, f in zip(model.groups(), saved):
            g.frozen = f
    return curve


def train_stage(model: DepthLM, data: Sequence, policy: StagePolicy, config: LMConfig, seed: int,
                scenes: Mapping[str, SceneRecord] | None = None, epochs: int | None = None,
                max_steps: int | None = None) -> tuple[list[ParamGroup], list[EpochRecord]]:
    """SGD over ``data`` honouring the policy's frozen flags; returns checkpoint groups and loss curve."""
    model.apply_policy(policy)
    if not data:
        raise ContractError("train_stage needs data")
    examples = _examples(model, data, policy, scenes or {})
    if epochs is None:
        epochs = config.align_epochs if policy.stage == ALIGNMENT else config.sft_epochs
    groups = model.groups()
    lr = config.align_lr if policy.stage == ALIGNMENT else config.lr
    rng = np.random.default_rng(seed)
    curve: list[EpochRecord] = []
    step = 0
    t0 = time.perf_counter()
    lengths = np.array([len(s.ids) for _, s in examples])
    for epoch in range(epochs):
        # batches of similar length, visited in random order, keep padding small
        order = np.lexsort((rng.permutation(len(examples)), lengths))
        batches = [order[k:k + config.batch_size] for k in range(0, len(order), config.batch_size)]
        losses = []
        for b in rng.permutation(len(batches)):
            if max_steps is not None and step >= max_steps:
                break
            batch = [examples[i] for i in batches[b]]
            feats = np.stack([f for f, _ in batch])
            loss = model.batch_loss(feats, [s for _, s in batch])
            if not np.isfinite(loss.item()):
                raise TrainingError(f"non-finite LM loss at step {step}")
            loss.backward()
            T.sgd_step(groups, lr)
            losses.append(loss.item())
            step += 1
        if losses:
            curve.append(EpochRecord(epoch + 1, float(np.mean(losses)), time.perf_counter() - t0))
    return groups, curve


def mean_loss(model: DepthLM, data: Sequence, policy: StagePolicy, scenes=None, batch_size: int = 32) -> float:
    """Mean of per-batch losses over ``data``; no parameters change."""
    examples = _examples(model, data, policy, scenes or {})
    losses = []
    with T.no_grad():
        for start in range(0, len(examples), batch_size):
            batch = examples[start:start + batch_size]
            losses.append(model.batch_loss(np.stack([f for f, _ in batch]), [s for _, s in batch]).item())
    return float(np.mean(losses))


# -- evaluation -------------------------------------------------------------------

def answer_items(model: DepthLM, items: Sequence[QaItem], scenes: Mapping[str, SceneRecord],
                 max_tokens: int = 24) -> dict[str, str]:
    """Greedy responses to benchmark prompts, image under the all-ones mask."""
    out = {}
    for item in items:
        rec = scenes[item.provenance["scene_id"]]
        feats = model.cached_features((rec.scene_id, -1, True), rec.image.normalized(), np.ones_like(rec.image.depth))
        out[item.item_id] = model.decode_response(model.greedy_ids(feats[None], model.prompt_ids(item.prompt), max_tokens))
    return out


def probe_accuracy(model: DepthLM, items: Sequence[QaItem], scenes: Mapping[str, SceneRecord]) -> float:
    probe = [it for it in items if it.task == DISTANCE_JUDGE]
    report = score_answers(probe, answer_items(model, probe, scenes))
    return report.accuracy[DISTANCE_JUDGE]


ABLATIONS = ("mlp_only", "llm_only", "both")


def ablate_sft(base: DepthLM, data: Sequence[InstructionSample], which: Sequence[str], config: LMConfig, seed: int,
               scenes: Mapping[str, SceneRecord], probe: Sequence[QaItem],
               probe_scenes: Mapping[str, SceneRecord], epochs: int | None = None) -> list[dict]:
    """Train each SFT freeze pattern from the same starting weights and score the DistanceJudge probe."""
    rows = []
    for name in which:
        model = base.clone()
        _, curve = train_stage(model, data, StagePolicy.sft(name), config, seed, scenes, epochs=epochs)
        rows.append({
            "config": name,
            "train_mlp": name in ("mlp_only", "both"),
            "train_llm": name in ("llm_only", "both"),
            "final_train_loss": curve[-1].mean_loss,
            "distance_judge_accuracy": probe_accuracy(model, probe, probe_scenes),
        })
    return rows
