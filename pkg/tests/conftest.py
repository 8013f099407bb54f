import csv
import io
import re
import time
from dataclasses import replace
from pathlib import Path
from types import SimpleNamespace

import pytest

# criterion number -> (passed, description, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}

TINY_CONFIG = {
    "seed": 7,
    "train_scenes": 24,
    "eval_scenes": 16,
    "instruction_scenes": 12,
    "quotas": [4, 6, 8, 4],
    "scorer_epochs": 1,
    "instructions_per_kind": 1,
    "probe_items": 8,
    "max_new_tokens": 8,
    "scenes": {"width": 20, "height": 20, "min_objects": 2, "max_objects": 3},
    "encoder": {"image_size": 20, "patch_size": 4, "dim": 8, "vision_layers": 1, "text_layers": 1, "heads": 2,
                "max_text_len": 12, "epochs": 1, "batch_size": 8},
    "lm": {"dim": 16, "layers": 1, "heads": 2, "pretrain_epochs": 1, "align_epochs": 1, "sft_epochs": 1,
           "batch_size": 8},
}

PIPELINE = [
    ["gen-scenes"], ["build-bench"], ["build-pairs"], ["build-instructions"], ["train-encoder"],
    ["eval-zeroshot"], ["ratio-search"], ["align"], ["sft"], ["eval-bench"], ["ablate-sft"], ["report"],
]


def strip_wall_time(path: Path, data: bytes) -> bytes:
    """Training logs carry a wall-clock column; everything else must match byte for byte."""
    if path.name.endswith("_log.csv"):
        rows = list(csv.reader(io.StringIO(data.decode())))
        keep = [k for k, name in enumerate(rows[0]) if name != "wall_time_s"]
        return "\n".join(",".join(r[k] for k in keep) for r in rows).encode()
    return data


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): strip_wall_time(p, p.read_bytes())
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="session")
def tiny_config(tmp_path_factory) -> Path:
    import json

    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY_CONFIG))
    return path


@pytest.fixture(scope="session")
def default_encoder():
    """Caption scorer then encoder, default config, on the seeded 256-scene corpus; timed end to end."""
    from dslab.config import PipelineConfig
    from dslab.encoder import train_caption_scorer, train_encoder
    from dslab.pairs import apply_sampling, build_pairs
    from dslab.scene import generate_scenes
    from dslab.text import grammar_vocab

    cfg = PipelineConfig()
    t0 = time.perf_counter()
    vocab = grammar_vocab(cfg.scenes.scene_labels, cfg.scenes.object_labels)
    corpus = generate_scenes(range(cfg.train_scenes), cfg.scenes)
    scorer = train_caption_scorer(corpus, replace(cfg.encoder, epochs=cfg.scorer_epochs), cfg.seed, vocab)
    pairs = apply_sampling(build_pairs(corpus, scorer.embedders(), cfg.seed), cfg.encoder.sample_ratio, cfg.seed)
    model, curve = train_encoder(pairs, cfg.encoder, cfg.seed, vocab)
    return SimpleNamespace(model=model, curve=curve, corpus=corpus, pairs=pairs, vocab=vocab, config=cfg,
                           seconds=time.perf_counter() - t0)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    m = re.match(r"test_criterion_(\d+)_(\w+)", item.name)
    if m and report.when == "call" and report.failed:
        n = int(m.group(1))
        if n not in ACCEPTANCE:
            ACCEPTANCE[n] = (False, m.group(2).replace("_", " "), f"error: {call.excinfo.typename}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, desc, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {n:>2}: {desc} ({detail})")
