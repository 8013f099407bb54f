"""
Command-line pipeline: scenes -> benchmark and training sets -> encoder -> LM stages -> reports.

Every subcommand takes --config, --seed and --out. ``--out`` is the run
directory shared by all steps; each step writes into its own subdirectory and
reads earlier steps' outputs from their fixed locations.
"""

from __future__ import annotations

import os

# BLAS pools are sized when NumPy loads, so the cap has to be in place first.
_THREADS = os.environ.get("DSLAB_THREADS")
if _THREADS:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _THREADS)

import argparse  # noqa: E402
import csv  # noqa: E402
import io  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402
from concurrent.futures import ProcessPoolExecutor  # noqa: E402
from dataclasses import replace  # noqa: E402
from pathlib import Path  # noqa: E402

from . import align, benchmark, encoder, pairs, plots, scene  # noqa: E402
from .config import PipelineConfig  # noqa: E402
from .errors import DslabError  # noqa: E402
from .io import atomic_write_text, read_json, read_jsonl, write_json, write_jsonl  # noqa: E402
from .text import grammar_vocab  # noqa: E402

SCENES_TRAIN = "scenes/train"
SCENES_EVAL = "scenes/eval"
SCENES_INSTRUCT = "scenes/instruct"

# which subcommand produces each artifact, for missing-input errors
PRODUCERS = {
    SCENES_TRAIN: "gen-scenes",
    SCENES_EVAL: "gen-scenes",
    SCENES_INSTRUCT: "gen-scenes",
    "bench": "build-bench",
    "pairs": "build-pairs",
    "instructions": "build-instructions",
    "encoder": "train-encoder",
    "zeroshot": "eval-zeroshot",
    "ratio_search": "ratio-search",
    "align": "align",
    "sft": "sft",
    "eval_bench": "eval-bench",
    "ablate_sft": "ablate-sft",
}


def _producer(rel: str) -> str:
    for prefix, producer in PRODUCERS.items():
        if rel == prefix or rel.startswith(prefix + "/"):
            return producer
    return "unknown"


class MissingInput(DslabError):
    def __init__(self, path: Path, producer: str):
        super().__init__(f"missing {path}")
        self.path = path
        self.producer = producer


class Run:
    """Resolved paths, config and overrides for one subcommand invocation."""

    def __init__(self, command: str, root: Path, config: PipelineConfig, overrides: dict):
        self.command = command
        self.root = root
        self.config = config
        self.overrides = overrides
        self.vocab = grammar_vocab(config.scenes.scene_labels, config.scenes.object_labels)

    def need(self, rel: str) -> Path:
        path = self.root / rel
        if not path.exists():
            raise MissingInput(path, _producer(rel))
        return path

    def out(self, name: str) -> Path:
        path = self.root / name
        path.mkdir(parents=True, exist_ok=True)
        write_json(path / "config.json", {"command": self.command, "overrides": self.overrides,
                                          "config": self.config.to_dict()})
        return path

    def scenes(self, rel: str) -> list[scene.SceneRecord]:
        return scene.read_scene_set(self.need(f"{rel}/index.json").parent)

    def encoder(self) -> encoder.DualEncoder:
        self.need("encoder/encoder.ckpt")
        return encoder.DualEncoder.load(self.root / "encoder")

    def lm(self, stage: str) -> align.DepthLM:
        self.need(f"{stage}/lm.ckpt")
        return align.DepthLM.load(self.root / stage, self.encoder())


def _scene_seeds(cfg: PipelineConfig) -> dict[str, list[int]]:
    base = cfg.scene_seed_base
    return {
        SCENES_TRAIN: [base + k for k in range(cfg.train_scenes)],
        SCENES_EVAL: [base + cfg.eval_seed_offset + k for k in range(cfg.eval_scenes)],
        SCENES_INSTRUCT: [base + cfg.instruct_seed_offset + k for k in range(cfg.instruction_scenes)],
    }


def _curve_points(path: Path) -> list[tuple[int, float]]:
    with open(path, encoding="utf-8") as fh:
        return [(int(r["epoch"]), float(r["mean_loss"])) for r in csv.DictReader(fh)]


# -- subcommands ---------------------------------------------------------------

def cmd_gen_scenes(run: Run) -> dict:
    # generate everything first so a failing seed leaves no partial output
    sets = {rel: scene.generate_scenes(seeds, run.config.scenes) for rel, seeds in _scene_seeds(run.config).items()}
    out = run.out("scenes")
    for rel, recs in sets.items():
        scene.write_scene_set(recs, run.root / rel)
    counts = {rel.split("/")[1]: len(recs) for rel, recs in sets.items()}
    labels = {}
    for rec in sets[SCENES_TRAIN]:
        labels[rec.scene_label] = labels.get(rec.scene_label, 0) + 1
    summary = {"counts": counts, "train_scene_labels": dict(sorted(labels.items()))}
    write_json(out / "summary.json", summary)
    return summary


def cmd_build_bench(run: Run) -> dict:
    recs = run.scenes(SCENES_EVAL)
    cfg = run.config
    items, stats = benchmark.build_benchmark(recs, cfg.resolved_quotas(), cfg.seed,
                                             cfg.scenes.scene_labels, cfg.scenes.object_labels)
    out = run.out("bench")
    benchmark.write_benchmark(out / "benchmark.jsonl", items)
    write_json(out / "stats.json", stats.to_dict())
    return stats.to_dict()


def cmd_build_pairs(run: Run) -> dict:
    recs = run.scenes(SCENES_TRAIN)
    cfg = run.config
    out = run.out("pairs")
    embedders = None
    if cfg.scorer_epochs > 0:
        scorer_cfg = replace(cfg.encoder, epochs=cfg.scorer_epochs, freeze_text=False)
        scorer = encoder.train_caption_scorer(recs, scorer_cfg, cfg.seed, run.vocab)
        scorer.save(out, "scorer")
        embedders = scorer.embedders()
    built = pairs.build_pairs(recs, embedders, cfg.seed)
    write_jsonl(out / "pairs.jsonl", [p.to_dict() for p in built])
    summary = {"pairs": len(built), "scenes": len(recs), "scorer_epochs": cfg.scorer_epochs,
               "distinct_captions": len({p.caption for p in built})}
    write_json(out / "summary.json", summary)
    return summary


def cmd_build_instructions(run: Run) -> dict:
    recs = run.scenes(SCENES_INSTRUCT)
    cfg = run.config
    samples = pairs.synth_instruction_set(recs, cfg.seed, cfg.instructions_per_kind, cfg.scenes.object_labels)
    out = run.out("instructions")
    write_jsonl(out / "instructions.jsonl", [s.to_dict() for s in samples])
    kinds = {k: sum(s.kind == k for s in samples) for k in pairs.KINDS}
    summary = {"samples": len(samples), "kinds": kinds}
    write_json(out / "summary.json", summary)
    return summary


def _sampled_pairs(run: Run, ratio: float) -> list[pairs.TrainingPair]:
    rows = read_jsonl(run.need("pairs/pairs.jsonl"))
    base = pairs.pairs_from_records(rows, run.scenes(SCENES_TRAIN))
    return pairs.apply_sampling(base, ratio, run.config.seed)


def cmd_train_encoder(run: Run) -> dict:
    cfg = run.config.encoder
    sampled = _sampled_pairs(run, cfg.sample_ratio)
    model, curve = encoder.train_encoder(sampled, cfg, run.config.seed, run.vocab)
    out = run.out("encoder")
    model.save(out)
    atomic_write_text(out / "train_log.csv", encoder.curve_csv(curve))
    write_jsonl(out / "sampled_pairs.jsonl", [p.to_dict() for p in sampled])
    summary = {"pairs": len(sampled), "replaced": sum(p.replaced for p in sampled), "sample_ratio": cfg.sample_ratio,
               "first_epoch_loss": curve[0].mean_loss, "final_epoch_loss": curve[-1].mean_loss}
    write_json(out / "summary.json", summary)
    return summary


def cmd_eval_zeroshot(run: Run) -> dict:
    model = run.encoder()
    recs = run.scenes(SCENES_EVAL)
    labels = list(run.config.scenes.scene_labels)
    acc, preds = encoder.zero_shot_accuracy(model, recs, labels)
    per_class = {}
    for lbl in labels:
        hits = [p == r.scene_label for p, r in zip(preds, recs) if r.scene_label == lbl]
        per_class[lbl] = (sum(hits) / len(hits)) if hits else None
    report = {"accuracy": acc, "images": len(recs), "chance": 1 / len(labels), "per_class": per_class,
              "predictions": {r.scene_id: p for r, p in zip(recs, preds)}}
    write_json(run.out("zeroshot") / "report.json", report)
    return {"accuracy": acc, "images": len(recs)}


def _ratio_job(args) -> tuple[float, float, list]:
    ratio, base, enc_cfg, seed, vocab, eval_recs, labels = args
    sampled = pairs.apply_sampling(base, ratio, seed)
    model, curve = encoder.train_encoder(sampled, replace(enc_cfg, sample_ratio=ratio), seed, vocab)
    acc, _ = encoder.zero_shot_accuracy(model, eval_recs, labels)
    return ratio, acc, [(c.epoch, c.mean_loss) for c in curve]


def _workers(n_jobs: int) -> int:
    cap = int(os.environ.get("DSLAB_THREADS") or os.cpu_count() or 1)
    return max(1, min(cap, n_jobs))


def cmd_ratio_search(run: Run) -> dict:
    cfg = run.config
    rows = read_jsonl(run.need("pairs/pairs.jsonl"))
    base = pairs.pairs_from_records(rows, run.scenes(SCENES_TRAIN))
    eval_recs = run.scenes(SCENES_EVAL)
    jobs = [(r, base, cfg.encoder, cfg.seed, run.vocab, eval_recs, list(cfg.scenes.scene_labels))
            for r in cfg.ratio_grid]
    workers = _workers(len(jobs))
    if workers == 1:
        results = [_ratio_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_ratio_job, jobs))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["ratio", "zero_shot_top1"])
    for r, acc, _ in results:
        w.writerow([f"{r:.2f}", f"{acc:.6f}"])
    out = run.out("ratio_search")
    atomic_write_text(out / "ratio_search.csv", buf.getvalue())
    write_json(out / "report.json", {"rows": [{"ratio": r, "zero_shot_top1": a, "curve": c} for r, a, c in results]})
    return {"ratios": [r for r, _, _ in results], "best": max(results, key=lambda x: x[1])[0]}


def _write_lm_curve(path: Path, curve) -> None:
    atomic_write_text(path, encoder.curve_csv(curve))


def cmd_align(run: Run) -> dict:
    cfg = run.config
    enc = run.encoder()
    recs = run.scenes(SCENES_TRAIN)
    sampled = _sampled_pairs(run, cfg.encoder.sample_ratio)
    model = align.DepthLM(enc, cfg.lm, cfg.seed, vocab=run.vocab)
    texts = [c for r in recs for c in r.captions]
    pre_curve = align.pretrain_lm(model, texts, cfg.lm, cfg.seed)
    _, curve = align.train_stage(model, sampled, align.StagePolicy.alignment(), cfg.lm, cfg.seed)
    out = run.out("align")
    model.save(out)
    _write_lm_curve(out / "pretrain_log.csv", pre_curve)
    _write_lm_curve(out / "train_log.csv", curve)
    summary = {"pretrain_final_loss": pre_curve[-1].mean_loss if pre_curve else None,
               "align_losses": [c.mean_loss for c in curve]}
    write_json(out / "summary.json", summary)
    return summary


def _instructions(run: Run):
    rows = read_jsonl(run.need("instructions/instructions.jsonl"))
    samples = [pairs.InstructionSample.from_dict(r) for r in rows]
    recs = {r.scene_id: r for r in run.scenes(SCENES_INSTRUCT)}
    return samples, recs


def cmd_sft(run: Run) -> dict:
    cfg = run.config
    which = run.overrides.get("ablate") or "both"
    model = run.lm("align")
    samples, recs = _instructions(run)
    _, curve = align.train_stage(model, samples, align.StagePolicy.sft(which), cfg.lm, cfg.seed, recs)
    out = run.out("sft")
    model.save(out)
    _write_lm_curve(out / "train_log.csv", curve)
    summary = {"variant": which, "losses": [c.mean_loss for c in curve]}
    write_json(out / "summary.json", summary)
    return summary


def cmd_eval_bench(run: Run) -> dict:
    items = benchmark.read_benchmark(run.need("bench/benchmark.jsonl"))
    source = run.overrides.get("responses")
    if source:
        if not Path(source).exists():
            raise MissingInput(Path(source), "eval-bench --responses")
        responses = benchmark.read_responses(source)
    else:
        model = run.lm("sft")
        recs = {r.scene_id: r for r in run.scenes(SCENES_EVAL)}
        responses = align.answer_items(model, items, recs, run.config.max_new_tokens)
    report = benchmark.score_answers(items, responses)
    out = run.out("eval_bench")
    write_jsonl(out / "responses.jsonl", [{"item_id": k, "text": responses.get(k)} for k in (i.item_id for i in items)])
    write_json(out / "report.json", {"source": "responses-file" if source else "sft", **report.to_dict()})
    return {"accuracy": report.accuracy, "macro_average": report.macro_average}


def cmd_ablate_sft(run: Run) -> dict:
    cfg = run.config
    which = run.overrides.get("ablate")
    variants = [which] if which else list(align.ABLATIONS)
    base = run.lm("align")
    samples, recs = _instructions(run)
    items = benchmark.read_benchmark(run.need("bench/benchmark.jsonl"))
    probe = [it for it in items if it.task == benchmark.DISTANCE_JUDGE][:cfg.probe_items]
    probe_recs = {r.scene_id: r for r in run.scenes(SCENES_EVAL)}
    rows = align.ablate_sft(base, samples, variants, cfg.lm, cfg.seed, recs, probe, probe_recs)
    out = run.out("ablate_sft")
    write_json(out / "report.json", {"probe_items": len(probe), "rows": rows})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["config", "train_mlp", "train_llm", "final_train_loss", "distance_judge_accuracy"])
    for r in rows:
        w.writerow([r["config"], r["train_mlp"], r["train_llm"], f"{r['final_train_loss']:.6f}",
                    f"{r['distance_judge_accuracy']:.4f}"])
    atomic_write_text(out / "ablate_sft.csv", buf.getvalue())
    return {"rows": rows}


def _maybe_json(path: Path):
    return read_json(path) if path.exists() else None


def cmd_report(run: Run) -> dict:
    root = run.root
    tasks = list(benchmark.TASKS)
    table: dict[str, dict] = {}
    bench = _maybe_json(root / "eval_bench/report.json")
    if bench:
        table["dslab-sft"] = {**bench["accuracy"], "macro_average": bench["macro_average"]}
    ablate = _maybe_json(root / "ablate_sft/report.json")
    if ablate:
        for row in ablate["rows"]:
            table[f"ablate:{row['config']}"] = {benchmark.DISTANCE_JUDGE: row["distance_judge_accuracy"]}
    zeroshot = _maybe_json(root / "zeroshot/report.json")
    ratio = _maybe_json(root / "ratio_search/report.json")
    if not (bench or ablate or zeroshot or ratio):
        raise MissingInput(root / "eval_bench/report.json", PRODUCERS["eval_bench"])

    out = run.out("report")
    header = ["model", *tasks, "Avg."]
    lines = [header]
    for name, accs in table.items():
        cells = [name]
        for key in (*tasks, "macro_average"):
            v = accs.get(key)
            cells.append("-" if v is None else f"{100 * v:.2f}")
        lines.append(cells)
    buf = io.StringIO()
    csv.writer(buf, delimiter="|", lineterminator="\n").writerows(lines)
    atomic_write_text(out / "summary.psv", buf.getvalue())

    figures = []
    curves = {}
    for label, rel in (("encoder", "encoder/train_log.csv"), ("lm-pretrain", "align/pretrain_log.csv"),
                       ("alignment", "align/train_log.csv"), ("sft", "sft/train_log.csv")):
        if (root / rel).exists():
            curves[label] = _curve_points(root / rel)
    if curves:
        plots.loss_curves(curves, out / "loss_curves.png")
        figures.append("loss_curves.png")
    if ratio:
        plots.ratio_search([(r["ratio"], r["zero_shot_top1"]) for r in ratio["rows"]], out / "ratio_search.png")
        figures.append("ratio_search.png")
    if table:
        plots.task_accuracy({k: {t: v.get(t) for t in tasks} for k, v in table.items()}, tasks,
                            out / "task_accuracy.png")
        figures.append("task_accuracy.png")

    summary = {
        "table": {"columns": header, "rows": lines[1:]},
        "zero_shot_accuracy": zeroshot["accuracy"] if zeroshot else None,
        "ratio_search": [[r["ratio"], r["zero_shot_top1"]] for r in ratio["rows"]] if ratio else None,
        "figures": figures,
    }
    write_json(out / "summary.json", summary)
    sys.stdout.write(buf.getvalue())
    return summary


COMMANDS = {
    "gen-scenes": cmd_gen_scenes,
    "build-bench": cmd_build_bench,
    "build-pairs": cmd_build_pairs,
    "build-instructions": cmd_build_instructions,
    "train-encoder": cmd_train_encoder,
    "eval-zeroshot": cmd_eval_zeroshot,
    "ratio-search": cmd_ratio_search,
    "align": cmd_align,
    "sft": cmd_sft,
    "eval-bench": cmd_eval_bench,
    "ablate-sft": cmd_ablate_sft,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dslab", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="pipeline config JSON (defaults built in)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", type=Path, default=Path("run"), help="run directory (default: ./run)")
        if name in ("train-encoder", "align", "ratio-search"):
            p.add_argument("--ratio", type=float, help="mask replacement ratio r")
        if name in ("build-pairs", "train-encoder", "ratio-search", "align", "sft", "ablate-sft"):
            p.add_argument("--epochs", type=int, help="override the epoch count of this step")
        if name in ("train-encoder", "ratio-search"):
            p.add_argument("--freeze-text", action="store_true", help="keep the text tower fixed")
        if name in ("sft", "ablate-sft"):
            p.add_argument("--ablate", choices=align.ABLATIONS, help="SFT freeze pattern")
        if name == "eval-bench":
            p.add_argument("--responses", type=Path, help="score this responses JSONL instead of the SFT model")
    return parser


def _apply_overrides(command: str, cfg: PipelineConfig, args: argparse.Namespace) -> tuple[PipelineConfig, dict]:
    overrides = {}
    if args.seed is not None:
        cfg.seed = args.seed
        overrides["seed"] = args.seed
    if getattr(args, "ratio", None) is not None:
        cfg.encoder = replace(cfg.encoder, sample_ratio=args.ratio)
        overrides["ratio"] = args.ratio
    if getattr(args, "freeze_text", False):
        cfg.encoder = replace(cfg.encoder, freeze_text=True)
        overrides["freeze_text"] = True
    epochs = getattr(args, "epochs", None)
    if epochs is not None:
        overrides["epochs"] = epochs
        if command == "build-pairs":
            cfg.scorer_epochs = epochs
        elif command in ("train-encoder", "ratio-search"):
            cfg.encoder = replace(cfg.encoder, epochs=epochs)
        elif command == "align":
            cfg.lm = replace(cfg.lm, align_epochs=epochs)
        else:
            cfg.lm = replace(cfg.lm, sft_epochs=epochs)
    if getattr(args, "ablate", None):
        overrides["ablate"] = args.ablate
    if getattr(args, "responses", None):
        overrides["responses"] = str(args.responses)
    return cfg, overrides


def _fail(command: str, payload: dict) -> int:
    sys.stderr.write(json.dumps({"status": "error", "command": command, **payload}, sort_keys=True) + "\n")
    return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    command = args.command
    try:
        if args.config is not None and not args.config.exists():
            raise MissingInput(args.config, "user (--config)")
        cfg = PipelineConfig.load(args.config)
        cfg, overrides = _apply_overrides(command, cfg, args)
        cfg.validate()
        run = Run(command, args.out, cfg, overrides)
        result = COMMANDS[command](run)
    except MissingInput as exc:
        return _fail(command, {"error": "missing-input", "path": str(exc.path), "produced_by": exc.producer})
    except (DslabError, ValueError, KeyError, OSError) as exc:
        return _fail(command, {"error": type(exc).__name__, "message": str(exc).replace("\n", " ")})
    if command != "report":
        sys.stdout.write(json.dumps({"status": "ok", "command": command, "result": result}, sort_keys=True,
                                    default=float) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
