"""Command-line front door.

Every subcommand reads a run configuration (``--config``, defaulting to the
built-in continuous settings), applies ``--override KEY=VALUE`` and
``--seed``, and writes its outputs under ``--out``.  Failures exit nonzero
and print one JSON error record on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import pipeline, records, world
from .config import RunConfig, RunMode, apply_overrides, dump_config, load_config
from .core import Category, Rng
from .kernels import ALL_KERNELS
from .models import model_from_json
from .plotting import line_chart

log = logging.getLogger("selfalign")

CHECKPOINT_SCHEMA = 1
EXIT_FAILURE, EXIT_USAGE, EXIT_FILE = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- helpers ---------------------------------------------------------------------------


def _config(args) -> RunConfig:
    overrides = list(args.override or [])
    if args.config:
        if not Path(args.config).exists():
            raise FileNotFoundError(f"missing config file: {args.config}")
        cfg = load_config(args.config, overrides)
    else:
        cfg = apply_overrides(RunConfig(), overrides)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg.validate()


def save_checkpoint(path, state: pipeline.IterationState):
    with open(path, "w") as fh:
        json.dump({
            "schema_version": CHECKPOINT_SCHEMA,
            "iteration": state.iteration,
            "policy": state.policy.to_json(),
            "reference": state.reference.to_json(),
        }, fh)


def load_checkpoint(path) -> pipeline.IterationState:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint: {path}")
    with open(path) as fh:
        d = json.load(fh)
    if d.get("schema_version") != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {d.get('schema_version')!r}")
    return pipeline.IterationState(d["iteration"], model_from_json(d["policy"]), model_from_json(d["reference"]))


def _state(args, cfg, out: Path) -> pipeline.IterationState:
    path = Path(args.checkpoint) if getattr(args, "checkpoint", None) else out / "checkpoint.json"
    if path.exists():
        return load_checkpoint(path)
    if getattr(args, "checkpoint", None):
        raise FileNotFoundError(f"missing checkpoint: {path}")
    return pipeline.initial_state(cfg)


def _input(args, name: str, out: Path) -> Path:
    given = getattr(args, name.replace(".", "_").replace("-", "_"), None)
    path = Path(given) if given else out / name
    if not path.exists():
        raise FileNotFoundError(f"missing input file: {path}")
    return path


def _load_samples(path):
    data = np.load(path, allow_pickle=False)
    return [str(x) for x in data["prompt_ids"]], data["reps"]


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _print_rows(header, rows):
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)


# -- commands ------------------------------------------------------------------------------


def cmd_gen_prompts(args, cfg, out):
    env = pipeline.Environment.from_config(cfg)
    rng = Rng(cfg.seed).split("cli-prompts")
    cats = [Category(args.category)] if args.category else list(Category)
    prompts = []
    for cat in cats:
        prompts += world.generate_prompts(env.vocab, cat, args.n, rng, template=args.template)
    records.write_prompts(out / "prompts.jsonl", prompts)
    records.write_questions(out / "questions.jsonl", ((p.id, q) for p in prompts for q in world.decompose_questions(p, env.vocab)))
    print(f"wrote {len(prompts)} prompts to {out / 'prompts.jsonl'}")


def cmd_sample(args, cfg, out):
    prompts = records.read_prompts(_input(args, "prompts.jsonl", out))
    env = pipeline.Environment.from_config(cfg)
    state = _state(args, cfg, out)
    encs = env.encoder.encode_many(prompts)
    reps = pipeline.sample_candidates(state.policy, encs, cfg, Rng(cfg.seed).split("cli-sample"))
    np.savez(out / "samples.npz", reps=reps, prompt_ids=np.array([p.id for p in prompts]))
    print(f"wrote {reps.shape[0]} x {reps.shape[1]} candidates to {out / 'samples.npz'}")


def cmd_score(args, cfg, out):
    prompts = records.read_prompts(_input(args, "prompts.jsonl", out))
    ids, reps = _load_samples(_input(args, "samples.npz", out))
    if ids != [p.id for p in prompts]:
        raise ValueError("samples.npz does not match prompts.jsonl")
    env = pipeline.Environment.from_config(cfg)
    scores, _, align = pipeline.score_candidates(prompts, reps, env, cfg, Rng(cfg.seed).split("cli-feedback"),
                                                 with_ground_truth=False)
    records.write_jsonl(out / "scores.jsonl", (
        {"prompt_id": p.id, "scores": s.tolist(), "alignment": a.tolist()}
        for p, s, a in zip(prompts, scores, align)
    ), "score")
    print(f"scored {scores.size} candidates; mean feedback {scores.mean():.4f}")


def cmd_make_pairs(args, cfg, out):
    rows = list(records.read_jsonl(_input(args, "scores.jsonl", out), "score"))
    pairs, empty = [], 0
    for i, rec in enumerate(rows):
        found = pipeline.rank_pairs(cfg.pairs, rec["scores"])
        empty += not found
        for w, l in found:
            pairs.append({"prompt_id": rec["prompt_id"], "prompt_index": i, "chosen_index": w, "rejected_index": l,
                          "chosen_score": rec["scores"][w], "rejected_score": rec["scores"][l]})
    records.write_jsonl(out / "pairs.jsonl", pairs, "pair")
    print(f"wrote {len(pairs)} pairs; {empty} prompts had no strictly ordered pair")


def cmd_train(args, cfg, out):
    prompts = records.read_prompts(_input(args, "prompts.jsonl", out))
    ids, reps = _load_samples(_input(args, "samples.npz", out))
    pair_recs = list(records.read_jsonl(_input(args, "pairs.jsonl", out), "pair"))
    if not pair_recs:
        raise pipeline.PipelineError("pairs.jsonl holds no preference pairs")
    pairs = np.array([(r["prompt_index"], r["chosen_index"], r["rejected_index"]) for r in pair_recs], dtype=np.int64)
    env = pipeline.Environment.from_config(cfg)
    state = _state(args, cfg, out)
    encs = env.encoder.encode_many(prompts)
    policy, reference = state.policy.copy(), state.policy.copy()
    losses, start, end = pipeline.train_on_pairs(policy, reference, encs, reps, pairs, cfg, Rng(cfg.seed).split("cli-train"))
    new_state = pipeline.IterationState(state.iteration + 1, policy, policy.copy())
    save_checkpoint(out / "checkpoint.json", new_state)
    t = new_state.iteration
    rows = [(t, s, repr(l), "overall", "train_loss", repr(l)) for s, l in enumerate(losses)]
    rows += [(t, "", "", "overall", "corpus_loss_start", repr(start)), (t, "", "", "overall", "corpus_loss_end", repr(end))]
    _write_csv(out / "metrics.csv", pipeline.METRICS_HEADER, rows)
    print(f"trained {len(losses)} steps; pair-corpus loss {start:.4f} -> {end:.4f}")


def cmd_iterate(args, cfg, out):
    if args.iterations is not None:
        cfg.iterations = args.iterations
    dump_config(cfg, out / "config.json")
    result = pipeline.run_pipeline(cfg)
    pipeline.write_metrics_csv(result, out / "metrics.csv")
    save_checkpoint(out / "checkpoint.json", result.state)
    files = ["config.json", "metrics.csv", "checkpoint.json", "manifest.json"]
    if cfg.mode is RunMode.CONTINUOUS:
        rows = pipeline.dropout_diversity(cfg, result.state.policy)
        _write_csv(out / "diversity.csv", ["dropout_rate", "variance", "mean_score", "max_score"],
                   [(repr(r["dropout_rate"]), repr(r["variance"]), repr(r["mean_score"]), repr(r["max_score"])) for r in rows])
        files.append("diversity.csv")
    if args.dump_pairs:
        recs = []
        for rec in result.state.history:
            for p, w, l in rec["pairs"]:
                recs.append({"iteration": rec["iteration"], "prompt_index": int(p), "chosen_index": int(w), "rejected_index": int(l)})
        records.write_jsonl(out / "pairs.jsonl", recs, "pair")
        files.append("pairs.jsonl")
    manifest = {
        "schema_version": CHECKPOINT_SCHEMA,
        "mode": cfg.mode.value,
        "seed": cfg.seed,
        "iterations_completed": result.state.iteration,
        "files": files,
        "heldout_ground_truth": result.overall,
        "final_eval": result.evals[-1].to_json(),
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    print("held-out ground truth by iteration: " + ", ".join(f"{v:.4f}" for v in result.overall))


def cmd_eval(args, cfg, out):
    env = pipeline.Environment.from_config(cfg)
    state = _state(args, cfg, out)
    report = pipeline.evaluate(state.policy, pipeline.heldout_prompts(cfg, env), env, cfg.mode)
    with open(out / "eval.json", "w") as fh:
        json.dump(report.to_json(), fh, indent=2, sort_keys=True)
    rows = [(c, v["n"], f"{v['ground_truth']:.4f}", f"{v['alignment']:.4f}") for c, v in report.per_category.items()]
    rows.append(("overall", report.n_prompts, f"{report.overall_ground_truth:.4f}", f"{report.overall_alignment:.4f}"))
    _print_rows(["category", "n", "ground_truth", "alignment"], rows)


def cmd_sweep(args, cfg, out):
    if args.iterations is not None:
        cfg.iterations = args.iterations
    grid = json.loads(args.grid) if args.grid else {}
    if args.kernels:
        grid["kernel"] = [dict(k.to_json(), gamma=cfg.kernel.gamma) for k in ALL_KERNELS]
    if args.feedback:
        grid["feedback"] = [m.value for m in world.FeedbackMode]
    if not grid:
        raise UsageError("sweep needs --grid, --kernels or --feedback")
    rows = pipeline.ablation_sweep(cfg, grid)
    cats = [c.value for c in Category]
    header = ["point", "initial", "final", "improvement"] + cats
    table = [
        [json.dumps(r["point"], sort_keys=True), repr(r["initial"]), repr(r["final"]), repr(r["improvement"])]
        + [repr(r["report"].per_category[c]["ground_truth"]) for c in cats]
        for r in rows
    ]
    _write_csv(out / "sweep.csv", header, table)
    _print_rows(header, table)


def _read_metrics(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != pipeline.METRICS_HEADER:
            raise ValueError(f"{path} does not have the metrics header")
        return list(reader)


def cmd_report(args, cfg, out):
    metrics_path = Path(args.metrics) if args.metrics else out / "metrics.csv"
    if not metrics_path.exists():
        raise FileNotFoundError(f"missing input file: {metrics_path}")
    rows = _read_metrics(metrics_path)
    report_dir = out / "report"
    report_dir.mkdir(parents=True, exist_ok=True)

    by_metric: dict[str, dict[str, list[tuple[float, float]]]] = defaultdict(lambda: defaultdict(list))
    for r in rows:
        if r["metric"] == "train_loss":
            # one curve across iterations: x is the global step
            by_metric["train_loss"][f"iteration {r['iteration']}"].append((int(r["step"]), float(r["value"])))
        else:
            by_metric[r["metric"]][r["category"]].append((int(r["iteration"]), float(r["value"])))
    for metric, series in by_metric.items():
        xlabel = "step" if metric == "train_loss" else "iteration"
        line_chart(
            {k: ([x for x, _ in pts], [y for _, y in pts]) for k, pts in series.items()},
            report_dir / f"{metric}.svg", title=metric.replace("_", " "), xlabel=xlabel, ylabel=metric,
            markers=metric != "train_loss",
        )

    table = by_metric.get("ground_truth", {})
    iterations = sorted({x for pts in table.values() for x, _ in pts})
    header = ["category"] + [f"iter{t}" for t in iterations]
    body = []
    for cat, pts in table.items():
        vals = dict(pts)
        body.append([cat] + [f"{vals[t]:.4f}" if t in vals else "" for t in iterations])
    _write_csv(report_dir / "scores.csv", header, body)
    _print_rows(header, body)

    diversity_path = metrics_path.parent / "diversity.csv"
    if diversity_path.exists():
        with open(diversity_path, newline="") as fh:
            drows = list(csv.DictReader(fh))
        rates = [float(r["dropout_rate"]) for r in drows]
        line_chart({"coordinate variance": (rates, [float(r["variance"]) for r in drows])},
                   report_dir / "diversity.svg", title="diversity vs dropout rate", xlabel="dropout rate", ylabel="variance")
        summary = [[r["dropout_rate"], f"{float(r['variance']):.6f}", f"{float(r['mean_score']):.4f}", f"{float(r['max_score']):.4f}"]
                   for r in drows]
        _write_csv(report_dir / "diversity_summary.csv", ["dropout_rate", "variance", "mean_score", "max_score"], summary)
        print()
        _print_rows(["dropout_rate", "variance", "mean_score", "max_score"], summary)


COMMANDS = {
    "gen-prompts": cmd_gen_prompts,
    "sample": cmd_sample,
    "score": cmd_score,
    "make-pairs": cmd_make_pairs,
    "train": cmd_train,
    "iterate": cmd_iterate,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="run configuration JSON (schema_version required)")
    common.add_argument("--seed", type=int, help="run seed (overrides the config)")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--override", action="append", metavar="KEY=VALUE", help="dotted config override; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="selfalign", description="Self-improvement loop on a synthetic compositional world.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-prompts", parents=[common], help="write prompts.jsonl and questions.jsonl")
    p.add_argument("--n", type=int, default=8, help="prompts per category")
    p.add_argument("--category", choices=[c.value for c in Category])
    p.add_argument("--template", help="force one template, e.g. single, pair, spatial, count, two-count")

    for name, help_ in (("sample", "sample candidates for prompts.jsonl"), ("score", "score samples with the judge"),
                        ("make-pairs", "rank scores into preference pairs"), ("train", "fit the policy to pairs.jsonl"),
                        ("eval", "evaluate a checkpoint on held-out prompts")):
        p = sub.add_parser(name, parents=[common], help=help_)
        if name in ("sample", "train", "eval"):
            p.add_argument("--checkpoint", help="policy checkpoint (default: OUT/checkpoint.json or a fresh policy)")
        if name in ("sample", "score", "train"):
            p.add_argument("--prompts", dest="prompts_jsonl")
        if name in ("score", "train"):
            p.add_argument("--samples", dest="samples_npz")
        if name == "make-pairs":
            p.add_argument("--scores", dest="scores_jsonl")
        if name == "train":
            p.add_argument("--pairs", dest="pairs_jsonl")

    p = sub.add_parser("iterate", parents=[common], help="run the full loop")
    p.add_argument("--iterations", type=int)
    p.add_argument("--dump-pairs", action="store_true", help="also write every iteration's pairs to pairs.jsonl")

    p = sub.add_parser("sweep", parents=[common], help="ablation grid over config paths")
    p.add_argument("--grid", help='JSON object of dotted path -> list of values, e.g. {"pairs.top_n": [1, 5]}')
    p.add_argument("--kernels", action="store_true", help="sweep all six kernel specs")
    p.add_argument("--feedback", action="store_true", help="sweep the feedback modes")
    p.add_argument("--iterations", type=int)

    p = sub.add_parser("report", parents=[common], help="charts and tables from metrics.csv")
    p.add_argument("--metrics", help="metrics CSV (default: OUT/metrics.csv)")
    return parser


def _error(kind: str, exc: BaseException, code: int) -> int:
    print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _error("usage", exc, EXIT_USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = _config(args)
    except FileNotFoundError as exc:
        return _error("file", exc, EXIT_FILE)
    except (ValueError, TypeError, json.JSONDecodeError) as exc:
        return _error("usage", exc, EXIT_USAGE)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        return _error("locked", RuntimeError(f"{out} is in use by another process"), EXIT_FAILURE)
    try:
        COMMANDS[args.command](args, cfg, out)
    except UsageError as exc:
        return _error("usage", exc, EXIT_USAGE)
    except FileNotFoundError as exc:
        return _error("file", exc, EXIT_FILE)
    except Exception as exc:  # noqa: BLE001 - reported as a machine-readable record
        log.debug("command failed", exc_info=True)
        return _error(type(exc).__name__, exc, EXIT_FAILURE)
    finally:
        lock.release()
    return 0


if __name__ == "__main__":
    sys.exit(main())
