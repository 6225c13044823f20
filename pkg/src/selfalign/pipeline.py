"""The self-improvement loop.

One iteration: draw a fresh prompt corpus, sample M candidate
representations per prompt, decode them into scenes, score every scene with
the judge against the prompt's decomposed questions, turn the ranking into
preference pairs, and fit the policy to those pairs with DPO (discrete) or
the kernel continuous objective.  The policy at the end of an iteration
becomes the next iteration's reference.

Ground-truth scores are computed for reporting only; nothing in the training
path reads them.
"""

from __future__ import annotations

import copy
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import world
from .config import PairPolicy, RunConfig, RunMode, apply_overrides
from .core import Category, PromptSpec, Rng, TokenSequence, sample_var, softplus
from .losses import ContinuousQuadruple, dpo_logprob_weights, dpo_margins, kcdpo_loss_and_grad
from .models import ArPolicy, AdamState, DropoutNet, PromptEncoder, apply_grad_step, lr_schedule, sample_dropdiv_batch

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    pass


# -- preference pairs ------------------------------------------------------------------


class PreferencePair(NamedTuple):
    prompt_id: str
    chosen: object
    rejected: object
    chosen_score: float
    rejected_score: float
    chosen_index: int
    rejected_index: int


def rank_pairs(policy: PairPolicy, scores: Sequence[float]) -> list[tuple[int, int]]:
    """(chosen, rejected) candidate indices from one prompt's scores.

    Candidates are ranked by score, descending, ties broken by index.  Every
    top-N candidate is paired with every rejected-window candidate; pairs
    without a strict score gap are dropped.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) != policy.samples_per_prompt:
        raise ValueError(f"expected {policy.samples_per_prompt} candidates, got {len(scores)}")
    if not np.all(np.isfinite(scores)):
        raise ValueError("candidate scores must be finite")
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    chosen = order[: policy.top_n]
    if policy.negative_range is not None:
        lo, hi = policy.negative_range
        rejected = order[lo:hi]
    else:
        rejected = order[len(order) - policy.last_n :]
    return [(w, l) for w in chosen for l in rejected if scores[w] > scores[l]]


def build_pairs(policy: PairPolicy, candidates: Sequence[tuple[object, float]], prompt_id: str = "") -> list[PreferencePair]:
    scores = [s for _, s in candidates]
    return [
        PreferencePair(prompt_id, candidates[w][0], candidates[l][0], float(scores[w]), float(scores[l]), w, l)
        for w, l in rank_pairs(policy, scores)
    ]


# -- environment ----------------------------------------------------------------------


@dataclass
class Environment:
    """Everything frozen during a run: vocabulary, encoder, decoders and judge."""

    vocab: world.WorldVocab
    encoder: PromptEncoder
    decoder: world.DecoderSpec
    grammar: world.TokenGrammar
    judge: world.JudgeSpec

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "Environment":
        vocab = world.DEFAULT_VOCAB
        w, m = cfg.world, cfg.model
        return cls(
            vocab=vocab,
            encoder=PromptEncoder(w.world_seed, m.enc_dim, vocab),
            decoder=world.DecoderSpec(w.world_seed, m.rows, m.dim, vocab, w.presence_threshold, w.semantic_threshold),
            grammar=world.TokenGrammar(vocab, m.vocab_size),
            judge=world.JudgeSpec(cfg.judge.sharpness, cfg.judge.error_rate, cfg.judge.other_mass, cfg.judge.renormalize),
        )

    def decode(self, reps, mode: RunMode) -> list:
        if mode is RunMode.CONTINUOUS:
            return world.decode_continuous_batch(self.decoder, reps)
        toks = np.asarray(reps).reshape(-1, np.asarray(reps).shape[-1])
        V = self.grammar.vocab_size
        return [world.decode_discrete(self.grammar, TokenSequence(row, V)) for row in toks]


def make_policy(cfg: RunConfig):
    m = cfg.model
    if cfg.mode is RunMode.CONTINUOUS:
        return DropoutNet.init(
            m.enc_dim, (m.rows, m.dim), m.hidden, m.n_hidden, m.dropout_layers,
            m.dropout_rate, seed=cfg.seed, output_scale=m.output_scale,
        )
    return ArPolicy.init(m.enc_dim, m.vocab_size, m.max_len, seed=cfg.seed, init_scale=m.init_scale,
                         temperature=m.temperature, top_p=m.top_p)


def heldout_prompts(cfg: RunConfig, env: Environment) -> list[PromptSpec]:
    return world.generate_corpus(env.vocab, cfg.world.heldout_per_category, Rng(cfg.seed).split("heldout"))


def training_corpus(cfg: RunConfig, env: Environment, iteration: int, exclude) -> list[PromptSpec]:
    rng = Rng(cfg.seed).split("iteration", iteration, "corpus")
    return world.generate_corpus(env.vocab, cfg.world.prompts_per_category, rng, exclude)


# -- evaluation -----------------------------------------------------------------------------


@dataclass
class EvalReport:
    per_category: dict[str, dict[str, float]]
    overall_ground_truth: float
    overall_alignment: float
    n_prompts: int

    def to_json(self) -> dict:
        return {
            "per_category": self.per_category,
            "overall_ground_truth": self.overall_ground_truth,
            "overall_alignment": self.overall_alignment,
            "n_prompts": self.n_prompts,
        }


def deterministic_outputs(policy, encs: np.ndarray) -> np.ndarray:
    if isinstance(policy, DropoutNet):
        return policy.forward(encs)
    return policy.greedy_tokens(encs)


def evaluate(policy, prompts: Sequence[PromptSpec], env: Environment, mode: RunMode) -> EvalReport:
    """Score deterministic generations (dropout off / greedy decoding) on ``prompts``."""
    encs = env.encoder.encode_many(prompts)
    scenes = env.decode(deterministic_outputs(policy, encs), mode)
    by_cat: dict[str, list[tuple[float, float]]] = {}
    for prompt, scene in zip(prompts, scenes):
        qs = world.decompose_questions(prompt, env.vocab)
        gt = world.ground_truth_score(prompt, scene)
        al = world.alignment_score(env.judge, scene, qs)
        by_cat.setdefault(prompt.category.value, []).append((gt, al))
    per_category = {}
    for cat in Category:
        rows = by_cat.get(cat.value)
        if rows:
            arr = np.asarray(rows)
            per_category[cat.value] = {"n": len(rows), "ground_truth": float(arr[:, 0].mean()), "alignment": float(arr[:, 1].mean())}
    all_rows = np.asarray([r for rows in by_cat.values() for r in rows])
    return EvalReport(per_category, float(all_rows[:, 0].mean()), float(all_rows[:, 1].mean()), len(prompts))


# -- iteration ------------------------------------------------------------------------


@dataclass
class IterationState:
    iteration: int
    policy: object
    reference: object
    history: list[dict] = field(default_factory=list)


def initial_state(cfg: RunConfig) -> IterationState:
    policy = make_policy(cfg)
    return IterationState(0, policy, policy.copy(), [])


@dataclass
class CandidateBatch:
    """Sampled candidates and their feedback for one corpus."""

    prompts: list[PromptSpec]
    encodings: np.ndarray
    reps: np.ndarray  # (P, M, L, D) features or (P, M, T) tokens
    scores: np.ndarray  # (P, M) feedback scores
    ground_truth: np.ndarray  # (P, M), reporting only
    alignment: np.ndarray  # (P, M)


def sample_candidates(policy, encs: np.ndarray, cfg: RunConfig, rng: Rng) -> np.ndarray:
    M = cfg.pairs.samples_per_prompt
    if cfg.mode is RunMode.CONTINUOUS:
        return sample_dropdiv_batch(policy, encs, M, rng)
    flat = np.repeat(encs, M, axis=0)
    toks = policy.sample_tokens(flat, rng.generator())
    return toks.reshape(len(encs), M, -1)


def score_candidates(prompts, reps, env: Environment, cfg: RunConfig, rng: Rng, with_ground_truth=True):
    """Feedback scores (and reporting-only ground truth) for every candidate."""
    P, M = reps.shape[:2]
    scenes = env.decode(reps.reshape((P * M,) + reps.shape[2:]), cfg.mode)
    gen = rng.generator()
    scores = np.zeros((P, M))
    align = np.zeros((P, M))
    gt = np.full((P, M), np.nan)
    for i, prompt in enumerate(prompts):
        qs = world.decompose_questions(prompt, env.vocab)
        for j in range(M):
            scene = scenes[i * M + j]
            align[i, j] = world.alignment_score(env.judge, scene, qs)
            if cfg.feedback is world.FeedbackMode.DIFF_OF_PROB:
                scores[i, j] = align[i, j]
            else:
                scores[i, j] = world.feedback_score(cfg.feedback, env.judge, scene, qs, gen)
            if with_ground_truth:
                gt[i, j] = world.ground_truth_score(prompt, scene)
    return scores, gt, align


def collect_pairs(policy: PairPolicy, scores: np.ndarray) -> np.ndarray:
    """(prompt, chosen, rejected) index triples for the whole corpus."""
    rows = []
    for i, s in enumerate(scores):
        rows += [(i, w, l) for w, l in rank_pairs(policy, s)]
    return np.asarray(rows, dtype=np.int64).reshape(-1, 3)


class _ContinuousObjective:
    def __init__(self, cfg, policy, reference, encs, reps, pairs):
        self.spec = cfg.kernel.spec()
        self.stochastic = cfg.model.stochastic_training
        self.encs, self.reps, self.pairs = encs, reps, pairs
        self.ref_out = reference.forward(encs)

    def loss_and_grads(self, policy, idx, gen):
        p, w, l = self.pairs[idx].T
        masks = policy.draw_masks(len(idx), gen) if self.stochastic else None
        H, cache = policy.forward_cache(self.encs[p], masks)
        quad = ContinuousQuadruple(H, self.ref_out[p], self.reps[p, w], self.reps[p, l])
        losses, dH = kcdpo_loss_and_grad(self.spec, quad)
        return float(losses.mean()), policy.backward(cache, dH / len(idx))

    def corpus_loss(self, policy, chunk=4096):
        H = policy.forward(self.encs)
        total = 0.0
        for start in range(0, len(self.pairs), chunk):
            p, w, l = self.pairs[start : start + chunk].T
            quad = ContinuousQuadruple(H[p], self.ref_out[p], self.reps[p, w], self.reps[p, l])
            total += float(kcdpo_loss_and_grad(self.spec, quad)[0].sum())
        return total / len(self.pairs)


class _DiscreteObjective:
    def __init__(self, cfg, policy, reference, encs, reps, pairs):
        self.beta = cfg.dpo.beta
        self.encs, self.reps, self.pairs = encs, reps, pairs
        p, w, l = pairs.T
        self.ref_chosen = reference.logprobs(encs[p], reps[p, w])
        self.ref_rejected = reference.logprobs(encs[p], reps[p, l])

    def _margins(self, policy, idx):
        p, w, l = self.pairs[idx].T
        pc = policy.logprobs(self.encs[p], self.reps[p, w])
        pr = policy.logprobs(self.encs[p], self.reps[p, l])
        return dpo_margins(self.beta, pc, self.ref_chosen[idx], pr, self.ref_rejected[idx])

    def loss_and_grads(self, policy, idx, gen):
        p, w, l = self.pairs[idx].T
        m = self._margins(policy, idx)
        wts = dpo_logprob_weights(self.beta, m) / len(idx)
        encs = np.concatenate([self.encs[p], self.encs[p]])
        toks = np.concatenate([self.reps[p, w], self.reps[p, l]])
        grads = policy.logprob_grads(encs, toks, np.concatenate([wts, -wts]))
        return float(softplus(-m).mean()), grads

    def corpus_loss(self, policy):
        return float(softplus(-self._margins(policy, np.arange(len(self.pairs)))).mean())


def train_on_pairs(policy, reference, encs, reps, pairs, cfg: RunConfig, rng: Rng):
    """Run the configured optimizer steps; returns (losses, corpus loss before, after)."""
    cls = _ContinuousObjective if cfg.mode is RunMode.CONTINUOUS else _DiscreteObjective
    objective = cls(cfg, policy, reference, encs, reps, pairs)
    opt = cfg.optim
    start_loss = objective.corpus_loss(policy)
    state = AdamState.zeros_like(policy.params())
    gen = rng.generator()
    order = gen.permutation(len(pairs))
    cursor, losses = 0, []
    for step in range(opt.steps):
        if cursor + opt.batch_size > len(order):
            order = np.concatenate([order[cursor:], gen.permutation(len(pairs))])
            cursor = 0
        idx = order[cursor : cursor + opt.batch_size]
        cursor += opt.batch_size
        loss, grads = objective.loss_and_grads(policy, idx, gen)
        lr = lr_schedule(step, opt.lr, opt.warmup, opt.steps)
        policy.set_params(apply_grad_step(policy.params(), grads, state, lr))
        losses.append(loss)
    end_loss = objective.corpus_loss(policy)
    return losses, start_loss, end_loss


def run_iteration(state: IterationState, cfg: RunConfig, env: Environment, rng: Rng | None = None,
                  exclude=frozenset()) -> IterationState:
    """One full generate / score / pair / train pass; returns the next state."""
    t = state.iteration
    rng = rng if rng is not None else Rng(cfg.seed)
    it_rng = rng.split("iteration", t)
    prompts = training_corpus(cfg, env, t, exclude)
    encs = env.encoder.encode_many(prompts)
    policy = state.policy.copy()
    reference = state.policy.copy()
    reps = sample_candidates(policy, encs, cfg, it_rng.split("sample"))
    scores, gt, align = score_candidates(prompts, reps, env, cfg, it_rng.split("feedback"))
    pairs = collect_pairs(cfg.pairs, scores)
    if len(pairs) == 0:
        raise PipelineError(f"iteration {t}: every prompt produced tied scores, no preference pairs")
    if not np.all(scores[pairs[:, 0], pairs[:, 1]] > scores[pairs[:, 0], pairs[:, 2]]):
        raise PipelineError(f"iteration {t}: pair audit found a chosen candidate not strictly preferred")
    losses, loss_start, loss_end = train_on_pairs(policy, reference, encs, reps, pairs, cfg, it_rng.split("train"))
    record = {
        "iteration": t + 1,
        "n_prompts": len(prompts),
        "n_pairs": int(len(pairs)),
        "prompts_without_pairs": int(len(prompts) - len(np.unique(pairs[:, 0]))),
        "sample_ground_truth": float(np.mean(gt)),
        "sample_alignment": float(np.mean(align)),
        "pair_gap": float(np.mean(scores[pairs[:, 0], pairs[:, 1]] - scores[pairs[:, 0], pairs[:, 2]])),
        "losses": losses,
        "corpus_loss_start": loss_start,
        "corpus_loss_end": loss_end,
        "pairs": pairs,
    }
    return IterationState(t + 1, policy, policy.copy(), state.history + [record])


@dataclass
class RunResult:
    state: IterationState
    evals: list[EvalReport]

    @property
    def overall(self) -> list[float]:
        return [e.overall_ground_truth for e in self.evals]


def run_pipeline(cfg: RunConfig, on_iteration: Callable[[IterationState, EvalReport], None] | None = None) -> RunResult:
    """Evaluate the initial policy, then iterate, evaluating after each iteration."""
    env = Environment.from_config(cfg)
    heldout = heldout_prompts(cfg, env)
    exclude = {world.prompt_key(p) for p in heldout}
    state = initial_state(cfg)
    evals = [evaluate(state.policy, heldout, env, cfg.mode)]
    if on_iteration:
        on_iteration(state, evals[-1])
    rng = Rng(cfg.seed)
    for _ in range(cfg.iterations):
        state = run_iteration(state, cfg, env, rng, exclude)
        evals.append(evaluate(state.policy, heldout, env, cfg.mode))
        log.info("iteration %d: held-out ground truth %.4f", state.iteration, evals[-1].overall_ground_truth)
        if on_iteration:
            on_iteration(state, evals[-1])
        if cfg.plateau_delta is not None and abs(evals[-1].overall_ground_truth - evals[-2].overall_ground_truth) < cfg.plateau_delta:
            break
    return RunResult(state, evals)


# -- metrics -------------------------------------------------------------------------

METRICS_HEADER = ("iteration", "step", "loss", "category", "metric", "value")


def _fmt(v) -> str:
    if v is None or v == "":
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_rows(result: RunResult) -> list[tuple]:
    rows = []
    for t, report in enumerate(result.evals):
        if t > 0:
            rec = result.state.history[t - 1]
            for step, loss in enumerate(rec["losses"]):
                rows.append((t, step, loss, "overall", "train_loss", loss))
            for key in ("sample_ground_truth", "sample_alignment", "n_pairs", "corpus_loss_start", "corpus_loss_end"):
                rows.append((t, "", "", "overall", key, rec[key]))
        for cat, vals in report.per_category.items():
            rows.append((t, "", "", cat, "ground_truth", vals["ground_truth"]))
            rows.append((t, "", "", cat, "alignment", vals["alignment"]))
        rows.append((t, "", "", "overall", "ground_truth", report.overall_ground_truth))
        rows.append((t, "", "", "overall", "alignment", report.overall_alignment))
    return [tuple(_fmt(v) for v in r) for r in rows]


def write_metrics_csv(result: RunResult, path):
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        writer.writerows(metrics_rows(result))


# -- diversity and sweeps -------------------------------------------------------------------


def dropout_diversity(cfg: RunConfig, policy: DropoutNet, rates=(0.0, 0.05, 0.15, 0.3), n_prompts: int = 32,
                      samples: int = 10) -> list[dict]:
    """Per-rate sample variance and judge scores of DropDiv candidates on held-out prompts."""
    env = Environment.from_config(cfg)
    prompts = heldout_prompts(cfg, env)[:: max(1, len(heldout_prompts(cfg, env)) // n_prompts)][:n_prompts]
    encs = env.encoder.encode_many(prompts)
    rows = []
    for rate in rates:
        net = policy.copy()
        net.dropout_rate = rate
        reps = sample_dropdiv_batch(net, encs, samples, Rng(cfg.seed).split("diversity", repr(rate)))
        sub = copy.deepcopy(cfg)
        sub.feedback = world.FeedbackMode.DIFF_OF_PROB
        scores, _, _ = score_candidates(prompts, reps, env, sub, Rng(cfg.seed), with_ground_truth=False)
        rows.append({
            "dropout_rate": rate,
            "variance": float(np.mean(sample_var(reps, axis=1))),
            "mean_score": float(scores.mean()),
            "max_score": float(scores.max(axis=1).mean()),
        })
    return rows


def expand_grid(grid: dict[str, list]) -> list[dict]:
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def ablation_sweep(base: RunConfig, grid: dict[str, list]) -> list[dict]:
    """Run the pipeline once per grid point (dotted config paths -> values)."""
    import json

    rows = []
    for point in expand_grid(grid):
        overrides = [f"{k}={json.dumps(v)}" for k, v in point.items()]
        cfg = apply_overrides(base, overrides)
        result = run_pipeline(cfg)
        rows.append({
            "point": point,
            "initial": result.evals[0].overall_ground_truth,
            "final": result.evals[-1].overall_ground_truth,
            "improvement": result.evals[-1].overall_ground_truth - result.evals[0].overall_ground_truth,
            "report": result.evals[-1],
        })
    return rows
