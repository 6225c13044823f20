"""Toy trainable generators: a dropout MLP for feature matrices and an autoregressive token policy.

Both keep their parameters as plain float64 arrays and expose hand-written
backward passes, so every gradient can be checked against finite
differences.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import FactKind, PromptSpec, Rng, TokenSequence, log_softmax
from .world import DEFAULT_VOCAB, WorldVocab

CHECKPOINT_VERSION = 1


class Mode(str, enum.Enum):
    DETERMINISTIC = "Deterministic"
    STOCHASTIC = "Stochastic"


# -- prompt encoding ------------------------------------------------------------------


@dataclass
class PromptEncoder:
    """Bag of fact embeddings: each fact is ``tanh`` of the sum of its component embeddings."""

    seed: int
    dim: int = 32
    vocab: WorldVocab = DEFAULT_VOCAB
    tables: dict = field(init=False, repr=False)

    def __post_init__(self):
        gen = Rng(self.seed).split("encoder").generator()
        v = self.vocab
        sizes = {
            "kind": len(FactKind),
            "subject": v.n_objects,
            "object": v.n_objects,
            "attribute": v.n_attributes,
            "count": v.max_count,
            "spatial": len(v.spatial),
            "semantic": len(v.semantic),
        }
        self.tables = {k: gen.standard_normal((n, self.dim)) for k, n in sizes.items()}

    def encode_fact(self, fact) -> np.ndarray:
        t = self.tables
        vec = t["kind"][list(FactKind).index(fact.kind)] + t["subject"][fact.subject]
        if fact.kind is FactKind.ATTRIBUTE_BINDING:
            vec = vec + t["attribute"][fact.payload]
        elif fact.kind is FactKind.COUNT:
            vec = vec + t["count"][fact.payload - 1]
        elif fact.kind is FactKind.SPATIAL_RELATION:
            vec = vec + t["spatial"][fact.payload[0]] + t["object"][fact.payload[1]]
        elif fact.kind is FactKind.SEMANTIC_RELATION:
            vec = vec + t["semantic"][fact.payload[0]] + t["object"][fact.payload[1]]
        return np.tanh(vec / 2.0)

    def encode(self, prompt: PromptSpec) -> np.ndarray:
        return sum(self.encode_fact(f) for f in prompt.facts)

    def encode_many(self, prompts: Sequence[PromptSpec]) -> np.ndarray:
        return np.stack([self.encode(p) for p in prompts])


# -- continuous generator -------------------------------------------------------------------


@dataclass
class DropoutNet:
    """Tanh MLP from prompt encoding to an ``(L, D)`` feature matrix.

    ``weights[i]`` has shape ``(fan_in, fan_out)``; the final layer is linear.
    Inverted dropout is applied to the outputs of the hidden layers listed in
    ``dropout_layers`` when run stochastically.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    out_shape: tuple[int, int]
    dropout_layers: tuple[int, ...] = ()
    dropout_rate: float = 0.0

    def __post_init__(self):
        self.out_shape = tuple(int(x) for x in self.out_shape)
        self.dropout_layers = tuple(sorted(int(i) for i in self.dropout_layers))
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise ValueError("dropout rate must lie in [0, 1]")
        n_hidden = len(self.weights) - 1
        if any(not 0 <= i < n_hidden for i in self.dropout_layers):
            raise ValueError("dropout layers must index hidden layers")
        if self.weights[-1].shape[1] != self.out_shape[0] * self.out_shape[1]:
            raise ValueError("output layer width does not match out_shape")

    @classmethod
    def init(
        cls,
        input_dim: int,
        out_shape: tuple[int, int] = (8, 16),
        hidden: int = 64,
        n_hidden: int = 4,
        dropout_layers: Sequence[int] | None = None,
        dropout_rate: float = 0.15,
        seed: int = 0,
        output_scale: float = 1.0,
    ) -> "DropoutNet":
        gen = Rng(seed).split("dropout-net").generator()
        sizes = [input_dim] + [hidden] * n_hidden + [out_shape[0] * out_shape[1]]
        weights, biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            scale = 1.0 / math.sqrt(fan_in)
            if i == len(sizes) - 2:
                scale *= output_scale
            weights.append(gen.standard_normal((fan_in, fan_out)) * scale)
            biases.append(np.zeros(fan_out))
        if dropout_layers is None:
            dropout_layers = tuple(range(max(0, n_hidden - 2), n_hidden))
        return cls(weights, biases, out_shape, tuple(dropout_layers), dropout_rate)

    @property
    def n_hidden(self) -> int:
        return len(self.weights) - 1

    def params(self) -> list[np.ndarray]:
        return [p for wb in zip(self.weights, self.biases) for p in wb]

    def set_params(self, params: Sequence[np.ndarray]):
        self.weights = [np.array(p, dtype=np.float64) for p in params[0::2]]
        self.biases = [np.array(p, dtype=np.float64) for p in params[1::2]]

    def copy(self) -> "DropoutNet":
        return DropoutNet([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                          self.out_shape, self.dropout_layers, self.dropout_rate)

    def dropout_widths(self) -> list[int]:
        return [self.weights[i].shape[1] for i in self.dropout_layers]

    def _keep_scale(self) -> float:
        return 0.0 if self.dropout_rate >= 1.0 else 1.0 / (1.0 - self.dropout_rate)

    def draw_masks(self, batch: int, gen: np.random.Generator) -> list[np.ndarray]:
        """Keep masks (1 = keep) for each dropout layer."""
        return [
            (gen.random((batch, w)) >= self.dropout_rate).astype(np.float64)
            for w in self.dropout_widths()
        ]

    def forward_cache(self, enc: np.ndarray, masks: Sequence[np.ndarray] | None = None):
        """Batched forward; ``masks`` (keep indicators) switch dropout on."""
        x = np.asarray(enc, dtype=np.float64)
        cache = {"inputs": [], "pre": [], "scales": []}
        mask_iter = iter(masks) if masks is not None else None
        for i in range(self.n_hidden):
            cache["inputs"].append(x)
            x = np.tanh(x @ self.weights[i] + self.biases[i])
            cache["pre"].append(x)
            scale = None
            if mask_iter is not None and i in self.dropout_layers:
                scale = next(mask_iter) * self._keep_scale()
                x = x * scale
            cache["scales"].append(scale)
        cache["inputs"].append(x)
        out = x @ self.weights[-1] + self.biases[-1]
        return out.reshape(out.shape[:-1] + self.out_shape), cache

    def forward_with_masks(self, enc, masks):
        return self.forward_cache(enc, masks)[0]

    def forward(self, enc, mode: Mode = Mode.DETERMINISTIC, gen: np.random.Generator | None = None):
        enc = np.asarray(enc, dtype=np.float64)
        if Mode(mode) is Mode.DETERMINISTIC:
            return self.forward_cache(enc)[0]
        batch = enc.shape[0] if enc.ndim > 1 else 1
        masks = self.draw_masks(batch, gen)
        if enc.ndim == 1:
            masks = [m[0] for m in masks]
        return self.forward_cache(enc, masks)[0]

    def backward(self, cache, d_out: np.ndarray) -> list[np.ndarray]:
        """Parameter gradients, ordered like :meth:`params`, summed over the batch."""
        g = np.asarray(d_out, dtype=np.float64)
        g = g.reshape(g.shape[:-2] + (-1,))
        g2 = g.reshape(-1, g.shape[-1])
        grads = []
        x = cache["inputs"][-1].reshape(-1, self.weights[-1].shape[0])
        grads.append((x.T @ g2, g2.sum(axis=0)))
        delta = g2 @ self.weights[-1].T
        for i in reversed(range(self.n_hidden)):
            scale = cache["scales"][i]
            if scale is not None:
                delta = delta * scale.reshape(delta.shape)
            act = cache["pre"][i].reshape(delta.shape)
            delta = delta * (1.0 - act * act)
            x = cache["inputs"][i].reshape(delta.shape[0], -1)
            grads.append((x.T @ delta, delta.sum(axis=0)))
            delta = delta @ self.weights[i].T
        out = []
        for gw, gb in reversed(grads):
            out += [gw, gb]
        return out

    def to_json(self) -> dict:
        return {
            "kind": "DropoutNet",
            "version": CHECKPOINT_VERSION,
            "out_shape": list(self.out_shape),
            "dropout_layers": list(self.dropout_layers),
            "dropout_rate": self.dropout_rate,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_json(cls, d: dict) -> "DropoutNet":
        _check_version(d, "DropoutNet")
        return cls(
            [np.array(w, dtype=np.float64) for w in d["weights"]],
            [np.array(b, dtype=np.float64) for b in d["biases"]],
            tuple(d["out_shape"]),
            tuple(d["dropout_layers"]),
            float(d["dropout_rate"]),
        )


def forward_continuous(net: DropoutNet, enc) -> np.ndarray:
    """The deterministic output (the Gaussian mean) for one prompt encoding."""
    return net.forward(enc, Mode.DETERMINISTIC)


def sample_dropdiv(net: DropoutNet, enc, num_samples: int, rng: Rng) -> np.ndarray:
    """``num_samples`` stochastic forwards for one encoding, shape ``(M, L, D)``."""
    enc = np.asarray(enc, dtype=np.float64)
    batch = np.broadcast_to(enc, (num_samples,) + enc.shape)
    return net.forward(batch, Mode.STOCHASTIC, rng.generator())


def sample_dropdiv_batch(net: DropoutNet, encs, num_samples: int, rng: Rng) -> np.ndarray:
    """Stochastic forwards for many prompts, shape ``(P, M, L, D)``.

    Prompt ``i`` draws from its own stream ``rng.split(i)``.
    """
    encs = np.asarray(encs, dtype=np.float64)
    P = encs.shape[0]
    masks = [net.draw_masks(num_samples, rng.split(i).generator()) for i in range(P)]
    stacked = [np.concatenate([m[j] for m in masks]) for j in range(len(net.dropout_layers))]
    flat = np.repeat(encs, num_samples, axis=0)
    out = net.forward_cache(flat, stacked)[0]
    return out.reshape((P, num_samples) + net.out_shape)


# -- discrete generator ------------------------------------------------------------------


@dataclass
class ArPolicy:
    """Autoregressive categorical policy over fixed-length token sequences.

    Step ``t`` logits are ``enc @ enc_weights[t].T + prev_table[z_{t-1}] + pos_bias[t]``,
    with row ``V`` of ``prev_table`` standing for the start of the sequence.
    """

    enc_weights: np.ndarray  # (T, V, E)
    prev_table: np.ndarray  # (V + 1, V)
    pos_bias: np.ndarray  # (T, V)
    temperature: float = 1.0
    top_p: float = 1.0

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must lie in (0, 1]")

    @classmethod
    def init(cls, enc_dim: int, vocab_size: int = 64, max_len: int = 12, seed: int = 0,
             init_scale: float = 0.1, temperature: float = 1.0, top_p: float = 1.0) -> "ArPolicy":
        gen = Rng(seed).split("ar-policy").generator()
        return cls(
            gen.standard_normal((max_len, vocab_size, enc_dim)) * init_scale,
            gen.standard_normal((vocab_size + 1, vocab_size)) * init_scale,
            np.zeros((max_len, vocab_size)),
            temperature,
            top_p,
        )

    @property
    def vocab_size(self) -> int:
        return self.pos_bias.shape[1]

    @property
    def max_len(self) -> int:
        return self.pos_bias.shape[0]

    def params(self) -> list[np.ndarray]:
        return [self.enc_weights, self.prev_table, self.pos_bias]

    def set_params(self, params):
        self.enc_weights, self.prev_table, self.pos_bias = (np.array(p, dtype=np.float64) for p in params)

    def copy(self) -> "ArPolicy":
        return ArPolicy(self.enc_weights.copy(), self.prev_table.copy(), self.pos_bias.copy(), self.temperature, self.top_p)

    def _prev(self, tokens: np.ndarray) -> np.ndarray:
        start = np.full(tokens.shape[:-1] + (1,), self.vocab_size, dtype=np.int64)
        return np.concatenate([start, tokens[..., :-1]], axis=-1)

    def logits(self, encs: np.ndarray, tokens: np.ndarray) -> np.ndarray:
        """Teacher-forced logits ``(B, T', V)`` for ``tokens`` of shape ``(B, T')``."""
        T = tokens.shape[-1]
        base = np.einsum("be,tve->btv", encs, self.enc_weights[:T])
        return base + self.prev_table[self._prev(tokens)] + self.pos_bias[:T]

    def logprobs(self, encs, tokens) -> np.ndarray:
        encs = np.asarray(encs, dtype=np.float64)
        tokens = np.asarray(tokens, dtype=np.int64)
        lp = log_softmax(self.logits(encs, tokens))
        return np.take_along_axis(lp, tokens[..., None], axis=-1)[..., 0].sum(axis=-1)

    def logprob_grads(self, encs, tokens, coef) -> list[np.ndarray]:
        """Gradient of ``sum_b coef[b] * log pi(tokens[b] | encs[b])``."""
        encs = np.asarray(encs, dtype=np.float64)
        tokens = np.asarray(tokens, dtype=np.int64)
        coef = np.asarray(coef, dtype=np.float64)
        T = tokens.shape[-1]
        probs = np.exp(log_softmax(self.logits(encs, tokens)))
        d = -probs
        np.put_along_axis(d, tokens[..., None], np.take_along_axis(d, tokens[..., None], axis=-1) + 1.0, axis=-1)
        d *= coef[:, None, None]
        g_enc = np.zeros_like(self.enc_weights)
        g_enc[:T] = np.einsum("btv,be->tve", d, encs)
        g_prev = np.zeros_like(self.prev_table)
        np.add.at(g_prev, self._prev(tokens).ravel(), d.reshape(-1, d.shape[-1]))
        g_pos = np.zeros_like(self.pos_bias)
        g_pos[:T] = d.sum(axis=0)
        return [g_enc, g_prev, g_pos]

    def step_distribution(self, logits: np.ndarray) -> np.ndarray:
        """Temperature-scaled, nucleus-truncated, renormalised probabilities."""
        if self.temperature == 0:
            out = np.zeros_like(logits)
            np.put_along_axis(out, np.argmax(logits, axis=-1)[..., None], 1.0, axis=-1)
            return out
        probs = np.exp(log_softmax(logits / self.temperature))
        return nucleus_filter(probs, self.top_p)

    def sample_tokens(self, encs, gen: np.random.Generator) -> np.ndarray:
        encs = np.asarray(encs, dtype=np.float64)
        B, T = encs.shape[0], self.max_len
        enc_logits = np.einsum("be,tve->btv", encs, self.enc_weights)
        out = np.zeros((B, T), dtype=np.int64)
        prev = np.full(B, self.vocab_size, dtype=np.int64)
        for t in range(T):
            probs = self.step_distribution(enc_logits[:, t] + self.prev_table[prev] + self.pos_bias[t])
            if self.temperature == 0:
                tok = np.argmax(probs, axis=-1)
            else:
                u = gen.random(B)[:, None]
                tok = np.minimum((np.cumsum(probs, axis=-1) <= u).sum(axis=-1), self.vocab_size - 1)
                # guard against landing on a zero-probability token through rounding
                bad = probs[np.arange(B), tok] == 0
                if np.any(bad):
                    tok[bad] = np.argmax(probs[bad], axis=-1)
            out[:, t] = tok
            prev = tok
        return out

    def greedy_tokens(self, encs) -> np.ndarray:
        greedy = ArPolicy(self.enc_weights, self.prev_table, self.pos_bias, 0.0, 1.0)
        return greedy.sample_tokens(encs, None)

    def to_json(self) -> dict:
        return {
            "kind": "ArPolicy",
            "version": CHECKPOINT_VERSION,
            "temperature": self.temperature,
            "top_p": self.top_p,
            "enc_weights": self.enc_weights.tolist(),
            "prev_table": self.prev_table.tolist(),
            "pos_bias": self.pos_bias.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "ArPolicy":
        _check_version(d, "ArPolicy")
        return cls(
            np.array(d["enc_weights"], dtype=np.float64),
            np.array(d["prev_table"], dtype=np.float64),
            np.array(d["pos_bias"], dtype=np.float64),
            float(d["temperature"]),
            float(d["top_p"]),
        )


def nucleus_filter(probs: np.ndarray, top_p: float) -> np.ndarray:
    """Keep the smallest probability-sorted prefix with mass >= ``top_p`` and renormalise."""
    if top_p >= 1.0:
        return probs
    order = np.argsort(-probs, axis=-1, kind="stable")
    sorted_p = np.take_along_axis(probs, order, axis=-1)
    before = np.cumsum(sorted_p, axis=-1)
    before = np.concatenate([np.zeros_like(before[..., :1]), before[..., :-1]], axis=-1)
    keep_sorted = before < top_p
    keep = np.zeros_like(keep_sorted)
    np.put_along_axis(keep, order, keep_sorted, axis=-1)
    out = np.where(keep, probs, 0.0)
    return out / out.sum(axis=-1, keepdims=True)


def sample_discrete(policy: ArPolicy, enc, num_samples: int, rng: Rng) -> list[TokenSequence]:
    enc = np.asarray(enc, dtype=np.float64)
    toks = policy.sample_tokens(np.broadcast_to(enc, (num_samples,) + enc.shape), rng.generator())
    return [TokenSequence(row, policy.vocab_size) for row in toks]


def sequence_logprob(policy: ArPolicy, enc, z: TokenSequence) -> float:
    """Untruncated, temperature-1 log-likelihood of ``z``."""
    return float(policy.logprobs(np.asarray(enc)[None, :], z.as_array()[None, :])[0])


# -- optimisation -------------------------------------------------------------------------


def lr_schedule(step: int, base_lr: float, warmup: int, total: int) -> float:
    """Linear warm-up to ``base_lr`` then cosine decay to zero at ``total`` steps."""
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    if total <= warmup:
        return base_lr
    progress = min(1.0, (step - warmup) / (total - warmup))
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def apply_grad_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState, lr: float) -> list[np.ndarray]:
    """One bias-corrected Adam update; returns new parameter arrays."""
    if len(params) != len(grads):
        raise ValueError("gradient list does not match parameters")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError("non-finite gradient")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        out.append(p - lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps))
    return out


# -- checkpoints ---------------------------------------------------------------------------


def _check_version(d: dict, kind: str):
    if d.get("kind") != kind:
        raise ValueError(f"checkpoint holds {d.get('kind')!r}, expected {kind!r}")
    if d.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {d.get('version')!r}")


def model_to_json(model) -> dict:
    return model.to_json()


def model_from_json(d: dict):
    kinds = {"DropoutNet": DropoutNet, "ArPolicy": ArPolicy}
    if d.get("kind") not in kinds:
        raise ValueError(f"unknown model kind {d.get('kind')!r}")
    return kinds[d["kind"]].from_json(d)


def save_model(model, path):
    with open(path, "w") as fh:
        json.dump(model_to_json(model), fh)


def load_model(path):
    with open(path) as fh:
        return model_from_json(json.load(fh))
