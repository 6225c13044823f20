"""Independent reference implementations used as test oracles.

These are written with explicit loops and plain Python arithmetic and do not
call into the package's numerical code, so agreement is meaningful.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy import stats

from selfalign.core import Fact, FactKind, Scene
from selfalign.kernels import Aggregation, Distance
from selfalign.world import TokenKind


def frob_loop(a, b):
    total = 0.0
    for i in range(len(a)):
        for j in range(len(a[0])):
            total += (a[i][j] - b[i][j]) ** 2
    return total


def mean_loop(h):
    L, D = len(h), len(h[0])
    return [sum(h[i][j] for i in range(L)) / L for j in range(D)]


def max_loop(h):
    return [max(row[j] for row in h) for j in range(len(h[0]))]


def _dot(u, v):
    return sum(x * y for x, y in zip(u, v))


def _cos_dist(u, v):
    return 1.0 - _dot(u, v) / (math.sqrt(_dot(u, u)) * math.sqrt(_dot(v, v)))


def kernel_loop(spec, a, b):
    a, b = np.asarray(a).tolist(), np.asarray(b).tolist()
    if spec.aggregation is Aggregation.NONE:
        if spec.distance is Distance.EUCLIDEAN:
            return frob_loop(a, b)
        return sum(_cos_dist(ra, rb) for ra, rb in zip(a, b)) / len(a)
    agg = mean_loop if spec.aggregation is Aggregation.AVG_POOL else max_loop
    u, v = agg(a), agg(b)
    if spec.distance is Distance.EUCLIDEAN:
        return sum((x - y) ** 2 for x, y in zip(u, v))
    return _cos_dist(u, v)


def fd_grad(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f(x)
        x[idx] = old - h
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(analytic, numeric):
    """Largest entry error, relative to the largest numeric gradient entry."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.max(np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def gaussian_loglik_scipy(h, mu, sigma):
    return float(np.sum(stats.norm.logpdf(np.asarray(h), loc=np.asarray(mu), scale=sigma)))


def softplus_ref(x):
    return math.log1p(math.exp(-abs(x))) + max(x, 0.0)


# -- decoders -----------------------------------------------------------------------


def _argmax(values):
    best = 0
    for i, v in enumerate(values):
        if v > values[best]:
            best = i
    return best


def decode_continuous_loop(dec, h):
    """Readout and scene assembly with explicit per-slot dot products."""
    h = np.asarray(h).tolist()
    K, v = dec.slots, dec.vocab
    groups = v.attribute_group_slices()
    active, cls, attrs, counts = [], [], [], []
    for k in range(K):
        active.append(_dot(dec.presence[k], h[k]) > dec.presence_threshold)
        cls.append(_argmax([_dot(dec.classes[k][c], h[k]) for c in range(v.n_objects)]))
        a_logits = [_dot(dec.attributes[k][a], h[k]) for a in range(v.n_attributes)]
        attrs.append([g.start + _argmax(a_logits[g]) for g in groups])
        counts.append(1 + _argmax([_dot(dec.counts[k][c], h[k]) for c in range(v.max_count)]))
    facts, totals = set(), {}
    for i in range(K):
        if not active[i]:
            continue
        facts.add(Fact(FactKind.OBJECT_PRESENCE, cls[i]))
        for a in attrs[i]:
            facts.add(Fact(FactKind.ATTRIBUTE_BINDING, cls[i], a))
        totals[cls[i]] = totals.get(cls[i], 0) + counts[i]
        for j in range(K):
            if j == i or not active[j]:
                continue
            sp = [_dot(dec.spatial_src[i][r], h[i]) + _dot(dec.spatial_dst[j][r], h[j]) for r in range(len(v.spatial))]
            facts.add(Fact(FactKind.SPATIAL_RELATION, cls[i], (_argmax(sp), cls[j])))
            se = [_dot(dec.semantic_src[i][r], h[i]) + _dot(dec.semantic_dst[j][r], h[j]) for r in range(len(v.semantic))]
            if max(se) > dec.semantic_threshold:
                facts.add(Fact(FactKind.SEMANTIC_RELATION, cls[i], (_argmax(se), cls[j])))
    for c, n in totals.items():
        facts.add(Fact(FactKind.COUNT, c, n))
    return Scene(frozenset(facts))


# Table-driven parser for OBJ [ATTR] [COUNT] (REL OBJ)*.  States name the last
# accepted grammar element; a token that fits no transition leaves the state alone.
_RELS = (TokenKind.SPATIAL, TokenKind.SEMANTIC)
_TRANSITIONS = {
    ("obj", TokenKind.ATTR): "attr",
    ("obj", TokenKind.COUNT): "count",
    ("attr", TokenKind.COUNT): "count",
}


def decode_discrete_table(grammar, tokens):
    facts, totals = set(), {}
    state, subject, pending = "start", None, None
    stream = [grammar.classify(t) for t in tokens]
    stream = [(k, i) for k, i in stream if k not in (TokenKind.PAD, TokenKind.JUNK)]
    for kind, idx in stream:
        if state == "rel" and kind is not TokenKind.OBJ:
            state, pending = "target", None  # dangling relation; reconsider this token
        if kind is TokenKind.OBJ:
            facts.add(Fact(FactKind.OBJECT_PRESENCE, idx))
            if state == "rel":
                fk = FactKind.SPATIAL_RELATION if pending[0] is TokenKind.SPATIAL else FactKind.SEMANTIC_RELATION
                facts.add(Fact(fk, subject, (pending[1], idx)))
                state = "target"
            else:
                subject, state = idx, "obj"
            continue
        if kind in _RELS:
            if state != "start":
                state, pending = "rel", (kind, idx)
            continue
        nxt = _TRANSITIONS.get((state, kind))
        if nxt is None:
            continue
        if kind is TokenKind.ATTR:
            facts.add(Fact(FactKind.ATTRIBUTE_BINDING, subject, idx))
        else:
            totals[subject] = totals.get(subject, 0) + idx + 1
        state = nxt
    for c, n in totals.items():
        facts.add(Fact(FactKind.COUNT, c, n))
    return Scene(frozenset(facts))


# -- dropout ---------------------------------------------------------------------------


def mlp_forward_loop(weights, biases, x, dropout_layers, keep, rate):
    """Plain forward pass; ``keep`` maps dropout layer index -> 0/1 list."""
    h = list(x)
    n_hidden = len(weights) - 1
    for layer in range(n_hidden + 1):
        W, b = weights[layer], biases[layer]
        out = [b[j] + sum(h[i] * W[i][j] for i in range(len(h))) for j in range(len(b))]
        if layer < n_hidden:
            out = [math.tanh(v) for v in out]
            if layer in dropout_layers:
                out = [v * k / (1.0 - rate) if rate < 1 else 0.0 for v, k in zip(out, keep[layer])]
        h = out
    return h


def dropout_enumeration_loop(weights, biases, x, dropout_layers, rate):
    """Exact mean and pooled variance by visiting every keep/drop pattern."""
    widths = [len(biases[i]) for i in dropout_layers]
    total = sum(widths)
    outs, probs = [], []
    for bits in itertools.product((1, 0), repeat=total):
        prob = 1.0
        for bit in bits:
            prob *= (1.0 - rate) if bit else rate
        keep, pos = {}, 0
        for layer, w in zip(dropout_layers, widths):
            keep[layer] = bits[pos : pos + w]
            pos += w
        outs.append(mlp_forward_loop(weights, biases, x, dropout_layers, keep, rate))
        probs.append(prob)
    n_out = len(outs[0])
    mean = [sum(p * o[j] for p, o in zip(probs, outs)) for j in range(n_out)]
    var = sum(sum(p * (o[j] - mean[j]) ** 2 for p, o in zip(probs, outs)) for j in range(n_out)) / n_out
    return mean, var


# -- discrete policy ---------------------------------------------------------------------


def ar_logprob_loop(policy, enc, tokens):
    """Teacher-forced log-likelihood with an explicit per-step softmax."""
    V = policy.vocab_size
    prev = V
    total = 0.0
    for t, tok in enumerate(tokens):
        logits = [
            sum(enc[e] * policy.enc_weights[t, v, e] for e in range(len(enc))) + policy.prev_table[prev, v] + policy.pos_bias[t, v]
            for v in range(V)
        ]
        m = max(logits)
        lse = m + math.log(sum(math.exp(x - m) for x in logits))
        total += logits[tok] - lse
        prev = tok
    return total


def nucleus_support(probs, top_p):
    """Brute-force nucleus: smallest probability-sorted prefix with mass >= top_p."""
    if top_p >= 1.0:
        # no truncation: a running float sum can hit 1.0 before the tail is reached
        return set(range(len(probs)))
    order = sorted(range(len(probs)), key=lambda i: (-probs[i], i))
    kept, mass = [], 0.0
    for i in order:
        if mass >= top_p:
            break
        kept.append(i)
        mass += probs[i]
    return set(kept)
