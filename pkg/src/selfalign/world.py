"""Synthetic compositional world: prompts, decoders, questions and the VQA judge.

The "image" produced by a representation is a :class:`Scene`, a set of
atomic facts.  Prompts are generated from fixed templates over a small
vocabulary, each prompt fact becomes a yes/no question, and a judge answers
those questions by checking the scene.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import Category, Fact, FactKind, PromptSpec, Question, Rng, Scene, TokenSequence, sigmoid

OBJECTS = (
    "cat", "dog", "harp", "soup", "lamp", "pancake", "pasta", "mirror",
    "lily", "mop", "teapot", "table", "kite", "balloon", "phone", "wallet",
)
PLURALS = {
    "cat": "cats", "dog": "dogs", "harp": "harps", "soup": "soups", "lamp": "lamps",
    "pancake": "pancakes", "pasta": "pastas", "mirror": "mirrors", "lily": "lilies",
    "mop": "mops", "teapot": "teapots", "table": "tables", "kite": "kites",
    "balloon": "balloons", "phone": "phones", "wallet": "wallets",
}
ATTRIBUTE_GROUPS = {
    "color": ("red", "blue", "green", "white"),
    "shape": ("round", "square", "triangular", "hexagonal"),
    "texture": ("wooden", "metal", "fluffy", "leather"),
}
SPATIAL = ("on the left of", "on the right of", "above", "below", "in front of", "behind")
SEMANTIC = (
    ("holds", "holding"), ("watches", "watching"), ("rides", "riding"),
    ("wears", "wearing"), ("sits on", "sitting on"), ("looks at", "looking at"),
)
NUMBERS = ("one", "two", "three", "four", "five", "six", "seven", "eight", "nine")


@dataclass(frozen=True)
class WorldVocab:
    objects: tuple[str, ...] = OBJECTS
    attribute_groups: tuple[tuple[str, tuple[str, ...]], ...] = tuple(ATTRIBUTE_GROUPS.items())
    spatial: tuple[str, ...] = SPATIAL
    semantic: tuple[tuple[str, str], ...] = SEMANTIC
    max_count: int = 9

    @property
    def attributes(self) -> tuple[str, ...]:
        return tuple(a for _, vals in self.attribute_groups for a in vals)

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    @property
    def n_attributes(self) -> int:
        return len(self.attributes)

    def attribute_group_slices(self) -> list[slice]:
        out, start = [], 0
        for _, vals in self.attribute_groups:
            out.append(slice(start, start + len(vals)))
            start += len(vals)
        return out

    def plural(self, obj: int) -> str:
        name = self.objects[obj]
        return PLURALS.get(name, name + "s")


DEFAULT_VOCAB = WorldVocab()


# -- rendering ---------------------------------------------------------------------


def _noun_phrase(vocab: WorldVocab, obj: int, attrs: Sequence[int]) -> str:
    words = [vocab.attributes[a] for a in attrs] + [vocab.objects[obj]]
    return "a " + " ".join(words)


def _count_phrase(vocab: WorldVocab, obj: int, n: int, attrs: Sequence[int] = ()) -> str:
    noun = vocab.objects[obj] if n == 1 else vocab.plural(obj)
    return " ".join([NUMBERS[n - 1]] + [vocab.attributes[a] for a in attrs] + [noun])


def render_prompt(vocab: WorldVocab, facts: Sequence[Fact]) -> str:
    """Deterministic text for a fact list."""
    attrs: dict[int, list[int]] = {}
    counts: dict[int, int] = {}
    for f in facts:
        if f.kind is FactKind.ATTRIBUTE_BINDING:
            attrs.setdefault(f.subject, []).append(f.payload)
        elif f.kind is FactKind.COUNT:
            counts[f.subject] = f.payload

    def np_(obj):
        if obj in counts:
            return _count_phrase(vocab, obj, counts[obj], attrs.get(obj, ()))
        return _noun_phrase(vocab, obj, attrs.get(obj, ()))

    phrases, mentioned = [], set()
    for f in facts:
        if f.kind is FactKind.SPATIAL_RELATION:
            rel, obj = f.payload
            phrases.append(f"{np_(f.subject)} {vocab.spatial[rel]} {np_(obj)}")
            mentioned.update((f.subject, obj))
        elif f.kind is FactKind.SEMANTIC_RELATION:
            rel, obj = f.payload
            phrases.append(f"{np_(f.subject)} {vocab.semantic[rel][0]} {np_(obj)}")
            mentioned.update((f.subject, obj))
    for f in facts:
        if f.subject not in mentioned:
            phrases.append(np_(f.subject))
            mentioned.add(f.subject)
    text = " and ".join(phrases)
    return text[0].upper() + text[1:] + "."


def question_text(vocab: WorldVocab, fact: Fact) -> str:
    obj = vocab.objects[fact.subject]
    if fact.kind is FactKind.OBJECT_PRESENCE:
        return f"Is there a {obj}?"
    if fact.kind is FactKind.ATTRIBUTE_BINDING:
        return f"Is there a {vocab.attributes[fact.payload]} {obj}?"
    if fact.kind is FactKind.COUNT:
        n = fact.payload
        if n == 1:
            return f"Is there one {obj}?"
        return f"Are there {NUMBERS[n - 1]} {vocab.plural(fact.subject)}?"
    rel, other = fact.payload
    other = vocab.objects[other]
    if fact.kind is FactKind.SPATIAL_RELATION:
        return f"Is a {obj} {vocab.spatial[rel]} a {other}?"
    return f"Is a {obj} {vocab.semantic[rel][1]} a {other}?"


# -- prompt generation -------------------------------------------------------------------


def _attribute_facts(gen, vocab, n_objects):
    objs = gen.choice(vocab.n_objects, size=n_objects, replace=False)
    facts = []
    for o in objs:
        a = int(gen.integers(vocab.n_attributes))
        facts += [Fact(FactKind.OBJECT_PRESENCE, int(o)), Fact(FactKind.ATTRIBUTE_BINDING, int(o), a)]
    return facts


def _layout_facts(gen, vocab, template):
    if template == "spatial":
        a, b = (int(x) for x in gen.choice(vocab.n_objects, size=2, replace=False))
        return [Fact(FactKind.SPATIAL_RELATION, a, (int(gen.integers(len(vocab.spatial))), b))]
    n_objs = 1 if template == "count" else 2
    objs = gen.choice(vocab.n_objects, size=n_objs, replace=False)
    return [Fact(FactKind.COUNT, int(o), int(gen.integers(1, vocab.max_count + 1))) for o in objs]


def _semantic_facts(gen, vocab, n_relations):
    objs = gen.choice(vocab.n_objects, size=n_relations + 1, replace=False)
    subj = int(objs[0])
    return [
        Fact(FactKind.SEMANTIC_RELATION, subj, (int(gen.integers(len(vocab.semantic))), int(o)))
        for o in objs[1:]
    ]


def _complex_facts(gen, vocab):
    """Two objects, at least one attribute binding, and a relation or counts."""
    a, b = (int(x) for x in gen.choice(vocab.n_objects, size=2, replace=False))
    facts = [Fact(FactKind.OBJECT_PRESENCE, a), Fact(FactKind.ATTRIBUTE_BINDING, a, int(gen.integers(vocab.n_attributes)))]
    if gen.random() < 0.5:
        facts += [Fact(FactKind.OBJECT_PRESENCE, b), Fact(FactKind.ATTRIBUTE_BINDING, b, int(gen.integers(vocab.n_attributes)))]
    second = int(gen.integers(3))
    if second == 0:
        facts.append(Fact(FactKind.SPATIAL_RELATION, a, (int(gen.integers(len(vocab.spatial))), b)))
    elif second == 1:
        facts.append(Fact(FactKind.SEMANTIC_RELATION, a, (int(gen.integers(len(vocab.semantic))), b)))
    else:
        facts.append(Fact(FactKind.COUNT, b, int(gen.integers(1, vocab.max_count + 1))))
    return facts


ATTRIBUTE_TEMPLATES = ("single", "pair")
LAYOUT_TEMPLATES = ("spatial", "count", "two-count")


def make_prompt(vocab: WorldVocab, category: Category, gen: np.random.Generator, prompt_id: str, template: str | None = None) -> PromptSpec:
    category = Category(category)
    if category is Category.ATTRIBUTE:
        template = template or ATTRIBUTE_TEMPLATES[int(gen.integers(2))]
        facts = _attribute_facts(gen, vocab, 1 if template == "single" else 2)
    elif category is Category.LAYOUT:
        template = template or LAYOUT_TEMPLATES[int(gen.integers(3))]
        facts = _layout_facts(gen, vocab, template)
    elif category is Category.SEMANTIC_RELATION:
        facts = _semantic_facts(gen, vocab, 1 + int(gen.random() < 0.3))
    else:
        facts = _complex_facts(gen, vocab)
    return PromptSpec(prompt_id, category, tuple(facts), render_prompt(vocab, facts))


def prompt_key(prompt: PromptSpec) -> frozenset:
    return frozenset(prompt.facts)


def generate_prompts(
    vocab: WorldVocab,
    category: Category,
    n: int,
    rng: Rng,
    template: str | None = None,
    exclude: frozenset | set = frozenset(),
) -> list[PromptSpec]:
    """``n`` prompts of one category; prompts whose fact set is in ``exclude`` are redrawn."""
    if n < 1:
        raise ValueError("n must be positive")
    category = Category(category)
    gen = rng.split("prompts", category.value).generator()
    tag = ".".join(map(str, rng.path)) or "root"
    out, attempts = [], 0
    while len(out) < n:
        if attempts == 1000 * n:
            raise RuntimeError("could not draw enough prompts outside the excluded set")
        attempts += 1
        prompt = make_prompt(vocab, category, gen, f"{category.value}-{rng.seed}-{tag}-{len(out)}", template)
        if prompt_key(prompt) not in exclude:
            out.append(prompt)
    return out


def generate_corpus(vocab: WorldVocab, per_category: int, rng: Rng, exclude: frozenset | set = frozenset()) -> list[PromptSpec]:
    out = []
    for cat in Category:
        out += generate_prompts(vocab, cat, per_category, rng, exclude=exclude)
    return out


# -- self-questioning ------------------------------------------------------------------


def decompose_questions(prompt: PromptSpec, vocab: WorldVocab = DEFAULT_VOCAB) -> list[Question]:
    """One yes/no question per fact; relations also ask for both participants."""
    seen, out = set(), []

    def add(f):
        if f not in seen:
            seen.add(f)
            out.append(Question(f, question_text(vocab, f)))

    for f in prompt.facts:
        if f.is_relation:
            add(Fact(FactKind.OBJECT_PRESENCE, f.subject))
            add(Fact(FactKind.OBJECT_PRESENCE, f.payload[1]))
        add(f)
    return out


# -- decoders ------------------------------------------------------------------------


@dataclass
class DecoderSpec:
    """Frozen random readouts turning an L x D feature matrix into a scene.

    Row ``i`` is slot ``i``.  A slot is active when its presence logit exceeds
    ``presence_threshold``; active slots report a class, one attribute per
    attribute group and a count.  Ordered pairs of active slots report the
    argmax spatial relation, and a semantic relation when its best logit
    exceeds ``semantic_threshold``.  Readouts are slot-specific, so the
    decoder is not row-permutation invariant.
    """

    seed: int
    slots: int
    dim: int
    vocab: WorldVocab = DEFAULT_VOCAB
    presence_threshold: float = 0.5
    semantic_threshold: float = 0.5
    presence: np.ndarray = field(init=False, repr=False)
    classes: np.ndarray = field(init=False, repr=False)
    attributes: np.ndarray = field(init=False, repr=False)
    counts: np.ndarray = field(init=False, repr=False)
    spatial_src: np.ndarray = field(init=False, repr=False)
    spatial_dst: np.ndarray = field(init=False, repr=False)
    semantic_src: np.ndarray = field(init=False, repr=False)
    semantic_dst: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        gen = Rng(self.seed).split("decoder").generator()
        K, D, v = self.slots, self.dim, self.vocab
        scale = 1.0 / math.sqrt(D)

        def mat(*shape):
            return gen.standard_normal(shape) * scale

        self.presence = mat(K, D)
        self.classes = mat(K, v.n_objects, D)
        self.attributes = mat(K, v.n_attributes, D)
        self.counts = mat(K, v.max_count, D)
        self.spatial_src = mat(K, len(v.spatial), D)
        self.spatial_dst = mat(K, len(v.spatial), D)
        self.semantic_src = mat(K, len(v.semantic), D)
        self.semantic_dst = mat(K, len(v.semantic), D)
        for arr in (self.presence, self.classes, self.attributes, self.counts,
                    self.spatial_src, self.spatial_dst, self.semantic_src, self.semantic_dst):
            arr.flags.writeable = False

    def readout(self, h: np.ndarray) -> dict:
        """Slot-level readouts for a batch ``(N, L, D)`` of feature matrices."""
        h = np.asarray(h, dtype=np.float64)
        if h.shape[-2:] != (self.slots, self.dim):
            raise ValueError(f"expected feature matrices of shape {(self.slots, self.dim)}, got {h.shape[-2:]}")
        squeeze = h.ndim == 2
        if squeeze:
            h = h[None]
        groups = self.vocab.attribute_group_slices()
        attr_logits = np.einsum("kad,nkd->nka", self.attributes, h)
        sp = np.einsum("krd,nkd->nkr", self.spatial_src, h)[:, :, None, :] + np.einsum("krd,nkd->nkr", self.spatial_dst, h)[:, None, :, :]
        se = np.einsum("krd,nkd->nkr", self.semantic_src, h)[:, :, None, :] + np.einsum("krd,nkd->nkr", self.semantic_dst, h)[:, None, :, :]
        out = {
            "active": np.einsum("kd,nkd->nk", self.presence, h) > self.presence_threshold,
            "cls": np.argmax(np.einsum("kcd,nkd->nkc", self.classes, h), axis=-1),
            "attr": np.stack([np.argmax(attr_logits[..., g], axis=-1) + g.start for g in groups], axis=-1),
            "count": np.argmax(np.einsum("kcd,nkd->nkc", self.counts, h), axis=-1) + 1,
            "spatial": np.argmax(sp, axis=-1),
            "semantic": np.argmax(se, axis=-1),
            "semantic_on": np.max(se, axis=-1) > self.semantic_threshold,
        }
        if squeeze:
            out = {k: v[0] for k, v in out.items()}
        return out


def _scene_from_readout(r: dict, n: int | None = None) -> Scene:
    pick = (lambda a: a) if n is None else (lambda a: a[n])
    active, cls, attr, count = pick(r["active"]), pick(r["cls"]), pick(r["attr"]), pick(r["count"])
    spatial, semantic, sem_on = pick(r["spatial"]), pick(r["semantic"]), pick(r["semantic_on"])
    slots = np.flatnonzero(active)
    facts = set()
    totals: dict[int, int] = {}
    for i in slots:
        c = int(cls[i])
        facts.add(Fact(FactKind.OBJECT_PRESENCE, c))
        for a in attr[i]:
            facts.add(Fact(FactKind.ATTRIBUTE_BINDING, c, int(a)))
        totals[c] = totals.get(c, 0) + int(count[i])
        for j in slots:
            if i == j:
                continue
            facts.add(Fact(FactKind.SPATIAL_RELATION, c, (int(spatial[i, j]), int(cls[j]))))
            if sem_on[i, j]:
                facts.add(Fact(FactKind.SEMANTIC_RELATION, c, (int(semantic[i, j]), int(cls[j]))))
    for c, n_total in totals.items():
        facts.add(Fact(FactKind.COUNT, c, n_total))
    return Scene(frozenset(facts))


def decode_continuous(dec: DecoderSpec, h) -> Scene:
    return _scene_from_readout(dec.readout(h))


def decode_continuous_batch(dec: DecoderSpec, hs) -> list[Scene]:
    r = dec.readout(np.asarray(hs).reshape(-1, dec.slots, dec.dim))
    return [_scene_from_readout(r, n) for n in range(r["active"].shape[0])]


class TokenKind(enum.Enum):
    PAD = "pad"
    OBJ = "obj"
    ATTR = "attr"
    COUNT = "count"
    SPATIAL = "spatial"
    SEMANTIC = "semantic"
    JUNK = "junk"


@dataclass(frozen=True)
class TokenGrammar:
    """Token id layout: PAD, objects, attributes, counts, spatial, semantic, junk."""

    vocab: WorldVocab = DEFAULT_VOCAB
    vocab_size: int = 64

    def __post_init__(self):
        if self.vocab_size < self.n_grammar_tokens:
            raise ValueError(f"vocab_size must be at least {self.n_grammar_tokens}")

    @property
    def offsets(self) -> dict:
        v = self.vocab
        sizes = [(TokenKind.PAD, 1), (TokenKind.OBJ, v.n_objects), (TokenKind.ATTR, v.n_attributes),
                 (TokenKind.COUNT, v.max_count), (TokenKind.SPATIAL, len(v.spatial)), (TokenKind.SEMANTIC, len(v.semantic))]
        out, start = {}, 0
        for kind, n in sizes:
            out[kind] = (start, n)
            start += n
        return out

    @property
    def n_grammar_tokens(self) -> int:
        return sum(n for _, n in self.offsets.values())

    def classify(self, token: int) -> tuple[TokenKind, int]:
        for kind, (start, n) in self.offsets.items():
            if start <= token < start + n:
                return kind, token - start
        return TokenKind.JUNK, token - self.n_grammar_tokens

    def token(self, kind: TokenKind, index: int = 0) -> int:
        start, n = self.offsets[kind]
        if not 0 <= index < n:
            raise ValueError(f"{kind} index {index} out of range")
        return start + index


def decode_discrete(grammar: TokenGrammar, z: TokenSequence) -> Scene:
    """Lenient parse of ``OBJ [ATTR] [COUNT] (REL OBJ)*`` slots.

    PAD and junk tokens are skipped; tokens that do not fit the slot grammar
    are ignored.  Count facts come only from COUNT tokens; slots of the same
    class add their counts.  Relation targets are present objects but do not
    start a slot.
    """
    facts = set()
    totals: dict[int, int] = {}
    subject = None
    stage = None  # "obj", "attr", "count", "rel", "target"
    pending_rel = None
    for t in z.tokens:
        kind, idx = grammar.classify(t)
        if kind in (TokenKind.PAD, TokenKind.JUNK):
            continue
        if stage == "rel":
            if kind is TokenKind.OBJ:
                rel_kind, rel = pending_rel
                fk = FactKind.SPATIAL_RELATION if rel_kind is TokenKind.SPATIAL else FactKind.SEMANTIC_RELATION
                facts.add(Fact(fk, subject, (rel, idx)))
                facts.add(Fact(FactKind.OBJECT_PRESENCE, idx))
                stage = "target"
                continue
            stage, pending_rel = "target", None
        if kind is TokenKind.OBJ:
            subject, stage = idx, "obj"
            facts.add(Fact(FactKind.OBJECT_PRESENCE, idx))
        elif kind is TokenKind.ATTR and stage == "obj":
            facts.add(Fact(FactKind.ATTRIBUTE_BINDING, subject, idx))
            stage = "attr"
        elif kind is TokenKind.COUNT and stage in ("obj", "attr"):
            totals[subject] = totals.get(subject, 0) + idx + 1
            stage = "count"
        elif kind in (TokenKind.SPATIAL, TokenKind.SEMANTIC) and stage is not None:
            pending_rel, stage = (kind, idx), "rel"
    for c, n in totals.items():
        facts.add(Fact(FactKind.COUNT, c, n))
    return Scene(frozenset(facts))


def encode_scene_tokens(grammar: TokenGrammar, slots: Sequence[tuple]) -> list[int]:
    """Token ids for ``(obj, attr|None, count|None, [(rel_kind, rel, target), ...])`` slots."""
    out = []
    for obj, attr, count, rels in slots:
        out.append(grammar.token(TokenKind.OBJ, obj))
        if attr is not None:
            out.append(grammar.token(TokenKind.ATTR, attr))
        if count is not None:
            out.append(grammar.token(TokenKind.COUNT, count - 1))
        for rel_kind, rel, target in rels:
            out += [grammar.token(rel_kind, rel), grammar.token(TokenKind.OBJ, target)]
    return out


# -- judge and scores --------------------------------------------------------------------


@dataclass(frozen=True)
class JudgeSpec:
    sharpness: float = math.inf
    error_rate: float = 0.0
    other_mass: float = 0.0
    renormalize: bool = False

    def __post_init__(self):
        if not self.sharpness > 0:
            raise ValueError("sharpness must be positive")
        if not 0.0 <= self.error_rate < 0.5:
            raise ValueError("error_rate must lie in [0, 0.5)")
        if not 0.0 <= self.other_mass <= 0.2:
            raise ValueError("other_mass must lie in [0, 0.2]")

    @property
    def noiseless(self) -> bool:
        return math.isinf(self.sharpness) and self.error_rate == 0.0 and self.other_mass == 0.0


def judge_answer(judge: JudgeSpec, scene: Scene, question: Question) -> tuple[float, float]:
    """(p("yes"), p("no")) for one question about ``scene``."""
    mass = 1.0 - judge.other_mass
    confidence = 1.0 if math.isinf(judge.sharpness) else float(sigmoid(judge.sharpness))
    correct = mass * (1.0 - judge.error_rate) * confidence
    wrong = mass - correct
    p_yes, p_no = (correct, wrong) if question.fact in scene else (wrong, correct)
    if judge.renormalize:
        total = p_yes + p_no
        p_yes, p_no = p_yes / total, p_no / total
    return p_yes, p_no


def alignment_score(judge: JudgeSpec, scene: Scene, questions: Sequence[Question]) -> float:
    """Mean of p("yes") - p("no") over the questions, in [-1, 1]."""
    if not questions:
        raise ValueError("alignment score needs at least one question")
    total = 0.0
    for q in questions:
        p_yes, p_no = judge_answer(judge, scene, q)
        total += p_yes - p_no
    return total / len(questions)


def ground_truth_score(prompt: PromptSpec, scene: Scene) -> float:
    """Fraction of prompt facts present in the scene; never seen by training."""
    return sum(f in scene for f in prompt.facts) / len(prompt.facts)


class FeedbackMode(str, enum.Enum):
    DIFF_OF_PROB = "DiffOfProb"
    RATIO_OF_YES = "RatioOfYes"
    RANDOM_SCORE = "RandomScore"


def ratio_of_yes(judge: JudgeSpec, scene: Scene, questions: Sequence[Question]) -> float:
    if not questions:
        raise ValueError("ratio of yes needs at least one question")
    yes = 0
    for q in questions:
        p_yes, p_no = judge_answer(judge, scene, q)
        yes += p_yes > p_no
    return yes / len(questions)


def feedback_score(
    mode: FeedbackMode,
    judge: JudgeSpec,
    scene: Scene,
    questions: Sequence[Question],
    gen: np.random.Generator | None = None,
) -> float:
    mode = FeedbackMode(mode)
    if mode is FeedbackMode.DIFF_OF_PROB:
        return alignment_score(judge, scene, questions)
    if mode is FeedbackMode.RATIO_OF_YES:
        return ratio_of_yes(judge, scene, questions)
    if gen is None:
        raise ValueError("RandomScore feedback needs a random generator")
    return float(gen.random())
