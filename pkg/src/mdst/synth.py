"""Synthetic grounded-dialog worlds with an exact answer oracle.

Each world is a small set of objects with category/color/size/position
attributes. Region features are deterministic attribute encodings: one one-hot
block per attribute pool plus Gaussian noise of configurable scale, so
grounding is learnable but not degenerate. Questions come from a fixed grammar
whose programs form coreference chains: a dialog first mentions one object by
category, and later pronoun questions ("what color is it ?") resolve to that
object. The oracle parses any grammar question and answers it from the world,
which is what makes machine-judged answer accuracy possible without humans.

Generation is a pure function of (seed, config): per-dialog RNGs are seeded
with (seed, dialog index), so corpora are reproducible and order-independent.

Question grammar (tokenized forms):
    is there a CAT ?              -> yes | no
    is there something COLOR ?    -> yes | no     (whole-image check)
    what color is the CAT ?      -> COLOR
    what color is it ?            -> COLOR of the resolved referent
    what size is the CAT ?       -> SIZE
    what size is it ?             -> SIZE
    where is the CAT ?           -> on the POS
    where is it ?                 -> on the POS
    how many objects are there ?  -> NUMBER word
    how many CATs are there ?    -> NUMBER word
    let us call it NAME , ok ?    -> ok           (binds NAME to the referent)
    is the CAT called NAME ?     -> yes | no
    are you sure ?                -> yes          (image-irrelevant filler)
    is this a nice photo ?        -> yes          (image-irrelevant filler)

Names are dialog-level facts: they exist only in the conversation, never in
the region features, and the naming utterance uses a pronoun, so verifying a
name requires having resolved that pronoun when the naming happened (a
round-order fact, not a bag-of-history fact).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import SynthConfig
from .data import N_CANDIDATES, DialogCorpus, DialogRecord, DialogRound
from .errors import ConfigError, ContractError
from .vocab import tokenize_text

NUMBER_WORDS = ["zero", "one", "two", "three", "four", "five",
                "six", "seven", "eight", "nine", "ten"]

FILLER_QUESTIONS = ["are you sure ?", "is this a nice photo ?"]


@dataclass
class WorldObject:
    category: str
    color: str
    size: str
    position: str


@dataclass
class SyntheticWorld:
    objects: list[WorldObject]
    caption: str
    program: list[dict] = field(default_factory=list)
    seed: int | None = None

    def find(self, category: str) -> WorldObject | None:
        for obj in self.objects:
            if obj.category == category:
                return obj
        return None

    def count(self, category: str) -> int:
        return sum(1 for obj in self.objects if obj.category == category)

    def answer(self, question: str, previous_questions: list[str]) -> str:
        return oracle_answer(self, question, previous_questions)

    def to_json(self) -> dict:
        return {
            "objects": [vars(o) for o in self.objects],
            "caption": self.caption,
            "program": self.program,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, data: dict) -> "SyntheticWorld":
        return cls(objects=[WorldObject(**o) for o in data["objects"]],
                   caption=data["caption"],
                   program=data.get("program", []),
                   seed=data.get("seed"))


class OracleError(ContractError):
    """The oracle cannot parse or resolve a question."""


def _singular(token: str) -> str:
    # Pool categories never end in "s", so stripping one suffix "s" is exact.
    return token[:-1] if token.endswith("s") and len(token) > 1 else token


def resolve_pronoun(world: SyntheticWorld,
                    previous_questions: list[str]) -> WorldObject:
    """Resolve "it" to the most recently mentioned world object.

    A mention is any earlier-question token that names (possibly pluralized)
    the category of an object in the world; mentions of absent categories and
    given names do not bind the pronoun."""
    for question in reversed(previous_questions):
        for tok in tokenize_text(question):
            obj = world.find(tok) or world.find(_singular(tok))
            if obj is not None:
                return obj
    raise OracleError("pronoun has no earlier-mentioned referent")


def _naming_target(question: str) -> str | None:
    toks = tokenize_text(question)
    if toks[:4] == ["let", "us", "call", "it"] and len(toks) >= 5:
        return toks[4]
    return None


def dialog_names(world: SyntheticWorld,
                 previous_questions: list[str]) -> dict[int, str]:
    """Replay the naming utterances: each "let us call it NAME" binds NAME to
    the object the pronoun resolved to at that point. Returns object index
    (position in the world) -> name."""
    names: dict[int, str] = {}
    for i, question in enumerate(previous_questions):
        name = _naming_target(question)
        if name is None:
            continue
        obj = resolve_pronoun(world, previous_questions[:i])
        names[world.objects.index(obj)] = name
    return names


def oracle_answer(world: SyntheticWorld, question: str,
                  previous_questions: list[str]) -> str:
    """Deterministically answer a grammar question from the world and the
    dialog so far."""
    toks = tokenize_text(question)
    text = " ".join(toks)

    if text in FILLER_QUESTIONS:
        return "yes"
    if _naming_target(question) is not None:
        return "ok"
    if text.startswith("is there something "):
        color = toks[3]
        return "yes" if any(o.color == color for o in world.objects) else "no"
    if text.startswith("is there a "):
        cat = toks[3]
        return "yes" if world.find(cat) is not None else "no"
    if text == "how many objects are there ?":
        return NUMBER_WORDS[len(world.objects)]
    if text.startswith("how many "):
        return NUMBER_WORDS[world.count(_singular(toks[2]))]
    if text.startswith("is the ") and len(toks) >= 5 and toks[3] == "called":
        cat, name = toks[2], toks[4]
        obj = world.find(cat)
        if obj is None:
            return "no"
        names = dialog_names(world, previous_questions)
        return "yes" if names.get(world.objects.index(obj)) == name else "no"
    for attr, prefix in (("color", "what color is"),
                         ("size", "what size is"),
                         ("position", "where is")):
        if text.startswith(prefix):
            tail = toks[len(prefix.split()):]
            if tail[0] == "it":
                obj = resolve_pronoun(world, previous_questions)
            elif tail[0] == "the":
                obj = world.find(tail[1])
                if obj is None:
                    raise OracleError(f"no {tail[1]!r} in this world")
            else:
                raise OracleError(f"cannot parse referent in {question!r}")
            value = getattr(obj, attr)
            return f"on the {value}" if attr == "position" else value
    raise OracleError(f"question not in grammar: {question!r}")


def _make_caption(objects: list[WorldObject]) -> str:
    phrases = [f"a {obj.category}" for obj in objects]
    if len(phrases) == 1:
        listing = phrases[0]
    else:
        listing = " , ".join(phrases[:-1]) + " and " + phrases[-1]
    return f"there is {listing}"


def generate_world(rng: np.random.Generator, config: SynthConfig) -> SyntheticWorld:
    """Sample a world with distinct categories and colors.

    The caption names categories only; attribute values live solely in the
    region features, so attribute questions require visual grounding.
    """
    n = config.n_objects
    cats = rng.choice(config.categories, size=n, replace=False)
    colors = rng.choice(config.colors, size=n, replace=False)
    sizes = rng.choice(config.sizes, size=n, replace=True)
    replace_pos = len(config.positions) < n
    positions = rng.choice(config.positions, size=n, replace=replace_pos)
    objects = [WorldObject(category=str(c), color=str(col), size=str(s),
                           position=str(p))
               for c, col, s, p in zip(cats, colors, sizes, positions)]
    return SyntheticWorld(objects=objects, caption=_make_caption(objects))


def encode_features(world: SyntheticWorld, config: SynthConfig,
                    rng: np.random.Generator) -> np.ndarray:
    """One-hot attribute blocks per object, plus Gaussian noise."""
    pools = [config.categories, config.colors, config.sizes, config.positions]
    attrs = ["category", "color", "size", "position"]
    n, d = len(world.objects), config.d_raw
    mat = np.zeros((n, d), dtype=np.float32)
    for i, obj in enumerate(world.objects):
        offset = 0
        for pool, attr in zip(pools, attrs):
            value = getattr(obj, attr)
            try:
                mat[i, offset + pool.index(value)] = 1.0
            except ValueError as exc:
                raise ConfigError(
                    f"attribute value {value!r} missing from its pool"
                ) from exc
            offset += len(pool)
    mat += rng.normal(0.0, config.noise_sigma, size=mat.shape).astype(np.float32)
    return mat


# ---------------------------------------------------------------------------
# Question programs
# ---------------------------------------------------------------------------

_ATTRS = ["color", "size", "position"]


def _attr_question(attr: str, referent: str | None) -> str:
    tail = "it ?" if referent is None else f"the {referent} ?"
    if attr == "position":
        return f"where is {tail}"
    return f"what {attr} is {tail}"


class _ProgramState:
    """Bookkeeping while sampling: which object a pronoun currently refers
    to, which attributes each object was asked about, and the naming state."""

    def __init__(self, world: SyntheticWorld):
        self.world = world
        self.last_mentioned: WorldObject | None = None
        self.asked: dict[int, set] = {id(o): set() for o in world.objects}
        self.named_object: WorldObject | None = None
        self.named_as: str | None = None


def sample_program(rng: np.random.Generator, world: SyntheticWorld,
                   config: SynthConfig) -> list[dict]:
    """Build one dialog's question program around a coreference chain.

    Round 1 probes for an object's existence (an absent-category probe is
    followed by a direct attribute question that establishes the referent);
    round 2 asks a pronoun attribute question. Middle rounds mix a naming
    utterance ("let us call it NAME"), direct attribute questions about other
    objects (which move the pronoun referent), whole-image color checks,
    counts, and fillers. The final round prefers querying the given name by
    category, which is answerable only from the dialog itself.
    """
    referent = world.objects[int(rng.integers(len(world.objects)))]
    absent = [c for c in config.categories if world.find(c) is None]
    state = _ProgramState(world)
    program: list[dict] = []

    def emit(op: dict):
        program.append(op)

    def emit_attr(obj: WorldObject, attr: str, coref: bool):
        state.asked[id(obj)].add(attr)
        if not coref:
            state.last_mentioned = obj
        emit({"kind": "attr", "attr": attr,
              **({"coref": True} if coref else {"category": obj.category})})

    def emit_count():
        roll = rng.random()
        if roll < 0.4:
            emit({"kind": "count_all"})
        elif absent and roll < 0.7:
            emit({"kind": "count_cat", "category": str(rng.choice(absent))})
        else:
            target = state.last_mentioned or referent
            state.last_mentioned = target
            emit({"kind": "count_cat", "category": target.category})

    def emit_value_exist():
        present = sorted({o.color for o in world.objects})
        missing = [c for c in config.colors if c not in present]
        if missing and rng.random() < 0.5:
            emit({"kind": "value_exist", "color": str(rng.choice(missing))})
        else:
            emit({"kind": "value_exist", "color": str(rng.choice(present))})

    # round 1 (and 2): establish the referent
    if absent and rng.random() < 0.15 and config.n_rounds >= 2:
        emit({"kind": "exist", "category": str(rng.choice(absent))})
        emit_attr(referent, str(rng.choice(_ATTRS)), coref=False)
    else:
        state.last_mentioned = referent
        emit({"kind": "exist", "category": referent.category})
        if config.n_rounds >= 2:
            emit_attr(referent, str(rng.choice(_ATTRS)), coref=True)

    def middle_round():
        choices, weights = [], []
        target = state.last_mentioned
        fresh = [a for a in _ATTRS if a not in state.asked[id(target)]]
        if state.named_object is None:
            choices.append("name_it"); weights.append(0.50)
        others = [o for o in world.objects if o is not target]
        if others:
            choices.append("direct_other"); weights.append(0.22)
        if fresh:
            choices.append("coref_fresh"); weights.append(0.08)
        choices.append("count"); weights.append(0.10)
        choices.append("filler"); weights.append(0.10)
        choices.append("value_exist"); weights.append(0.10)
        kind = str(rng.choice(choices, p=np.asarray(weights) / np.sum(weights)))
        if kind == "name_it":
            state.named_object = target
            state.named_as = str(rng.choice(config.names))
            emit({"kind": "name_it", "name": state.named_as})
        elif kind == "direct_other":
            other = others[int(rng.integers(len(others)))]
            # prefer the attribute already queried on the chain object, so
            # raw-history retrieval sees a competing same-attribute round
            chain_attrs = sorted(state.asked[id(referent)])
            if chain_attrs and rng.random() < 0.7:
                attr = str(rng.choice(chain_attrs))
            else:
                attr = str(rng.choice(_ATTRS))
            emit_attr(other, attr, coref=False)
        elif kind == "coref_fresh":
            emit_attr(target, str(rng.choice(fresh)), coref=True)
        elif kind == "count":
            emit_count()
        elif kind == "filler":
            emit({"kind": "filler", "text": str(rng.choice(FILLER_QUESTIONS))})
        else:
            emit_value_exist()

    def final_round():
        choices, weights = [], []
        if state.named_object is not None:
            choices.append("name_verify"); weights.append(0.80)
        target = state.last_mentioned
        fresh = [a for a in _ATTRS if a not in state.asked[id(target)]]
        if fresh:
            choices.append("coref_fresh"); weights.append(0.12)
        chain_asked = sorted(state.asked[id(referent)])
        if chain_asked:
            choices.append("requery_cat"); weights.append(0.06)
        choices.append("count"); weights.append(0.05)
        choices.append("filler"); weights.append(0.04)
        choices.append("value_exist"); weights.append(0.05)
        kind = str(rng.choice(choices, p=np.asarray(weights) / np.sum(weights)))
        if kind == "name_verify":
            # half the checks pair the name with a different object's
            # category, so the truth hinges on which object the naming
            # utterance's pronoun referred to
            named = state.named_object
            others = [o for o in world.objects if o is not named]
            if others and rng.random() < 0.5:
                category = others[int(rng.integers(len(others)))].category
            else:
                category = named.category
            state.last_mentioned = world.find(category)
            emit({"kind": "name_verify", "category": category,
                  "name": state.named_as})
        elif kind == "coref_fresh":
            emit_attr(target, str(rng.choice(fresh)), coref=True)
        elif kind == "requery_cat":
            emit_attr(referent, str(rng.choice(chain_asked)), coref=False)
        elif kind == "count":
            emit_count()
        elif kind == "filler":
            emit({"kind": "filler", "text": str(rng.choice(FILLER_QUESTIONS))})
        else:
            emit_value_exist()

    while len(program) < config.n_rounds - 1:
        middle_round()
    if len(program) < config.n_rounds:
        final_round()
    return program


def render_question(op: dict) -> str:
    kind = op["kind"]
    if kind == "exist":
        return f"is there a {op['category']} ?"
    if kind == "value_exist":
        return f"is there something {op['color']} ?"
    if kind == "attr":
        return _attr_question(op["attr"], None if op.get("coref") else op["category"])
    if kind == "count_all":
        return "how many objects are there ?"
    if kind == "count_cat":
        return f"how many {op['category']}s are there ?"
    if kind == "name_it":
        return f"let us call it {op['name']} , ok ?"
    if kind == "name_verify":
        return f"is the {op['category']} called {op['name']} ?"
    if kind == "filler":
        return op["text"]
    raise ConfigError(f"unknown program op {kind!r}")


# ---------------------------------------------------------------------------
# Candidate answers and dense relevance
# ---------------------------------------------------------------------------

def candidate_bank(config: SynthConfig) -> list[tuple[str, str]]:
    """(answer text, answer type) pairs covering every oracle answer plus
    distractors; large enough to fill 100-candidate lists."""
    numbers = NUMBER_WORDS[:max(7, config.n_objects + 2)]
    bank: list[tuple[str, str]] = [("yes", "polar"), ("no", "polar"),
                                   ("ok", "polar")]
    bank += [(c, "color") for c in config.colors]
    bank += [(s, "size") for s in config.sizes]
    bank += [(f"on the {p}", "position") for p in config.positions]
    bank += [(n, "number") for n in numbers]
    bank += [(n, "name") for n in config.names]
    bank += [(f"the {cat} is {col}", "other")
             for cat in config.categories for col in config.colors]
    bank += [(f"a {size} {cat}", "other")
             for cat in config.categories for size in config.sizes]
    bank += [(f"maybe {c}", "other") for c in config.colors]
    bank += [("i can not tell", "other"), ("hard to say", "other")]
    return bank


def _answer_type(op: dict) -> str:
    kind = op["kind"]
    if kind in ("exist", "value_exist", "filler", "name_it", "name_verify"):
        return "polar"
    if kind in ("count_all", "count_cat"):
        return "number"
    return op["attr"]  # color / size / position


def build_candidates(rng: np.random.Generator, gt: str, answer_type: str,
                     bank: list[tuple[str, str]]):
    """100 distinct candidates containing the ground truth, with dense
    relevance: exact answer 1.0, same-type candidates 0.25 (polar questions
    accept only the exact answer)."""
    pool = [(text, typ) for text, typ in bank if text != gt]
    if len(pool) < N_CANDIDATES - 1:
        raise ConfigError("candidate bank too small for 100-candidate lists")
    picks = rng.choice(len(pool), size=N_CANDIDATES - 1, replace=False)
    entries = [(gt, answer_type)] + [pool[int(i)] for i in picks]
    order = rng.permutation(N_CANDIDATES)
    candidates = [entries[int(i)][0] for i in order]
    types = [entries[int(i)][1] for i in order]
    gt_index = int(np.nonzero(order == 0)[0][0])
    relevance = []
    for cand, typ in zip(candidates, types):
        if cand == gt:
            relevance.append(1.0)
        elif answer_type != "polar" and typ == answer_type:
            relevance.append(0.25)
        else:
            relevance.append(0.0)
    return candidates, gt_index, relevance


# ---------------------------------------------------------------------------
# Dialog generation
# ---------------------------------------------------------------------------

def generate_synthetic_world(seed: int, config: SynthConfig,
                             with_candidates: bool = True):
    """Generate one (world, region features, dialog record) triple.

    Identical seeds reproduce identical triples bit-exactly. The record's
    answers equal the oracle's answers by construction, and a regression test
    re-derives them through the parsing oracle.
    """
    rng = np.random.default_rng((seed, 0x5EED))
    world = generate_world(rng, config)
    world.seed = seed
    features = encode_features(world, config, rng)
    program = sample_program(rng, world, config)
    world.program = program
    bank = candidate_bank(config)

    rounds = []
    history: list[str] = []
    for op in program:
        question = render_question(op)
        answer = oracle_answer(world, question, history)
        if with_candidates:
            candidates, gt_index, relevance = build_candidates(
                rng, answer, _answer_type(op), bank)
            rounds.append(DialogRound(question=question, answer=answer,
                                      candidates=candidates, gt_index=gt_index,
                                      relevance=relevance))
        else:
            rounds.append(DialogRound(question=question, answer=answer))
        history.append(question)
    record = DialogRecord(image_id=seed, caption=world.caption, rounds=rounds)
    return world, features, record


def generate_corpus(config: SynthConfig, split: str = "train",
                    n_dialogs: int | None = None, seed: int | None = None,
                    with_candidates: bool = True):
    """Generate a corpus of synthetic dialogs.

    Dialog i is seeded with (seed, i), so workers can generate disjoint index
    ranges independently and still reproduce the same corpus.
    """
    n = n_dialogs if n_dialogs is not None else config.n_dialogs
    base_seed = seed if seed is not None else config.seed
    records, features, worlds = [], {}, []
    for i in range(n):
        dialog_seed = int(np.random.default_rng((base_seed, i)).integers(2**31))
        world, mat, record = generate_synthetic_world(dialog_seed, config,
                                                      with_candidates=with_candidates)
        record.image_id = i
        features[i] = mat
        worlds.append(world)
        records.append(record)
    return DialogCorpus(split=split, records=records), features, worlds


# ---------------------------------------------------------------------------
# Serialization to the VisDial v1.0 schema + worlds sidecar
# ---------------------------------------------------------------------------

def corpus_to_visdial_json(corpus: DialogCorpus) -> dict:
    """Serialize in the VisDial v1.0 schema so the standard loader reads it."""
    questions: list[str] = []
    answers: list[str] = []
    q_index: dict[str, int] = {}
    a_index: dict[str, int] = {}

    def qid(text: str) -> int:
        if text not in q_index:
            q_index[text] = len(questions)
            questions.append(text)
        return q_index[text]

    def aid(text: str) -> int:
        if text not in a_index:
            a_index[text] = len(answers)
            answers.append(text)
        return a_index[text]

    dialogs = []
    for rec in corpus.records:
        turns = []
        for rnd in rec.rounds:
            turn: dict = {"question": qid(rnd.question)}
            if rnd.answer is not None:
                turn["answer"] = aid(rnd.answer)
            if rnd.candidates is not None:
                turn["answer_options"] = [aid(c) for c in rnd.candidates]
                turn["gt_index"] = rnd.gt_index
            turns.append(turn)
        dialogs.append({"image_id": rec.image_id, "caption": rec.caption,
                        "dialog": turns})
    return {"split": corpus.split,
            "data": {"dialogs": dialogs, "questions": questions,
                     "answers": answers}}


def dense_annotations_json(corpus: DialogCorpus) -> list[dict]:
    entries = []
    for rec in corpus.records:
        for i, rnd in enumerate(rec.rounds):
            if rnd.relevance is not None:
                entries.append({"image_id": rec.image_id, "round_id": i + 1,
                                "gt_relevance": rnd.relevance})
    return entries


def save_worlds(worlds: list[SyntheticWorld], records: list[DialogRecord],
                path: str | Path) -> None:
    payload = [{"image_id": rec.image_id, **world.to_json()}
               for world, rec in zip(worlds, records)]
    Path(path).write_text(json.dumps(payload, indent=1))


def load_worlds(path: str | Path) -> dict:
    data = json.loads(Path(path).read_text())
    return {entry["image_id"]: SyntheticWorld.from_json(entry) for entry in data}
