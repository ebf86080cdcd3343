"""Synthetic multi-passage retrieval tasks over a closed word-level vocabulary.

A task is a list of cache units plus a fresh query: unit 0 is the shared
instruction prefix, unit i >= 1 is a passage with its leading separator
attached, and the query portion (separator + repeated instruction +
question + answer stub) is never cached. Concatenating all units and the
query reproduces the rendered prompt template exactly.

Two task families carry the evaluation:

* bridge: "A stays in B's house on <day>" in one passage, "B's house is in
  <city>" in another, plus a contradicting distractor about A's own house.
  Answering needs both facts; the distractor is the trap answer.
* multivalue: several "The special magic number for <key> is <value>"
  needles for one key scattered across passages, answered in order of
  appearance, with other keys as distractors.

Tokens are whitespace-delimited words (leading space in their byte form),
bare punctuation marks, and a newline token. Possessives are single words.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, InputError
from .model import KVCache, ModelConfig, ModelWeights, full_prefill, greedy_generate

PREFIX_TEXT = ("Answer the question based on the given passages. Only give me the "
               "answer and do not output any other words.\n\nThe following are "
               "given passages.\n")
QUERY_PREAMBLE = ("\n\nAnswer the question based on the given passages. Only give "
                  "me the answer and do not output any other words.\n\nQuestion: ")
ANSWER_SUFFIX = "\nAnswer:"

NAMES = ["Alice", "John", "Bob", "Carol", "David", "Emma", "Frank", "Grace",
         "Henry", "Ivy", "Jack", "Kate", "Liam", "Mary", "Noah", "Olivia",
         "Peter", "Quinn", "Rachel", "Sam", "Tina", "Victor", "Wendy", "Zoe"]

CITIES = ["London", "Paris", "Tokyo", "Berlin", "Madrid", "Rome", "Vienna",
          "Oslo", "Cairo", "Sydney", "Toronto", "Boston", "Austin", "Denver",
          "Lisbon", "Prague", "Dublin", "Athens", "Moscow", "Delhi", "Seoul",
          "Lima", "Geneva", "Havana"]

DAYS = ["Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday"]

MAGIC_KEYS = ["apples", "rivers", "lanterns", "engines", "orchids", "falcons",
              "marbles", "bridges", "comets", "violins", "anchors", "beacons",
              "cedars", "dolphins", "embers", "fountains", "glaciers", "harbors",
              "islands", "jungles", "kettles", "ladders", "meadows", "nutmegs"]

MAGIC_VALUES = [str(101 + 7 * i) for i in range(120)]

FILLER_SENTENCES = [
    "A new coffee shop opened near the central park last week.",
    "The city library extended its opening hours to 9 PM daily.",
    "The summer music festival attracted over ten thousand attendees this year.",
    "A new batch of public bicycles was put into use in the urban area.",
    "The downtown art gallery is hosting a modern painting exhibition this week.",
    "The local football team won the regional championship last month.",
    "Several volunteers cleaned the riverside walking trail on Saturday morning.",
    "The weather service expects mild temperatures for the rest of the week.",
    "A famous chef opened a small bakery near the train station.",
    "The history museum announced free admission for students this season.",
    "Construction of the new bridge is expected to finish next spring.",
    "The farmers market now runs twice a week in the main square.",
    "A documentary about mountain wildlife premiered at the local cinema.",
    "The university planted two hundred trees along the campus avenue.",
    "City officials unveiled a plan to modernize the old tram network.",
    "The harbor festival ended with a short fireworks display over the bay.",
]

_PIECES = re.compile(r"\n|[A-Za-z0-9']+|[.,?:]")
_PUNCT = [".", ",", "?", ":", "\n"]
EOS_TOKEN = "<eos>"


def _words_of(text: str) -> list[str]:
    return [p for p in _PIECES.findall(text) if p not in _PUNCT]


def build_vocab() -> list[str]:
    """Deterministic token table: eos, punctuation, then every corpus word."""
    tokens: list[str] = [EOS_TOKEN] + _PUNCT
    seen = set(tokens)
    sources: list[str] = [PREFIX_TEXT, QUERY_PREAMBLE, ANSWER_SUFFIX]
    sources += FILLER_SENTENCES
    sources += ["stays in house is on", "The special magic number numbers for",
                "What are all", "In which city does stay", "What is the"]
    words: list[str] = []
    for text in sources:
        words += _words_of(text)
    words += NAMES + [n + "'s" for n in NAMES] + CITIES + DAYS + MAGIC_KEYS + MAGIC_VALUES
    for w in words:
        tok = " " + w
        if tok not in seen:
            seen.add(tok)
            tokens.append(tok)
    return tokens


class Tokenizer:
    """Closed-vocabulary word tokenizer; ids index a flat byte-string table."""

    def __init__(self, tokens: list[str]):
        self.tokens = list(tokens)
        self._ids = {t: i for i, t in enumerate(self.tokens)}
        if len(self._ids) != len(self.tokens):
            raise ArgumentError("token table contains duplicates")
        if EOS_TOKEN not in self._ids:
            raise ArgumentError("token table is missing the end-of-answer token")

    @property
    def vocab_size(self) -> int:
        return len(self.tokens)

    @property
    def eos_id(self) -> int:
        return self._ids[EOS_TOKEN]

    def encode(self, text: str) -> list[int]:
        out = []
        for piece in _PIECES.findall(text):
            tok = piece if piece in _PUNCT else " " + piece
            if tok not in self._ids:
                raise InputError(f"token {piece!r} is not in the vocabulary")
            out.append(self._ids[tok])
        return out

    def decode(self, ids) -> str:
        return "".join(self.tokens[int(i)] for i in ids)

    def render(self, ids) -> str:
        """Human-oriented rendering: no artificial space at line starts."""
        return self.decode(ids).replace("\n ", "\n").lstrip(" ")


@dataclass
class RagTask:
    task_id: str
    kind: str                                     # bridge | multivalue | needle | showcase
    seed: int
    chunk_tokens: list[list[int]]                 # cache units; unit 0 is the prefix
    query_tokens: list[int]
    gold_tokens: list[int]
    relevant_spans: list[tuple[int, int, int]]    # (unit, start, end) token ranges
    distractor_spans: list[tuple[int, int, int]] = field(default_factory=list)
    prompt_text: str = ""
    query_text: str = ""
    gold_text: str = ""

    @property
    def context_tokens(self) -> list[int]:
        return [t for unit in self.chunk_tokens for t in unit]

    @property
    def full_tokens(self) -> list[int]:
        return self.context_tokens + self.query_tokens

    def to_json_dict(self) -> dict:
        return {
            "version": 1, "task_id": self.task_id, "kind": self.kind,
            "seed": self.seed, "chunk_tokens": self.chunk_tokens,
            "query_tokens": self.query_tokens, "gold_tokens": self.gold_tokens,
            "relevant_spans": [list(s) for s in self.relevant_spans],
            "distractor_spans": [list(s) for s in self.distractor_spans],
            "prompt_text": self.prompt_text, "query_text": self.query_text,
            "gold_text": self.gold_text,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "RagTask":
        if d.get("version") != 1:
            raise InputError(f"unsupported task file version {d.get('version')!r}")
        return cls(
            task_id=d["task_id"], kind=d["kind"], seed=d["seed"],
            chunk_tokens=[list(c) for c in d["chunk_tokens"]],
            query_tokens=list(d["query_tokens"]), gold_tokens=list(d["gold_tokens"]),
            relevant_spans=[tuple(s) for s in d["relevant_spans"]],
            distractor_spans=[tuple(s) for s in d.get("distractor_spans", [])],
            prompt_text=d.get("prompt_text", ""), query_text=d.get("query_text", ""),
            gold_text=d.get("gold_text", ""),
        )


def _find_span(haystack: list[int], needle: list[int]) -> tuple[int, int]:
    n = len(needle)
    for i in range(len(haystack) - n + 1):
        if haystack[i:i + n] == needle:
            return i, i + n
    raise InputError("sentence tokens not found inside their unit")


def _build_units(tok: Tokenizer, passages: list[list[str]]) -> list[list[int]]:
    """Unit 0 = prefix; unit i = leading separator + passage sentences."""
    units = [tok.encode(PREFIX_TEXT)]
    for sentences in passages:
        units.append(tok.encode("\n\n" + " ".join(sentences)))
    return units


def _query_tokens(tok: Tokenizer, question: str) -> list[int]:
    # passage separator, then the preamble's own blank line
    return tok.encode("\n\n" + QUERY_PREAMBLE + question + ANSWER_SUFFIX)


def _render_prompt(tok: Tokenizer, units: list[list[int]], query: list[int]) -> str:
    return tok.render([t for u in units for t in u] + query)


def _assemble_task(tok: Tokenizer, kind: str, seed: int, passages: list[list[str]],
                   question: str, gold_text_words: list[str],
                   fact_sentences: list[tuple[int, str]],
                   distractor_sentences: list[tuple[int, str]]) -> RagTask:
    units = _build_units(tok, passages)
    query = _query_tokens(tok, question)
    gold = tok.encode(" ".join(gold_text_words))

    def spans(located: list[tuple[int, str]]) -> list[tuple[int, int, int]]:
        out = []
        for unit_idx, sentence in located:
            s, e = _find_span(units[unit_idx], tok.encode(sentence))
            out.append((unit_idx, s, e))
        return out

    return RagTask(
        task_id=f"{kind}-{seed:06d}", kind=kind, seed=seed,
        chunk_tokens=units, query_tokens=query, gold_tokens=gold,
        relevant_spans=spans(fact_sentences),
        distractor_spans=spans(distractor_sentences),
        prompt_text=_render_prompt(tok, units, query),
        query_text=question, gold_text=" ".join(gold_text_words),
    )


def _pick_fillers(rng: np.random.Generator, count: int) -> list[str]:
    idx = rng.permutation(len(FILLER_SENTENCES))[:count]
    return [FILLER_SENTENCES[i] for i in idx]


def gen_bridge_task(tok: Tokenizer, seed: int, n_chunks: int = 3,
                    sentences_per_chunk: int = 3, with_distractor: bool = True) -> RagTask:
    """Two-hop task: resolve whose house, then where that house is."""
    if n_chunks < 2:
        raise ArgumentError("bridge tasks need at least two passages")
    rng = np.random.default_rng(seed)
    person, owner = (NAMES[i] for i in rng.choice(len(NAMES), size=2, replace=False))
    city, decoy_city = (CITIES[i] for i in rng.choice(len(CITIES), size=2, replace=False))
    day = DAYS[rng.integers(len(DAYS))]
    fact_stay = f"{person} stays in {owner}'s house on {day}."
    fact_house = f"{owner}'s house is in {city}."
    fact_decoy = f"{person}'s house is in {decoy_city}."

    passages = [_pick_fillers(rng, sentences_per_chunk) for _ in range(n_chunks)]
    if n_chunks >= 3 and with_distractor:
        c_stay, c_house, c_decoy = rng.choice(n_chunks, size=3, replace=False)
    else:
        c_stay, c_house = rng.choice(n_chunks, size=2, replace=False)
        c_decoy = int(rng.integers(n_chunks)) if with_distractor else -1
    placed_facts, placed_decoys = [], []
    for chunk_idx, sentence, bucket in [
        (int(c_stay), fact_stay, placed_facts),
        (int(c_house), fact_house, placed_facts),
    ] + ([(int(c_decoy), fact_decoy, placed_decoys)] if with_distractor else []):
        slot = int(rng.integers(sentences_per_chunk))
        passages[chunk_idx][slot] = sentence
        bucket.append((chunk_idx + 1, sentence))  # +1: unit 0 is the prefix
    # a fact overwritten by a later fact in the same slot would break the task
    texts = [s for p in passages for s in p]
    if fact_stay not in texts or fact_house not in texts:
        return gen_bridge_task(tok, seed + 100003, n_chunks, sentences_per_chunk,
                               with_distractor)
    question = f"In which city does {person} stay on {day}?"
    return _assemble_task(tok, "bridge", seed, passages, question, [city],
                          placed_facts, placed_decoys)


def gen_multivalue_task(tok: Tokenizer, seed: int, n_chunks: int = 3,
                        n_values: int = 2, sentences_per_chunk: int = 3,
                        n_distractor_keys: int = 1) -> RagTask:
    """All-values retrieval for one key, values scattered across passages."""
    rng = np.random.default_rng(seed)
    keys = [MAGIC_KEYS[i] for i in
            rng.choice(len(MAGIC_KEYS), size=1 + n_distractor_keys, replace=False)]
    key, decoy_keys = keys[0], keys[1:]
    n_needles = n_values + len(decoy_keys)
    values = [MAGIC_VALUES[i] for i in
              rng.choice(len(MAGIC_VALUES), size=n_needles, replace=False)]
    passages = [_pick_fillers(rng, sentences_per_chunk) for _ in range(n_chunks)]
    slots = [(c, s) for c in range(n_chunks) for s in range(sentences_per_chunk)]
    if n_needles > len(slots):
        raise ArgumentError("more needles than sentence slots")
    chosen = [slots[i] for i in rng.choice(len(slots), size=n_needles, replace=False)]
    needles = [(key, v) for v in values[:n_values]]
    needles += [(dk, v) for dk, v in zip(decoy_keys, values[n_values:])]
    placed: list[tuple[tuple[int, int], str, str]] = []
    for (c, s), (k, v) in zip(chosen, needles):
        sentence = f"The special magic number for {k} is {v}."
        passages[c][s] = sentence
        placed.append(((c, s), k, sentence))
    placed.sort(key=lambda item: item[0])
    gold_values = [sent.split(" is ")[1].rstrip(".") for (_, k, sent) in placed if k == key]
    fact_sents = [(c + 1, sent) for ((c, _), k, sent) in placed if k == key]
    decoy_sents = [(c + 1, sent) for ((c, _), k, sent) in placed if k != key]
    question = f"What are all the special magic numbers for {key}?"
    return _assemble_task(tok, "multivalue", seed, passages, question, gold_values,
                          fact_sents, decoy_sents)


def gen_needle_task(tok: Tokenizer, seed: int, n_chunks: int = 3,
                    sentences_per_chunk: int = 3) -> RagTask:
    """Single-needle variant of the multivalue family."""
    task = gen_multivalue_task(tok, seed, n_chunks=n_chunks, n_values=1,
                               sentences_per_chunk=sentences_per_chunk,
                               n_distractor_keys=1)
    key = task.query_text.split("for ")[1].rstrip("?")
    question = f"What is the special magic number for {key}?"
    return RagTask(
        task_id=f"needle-{seed:06d}", kind="needle", seed=seed,
        chunk_tokens=task.chunk_tokens,
        query_tokens=_query_tokens(tok, question),
        gold_tokens=task.gold_tokens,
        relevant_spans=task.relevant_spans, distractor_spans=task.distractor_spans,
        prompt_text=_render_prompt(tok, task.chunk_tokens, _query_tokens(tok, question)),
        query_text=question, gold_text=task.gold_text,
    )


def showcase_task(tok: Tokenizer) -> RagTask:
    """The worked three-passage example: bridge facts plus a decoy, verbatim."""
    passages = [
        ["A new coffee shop opened near the central park last week.",
         "John's house is in London.",
         "The city library extended its opening hours to 9 PM daily."],
        ["The summer music festival attracted over ten thousand attendees this year.",
         "Alice's house is in Paris.",
         "A new batch of public bicycles was put into use in the urban area."],
        ["The downtown art gallery is hosting a modern painting exhibition this week.",
         "Alice stays in John's house on Monday.",
         "The local football team won the regional championship last month."],
    ]
    task = _assemble_task(
        tok, "showcase", 0, passages,
        "In which city does Alice stay on Monday?", ["London"],
        [(1, "John's house is in London."), (3, "Alice stays in John's house on Monday.")],
        [(2, "Alice's house is in Paris.")],
    )
    task.task_id = "showcase"
    return task


def chunk_corpus(tokens, chunk_len: int) -> list[list[int]]:
    """Split a token stream into fixed-size chunks; the last one may be short."""
    if chunk_len < 1:
        raise ArgumentError(f"chunk_len must be >= 1, got {chunk_len}")
    toks = list(tokens)
    return [toks[i:i + chunk_len] for i in range(0, len(toks), chunk_len)]


def full_prefill_answer(weights: ModelWeights, config: ModelConfig, task: RagTask,
                        eos_id: int, max_new_tokens: int = 8) -> list[int]:
    """Greedy answer of the joint forward pass (the calibration reference)."""
    trace = full_prefill(weights, config, task.full_tokens)
    gen = greedy_generate(weights, config, KVCache.from_prefill(trace),
                          max_new_tokens, stop_ids=(eos_id,))
    return gen.tokens


def calibrate_tasks(weights: ModelWeights, config: ModelConfig, tasks: list[RagTask],
                    eos_id: int, max_new_tokens: int = 8) -> list[RagTask]:
    """Keep only tasks the joint forward pass answers exactly."""
    kept = []
    for task in tasks:
        if full_prefill_answer(weights, config, task, eos_id, max_new_tokens) == task.gold_tokens:
            kept.append(task)
    return kept
