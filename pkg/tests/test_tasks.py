"""Closed-vocabulary tokenizer and the retrieval task generator."""

import re

import numpy as np
import pytest

from pikv.errors import ArgumentError, InputError
from pikv.tasks import (ANSWER_SUFFIX, EOS_TOKEN, PREFIX_TEXT, QUERY_PREAMBLE,
                        RagTask, Tokenizer, build_vocab, chunk_corpus,
                        gen_bridge_task, gen_multivalue_task, gen_needle_task,
                        showcase_task)


def test_vocab_is_deterministic_and_clean():
    a, b = build_vocab(), build_vocab()
    assert a == b
    assert len(a) == len(set(a))
    assert a[0] == EOS_TOKEN


def test_every_template_piece_tokenizes(tok):
    tok.encode(PREFIX_TEXT)
    tok.encode(QUERY_PREAMBLE)
    tok.encode(ANSWER_SUFFIX)


def test_encode_decode_round_trip(tok):
    text = "Alice stays in John's house on Friday."
    ids = tok.encode(text)
    assert tok.render(ids) == text
    assert all(0 <= i < tok.vocab_size for i in ids)


def test_encode_rejects_out_of_vocabulary(tok):
    with pytest.raises(InputError):
        tok.encode("the quetzalcoatl")


def test_duplicate_table_rejected():
    with pytest.raises(ArgumentError):
        Tokenizer([EOS_TOKEN, " a", " a"])


def test_table_requires_end_marker():
    with pytest.raises(ArgumentError):
        Tokenizer([" a", " b"])


def test_showcase_prompt_reproduces_the_template(tok):
    task = showcase_task(tok)
    assert task.task_id == "showcase"
    assert task.gold_text == "London"
    text = task.prompt_text
    assert text.startswith("Answer the question based on the given passages.")
    assert "Passage 1:" not in text  # passages are separated by blank lines only
    assert "John's house is in London." in text
    assert "Alice's house is in Paris." in text
    assert text.rstrip().endswith("Answer:")
    # the rendered prompt is exactly the decoded token stream
    assert tok.render(task.full_tokens) == text


def test_prompt_layout_prefix_then_separated_passages(tok):
    task = gen_bridge_task(tok, seed=11)
    # unit 0 is the shared prefix; later units start with the separator
    assert task.chunk_tokens[0] == tok.encode(PREFIX_TEXT)
    for unit in task.chunk_tokens[1:]:
        assert tok.decode(unit).startswith("\n\n")
    # full prompt = context + query suffix, token-exact
    assert task.full_tokens == [t for u in task.chunk_tokens for t in u] \
        + task.query_tokens


def test_bridge_task_structure(tok):
    task = gen_bridge_task(tok, seed=3)
    assert task.kind == "bridge"
    assert len(task.chunk_tokens) == 4  # prefix + 3 passages
    assert len(task.gold_tokens) == 1
    assert task.gold_text in task.prompt_text
    # the two hop facts live in the flagged spans
    texts = [tok.decode(u) for u in task.chunk_tokens]
    for unit, start, end in task.relevant_spans:
        frag = tok.decode(task.chunk_tokens[unit][start:end])
        assert "house" in frag
    assert task.query_text in task.prompt_text


def test_bridge_spans_cover_the_named_facts(tok):
    for seed in range(12):
        task = gen_bridge_task(tok, seed=seed)
        joined = ""
        for unit, start, end in task.relevant_spans:
            joined += tok.decode(task.chunk_tokens[unit][start:end])
        assert "stays in" in joined and "house is in" in joined
        assert f" {task.gold_text}" in joined


def test_bridge_decoy_never_displaces_facts(tok):
    # the generator re-rolls seeds whose decoy would overwrite a hop fact
    for seed in range(40):
        task = gen_bridge_task(tok, seed=seed)
        text = task.prompt_text
        q = task.query_text
        person = q.split("does ")[1].split(" stay")[0]
        assert re.search(rf"{person} stays in \w+'s house", text)


def test_multivalue_gold_is_in_passage_order(tok):
    for seed in range(12):
        task = gen_multivalue_task(tok, seed=seed, n_values=2)
        assert task.kind == "multivalue"
        key = task.query_text.split("for ")[1].rstrip("?")
        hits = re.findall(rf"The special magic number for {re.escape(key)} is (\d+)\.",
                          task.prompt_text)
        assert hits == task.gold_text.split(" ")
        assert len(hits) == 2


def test_multivalue_distractor_key_is_excluded(tok):
    task = gen_multivalue_task(tok, seed=5)
    key = task.query_text.split("for ")[1].rstrip("?")
    all_needles = re.findall(r"The special magic number for ([A-Za-z]+) is (\d+)\.",
                             task.prompt_text)
    decoys = [v for k, v in all_needles if k != key]
    assert decoys  # a distractor key is present
    for v in decoys:
        assert v not in task.gold_text.split(" ")


def test_needle_task_is_single_valued(tok):
    task = gen_needle_task(tok, seed=9)
    assert task.kind == "needle"
    assert len(task.gold_text.split(" ")) == 1
    assert f"is {task.gold_text}." in task.prompt_text
    assert "What is the special magic number" in task.query_text


def test_task_sizes_scale_with_knobs(tok):
    small = gen_needle_task(tok, seed=1, n_chunks=3, sentences_per_chunk=3)
    big = gen_needle_task(tok, seed=1, n_chunks=4, sentences_per_chunk=5)
    assert len(big.context_tokens) > len(small.context_tokens)
    assert len(big.chunk_tokens) == 5


def test_task_json_round_trip(tok):
    task = gen_bridge_task(tok, seed=21)
    clone = RagTask.from_json_dict(task.to_json_dict())
    assert clone == task


def test_task_ids_are_unique_per_seed(tok):
    ids = {gen_needle_task(tok, seed=s).task_id for s in range(10)}
    assert len(ids) == 10


def test_chunk_corpus_fixed_width_split():
    assert chunk_corpus(range(7), 3) == [[0, 1, 2], [3, 4, 5], [6]]
    assert chunk_corpus([], 4) == []
    assert chunk_corpus([1, 2], 2) == [[1, 2]]
    with pytest.raises(ArgumentError):
        chunk_corpus([1], 0)


def test_spans_index_into_their_units(tok):
    for gen in (gen_bridge_task, gen_multivalue_task, gen_needle_task):
        task = gen(tok, seed=13)
        for unit, start, end in task.relevant_spans + task.distractor_spans:
            assert 1 <= unit < len(task.chunk_tokens)
            assert 0 <= start < end <= len(task.chunk_tokens[unit])


def test_query_suffix_begins_with_separator(tok):
    task = gen_needle_task(tok, seed=4)
    newline = tok.encode("\n")[0]
    assert task.query_tokens[0] == newline and task.query_tokens[1] == newline
    rendered = tok.render(task.query_tokens)
    assert rendered.endswith("Answer:")
    assert task.query_text in rendered
