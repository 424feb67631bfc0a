import random

import pytest
from hypothesis import given, settings, strategies as st

from domain_atsc.errors import CorruptShard, DegenerateSequence, InsufficientData
from domain_atsc.lmdata import (KEEP_ACTION, MASK_ACTION, RANDOM_ACTION, MaskingPolicy, MaskedPairExample,
                                NspPair, apply_mlm_mask, encode_pair, generate_examples, make_nsp_pairs,
                                pack_and_encode, read_shard, write_shard)
from domain_atsc.text import ReviewDoc, build_vocab

from conftest import WORDS, random_docs


def _two_docs():
    a = ReviewDoc("A", [["a1"], ["a2"]], "laptops")
    b = ReviewDoc("B", [["b1"], ["b2"]], "laptops")
    return a, b


def test_nsp_positive_adjacency():
    a, b = _two_docs()
    pairs = make_nsp_pairs([a, b], seed=0, next_prob=1.0)
    assert (["a1"], ["a2"], True) in [p.as_tuple() for p in pairs]


def test_nsp_negative_from_other_doc():
    a, b = _two_docs()
    for seed in range(20):
        for p in make_nsp_pairs([a, b], seed=seed, next_prob=0.0):
            if p.a_doc is a:
                assert p.sent_b in (["b1"], ["b2"]) and not p.is_next


def test_nsp_single_doc_negative_fails():
    a, _ = _two_docs()
    with pytest.raises(InsufficientData):
        make_nsp_pairs([a], seed=0, next_prob=0.0)


def test_nsp_requires_two_sentences():
    with pytest.raises(InsufficientData):
        make_nsp_pairs([ReviewDoc("x", [["only"]], "laptops")], seed=0)


def test_nsp_is_next_fraction():
    docs = random_docs(100, seed=11, sentences=(101, 102), length=(1, 2))
    pairs = make_nsp_pairs(docs, seed=2)
    assert len(pairs) >= 10_000
    frac = sum(p.is_next for p in pairs) / len(pairs)
    assert 0.48 <= frac <= 0.52


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_nsp_negatives_never_share_doc(seed):
    docs = random_docs(6, seed=seed % 97)
    for p in make_nsp_pairs(docs, seed=seed):
        if not p.is_next:
            assert p.b_doc.doc_id != p.a_doc.doc_id
        else:
            assert p.b_doc is p.a_doc and p.b_position == p.a_position + 1


# ---- masking

def test_mask_rate_zero(vocab):
    ids = [vocab.cls_id] + vocab.encode(["the", "food"]) + [vocab.sep_id]
    res = apply_mlm_mask(ids, MaskingPolicy(select_rate=0.0), vocab, seed=1)
    assert res.input_ids == ids and res.positions == []


def test_mask_touchscreen_example():
    v = build_vocab([["the", "touchscreen", "is", "an", "input", "device"]])
    tokens = ["the", "touchscreen", "is", "an", "input", "device"]
    ids, _ = encode_pair(v.encode(tokens[:3]), v.encode(tokens[3:]), v, 16, pad=False)
    # select everything, always mask, then look at the "input" position
    res = apply_mlm_mask(ids, MaskingPolicy(1.0, 1.0, 0.0, 0.0), v, seed=0)
    pos = ids.index(v.token_to_id["input"])
    assert res.input_ids[pos] == v.mask_id
    assert res.labels[res.positions.index(pos)] == v.token_to_id["input"]


def test_mask_statistics():
    v = build_vocab([WORDS])
    rng = random.Random(0)
    ids = [v.cls_id] + [rng.randrange(5, v.size) for _ in range(120_000)] + [v.sep_id]
    res = apply_mlm_mask(ids, MaskingPolicy(), v, seed=7)
    maskable = len(ids) - 2
    assert 0.147 <= len(res.positions) / maskable <= 0.153
    n = len(res.actions)
    for action, target in ((MASK_ACTION, 0.8), (RANDOM_ACTION, 0.1), (KEEP_ACTION, 0.1)):
        assert abs(res.actions.count(action) / n - target) <= 0.01


def test_mask_skips_special_tokens(vocab):
    ids, _ = encode_pair(vocab.encode(["the", "food"]), vocab.encode(["good"]), vocab, 12)
    res = apply_mlm_mask(ids, MaskingPolicy(select_rate=1.0), vocab, seed=0)
    specials = {vocab.cls_id, vocab.sep_id, vocab.pad_id}
    assert all(ids[p] not in specials for p in res.positions)
    assert len(res.positions) == 3


@settings(max_examples=40)
@given(st.lists(st.integers(5, 30), min_size=1, max_size=40), st.integers(0, 2**32))
def test_mask_reconstruction(body, seed):
    v = build_vocab([WORDS])
    body = [b % v.size if b % v.size >= 5 else 5 for b in body]
    ids = [v.cls_id] + body + [v.sep_id]
    res = apply_mlm_mask(ids, MaskingPolicy(select_rate=0.5), v, seed)
    restored = list(res.input_ids)
    for p, label, action in zip(res.positions, res.labels, res.actions):
        if action in (MASK_ACTION, RANDOM_ACTION):
            restored[p] = label
    assert restored == ids
    assert res.positions == sorted(set(res.positions))


def test_masking_policy_validation():
    with pytest.raises(ValueError):
        MaskingPolicy(mask_frac=0.5, random_frac=0.1, keep_frac=0.1)
    assert MaskingPolicy.from_description(MaskingPolicy(0.2).describe()) == MaskingPolicy(0.2)


# ---- packing

def test_encode_pair_counts():
    v = build_vocab([WORDS])
    ids, segs = encode_pair(v.encode(["the", "food", "was"]), v.encode(["very", "good", "."]), v, 9)
    assert len(ids) == 9
    assert segs == [0] * 5 + [1] * 4


def test_encode_pair_truncates_b_first(vocab):
    ids, segs = encode_pair(list(range(5, 10)), list(range(10, 20)), vocab, 10)
    assert len(ids) == 10
    assert ids[1:6] == list(range(5, 10))
    assert ids[7:9] == [10, 11]


def test_encode_pair_truncates_a_after_b():
    v = build_vocab([WORDS])
    ids, _ = encode_pair(list(range(5, 25)), list(range(5, 25)), v, 8)
    assert ids == [v.cls_id, 5, 6, 7, 8, v.sep_id, 5, v.sep_id]


def test_encode_pair_degenerate(vocab):
    with pytest.raises(DegenerateSequence):
        encode_pair([5], [6], vocab, 4)
    with pytest.raises(DegenerateSequence):
        encode_pair([], [6], vocab, 10)


def test_padding_keeps_last_segment(vocab):
    ids, segs = encode_pair([5, 6], [7], vocab, 10)
    assert ids[6:] == [vocab.pad_id] * 4 and segs[6:] == [1] * 4


def _check_invariants(ex: MaskedPairExample, vocab, max_len):
    assert len(ex.input_ids) == max_len == len(ex.segment_ids)
    assert ex.input_ids[0] == vocab.cls_id
    real = ex.input_ids[:ex.num_tokens]
    assert real.count(vocab.sep_id) == 2
    first_sep = real.index(vocab.sep_id)
    assert ex.segment_ids[:first_sep + 1] == [0] * (first_sep + 1)
    assert set(ex.segment_ids[first_sep + 1:]) == {1}
    assert ex.mlm_positions == sorted(set(ex.mlm_positions))
    assert len(ex.mlm_positions) == len(ex.mlm_labels)
    assert all(0 < p < ex.num_tokens and ex.input_ids[p] not in (vocab.cls_id, vocab.sep_id, vocab.pad_id)
               for p in ex.mlm_positions)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.sampled_from([16, 32, 64]))
def test_generated_examples_satisfy_invariants(seed, max_len):
    v = build_vocab([WORDS])
    docs = random_docs(12, seed=seed)
    for ex in generate_examples(docs, v, MaskingPolicy(), seed, max_len):
        _check_invariants(ex, v, max_len)


def test_packing_sentences_per_sequence():
    rng = random.Random(0)
    v = build_vocab([WORDS])
    docs = [ReviewDoc(f"d{i}", [[rng.choice(WORDS) for _ in range(12)] for _ in range(20)], "restaurants")
            for i in range(30)]
    examples = pack_and_encode(make_nsp_pairs(docs, seed=1), v, max_len=256)
    mean = sum(ex.num_sentences for ex in examples) / len(examples)
    assert mean >= 3


def test_packing_overlong_sentence_truncated():
    v = build_vocab([WORDS])
    docs = [ReviewDoc("a", [["the"] * 50, ["food"] * 50], "laptops"), ReviewDoc("b", [["good"] * 5, ["bad"]], "laptops")]
    pairs = [NspPair(docs[0], 0, docs[0], 1, True)]
    (ex,) = pack_and_encode(pairs, v, max_len=32)
    assert ex.num_tokens == 32


def test_generation_is_pure_and_worker_independent():
    v = build_vocab([WORDS])
    docs = random_docs(30, seed=4)
    one = generate_examples(docs, v, MaskingPolicy(), 5, 32, num_shards=3, workers=1)
    two = generate_examples(docs, v, MaskingPolicy(), 5, 32, num_shards=3, workers=2)
    assert one == two == generate_examples(docs, v, MaskingPolicy(), 5, 32, num_shards=3)
    assert [(e.doc_id, e.position) for e in one] == sorted((e.doc_id, e.position) for e in one)


# ---- shard files

def test_shard_round_trip(tmp_path):
    v = build_vocab([WORDS])
    examples = generate_examples(random_docs(10, seed=6), v, MaskingPolicy(), 3, 32)
    stats = write_shard(tmp_path / "s.bin", examples, v, 32, MaskingPolicy(), 3)
    header, loaded = read_shard(tmp_path / "s.bin")
    assert loaded == examples
    assert header["vocab_hash"] == v.hash and int(header["seed"]) == 3
    assert stats["pairs"] == len(examples) == stats["is_next"] + stats["not_next"]
    assert (tmp_path / "s.bin.stats.json").exists()


def test_corrupt_shard(tmp_path):
    v = build_vocab([WORDS])
    examples = generate_examples(random_docs(4, seed=6), v, MaskingPolicy(), 3, 32)
    write_shard(tmp_path / "s.bin", examples, v, 32, MaskingPolicy(), 3)
    data = (tmp_path / "s.bin").read_bytes()
    (tmp_path / "cut.bin").write_bytes(data[:-7])
    with pytest.raises(CorruptShard):
        read_shard(tmp_path / "cut.bin")
    (tmp_path / "junk.bin").write_bytes(b"not a shard at all")
    with pytest.raises(CorruptShard):
        read_shard(tmp_path / "junk.bin")
