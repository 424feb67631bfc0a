import pytest
import torch

from domain_atsc.checkpoint import checkpoint_bytes, load_checkpoint
from domain_atsc.errors import DegenerateSequence, EmptyDataset, TestSplitLeak, VocabMismatch
from domain_atsc.lmdata import MaskingPolicy, generate_examples, write_shard
from domain_atsc.synthetic import atsc_dataset
from domain_atsc.text import AtscExample, Domain, Polarity, build_vocab
from domain_atsc.training import (FULL_SCALE_ATSC_EPOCHS, FULL_SCALE_BATCH_SIZE, FULL_SCALE_LM_BUDGETS,
                                  FULL_SCALE_LR, AtscRunSpec, FinetuneRunSpec, encode_atsc_input,
                                  lm_finetune, split_validation, train_atsc)

from conftest import WORDS, random_docs, toy_model
from gates import atsc_overfit, lm_overfit


@pytest.fixture(scope="module")
def lm_setup():
    vocab = build_vocab([WORDS])
    examples = generate_examples(random_docs(40, seed=8), vocab, MaskingPolicy(), 1, 32)
    return vocab, examples


def small_model(vocab, seed=0):
    return toy_model(vocab.size, seed=seed, dtype=torch.float32)


# ---- specs

def test_spec_validation():
    with pytest.raises(ValueError):
        FinetuneRunSpec("laptops", epochs=0)
    with pytest.raises(ValueError):
        FinetuneRunSpec("laptops", snapshots=(0, 10, 10))
    with pytest.raises(ValueError):
        AtscRunSpec("laptops", epochs=0)


def test_full_scale_defaults():
    spec = AtscRunSpec("restaurants")
    assert (spec.lr, spec.batch_size, spec.epochs) == (3e-5, 32, 7)
    assert (FULL_SCALE_LR, FULL_SCALE_BATCH_SIZE, FULL_SCALE_ATSC_EPOCHS) == (3e-5, 32, 7)
    assert FinetuneRunSpec.full_scale("laptops").epochs == 30


@pytest.mark.parametrize("domain,epochs", [(Domain.LAPTOPS, 30), (Domain.RESTAURANTS, 3), (Domain.JOINT, 15)])
def test_corpus_budgets_give_about_30m_presentations(domain, epochs):
    sentences, budget_epochs = FULL_SCALE_LM_BUDGETS[domain]
    assert budget_epochs == epochs
    assert abs(sentences * epochs - 30e6) / 30e6 < 0.02


# ---- ATSC input encoding

def test_encode_dumplings(vocab):
    ex = AtscExample("i love their dumplings".split(), 3, 1, Polarity.POSITIVE, "restaurants")
    ids, segs = encode_atsc_input(ex, vocab)
    assert vocab.decode(ids) == "[CLS] i love their dumplings [SEP] dumplings [SEP]".split()
    assert segs == [0] * 6 + [1] * 2


def test_whole_sentence_target(vocab):
    ex = AtscExample(["the", "food"], 0, 2, Polarity.NEUTRAL, "restaurants")
    ids, segs = encode_atsc_input(ex, vocab)
    assert ids[1:3] == ids[4:6]


def test_format_contract(vocab):
    for ex in atsc_dataset(Domain.LAPTOPS, 30, seed=2):
        v = build_vocab([ex.tokens])
        ids, segs = encode_atsc_input(ex, v)
        assert ids.count(v.cls_id) == 1 and ids[0] == v.cls_id
        assert ids.count(v.sep_id) == 2 and ids[-1] == v.sep_id
        assert segs == sorted(segs) and set(segs) == {0, 1}


def test_encode_degenerate(vocab):
    ex = AtscExample(["the", "food"], 1, 1, Polarity.NEUTRAL, "restaurants")
    with pytest.raises(DegenerateSequence):
        encode_atsc_input(ex, vocab, max_len=4)


# ---- LM finetuning

def test_snapshot_zero_is_input_model(lm_setup):
    vocab, examples = lm_setup
    model = small_model(vocab)
    result = lm_finetune(model, FinetuneRunSpec("restaurants", snapshots=(0,), batch_size=8), [examples], vocab)
    assert result.snapshots[0].sentences_seen == 0
    assert result.snapshots[0].data == checkpoint_bytes(model, None, {"vocab_hash": vocab.hash})
    assert len(result.snapshots) == 2


def test_snapshot_sentence_bounds(lm_setup):
    vocab, examples = lm_setup
    schedule = (10, 40, 75, 120)
    spec = FinetuneRunSpec("restaurants", epochs=3, batch_size=4, snapshots=schedule)
    result = lm_finetune(small_model(vocab), spec, [examples], vocab)
    for c, snap in zip(schedule, result.snapshots):
        assert c <= snap.sentences_seen < c + spec.batch_size * 32
    assert result.snapshots[-1].sentences_seen == result.log[-1].sentences_seen


def test_max_sentences_budget(lm_setup):
    vocab, examples = lm_setup
    result = lm_finetune(small_model(vocab), FinetuneRunSpec("laptops", epochs=5, batch_size=4, max_sentences=30),
                         [examples], vocab)
    assert 30 <= result.log[-1].sentences_seen < 30 + 4 * 32


def test_lm_finetune_deterministic(lm_setup, tmp_path):
    vocab, examples = lm_setup
    spec = FinetuneRunSpec("joint", epochs=2, batch_size=8, snapshots=(20,), seed=5)
    a = lm_finetune(small_model(vocab), spec, [examples], vocab, run_dir=tmp_path / "a")
    b = lm_finetune(small_model(vocab), spec, [examples], vocab, run_dir=tmp_path / "b")
    assert [s.data for s in a.snapshots] == [s.data for s in b.snapshots]
    assert (tmp_path / "a" / "metrics.tsv").read_bytes() == (tmp_path / "b" / "metrics.tsv").read_bytes()
    assert sorted(p.name for p in (tmp_path / "a" / "checkpoints").iterdir()) == \
        [f"snapshot_{s.sentences_seen:012d}.ckpt" for s in a.snapshots]


def test_lm_finetune_from_shard_files(lm_setup, tmp_path):
    vocab, examples = lm_setup
    write_shard(tmp_path / "s.bin", examples, vocab, 32, MaskingPolicy(), 1)
    spec = FinetuneRunSpec("restaurants", batch_size=8)
    from_files = lm_finetune(small_model(vocab), spec, [tmp_path / "s.bin"], vocab)
    in_memory = lm_finetune(small_model(vocab), spec, [examples], vocab)
    assert from_files.snapshots[-1].data == in_memory.snapshots[-1].data


def test_lm_finetune_vocab_mismatch(lm_setup, tmp_path):
    vocab, examples = lm_setup
    other = build_vocab([WORDS + ["extra"]])
    write_shard(tmp_path / "s.bin", examples, vocab, 32, MaskingPolicy(), 1)
    with pytest.raises(VocabMismatch):
        lm_finetune(toy_model(other.size, dtype=torch.float32), FinetuneRunSpec("laptops"), [tmp_path / "s.bin"], other)
    with pytest.raises(VocabMismatch):
        lm_finetune(toy_model(vocab.size + 3, dtype=torch.float32), FinetuneRunSpec("laptops"), [examples], vocab)


def test_lm_finetune_empty(vocab):
    with pytest.raises(EmptyDataset):
        lm_finetune(small_model(vocab), FinetuneRunSpec("laptops"), [[]], vocab)


def test_lm_overfit_gate():
    before, after = lm_overfit()
    assert after < 0.5 * before


# ---- ATSC training

def test_atsc_overfit_gate():
    assert atsc_overfit() == 1.0


def test_train_atsc_deterministic(tmp_path):
    data = atsc_dataset(Domain.RESTAURANTS, 40, seed=4)
    vocab = build_vocab([ex.tokens for ex in data])
    spec = AtscRunSpec("restaurants", epochs=2, lr=1e-3, batch_size=8, seed=3)
    a = train_atsc(small_model(vocab), spec, data, vocab, run_dir=tmp_path / "a")
    b = train_atsc(small_model(vocab), spec, data, vocab, run_dir=tmp_path / "b")
    assert (tmp_path / "a" / "metrics.tsv").read_bytes() == (tmp_path / "b" / "metrics.tsv").read_bytes()
    assert checkpoint_bytes(a.model) == checkpoint_bytes(b.model)
    assert a.train_examples + a.val_examples == 40 and a.val_examples == 4
    assert all(m.val_accuracy is not None for m in a.epochs)


def test_train_atsc_seed_changes_result():
    data = atsc_dataset(Domain.RESTAURANTS, 24, seed=4)
    vocab = build_vocab([ex.tokens for ex in data])
    runs = [train_atsc(small_model(vocab), AtscRunSpec("restaurants", epochs=1, lr=1e-3, seed=s), data, vocab)
            for s in (0, 1)]
    assert checkpoint_bytes(runs[0].model) != checkpoint_bytes(runs[1].model)


def test_train_atsc_leaves_input_model_alone():
    data = atsc_dataset(Domain.RESTAURANTS, 10, seed=4)
    vocab = build_vocab([ex.tokens for ex in data])
    model = small_model(vocab)
    before = checkpoint_bytes(model)
    train_atsc(model, AtscRunSpec("restaurants", epochs=1, lr=1e-3), data, vocab)
    assert checkpoint_bytes(model) == before


def test_train_atsc_errors(vocab):
    with pytest.raises(EmptyDataset):
        train_atsc(small_model(vocab), AtscRunSpec("laptops"), [], vocab)
    test_rows = atsc_dataset(Domain.LAPTOPS, 5, seed=1, split="test")
    with pytest.raises(TestSplitLeak):
        train_atsc(small_model(vocab), AtscRunSpec("laptops"), test_rows, vocab)


def test_validation_split_is_seeded_partition():
    data = atsc_dataset(Domain.LAPTOPS, 50, seed=1)
    train, val = split_validation(data, 0.1, seed=9)
    assert len(val) == 5 and len(train) == 45
    assert sorted(map(id, train + val)) == sorted(map(id, data))
    assert split_validation(data, 0.1, seed=9) == (train, val)


def test_checkpoint_from_run_dir_reloads(tmp_path, lm_setup):
    vocab, examples = lm_setup
    lm_finetune(small_model(vocab), FinetuneRunSpec("laptops", batch_size=8), [examples], vocab, run_dir=tmp_path)
    (ckpt,) = (tmp_path / "checkpoints").iterdir()
    assert load_checkpoint(ckpt).meta == {"vocab_hash": vocab.hash}
