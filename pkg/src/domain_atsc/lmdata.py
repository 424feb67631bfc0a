"""LM-finetuning examples: next-sentence pairs, MLM masking, packing and shard files."""
from __future__ import annotations

import hashlib
import json
import random
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .errors import CorruptShard, DegenerateSequence, InsufficientData
from .text import ReviewDoc, Vocab

MASK_ACTION, RANDOM_ACTION, KEEP_ACTION = "mask", "random", "keep"


@dataclass(frozen=True)
class MaskingPolicy:
    select_rate: float = 0.15
    mask_frac: float = 0.8
    random_frac: float = 0.1
    keep_frac: float = 0.1

    def __post_init__(self) -> None:
        if not 0.0 <= self.select_rate <= 1.0:
            raise ValueError("select_rate must lie in [0, 1]")
        fracs = (self.mask_frac, self.random_frac, self.keep_frac)
        if min(fracs) < 0 or abs(sum(fracs) - 1.0) > 1e-9:
            raise ValueError("mask/random/keep fractions must be nonnegative and sum to 1")

    def describe(self) -> str:
        return (f"select_rate:{self.select_rate},mask:{self.mask_frac},"
                f"random:{self.random_frac},keep:{self.keep_frac}")

    @classmethod
    def from_description(cls, text: str) -> "MaskingPolicy":
        kv = dict(item.split(":") for item in text.split(","))
        return cls(float(kv["select_rate"]), float(kv["mask"]), float(kv["random"]), float(kv["keep"]))


@dataclass
class NspPair:
    a_doc: ReviewDoc
    a_position: int
    b_doc: ReviewDoc
    b_position: int
    is_next: bool

    @property
    def sent_a(self) -> list[str]:
        return self.a_doc.sentences[self.a_position]

    @property
    def sent_b(self) -> list[str]:
        return self.b_doc.sentences[self.b_position]

    def as_tuple(self) -> tuple[list[str], list[str], bool]:
        return self.sent_a, self.sent_b, self.is_next


@dataclass
class MaskedPairExample:
    input_ids: list[int]
    segment_ids: list[int]
    mlm_positions: list[int] = field(default_factory=list)
    mlm_labels: list[int] = field(default_factory=list)
    nsp_label: bool = True
    num_sentences: int = 2
    num_tokens: int = 0
    doc_id: str = ""
    position: int = 0

    def __post_init__(self) -> None:
        if not self.num_tokens:
            self.num_tokens = len(self.input_ids)


def make_nsp_pairs(docs: Sequence[ReviewDoc], seed: int, negative_pool: Sequence[ReviewDoc] | None = None,
                   next_prob: float = 0.5) -> list[NspPair]:
    """One pair per adjacent sentence position; B is the true successor with probability `next_prob`."""
    pool = list(negative_pool) if negative_pool is not None else list(docs)
    flat = [(d, i) for d in pool for i in range(d.num_sentences)]
    rng = random.Random(seed)
    pairs = []
    for doc in docs:
        if doc.num_sentences < 2:
            raise InsufficientData(f"doc {doc.doc_id} has fewer than two sentences")
        for pos in range(doc.num_sentences - 1):
            if rng.random() < next_prob:
                pairs.append(NspPair(doc, pos, doc, pos + 1, True))
                continue
            if not any(d.doc_id != doc.doc_id for d in pool):
                raise InsufficientData("negative pair needs at least two distinct documents")
            while True:
                other, other_pos = flat[rng.randrange(len(flat))]
                if other.doc_id != doc.doc_id:
                    break
            pairs.append(NspPair(doc, pos, other, other_pos, False))
    return pairs


@dataclass
class MaskResult:
    input_ids: list[int]
    positions: list[int]
    labels: list[int]
    actions: list[str]


def apply_mlm_mask(input_ids: Sequence[int], policy: MaskingPolicy, vocab: Vocab,
                   seed: int | random.Random) -> MaskResult:
    rng = seed if isinstance(seed, random.Random) else random.Random(seed)
    skip = {vocab.cls_id, vocab.sep_id, vocab.pad_id, vocab.mask_id}
    ids = list(input_ids)
    positions, labels, actions = [], [], []
    n_regular = vocab.size - len(vocab.special_ids)
    for i, tok in enumerate(input_ids):
        if tok in skip or rng.random() >= policy.select_rate:
            continue
        r = rng.random()
        if r < policy.mask_frac:
            action = MASK_ACTION
            ids[i] = vocab.mask_id
        elif r < policy.mask_frac + policy.random_frac and n_regular > 0:
            action = RANDOM_ACTION
            ids[i] = len(vocab.special_ids) + rng.randrange(n_regular)
        else:
            action = KEEP_ACTION
        positions.append(i)
        labels.append(tok)
        actions.append(action)
    return MaskResult(ids, positions, labels, actions)


def _truncate(a: list[int], b: list[int], limit: int) -> None:
    while len(a) + len(b) > limit and len(b) > 1:
        b.pop()
    while len(a) + len(b) > limit and len(a) > 1:
        a.pop()
    if len(a) + len(b) > limit:
        raise DegenerateSequence(f"cannot fit two nonempty segments into {limit + 3} tokens")


def encode_pair(seg_a: Sequence[int], seg_b: Sequence[int], vocab: Vocab, max_len: int,
                pad: bool = True) -> tuple[list[int], list[int]]:
    """[CLS] A [SEP] B [SEP], truncating B from the end first, then A."""
    a, b = list(seg_a), list(seg_b)
    if not a or not b:
        raise DegenerateSequence("empty segment")
    _truncate(a, b, max_len - 3)
    ids = [vocab.cls_id] + a + [vocab.sep_id] + b + [vocab.sep_id]
    segs = [0] * (len(a) + 2) + [1] * (len(b) + 1)
    if pad:
        fill = max_len - len(ids)
        ids += [vocab.pad_id] * fill
        segs += [segs[-1]] * fill
    return ids, segs


def _fill_forward(doc: ReviewDoc, start: int, budget: int, stop: int) -> int:
    """Last sentence index reachable from `start` (inclusive) without exceeding `budget` tokens."""
    used, end = len(doc.sentences[start]), start
    while end + 1 < stop and used + len(doc.sentences[end + 1]) <= budget:
        end += 1
        used += len(doc.sentences[end])
    return end


def pack_and_encode(pairs: Sequence[NspPair], vocab: Vocab, max_len: int = 256) -> list[MaskedPairExample]:
    """Greedily pack consecutive sentences into each segment, up to (max_len - 3) // 2 tokens each.

    Pairs are walked per document in position order; the pair anchored at the last sentence of
    segment A decides what follows it.  After a true continuation the next sequence starts past
    segment B, otherwise right after segment A, so every sentence is consumed about once.
    """
    budget = max(1, (max_len - 3) // 2)
    by_doc: dict[int, dict[int, NspPair]] = {}
    order: list[ReviewDoc] = []
    for p in pairs:
        key = id(p.a_doc)
        if key not in by_doc:
            by_doc[key] = {}
            order.append(p.a_doc)
        by_doc[key][p.a_position] = p
    out = []
    for doc in order:
        anchors = by_doc[id(doc)]
        pos = min(anchors)
        while pos in anchors:
            # A may grow only over positions that still have a pair (i.e. a successor exists)
            end = pos
            used = len(doc.sentences[pos])
            while end + 1 in anchors and used + len(doc.sentences[end + 1]) <= budget:
                end += 1
                used += len(doc.sentences[end])
            pair = anchors[end]
            if pair.is_next:
                b_doc, b_start = doc, end + 1
            else:
                b_doc, b_start = pair.b_doc, pair.b_position
            b_end = _fill_forward(b_doc, b_start, budget, b_doc.num_sentences)
            seg_a = [t for s in doc.sentences[pos:end + 1] for t in vocab.encode(s)]
            seg_b = [t for s in b_doc.sentences[b_start:b_end + 1] for t in vocab.encode(s)]
            ids, segs = encode_pair(seg_a, seg_b, vocab, max_len)
            n_tok = sum(1 for t in ids if t != vocab.pad_id)
            out.append(MaskedPairExample(ids, segs, nsp_label=pair.is_next,
                                         num_sentences=(end - pos + 1) + (b_end - b_start + 1),
                                         num_tokens=n_tok, doc_id=doc.doc_id, position=pos))
            if pair.is_next:
                pos = b_end + 1
                # an anchor may be missing when B reached the document end
                while pos not in anchors and pos < doc.num_sentences - 1:
                    pos += 1
            else:
                pos = end + 1
    return out


def mask_examples(examples: Sequence[MaskedPairExample], policy: MaskingPolicy, vocab: Vocab,
                  seed: int) -> list[MaskedPairExample]:
    rng = random.Random(seed)
    out = []
    for ex in examples:
        res = apply_mlm_mask(ex.input_ids, policy, vocab, rng)
        out.append(MaskedPairExample(res.input_ids, list(ex.segment_ids), res.positions, res.labels,
                                     ex.nsp_label, ex.num_sentences, ex.num_tokens, ex.doc_id, ex.position))
    return out


def shard_of(doc_id: str, num_shards: int) -> int:
    return int.from_bytes(hashlib.sha256(doc_id.encode()).digest()[:4], "little") % num_shards


def _generate_shard(args) -> list[MaskedPairExample]:
    docs, pool, vocab_tokens, policy, seed, max_len = args
    vocab = Vocab(vocab_tokens)
    pairs = make_nsp_pairs(docs, seed, negative_pool=pool)
    return mask_examples(pack_and_encode(pairs, vocab, max_len), policy, vocab, seed)


def generate_examples(docs: Sequence[ReviewDoc], vocab: Vocab, policy: MaskingPolicy, seed: int,
                      max_len: int = 256, num_shards: int = 1, workers: int = 1) -> list[MaskedPairExample]:
    """Shard-parallel example generation; output is identical for any worker count.

    Documents are assigned to shards by a hash of doc_id, shard k uses seed XOR k, and the merged
    output is sorted by (doc_id, position).
    """
    shards: list[list[ReviewDoc]] = [[] for _ in range(num_shards)]
    for doc in sorted(docs, key=lambda d: d.doc_id):
        shards[shard_of(doc.doc_id, num_shards)].append(doc)
    pool = list(docs)
    jobs = [(shard, pool, vocab.id_to_token, policy, seed ^ k, max_len)
            for k, shard in enumerate(shards) if shard]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_generate_shard, jobs))
    else:
        results = [_generate_shard(job) for job in jobs]
    merged = [e for part in results for e in part]
    merged.sort(key=lambda e: (e.doc_id, e.position))
    return merged


SHARD_MAGIC = "ATSC-SHARD v1"
_REC_HEAD = struct.Struct("<BHII")


def write_shard(path: str | Path, examples: Sequence[MaskedPairExample], vocab: Vocab, max_len: int,
                policy: MaskingPolicy, seed: int) -> dict:
    """Write a shard plus its `.stats.json` sidecar; returns the stats."""
    path = Path(path)
    header = (f"{SHARD_MAGIC}\nvocab_hash={vocab.hash}\nmax_len={max_len}\n"
              f"policy={policy.describe()}\nseed={seed}\ncount={len(examples)}\n\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        for ex in examples:
            n, k = ex.num_tokens, len(ex.mlm_positions)
            body = _REC_HEAD.pack(int(ex.nsp_label), ex.num_sentences, n, k)
            body += struct.pack(f"<{n}i", *ex.input_ids[:n])
            body += bytes(ex.segment_ids[:n])
            body += struct.pack(f"<{k}i", *ex.mlm_positions) + struct.pack(f"<{k}i", *ex.mlm_labels)
            doc = ex.doc_id.encode()
            body += struct.pack("<HI", len(doc), ex.position) + doc
            fh.write(struct.pack("<I", len(body)) + body)
    n_next = sum(ex.nsp_label for ex in examples)
    stats = {"pairs": len(examples), "is_next": n_next, "not_next": len(examples) - n_next,
             "is_next_fraction": n_next / len(examples) if examples else 0.0,
             "sentences": sum(ex.num_sentences for ex in examples),
             "masked_tokens": sum(len(ex.mlm_positions) for ex in examples),
             "seed": seed}
    Path(str(path) + ".stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True))
    return stats


def read_shard(path: str | Path) -> tuple[dict, list[MaskedPairExample]]:
    data = Path(path).read_bytes()
    end = data.find(b"\n\n")
    if end < 0:
        raise CorruptShard(f"{path}: missing header terminator")
    lines = data[:end].decode("ascii", errors="replace").split("\n")
    if lines[0] != SHARD_MAGIC:
        raise CorruptShard(f"{path}: bad magic {lines[0]!r}")
    try:
        header = dict(line.split("=", 1) for line in lines[1:])
        max_len, count = int(header["max_len"]), int(header["count"])
    except (ValueError, KeyError) as exc:
        raise CorruptShard(f"{path}: bad header") from exc
    off = end + 2
    out = []
    try:
        for _ in range(count):
            (size,) = struct.unpack_from("<I", data, off)
            off += 4
            rec = data[off:off + size]
            if len(rec) != size:
                raise CorruptShard(f"{path}: truncated record")
            off += size
            nsp, n_sent, n, k = _REC_HEAD.unpack_from(rec, 0)
            p = _REC_HEAD.size
            ids = list(struct.unpack_from(f"<{n}i", rec, p)); p += 4 * n
            segs = list(rec[p:p + n]); p += n
            pos = list(struct.unpack_from(f"<{k}i", rec, p)); p += 4 * k
            labels = list(struct.unpack_from(f"<{k}i", rec, p)); p += 4 * k
            dlen, position = struct.unpack_from("<HI", rec, p); p += 6
            doc_id = rec[p:p + dlen].decode()
            fill = max_len - n
            out.append(MaskedPairExample(ids + [0] * fill, segs + [segs[-1]] * fill, pos, labels,
                                         bool(nsp), n_sent, n, doc_id, position))
    except struct.error as exc:
        raise CorruptShard(f"{path}: {exc}") from exc
    if off != len(data):
        raise CorruptShard(f"{path}: trailing bytes after {count} records")
    header["max_len"], header["count"] = max_len, count
    return header, out
