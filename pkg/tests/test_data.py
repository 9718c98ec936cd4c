import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmdp.data import (NEGATIVE_WORDS, POSITIVE_WORDS, FewShotSplit, Manifest, Sample, SplitPolicy, Vocab,
                       default_vocab, detokenize, encode_manifest, few_shot_sample, gen_aligned_pairs, gen_synthetic,
                       label_for, load_manifest, save_manifest, synthetic_records, tokenize)
from dmdp.errors import ConfigurationError, ManifestParseError, SamplingError, ValidationError

IMG = [[0] * 8 for _ in range(8)]


def pool_of(n_pos, n_neg):
    samples = [Sample(f"p{i}", ((0,),), "x", 1) for i in range(n_pos)]
    samples += [Sample(f"n{i}", ((0,),), "x", 0) for i in range(n_neg)]
    return Manifest(samples)


def test_tokenize_appends_eos_and_pads():
    v = default_vocab()
    seq = tokenize(v, "Nice zzz top", 6)
    assert seq.ids[:3] == (v.index["nice"], v.unk_id, v.index["top"])
    assert seq.ids[3] == v.eos_id and seq.eos_index == 3
    assert seq.ids[4:] == (v.pad_id, v.pad_id)
    assert detokenize(v, seq) == "nice <unk> top"


def test_tokenize_truncates_leaving_room_for_eos():
    v = default_vocab()
    seq = tokenize(v, " ".join(["nice"] * 20), 5)
    assert len(seq.ids) == 5 and seq.eos_index == 4


def test_vocab_roundtrip_and_checks(tmp_path):
    v = default_vocab()
    v.save(tmp_path / "v.txt")
    assert Vocab.load(tmp_path / "v.txt") == v
    with pytest.raises(ConfigurationError):
        Vocab(["a", "a"])
    with pytest.raises(ConfigurationError):
        tokenize(Vocab(["a", "b"]), "a", 4)


def test_manifest_roundtrip(tmp_path):
    m = gen_synthetic(1, 12, 0)
    save_manifest(m, tmp_path / "m.jsonl")
    again = load_manifest(tmp_path / "m.jsonl")
    assert again.samples == m.samples
    assert (tmp_path / "m.jsonl").read_text().count("\n") == 12


def test_manifest_errors_carry_line_numbers(tmp_path):
    good = json.dumps({"id": "a", "image": IMG, "text": "x", "label": 1})
    p = tmp_path / "bad.jsonl"
    p.write_text(good + "\n" + "{not json\n")
    with pytest.raises(ManifestParseError) as err:
        load_manifest(p)
    assert err.value.line_no == 2 and "line 2" in str(err.value)
    p.write_text(good + "\n" + json.dumps({"id": "b", "image": [[300]], "text": "x", "label": 0}) + "\n")
    with pytest.raises(ValidationError, match="line 2"):
        load_manifest(p)
    p.write_text(good + "\n" + json.dumps({"id": "b", "image": IMG, "text": "x", "label": 2}) + "\n")
    with pytest.raises(ValidationError, match="line 2"):
        load_manifest(p)
    p.write_text(good + "\n" + json.dumps({"id": "b", "image": IMG, "text": "x"}) + "\n")
    with pytest.raises(ManifestParseError, match="missing"):
        load_manifest(p)


def test_duplicate_ids_rejected():
    s = Sample("a", ((1,),), "x", 0)
    with pytest.raises(ValidationError):
        Manifest([s, s])


def test_encode_checks_image_size():
    m = gen_synthetic(2, 8, 0)
    enc = encode_manifest(m, default_vocab(), 8, image_size=8)
    assert enc.images.shape == (8, 8, 8) and enc.token_ids.shape == (8, 8)
    with pytest.raises(ValidationError):
        encode_manifest(m, default_vocab(), 8, image_size=16)


@pytest.mark.parametrize("case", [1, 2, 3])
def test_synthetic_labels_follow_case_rule(case):
    for rec in synthetic_records(case, 64, 3):
        words = set(rec.sample.text.split())
        assert bool(words & set(POSITIVE_WORDS)) == bool(rec.text_class)
        assert not (words & set(POSITIVE_WORDS) and words & set(NEGATIVE_WORDS))
        assert rec.sample.label == label_for(case, rec.visual_class, rec.text_class)


def test_synthetic_blob_brightness():
    for rec in synthetic_records(2, 64, 5):
        img = np.array(rec.sample.image)
        if rec.visual_class:
            assert img.max() >= 170
        else:
            assert img.min() <= 90


def test_mixed_case_exact_thirds():
    recs = synthetic_records(0, 300, 1)
    counts = np.bincount([r.case for r in recs], minlength=4)
    assert counts.tolist() == [0, 100, 100, 100]


def test_synthetic_deterministic_per_seed():
    assert gen_synthetic(1, 20, 4).samples == gen_synthetic(1, 20, 4).samples
    assert gen_synthetic(1, 20, 4).samples != gen_synthetic(1, 20, 5).samples


def test_aligned_pairs_are_congruent():
    v = default_vocab()
    pairs = gen_aligned_pairs(50, 0, v, 8)
    for k, ids, e in zip(pairs.keys, pairs.token_ids, pairs.eos_index):
        words = {v.tokens[i] for i in ids[:e]}
        a = k % 2
        assert bool(words & set(POSITIVE_WORDS)) == bool(a)


def test_k_shot_exact_counts_and_disjoint():
    pool = gen_synthetic(1, 400, 0)
    for k in (5, 10, 20):
        sp = few_shot_sample(pool, SplitPolicy("k-shot", k=k), seed=1)
        for part in (sp.train, sp.valid):
            assert np.bincount(part.labels(), minlength=2).tolist() == [k, k]
        ids = [set(sp.train.ids()), set(sp.valid.ids()), set(sp.test.ids())]
        assert not ids[0] & ids[1] and not ids[0] & ids[2] and not ids[1] & ids[2]
        assert len(sp.test) == 400 - 4 * k


def test_percent_policy_large_unbalanced_pool():
    pool = pool_of(8642, 11174)
    assert SplitPolicy("percent", percent=0.01).per_class(len(pool)) == 99
    sp = few_shot_sample(pool, SplitPolicy("percent", percent=0.01), seed=0)
    assert np.bincount(sp.train.labels()).tolist() == [99, 99]
    assert np.bincount(sp.valid.labels()).tolist() == [99, 99]


def test_sampling_error_names_class():
    pool = pool_of(3, 50)
    with pytest.raises(SamplingError, match="class 1"):
        few_shot_sample(pool, SplitPolicy("k-shot", k=5), seed=0)


def test_split_reproducible_and_persisted(tmp_path):
    pool = gen_synthetic(3, 200, 0)
    a = few_shot_sample(pool, SplitPolicy("k-shot", k=10), seed=7)
    b = few_shot_sample(pool, SplitPolicy("k-shot", k=10), seed=7)
    assert a.train.ids() == b.train.ids() and a.valid.ids() == b.valid.ids()
    a.save(tmp_path / "s")
    c = FewShotSplit.load(tmp_path / "s")
    assert c.train.samples == a.train.samples and c.descriptor() == a.descriptor()


def test_separate_valid_pool():
    pool, vpool = gen_synthetic(2, 100, 0), gen_synthetic(2, 60, 1)
    sp = few_shot_sample(pool, SplitPolicy("k-shot", k=5), seed=0, valid_pool=vpool)
    assert set(sp.valid.ids()) <= set(vpool.ids())
    assert len(sp.test) == 90


@settings(max_examples=30, deadline=None)
@given(st.integers(20, 120), st.integers(20, 120), st.integers(1, 8), st.integers(0, 1000))
def test_k_shot_property(n_pos, n_neg, k, seed):
    sp = few_shot_sample(pool_of(n_pos, n_neg), SplitPolicy("k-shot", k=k), seed)
    assert np.bincount(sp.train.labels(), minlength=2).tolist() == [k, k]
    assert len(sp.train) + len(sp.valid) + len(sp.test) == n_pos + n_neg
