import numpy as np
import pytest
import torch

from voxelgen.phantoms import generate_report, lexicon
from voxelgen.textenc import (
    TextEncoder,
    Vocabulary,
    batch_tokenize,
    build_vocab,
    encode_reports,
    null_condition_embedding,
    tokenize,
)


@pytest.fixture(scope="module")
def small_vocab():
    return build_vocab(["a b", "b c"])


@pytest.fixture(scope="module")
def encoder(small_vocab):
    torch.manual_seed(0)
    return TextEncoder(len(small_vocab), max_len=16, width=32, layers=2,
                       heads=2, out_dim=16).eval()


class TestVocabulary:
    def test_deterministic_and_covering(self, small_vocab):
        again = build_vocab(["a b", "b c"])
        assert small_vocab.tokens() == again.tokens()
        assert {small_vocab.id_of(t) for t in "abc"} == {0, 1, 2}

    def test_unknown_token_maps_to_unk(self, small_vocab):
        assert small_vocab.id_of("zzz") == small_vocab.unk_id

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            build_vocab([])

    def test_special_ids_distinct(self, small_vocab):
        specials = {small_vocab.pad_id, small_vocab.bos_id, small_vocab.eos_id,
                    small_vocab.unk_id, small_vocab.nullcond_id}
        assert len(specials) == 5

    def test_phantom_lexicon_has_no_unk(self):
        texts = [generate_report((np.random.default_rng(i).random(6) < 0.4
                                  ).astype(int), i).text for i in range(50)]
        vocab = build_vocab(texts)
        assert set(t for t in vocab.tokens()[:len(vocab) - 5]) <= lexicon()
        for t in texts:
            seq = tokenize(t, vocab, 48)
            assert vocab.unk_id not in seq.ids.tolist()

    def test_round_trip_serialization(self, small_vocab, tmp_path):
        path = tmp_path / "vocab.txt"
        small_vocab.save(path)
        assert Vocabulary.load(path).tokens() == small_vocab.tokens()


class TestTokenize:
    def test_empty_text(self, small_vocab):
        seq = tokenize("", small_vocab, 6)
        assert seq.ids.tolist() == [small_vocab.bos_id, small_vocab.eos_id,
                                    small_vocab.pad_id, small_vocab.pad_id,
                                    small_vocab.pad_id, small_vocab.pad_id]
        assert seq.mask.tolist() == [1, 1, 0, 0, 0, 0]

    def test_exact_fit_no_truncation(self, small_vocab):
        seq = tokenize("a b c a", small_vocab, 6)
        assert seq.ids[0].item() == small_vocab.bos_id
        assert seq.ids[5].item() == small_vocab.eos_id
        assert seq.mask.sum().item() == 6

    def test_truncation_keeps_eos(self, small_vocab):
        seq = tokenize("a b c a b c", small_vocab, 6)
        ids = seq.ids.tolist()
        assert len(ids) == 6
        assert ids[0] == small_vocab.bos_id
        assert ids[-1] == small_vocab.eos_id
        assert ids[1:5] == [small_vocab.id_of(w) for w in ["a", "b", "c", "a"]]

    def test_total_on_arbitrary_input(self, small_vocab):
        for text in ["", "???", "MiXeD CaSe!", "a" * 1000, "\n\t"]:
            seq = tokenize(text, small_vocab, 8)
            assert len(seq.ids) == 8

    def test_min_length_enforced(self, small_vocab):
        with pytest.raises(ValueError):
            tokenize("a", small_vocab, 1)


class TestTextEncoder:
    def test_unit_norm(self, small_vocab, encoder):
        h = encode_reports(["a b c", ""], small_vocab, encoder)
        assert torch.allclose(h.norm(dim=1), torch.ones(2), atol=1e-6)

    def test_deterministic(self, small_vocab, encoder):
        a = encode_reports(["a b"], small_vocab, encoder)
        b = encode_reports(["a b"], small_vocab, encoder)
        assert torch.equal(a, b)

    def test_padding_invariance(self, small_vocab, encoder):
        ids, mask = batch_tokenize(["a b c"], small_vocab, 6)
        ids_padded, mask_padded = batch_tokenize(["a b c"], small_vocab, 16)
        h1 = encoder(ids, mask)
        h2 = encoder(ids_padded, mask_padded)
        assert torch.allclose(h1, h2, atol=1e-6)

    def test_null_condition_embedding(self, small_vocab, encoder):
        n1 = null_condition_embedding(small_vocab, encoder)
        n2 = null_condition_embedding(small_vocab, encoder)
        assert torch.equal(n1, n2)
        assert abs(n1.norm().item() - 1.0) < 1e-6
        empty = encode_reports([""], small_vocab, encoder)[0]
        assert torch.dot(n1, empty).item() < 1.0 - 1e-4
