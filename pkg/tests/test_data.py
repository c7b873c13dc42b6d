import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ptran import data, synthetic
from ptran.data import PAD_ID, UNK_ID


class TestVocab:
    def test_min_freq(self):
        v = data.build_vocab([["a", "a", "b"]], min_freq=2)
        assert v.tokens == ["<unk>", "<mask>", "<pad>", "a"]
        assert v.encode(["a", "b"]) == [3, UNK_ID]

    def test_frequency_then_lexicographic(self):
        v = data.build_vocab([["c", "b", "a", "b", "c"]])
        assert v.tokens[3:] == ["b", "c", "a"]

    def test_deterministic_and_max_size(self):
        sents = [["x", "y", "z", "y"], ["z", "z"]]
        assert data.build_vocab(sents) == data.build_vocab(list(reversed(sents)))
        assert len(data.build_vocab(sents, max_size=4)) == 4

    def test_mask_literal_maps_to_reserved_id(self):
        v = data.build_vocab([["<mask>", "a"]])
        assert v.encode(["<mask>"]) == [data.MASK_ID]
        assert v.tokens.count("<mask>") == 1

    def test_save_load(self, tmp_path):
        v = data.build_vocab([["é", "b"]])
        v.save(tmp_path / "v.txt")
        assert data.Vocab.load(tmp_path / "v.txt") == v

    def test_empty_corpus(self):
        with pytest.raises(ValueError):
            data.build_vocab([])


class TestLoaders:
    def test_text_blank_lines_skipped(self, tmp_path):
        p = tmp_path / "t.txt"
        p.write_text("the cat\n\nsat\n", encoding="utf-8")
        assert data.load_text_corpus(p).sentences == [["the", "cat"], ["sat"]]

    def test_invalid_utf8_reports_line(self, tmp_path):
        p = tmp_path / "t.txt"
        p.write_bytes(b"ok line\nbad \xff byte\n")
        with pytest.raises(data.CorpusIOError, match=":2"):
            data.load_text_corpus(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(data.CorpusIOError):
            data.load_text_corpus(tmp_path / "nope.txt")

    def test_conll_blocks_and_comments(self, tmp_path):
        p = tmp_path / "c.conll"
        p.write_text("# comment\nthe\tDET\ndog\tNOUN\n\nran\tVERB\n", encoding="utf-8")
        c = data.load_conll_columns(p)
        assert c.sentences == [["the", "dog"], ["ran"]]
        assert c.tags == [["DET", "NOUN"], ["VERB"]]

    def test_conll_ragged_row(self, tmp_path):
        p = tmp_path / "c.conll"
        p.write_text("the\tDET\ndog\n", encoding="utf-8")
        with pytest.raises(data.DataFormatError, match=":2"):
            data.load_conll_columns(p)

    def test_label_tsv(self, tmp_path):
        p = tmp_path / "l.tsv"
        p.write_text("pos\tgood film\nneg\tbad\n", encoding="utf-8")
        c = data.load_label_tsv(p)
        assert c.labels == ["pos", "neg"] and c.sentences[0] == ["good", "film"]
        p.write_text("no tab here\n", encoding="utf-8")
        with pytest.raises(data.DataFormatError):
            data.load_label_tsv(p)

    def test_cogs_parent_offsets(self, tmp_path):
        p = tmp_path / "c.tsv"
        p.write_text("emma\t1\tagent\tN\tnone\tnone\nate\t-1\tnone\tV\tnone\teat\n", encoding="utf-8")
        c = data.load_cogs_tsv(p)
        assert [t[0] for t in c.cogs[0]] == ["1", "self"]

    def test_cogs_bad_parent(self, tmp_path):
        p = tmp_path / "c.tsv"
        p.write_text("emma\tx\tagent\tN\tnone\tnone\n", encoding="utf-8")
        with pytest.raises(data.DataFormatError, match="not an integer"):
            data.load_cogs_tsv(p)

    @pytest.mark.parametrize("task", ["mlm", "tagging", "ner", "cls", "cogs"])
    def test_writers_round_trip(self, tmp_path, task):
        paths = synthetic.write_splits(task, tmp_path, 30, seed=3)
        original = synthetic.generate_splits(task, 30, seed=3)["train"]
        loader = {"mlm": data.load_text_corpus, "tagging": data.load_conll_columns, "ner": data.load_conll_columns,
                  "cls": data.load_label_tsv, "cogs": data.load_cogs_tsv}[task]
        back = loader(paths["train"])
        assert back.sentences == original.sentences
        assert back.tags == original.tags and back.labels == original.labels
        assert back.cogs == (None if original.cogs is None else [[tuple(t) for t in s] for s in original.cogs])

    def test_token_count_matches_word_count(self, tmp_path):
        p = tmp_path / "t.txt"
        text = "the  cat sat\n\n on\tthe mat \nend\n"
        p.write_text(text, encoding="utf-8")
        assert data.load_text_corpus(p).n_tokens == len(text.split()) == 7

    def test_conll_fixture_counts(self, tmp_path):
        p = tmp_path / "c.conll"
        p.write_text("a\tX\nb\tY\nc\tX\n\n# skip\nd\tZ\n\n\ne\tX\nf\tX\n", encoding="utf-8")
        c = data.load_conll_columns(p)
        assert [len(s) for s in c.sentences] == [3, 1, 2]
        assert [len(t) for t in c.tags] == [3, 1, 2]

    def test_cogs_fixture_through_targets(self, tmp_path):
        p = tmp_path / "c.tsv"
        p.write_text("the\t1\tdet\tD\tthe\tnone\ndog\t2\tagent\tN\tnone\tnone\n"
                     "slept\t-1\tnone\tV\tnone\tsleep\n", encoding="utf-8")
        c = data.load_cogs_tsv(p)
        enc = data.build_encoders(c)
        (batch,) = data.make_batches(c, enc, batch_size=4, shuffle=False)
        rows = [enc.cogs[f].decode(batch.cogs[0, :, f]) for f in range(len(data.COGS_FIELDS))]
        parents = [data.class_to_parent(i, lab) for i, lab in enumerate(rows[0])]
        assert parents == [1, 2, -1]
        assert rows[1:] == [["det", "agent", "none"], ["D", "N", "V"], ["the", "none", "none"],
                            ["none", "none", "sleep"]]


class TestOffsets:
    def test_inventory(self):
        inv = data.parent_offset_labels(30)
        assert len(inv) == 61 and inv.labels[0] == "self"

    @given(st.integers(0, 40), st.integers(-1, 40))
    def test_class_round_trip(self, i, parent):
        if parent == i:
            return
        assert data.class_to_parent(i, data.parent_to_class(i, parent)) == parent


def _tagged(n=13, seed=0):
    return synthetic.tagging_corpus(n, seed)


class TestBatches:
    def test_deterministic(self):
        c = _tagged()
        enc = data.build_encoders(c)
        a = [b.ids for b in data.make_batches(c, enc, 4, seed=5, epoch=2)]
        b = [b.ids for b in data.make_batches(c, enc, 4, seed=5, epoch=2)]
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        other = [b.order for b in data.make_batches(c, enc, 4, seed=5, epoch=3)]
        assert not np.array_equal(np.concatenate(other), np.concatenate([b.order for b in
                                                                       data.make_batches(c, enc, 4, seed=5, epoch=2)]))

    def test_padding_and_token_conservation(self):
        c = _tagged(20)
        enc = data.build_encoders(c)
        seen = 0
        for b in data.make_batches(c, enc, 6):
            assert np.all(b.ids[~b.mask] == PAD_ID)
            assert np.all(b.ids[b.mask] != PAD_ID)
            seen += int(b.mask.sum())
        assert seen == c.n_tokens

    def test_every_sentence_once(self):
        c = _tagged(17)
        order = np.concatenate([b.order for b in data.make_batches(c, data.build_encoders(c), 5, seed=1)])
        assert sorted(order.tolist()) == list(range(17))

    def test_truncation_warns(self, caplog):
        c = data.Corpus([["w"] * 10, ["w"]])
        with caplog.at_level(logging.WARNING, logger="ptran.data"):
            batches = list(data.make_batches(c, data.build_vocab(c.sentences), 2, max_len=4))
        assert batches[0].ids.shape[1] == 4
        assert "truncated" in caplog.text

    def test_unknown_tag_at_encode(self):
        train = _tagged(5)
        enc = data.build_encoders(train)
        bad = data.Corpus([["the"]], tags=[["NOT_A_TAG"]])
        with pytest.raises(data.DataFormatError):
            list(data.make_batches(bad, enc, 1))

    def test_inputs_hold_no_targets(self):
        # labels and tags live only in their own fields; ids are the token encodings
        c = synthetic.cls_corpus(10, seed=2)
        enc = data.build_encoders(c)
        for b in data.make_batches(c, enc, 4, shuffle=False):
            for r, k in enumerate(b.order):
                assert enc.vocab.decode(b.ids[r, :b.lengths[r]]) == c.sentences[k]
