import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adaptive_sv.calibration import GroupKey
from adaptive_sv.errors import ConfigError, DataError, FormatError
from adaptive_sv.formats import (
    EMB1_HEADER,
    EmbeddingStore,
    format_labels,
    format_trials,
    join_groups,
    parse_labels,
    parse_metadata,
    parse_trials,
    read_arrays,
    read_embeddings,
    read_kv,
    speaker_of,
    write_arrays,
    write_embeddings,
    write_kv,
)
from adaptive_sv.scoring import TrialPair


def store_of(ids, dim, seed=0):
    rng = np.random.default_rng(seed)
    return EmbeddingStore({i: rng.standard_normal(dim) for i in ids})


class TestEmb1:
    def test_empty_store(self):
        data = write_embeddings(EmbeddingStore())
        assert data == b"EMB1" + bytes(16)
        assert len(data) == EMB1_HEADER == 20
        assert read_embeddings(data) == EmbeddingStore()

    def test_size_arithmetic(self):
        ids = ["a", "spk1/utt02", "ü"]
        data = write_embeddings(store_of(ids, 256))
        assert len(data) == 20 + sum(2 + len(i.encode()) for i in ids) + 3 * 256 * 4

    def test_layout_by_hand(self):
        data = write_embeddings(EmbeddingStore({"ab": [1.0, -2.0]}))
        expected = b"EMB1" + struct.pack("<IIQ", 1, 2, 0) + struct.pack("<H", 2) + b"ab" + struct.pack("<2f", 1.0, -2.0)
        assert data == expected

    def test_bad_magic(self):
        data = bytearray(write_embeddings(store_of(["a"], 4)))
        data[0:4] = b"EMB2"
        with pytest.raises(FormatError, match="bad magic at offset 0") as info:
            read_embeddings(bytes(data))
        assert info.value.offset == 0

    @pytest.mark.parametrize("cut", [3, 10, 21, 24, 30])
    def test_truncation(self, cut):
        data = write_embeddings(store_of(["abc", "de"], 4))
        with pytest.raises(FormatError) as info:
            read_embeddings(data[:cut])
        assert info.value.offset is not None
        assert ("truncated" in str(info.value)) or ("magic" in str(info.value))

    def test_truncated_record_offset(self):
        data = write_embeddings(store_of(["abc", "de"], 4))
        second = 20 + 2 + 3 + 16
        with pytest.raises(FormatError, match=f"truncated record 1 at offset {second}"):
            read_embeddings(data[:-1])

    def test_dim_mismatch(self):
        data = write_embeddings(store_of(["a"], 4))
        with pytest.raises(FormatError, match="dim mismatch at offset 8"):
            read_embeddings(data, expected_dim=8)

    def test_trailing_bytes(self):
        data = write_embeddings(store_of(["a"], 4)) + b"\0"
        with pytest.raises(FormatError, match="trailing bytes"):
            read_embeddings(data)

    def test_reserved(self):
        data = bytearray(write_embeddings(store_of(["a"], 4)))
        data[12] = 1
        with pytest.raises(FormatError, match="reserved"):
            read_embeddings(bytes(data))

    def test_duplicate_id_in_file(self):
        one = write_embeddings(store_of(["a"], 2))
        record = one[20:]
        data = b"EMB1" + struct.pack("<IIQ", 2, 2, 0) + record + record
        with pytest.raises(FormatError, match="duplicate"):
            read_embeddings(data)

    def test_store_invariants(self):
        s = store_of(["a"], 4)
        with pytest.raises(DataError, match="dim mismatch"):
            s.add("b", np.ones(3))
        with pytest.raises(DataError, match="duplicate"):
            s.add("a", np.ones(4))
        with pytest.raises(DataError):
            s.add("c", [np.nan] * 4)

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(st.text(min_size=1, max_size=12), unique=True, max_size=8),
        st.integers(0, 16),
        st.integers(0, 2**32 - 1),
    )
    def test_roundtrip(self, ids, dim, seed):
        rng = np.random.default_rng(seed)
        store = EmbeddingStore({i: rng.standard_normal(dim) * 10.0 ** rng.integers(-30, 30) for i in ids}, dim=dim)
        data = write_embeddings(store)
        back = read_embeddings(data)
        assert back == store and list(back) == ids
        assert write_embeddings(back) == data


class TestArrays:
    def test_roundtrip(self):
        arrays = {"w": np.arange(6.0).reshape(2, 3), "b": np.array([0.5]), "s": np.array(2.0), "e": np.zeros((0, 4))}
        back = read_arrays(write_arrays(arrays))
        assert list(back) == list(arrays)
        for k in arrays:
            assert back[k].shape == arrays[k].shape
            np.testing.assert_array_equal(back[k], arrays[k])

    def test_float32_precision(self):
        x = np.array([0.1])
        assert read_arrays(write_arrays({"x": x}))["x"][0] == np.float32(0.1)

    def test_errors(self):
        data = write_arrays({"w": np.ones(3)})
        with pytest.raises(FormatError, match="bad magic"):
            read_arrays(b"XXXX" + data[4:])
        with pytest.raises(FormatError, match="truncated"):
            read_arrays(data[:-2])
        with pytest.raises(FormatError, match="trailing"):
            read_arrays(data + b"\0")


class TestKv:
    def test_roundtrip(self):
        values = {"basewidth": 26, "blocks": [[64, 256, 3, 1]], "am_margin": 0.2, "name": "x y"}
        assert read_kv(write_kv(values)) == values

    def test_comments_and_errors(self):
        assert read_kv("# c\n\na = 1\n") == {"a": 1}
        with pytest.raises(ConfigError, match="line 1"):
            read_kv("a 1\n")
        with pytest.raises(ConfigError, match="not JSON"):
            read_kv("a = nope\n")
        with pytest.raises(ConfigError, match="duplicate"):
            read_kv("a = 1\na = 2\n")


class TestTrials:
    def test_two_lines(self):
        trials = parse_trials("1 a b\n0 a c")
        assert [t.target for t in trials] == [True, False]
        assert (trials[1].enroll_id, trials[1].test_id) == ("a", "c")

    def test_invalid_label(self):
        with pytest.raises(FormatError, match="invalid label at line 1"):
            parse_trials("2 a b")

    def test_line_number_counts_blank_lines(self):
        with pytest.raises(FormatError, match="line 3"):
            parse_trials("1 a b\n\n1 a\n")

    def test_voxceleb_sized_list(self):
        rng = np.random.default_rng(0)
        lines = [f"{rng.integers(0, 2)} id{rng.integers(0, 40)}/v/{i}.wav id{rng.integers(0, 40)}/w/{i}.wav" for i in range(37720)]
        trials = parse_trials("\n".join(lines) + "\n")
        assert len(trials) == 37720
        assert sum(t.target for t in trials) == sum(line[0] == "1" for line in lines)

    def test_format_roundtrip(self):
        text = "1 a/1 b/2\n0 a/1 c/3\n"
        assert format_trials(parse_trials(text)) == text


class TestMetadata:
    TEXT = "speaker_id,gender,age_group\nid1,male,adult\nid2,female,\nid3,female,kid\n"

    def test_parse(self):
        meta = parse_metadata(self.TEXT)
        assert meta["id1"] == (GroupKey("age_group", "adult"), GroupKey("gender", "male"))
        assert meta["id2"] == (GroupKey("gender", "female"),)

    def test_errors(self):
        with pytest.raises(FormatError, match="speaker_id"):
            parse_metadata("spk,gender\na,male\n")
        with pytest.raises(FormatError, match="line 3"):
            parse_metadata("speaker_id,gender\na,male\na,female\n")

    def test_speaker_rule(self):
        assert speaker_of("id10270/x6uYqmx31kE/00001.wav") == "id10270"
        assert speaker_of("plain") == "plain"
        assert speaker_of("ks-spk07-utt3", r"spk(\d+)") == "07"
        assert speaker_of("x_y_z", r"^(?P<speaker>[^_]+)_") == "x"
        with pytest.raises(DataError):
            speaker_of("abc", r"\d+")

    def test_join(self):
        meta = parse_metadata(self.TEXT)
        trials = [TrialPair(True, "id1/a", "id1/b"), TrialPair(False, "id2/a", "id3/b"), TrialPair(False, "id1/a", "id2/a")]
        joined, dropped = join_groups(trials, meta, "gender")
        assert [t.group for t in joined] == ["male", "female"]
        assert dropped == 1

    def test_unknown_speaker(self):
        meta = parse_metadata(self.TEXT)
        trials = [TrialPair(True, "id9/a", "id9/b"), TrialPair(True, "id1/a", "id1/b")]
        with pytest.raises(DataError, match="unknown speaker 'id9'"):
            join_groups(trials, meta, "gender")
        joined, dropped = join_groups(trials, meta, "gender", on_unknown="skip")
        assert len(joined) == 1 and dropped == 1
        # id2 has no age group
        with pytest.raises(DataError, match="id2"):
            join_groups([TrialPair(True, "id2/a", "id2/b")], meta, "age_group")


class TestLabels:
    def test_roundtrip(self):
        labels = {"a/1": "male", "b,2": "female"}
        assert parse_labels(format_labels(labels)) == labels

    def test_errors(self):
        with pytest.raises(FormatError):
            parse_labels("id,label\na,b\n")
        with pytest.raises(FormatError, match="line 3"):
            parse_labels("utterance_id,label\na,b\na,c\n")
