import json

import numpy as np
import pytest

from groundkit.core import (
    BoundingBox,
    CommonsenseType,
    DataError,
    DatasetHeader,
    Description,
    GroundingLabel,
    ObjectLink,
    PersonLink,
    Prediction,
    Sample,
    Word,
    dataset_stats,
    feature_path,
    has_tied_links,
    read_dataset,
    read_header,
    write_dataset,
)

from conftest import make_sample


class TestTypes:
    def test_word_must_be_nonempty(self):
        with pytest.raises(DataError):
            Word("")

    def test_description_link_ids_distinct_in_order(self):
        d = Description([PersonLink(3), Word("and"), Word("then"), PersonLink(1),
                         Word("met"), PersonLink(3)])
        assert d.link_ids == [3, 1]
        assert d.num_links == 2

    def test_tied_links_detection(self):
        tied = [PersonLink(1), Word("and"), PersonLink(2), Word("dance")]
        loose = [PersonLink(1), Word("and"), Word("then"), PersonLink(2)]
        assert has_tied_links(tied)
        assert not has_tied_links(loose)

    def test_prediction_argmax_lowest_index_tiebreak(self):
        pred = Prediction.from_scores({1: np.array([1.0, 1.0]), 2: np.array([0.1, 2.0, -1.0])})
        assert pred.chosen[1] == 0
        assert pred.chosen[2] == 1

    def test_label_out_of_range_rejected(self):
        sample = make_sample(labels={1: 5}, n_persons=3)
        with pytest.raises(DataError, match="label out of range"):
            sample.validate()

    def test_object_link_rejected_in_finished_sample(self):
        sample = make_sample(tokens=[PersonLink(1), Word("holds"), ObjectLink(4, "cup")])
        with pytest.raises(DataError, match="object links"):
            sample.validate(strict=True)
        sample.validate(strict=False)  # lenient mode lets it through


class TestRoundTrip:
    def test_write_read_identity(self, tmp_path):
        samples = [make_sample(f"s-{i}", n_persons=2 + i % 3) for i in range(5)]
        path = tmp_path / "data.jsonl"
        write_dataset(samples, path)
        loaded = read_dataset(path)
        assert len(loaded) == len(samples)
        for a, b in zip(samples, loaded):
            assert a.sample_id == b.sample_id
            assert a.description.tokens == b.description.tokens
            assert a.labels.pairs == b.labels.pairs
            assert a.commonsense_type == b.commonsense_type
            assert a.image.width == b.image.width
            for pa, pb in zip(a.image.persons, b.image.persons):
                assert pa.box == pb.box
                assert pa.feature.tobytes() == pb.feature.tobytes()
            for oa, ob in zip(a.image.context_objects, b.image.context_objects):
                assert oa.box == ob.box
                assert oa.class_name == ob.class_name
                assert oa.feature.tobytes() == ob.feature.tobytes()

    def test_file_level_bitwise_roundtrip(self, tmp_path):
        samples = [make_sample(f"s-{i}") for i in range(3)]
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_dataset(samples, p1)
        write_dataset(read_dataset(p1), p2, header=read_header(p1))
        assert p1.read_bytes() == p2.read_bytes()
        assert feature_path(p1).read_bytes() == feature_path(p2).read_bytes()

    def test_empty_dataset_roundtrips(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        write_dataset([], path)
        assert read_dataset(path) == []

    def test_invalid_sample_refused_before_write(self, tmp_path):
        bad = make_sample(labels={1: 9}, n_persons=2)
        path = tmp_path / "bad.jsonl"
        with pytest.raises(DataError):
            write_dataset([bad], path)
        assert not path.exists()

    def test_order_preserved(self, tmp_path):
        samples = [make_sample(f"s-{i}") for i in (3, 1, 2)]
        path = tmp_path / "d.jsonl"
        write_dataset(samples, path)
        assert [s.sample_id for s in read_dataset(path)] == ["s-3", "s-1", "s-2"]


class TestReadErrors:
    def test_malformed_line_names_line_number(self, tmp_path):
        path = tmp_path / "d.jsonl"
        write_dataset([make_sample("s-0")], path)
        text = path.read_text().splitlines()
        text.insert(1, "{not json")
        path.write_text("\n".join(text) + "\n")
        with pytest.raises(DataError, match=r":2:"):
            read_dataset(path)

    def test_missing_feature_file(self, tmp_path):
        path = tmp_path / "d.jsonl"
        write_dataset([make_sample("s-0")], path)
        feature_path(path).unlink()
        with pytest.raises(DataError, match="feature file missing"):
            read_dataset(path)

    def test_dimension_mismatch_detected(self, tmp_path):
        path = tmp_path / "d.jsonl"
        write_dataset([make_sample("s-0")], path)
        # rewrite the header to claim a different d_vis
        lines = path.read_text().splitlines()
        header = json.loads(lines[0])
        header["d_vis"] = 64
        lines[0] = json.dumps(header, separators=(",", ":"))
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataError, match="d_vis"):
            read_dataset(path)

    def test_corrupt_feature_magic_rejected(self, tmp_path):
        path = tmp_path / "d.jsonl"
        write_dataset([make_sample("s-0")], path)
        fpath = feature_path(path)
        blob = bytearray(fpath.read_bytes())
        blob[:4] = b"XXXX"
        fpath.write_bytes(bytes(blob))
        with pytest.raises(DataError, match="magic"):
            read_dataset(path)

    def test_label_out_of_range_on_read(self, tmp_path):
        path = tmp_path / "d.jsonl"
        write_dataset([make_sample("s-0")], path)
        lines = path.read_text().splitlines()
        obj = json.loads(lines[1])
        obj["labels"] = {"1": 7}
        lines[1] = json.dumps(obj, separators=(",", ":"))
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataError, match="label out of range"):
            read_dataset(path)


class TestStats:
    def test_mean_persons(self):
        samples = [make_sample("a", n_persons=3), make_sample("b", n_persons=5)]
        stats = dataset_stats(samples)
        assert stats.mean_persons_per_image == 4.0
        assert stats.n_samples == 2
        assert stats.n_images == 2
        assert stats.n_links == 2

    def test_empty_input(self):
        stats = dataset_stats([])
        assert stats.n_samples == 0
        assert stats.mean_tokens is None
        assert stats.mean_persons_per_image is None
        assert stats.type_histogram == {}

    def test_histogram_matches_construction(self):
        types = [CommonsenseType.CAUSAL] * 4 + [CommonsenseType.MENTAL] * 3 + \
                [CommonsenseType.SPATIAL] * 3
        samples = [make_sample(f"s-{i}", ctype=t) for i, t in enumerate(types)]
        stats = dataset_stats(samples)
        assert stats.type_histogram == {"causal": 4, "mental": 3, "spatial": 3}

    def test_permutation_invariant(self):
        samples = [make_sample(f"s-{i}", n_persons=2 + i % 4) for i in range(8)]
        a = dataset_stats(samples)
        b = dataset_stats(list(reversed(samples)))
        assert a == b
