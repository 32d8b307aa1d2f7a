"""
Tests for model files, checkpoints, feature archives, manifests and prediction files.
"""

import json
import struct

import numpy as np
import pytest

from flowhmm.classify import Prediction
from flowhmm.config import FlowConfig
from flowhmm.exceptions import (
    CorruptFileError,
    DataError,
    ModelFormatError,
    TruncatedFileError,
    VersionMismatchError,
)
from flowhmm.hmm import HmmModel, MarkovChain
from flowhmm.model_io import (
    MODEL_JSON,
    PARAMS_BIN,
    Manifest,
    ManifestEntry,
    decode_features,
    decode_tensors,
    encode_features,
    encode_tensors,
    load_dataset,
    load_model,
    parse_manifest,
    read_predictions,
    read_train_log,
    save_model,
    write_features,
    write_manifest,
    write_predictions,
    write_report,
    write_train_log,
)
from flowhmm.nmm import NmmEmission
from flowhmm.numerics import derive_rng
from flowhmm.selftest import random_gmm_model, randomize_flow
from flowhmm.trainer import OuterRecord, TrainLog

SMALL = FlowConfig(coupling_layers=2, flow_steps=2)


def _flow_model(kind):
    emission = NmmEmission.create(kind, 2, 2, 3, SMALL, seed=1)
    rng = derive_rng(2)
    for _, _, flow in emission.iter_flows():
        randomize_flow(flow, rng)
    chain = MarkovChain.from_probs([0.6, 0.4], [[0.7, 0.3], [0.0, 1.0]])
    return HmmModel(chain, emission, label="yes", metadata={"seed": 7})


class TestModelFiles:
    """Test saving and loading class models."""

    @pytest.mark.parametrize("kind", ["nvp", "glow"])
    def test_flow_model_scores_identically(self, tmp_path, kind):
        """Test that a reloaded flow model gives bit-identical log-likelihoods."""
        model = _flow_model(kind)
        save_model(model, tmp_path / "m")
        loaded = load_model(tmp_path / "m")
        seq = derive_rng(3).standard_normal((6, 3))
        assert loaded.log_likelihood(seq) == model.log_likelihood(seq)
        assert loaded.label == "yes"
        assert loaded.kind == kind
        assert loaded.metadata["seed"] == 7

    def test_gmm_model(self, tmp_path):
        """Test that a GMM model keeps its parameters exactly."""
        model = random_gmm_model(derive_rng(4), 3, 2, 4)
        save_model(model, tmp_path / "g")
        loaded = load_model(tmp_path / "g")
        np.testing.assert_array_equal(loaded.emission.means, model.emission.means)
        np.testing.assert_array_equal(loaded.chain.log_A, model.chain.log_A)

    def test_truncated_parameters(self, tmp_path):
        """Test that a cut-off parameter file is reported as truncated."""
        save_model(_flow_model("nvp"), tmp_path / "m")
        params = tmp_path / "m" / PARAMS_BIN
        params.write_bytes(params.read_bytes()[:-10])
        with pytest.raises(TruncatedFileError):
            load_model(tmp_path / "m")

    def test_bad_magic(self, tmp_path):
        """Test that a file with the wrong magic is corrupt."""
        save_model(_flow_model("nvp"), tmp_path / "m")
        params = tmp_path / "m" / PARAMS_BIN
        params.write_bytes(b"XXXX" + params.read_bytes()[4:])
        with pytest.raises(CorruptFileError):
            load_model(tmp_path / "m")

    def test_future_format_version(self, tmp_path):
        """Test that an unknown metadata version is rejected."""
        save_model(_flow_model("nvp"), tmp_path / "m")
        meta_path = tmp_path / "m" / MODEL_JSON
        meta = json.loads(meta_path.read_text())
        meta["format_version"] = 99
        meta_path.write_text(json.dumps(meta))
        with pytest.raises(VersionMismatchError):
            load_model(tmp_path / "m")

    def test_missing_tensor(self, tmp_path):
        """Test that metadata listing an absent tensor is rejected."""
        save_model(_flow_model("nvp"), tmp_path / "m")
        meta_path = tmp_path / "m" / MODEL_JSON
        meta = json.loads(meta_path.read_text())
        meta["tensors"]["chain.extra"] = [2]
        meta_path.write_text(json.dumps(meta))
        with pytest.raises(ModelFormatError):
            load_model(tmp_path / "m")

    def test_invalid_json(self, tmp_path):
        """Test that unparsable metadata is corrupt."""
        save_model(_flow_model("nvp"), tmp_path / "m")
        (tmp_path / "m" / MODEL_JSON).write_text("{not json")
        with pytest.raises(CorruptFileError):
            load_model(tmp_path / "m")

    def test_tensor_container_rejects_trailing_bytes(self):
        """Test that extra bytes after the last tensor are corrupt."""
        data = encode_tensors({"a": np.ones(3)})
        assert decode_tensors(data)["a"].tolist() == [1.0, 1.0, 1.0]
        with pytest.raises(CorruptFileError):
            decode_tensors(data + b"\0")

    def test_tensor_container_rejects_oversized_shape(self):
        """Test that a declared shape larger than the payload is rejected before reading."""
        data = encode_tensors({"a": np.ones((2, 2, 4))})
        # magic, version, count, name length, name, rank
        offset = 4 + 4 + 4 + 4 + 1 + 4
        huge = struct.pack("<III", 2**31, 2**31, 4)
        corrupted = data[:offset] + huge + data[offset + len(huge) :]

        with pytest.raises(CorruptFileError, match="declares shape"):
            decode_tensors(corrupted)

    def test_truncation_is_corruption(self):
        """Test that truncated files can be handled as corrupt ones."""
        assert issubclass(TruncatedFileError, CorruptFileError)


class TestFeatureArchives:
    """Test NMMF feature archives."""

    def test_round_trip_is_float32(self, tmp_path):
        """Test that archives keep order and round values to 32-bit floats."""
        records = [("b", np.full((2, 3), 0.1)), ("a", np.arange(4.0).reshape(4, 1))]
        write_features(tmp_path / "f.nmmf", records)
        loaded = decode_features((tmp_path / "f.nmmf").read_bytes())
        assert [utt for utt, _ in loaded] == ["b", "a"]
        np.testing.assert_array_equal(loaded[0][1], np.float32(0.1))
        assert loaded[1][1].shape == (4, 1)

    def test_non_finite_features(self):
        """Test that NaN frames cannot be archived."""
        with pytest.raises(DataError):
            encode_features([("x", np.array([[np.nan]]))])

    def test_truncated_archive(self):
        """Test that a cut-off archive is reported."""
        data = encode_features([("x", np.ones((3, 2)))])
        with pytest.raises(TruncatedFileError):
            decode_features(data[:-1])


class TestManifests:
    """Test labeled utterance lists."""

    def test_parse(self):
        """Test header, entries and per-label counts."""
        text = "#labels: yes,no\nu1\tf.nmmf\tyes\nu2\tf.nmmf\tno\nu3\tf.nmmf\tyes\n"
        manifest = parse_manifest(text)
        assert manifest.labels == ["yes", "no"]
        assert manifest.counts() == {"yes": 2, "no": 1}

    def test_missing_header(self):
        """Test that the label header is required."""
        with pytest.raises(CorruptFileError):
            parse_manifest("u1\tf.nmmf\tyes\n")

    def test_wrong_field_count(self):
        """Test that entries need three tab-separated fields."""
        with pytest.raises(CorruptFileError):
            parse_manifest("#labels: yes\nu1 f.nmmf yes\n")

    def test_undeclared_label(self):
        """Test that entry labels must appear in the header."""
        with pytest.raises(DataError):
            parse_manifest("#labels: yes\nu1\tf.nmmf\tmaybe\n")

    def test_duplicate_ids(self):
        """Test that utterance ids are unique."""
        with pytest.raises(DataError):
            Manifest(["a"], [ManifestEntry("u", "p", "a"), ManifestEntry("u", "q", "a")])

    def test_load_dataset_resolves_relative_paths(self, tmp_path):
        """Test that archive paths are taken relative to the manifest."""
        (tmp_path / "feats").mkdir()
        write_features(tmp_path / "feats" / "train.nmmf", [("u1", np.ones((2, 2)))])
        manifest = Manifest(["a"], [ManifestEntry("u1", "feats/train.nmmf", "a")])
        write_manifest(tmp_path / "train.lst", manifest)
        loaded, dataset = load_dataset(tmp_path / "train.lst")
        assert loaded.labels == ["a"]
        assert dataset[0][0] == "u1"
        assert dataset[0][2] == "a"
        np.testing.assert_array_equal(dataset[0][1], np.ones((2, 2)))

    def test_load_dataset_missing_utterance(self, tmp_path):
        """Test that entries must exist in their archive."""
        write_features(tmp_path / "f.nmmf", [("u1", np.ones((2, 2)))])
        write_manifest(tmp_path / "m.lst", Manifest(["a"], [ManifestEntry("u9", "f.nmmf", "a")]))
        with pytest.raises(DataError):
            load_dataset(tmp_path / "m.lst")


class TestRunOutputs:
    """Test prediction files, training logs and reports."""

    def test_predictions_round_trip(self, tmp_path):
        """Test that scores survive exactly and ties are kept."""
        predictions = [
            Prediction("u1", "a", np.array([-1.25, -3.0 / 7.0]), False),
            Prediction("u2", "b", np.array([-2.0, -2.0]), True),
        ]
        write_predictions(tmp_path / "p.txt", ["a", "b"], predictions)
        labels, loaded = read_predictions(tmp_path / "p.txt")
        assert labels == ["a", "b"]
        assert [p.tie for p in loaded] == [False, True]
        np.testing.assert_array_equal(loaded[0].scores, predictions[0].scores)

    def test_predictions_bad_line(self, tmp_path):
        """Test that malformed prediction lines are corrupt."""
        (tmp_path / "p.txt").write_text("#labels: a\nu1\ta\n")
        with pytest.raises(CorruptFileError):
            read_predictions(tmp_path / "p.txt")

    def test_train_log_excludes_wall_time(self, tmp_path):
        """Test that the default training log is free of timing."""
        log = TrainLog(class_label="a", records=[OuterRecord(0, 12.5, 3, 1e-3, 0.42)])
        log.final_nll = 11.0
        write_train_log(tmp_path / "log.jsonl", [log])
        records = read_train_log(tmp_path / "log.jsonl")
        assert [r["type"] for r in records] == ["outer", "summary"]
        assert "wall_time" not in records[0]
        write_train_log(tmp_path / "timed.jsonl", [log], timing=True)
        assert read_train_log(tmp_path / "timed.jsonl")[0]["wall_time"] == 0.42

    def test_report_companion(self, tmp_path):
        """Test that reports get a JSON twin."""
        write_report(tmp_path / "report.txt", "accuracy 100%\n", {"accuracy": 1.0})
        assert (tmp_path / "report.txt").read_text() == "accuracy 100%\n"
        assert json.loads((tmp_path / "report.txt.json").read_text()) == {"accuracy": 1.0}
