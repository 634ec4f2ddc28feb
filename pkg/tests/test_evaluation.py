"""Metric brute-force oracles, result record IO, run-log parsing."""

import json

import numpy as np
import pytest
import torch

import helpers
from adaptbench.datasets import DomainDataset
from adaptbench.evaluation import (
    ResultRecord,
    accuracy,
    attack_success_rate,
    attacked_accuracy,
    curve_trace,
    identity_applicator,
    perturbation_applicator,
    read_results,
    transfer_attack_eval,
    write_results,
)
from adaptbench.universal import fooling_rate


def _fixture_20(rng):
    """20-sample fixture with a content-keyed stub model and known logits."""
    n, k = 20, 4
    logits = rng.normal(0, 2, size=(n, k)).astype(np.float32)
    labels = rng.integers(0, k, size=n).astype(np.int64)
    images = helpers.indexed_images(n)
    model = helpers.FixedByContentModel(logits)
    ds = DomainDataset(images, labels, class_count=k, domain_id="fixture")
    return model, ds, logits


class TestMetricOracles:
    def test_accuracy_matches_enumeration(self, rng):
        model, ds, logits = _fixture_20(rng)
        # Brute force: walk the samples one at a time with plain numpy.
        hits = 0
        for i in range(len(ds)):
            hits += int(np.argmax(logits[i]) == ds.labels[i])
        assert accuracy(model, ds) == hits / len(ds)

    def test_attacked_accuracy_identity_equals_accuracy(self, rng):
        model, ds, _ = _fixture_20(rng)
        assert attacked_accuracy(model, ds, identity_applicator) == accuracy(model, ds)

    def test_asr_matches_enumeration(self, rng):
        model, ds, logits = _fixture_20(rng)
        target = 1
        hits, victims = 0, 0
        for i in range(len(ds)):
            if ds.labels[i] == target:
                continue
            victims += 1
            hits += int(np.argmax(logits[i]) == target)
        got = attack_success_rate(model, ds, identity_applicator, target_class=target)
        assert got == hits / victims

    def test_asr_excludes_target_class_samples(self, rng):
        # All samples already belong to the target class: ASR is undefined.
        images = helpers.indexed_images(4)
        ds = DomainDataset(images, np.zeros(4, dtype=np.int64), 3, "d")
        model = helpers.FixedByContentModel(np.zeros((4, 3), dtype=np.float32))
        with pytest.raises(ValueError, match="undefined"):
            attack_success_rate(model, ds, identity_applicator, target_class=0)

    def test_fooling_rate_matches_enumeration(self, tiny_model, tiny_pair):
        source, _ = tiny_pair
        images = source.images[:20]
        rng = np.random.default_rng(5)
        v = (rng.uniform(-1, 1, size=images.shape[1:]) * 10 / 255).astype(np.float32)
        from adaptbench.models import predict

        flips = 0
        for i in range(20):
            before = predict(tiny_model, images[i : i + 1])[0]
            after = predict(
                tiny_model, np.clip(images[i : i + 1] + v, 0.0, 1.0)
            )[0]
            flips += int(before != after)
        assert fooling_rate(tiny_model, images, v) == flips / 20

    def test_applicators_do_not_mutate(self, rng):
        model, ds, _ = _fixture_20(rng)
        before = ds.images.copy()
        v = np.full(ds.images.shape[1:], 0.01, dtype=np.float32)
        attacked_accuracy(model, ds, perturbation_applicator(v))
        assert np.array_equal(ds.images, before)


class TestTransferAttack:
    def test_reports_both_metrics_and_respects_budget(self, tiny_model, tiny_pair):
        source, _ = tiny_pair
        ds = source.subset(np.arange(24), split="test")
        res = transfer_attack_eval(tiny_model, tiny_model, ds, eps=8.0 / 255.0, steps=3)
        assert set(res) == {"clean_acc", "attacked_acc"}
        assert 0.0 <= res["attacked_acc"] <= res["clean_acc"] <= 1.0


class TestResultRecords:
    def test_round_trip(self, tmp_path):
        records = [
            ResultRecord("uap", "distill", "shot", 3, 0.91, attack_acc=0.8, fooling=0.2),
            ResultRecord("none", "none", "source-only", 3, 0.88),
        ]
        records[0].extra["xi"] = 0.04
        path = str(tmp_path / "results.jsonl")
        write_results(records, path)
        loaded = read_results(path)
        assert loaded[0].attack_id == "uap"
        assert loaded[0].attack_acc == 0.8
        assert loaded[0].extra["xi"] == 0.04
        assert loaded[1].asr is None

    def test_none_fields_omitted_from_json(self):
        line = ResultRecord("none", "none", "shot", 0, 0.5).to_json_line()
        row = json.loads(line)
        assert "asr" not in row and "attack_acc" not in row and "fooling" not in row

    def test_json_lines_key_sorted(self):
        line = ResultRecord("a", "b", "c", 0, 0.1, asr=0.2).to_json_line()
        keys = list(json.loads(line))
        assert keys == sorted(keys)

    def test_write_is_byte_stable(self, tmp_path):
        records = [ResultRecord("sig", "none", "shot", 1, 0.625, asr=0.375)]
        p1, p2 = str(tmp_path / "a.jsonl"), str(tmp_path / "b.jsonl")
        write_results(records, p1)
        write_results(records, p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()


class TestCurveTrace:
    def _write(self, tmp_path, lines):
        p = tmp_path / "log.jsonl"
        p.write_text("\n".join(lines) + "\n")
        return str(p)

    def test_parses_aligned_series(self, tmp_path):
        path = self._write(
            tmp_path,
            [
                json.dumps({"epoch": 0, "loss": 2.0, "eps": 0.0}),
                json.dumps({"epoch": 1, "loss": 1.5, "eps": 0.01}),
                json.dumps({"epoch": 2, "loss": 1.2, "eps": 0.02}),
            ],
        )
        trace = curve_trace(path)
        assert trace["epoch"] == [0, 1, 2]
        assert trace["loss"] == [2.0, 1.5, 1.2]

    def test_malformed_line_reported_with_number(self, tmp_path):
        path = self._write(tmp_path, [json.dumps({"epoch": 0, "loss": 1.0}), "{oops"])
        with pytest.raises(ValueError, match="line 2"):
            curve_trace(path)

    def test_missing_epoch_detected(self, tmp_path):
        path = self._write(
            tmp_path,
            [json.dumps({"epoch": 0, "loss": 1.0}), json.dumps({"epoch": 2, "loss": 0.5})],
        )
        with pytest.raises(ValueError, match="epoch 1"):
            curve_trace(path)

    def test_inconsistent_keys_detected(self, tmp_path):
        path = self._write(
            tmp_path,
            [json.dumps({"epoch": 0, "loss": 1.0}), json.dumps({"epoch": 1, "acc": 0.5})],
        )
        with pytest.raises(ValueError, match="keys"):
            curve_trace(path)

    def test_empty_log_rejected(self, tmp_path):
        path = self._write(tmp_path, [""])
        with pytest.raises(ValueError, match="empty"):
            curve_trace(path)
