import json

import numpy as np
import pandas as pd
import pytest

from src.cues.cue_engine import SIMILAR, ThresholdTable, cue_labels_for_pair, fit_independent_quantizer, fit_quantizers
from src.cues.prompt_gen import generate_individual
from src.errors import DataError
from src.evaluation.analysis import (
    EvalRow,
    accuracy_by_cue,
    accuracy_by_delta,
    cue_distribution,
    export_report,
    frame_to_rows,
    group_crosstab,
    independent_group,
    logistic_fit_1d,
    rows_to_frame,
    wilson_interval,
)
from src.stage2.classifier import classify_mixture
from src.stage2.embeddings import OracleEmbeddingProvider

from tests.synth import closed_loop_records


def _row(cue, correct, **kwargs):
    base = dict(mixture_id="test-000000", cue_type=cue, prompt_config="individual",
                true_label=1, pred_label=1 if correct else 0, prob=0.7 if correct else 0.3)
    base.update(kwargs)
    return EvalRow(**base)


def test_wilson_interval():
    low, high = wilson_interval(5, 10)
    assert low == pytest.approx(0.2366, abs=1e-4)
    assert high == pytest.approx(0.7634, abs=1e-4)
    low, high = wilson_interval(10, 10)
    assert high == pytest.approx(1.0)
    assert low < 1.0
    assert all(np.isnan(wilson_interval(0, 0)))


def test_accuracy_by_cue():
    rows = [
        _row("mean_f0", True, si_sdri=10.0),
        _row("mean_f0", True, si_sdri=12.0),
        _row("mean_f0", False),
        _row("gender", True),
    ]
    table = accuracy_by_cue(rows).set_index("cue_type")
    assert list(table.columns) == ["n", "correct", "acc", "ci_low", "ci_high", "mean_si_sdri"]
    assert table.loc["mean_f0", "n"] == 3
    assert table.loc["mean_f0", "acc"] == pytest.approx(2 / 3)
    assert table.loc["mean_f0", "mean_si_sdri"] == pytest.approx(11.0)
    assert np.isnan(table.loc["gender", "mean_si_sdri"])
    assert table.loc["gender", "acc"] == 1.0


def test_accuracy_by_cue_groups_by_config():
    rows = [_row("mean_f0", True), _row("mean_f0", False, prompt_config="all")]
    table = accuracy_by_cue(rows, by=("prompt_config",))
    assert list(table["prompt_config"]) == ["all", "individual"]
    assert list(table["acc"]) == [0.0, 1.0]


def test_accuracy_by_cue_rejects_empty():
    with pytest.raises(DataError):
        accuracy_by_cue([])


def test_logistic_fit_null_slope():
    intercept, slope = logistic_fit_1d([1, 2, 3, 1, 2, 3], [1, 1, 1, 0, 0, 0])
    assert slope == pytest.approx(0.0, abs=1e-9)
    assert intercept == pytest.approx(0.0, abs=1e-9)


def test_logistic_fit_positive_slope():
    _, slope = logistic_fit_1d([0, 1, 2, 3, 4, 5], [0, 0, 1, 0, 1, 1])
    assert 0.0 < slope < 10.0


def test_logistic_fit_errors():
    with pytest.raises(DataError):
        logistic_fit_1d([1.0], [1])
    with pytest.raises(DataError):
        logistic_fit_1d([1.0, 2.0], [1, 1])


def test_accuracy_by_delta():
    rows = [_row("mean_f0", d > 4 or d == 2, delta=float(d) * (-1) ** d) for d in range(1, 11)]
    rows.append(_row("gender", True))
    table = accuracy_by_delta(rows, bins=5)
    assert list(table.columns) == ["cue_type", "abs_delta", "n", "acc", "fitted", "intercept", "slope"]
    assert set(table["cue_type"]) == {"mean_f0"}
    assert table["n"].sum() == 10
    assert table["slope"].iloc[0] > 0.0
    assert table["abs_delta"].is_monotonic_increasing


def test_independent_group():
    three = fit_independent_quantizer("mean_f0", range(1, 10), 3)
    assert independent_group(three, 1.0, 2.0) == "same"
    assert independent_group(three, 1.0, 5.0) == "adjacent"
    assert independent_group(three, 1.0, 9.0) == "distinct"
    two = fit_independent_quantizer("distance", [0.4, 0.6, 0.9, 1.4], 2)
    assert independent_group(two, 0.5, 1.2) == "distinct"


def test_group_crosstab():
    quantizers = {"distance": fit_independent_quantizer("distance", [0.4, 0.6, 0.9, 1.4], 2)}
    rows = [
        _row("distance", True, tar_value=0.5, inf_value=0.6, relative_category=SIMILAR),
        _row("distance", False, tar_value=0.5, inf_value=1.4, relative_category="nearer"),
        _row("distance", True, tar_value=0.5, inf_value=1.4, relative_category="nearer", prompt_kind="independent"),
        _row("mean_f0", True, tar_value=200.0, inf_value=120.0, relative_category="higher"),
    ]
    table = group_crosstab(rows, quantizers)
    assert len(table) == 9
    indexed = table.set_index(["independent_group", "relative_group"])
    assert indexed.loc[("all", "all"), "n"] == 2
    assert indexed.loc[("same", "similar"), "acc"] == 1.0
    assert indexed.loc[("distinct", "non-similar"), "acc"] == 0.0
    assert indexed.loc[("same", "non-similar"), "n"] == 0


def test_group_crosstab_without_matches():
    table = group_crosstab([_row("gender", True)], {})
    assert table.empty


def test_cue_distribution():
    labels = [
        {"split": "train", "attribute": "mean_f0", "kind": "relative", "category": "higher"},
        {"split": "train", "attribute": "mean_f0", "kind": "relative", "category": "higher"},
        {"split": "train", "attribute": "mean_f0", "kind": "relative", "category": SIMILAR},
        {"split": "train", "attribute": "mean_f0", "kind": "independent", "category": "high"},
    ]
    table = cue_distribution(labels)
    assert list(table.columns) == ["split", "attribute", "category", "count"]
    assert dict(zip(table["category"], table["count"])) == {"higher": 2, SIMILAR: 1}


def test_frame_round_trip_drops_missing():
    rows = [_row("mean_f0", True, delta=3.0, si_sdri=9.5), _row("gender", False)]
    frame = rows_to_frame(rows)
    assert list(frame["correct"]) == [True, False]
    assert frame_to_rows(frame) == rows


def test_export_report(tmp_path):
    tables = {"accuracy": pd.DataFrame({"cue_type": ["mean_f0"], "acc": [0.5]})}
    written = export_report(tables, tmp_path / "report", dataset_hash="abc", config={"seed": 3}, seed=3)
    assert [p.name for p in written] == ["accuracy.csv", "provenance.json"]
    provenance = json.loads((tmp_path / "report" / "provenance.json").read_text(encoding="utf-8"))
    assert provenance["dataset_hash"] == "abc"
    assert provenance["seed"] == 3
    assert provenance["tables"] == ["accuracy"]
    again = export_report(tables, tmp_path / "again", dataset_hash="abc", config={"seed": 3}, seed=3)
    assert again[0].read_bytes() == written[0].read_bytes()


def _single_cue_results(records, attribute, provider, leak_db=None):
    for record in records:
        labels = [l for l in cue_labels_for_pair(record.attributes_tar, record.attributes_inf)
                  if l.attribute == attribute]
        for prompt in generate_individual(labels, record.mixture_id, record.plan.target_index):
            yield record, labels[0], classify_mixture(record, prompt, provider, leak_db=leak_db)


@pytest.mark.slow
@pytest.mark.parametrize("attribute", ["mean_f0", "f0_span", "speaking_rate"])
def test_noisy_oracle_accuracy_grows_with_delta(attribute):
    provider = OracleEmbeddingProvider(noise_sigma=0.5, seed=3)
    x, y = [], []
    for _, label, result in _single_cue_results(closed_loop_records(300, seed=2), attribute, provider, leak_db=15.0):
        x.append(abs(label.delta))
        y.append(int(result.correct))
    assert 0 < sum(y) < len(y)
    _, slope = logistic_fit_1d(x, y)
    assert slope > 0.0


@pytest.mark.slow
def test_relative_cue_separates_speakers_sharing_an_independent_bin():
    provider = OracleEmbeddingProvider()
    records = closed_loop_records(200, seed=4)
    quantizers = fit_quantizers(v for r in records for v in (r.attributes1, r.attributes2))
    rows = []
    for record, label, result in _single_cue_results(records, "mean_f0", provider):
        rows.append(EvalRow(
            mixture_id=record.mixture_id, cue_type="mean_f0", prompt_config="individual",
            true_label=result.label, pred_label=1 if result.pred_index == 1 else 0, prob=result.prob,
            relative_category=label.category, delta=label.delta,
            tar_value=record.attributes_tar.value("mean_f0"), inf_value=record.attributes_inf.value("mean_f0"),
        ))
    table = group_crosstab(rows, {"mean_f0": quantizers["mean_f0"]}, ThresholdTable.default())
    same_bin = table.set_index(["independent_group", "relative_group"]).loc[("same", "non-similar")]
    assert same_bin["n"] > 0
    assert same_bin["ci_low"] > 0.5
