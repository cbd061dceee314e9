"""Tests for sweep plans, execution and reports."""

import math

import pytest

from stablefit.core.data import GrammarSpec, TaskSpec, generate_classification_task
from stablefit.core.model import init_checkpoint
from stablefit.core.serialize import read_csv
from stablefit.core.sweep import (
    DOWNSAMPLE_PLAN,
    SweepPlan,
    SweepResult,
    bundled_plan,
    compare_stability,
    curve_band,
    emit_report,
    groups_by_axis,
    iterations_matched_epochs,
    run_sweep,
    summarize_cell,
    summary_from_boxplot,
)
from stablefit.core.types import AdamConfig, EvalPoint, ModelConfig, RunConfig, RunRecord
from stablefit.core.validate import ConfigError, StabilityValidationError

SEEDS = [0, 1, 2]


def tiny_plan():
    base = RunConfig(epochs=1, batch_size=16, eval_every=2, adam=AdamConfig(alpha=1e-3))
    return SweepPlan(base=base, axes=[("epochs", [1, 2])], seeds=SEEDS, name="tiny")


@pytest.fixture(scope="module")
def tiny_inputs():
    config = ModelConfig(num_layers=2, hidden_dim=8, num_heads=2, ffn_dim=16, vocab_size=16,
                         max_seq_len=6, dropout_p=0.0, dtype="float64")
    grammar = GrammarSpec(vocab_size=16, seq_len=6)
    train, dev = generate_classification_task(TaskSpec(grammar=grammar), seed=7, train_size=32, dev_size=16)
    return train, dev, init_checkpoint(config, seed=0)


@pytest.fixture(scope="module")
def tiny_result(tiny_inputs):
    train, dev, init = tiny_inputs
    return run_sweep(tiny_plan(), train, dev, init)


@pytest.mark.parametrize("full,epochs,batch,subset,expected", [
    (23596, 3, 16, 1000, 71),
    (104744, 3, 16, 1000, 312),
    (1000, 3, 16, 1000, 3),
])
def test_iterations_matched_epochs(full, epochs, batch, subset, expected):
    assert iterations_matched_epochs(full, epochs, batch, subset) == expected


def test_iterations_matched_epochs_rejects_oversized_subset():
    with pytest.raises(StabilityValidationError):
        iterations_matched_epochs(100, 3, 16, 101)


def test_plan_expansion_order():
    plan = SweepPlan(cells=[{"epochs": 20}], axes=[("epochs", [3, 10]), ("adam.bias_correction", [True, False])],
                     seeds=[0])
    overrides = plan.cell_overrides()
    assert overrides[0] == {"epochs": 20}
    assert overrides[1:] == [
        {"epochs": 3, "adam.bias_correction": True},
        {"epochs": 3, "adam.bias_correction": False},
        {"epochs": 10, "adam.bias_correction": True},
        {"epochs": 10, "adam.bias_correction": False},
    ]
    assert SweepPlan(seeds=[0]).cell_overrides() == [{}]


def test_lr_scale_multiplies_alpha():
    plan = bundled_plan("baseline-contrast", seeds=[0, 1], lr_scale=50)
    configs = [config for _, _, config in plan.cell_configs()]
    assert [c.adam.alpha for c in configs] == pytest.approx([1e-3, 1e-3])
    assert [c.epochs for c in configs] == [3, 20]
    assert [c.adam.bias_correction for c in configs] == [False, True]


def test_lr_scale_labels_cells_with_effective_alpha():
    plan = bundled_plan("baseline-contrast", seeds=[0, 1], lr_scale=50)
    (first, overrides, config), _ = plan.cell_configs()
    assert "adam.alpha=0.001" in first
    assert "2e-05" not in first
    assert overrides["adam.alpha"] == 2e-05
    assert config.adam.alpha == pytest.approx(1e-3)
    unscaled, _ = bundled_plan("baseline-contrast", seeds=[0, 1]).cell_configs()
    assert "adam.alpha=2e-05" in unscaled[0][0]


def test_bundled_ablation_grid_size():
    assert len(bundled_plan("ablation-grid", seeds=[0]).cell_configs()) == 18


def test_bundled_plan_unknown():
    with pytest.raises(StabilityValidationError):
        bundled_plan("no-such-plan")


def test_downsampling_plan_cells():
    base = RunConfig(epochs=3, batch_size=16)
    plan = bundled_plan(DOWNSAMPLE_PLAN, base, seeds=[0], full_train_size=23596, subset_size=1000)
    assert plan.cell_overrides() == [{}, {"train_subset": 1000}, {"train_subset": 1000, "epochs": 71}]
    with pytest.raises(ConfigError):
        bundled_plan(DOWNSAMPLE_PLAN, base, seeds=[0])


def test_plan_validation():
    with pytest.raises(StabilityValidationError):
        SweepPlan(seeds=[])
    with pytest.raises(StabilityValidationError):
        SweepPlan(seeds=[1, 1])
    with pytest.raises(StabilityValidationError):
        SweepPlan(axes=[("epochs", [])])


def test_plan_dict_round_trip():
    plan = tiny_plan()
    assert SweepPlan.from_dict(plan.to_dict()).to_dict() == plan.to_dict()


def test_sweep_shape(tiny_result):
    assert len(tiny_result.cells) == 2
    assert all(len(cell.records) == len(SEEDS) for cell in tiny_result.cells)
    assert [r.seed for r in tiny_result.cells[0].records] == SEEDS
    assert len(tiny_result.comparisons) == 1
    assert tiny_result.cells[1].records[0].iterations == 4


def test_sweep_is_deterministic(tiny_inputs, tiny_result):
    train, dev, init = tiny_inputs
    again = run_sweep(tiny_plan(), train, dev, init)
    assert again.to_dict() == tiny_result.to_dict()


def test_sweep_independent_of_worker_count(tiny_inputs, tiny_result):
    train, dev, init = tiny_inputs
    parallel = run_sweep(tiny_plan(), train, dev, init, workers=2)
    assert parallel.to_dict() == tiny_result.to_dict()


def test_sweep_result_round_trip(tiny_result):
    assert SweepResult.from_dict(tiny_result.to_dict()).to_dict() == tiny_result.to_dict()


def test_sweep_needs_init(tiny_inputs):
    train, dev, _ = tiny_inputs
    with pytest.raises(StabilityValidationError):
        run_sweep(tiny_plan(), train, dev)


def test_emit_report_is_byte_identical(tiny_result, tmp_path):
    first = emit_report(tiny_result, tmp_path / "a")
    second = emit_report(tiny_result, tmp_path / "b")
    assert first == second
    assert {"summary.csv", "levene.csv", "boxplot.csv", "scatter.csv", "curves.csv", "signatures.csv",
            "boxplot_all.svg", "sweep_result.json"} <= set(first)
    for name in first:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_summary_recomputes_from_boxplot(tiny_result, tmp_path):
    emit_report(tiny_result, tmp_path)
    recomputed = summary_from_boxplot(read_csv(tmp_path / "boxplot.csv"))
    for row in read_csv(tmp_path / "summary.csv"):
        expected = recomputed[row["cell_id"]]
        assert float(row["std"]) == pytest.approx(expected["std"], rel=1e-12)
        assert float(row["mean"]) == pytest.approx(expected["mean"], rel=1e-12)
        assert float(row["max"]) == pytest.approx(expected["max"], rel=1e-12)
        assert int(row["failed_count"]) == expected["failed_count"]


def test_summary_marks_runner_up(tiny_result, tmp_path):
    emit_report(tiny_result, tmp_path)
    rows = read_csv(tmp_path / "summary.csv")
    marked = [row for row in rows if row["runner_up_W"]]
    assert len(marked) == 1
    assert marked[0]["cell_id"] == tiny_result.runner_up.cell_a


def test_emit_report_rejects_empty(tmp_path):
    with pytest.raises(StabilityValidationError):
        emit_report(SweepResult(plan={}, cells=[]), tmp_path)


def test_emit_report_with_axis_groups(tiny_result, tmp_path):
    groups = groups_by_axis(tiny_result, "epochs")
    assert list(groups) == ["epochs=1", "epochs=2"]
    names = emit_report(tiny_result, tmp_path, groups)
    assert "boxplot_epochs_1.svg" in names


def test_compare_stability_needs_two_runs():
    with pytest.raises(StabilityValidationError):
        compare_stability([0.5], [0.6, 0.7])


def record(losses, evals):
    return RunRecord(run_id="r", kind="finetune", config={}, metric="accuracy", losses=losses,
                     evals=[EvalPoint(i, m, None) for i, m in evals])


def test_curve_band_population_std():
    band = curve_band([record([1.0, 2.0], []), record([3.0], [])])
    assert band.iterations == [1, 2]
    assert band.mean == [2.0, 2.0]
    assert band.std == [1.0, 0.0]
    assert band.count == [2, 1]


def test_curve_band_dev_metric():
    band = curve_band([record([], [(0, 0.5), (10, 0.7)]), record([], [(0, 0.5), (10, 0.9)])], "dev_metric")
    assert band.iterations == [0, 10]
    assert band.mean[1] == pytest.approx(0.8)
    assert math.isclose(band.std[1], 0.1)
    with pytest.raises(StabilityValidationError):
        curve_band([record([1.0], [])], "grad_norm")


def test_emit_report_with_first_step_divergence(tiny_result, tmp_path):
    result = SweepResult.from_dict(tiny_result.to_dict())
    cell = result.cells[0]
    stopped = cell.records[0]
    stopped.losses, stopped.lrs, stopped.bias_correction_factors, stopped.grad_norms = [], [], [], {}
    stopped.evals = stopped.evals[:1]
    stopped.final_metric = stopped.evals[0].dev_metric
    stopped.final_train_loss = float("nan")
    stopped.failure_reason = "divergence"
    stopped.failed = True
    cell.summary = summarize_cell(cell.records)

    assert "signatures.csv" in emit_report(result, tmp_path)
    rows = [row for row in read_csv(tmp_path / "signatures.csv") if row["run_id"] == stopped.run_id]
    assert [row["signature"] for row in rows] == ["diverged"]
    assert rows[0]["trivial"] == "false"
    assert int(read_csv(tmp_path / "summary.csv")[0]["diverged_count"]) == 1
