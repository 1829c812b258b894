import json
import math
import os

import numpy as np
import pytest

from falign.data import DataUnavailableError
from falign.experiments import (
    SYNTHETIC_ARCH,
    DatasetName,
    ExperimentConfig,
    SwapDirection,
    Trainer,
    TrainingDivergedError,
    alignment_forcing_experiment,
    angle_sweep,
    init_scale_sweep,
    load_data,
    matched_perturbation_comparison,
    run_many,
    scale_sweep_summary,
    swap_experiment,
    train,
    write_rows,
    write_run,
)
from falign.network import Network, WeightMode, evaluate_accuracy
from falign.rules import GradientSet, RuleTag


def test_config_validation():
    with pytest.raises(ValueError, match="learning rate"):
        ExperimentConfig(learning_rate=-1).validate()
    with pytest.raises(ValueError, match="angle"):
        ExperimentConfig(angle=4.0).validate()
    with pytest.raises(ValueError, match="layer angles"):
        ExperimentConfig(layer_angles=(0.1,)).validate()


def test_config_round_trips_through_a_dict(tiny_config):
    echoed = json.loads(json.dumps(tiny_config.to_dict()))
    assert echoed["rule"] == "fa"
    assert ExperimentConfig.from_dict(echoed) == tiny_config
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"colour": "red"})


def test_training_log(tiny_config):
    result = train(tiny_config)
    assert [r.step for r in result.metrics] == list(range(1, 9))
    assert [r.epoch for r in result.metrics] == [0] * 4 + [1] * 4
    with_accuracy = [r.step for r in result.metrics if r.test_accuracy is not None]
    assert with_accuracy == [2, 4, 6, 8]
    last = result.metrics[-1]
    assert len(last.gradient_alignment) == 3
    assert len(last.weight_alignment) == 2
    assert len(last.grad_inf_norm) == 3
    assert 0.0 <= result.final_accuracy <= 1.0
    assert len(result.weight_norms) == 3
    assert len(result.initial_weight_alignment) == 2
    assert result.steps_per_epoch == 4


def test_max_steps_caps_the_run(tiny_config):
    result = train(tiny_config.with_(max_steps=3))
    assert [r.step for r in result.metrics] == [1, 2, 3]
    assert result.metrics[-1].test_accuracy is not None


def test_backprop_logs_no_alignment(tiny_config):
    result = train(tiny_config.with_(rule=RuleTag.BP))
    assert all(r.gradient_alignment == (None, None, None) for r in result.metrics)
    assert all(r.weight_alignment == (None, None) for r in result.metrics)


@pytest.mark.parametrize("rule", [RuleTag.FA, RuleTag.DFA, RuleTag.PERTURBED, RuleTag.LAST_LAYER])
def test_reruns_are_byte_identical(tiny_config, tmp_path, rule):
    config = tiny_config.with_(rule=rule, angle=1.0)
    first, _ = write_run(train(config), tmp_path / "a", "run")
    second, _ = write_run(train(config), tmp_path / "b", "run")
    assert first.read_bytes() == second.read_bytes()


def test_manifest(tiny_config, tmp_path):
    result = train(tiny_config)
    metrics_path, manifest_path = write_run(result, tmp_path, "fa-run", fmt="jsonl")
    assert metrics_path.name == "fa-run.jsonl"
    manifest = json.loads(manifest_path.read_text())
    assert manifest["seed"] == 3
    assert manifest["config"]["arch"] == [6, 5, 4, 2]
    assert manifest["build_id"]
    assert manifest["final_test_accuracy"] == result.final_accuracy
    assert manifest["feedback_checksum"] == result.feedback_checksum


def test_divergence_names_the_step(tiny_config):
    trainer = Trainer(tiny_config.with_(rule=RuleTag.BP), load_data(tiny_config))

    class Exploding:
        tag = RuleTag.BP
        feedback = None

        def compute(self, net, trace, onehot):
            return GradientSet(tuple(np.full_like(w, np.nan) for w in net.weights), RuleTag.BP)

    trainer.rule = Exploding()
    with pytest.raises(TrainingDivergedError) as err:
        trainer.run()
    assert err.value.step == 1


def test_large_initial_scale_keeps_the_loss_finite(tiny_config):
    result = train(tiny_config.with_(weight_scale=2000.0, epochs=1))
    assert len(result.metrics) == 4
    assert all(np.isfinite(r.train_loss) for r in result.metrics)


def test_non_finite_logits_report_the_step(tiny_config):
    trainer = Trainer(tiny_config, load_data(tiny_config))
    for epoch, batch in trainer.schedule():
        trainer.step(epoch, batch)
        break
    weights = list(trainer.network.weights)
    weights[-1] = np.full_like(weights[-1], np.inf)
    trainer.network = Network(trainer.arch, tuple(weights))
    with pytest.raises(TrainingDivergedError) as err:
        trainer.run()
    assert err.value.step == 2


def test_architecture_must_fit_the_data(tiny_config):
    with pytest.raises(ValueError):
        Trainer(tiny_config.with_(arch=(6, 5, 3)), load_data(tiny_config))


def test_mnist_without_data_dir(no_data_dir):
    with pytest.raises(DataUnavailableError):
        load_data(ExperimentConfig(dataset=DatasetName.MNIST))


def test_swap_copies_weights(tiny_config):
    result = swap_experiment(tiny_config, swap_step=4, direction=SwapDirection.FA_TO_BP)
    at_swap = result.bp.record_at(4)
    assert at_swap.cross_alignment == pytest.approx((1.0, 1.0, 1.0))
    assert at_swap.test_accuracy is not None
    assert 0.0 <= result.pre_swap_accuracy <= 1.0
    assert result.fa.batch_digest == result.bp.batch_digest


def test_swap_step_must_fall_inside_the_run(tiny_config):
    with pytest.raises(ValueError):
        swap_experiment(tiny_config, swap_step=100, direction=SwapDirection.BP_TO_FA)


def test_init_scale_sweep(tiny_config):
    results = init_scale_sweep(tiny_config, scales=(0.0, 1.0), rule=RuleTag.BP, epochs=1, repetitions=2)
    assert [r.config.weight_scale for r in results] == [0.0, 0.0, 1.0, 1.0]
    assert results[0].config.seed == tiny_config.seed
    assert results[1].config.seed != tiny_config.seed
    # Backprop from all-zero weights never moves.
    assert results[0].first_step_inf_norms == (0.0, 0.0, 0.0)
    rows = scale_sweep_summary(results)
    assert rows[2]["scale"] == 1.0
    assert rows[2]["ginf_first_l3"] > 0.0


def test_angle_sweep_zero_angle_reproduces_backprop(tiny_config):
    sweep = angle_sweep(tiny_config, angles=(0.0, 2.5), repetitions=2, updates=3)
    for perturbed, bp in zip(sweep.perturbed[0.0], sweep.bp):
        assert [r.train_loss for r in perturbed.metrics] == [r.train_loss for r in bp.metrics]
    rows = sweep.summary()
    assert [row["run"] for row in rows] == ["perturbed", "perturbed", "lastlayer", "fa", "bp"]
    assert rows[0]["mean_alignment"] == pytest.approx(1.0)
    assert rows[1]["mean_alignment"] == pytest.approx(np.cos(2.5))
    assert sweep.accuracy_at(2.5) == rows[1]["mean_accuracy"]
    bp_row = rows[-1]
    if bp_row["mean_accuracy"]:
        assert bp_row["relative_accuracy"] == pytest.approx(1.0)


def test_angle_sweep_rejects_repeated_angles(tiny_config):
    with pytest.raises(ValueError, match="distinct"):
        angle_sweep(tiny_config, angles=(1.0, 2.0, 1.0), repetitions=1, updates=1)
    with pytest.raises(ValueError):
        angle_sweep(tiny_config, angles=(), repetitions=1, updates=1)


def test_matched_comparison(tiny_config):
    pairs = matched_perturbation_comparison(tiny_config, updates=2, repetitions=2)
    assert len(pairs) == 2
    for pair in pairs:
        assert len(pair.layer_alignment) == 2
        assert all(-1.0 <= a <= 1.0 for a in pair.layer_alignment)


def test_alignment_forcing_initialisations(tiny_config):
    results = alignment_forcing_experiment(tiny_config, epochs=1)
    assert set(results) == set(WeightMode)
    assert results[WeightMode.EQUAL_TO_FEEDBACK].initial_weight_alignment == pytest.approx((1.0, 1.0))
    assert all(a > 0 for a in results[WeightMode.SIGN_MATCHED].initial_weight_alignment)


def test_write_rows_takes_the_union_of_columns(tmp_path):
    path = write_rows(tmp_path / "rows.csv", [{"a": 1, "b": None}, {"a": 2, "c": 0.5}])
    assert path.read_text().splitlines() == ["a,b,c", "1,,", "2,,0.5"]


@pytest.mark.slow
def test_parallel_fan_out_matches_serial(tiny_config):
    configs = [tiny_config.with_(seed=s) for s in range(3)]
    serial = run_many(configs, jobs=1)
    parallel = run_many(configs, jobs=2)
    assert [r.metrics for r in serial] == [r.metrics for r in parallel]


@pytest.mark.slow
@pytest.mark.parametrize("rule, passes", [(RuleTag.BP, True), (RuleTag.LAST_LAYER, False)])
def test_synthetic_xor_needs_trained_hidden_layers(rule, passes):
    config = ExperimentConfig(
        arch=SYNTHETIC_ARCH,
        rule=rule,
        dataset=DatasetName.SYNTHETIC_XOR,
        learning_rate=0.05,
        batch_size=5,
        weight_scale=0.5,
        epochs=200,
        cadence=10**6,
        instrument=False,
    )
    data = load_data(config)
    result = train(config, data)
    train_accuracy = evaluate_accuracy(result.network, data.train.images, data.train.labels)
    if passes:
        assert train_accuracy >= 0.95
    else:
        assert train_accuracy <= 0.8


@pytest.mark.slow
@pytest.mark.mnist
@pytest.mark.parametrize("rule, floor", [(RuleTag.BP, 0.95), (RuleTag.FA, 0.90)])
def test_standard_mnist_run(rule, floor):
    result = train(ExperimentConfig(rule=rule, epochs=10, cadence=6000))
    assert result.final_accuracy >= floor


@pytest.mark.parametrize("rule", [RuleTag.FA, RuleTag.PERTURBED])
def test_instrumentation_does_not_change_the_trajectory(tiny_config, rule):
    config = tiny_config.with_(rule=rule, angle=0.7)
    on = train(config)
    off = train(config.with_(instrument=False))
    assert [r.train_loss for r in on.metrics] == [r.train_loss for r in off.metrics]
    assert on.weight_norms == off.weight_norms


# Full MNIST reproductions. Each takes from minutes up to an hour or more on
# one core; the sweeps fan out over every available core.
JOBS = os.cpu_count() or 1
ALIGNMENT_ZERO = math.pi / 2
STRONGLY_NEGATIVE = 2.3


@pytest.mark.slow
@pytest.mark.mnist
def test_angle_sweep_brackets_the_last_layer_baseline():
    sweep = angle_sweep(ExperimentConfig(cadence=10**6), angles=(ALIGNMENT_ZERO, STRONGLY_NEGATIVE),
                        repetitions=20, jobs=JOBS)
    last_layer = np.mean([r.final_accuracy for r in sweep.last_layer])
    assert abs(sweep.accuracy_at(ALIGNMENT_ZERO) - last_layer) <= 0.03
    assert abs(sweep.accuracy_at(STRONGLY_NEGATIVE) - 0.1) <= 0.05


@pytest.mark.slow
@pytest.mark.mnist
def test_fa_beats_perturbed_backprop_at_matched_alignment():
    pairs = matched_perturbation_comparison(ExperimentConfig(), updates=5, repetitions=20, jobs=JOBS)
    assert np.mean([p.fa_accuracy for p in pairs]) > np.mean([p.perturbed_accuracy for p in pairs])


@pytest.mark.slow
@pytest.mark.mnist
def test_larger_initial_weights_learn_worse():
    config = ExperimentConfig(rule=RuleTag.FA, cadence=10**6)
    small, large = init_scale_sweep(config, scales=(0.05, 1.0), epochs=5, jobs=JOBS)
    assert small.final_accuracy >= large.final_accuracy

    first_steps = init_scale_sweep(config.with_(max_steps=1), scales=(0.0, 0.5, 1.0, 2.0), jobs=JOBS)
    norms = [r.first_step_inf_norms for r in first_steps]
    # At scale 0 only the input layer receives an update.
    assert norms[0][0] >= norms[1][0]
    for layer in range(len(norms[0]) - 1):
        assert norms[1][layer] >= norms[2][layer] >= norms[3][layer]


@pytest.mark.slow
@pytest.mark.mnist
def test_fa_keeps_copied_backprop_weights():
    result = swap_experiment(ExperimentConfig(epochs=50, cadence=100), direction=SwapDirection.FA_TO_BP)
    after = [r for r in result.bp.metrics if 25000 < r.step <= 30000]
    assert after
    assert all(min(r.cross_alignment) > 0.9 for r in after)


@pytest.mark.slow
@pytest.mark.mnist
def test_fa_leaves_copied_backprop_weights():
    result = swap_experiment(ExperimentConfig(epochs=50, cadence=100), direction=SwapDirection.BP_TO_FA)
    after = [r for r in result.fa.metrics if 25000 < r.step <= 30000]
    assert any(min(r.cross_alignment) < 0.9 for r in after)
    at_swap = result.fa.record_at(25000).test_accuracy
    soon = [r.test_accuracy for r in after if r.step <= 25500 and r.test_accuracy is not None]
    assert at_swap - min(soon) >= 0.02


@pytest.mark.slow
@pytest.mark.mnist
def test_unaligned_start_ends_no_worse_than_feedback_start():
    results = alignment_forcing_experiment(ExperimentConfig(cadence=10**6), epochs=10, jobs=JOBS)
    assert results[WeightMode.NORMAL_SCALED].final_accuracy >= results[WeightMode.EQUAL_TO_FEEDBACK].final_accuracy
