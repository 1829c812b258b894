"""Experiment drivers: plain training, the weight-swap experiment, the
initial-scale sweep, the perturbed-angle sweep and the alignment-forcing
initialisations.

Every run is a pure function of its ``ExperimentConfig``: all randomness is
derived from ``config.seed`` through labelled streams, so a rerun
reproduces the metrics file byte for byte.
"""
import csv
import hashlib
import json
import logging
import math
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Iterator, Optional, Sequence

import numpy as np

from .data import Batch, BatchPlan, Dataset, batches, load_mnist, synthetic_xor
from .instrumentation import (
    MaybeFloat,
    MetricsRecord,
    MetricsWriter,
    cross_run_weight_alignment,
    grad_inf_norms,
    gradient_alignment,
    weight_alignment,
)
from .network import (
    Architecture,
    Network,
    WeightMode,
    cross_entropy_from_logits,
    evaluate_accuracy,
    forward,
    init_weights,
)
from .numerics import NumericError, Rng, ShapeError, derive_seed
from .rules import (
    FeedbackDistribution,
    FeedbackKind,
    FeedbackSet,
    GradientSet,
    RuleTag,
    apply_update,
    build_rule,
    compute_update,
)

logger = logging.getLogger(__name__)

DEFAULT_ARCH = (784, 700, 1000, 10)
SYNTHETIC_ARCH = (784, 8, 8, 2)
# Noise features added to synthetic XOR when the input layer has room.
SYNTHETIC_DISTRACTORS = 24
DEFAULT_SWAP_STEP = 25000
DEFAULT_SWAP_EPOCHS = 50
DEFAULT_SCALE_GRID = (0.0, 0.05, 0.1, 0.25, 0.5, 1.0, 2.0)
DEFAULT_ANGLE_REPETITIONS = 500
# Gradient norms are also reported after this many epochs.
LATE_NORM_EPOCHS = 3


class DatasetName(str, Enum):
    MNIST = "mnist"
    SYNTHETIC_XOR = "synthetic-xor"


class SwapDirection(str, Enum):
    FA_TO_BP = "fa-to-bp"
    BP_TO_FA = "bp-to-fa"


class TrainingDivergedError(NumericError):
    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class ExperimentConfig:
    arch: tuple[int, ...] = DEFAULT_ARCH
    rule: RuleTag = RuleTag.FA
    angle: float = 0.0
    layer_angles: Optional[tuple[float, ...]] = None
    learning_rate: float = 0.05
    batch_size: int = 100
    epochs: int = 10
    weight_scale: float = 0.05
    weight_mode: WeightMode = WeightMode.NORMAL_SCALED
    feedback_distribution: FeedbackDistribution = FeedbackDistribution.RADEMACHER
    seed: int = 0
    cadence: int = 50
    dataset: DatasetName = DatasetName.MNIST
    data_dir: Optional[str] = None
    synthetic_per_class: int = 100
    max_steps: Optional[int] = None
    instrument: bool = True

    def __post_init__(self):
        object.__setattr__(self, "arch", tuple(int(n) for n in self.arch))
        object.__setattr__(self, "rule", RuleTag(self.rule))
        object.__setattr__(self, "weight_mode", WeightMode(self.weight_mode))
        object.__setattr__(self, "feedback_distribution", FeedbackDistribution(self.feedback_distribution))
        object.__setattr__(self, "dataset", DatasetName(self.dataset))
        if self.layer_angles is not None:
            object.__setattr__(self, "layer_angles", tuple(float(a) for a in self.layer_angles))

    def validate(self) -> "ExperimentConfig":
        Architecture(self.arch)
        problems = []
        if not self.learning_rate > 0:
            problems.append(f"learning rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            problems.append(f"batch size must be positive, got {self.batch_size}")
        if self.epochs < 1:
            problems.append(f"epochs must be positive, got {self.epochs}")
        if self.weight_scale < 0:
            problems.append(f"weight scale must be non-negative, got {self.weight_scale}")
        for a in (self.angle,) + (self.layer_angles or ()):
            if not 0.0 <= a <= math.pi:
                problems.append(f"angle must lie in [0, pi], got {a}")
        if self.layer_angles is not None and len(self.layer_angles) != len(self.arch) - 2:
            problems.append(f"need {len(self.arch) - 2} layer angles, got {len(self.layer_angles)}")
        if not 0 <= self.seed < 2**64:
            problems.append(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.cadence < 1:
            problems.append(f"cadence must be positive, got {self.cadence}")
        if self.max_steps is not None and self.max_steps < 1:
            problems.append(f"max steps must be positive, got {self.max_steps}")
        if self.synthetic_per_class < 1:
            problems.append(f"synthetic examples per class must be positive, got {self.synthetic_per_class}")
        if problems:
            raise ValueError("; ".join(problems))
        return self

    def architecture(self) -> Architecture:
        return Architecture(self.arch)

    def with_(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, Enum):
                value = value.value
            elif isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        return out

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)


@dataclass(frozen=True)
class DataSplits:
    train: Dataset
    test: Dataset


def load_data(config: ExperimentConfig) -> DataSplits:
    if config.dataset is DatasetName.SYNTHETIC_XOR:
        n = config.synthetic_per_class
        features = config.arch[0]
        extra = max(0, min(SYNTHETIC_DISTRACTORS, features - 3))
        return DataSplits(
            synthetic_xor(n, Rng(derive_seed(config.seed, "data", "train")), n_features=features, distractors=extra),
            synthetic_xor(n, Rng(derive_seed(config.seed, "data", "test")), n_features=features, distractors=extra),
        )
    train, test = load_mnist(config.data_dir)
    return DataSplits(train, test)


@dataclass
class RunResult:
    config: ExperimentConfig
    metrics: list[MetricsRecord]
    weight_norms: tuple[float, ...]
    wall_clock_seconds: float
    initial_weight_alignment: tuple[MaybeFloat, ...] = ()
    feedback_checksum: str = ""
    batch_digest: str = ""
    steps_per_epoch: int = 0
    network: Optional[Network] = field(default=None, repr=False, compare=False)

    @property
    def final_accuracy(self) -> Optional[float]:
        for record in reversed(self.metrics):
            if record.test_accuracy is not None:
                return record.test_accuracy
        return None

    @property
    def first_step_inf_norms(self) -> tuple[float, ...]:
        return self.metrics[0].grad_inf_norm

    def record_at(self, step: int) -> Optional[MetricsRecord]:
        for record in self.metrics:
            if record.step == step:
                return record
        return None

    def mean_gradient_alignment(self, steps: Optional[int] = None) -> tuple[MaybeFloat, ...]:
        """Per-layer mean of the logged gradient alignment, over the first
        ``steps`` records (all records by default)."""
        records = self.metrics if steps is None else self.metrics[:steps]
        depth = len(self.config.arch) - 1
        means = []
        for layer in range(depth):
            values = [r.gradient_alignment[layer] for r in records
                      if r.gradient_alignment and r.gradient_alignment[layer] is not None]
            means.append(float(np.mean(values)) if values else None)
        return tuple(means)

    def mean_hidden_alignment(self, steps: Optional[int] = None) -> Optional[float]:
        """Mean gradient alignment over the input and hidden layers."""
        lower = [a for a in self.mean_gradient_alignment(steps)[:-1] if a is not None]
        return float(np.mean(lower)) if lower else None

    def stripped(self) -> "RunResult":
        return replace(self, network=None)


@dataclass
class _PendingStep:
    epoch: int
    loss: float
    gradient_alignment: tuple[MaybeFloat, ...]
    grad_inf_norm: tuple[float, ...]


class Trainer:
    """One training run. ``advance``/``record`` are split so that two
    trainers can be stepped in lockstep and their weights exchanged between
    the update and the measurement."""

    def __init__(self, config: ExperimentConfig, data: DataSplits):
        self.config = config.validate()
        self.data = data
        self.arch = config.architecture()
        if self.arch.input_dim != data.train.n_features or self.arch.n_classes != data.train.n_classes:
            raise ShapeError(
                f"architecture {self.arch.layer_sizes} does not fit data with {data.train.n_features} features "
                f"and {data.train.n_classes} classes"
            )
        seed = config.seed
        self.feedback = FeedbackSet.sample(
            FeedbackKind.FA, self.arch, Rng(derive_seed(seed, "feedback")), config.feedback_distribution
        )
        self.network = init_weights(
            self.arch, Rng(derive_seed(seed, "init")), config.weight_scale, config.weight_mode, feedback=self.feedback
        )
        rule_feedback = self.feedback
        if config.rule is RuleTag.DFA:
            rule_feedback = FeedbackSet.sample(
                FeedbackKind.DFA, self.arch, Rng(derive_seed(seed, "feedback", "dfa")), config.feedback_distribution
            )
        self.rule = build_rule(
            config.rule,
            feedback=rule_feedback,
            angle=config.layer_angles if config.layer_angles is not None else config.angle,
            rng=Rng(derive_seed(seed, "perturb")),
        )
        self.plan = BatchPlan(derive_seed(seed, "batches"), config.batch_size)
        self.steps_per_epoch = self.plan.batches_per_epoch(len(data.train))
        self.total_steps = config.epochs * self.steps_per_epoch
        if config.max_steps is not None:
            self.total_steps = min(self.total_steps, config.max_steps)
        self.step_count = 0
        self.metrics: list[MetricsRecord] = []
        self._digest = hashlib.blake2b(digest_size=16)
        self._checksums = (self.feedback.checksum(), rule_feedback.checksum())
        self._tracks_weights = config.instrument and config.rule is RuleTag.FA
        self.initial_weight_alignment = (
            weight_alignment(self.network, self.feedback) if self._tracks_weights else ()
        )

    @property
    def batch_digest(self) -> str:
        return self._digest.hexdigest()

    def schedule(self) -> Iterator[tuple[int, Batch]]:
        step = 0
        for epoch in range(self.config.epochs):
            for batch in batches(self.plan, self.data.train, epoch):
                if step >= self.total_steps:
                    return
                yield epoch, batch
                step += 1

    def evaluate(self) -> float:
        return evaluate_accuracy(self.network, self.data.test.images, self.data.test.labels)

    def advance(self, epoch: int, batch: Batch) -> _PendingStep:
        """Compute the rule's update on this batch and apply it."""
        net = self.network
        depth = self.arch.depth
        step = self.step_count + 1
        try:
            trace = forward(net, batch.inputs)
            loss = cross_entropy_from_logits(trace.preactivations[-1], batch.onehot)
            update: GradientSet = compute_update(self.rule, net, trace, batch.onehot)
            if self.config.instrument and self.rule.tag is not RuleTag.BP:
                ga = gradient_alignment(net, trace, batch.onehot, self.rule, update=update)
            else:
                ga = (None,) * depth
            self.network = apply_update(net, update, self.config.learning_rate)
        except NumericError as e:
            raise TrainingDivergedError(f"training diverged at step {step}: {e}", step) from e
        self.step_count += 1
        self._digest.update(batch.indices.tobytes())
        return _PendingStep(epoch, loss, ga, grad_inf_norms(update))

    def record(self, pending: _PendingStep, cross: tuple[MaybeFloat, ...] = (),
               force_accuracy: bool = False) -> MetricsRecord:
        """Measure the post-update state and log the step."""
        step = self.step_count
        due = force_accuracy or step % self.config.cadence == 0 or step == self.total_steps
        wa = weight_alignment(self.network, self.feedback) if self._tracks_weights else (None,) * (self.arch.depth - 1)
        record = MetricsRecord(
            step=step,
            epoch=pending.epoch,
            train_loss=pending.loss,
            test_accuracy=self.evaluate() if due else None,
            gradient_alignment=pending.gradient_alignment,
            weight_alignment=wa,
            grad_inf_norm=pending.grad_inf_norm,
            cross_alignment=cross,
        )
        self.metrics.append(record)
        if step % self.steps_per_epoch == 0:
            logger.info(f"[{self.config.rule.value}] epoch {pending.epoch + 1} done at step {step}, "
                        f"loss {pending.loss:.4f}")
        elif record.test_accuracy is not None:
            logger.debug(f"[{self.config.rule.value}] step {step}: accuracy {record.test_accuracy:.4f}")
        return record

    def step(self, epoch: int, batch: Batch) -> MetricsRecord:
        return self.record(self.advance(epoch, batch))

    def result(self, wall_clock_seconds: float) -> RunResult:
        checksums = (self.feedback.checksum(), self.rule.feedback.checksum() if self.rule.feedback else self._checksums[1])
        if checksums != self._checksums:
            raise RuntimeError("feedback matrices changed during training")
        return RunResult(
            config=self.config,
            metrics=list(self.metrics),
            weight_norms=self.network.weight_norms(),
            wall_clock_seconds=wall_clock_seconds,
            initial_weight_alignment=self.initial_weight_alignment,
            feedback_checksum=self._checksums[0],
            batch_digest=self.batch_digest,
            steps_per_epoch=self.steps_per_epoch,
            network=self.network,
        )

    def run(self) -> RunResult:
        start = time.perf_counter()
        logger.info(f"Training {self.config.rule.value} on {self.config.dataset.value}: "
                    f"{self.total_steps} steps, seed {self.config.seed}")
        for epoch, batch in self.schedule():
            self.step(epoch, batch)
        result = self.result(time.perf_counter() - start)
        logger.info(f"Finished {self.config.rule.value}: final accuracy {result.final_accuracy}")
        return result


def train(config: ExperimentConfig, data: Optional[DataSplits] = None) -> RunResult:
    return Trainer(config, data or load_data(config)).run()


# Fan-out. Worker processes receive the datasets once through the pool
# initializer, or load them themselves when none were handed over.
_WORKER_DATA: Optional[DataSplits] = None
_WORKER_CACHE: dict[tuple, DataSplits] = {}


def _install_data(data: Optional[DataSplits]) -> None:
    global _WORKER_DATA
    _WORKER_DATA = data


def _data_key(config: ExperimentConfig) -> tuple:
    if config.dataset is DatasetName.SYNTHETIC_XOR:
        return (config.dataset, config.seed, config.synthetic_per_class, config.arch[0])
    return (config.dataset, config.data_dir)


def _train_in_worker(config: ExperimentConfig) -> RunResult:
    data = _WORKER_DATA
    if data is None:
        key = _data_key(config)
        if key not in _WORKER_CACHE:
            _WORKER_CACHE[key] = load_data(config)
        data = _WORKER_CACHE[key]
    return train(config, data).stripped()


def run_many(configs: Sequence[ExperimentConfig], data: Optional[DataSplits] = None, jobs: int = 1) -> list[RunResult]:
    """Run independent configs, optionally in parallel; results keep input order."""
    if jobs <= 1 or len(configs) <= 1:
        _install_data(data)
        try:
            return [_train_in_worker(c) for c in configs]
        finally:
            _install_data(None)
    results: list[Optional[RunResult]] = [None] * len(configs)
    with ProcessPoolExecutor(max_workers=jobs, initializer=_install_data, initargs=(data,)) as pool:
        futures = {pool.submit(_train_in_worker, c): k for k, c in enumerate(configs)}
        for future in as_completed(futures):
            results[futures[future]] = future.result()
    return results  # type: ignore[return-value]


def repetition_seed(seed: int, repetition: int) -> int:
    return seed if repetition == 0 else derive_seed(seed, "repetition", repetition)


def _check_repetitions(repetitions: int) -> None:
    if repetitions < 1:
        raise ValueError(f"repetitions must be positive, got {repetitions}")


@dataclass
class SwapResult:
    fa: RunResult
    bp: RunResult
    swap_step: int
    direction: SwapDirection
    pre_swap_accuracy: float


def swap_experiment(
    config: ExperimentConfig,
    swap_step: int = DEFAULT_SWAP_STEP,
    direction: SwapDirection = SwapDirection.FA_TO_BP,
    data: Optional[DataSplits] = None,
) -> SwapResult:
    """Train FA and BP in lockstep from the same initial weights on the same
    batches; at ``swap_step`` copy one network's weights into the other.

    Args:
        config: Shared settings. The rule field is ignored.
        swap_step: 1-based step after which the weights are copied.
        direction: Which network receives the other's weights.
        data: Preloaded splits; loaded from ``config`` when omitted.

    Returns:
        Both runs with per-step cross-run weight alignment, plus the
        receiving network's accuracy just before the copy.

    Raises:
        ValueError: If ``swap_step`` falls outside the run.
    """
    direction = SwapDirection(direction)
    data = data or load_data(config)
    fa = Trainer(config.with_(rule=RuleTag.FA), data)
    bp = Trainer(config.with_(rule=RuleTag.BP), data)
    if not 1 <= swap_step <= fa.total_steps:
        raise ValueError(f"swap step {swap_step} outside the {fa.total_steps} steps of the run")
    source, target = (fa, bp) if direction is SwapDirection.FA_TO_BP else (bp, fa)
    pre_swap_accuracy = float("nan")
    start = time.perf_counter()
    logger.info(f"Swap experiment {direction.value}: {fa.total_steps} lockstep steps, swap at {swap_step}")
    for epoch, batch in fa.schedule():
        pending_fa = fa.advance(epoch, batch)
        pending_bp = bp.advance(epoch, batch)
        swapping = fa.step_count == swap_step
        if swapping:
            if fa.batch_digest != bp.batch_digest:
                raise RuntimeError("lockstep runs trained on different batch sequences")
            pre_swap_accuracy = target.evaluate()
            target.network = source.network.copy()
            logger.info(f"Copied weights {direction.value} at step {swap_step} "
                        f"(receiver accuracy before copy {pre_swap_accuracy:.4f})")
        cross = cross_run_weight_alignment(fa.network, bp.network)
        fa.record(pending_fa, cross=cross, force_accuracy=swapping)
        bp.record(pending_bp, cross=cross, force_accuracy=swapping)
    elapsed = time.perf_counter() - start
    return SwapResult(fa.result(elapsed), bp.result(elapsed), swap_step, direction, pre_swap_accuracy)


def init_scale_sweep(
    config: ExperimentConfig,
    scales: Sequence[float] = DEFAULT_SCALE_GRID,
    rule: Optional[RuleTag] = None,
    epochs: Optional[int] = None,
    repetitions: int = 1,
    data: Optional[DataSplits] = None,
    jobs: int = 1,
) -> list[RunResult]:
    """One run per (scale, repetition), scale-major. Repetition 0 of every
    scale uses ``config.seed``, so scales differ only in the weight scale."""
    _check_repetitions(repetitions)
    if any(s < 0 for s in scales):
        raise ValueError(f"weight scales must be non-negative, got {list(scales)}")
    base = config.with_(rule=rule or config.rule, epochs=epochs or config.epochs)
    configs = [base.with_(weight_scale=float(s), seed=repetition_seed(config.seed, r))
               for s in scales for r in range(repetitions)]
    return run_many(configs, data, jobs)


def scale_sweep_summary(results: Sequence[RunResult]) -> list[dict[str, Any]]:
    rows = []
    for result in results:
        depth = len(result.config.arch) - 1
        row: dict[str, Any] = {
            "scale": result.config.weight_scale,
            "seed": result.config.seed,
            "final_accuracy": result.final_accuracy,
        }
        for l, v in enumerate(result.first_step_inf_norms, start=1):
            row[f"ginf_first_l{l}"] = v
        late_step = LATE_NORM_EPOCHS * result.steps_per_epoch
        late = result.record_at(late_step)
        for l in range(1, depth + 1):
            row[f"ginf_epoch{LATE_NORM_EPOCHS}_l{l}"] = late.grad_inf_norm[l - 1] if late else None
        rows.append(row)
    return rows


@dataclass
class AngleSweepResult:
    angles: tuple[float, ...]
    perturbed: dict[float, list[RunResult]]
    last_layer: list[RunResult]
    fa: list[RunResult]
    bp: list[RunResult]

    def summary(self) -> list[dict[str, Any]]:
        """Mean accuracy and mean lower-layer gradient alignment per angle and
        per baseline; accuracy is also given relative to the BP mean."""
        bp_mean = _mean([r.final_accuracy for r in self.bp])
        rows = []

        def row(label, angle, runs):
            accs = [r.final_accuracy for r in runs]
            mean_acc = _mean(accs)
            out = {
                "run": label,
                "angle": angle,
                "cos_angle": math.cos(angle) if angle is not None else None,
                "mean_alignment": _mean([r.mean_hidden_alignment() for r in runs]),
                "mean_accuracy": mean_acc,
                "std_accuracy": float(np.std(accs)) if accs else None,
                "relative_accuracy": mean_acc / bp_mean if mean_acc is not None and bp_mean else None,
                "repetitions": len(runs),
            }
            depth = len(runs[0].config.arch) - 1 if runs else 0
            for l in range(1, depth):
                out[f"mean_alignment_l{l}"] = _mean([r.mean_gradient_alignment()[l - 1] for r in runs])
            return out

        for angle in self.angles:
            rows.append(row("perturbed", angle, self.perturbed[angle]))
        rows.append(row("lastlayer", None, self.last_layer))
        rows.append(row("fa", None, self.fa))
        rows.append(row("bp", None, self.bp))
        return rows

    def accuracy_at(self, angle: float) -> Optional[float]:
        return _mean([r.final_accuracy for r in self.perturbed[angle]])


def _mean(values) -> Optional[float]:
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def angle_sweep(
    config: ExperimentConfig,
    angles: Sequence[float],
    epochs: int = 1,
    repetitions: int = DEFAULT_ANGLE_REPETITIONS,
    updates: Optional[int] = None,
    data: Optional[DataSplits] = None,
    jobs: int = 1,
) -> AngleSweepResult:
    """Perturbed-BP runs per angle plus LastLayerOnly, FA and BP baselines.

    Every repetition uses a fresh network (rotated seed) shared by all runs
    of that repetition.

    Args:
        config: Base settings; rule and angle are set per run.
        angles: Distinct perturbation angles in radians, each in [0, pi].
        epochs: Epochs per run.
        repetitions: Number of seeds.
        updates: Caps each run at this many steps when given.
        data: Preloaded splits shared by every run.
        jobs: Worker processes for the fan-out.

    Returns:
        Runs grouped by angle and by baseline rule.
    """
    _check_repetitions(repetitions)
    angles = tuple(float(a) for a in angles)
    if not angles:
        raise ValueError("need at least one angle")
    for a in angles:
        if not 0.0 <= a <= math.pi:
            raise ValueError(f"angle must lie in [0, pi], got {a}")
    if len(set(angles)) != len(angles):
        raise ValueError(f"angles must be distinct, got {list(angles)}")
    base = config.with_(epochs=epochs, max_steps=updates, layer_angles=None)
    seeds = [repetition_seed(config.seed, r) for r in range(repetitions)]
    plan: list[tuple[str, Optional[float], ExperimentConfig]] = []
    for s in seeds:
        for a in angles:
            plan.append(("perturbed", a, base.with_(rule=RuleTag.PERTURBED, angle=a, seed=s)))
        for tag in (RuleTag.LAST_LAYER, RuleTag.FA, RuleTag.BP):
            plan.append((tag.value, None, base.with_(rule=tag, seed=s)))
    results = run_many([c for _, _, c in plan], data, jobs)

    perturbed: dict[float, list[RunResult]] = {a: [] for a in angles}
    baselines: dict[str, list[RunResult]] = {t.value: [] for t in (RuleTag.LAST_LAYER, RuleTag.FA, RuleTag.BP)}
    for (label, angle, _), result in zip(plan, results):
        if label == "perturbed":
            perturbed[angle].append(result)
        else:
            baselines[label].append(result)
    return AngleSweepResult(angles, perturbed, baselines["lastlayer"], baselines["fa"], baselines["bp"])


@dataclass(frozen=True)
class MatchedPair:
    seed: int
    layer_alignment: tuple[float, ...]
    fa_accuracy: float
    perturbed_accuracy: float


def matched_perturbation_comparison(
    config: ExperimentConfig,
    updates: int = 5,
    repetitions: int = DEFAULT_ANGLE_REPETITIONS,
    data: Optional[DataSplits] = None,
    jobs: int = 1,
) -> list[MatchedPair]:
    """FA against perturbed BP at the same per-layer gradient alignment.

    Each repetition trains FA for ``updates`` steps, measures its mean
    gradient alignment per lower layer, then trains perturbed BP from the same
    initial state with angles arccos(alignment) per layer.

    Returns:
        One pair per repetition. Layers whose FA alignment is undefined
        are matched at alignment 0.
    """
    _check_repetitions(repetitions)
    seeds = [repetition_seed(config.seed, r) for r in range(repetitions)]
    base = config.with_(epochs=1, max_steps=updates, layer_angles=None)
    fa_runs = run_many([base.with_(rule=RuleTag.FA, seed=s) for s in seeds], data, jobs)
    matched = []
    perturbed_configs = []
    for s, run in zip(seeds, fa_runs):
        lower = tuple(a if a is not None else 0.0 for a in run.mean_gradient_alignment()[:-1])
        matched.append(lower)
        angles = tuple(math.acos(min(1.0, max(-1.0, a))) for a in lower)
        perturbed_configs.append(base.with_(rule=RuleTag.PERTURBED, layer_angles=angles, seed=s))
    perturbed_runs = run_many(perturbed_configs, data, jobs)
    return [
        MatchedPair(s, lower, fa.final_accuracy, pb.final_accuracy)
        for s, lower, fa, pb in zip(seeds, matched, fa_runs, perturbed_runs)
    ]


def alignment_forcing_experiment(
    config: ExperimentConfig,
    epochs: int = 10,
    data: Optional[DataSplits] = None,
    jobs: int = 1,
) -> dict[WeightMode, RunResult]:
    """Three FA runs that differ only in how the initial weights relate to
    the (normally distributed) feedback matrices: random, sign-matched and
    equal."""
    base = config.with_(rule=RuleTag.FA, epochs=epochs, feedback_distribution=FeedbackDistribution.NORMAL)
    modes = (WeightMode.NORMAL_SCALED, WeightMode.SIGN_MATCHED, WeightMode.EQUAL_TO_FEEDBACK)
    results = run_many([base.with_(weight_mode=m) for m in modes], data, jobs)
    return dict(zip(modes, results))


def build_id() -> str:
    """Git revision of the source tree, or a hash of the package sources."""
    package_dir = Path(__file__).resolve().parent
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short=12", "HEAD"],
            cwd=package_dir, capture_output=True, text=True, timeout=5, check=True,
        )
        return f"git-{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        h = hashlib.sha256()
        for path in sorted(package_dir.glob("*.py")):
            h.update(path.read_bytes())
        return f"src-{h.hexdigest()[:12]}"


def write_run(result: RunResult, out_dir: str | Path, name: str, fmt: str = "csv") -> tuple[Path, Path]:
    """Write the metrics file and a JSON manifest for one run."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    depth = len(result.config.arch) - 1
    cross = any(r.cross_alignment for r in result.metrics)
    metrics_path = out_dir / f"{name}.{fmt}"
    with MetricsWriter(metrics_path, depth, fmt=fmt, cross=cross) as writer:
        writer.write_all(result.metrics)
    manifest = {
        "name": name,
        "config": result.config.to_dict(),
        "seed": result.config.seed,
        "build_id": build_id(),
        "wall_clock_seconds": result.wall_clock_seconds,
        "steps": len(result.metrics),
        "final_test_accuracy": result.final_accuracy,
        "weight_norms": list(result.weight_norms),
        "initial_weight_alignment": list(result.initial_weight_alignment),
        "feedback_checksum": result.feedback_checksum,
        "batch_digest": result.batch_digest,
    }
    manifest_path = out_dir / f"{name}.manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    logger.info(f"Wrote {metrics_path} and {manifest_path}")
    return metrics_path, manifest_path


def write_rows(path: str | Path, rows: Sequence[dict[str, Any]]) -> Path:
    """Write summary rows as CSV; the header is the union of keys in order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns: list[str] = []
    for row in rows:
        columns += [k for k in row if k not in columns]
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in columns})
    logger.info(f"Wrote {path}")
    return path
