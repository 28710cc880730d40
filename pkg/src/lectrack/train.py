"""Fitting component models: summed cross-entropy at turn ends, ADAM on
minibatches of whole dialogs, early stopping on the development set."""

from __future__ import annotations

import json
import logging
import time
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import GOAL, GROUPS, DialogExample, SlotSchema
from .ensemble import Ensemble, predict_dataset
from .evaluate import MetricsReport, Reference, component_accuracy, score
from .model import ComponentModel, encode_example, tape_forward
from .nncore import Tape, adam_step, clip_grad_norm, save_checkpoint
from .preprocess import (
    AbstractionAssignment,
    AbstractionDict,
    Vocabulary,
    abstract_example,
    build_abstraction_dict,
    build_vocabulary,
    canonical_hash,
    inject_oov,
    label_counts,
    mix_transcriptions,
)

log = logging.getLogger(__name__)

EARLY_STOP_METRICS = ("auto", "goal_acc", "mean_acc", "component_acc")


class DataError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    minibatch_size: int = 10
    alpha_oov: float = 0.1
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    patience: int = 5
    max_epochs: int = 50
    seed: int = 0
    use_scores: bool = True
    use_transcriptions: bool = True
    use_abstraction: bool = True
    abstraction_threshold: int = 40
    max_abstract: int = 8
    early_stop: str = "auto"
    embed_dim: int = 170
    input_dim: int = 300
    hidden: int = 100

    def __post_init__(self):
        if self.minibatch_size < 1:
            raise ValueError("minibatch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0.0 <= self.alpha_oov <= 1.0:
            raise ValueError("alpha_oov must lie in [0, 1]")
        if self.early_stop not in EARLY_STOP_METRICS:
            raise ValueError(f"early_stop must be one of {EARLY_STOP_METRICS}")

    @property
    def hash(self) -> str:
        return canonical_hash(asdict(self))

    def dims(self) -> dict:
        return {
            "embed_dim": self.embed_dim,
            "input_dim": self.input_dim,
            "hidden": self.hidden,
            "use_scores": self.use_scores,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        return cls(**obj)


@dataclass
class EvalSet:
    """Serialized dialogs prepared for tracking, with their references."""

    examples: list[DialogExample]
    assignments: list[AbstractionAssignment | None]
    references: list[Reference]


@dataclass
class TrainingSet:
    examples: list[DialogExample]
    vocab: Vocabulary
    classes: dict[str, list[str]]
    abstraction: AbstractionDict | None


def component_seed(seed: int, component: str, *extra: int) -> list[int]:
    return [seed, zlib.crc32(component.encode("utf-8")), *extra]


def build_training_set(
    asr: Sequence[DialogExample],
    transcript: Sequence[DialogExample],
    schema: SlotSchema,
    config: TrainConfig,
) -> TrainingSet:
    examples = mix_transcriptions(asr, transcript if config.use_transcriptions else [])
    adict = None
    if config.use_abstraction:
        adict = build_abstraction_dict(
            schema, label_counts(asr), config.abstraction_threshold, config.max_abstract
        )
        examples = [abstract_example(ex, adict)[0] for ex in examples]
    vocab = build_vocabulary(examples, adict.components if adict else (), config.max_abstract)
    classes = {
        comp: list(values) + (adict.abstract_classes(comp) if adict else [])
        for comp, values in schema.components
    }
    return TrainingSet(examples, vocab, classes, adict)


def build_eval_set(
    examples: Sequence[DialogExample], references: Sequence[Reference], adict: AbstractionDict | None
) -> EvalSet:
    if adict is None:
        return EvalSet(list(examples), [None] * len(examples), list(references))
    pairs = [abstract_example(ex, adict, use_labels=False) for ex in examples]
    return EvalSet([p[0] for p in pairs], [p[1] for p in pairs], list(references))


def _targets(model: ComponentModel, example: DialogExample) -> tuple[list[int], list[int]]:
    positions = sorted(example.labels)
    index = {c: k for k, c in enumerate(model.classes)}
    targets = []
    for t in positions:
        value = example.labels[t][model.component]
        if value not in index:
            raise DataError(
                f"dialog {example.dialog_id} turn {example.events[t].turn_index}: "
                f"label {value!r} is not a class of {model.component}"
            )
        targets.append(index[value])
    return positions, targets


def record_loss(tape: Tape, model: ComponentModel, example: DialogExample):
    positions, targets = _targets(model, example)
    if not positions:
        return None
    ids, scores = encode_example(example, model.vocab)
    logits = tape_forward(tape, model.dims, ids, scores, positions)
    loss, _ = tape.softmax_cross_entropy(logits, targets)
    return loss


def dialog_loss(model: ComponentModel, example: DialogExample) -> float:
    """Negative log-likelihood of the labels, summed over labeled times."""
    tape = Tape(model.params)
    loss = record_loss(tape, model, example)
    return 0.0 if loss is None else float(loss.value)


def train_epoch(
    model: ComponentModel,
    examples: Sequence[DialogExample],
    config: TrainConfig,
    epoch: int,
) -> float:
    """One pass over ``examples``; returns the mean loss per labeled time."""
    order = np.random.default_rng(component_seed(config.seed, model.component, epoch, 0)).permutation(
        len(examples)
    )
    store = model.params
    store.zero_grad()
    total_loss = 0.0
    total_labels = 0
    for b in range(0, len(order), config.minibatch_size):
        batch = order[b : b + config.minibatch_size]
        n_labels = sum(len(examples[i].labels) for i in batch)
        if n_labels == 0:
            continue
        for i in batch:
            rng = np.random.default_rng(component_seed(config.seed, model.component, epoch, 1, int(i)))
            ex = inject_oov(examples[i], config.alpha_oov, rng)
            tape = Tape(store)
            loss = record_loss(tape, model, ex)
            if loss is None:
                continue
            value = float(loss.value)
            if not np.isfinite(value):
                raise TrainingError(
                    f"{model.component}: non-finite loss on dialog {ex.dialog_id} in epoch {epoch}"
                )
            tape.backward(loss, seed=1.0 / n_labels)
            total_loss += value
        total_labels += n_labels
        if config.clip_norm > 0:
            clip_grad_norm(store, config.clip_norm)
        adam_step(store, config.lr, config.beta1, config.beta2, config.eps)
    return total_loss / total_labels if total_labels else 0.0


@dataclass
class EpochRecord:
    epoch: int
    train_loss: dict[str, float]
    dev: dict
    component_accuracy: dict[str, float]
    early_stop_value: float


@dataclass
class TrainReport:
    config_hash: str
    vocab_hash: str
    components: list[str]
    early_stop_metric: str
    epochs: list[EpochRecord] = field(default_factory=list)
    selected_epoch: int = 0
    checkpoint: str | None = None

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "TrainReport":
        obj = dict(obj)
        obj["epochs"] = [EpochRecord(**e) for e in obj["epochs"]]
        return cls(**obj)


def resolve_early_stop(metric: str, schema: SlotSchema, components: Sequence[str]) -> str:
    has_goal = set(schema.groups[GOAL]) <= set(components)
    if metric == "auto":
        return "goal_acc" if has_goal else "component_acc"
    if metric == "goal_acc" and not has_goal:
        raise ValueError("goal_acc early stopping needs every informable component")
    return metric


def complete_groups(schema: SlotSchema, components: Sequence[str]) -> list[str]:
    have = set(components)
    return [g for g in GROUPS if set(schema.groups[g]) <= have]


def evaluate_models(
    models: dict[str, ComponentModel], dev: EvalSet, schema: SlotSchema
) -> tuple[MetricsReport, dict[str, float]]:
    preds = predict_dataset(Ensemble.single(models), dev.examples, dev.assignments, schema)
    report = score(preds, dev.references, schema, complete_groups(schema, list(models)))
    comp_acc = {c: component_accuracy(preds, dev.references, schema, c) for c in models}
    return report, comp_acc


def _stop_value(metric: str, report: MetricsReport, comp_acc: dict[str, float]) -> float:
    if metric == "goal_acc":
        return report[GOAL].accuracy
    if metric == "mean_acc" and report.groups:
        return float(np.mean([s.accuracy for s in report.groups.values()]))
    return float(np.mean(list(comp_acc.values())))


def init_models(
    training: TrainingSet, components: Sequence[str], config: TrainConfig
) -> dict[str, ComponentModel]:
    return {
        comp: ComponentModel.create(
            comp,
            training.classes[comp],
            training.vocab,
            np.random.default_rng(component_seed(config.seed, comp)),
            **config.dims(),
        )
        for comp in components
    }


def save_models(models: dict[str, ComponentModel], directory: Path, extra: dict) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for comp, model in models.items():
        save_checkpoint(model.params, directory / f"{comp}.ckpt", {**model.manifest(), **extra})


def fit(
    training: TrainingSet,
    dev: EvalSet,
    schema: SlotSchema,
    config: TrainConfig,
    components: Sequence[str] | None = None,
    out_dir: str | Path | None = None,
) -> tuple[TrainReport, dict[str, ComponentModel]]:
    """Train ``components`` in lockstep epochs and keep the best dev epoch.

    Training stops once the early-stop metric has not improved for
    ``config.patience`` epochs, or after ``config.max_epochs``.
    """
    components = list(components or schema.names)
    metric = resolve_early_stop(config.early_stop, schema, components)
    models = init_models(training, components, config)
    report = TrainReport(config.hash, training.vocab.hash, components, metric)
    timing = []
    best_value = -np.inf
    best_models = {c: replace(m, params=m.params.copy()) for c, m in models.items()}
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        start = time.perf_counter()
        losses = {c: train_epoch(m, training.examples, config, epoch) for c, m in models.items()}
        metrics, comp_acc = evaluate_models(models, dev, schema)
        value = _stop_value(metric, metrics, comp_acc)
        report.epochs.append(EpochRecord(epoch, losses, metrics.to_json(), comp_acc, value))
        timing.append(time.perf_counter() - start)
        log.info("epoch %d loss %s %s %.4f", epoch, {c: round(v, 4) for c, v in losses.items()}, metric, value)
        if value > best_value:
            best_value = value
            report.selected_epoch = epoch
            best_models = {c: replace(m, params=m.params.copy()) for c, m in models.items()}
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    if out_dir is not None:
        out = Path(out_dir)
        extra = {"config_hash": config.hash, "selected_epoch": report.selected_epoch}
        save_models(best_models, out / "best", extra)
        save_models(models, out / "last", {**extra, "epoch": len(report.epochs)})
        report.checkpoint = "best"
        (out / "report.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True))
        (out / "timing.json").write_text(json.dumps({"epoch_seconds": timing}, indent=2))
    return report, best_models
