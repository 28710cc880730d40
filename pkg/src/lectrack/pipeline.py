"""On-disk artifacts: prepared datasets, trained runs and ensembles."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from .corpus import DialogExample, SlotSchema, load_dataset, load_ontology, serialize_dialog
from .ensemble import Ensemble, read_manifest, write_manifest
from .evaluate import Reference, references_from_raw
from .model import ComponentModel, ModelDims
from .nncore import load_checkpoint
from .preprocess import (
    AbstractionDict,
    Vocabulary,
    build_abstraction_dict,
    build_vocabulary,
    canonical_hash,
    label_counts,
)
from .train import EvalSet, TrainConfig, TrainingSet, build_eval_set, build_training_set

PREPARED_VERSION = 1
SPLITS = ("train", "dev", "test")


class ArtifactError(Exception):
    """Inconsistent or missing on-disk artifacts."""


@dataclass
class RunConfig:
    data_root: str
    ontology: str
    flists: dict[str, str]
    out_dir: str = "runs"
    train: TrainConfig = field(default_factory=TrainConfig)
    ensemble_size: int = 10
    components: list[str] | str = "all"
    score_transform: str = "clamp"
    workers: int = 1

    @classmethod
    def from_json(cls, obj: dict, base: Path | None = None) -> "RunConfig":
        obj = dict(obj)
        unknown = set(obj) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if base is not None:
            for key in ("data_root", "ontology", "out_dir"):
                if key in obj:
                    obj[key] = str((base / obj[key]).resolve()) if not Path(obj[key]).is_absolute() else obj[key]
            obj["flists"] = {
                k: str((base / v).resolve()) if not Path(v).is_absolute() else v for k, v in obj["flists"].items()
            }
        obj["train"] = TrainConfig.from_json(obj.get("train", {}))
        return cls(**obj)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        return cls.from_json(json.loads(path.read_text()), path.parent)

    def to_json(self) -> dict:
        obj = asdict(self)
        obj["train"] = asdict(self.train)
        return obj

    def component_list(self, schema: SlotSchema) -> list[str]:
        if self.components == "all":
            return schema.names
        comps = [self.components] if isinstance(self.components, str) else list(self.components)
        unknown = set(comps) - set(schema.names)
        if unknown:
            raise ValueError(f"unknown components {sorted(unknown)}")
        return comps


@dataclass
class Split:
    asr: list[DialogExample]
    transcript: list[DialogExample]
    references: list[Reference]


@dataclass
class PreparedData:
    schema: SlotSchema
    abstraction: AbstractionDict
    vocab: Vocabulary
    splits: dict[str, Split]
    fingerprint: str = ""

    def training_set(self, config: TrainConfig) -> TrainingSet:
        train = self.splits["train"]
        return build_training_set(train.asr, train.transcript, self.schema, config)

    def eval_set(self, split: str, adict: AbstractionDict | None) -> EvalSet:
        s = self.splits[split]
        return build_eval_set(s.asr, s.references, adict)


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def prepare(config: RunConfig) -> PreparedData:
    schema = load_ontology(config.ontology)
    splits = {}
    for name in SPLITS:
        if name not in config.flists:
            continue
        raws, _ = load_dataset(config.data_root, config.flists[name], config.ontology)
        asr = [serialize_dialog(r, "asr_1best", schema, config.score_transform) for r in raws]
        transcript = [serialize_dialog(r, "transcript", schema) for r in raws] if name == "train" else []
        splits[name] = Split(asr, transcript, references_from_raw(raws, schema))
    if "train" not in splits:
        raise ArtifactError("config has no train flist")
    t = config.train
    train = splits["train"]
    adict = build_abstraction_dict(schema, label_counts(train.asr), t.abstraction_threshold, t.max_abstract)
    vocab = build_vocabulary(train.asr + train.transcript, adict.components, t.max_abstract)
    return PreparedData(schema, adict, vocab, splits)


def _write_jsonl(path: Path, rows) -> None:
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")


def _read_jsonl(path: Path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def save_prepared(data: PreparedData, directory: str | Path) -> dict:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {
        "schema.json": data.schema.to_json(),
        "abstraction.json": data.abstraction.to_json(),
        "vocab.json": data.vocab.to_json(),
    }
    for name, obj in files.items():
        (d / name).write_text(json.dumps(obj, indent=1, sort_keys=True))
    for split, s in data.splits.items():
        _write_jsonl(d / f"{split}.asr.jsonl", (e.to_json() for e in s.asr))
        _write_jsonl(d / f"{split}.transcript.jsonl", (e.to_json() for e in s.transcript))
        _write_jsonl(d / f"{split}.refs.jsonl", (asdict(r) for r in s.references))
    manifest = {
        "version": PREPARED_VERSION,
        "splits": {k: len(v.asr) for k, v in data.splits.items()},
        "vocab_size": len(data.vocab),
        "vocab_hash": data.vocab.hash,
        "files": {p.name: file_sha256(p) for p in sorted(d.iterdir()) if p.name != "manifest.json"},
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    data.fingerprint = canonical_hash(manifest)
    return manifest


def load_prepared(directory: str | Path) -> PreparedData:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except (OSError, ValueError) as exc:
        raise ArtifactError(f"no prepared data in {d}: {exc}") from exc
    if manifest.get("version") != PREPARED_VERSION:
        raise ArtifactError(f"unsupported prepared-data version {manifest.get('version')}")
    for name, digest in manifest.get("files", {}).items():
        if not (d / name).exists() or file_sha256(d / name) != digest:
            raise ArtifactError(f"{d / name} is missing or differs from the prepared-data manifest")
    schema = SlotSchema.from_json(json.loads((d / "schema.json").read_text()))
    adict = AbstractionDict.from_json(json.loads((d / "abstraction.json").read_text()))
    vocab = Vocabulary.from_json(json.loads((d / "vocab.json").read_text()))
    splits = {}
    for split in manifest["splits"]:
        splits[split] = Split(
            [DialogExample.from_json(o) for o in _read_jsonl(d / f"{split}.asr.jsonl")],
            [DialogExample.from_json(o) for o in _read_jsonl(d / f"{split}.transcript.jsonl")],
            [Reference(**o) for o in _read_jsonl(d / f"{split}.refs.jsonl")],
        )
    return PreparedData(schema, adict, vocab, splits, canonical_hash(manifest))


# trained runs


def write_run_metadata(
    directory: Path, training: TrainingSet, config: TrainConfig, schema: SlotSchema, data_fingerprint: str
) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "schema.json").write_text(json.dumps(schema.to_json(), indent=1, sort_keys=True))
    (directory / "vocab.json").write_text(json.dumps(training.vocab.to_json(), indent=1, sort_keys=True))
    adict = training.abstraction.to_json() if training.abstraction else None
    (directory / "abstraction.json").write_text(json.dumps(adict, indent=1, sort_keys=True))
    (directory / "train_config.json").write_text(json.dumps(asdict(config), indent=2, sort_keys=True))
    (directory / "data.json").write_text(json.dumps({"fingerprint": data_fingerprint}, indent=2))


@dataclass
class LoadedRun:
    ensemble: Ensemble
    schema: SlotSchema
    vocab: Vocabulary
    abstraction: AbstractionDict | None
    config: TrainConfig
    data_fingerprint: str


def _load_model(path: Path, vocab: Vocabulary) -> ComponentModel:
    store, manifest = load_checkpoint(path)
    if manifest.get("vocab_hash") != vocab.hash:
        raise ArtifactError(f"{path}: vocabulary hash does not match the run's vocabulary")
    dims = ModelDims(**manifest["dims"])
    return ComponentModel(manifest["component"], list(manifest["classes"]), dims, store, vocab)


def _load_run_metadata(directory: Path) -> tuple[SlotSchema, Vocabulary, AbstractionDict | None, TrainConfig, str]:
    try:
        schema = SlotSchema.from_json(json.loads((directory / "schema.json").read_text()))
        vocab = Vocabulary.from_json(json.loads((directory / "vocab.json").read_text()))
        adict_obj = json.loads((directory / "abstraction.json").read_text())
        config = TrainConfig.from_json(json.loads((directory / "train_config.json").read_text()))
        fingerprint = json.loads((directory / "data.json").read_text())["fingerprint"]
    except (OSError, ValueError, KeyError) as exc:
        raise ArtifactError(f"{directory}: incomplete run: {exc}") from exc
    adict = AbstractionDict.from_json(adict_obj) if adict_obj else None
    return schema, vocab, adict, config, fingerprint


def load_run(directory: str | Path, which: str = "best") -> LoadedRun:
    """Load a single trained run (``train``) or an ensemble directory."""
    d = Path(directory)
    schema, vocab, adict, config, fingerprint = _load_run_metadata(d)
    if (d / "ensemble.json").exists():
        members = {}
        for comp, entries in read_manifest(d / "ensemble.json").items():
            models = []
            for entry in entries:
                path = d / entry["checkpoint"]
                if file_sha256(path) != entry["sha256"]:
                    raise ArtifactError(f"{path}: checkpoint hash differs from ensemble manifest")
                models.append(_load_model(path, vocab))
            members[comp] = models
        return LoadedRun(Ensemble(members), schema, vocab, adict, config, fingerprint)
    ckpts = sorted((d / which).glob("*.ckpt"))
    if not ckpts:
        raise ArtifactError(f"no checkpoints in {d / which}")
    models = {}
    for path in ckpts:
        m = _load_model(path, vocab)
        models[m.component] = m
    return LoadedRun(Ensemble.single(models), schema, vocab, adict, config, fingerprint)


def write_ensemble(directory: Path, member_dirs: Sequence[Path], components: Sequence[str]) -> None:
    entries = {
        comp: [
            {
                "checkpoint": str((m / "best" / f"{comp}.ckpt").relative_to(directory)),
                "sha256": file_sha256(m / "best" / f"{comp}.ckpt"),
            }
            for m in member_dirs
        ]
        for comp in components
    }
    write_manifest(directory / "ensemble.json", entries)
