from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import typing
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import pandas as pd
import yaml
from colorama import Fore
from tqdm import tqdm

import imc_io
import metrics
import synthgen
import trainer
import viz
import xmethods

logger = logging.getLogger(__name__)

VERSION = "0.1.0"
STAGES = ("data", "patchify", "train", "evaluate", "explain", "render", "report")
ALL_METHODS = tuple(m.value for m in xmethods.MethodName)
ALL_LABEL = "All Channels"


class ConfigError(Exception):
    pass


class StageError(Exception):
    pass


@dataclass(frozen=True)
class SyntheticConfig:
    n_control: int = 4
    n_patient: int = 10
    seed: int = 0
    tissue: dict = field(default_factory=dict)


@dataclass(frozen=True)
class IngestConfig:
    paths: tuple = ()
    channel_map: str | None = None
    mode: str = "strict"


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    ingest: IngestConfig = field(default_factory=IngestConfig)


@dataclass(frozen=True)
class PreprocessingConfig:
    patch_size: int = 256
    stride: int | None = None
    edge_policy: str = "drop"
    normalization: str = "percentile_clip(1,99)"
    split_ratios: tuple = (0.8, 0.1, 0.1)
    group_by_subject: bool = True
    split_seed: int = 0


@dataclass(frozen=True)
class TrainingConfig:
    backbones: tuple = ("smallcnn",)
    channels: tuple = ("ALL", *imc_io.CANONICAL_CHANNELS)
    seeds: tuple = (0, 1)
    init: str = "random"
    learning_rate: float = 0.001
    early_stop_patience: int = 200
    max_epochs: int = 50
    batch_size: int = 8
    replicate_to_rgb: bool = False
    smallcnn_bias: bool = True
    smallcnn_pool: str = "max"


@dataclass(frozen=True)
class ExplanationConfig:
    methods: tuple = ALL_METHODS
    top_k: int = 5
    epsilon: float = xmethods.DEFAULT_EPSILON
    patches_per_class: int = 1
    map_norm: str = "symmetric_percentile"
    percentile: float = 99.0
    colormap: str = "diverging"
    overlay_display: str = "percentile"
    gutters: bool = True
    membrane_channel: str = "Dystrophin"
    mito_channel: str = "VDAC1"
    check_gradients: bool = False


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    preprocessing: PreprocessingConfig = field(default_factory=PreprocessingConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    explanation: ExplanationConfig = field(default_factory=ExplanationConfig)
    output_dir: str = "runs/desk"

    def to_dict(self):
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def checksum(self):
        return _digest(self.to_dict())

    def train_config(self, backbone, channel, seed):
        t = self.training
        return trainer.TrainConfig(
            backbone=backbone,
            init=t.init,
            learning_rate=t.learning_rate,
            early_stop_patience=t.early_stop_patience,
            max_epochs=t.max_epochs,
            batch_size=t.batch_size,
            seed=seed,
            channel_selection=trainer.ALL_CHANNELS if channel == "ALL" else (channel,),
            replicate_to_rgb=t.replicate_to_rgb,
            smallcnn_bias=t.smallcnn_bias,
            smallcnn_pool=t.smallcnn_pool,
        )


def _digest(values):
    return hashlib.sha256(json.dumps(values, sort_keys=True).encode()).hexdigest()


def file_checksum(path):
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def config_leaves(cls=RunConfig, prefix=""):
    """Yields (dotted path, field, leaf default) for every non-section field of the config tree."""
    hints = typing.get_type_hints(cls)
    for f in dataclasses.fields(cls):
        path = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(hints[f.name]):
            yield from config_leaves(hints[f.name], f"{path}.")
        else:
            default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
            yield path, f, default


def _build(cls, values, prefix=""):
    if not isinstance(values, dict):
        raise ConfigError(f"Section {prefix.rstrip('.') or '<root>'} must be a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"Unknown config keys: {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in values:
            continue
        value = values[f.name]
        if dataclasses.is_dataclass(hints[f.name]):
            kwargs[f.name] = _build(hints[f.name], value or {}, f"{prefix}{f.name}.")
        elif isinstance(f.default, tuple):
            if isinstance(value, str):
                value = [yaml.safe_load(v.strip()) for v in value.split(",") if v.strip()]
            if not isinstance(value, (list, tuple)):
                value = [value]
            kwargs[f.name] = tuple(value)
        else:
            kwargs[f.name] = value
    return cls(**kwargs)


def _set_dotted(values, dotted, raw):
    keys = dotted.replace("-", "_").split(".")
    node = values
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"Cannot override {dotted}: {key} is not a section")
    node[keys[-1]] = yaml.safe_load(raw) if isinstance(raw, str) else raw


def load_config(path=None, overrides=None):
    """
    Reads a YAML run config and applies dotted overrides such as
    {"training.max-epochs": "30"}; values are parsed as YAML scalars.

    Raises:
        ConfigError: For unreadable files, unknown keys or invalid values.
    """
    values = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as f:
                values = yaml.safe_load(f) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"Cannot read config {path}: {e}") from e
    for dotted, raw in (overrides or {}).items():
        _set_dotted(values, dotted, raw)
    try:
        config = _build(RunConfig, values)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    validate_config(config)
    return config


def validate_config(config):
    data, prep, training, expl = config.data, config.preprocessing, config.training, config.explanation
    if data.source not in ("synthetic", "ingest"):
        raise ConfigError(f"data.source must be synthetic or ingest, got {data.source!r}")
    if data.source == "ingest" and not data.ingest.paths:
        raise ConfigError("data.ingest.paths must list at least one stack file")
    try:
        imc_io.ChannelMode(data.ingest.mode)
        imc_io.EdgePolicy(prep.edge_policy)
        imc_io.Normalization.parse(prep.normalization)
        tissue = synthgen.TissueParams.from_dict(data.synthetic.tissue)
        for backbone in training.backbones:
            for channel in training.channels:
                config.train_config(backbone, channel, training.seeds[0] if training.seeds else 0)
        for method in expl.methods:
            xmethods.MethodName(method)
        viz.MapNorm(expl.map_norm)
        viz.Colormap(expl.colormap)
        viz.DisplayNorm(expl.overlay_display)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    if len(prep.split_ratios) != 3 or abs(sum(prep.split_ratios) - 1.0) > 1e-9:
        raise ConfigError(f"preprocessing.split_ratios must be three fractions summing to 1, got {prep.split_ratios}")
    if prep.patch_size < 1 or (prep.stride is not None and prep.stride < 1):
        raise ConfigError("preprocessing.patch_size and stride must be >= 1")
    if len(training.seeds) < 2:
        raise ConfigError("training.seeds needs at least two seeds to aggregate accuracy")
    if not training.backbones or not training.channels:
        raise ConfigError("training.backbones and training.channels must be non-empty")
    known = tissue.channels if data.source == "synthetic" else imc_io.CANONICAL_CHANNELS
    unknown = [c for c in training.channels if c != "ALL" and c not in known]
    if unknown:
        raise ConfigError(f"training.channels names unknown channels: {', '.join(unknown)}")
    single = len(training.backbones) * sum(c != "ALL" for c in training.channels)
    if expl.methods and not 0 <= expl.top_k <= single:
        raise ConfigError(f"explanation.top_k = {expl.top_k} exceeds the {single} single-channel models")
    if expl.patches_per_class < 1:
        raise ConfigError("explanation.patches_per_class must be >= 1")


@dataclass
class StageRecord:
    key: str
    status: str
    artifacts: dict
    started: str
    finished: str | None = None
    message: str = ""


@dataclass
class RunManifest:
    config_checksum: str
    software_version: str = VERSION
    stages: dict = field(default_factory=dict)
    path: Path | None = None

    @property
    def root(self):
        return self.path.parent

    def save(self):
        record = {
            "config_checksum": self.config_checksum,
            "software_version": self.software_version,
            "stages": {
                name: dataclasses.asdict(self.stages[name]) for name in STAGES if name in self.stages
            },
        }
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", encoding="utf-8") as f:
            yaml.safe_dump(record, f, sort_keys=False)

    @classmethod
    def load(cls, path):
        path = Path(path)
        with open(path, encoding="utf-8") as f:
            record = yaml.safe_load(f)
        return cls(
            config_checksum=record["config_checksum"],
            software_version=record["software_version"],
            stages={name: StageRecord(**values) for name, values in (record.get("stages") or {}).items()},
            path=path,
        )

    def completed(self, name):
        record = self.stages.get(name)
        return record is not None and record.status == "complete"

    def verify(self, names=None):
        """Returns the relative paths of recorded artifacts that are missing or changed on disk."""
        bad = []
        for name in names or list(self.stages):
            record = self.stages.get(name)
            if record is None:
                continue
            for relative, checksum in record.artifacts.items():
                target = self.root / relative
                if not target.exists() or file_checksum(target) != checksum:
                    bad.append(relative)
        return bad


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _model_tag(backbone, channel, seed):
    return f"{backbone}__{'all' if channel == 'ALL' else channel}__seed{seed}"


def _channel_label(channel):
    return ALL_LABEL if channel in ("ALL", "all") else channel


class ExperimentRunner:
    """
    Runs the pipeline stages in order under one output directory.

    Each stage reads its inputs from disk and records the checksums of what
    it writes. A stage whose key (its config section plus everything
    upstream) matches a completed manifest entry with intact artifacts is
    skipped.
    """

    def __init__(self, config, progress_callback=None):
        self.config = config
        self.progress_callback = progress_callback
        self.root = Path(config.output_dir)
        manifest_path = self.root / "run_manifest.yaml"
        if manifest_path.exists():
            self.manifest = RunManifest.load(manifest_path)
            self.manifest.config_checksum = config.checksum()
        else:
            self.manifest = RunManifest(config_checksum=config.checksum(), path=manifest_path)
        self.skipped = []

    def _section(self, name):
        sections = {
            "data": self.config.data,
            "patchify": self.config.preprocessing,
            "train": self.config.training,
            "explain": self.config.explanation,
            "render": self.config.explanation,
        }
        section = sections.get(name)
        return dataclasses.asdict(section) if section is not None else {}

    def _stage_key(self, name, upstream):
        section = json.loads(json.dumps(self._section(name)))
        return _digest({"stage": name, "version": VERSION, "config": section, "upstream": upstream})

    def run(self, until="report"):
        if until not in STAGES:
            raise ConfigError(f"Unknown stage {until!r}")
        upstream = None
        for name in STAGES[: STAGES.index(until) + 1]:
            key = self._stage_key(name, upstream)
            if self.manifest.completed(name) and self.manifest.stages[name].key == key and not self.manifest.verify([name]):
                logger.info("Stage %s unchanged, skipping", name)
                self.skipped.append(name)
            else:
                self._run_stage(name, key)
            record = self.manifest.stages[name]
            upstream = _digest({"key": record.key, "artifacts": record.artifacts})
        return self.manifest

    def _run_stage(self, name, key):
        logger.info("Running stage %s", name)
        record = StageRecord(key=key, status="running", artifacts={}, started=_now())
        self.manifest.stages[name] = record
        # Downstream records are stale once an upstream stage reruns.
        for later in STAGES[STAGES.index(name) + 1 :]:
            self.manifest.stages.pop(later, None)
        try:
            paths = getattr(self, f"_stage_{name}")()
        except Exception as e:
            record.status = "failed"
            record.finished = _now()
            record.message = f"{type(e).__name__}: {e}"
            self.manifest.save()
            raise StageError(f"Stage {name} failed: {e}") from e
        record.artifacts = {
            str(Path(p).relative_to(self.root).as_posix()): file_checksum(p) for p in sorted(paths)
        }
        record.status = "complete"
        record.finished = _now()
        self.manifest.save()

    def _progress(self, items, describe):
        """Yields items while reporting progress through a bar or the callback."""
        items = list(items)
        if self.progress_callback is None:
            with tqdm(
                total=len(items),
                bar_format="{l_bar}%s{bar}%s{r_bar}" % (Fore.CYAN, Fore.RESET),
                ascii=False,
                dynamic_ncols=True,
            ) as pbar:
                for item in items:
                    pbar.set_description(describe(item))
                    yield item
                    pbar.update(1)
        else:
            for index, item in enumerate(items):
                message = f"{describe(item)} ({index + 1} of {len(items)}, {(index + 1) / len(items) * 100:.1f}%)"
                self.progress_callback(message, index)
                yield item

    @property
    def stacks_dir(self):
        return self.root / "data" / "stacks"

    @property
    def truth_dir(self):
        return self.root / "data" / "ground_truth"

    @property
    def patches_dir(self):
        return self.root / "patches"

    def _stage_data(self):
        for old in list(self.stacks_dir.glob("*")) + list(self.truth_dir.glob("*")):
            old.unlink()
        paths = []
        data = self.config.data
        if data.source == "synthetic":
            params = synthgen.TissueParams.from_dict(data.synthetic.tissue)
            cohort = synthgen.generate_cohort(params, data.synthetic.n_control, data.synthetic.n_patient, data.synthetic.seed)
            for stack, truth in cohort:
                path = self.stacks_dir / f"{stack.subject_id}.ome.tif"
                imc_io.write_stack(stack, path)
                synthgen.save_ground_truth(truth, params, self.truth_dir, stack.subject_id)
                paths.append(path)
        else:
            channel_map = None
            if data.ingest.channel_map:
                with open(data.ingest.channel_map, encoding="utf-8") as f:
                    channel_map = yaml.safe_load(f)
            for source in data.ingest.paths:
                stack = imc_io.load_stack(source, channel_map, data.ingest.mode)
                path = self.stacks_dir / f"{stack.subject_id}.ome.tif"
                imc_io.write_stack(stack, path)
                paths.append(path)
        logger.info("Wrote %d stacks", len(paths))
        return list(self.stacks_dir.glob("*")) + list(self.truth_dir.glob("*"))

    def _stack_paths(self):
        return sorted(self.stacks_dir.glob("*.ome.tif"))

    def _stage_patchify(self):
        prep = self.config.preprocessing
        for old in self.patches_dir.glob("*"):
            old.unlink()
        patches = []
        policy = imc_io.Normalization.parse(prep.normalization)
        for path in self._stack_paths():
            stack = imc_io.load_stack(path, mode=imc_io.ChannelMode.PERMISSIVE)
            names = [c for c in imc_io.CANONICAL_CHANNELS if c in stack.channels]
            names += [c for c in stack.channel_names if c not in names]
            for patch in imc_io.patchify(stack, names, prep.patch_size, prep.stride, prep.edge_policy):
                patches.append(imc_io.normalize_patch(patch, policy))
        if not patches:
            raise StageError(f"No {prep.patch_size}px patches fit the stacks in {self.stacks_dir}")
        imc_io.save_patches(patches, self.patches_dir)
        split = imc_io.split_dataset(patches, prep.split_ratios, prep.split_seed, prep.group_by_subject)
        split.assignments().to_csv(self.patches_dir / "split.csv", index=False)
        return list(self.patches_dir.glob("*"))

    def load_split(self):
        patches = {p.patch_id: p for p in imc_io.load_patches(self.patches_dir)}
        assignments = pd.read_csv(self.patches_dir / "split.csv", dtype={"patch_id": str})
        parts = {name: [] for name in imc_io.PARTITIONS}
        for row in assignments.itertuples(index=False):
            parts[row.partition].append(patches[row.patch_id])
        prep = self.config.preprocessing
        return imc_io.DatasetSplit(
            train=parts["train"],
            validation=parts["validation"],
            test=parts["test"],
            ratios=tuple(prep.split_ratios),
            seed=prep.split_seed,
            group_by_subject=prep.group_by_subject,
        )

    def _matrix(self):
        t = self.config.training
        return [(b, c, s) for b in t.backbones for c in t.channels for s in t.seeds]

    def _stage_train(self):
        split = self.load_split()
        paths = []
        for backbone, channel, seed in self._matrix():
            config = self.config.train_config(backbone, channel, seed)
            names = config.resolve_channels(split.train[0].channel_names)
            model = trainer.build_model(config, len(names))
            logger.info("Training %s", _model_tag(backbone, channel, seed))
            trained = trainer.train(model, split, config, progress_callback=self.progress_callback)
            directory = self.root / "models" / _model_tag(backbone, channel, seed)
            trainer.save_trained_model(trained, directory)
            paths += [p for p in directory.glob("*")]
        return paths

    def _test_patches(self, split, trained):
        return [imc_io.select_channels(p, trained.channel_names) for p in split.test]

    def _stage_evaluate(self):
        split = self.load_split()
        rows = []
        for backbone, channel, seed in self._matrix():
            trained = trainer.load_trained_model(self.root / "models" / _model_tag(backbone, channel, seed))
            test = self._test_patches(split, trained)
            scores = trainer.predict_many(trained, test)
            cm = metrics.confusion([s.predicted_class for s in scores], [p.class_label for p in test])
            report = metrics.classification_report(cm, seed=seed)
            rows.append({"backbone": backbone, "channel": _channel_label(channel), **report.to_dict()})
        per_run = pd.DataFrame(rows)
        out = self.root / "evaluation"
        out.mkdir(parents=True, exist_ok=True)
        per_run.to_csv(out / "per_run_metrics.csv", index=False)

        dataset = "Synthetic cohort" if self.config.data.source == "synthetic" else "All Patients"
        groups = []
        for (backbone, channel), group in per_run.groupby(["backbone", "channel"], sort=False):
            accuracies = [100.0 * a for a in group.sort_values("seed")["test_accuracy"]]
            groups.append((backbone, dataset, channel, accuracies))
        table = metrics.rank_models(groups)
        table.to_frame().to_csv(out / "ranking.csv", index=False)

        means = per_run.groupby(["backbone", "channel"], sort=False).mean(numeric_only=True).reset_index()
        means["label"] = means["backbone"] + " / " + means["channel"]
        standard = means[["backbone", "channel", "label", "test_accuracy", "macro_precision", "macro_recall", "macro_f1"]]
        patient = means[["backbone", "channel", "label", "test_accuracy", "patient_precision", "patient_recall", "patient_f1"]]
        standard.to_csv(out / "standard_metrics.csv", index=False)
        patient.to_csv(out / "patient_metrics.csv", index=False)
        viz.plot_metric_agreement(standard, list(standard.columns[3:]), out / "standard_metrics.png", "Standard metrics")
        viz.plot_metric_agreement(patient, list(patient.columns[3:]), out / "patient_metrics.png", "Patient class metrics")
        return list(out.glob("*"))

    def select_models(self):
        """Top-k single-channel (backbone, channel) groups by mean accuracy, each with its best seed."""
        ranking = pd.read_csv(self.root / "evaluation" / "ranking.csv")
        per_run = pd.read_csv(self.root / "evaluation" / "per_run_metrics.csv")
        single = ranking[ranking["channel"] != ALL_LABEL].head(self.config.explanation.top_k)
        chosen = []
        for row in single.itertuples(index=False):
            runs = per_run[(per_run["backbone"] == row.model) & (per_run["channel"] == row.channel)]
            best = runs.sort_values(["test_accuracy", "seed"], ascending=[False, True]).iloc[0]
            chosen.append((row.model, row.channel, int(best["seed"])))
        return chosen

    def sample_patches(self, split):
        """The lowest-index test patches of each class, in patch-store order."""
        order = {p.patch_id: i for i, p in enumerate(imc_io.load_patches(self.patches_dir))}
        test = sorted(split.test, key=lambda p: order[p.patch_id])
        per_class = self.config.explanation.patches_per_class
        sampled = []
        for label in imc_io.ClassLabel:
            sampled += [p for p in test if p.class_label is label][:per_class]
        return sampled

    def _stage_explain(self):
        expl = self.config.explanation
        out = self.root / "explanations"
        for old in out.glob("*"):
            old.unlink()
        out.mkdir(parents=True, exist_ok=True)
        split = self.load_split()
        sampled = self.sample_patches(split)
        jobs = []
        for backbone, channel, seed in self.select_models():
            trained = trainer.load_trained_model(self.root / "models" / _model_tag(backbone, channel, seed))
            for patch in sampled:
                for method in expl.methods:
                    jobs.append((backbone, channel, seed, trained, patch, xmethods.MethodName(method)))

        rows = []
        regions = []
        for backbone, channel, seed, trained, patch, method in self._progress(
            jobs, lambda job: f"Explaining {job[4].patch_id} with {job[5]}"
        ):
            stem = f"{_model_tag(backbone, channel, seed)}__{patch.patch_id}__{method}"
            selected = imc_io.select_channels(patch, trained.channel_names)
            row = {
                "stem": stem,
                "backbone": backbone,
                "channel": channel,
                "seed": seed,
                "patch_id": patch.patch_id,
                "subject": patch.source_subject,
                "label": str(patch.class_label),
                "row": patch.origin[0],
                "col": patch.origin[1],
                "method": method.value,
            }
            try:
                relevance = xmethods.explain(trained, selected, method, epsilon=expl.epsilon)
            except xmethods.ExplanationError as e:
                logger.warning("%s: %s", stem, e)
                rows.append({**row, "status": f"error: {e}"})
                continue
            xmethods.save_relevance_map(relevance, out, stem, trained.weights_checksum())
            row.update(
                status="ok",
                target_class=relevance.target_class,
                target_score=relevance.target_score,
                conservation_residual=np.nan if method.is_signal else xmethods.conservation_residual(relevance),
            )
            if expl.check_gradients and method is xmethods.MethodName.GRADIENTS:
                estimate = xmethods.finite_difference_gradient(trained, selected, relevance.target_class, sample=32)
                row["fd_max_abs_error"] = float(np.nanmax(np.abs(estimate - relevance.values)))
                logger.info("%s: finite-difference max abs error %.3g", stem, row["fd_max_abs_error"])
            rows.append(row)
            truth_file = self.truth_dir / f"{patch.source_subject}.truth.yaml"
            if truth_file.exists():
                truth, _ = synthgen.load_ground_truth(self.truth_dir, patch.source_subject)
                frame = metrics.region_relevance(relevance, truth, patch.origin)
                frame.insert(0, "stem", stem)
                regions.append(frame)

        columns = [
            "stem", "backbone", "channel", "seed", "patch_id", "subject", "label", "row", "col", "method",
            "status", "target_class", "target_score", "conservation_residual",
        ]
        frame = pd.DataFrame(rows)
        frame = frame.reindex(columns=columns + [c for c in frame.columns if c not in columns])
        frame.to_csv(out / "explanations.csv", index=False)
        if regions:
            pd.concat(regions, ignore_index=True).to_csv(out / "relevance_regions.csv", index=False)
        return list(out.glob("*"))

    def _stage_render(self):
        expl = self.config.explanation
        out = self.root / "figures"
        for old in out.glob("*"):
            old.unlink()
        out.mkdir(parents=True, exist_ok=True)
        explanations = pd.read_csv(self.root / "explanations" / "explanations.csv", dtype={"subject": str})
        done = explanations[explanations["status"] == "ok"]
        patches = {p.patch_id: p for p in imc_io.load_patches(self.patches_dir)}
        stacks = {}
        rows = []
        for row in self._progress(list(done.itertuples(index=False)), lambda r: f"Rendering {r.stem}"):
            relevance = xmethods.load_relevance_map(self.root / "explanations", row.stem)
            if row.subject not in stacks:
                stacks[row.subject] = imc_io.load_stack(
                    self.stacks_dir / f"{row.subject}.ome.tif", mode=imc_io.ChannelMode.PERMISSIVE
                )
            stack = stacks[row.subject]
            size = relevance.values.shape[0]
            membrane = _window(stack, expl.membrane_channel, row.row, row.col, size)
            mito = _window(stack, expl.mito_channel, row.row, row.col, size)
            signal = relevance.method.is_signal
            overlay = viz.render_overlay(
                membrane,
                mito,
                None if signal else relevance,
                viz.OverlayMode.SIGNAL if signal else viz.OverlayMode.ATTRIBUTION,
                expl.overlay_display,
            )
            selected = imc_io.select_channels(patches[row.patch_id], [row.channel])
            image = viz.render_triptych(
                viz.render_input(selected.data),
                overlay,
                viz.render_map(relevance, expl.map_norm, expl.colormap, expl.percentile),
                gutters=expl.gutters,
            )
            path = viz.save_png(image, out / f"{row.stem}.png")
            rows.append(
                {
                    "stem": row.stem,
                    "subject": row.subject,
                    "row": row.row,
                    "col": row.col,
                    "channel": row.channel,
                    "method": row.method,
                    "seed": row.seed,
                    "backbone": row.backbone,
                    "path": path.relative_to(self.root).as_posix(),
                }
            )
        pd.DataFrame(rows, columns=["stem", "subject", "row", "col", "channel", "method", "seed", "backbone", "path"]).to_csv(
            out / "renders.csv", index=False
        )
        return list(out.glob("*"))

    def _stage_report(self):
        path = self.root / "report.md"
        path.write_text(report(self.manifest), encoding="utf-8")
        return [path]


def _window(stack, channel, row, col, size):
    if channel not in stack.channels:
        raise StageError(f"Stack {stack.subject_id} has no {channel} channel for the overlay")
    grid = stack.channels[channel][row : row + size, col : col + size]
    return np.pad(grid, ((0, size - grid.shape[0]), (0, size - grid.shape[1])))


def _markdown_table(frame, float_format="{:.4f}"):
    header = "| " + " | ".join(frame.columns) + " |"
    lines = [header, "|" + "---|" * len(frame.columns)]
    for record in frame.itertuples(index=False):
        cells = [float_format.format(v) if isinstance(v, float) else str(v) for v in record]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def _ranking_from_frame(frame):
    seed_columns = [c for c in frame.columns if c.startswith("ta_")]
    rows = [
        metrics.RankingRow(
            r["model"], r["dataset"], r["channel"], tuple(r[c] for c in seed_columns), r["mean_ta"], r["sd_ta"], r["var_ta"]
        )
        for _, r in frame.iterrows()
    ]
    return metrics.RankingTable(rows)


def render_report(root, config_checksum=""):
    """
    Builds the markdown report from the CSVs under a run directory.

    Sections whose inputs are missing are replaced by a note saying so. The
    body holds no timestamps, so equal runs give equal reports.
    """
    root = Path(root)
    evaluation = root / "evaluation"
    lines = ["# Experiment report", ""]
    if config_checksum:
        lines += [f"Config checksum: `{config_checksum}`", ""]

    lines += ["## Model ranking", ""]
    if (evaluation / "ranking.csv").exists():
        table = _ranking_from_frame(pd.read_csv(evaluation / "ranking.csv"))
        lines += ["Ordered by mean test accuracy over seeds.", "", table.to_markdown()]
    else:
        lines += ["_Not available: the evaluate stage has not completed._", ""]

    for title, name, image in (
        ("Standard metrics", "standard_metrics.csv", "standard_metrics.png"),
        ("Patient class metrics", "patient_metrics.csv", "patient_metrics.png"),
    ):
        lines += [f"## {title}", ""]
        if (evaluation / name).exists():
            frame = pd.read_csv(evaluation / name).drop(columns=["label"])
            lines += [_markdown_table(frame), f"![{title}](evaluation/{image})", ""]
        else:
            lines += ["_Not available: the evaluate stage has not completed._", ""]

    lines += ["## Explanations", ""]
    renders = root / "figures" / "renders.csv"
    frame = pd.read_csv(renders) if renders.exists() else None
    if frame is None:
        lines += ["_No figures: the render stage has not completed._", ""]
    elif frame.empty:
        lines += ["_No figures: the explanation stage produced no maps._", ""]
    else:
        for record in frame.itertuples(index=False):
            lines.append(f"- [{record.stem}]({record.path})")
        lines.append("")
    return "\n".join(lines)


def report(manifest):
    """The markdown report for the run directory a manifest belongs to."""
    return render_report(manifest.root, manifest.config_checksum)


def run_experiment(config, until="report", progress_callback=None):
    """Runs every stage up to `until` and returns the manifest; raises StageError on failure."""
    return ExperimentRunner(config, progress_callback).run(until)
