"""End-to-end evaluation: embeddings (or audio) + trials + metadata -> report.

The report is plain JSON with sorted keys. It embeds every group's score
lists, so each metric in it can be recomputed from the report alone.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from .calibration import CalibrationReport, GroupKey, GroupThresholdTable, calibrate_groups, compare_single_vs_adaptive
from .embedding_model import ModelConfig, ParameterSet, embed, init_params
from .errors import AdaptiveSVError, ConfigError, DataError
from .features import FeatureConfig, featurize, read_wav
from .formats import (
    EmbeddingStore,
    join_groups,
    parse_metadata,
    parse_trials,
    read_arrays,
    read_bytes,
    read_embeddings,
    read_text,
)
from .plotting import emit_plot
from .scoring import DcfParams, ScoreSet, det_sweep, eer, min_dcf, score_trials

__all__ = ["ExperimentSpec", "GroupMetrics", "Report", "run_experiment", "embed_audio", "recompute", "ALL_GROUP"]

ALL_GROUP = GroupKey("all", "all")


@dataclass(frozen=True)
class ExperimentSpec:
    """Inputs and settings of one evaluation run.

    Exactly one of ``embeddings`` (EMB1 file) and ``audio_dir`` (directory
    of ``<utterance_id>.wav`` files) must be set. Without ``metadata`` every
    trial belongs to the single group ``all:all``.
    """

    trials: str | Path
    embeddings: str | Path | None = None
    audio_dir: str | Path | None = None
    metadata: str | Path | None = None
    far_targets: tuple[float, ...] = (0.01,)
    dimension: str = "gender"
    dcf: tuple[DcfParams, ...] = (DcfParams(0.05), DcfParams(0.01))
    output_dir: str | Path | None = None
    seed: int = 0
    model_config: ModelConfig | None = None
    feature_config: FeatureConfig = field(default_factory=FeatureConfig)
    params: str | Path | None = None
    speaker_pattern: str | None = None
    on_unknown: str = "fail"

    def __post_init__(self):
        object.__setattr__(self, "far_targets", tuple(float(f) for f in self.far_targets))
        object.__setattr__(self, "dcf", tuple(self.dcf))
        if not str(self.trials):
            raise ConfigError("trials path is required")
        if (self.embeddings is None) == (self.audio_dir is None):
            raise ConfigError("give exactly one of embeddings and audio_dir")
        if not self.far_targets:
            raise ConfigError("at least one FAR target is required")
        for f in self.far_targets:
            if not 0.0 < f <= 1.0:
                raise ConfigError(f"FAR target must lie in (0, 1], got {f}")
        if self.on_unknown not in ("fail", "skip"):
            raise ConfigError(f"on_unknown must be 'fail' or 'skip', got {self.on_unknown!r}")
        if self.speaker_pattern is not None:
            try:
                re.compile(self.speaker_pattern)
            except re.error as exc:
                raise ConfigError(f"invalid speaker pattern: {exc}") from exc


@dataclass(frozen=True)
class GroupMetrics:
    n_target: int
    n_nontarget: int
    eer: float
    eet: float
    min_dcf: tuple[tuple[DcfParams, float], ...]

    def to_dict(self) -> dict:
        return {
            "n_target": self.n_target,
            "n_nontarget": self.n_nontarget,
            "eer": self.eer,
            "eet": self.eet,
            "min_dcf": [
                {"p_target": p.p_target, "c_miss": p.c_miss, "c_fa": p.c_fa, "normalized": p.normalize, "value": v}
                for p, v in self.min_dcf
            ],
        }


def group_metrics(scores: ScoreSet, dcf) -> GroupMetrics:
    rate, threshold = eer(scores)
    return GroupMetrics(
        scores.target.size,
        scores.nontarget.size,
        rate,
        threshold,
        tuple((p, min_dcf(scores, p)) for p in dcf),
    )


@dataclass(frozen=True)
class Report:
    inputs: dict
    dropped_trials: int
    pooled: GroupMetrics
    groups: dict  # GroupKey -> GroupMetrics
    calibrations: tuple[CalibrationReport, ...]
    scores: dict  # GroupKey -> ScoreSet
    det_curves: dict  # GroupKey -> DetCurve

    @property
    def tables(self) -> tuple[GroupThresholdTable, ...]:
        return tuple(c.table for c in self.calibrations)

    def to_dict(self) -> dict:
        return {
            "inputs": self.inputs,
            "dropped_trials": self.dropped_trials,
            "metrics": {
                "pooled": self.pooled.to_dict(),
                "groups": {str(k): m.to_dict() for k, m in sorted(self.groups.items())},
            },
            "calibration": [{"table": c.table.to_dict(), "comparison": c.to_dict()} for c in self.calibrations],
            "scores": {
                str(k): {"target": s.target.tolist(), "nontarget": s.nontarget.tolist()}
                for k, s in sorted(self.scores.items())
            },
            "det_curves": {
                str(k): {"threshold": c.thresholds.tolist(), "far": c.far.tolist(), "frr": c.frr.tolist()}
                for k, c in sorted(self.det_curves.items())
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"

    def write(self, output_dir) -> list[Path]:
        """Write report.json, one DET CSV per group and det.svg; return the paths."""
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = [out / "report.json"]
        written[0].write_text(self.to_json(), encoding="utf-8")
        for key, curve in sorted(self.det_curves.items()):
            path = out / f"det_{_slug(str(key))}.csv"
            path.write_text(curve.to_csv(), encoding="utf-8")
            written.append(path)
        svg = out / "det.svg"
        svg.write_text(emit_plot({str(k): c for k, c in sorted(self.det_curves.items())}, title="FAR / FRR vs threshold"))
        written.append(svg)
        return written


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", text)


@contextlib.contextmanager
def _stage(name: str):
    """Prefix errors raised inside the block with the pipeline stage."""
    try:
        yield
    except AdaptiveSVError as exc:
        if exc.args and isinstance(exc.args[0], str) and not exc.args[0].startswith("["):
            exc.args = (f"[{name}] {exc.args[0]}",) + exc.args[1:]
        raise


def _digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def embed_audio(ids, audio_dir, model_config: ModelConfig, params: ParameterSet, feature_config=FeatureConfig()):
    """Featurize and embed ``<audio_dir>/<id>.wav`` for every id, in the given order."""
    store = EmbeddingStore(provenance=model_config.digest())
    hasher = hashlib.sha256()
    for utt in ids:
        path = Path(audio_dir) / f"{utt}.wav"
        raw = read_bytes(path)
        hasher.update(utt.encode() + b"\0" + raw)
        with _stage("featurize"):
            feats = featurize(read_wav(raw), feature_config, utterance_id=utt)
        with _stage("embed"):
            store.add(utt, embed(feats, params, model_config))
    return store, hasher.hexdigest()


def run_experiment(spec: ExperimentSpec) -> Report:
    """Score, sweep, calibrate and compare; deterministic given ``spec``."""
    inputs = {"seed": spec.seed, "dimension": spec.dimension, "far_targets": list(spec.far_targets)}
    with _stage("load"):
        trials_text = read_text(spec.trials)
        trials = parse_trials(trials_text)
        if not trials:
            raise DataError("trial list is empty")
        inputs["trials_sha256"] = _digest(trials_text.encode("utf-8"))
        inputs["n_trials"] = len(trials)
        metadata = None
        if spec.metadata is not None:
            meta_text = read_text(spec.metadata)
            metadata = parse_metadata(meta_text)
            inputs["metadata_sha256"] = _digest(meta_text.encode("utf-8"))

    if spec.embeddings is not None:
        with _stage("load"):
            raw = read_bytes(spec.embeddings)
            store = read_embeddings(raw)
            inputs["embeddings_sha256"] = _digest(raw)
    else:
        config = spec.model_config or ModelConfig()
        with _stage("load"):
            if spec.params is not None:
                params = ParameterSet(read_arrays(read_bytes(spec.params)))
            else:
                params = init_params(config, spec.seed)
        ids = sorted({i for t in trials for i in (t.enroll_id, t.test_id)})
        store, audio_digest = embed_audio(ids, spec.audio_dir, config, params, spec.feature_config)
        inputs["audio_sha256"] = audio_digest
        inputs["model_config_digest"] = config.digest()
    inputs["embedding_dim"] = store.dim

    dropped = 0
    with _stage("group"):
        if metadata is not None:
            trials, dropped = join_groups(trials, metadata, spec.dimension, spec.speaker_pattern, spec.on_unknown)
            if not trials:
                raise DataError("no trials left after joining metadata")
            dimension = spec.dimension
        else:
            dimension = ALL_GROUP.dimension
            trials = [t.__class__(t.target, t.enroll_id, t.test_id, ALL_GROUP.value) for t in trials]

    with _stage("score"):
        by_group = score_trials(trials, store, by_group=True)
        scores = {GroupKey(dimension, g): ScoreSet(s.target, s.nontarget, str(GroupKey(dimension, g))) for g, s in by_group.items()}
        pooled = ScoreSet(
            [x for s in scores.values() for x in s.target], [x for s in scores.values() for x in s.nontarget], "pooled"
        )

    with _stage("metrics"):
        pooled_metrics = group_metrics(pooled, spec.dcf)
        metrics, curves = {}, {}
        for key, s in scores.items():
            s.require_both(f"metrics for group {key}")
            metrics[key] = group_metrics(s, spec.dcf)
            curves[key] = det_sweep(s)

    calibrations = []
    for far_target in spec.far_targets:
        with _stage("calibrate"):
            table = calibrate_groups(scores, far_target, dimension)
        with _stage("compare"):
            calibrations.append(compare_single_vs_adaptive(table))

    report = Report(inputs, dropped, pooled_metrics, metrics, tuple(calibrations), scores, curves)
    if spec.output_dir is not None:
        with _stage("write"):
            try:
                report.write(spec.output_dir)
            except OSError as exc:
                raise DataError(f"cannot write to {spec.output_dir}: {exc}") from exc
    return report


def recompute(report_dict: dict, dcf=None) -> dict:
    """EER, EET and minDCF of every group recomputed from a report's score lists."""
    out = {}
    for key, s in report_dict["scores"].items():
        entries = report_dict["metrics"]["groups"][key]["min_dcf"]
        params = dcf or tuple(DcfParams(e["p_target"], e["c_miss"], e["c_fa"], e["normalized"]) for e in entries)
        m = group_metrics(ScoreSet(s["target"], s["nontarget"]), params)
        out[key] = m.to_dict()
    return out
