"""Command-line interface: one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import GroupThresholdTable
from .detector import DetectorConfig, DetectorParams, LabeledEmbeddingSet, accuracy, detector_forward, train_detector
from .embedding_model import ModelConfig, ParameterSet, count_macs, count_params, embed, init_params
from .errors import AdaptiveSVError, ConfigError, DataError, InvariantError
from .experiment import ExperimentSpec, recompute, run_experiment
from .features import FeatureConfig, featurize, read_wav
from .formats import (
    EmbeddingStore,
    format_labels,
    parse_labels,
    parse_trials,
    read_arrays,
    read_bytes,
    read_embeddings,
    read_kv,
    read_text,
    write_arrays,
    write_embeddings,
    write_kv,
)
from .plotting import emit_plot
from .scoring import DcfParams, ScoreSet, cosine_similarity, eer, min_dcf

__all__ = ["main", "build_parser"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _load_configs(path):
    """ModelConfig and FeatureConfig from a key/value file.

    Keys prefixed ``feature.`` go to the feature configuration.
    """
    if path is None:
        return ModelConfig(), FeatureConfig()
    values = read_kv(read_text(path))
    feature = {k[len("feature.") :]: v for k, v in values.items() if k.startswith("feature.")}
    model = {k: v for k, v in values.items() if not k.startswith("feature.")}
    try:
        return ModelConfig.from_dict(model), FeatureConfig(**feature)
    except TypeError as exc:
        raise ConfigError(f"bad config file {path}: {exc}") from exc


def _out(args, name) -> Path:
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out / name


def _write(path: Path, content):
    if isinstance(content, bytes):
        path.write_bytes(content)
    else:
        path.write_text(content, encoding="utf-8")
    print(f"wrote {path}")


def _params(args, config):
    if args.params:
        return ParameterSet(read_arrays(read_bytes(args.params)))
    return init_params(config, args.seed)


def _dcf(args):
    return tuple(DcfParams(p) for p in args.p_target)


def cmd_featurize(args):
    _, fconfig = _load_configs(args.config)
    arrays = {}
    for wav in args.wav:
        utt = Path(wav).stem
        arrays[utt] = featurize(read_wav(read_bytes(wav)), fconfig, utterance_id=utt).frames
    _write(_out(args, "features.arr"), write_arrays(arrays))


def cmd_embed(args):
    config, fconfig = _load_configs(args.config)
    params = _params(args, config)
    store = EmbeddingStore(provenance=config.digest())
    if args.features:
        for utt, frames in read_arrays(read_bytes(args.features)).items():
            store.add(utt, embed(frames, params, config, utt))
    for wav in args.wav:
        utt = Path(wav).stem
        store.add(utt, embed(featurize(read_wav(read_bytes(wav)), fconfig, utt), params, config))
    if not len(store):
        raise ConfigError("give --features or at least one WAV file")
    _write(_out(args, "embeddings.emb1"), write_embeddings(store))


def cmd_score(args):
    trials = parse_trials(read_text(args.trials))
    store = read_embeddings(read_bytes(args.embeddings))
    lines, target, nontarget = [], [], []
    for t in trials:
        for utt in (t.enroll_id, t.test_id):
            if utt not in store:
                raise DataError(f"unresolved id: {utt!r}")
        s = cosine_similarity(store[t.enroll_id], store[t.test_id])
        (target if t.target else nontarget).append(s)
        lines.append(f"{int(t.target)} {t.enroll_id} {t.test_id} {s!r}\n")
    _write(_out(args, "scores.txt"), "".join(lines))
    scores = ScoreSet(target, nontarget)
    if target and nontarget:
        rate, threshold = eer(scores)
        print(f"EER {100 * rate:.3f}% at threshold {threshold:.4f}")
        for p in _dcf(args):
            print(f"minDCF(p_target={p.p_target}) {min_dcf(scores, p):.4f}")


def _spec(args, **overrides):
    config, fconfig = _load_configs(args.config)
    kw = dict(
        trials=args.trials,
        embeddings=args.embeddings,
        audio_dir=getattr(args, "audio_dir", None),
        metadata=args.metadata,
        far_targets=tuple(args.far_target),
        dimension=args.dimension,
        dcf=_dcf(args),
        seed=args.seed,
        model_config=config,
        feature_config=fconfig,
        params=getattr(args, "params", None),
        speaker_pattern=args.speaker_pattern,
        on_unknown=args.on_unknown,
    )
    kw.update(overrides)
    return ExperimentSpec(**kw)


def _print_metrics(report):
    for key, m in sorted(report.groups.items()):
        dcf = " ".join(f"minDCF@{p.p_target}={v:.4f}" for p, v in m.min_dcf)
        print(f"{key}: n={m.n_target}/{m.n_nontarget} EER={100 * m.eer:.3f}% EET={m.eet:.4f} {dcf}")


def cmd_sweep(args):
    report = run_experiment(_spec(args))
    _print_metrics(report)
    for key, curve in sorted(report.det_curves.items()):
        _write(_out(args, f"det_{key.dimension}_{key.value}.csv"), curve.to_csv())
    _write(_out(args, "det.svg"), emit_plot({str(k): c for k, c in sorted(report.det_curves.items())}))
    metrics = report.to_dict()["metrics"]
    _write(_out(args, "metrics.json"), json.dumps(metrics, indent=2, sort_keys=True) + "\n")


def cmd_calibrate(args):
    report = run_experiment(_spec(args))
    for cal in report.calibrations:
        table = cal.table
        print(f"FAR target {table.far_target}: single threshold {table.single_threshold:.4f}")
        for g in cal.groups:
            inc = "n/a" if g.increase_pct is None else f"{g.increase_pct:.1f}%"
            red = "n/a" if g.reduction_pct is None else f"{g.reduction_pct:.1f}%"
            print(
                f"  {g.key}: threshold {g.threshold:.4f} FRR {g.frr_adaptive:.4f} (single {g.frr_single:.4f},"
                f" increase {inc}, reduction {red})"
            )
        name = f"thresholds_far{table.far_target:g}.json"
        _write(_out(args, name), json.dumps(table.to_dict(), indent=2, sort_keys=True) + "\n")


def _labeled(emb_path, labels_path, class_names=None, split="train"):
    store = read_embeddings(read_bytes(emb_path))
    labels = parse_labels(read_text(labels_path))
    ids = [u for u in store if u in labels]
    if not ids:
        raise DataError("no embedding has a label")
    if class_names is None:
        class_names = tuple(sorted(set(labels[u] for u in ids)))
    index = {c: i for i, c in enumerate(class_names)}
    unknown = sorted({labels[u] for u in ids} - set(index))
    if unknown:
        raise DataError(f"labels not among classes {list(class_names)}: {unknown}")
    x = np.stack([store[u].astype(np.float64) for u in ids])
    return LabeledEmbeddingSet(x, [index[labels[u]] for u in ids], ids, tuple(class_names), split)


def cmd_train_detector(args):
    classes = tuple(args.classes) if args.classes else None
    train = _labeled(args.embeddings, args.labels, classes)
    config = DetectorConfig(
        input_dim=train.embeddings.shape[1],
        hidden=tuple(args.hidden),
        n_classes=len(train.class_names),
        activation=args.activation,
        learning_rate=args.learning_rate,
        batch_size=args.batch_size,
        epochs=args.epochs,
        seed=args.seed,
        class_weighting=args.class_weighting,
        class_names=train.class_names,
        dimension=args.dimension,
    )
    params, history = train_detector(train, config)
    print(f"final training loss {history[-1]:.6f}; training accuracy {accuracy(params, train):.4f}")
    if args.test_embeddings and args.test_labels:
        test = _labeled(args.test_embeddings, args.test_labels, train.class_names, "test")
        print(f"test accuracy {accuracy(params, test):.4f}")
    _write(_out(args, "detector.arr"), write_arrays(params.to_arrays()))
    meta = {"activation": params.activation, "class_names": list(params.class_names), "dimension": params.dimension}
    _write(_out(args, "detector.cfg"), write_kv(meta))


def _load_detector(prefix) -> DetectorParams:
    prefix = Path(prefix)
    arrays = read_arrays(read_bytes(prefix.with_suffix(".arr")))
    meta = read_kv(read_text(prefix.with_suffix(".cfg")))
    try:
        return DetectorParams.from_arrays(arrays, meta["activation"], tuple(meta["class_names"]), meta["dimension"])
    except KeyError as exc:
        raise ConfigError(f"detector config lacks {exc}") from exc


def cmd_detect(args):
    params = _load_detector(args.detector)
    store = read_embeddings(read_bytes(args.embeddings))
    if not len(store):
        raise DataError("no embeddings to classify")
    probs = detector_forward(store.matrix(), params)
    labels = {u: params.class_names[int(np.argmax(p))] for u, p in zip(store, probs)}
    _write(_out(args, "detected.csv"), format_labels(labels))


def cmd_run(args):
    report = run_experiment(_spec(args, output_dir=args.output_dir))
    _print_metrics(report)
    for cal in report.calibrations:
        print(f"FAR target {cal.table.far_target}: single threshold {cal.table.single_threshold:.4f}")
        for g in cal.groups:
            print(f"  {g.key}: threshold {g.threshold:.4f} FRR {g.frr_adaptive:.4f} vs {g.frr_single:.4f}")
    print(f"wrote {Path(args.output_dir) / 'report.json'}")


def cmd_param_count(args):
    config, _ = _load_configs(args.config)
    print(f"parameters (without classification head): {count_params(config):,}")
    print(f"parameters (with AM-Softmax head, {config.n_classes} classes): {count_params(config, include_head=True):,}")
    print(f"multiply-accumulates for {args.frames} frames: {count_macs(config, args.frames):,}")


def cmd_selftest(args):
    """Synthetic two-group run: ordering, dominance, recomputability, determinism, EMB1 round trip."""
    from .synthetic import write_cohort

    failures = []

    def check(name, ok):
        print(f"{'PASS' if ok else 'FAIL'} {name}")
        if not ok:
            failures.append(name)

    with tempfile.TemporaryDirectory() as tmp:
        trials, emb, meta = write_cohort(tmp, column="group", seed=args.seed)
        spec = ExperimentSpec(trials, embeddings=emb, metadata=meta, dimension="group", seed=args.seed)
        first, second = run_experiment(spec), run_experiment(spec)
        table = first.tables[0]
        a, b = (table.row(k) for k in sorted(first.scores))
        check("threshold of the shifted group is higher", b.threshold > a.threshold)
        check("adaptive FRR <= single FRR", all(r.frr <= r.frr_at_single for r in table.rows))
        check("FAR target met per group", all(r.far <= table.far_target for r in table.rows))
        d = json.loads(first.to_json())
        check("report metrics recomputable", recompute(d) == d["metrics"]["groups"])
        check("report deterministic", first.to_json() == second.to_json())
        raw = read_bytes(emb)
        check("EMB1 round trip", write_embeddings(read_embeddings(raw)) == raw)
        check("table JSON round trip", GroupThresholdTable.from_dict(table.to_dict()) == table)
    if failures:
        raise InvariantError(f"selftest failed: {', '.join(failures)}")


def _experiment_args(p, audio=False):
    p.add_argument("--trials", required=True, help="trial list: 'label enroll_id test_id' per line")
    if audio:
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--embeddings", help="EMB1 embedding file")
        src.add_argument("--audio-dir", help="directory of <utterance_id>.wav files")
        p.add_argument("--params", help="model parameters (named-array file); default: seeded initialization")
    else:
        p.add_argument("--embeddings", required=True, help="EMB1 embedding file")
    p.add_argument("--metadata", help="speaker metadata CSV (speaker_id,<dimension>,...)")
    p.add_argument("--dimension", default="gender", help="metadata column used for grouping")
    p.add_argument("--far-target", type=float, action="append", help="FAR target(s); repeatable (default 0.01)")
    p.add_argument("--p-target", type=float, action="append", help="minDCF target prior(s) (default 0.05 and 0.01)")
    p.add_argument("--speaker-pattern", help="regex extracting the speaker id from an utterance id")
    p.add_argument("--on-unknown", choices=("fail", "skip"), default="fail", help="speakers missing from metadata")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="adaptive-sv", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--seed", type=int, default=0, help="seed for parameter initialization and training")
    parser.add_argument("--config", help="key = value model/feature config file")
    parser.add_argument("--output-dir", default=".", help="directory for written files")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("featurize", help="WAV files -> log-mel features (named-array file)")
    p.add_argument("wav", nargs="+")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("embed", help="features or WAV files -> EMB1 embeddings")
    p.add_argument("wav", nargs="*")
    p.add_argument("--features", help="named-array file from 'featurize'")
    p.add_argument("--params", help="model parameters (named-array file); default: seeded initialization")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("score", help="cosine-score a trial list")
    p.add_argument("--trials", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--p-target", type=float, action="append")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("sweep", help="per-group EER, minDCF and DET curves")
    _experiment_args(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("calibrate", help="per-group thresholds at a FAR target")
    _experiment_args(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("train-detector", help="train the group detector on labeled embeddings")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--labels", required=True, help="CSV 'utterance_id,label'")
    p.add_argument("--test-embeddings")
    p.add_argument("--test-labels")
    p.add_argument("--classes", nargs="+", help="class names in output order (default: sorted labels)")
    p.add_argument("--dimension", default="gender")
    p.add_argument("--hidden", type=int, nargs="+", default=[128, 256])
    p.add_argument("--activation", choices=("relu", "tanh", "sigmoid"), default="relu")
    p.add_argument("--learning-rate", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--class-weighting", action="store_true")
    p.set_defaults(func=cmd_train_detector)

    p = sub.add_parser("detect", help="infer group labels with a trained detector")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--detector", required=True, help="path prefix of detector.arr / detector.cfg")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("run", help="full evaluation; writes report.json, DET CSVs and det.svg")
    _experiment_args(p, audio=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("param-count", help="parameter and MAC counts of the configured model")
    p.add_argument("--frames", type=int, default=200)
    p.set_defaults(func=cmd_param_count)

    p = sub.add_parser("selftest", help="synthetic end-to-end check")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors, --help, --version
        return exc.code if isinstance(exc.code, int) else 1
    if getattr(args, "far_target", None) is None and "far_target" in args:
        args.far_target = [0.01]
    if getattr(args, "p_target", None) is None and "p_target" in args:
        args.p_target = [0.05, 0.01]
    try:
        args.func(args)
    except AdaptiveSVError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
