"""Command-line surface: train, attack, evaluate, distill, analyze, pipeline.

Every subcommand reads one INI config (``--config``), with ``--seed`` and
``--out`` overriding the file. Artifacts are plain CSV/JSON/checkpoint
files with no timestamps or absolute paths inside, so a rerun with the
same config and seed reproduces them byte for byte.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 runtime
failure (including training divergence).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from typing import Sequence

import numpy as np

from .analysis import (
    DistillConfig,
    QueryOnlyModel,
    adversarial_confusion,
    blackbox_evaluate,
    centroid_distance_matrix,
    distill_proxy,
    embedding_margin,
    report_json,
    separability_report,
)
from .attacks import AttackConfig, evaluate_attack, write_attack_csv
from .config import (
    AttackSpec,
    ConfigError,
    RunConfig,
    load_config,
    save_config,
)
from .data import DataError, Dataset, load_csv, load_idx, make_digits_dataset, make_toy_dataset
from .model import (
    CheckpointError,
    Network,
    conv_classifier,
    load_checkpoint,
    mlp_classifier,
    save_checkpoint,
)
from .train import TrainingDivergedError, train, write_training_csv

__all__ = ["main", "run_pipeline", "build_dataset", "build_model"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3


# ---------------------------------------------------------------------------
# construction from config
# ---------------------------------------------------------------------------

def build_dataset(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Materialize the configured dataset and split it train/test."""
    d = cfg.dataset
    if d.kind in ("blobs", "moons"):
        full = make_toy_dataset(d.kind, d.n, d.noise, cfg.seed)
    elif d.kind == "digits":
        full = make_digits_dataset(d.n, cfg.seed, noise=d.noise)
    elif d.kind == "idx":
        full = load_idx(d.path, d.labels_path)
    else:
        full = load_csv(d.path, normalize=d.normalize)
    train_count = min(d.train_count, max(1, len(full) - 1))
    test_count = min(d.test_count, len(full) - train_count)
    if test_count <= 0:
        raise DataError(
            f"dataset of {len(full)} samples cannot provide {d.train_count} train + test"
        )
    return full.take(train_count), full.take(test_count, offset=train_count)


def build_model(cfg: RunConfig, dataset: Dataset) -> Network:
    m = cfg.model
    sample_shape = dataset.inputs.shape[1:]
    if m.kind == "mlp":
        return mlp_classifier(
            num_classes=dataset.num_classes,
            input_dim=int(np.prod(sample_shape)),
            hidden=m.hidden,
            embedding_dim=m.embedding_dim,
            slope=m.slope,
            seed=cfg.seed,
        )
    if len(sample_shape) != 3 or sample_shape[1] != sample_shape[2]:
        raise DataError(f"conv model needs square image data, got {sample_shape}")
    return conv_classifier(
        num_classes=dataset.num_classes,
        in_channels=sample_shape[0],
        image_size=sample_shape[1],
        channels=m.conv_channels,
        embedding_dim=m.embedding_dim,
        slope=m.slope,
        seed=cfg.seed,
    )


def _attack_config(spec: AttackSpec, cfg: RunConfig) -> AttackConfig:
    # the CW budget arrives via post-projection onto the configured epsilon
    return AttackConfig(
        family=spec.family,
        epsilon=spec.epsilon,
        iterations=spec.iterations,
        linf_cap=spec.epsilon if spec.family == "cw" else None,
        seed=cfg.seed,
        workers=cfg.analysis.attack_workers,
    )


def _artifact(cfg: RunConfig, name: str) -> str:
    os.makedirs(cfg.out_dir, exist_ok=True)
    return os.path.join(cfg.out_dir, name)


def _emit(path: str) -> None:
    # artifact paths are progress logging; stdout stays free for JSON output
    print(f"artifact: {path}", file=sys.stderr)


def _attack_tag(spec: AttackSpec) -> str:
    return f"{spec.family}_eps{spec.epsilon:g}".replace(".", "p")


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage_train(cfg: RunConfig) -> Network:
    train_set, _ = build_dataset(cfg)
    net = build_model(cfg, train_set)
    trained, log = train(net, train_set, cfg.training)
    ckpt = _artifact(cfg, "model.ckpt")
    save_checkpoint(trained, ckpt)
    _emit(ckpt)
    log_path = _artifact(cfg, "training_log.csv")
    write_training_csv(log_path, log)
    _emit(log_path)
    echo = _artifact(cfg, "config.ini")
    save_config(cfg, echo)
    _emit(echo)
    return trained


def _load_net(cfg: RunConfig, checkpoint: str | None) -> Network:
    path = checkpoint or os.path.join(cfg.out_dir, "model.ckpt")
    return load_checkpoint(path)


def stage_attack(cfg: RunConfig, net: Network) -> dict[str, float]:
    _, test_set = build_dataset(cfg)
    subset = test_set.take(cfg.analysis.sample_count)
    results = {}
    for spec in cfg.attacks:
        acfg = _attack_config(spec, cfg)
        ev = evaluate_attack(net, subset.inputs.array, subset.labels, acfg)
        tag = _attack_tag(spec)
        csv_path = _artifact(cfg, f"attack_{tag}.csv")
        write_attack_csv(csv_path, ev)
        _emit(csv_path)
        conf = adversarial_confusion(
            ev,
            net.num_classes,
            _maybe_centroids(net, subset),
        )
        conf_path = _artifact(cfg, f"confusion_{tag}.json")
        with open(conf_path, "w") as fh:
            fh.write(report_json(conf) + "\n")
        _emit(conf_path)
        results[tag] = ev.robust_accuracy
    return results


def _maybe_centroids(net: Network, subset: Dataset) -> np.ndarray | None:
    if np.unique(subset.labels).size != net.num_classes:
        return None
    return centroid_distance_matrix(net.embed(subset.inputs.array), subset.labels, net.num_classes)


def stage_analyze(cfg: RunConfig, net: Network) -> dict:
    _, test_set = build_dataset(cfg)
    subset = test_set.take(cfg.analysis.sample_count)
    margin = embedding_margin(
        net,
        subset.inputs.array,
        subset.labels,
        cap=cfg.analysis.margin_cap,
        seed=cfg.seed,
        jacobian_chunk=cfg.analysis.jacobian_chunk,
    )
    margin_path = _artifact(cfg, "margin.json")
    with open(margin_path, "w") as fh:
        fh.write(report_json(margin) + "\n")
    _emit(margin_path)
    sep = separability_report(net.embed(subset.inputs.array), subset.labels, net.num_classes)
    sep_path = _artifact(cfg, "separability.json")
    with open(sep_path, "w") as fh:
        fh.write(report_json(sep) + "\n")
    _emit(sep_path)
    return {"margin": margin.as_dict(), "dbi": sep.dbi}


def stage_distill(cfg: RunConfig, net: Network) -> dict:
    train_set, test_set = build_dataset(cfg)
    probes = train_set.take(min(cfg.analysis.distill_probes, len(train_set)))
    query_model = QueryOnlyModel(net)
    proxy_seed = cfg.seed + 1  # proxy must not share the target's initialization
    proxy_template = mlp_classifier(
        num_classes=net.num_classes,
        input_dim=int(np.prod(train_set.inputs.shape[1:])),
        hidden=max(32, cfg.model.hidden // 4),
        embedding_dim=max(16, cfg.model.embedding_dim // 2),
        seed=proxy_seed,
    )
    dcfg = DistillConfig(
        epochs=cfg.analysis.distill_epochs,
        mode=cfg.analysis.distill_mode,
        seed=proxy_seed,
    )
    proxy, queries = distill_proxy(query_model, proxy_template, probes.inputs.array, dcfg)
    proxy_path = _artifact(cfg, "proxy.ckpt")
    save_checkpoint(proxy, proxy_path)
    _emit(proxy_path)

    subset = test_set.take(cfg.analysis.sample_count)
    out = {"queries": queries, "gradient_queries": query_model.gradient_queries}
    for spec in cfg.attacks:
        if spec.family == "cw":
            continue  # transfer evaluation uses the gradient-sign families
        acfg = _attack_config(spec, cfg)
        bb = blackbox_evaluate(net, proxy, subset.inputs.array, subset.labels, acfg)
        out[f"blackbox_{_attack_tag(spec)}"] = bb.robust_accuracy
    bb_path = _artifact(cfg, "blackbox.json")
    with open(bb_path, "w") as fh:
        json.dump({"schema_version": 1, **out}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _emit(bb_path)
    return out


def stage_evaluate(cfg: RunConfig, net: Network) -> dict:
    _, test_set = build_dataset(cfg)
    subset = test_set.take(cfg.analysis.sample_count)
    clean = float(np.mean(net.predict(subset.inputs.array) == subset.labels))
    robust = stage_attack(cfg, net)
    summary = {"schema_version": 1, "clean_accuracy": clean, "robust_accuracy": robust}
    path = _artifact(cfg, "evaluation.json")
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _emit(path)
    return summary


def run_pipeline(cfg: RunConfig) -> dict:
    """train -> checkpoint -> attacks -> analysis (-> distill), with stage tagging."""
    summary: dict = {"schema_version": 1}
    stage = "train"
    try:
        net = stage_train(cfg)
        train_set, test_set = build_dataset(cfg)
        subset = test_set.take(cfg.analysis.sample_count)
        summary["clean_accuracy"] = float(np.mean(net.predict(subset.inputs.array) == subset.labels))
        stage = "attack"
        summary["robust_accuracy"] = stage_attack(cfg, net)
        stage = "analyze"
        summary["analysis"] = stage_analyze(cfg, net)
        if cfg.analysis.distill:
            stage = "distill"
            summary["distill"] = stage_distill(cfg, net)
    except Exception as exc:
        raise PipelineStageError(stage, exc) from exc
    path = _artifact(cfg, "summary.json")
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _emit(path)
    return summary


class PipelineStageError(RuntimeError):
    """Wraps a stage failure with the stage name; partial artifacts remain."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems must exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _make_parser() -> _Parser:
    p = _Parser(prog="marginlab", description="margin-defense training and evaluation lab")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("train", "attack", "evaluate", "distill", "analyze", "pipeline"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="INI config file (defaults apply when omitted)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="override the output directory")
        if name in ("attack", "evaluate", "distill", "analyze"):
            sp.add_argument("--checkpoint", help="model checkpoint (default: <out>/model.ckpt)")
    return p


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
        cfg = dataclasses.replace(
            cfg, training=dataclasses.replace(cfg.training, seed=args.seed)
        )
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    args = _make_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        if args.command == "train":
            stage_train(cfg)
        elif args.command == "attack":
            net = _load_net(cfg, args.checkpoint)
            out = stage_attack(cfg, net)
            print(json.dumps(out, indent=2, sort_keys=True))
        elif args.command == "evaluate":
            net = _load_net(cfg, args.checkpoint)
            print(json.dumps(stage_evaluate(cfg, net), indent=2, sort_keys=True))
        elif args.command == "distill":
            net = _load_net(cfg, args.checkpoint)
            print(json.dumps(stage_distill(cfg, net), indent=2, sort_keys=True))
        elif args.command == "analyze":
            net = _load_net(cfg, args.checkpoint)
            print(json.dumps(stage_analyze(cfg, net), indent=2, sort_keys=True))
        else:
            run_pipeline(cfg)
    except PipelineStageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        inner = exc.cause
        if isinstance(inner, (DataError,)):
            return EXIT_DATA
        return EXIT_RUNTIME
    except (DataError,) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
