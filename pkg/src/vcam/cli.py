"""Command-line pipeline: generate, train, eval, interpret, ablate.

Every artifact lands under one output directory and is indexed in
``run_manifest.tsv`` with its sha256, so two runs can be compared byte for byte.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import statistics
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import torch

from .attention import ContractViolation
from .checkpoint import (IncompatibleCheckpointError, load_checkpoint, load_estimator, read_manifest,
                         save_checkpoint, save_estimator)
from .config import ExperimentConfig, apply_override
from .data import (DatasetConfig, DatasetError, concat, generate_dataset, identity_separability, load_splits,
                   sha256_file)
from .evaluation import EvalProtocol, EvalReport, ParameterError, evaluate_features, load_embeddings, save_embeddings
from .interpretability import (assign_face_labels, average_attention_by_class, emphasis_consistency_score,
                               plot_attention_distribution, write_profile_table)
from .model import VARIANTS, ConfigurationError, build_estimator, build_model, embed_images
from .training import (MetricsLog, SamplingError, mean_orientation_error, predict_viewpoints, step1_train,
                       step2_train, two_stage_transfer)

log = logging.getLogger("vcam")

OUTPUT_ROOT_ENV = "VCAM_OUTPUT_ROOT"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4

# VeRi-776 mAP of the full-scale models, shown for context only
REFERENCE_MAP = {"none": 61.5, "se": 63.2, "vcam": 68.6}


class MissingPrerequisiteError(DatasetError):
    pass


class Run:
    """Output-directory layout plus the run manifest."""

    MANIFEST = "run_manifest.tsv"

    def __init__(self, root):
        self.root = Path(root)

    def dataset(self, which: str) -> Path:
        return self.root / "datasets" / which

    def step1_checkpoint(self, seed: int) -> Path:
        return self.root / "checkpoints" / f"step1_seed{seed}.bin"

    def checkpoint(self, kind: str, variant: str, seed: int) -> Path:
        return self.root / "checkpoints" / f"{kind}_{variant}_seed{seed}.bin"

    def log(self, name: str) -> Path:
        return self.root / "logs" / f"{name}.tsv"

    def report(self, name: str) -> Path:
        return self.root / "reports" / f"{name}.json"

    def record(self, kind: str, *paths) -> None:
        path = self.root / self.MANIFEST
        entries = {}
        if path.exists():
            for line in path.read_text().splitlines()[1:]:
                k, rel, digest = line.split("\t")
                entries[rel] = (k, digest)
        for p in paths:
            p = Path(p)
            entries[p.relative_to(self.root).as_posix()] = (kind, sha256_file(p))
        lines = ["kind\tpath\tsha256"] + [f"{k}\t{rel}\t{d}" for rel, (k, d) in sorted(entries.items())]
        self.root.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n")


def resolve_output_dir(output_dir: str) -> Path:
    path = Path(output_dir)
    env = os.environ.get(OUTPUT_ROOT_ENV)
    if env and not path.is_absolute():
        path = Path(env) / path
    return path


def _schedule_key(*parts) -> str:
    blob = json.dumps([asdict(p) for p in parts], sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _checkpoint_record(run: Run, path: Path, kind: str):
    run.record(kind, path, path.with_name(path.name + ".manifest"))


# ---------------------------------------------------------------- datasets

def _dataset_meta(config: DatasetConfig) -> str:
    return json.dumps(asdict(config), sort_keys=True) + "\n"


def ensure_dataset(run: Run, which: str, config: DatasetConfig):
    root = run.dataset(which)
    meta = root / "dataset_config.json"
    if not meta.exists():
        raise MissingPrerequisiteError(
            f"{which} dataset not found at {root}; run `vcam generate` first")
    if meta.read_text() != _dataset_meta(config):
        raise DatasetError(
            f"{which} dataset at {root} was generated with a different config; rerun `vcam generate`")
    return load_splits(root)


def cmd_generate(config: ExperimentConfig, run: Run, args) -> int:
    targets = ("target", "auxiliary") if args.which == "both" else (args.which,)
    for which in targets:
        dcfg = config.dataset if which == "target" else config.auxiliary
        root = run.dataset(which)
        fingerprint = generate_dataset(dcfg, root)
        (root / "dataset_config.json").write_text(_dataset_meta(dcfg))
        train = load_splits(root)["train"]
        accuracy = identity_separability(train.images, train.ids)
        chance = 1.0 / len(np.unique(train.ids))
        if not chance < accuracy < 1.0:
            raise DatasetError(f"{which} dataset: mean-colour 1-NN identity accuracy {accuracy:.3f} is outside "
                               f"({chance:.3f}, 1); identities are trivially separable or indistinguishable")
        run.record("dataset", root / "manifest.tsv", root / "identities.tsv", root / "fingerprint.txt",
                   root / "dataset_config.json")
        print(f"{which}: {root} fingerprint={fingerprint} colour-1NN accuracy={accuracy:.3f} (chance {chance:.3f})")
    return EXIT_OK


# ---------------------------------------------------------------- training

def run_step1(config: ExperimentConfig, run: Run, seed: int, reuse: bool = True) -> Path:
    path = run.step1_checkpoint(seed)
    schedule = config.step1
    estimator = build_estimator(config.backbone, seed)
    if reuse and path.exists():
        meta = read_manifest(path)
        if meta.get("schedule") == _schedule_key(schedule, config.auxiliary) and int(meta["seed"]) == seed:
            log.info("reusing step-1 checkpoint %s", path)
            return path
    aux = ensure_dataset(run, "auxiliary", config.auxiliary)
    held_out = aux.get("gallery")
    metrics = MetricsLog(run.log(f"step1_seed{seed}"))
    step1_train(estimator, aux["train"], schedule, seed=seed, metrics=metrics, eval_every=0)
    error = "nan"
    if held_out is not None:
        error = repr(mean_orientation_error(predict_viewpoints(estimator, held_out.images), held_out.theta))
    save_estimator(estimator, path, step=schedule.total_steps, seed=seed,
                   schedule=_schedule_key(schedule, config.auxiliary), heldout_orientation_error_deg=error)
    _checkpoint_record(run, path, "checkpoint")
    run.record("log", metrics.path)
    print(f"step 1 seed={seed}: held-out orientation error {error} deg -> {path}")
    return path


def _require_step1(run: Run, seed: int) -> Path:
    path = run.step1_checkpoint(seed)
    if not path.exists():
        raise MissingPrerequisiteError(
            f"step-1 checkpoint {path} not found; run `vcam train --step 1 --seed {seed}` first")
    return path


def run_step2(config: ExperimentConfig, run: Run, variant: str, seed: int, resume: bool = False,
              reuse: bool = False) -> Path:
    path = run.checkpoint("step2", variant, seed)
    backbone = replace(config.backbone, attention_variant=variant)
    schedule = config.step2
    target = ensure_dataset(run, "target", config.dataset)
    num_ids = len(np.unique(target["train"].ids))
    start = 0
    if (resume or reuse) and path.exists():
        model, meta = load_checkpoint(path, build_model(backbone, num_ids, seed))
        start = int(meta["step"])
        if reuse and meta.get("schedule") == _schedule_key(schedule, config.loss, config.dataset):
            log.info("reusing step-2 checkpoint %s", path)
            return path
        if not resume:
            start = 0
    if start == 0:
        model = build_model(backbone, num_ids, seed)
        load_estimator(_require_step1(run, seed), model.viewpoint)
    elif start >= schedule.total_steps:
        print(f"{path} already at step {start} (total_steps={schedule.total_steps}); nothing to do")
        return path
    metrics = MetricsLog(run.log(f"step2_{variant}_seed{seed}"), append=start > 0)
    step2_train(model, target["train"], schedule, config.loss, seed=seed, metrics=metrics, start_step=start)
    save_checkpoint(model, path, step=schedule.total_steps, seed=seed, variant=variant,
                    schedule=_schedule_key(schedule, config.loss, config.dataset))
    _checkpoint_record(run, path, "checkpoint")
    run.record("log", metrics.path)
    print(f"step 2 {variant} seed={seed}: steps {start}..{schedule.total_steps} -> {path}")
    return path


def run_transfer(config: ExperimentConfig, run: Run, variant: str, seed: int) -> Path:
    backbone = replace(config.backbone, attention_variant=variant)
    aux = ensure_dataset(run, "auxiliary", config.auxiliary)
    target = ensure_dataset(run, "target", config.dataset)
    model = build_model(backbone, len(np.unique(aux["train"].ids)), seed)
    load_estimator(_require_step1(run, seed), model.viewpoint)
    aux_path = run.checkpoint("transfer-aux", variant, seed)
    path = run.checkpoint("transfer", variant, seed)

    def save_aux(m):
        save_checkpoint(m, aux_path, step=config.transfer.total_steps, seed=seed, variant=variant)
        _checkpoint_record(run, aux_path, "checkpoint")

    m_aux = MetricsLog(run.log(f"transfer-aux_{variant}_seed{seed}"))
    m_tgt = MetricsLog(run.log(f"transfer_{variant}_seed{seed}"))
    two_stage_transfer(model, aux["train"], target["train"], config.transfer, config.step2, config.loss,
                       seed=seed, metrics_aux=m_aux, metrics_target=m_tgt, on_stage_end=save_aux)
    save_checkpoint(model, path, step=config.step2.total_steps, seed=seed, variant=variant)
    _checkpoint_record(run, path, "checkpoint")
    run.record("log", m_aux.path, m_tgt.path)
    print(f"transfer {variant} seed={seed} -> {path}")
    return path


def cmd_train(config: ExperimentConfig, run: Run, args) -> int:
    seed = config.seed
    if args.step == "1":
        if args.resume:
            raise ConfigurationError("--resume applies to --step 2 only")
        run_step1(config, run, seed, reuse=False)
    elif args.step == "2":
        run_step2(config, run, args.variant, seed, resume=args.resume)
    else:
        if args.resume:
            raise ConfigurationError("--resume applies to --step 2 only")
        run_transfer(config, run, args.variant, seed)
    return EXIT_OK


# ---------------------------------------------------------------- evaluation

def evaluate_checkpoint(config: ExperimentConfig, run: Run, checkpoint: Path, protocol: EvalProtocol,
                        export: bool = False) -> EvalReport:
    if not Path(checkpoint).exists():
        raise MissingPrerequisiteError(f"checkpoint {checkpoint} not found")
    target = ensure_dataset(run, "target", config.dataset)
    model, meta = load_checkpoint(checkpoint)
    q, g = target["query"], target["gallery"]
    qf, gf = embed_images(model, q.images), embed_images(model, g.images)
    if export:
        base = run.root / "embeddings" / Path(checkpoint).stem
        save_embeddings(base.with_name(base.name + "_query.f64"), qf, q.records)
        save_embeddings(base.with_name(base.name + "_gallery.f64"), gf, g.records)
        for part in ("query", "gallery"):
            p = base.with_name(f"{base.name}_{part}.f64")
            run.record("embeddings", p, p.with_suffix(".tsv"))
    report = evaluate_features(qf, gf, q.ids, g.ids, q.cameras, g.cameras, g.tracks, protocol)
    report.protocol["checkpoint"] = Path(checkpoint).name
    report.protocol["normalization_note"] = "features L2-normalized before matching"
    return report


def _protocol_name(protocol: EvalProtocol) -> str:
    parts = []
    if protocol.track_compress:
        parts.append("tc")
    if protocol.rerank:
        parts.append("rr")
    return "_".join(parts) or "raw"


def cmd_eval(config: ExperimentConfig, run: Run, args) -> int:
    protocol = replace(config.eval,
                       track_compress=args.track_compress or config.eval.track_compress,
                       rerank=args.rerank or config.eval.rerank)
    if args.max_rank is not None:
        protocol = replace(protocol, max_rank=args.max_rank)
    if args.lambda_value is not None:
        protocol = replace(protocol, lambda_value=args.lambda_value)
    if args.query_features or args.gallery_features:
        if not (args.query_features and args.gallery_features):
            raise ConfigurationError("--query-features and --gallery-features go together")
        qf, qs = load_embeddings(args.query_features)
        gf, gs = load_embeddings(args.gallery_features)
        report = evaluate_features(qf, gf, [s["id"] for s in qs], [s["id"] for s in gs],
                                   [s["camera"] for s in qs], [s["camera"] for s in gs],
                                   [s["track"] for s in gs], protocol)
        name = f"external_{_protocol_name(protocol)}"
    else:
        checkpoint = Path(args.checkpoint) if args.checkpoint else run.checkpoint(
            "step2", config.backbone.attention_variant, config.seed)
        report = evaluate_checkpoint(config, run, checkpoint, protocol, export=args.export_embeddings)
        name = f"{checkpoint.stem}_{_protocol_name(protocol)}"
    out = Path(args.report) if args.report else run.report(name)
    report.save(out)
    if out.resolve().is_relative_to(run.root.resolve()):
        run.record("report", out)
    line = f"mAP={report.mAP:.4f} rank1={report.rank1:.4f} rank5={report.rank5:.4f}"
    if report.max_rank is not None:
        line += f" rank{report.max_rank}_mAP={report.truncated_mAP:.4f}"
    print(f"{line} -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------- interpretability

def interpret_checkpoint(config: ExperimentConfig, run: Run, checkpoint: Path, name: str | None = None):
    if not Path(checkpoint).exists():
        raise MissingPrerequisiteError(f"checkpoint {checkpoint} not found")
    model, _ = load_checkpoint(checkpoint)
    if model.config.attention_variant != "vcam":
        raise ConfigurationError(
            f"{checkpoint} is a {model.config.attention_variant!r} model; interpretation needs a 'vcam' checkpoint")
    target = ensure_dataset(run, "target", config.dataset)
    icfg = config.interpret
    # attention depends on the image only through V, so every split is usable
    pool = concat([target[s] for s in ("train", "query", "gallery") if s in target])
    profile = average_attention_by_class(model, pool, icfg.stage_index, icfg.samples_per_class, icfg.seed)
    labels = assign_face_labels(profile)
    result = emphasis_consistency_score(profile, labels, icfg.threshold)
    name = name or Path(checkpoint).stem
    out = run.root / "interpret"
    table = out / f"{name}_profile.tsv"
    figure = out / f"{name}_attention.png"
    summary = out / f"{name}_summary.json"
    write_profile_table(profile, labels, table)
    plot_attention_distribution(profile, labels, figure, icfg.num_channels, icfg.seed)
    summary.write_text(json.dumps({
        "score": result.score, "emphasized": result.emphasized, "consistent": result.consistent,
        "base_rate": result.base_rate, "threshold": result.threshold, "label_ties": labels.ties,
        "counts": {c.value: n for c, n in profile.counts.items()}, "per_class": result.per_class,
        "stage_index": profile.stage_index,
    }, indent=2, sort_keys=True) + "\n")
    run.record("interpret", table, figure, summary)
    return result, figure


def cmd_interpret(config: ExperimentConfig, run: Run, args) -> int:
    checkpoint = Path(args.checkpoint) if args.checkpoint else run.checkpoint("step2", "vcam", config.seed)
    result, figure = interpret_checkpoint(config, run, checkpoint)
    score = "undefined (no emphasized channels)" if result.score is None else f"{result.score:.4f}"
    print(f"consistency score={score} emphasized={result.emphasized} base_rate={result.base_rate} "
          f"figure={figure}")
    return EXIT_OK


# ---------------------------------------------------------------- ablation

def ablation_table(results: dict[str, list[dict]]) -> str:
    lines = ["variant\tmedian_mAP\tmedian_rank1\tmedian_post_mAP\tper_seed_mAP\treference_VeRi776_mAP"]
    for variant in VARIANTS:
        rows = results[variant]
        maps = [r["mAP"] for r in rows]
        lines.append("\t".join([
            variant,
            f"{100 * statistics.median(maps):.2f}",
            f"{100 * statistics.median(r['rank1'] for r in rows):.2f}",
            f"{100 * statistics.median(r['post_mAP'] for r in rows):.2f}",
            ",".join(f"{100 * m:.2f}" for m in maps),
            f"{REFERENCE_MAP[variant]:.1f}",
        ]))
    lines.append("# reference column: published full-scale VeRi-776 mAP (none 61.5 / se 63.2 / vcam 68.6); "
                 "not reproduced at desk scale")
    return "\n".join(lines) + "\n"


def cmd_ablate(config: ExperimentConfig, run: Run, args) -> int:
    seeds = [config.seed + i for i in range(args.seeds)]
    raw = config.eval
    post = replace(config.eval, track_compress=True, rerank=True)
    results = {v: [] for v in VARIANTS}
    for seed in seeds:
        run_step1(config, run, seed)
        for variant in VARIANTS:
            path = run_step2(config, run, variant, seed, reuse=True)
            row = {"seed": seed}
            for tag, protocol in (("", raw), ("_post", post)):
                report = evaluate_checkpoint(config, run, path, protocol)
                out = run.report(f"ablation/{variant}_seed{seed}{tag}")
                report.save(out)
                run.record("report", out)
                row["post_mAP" if tag else "mAP"] = report.mAP
                if not tag:
                    row["rank1"] = report.rank1
            results[variant].append(row)
            print(f"{variant} seed={seed}: mAP={row['mAP']:.4f} rank1={row['rank1']:.4f} "
                  f"post mAP={row['post_mAP']:.4f}")
    table = ablation_table(results)
    out = run.root / "ablation" / "table.tsv"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(table)
    run.record("table", out)
    print(table, end="")
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment YAML file (defaults if omitted)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.FIELD=VALUE",
                        help="override one config field; repeatable")
    common.add_argument("--seed", type=int, help="experiment seed (overrides config)")
    common.add_argument("--output-dir", help=f"output directory; relative paths resolve against ${OUTPUT_ROOT_ENV}")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="vcam", description="Viewpoint-aware channel attention re-ID pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="render the synthetic datasets")
    p.add_argument("--which", choices=("target", "auxiliary", "both"), default="both")

    p = sub.add_parser("train", parents=[common], help="step-1, step-2 or transfer training")
    p.add_argument("--step", choices=("1", "2", "transfer"), required=True)
    p.add_argument("--variant", choices=VARIANTS, default=None)
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint's recorded step")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint or exported embeddings")
    p.add_argument("--checkpoint", help="default: the step-2 checkpoint of --variant and --seed")
    p.add_argument("--variant", choices=VARIANTS, default=None)
    p.add_argument("--track-compress", action="store_true")
    p.add_argument("--rerank", action="store_true")
    p.add_argument("--max-rank", type=int)
    p.add_argument("--lambda", dest="lambda_value", type=float, help="re-ranking blend weight")
    p.add_argument("--report", help="report path (default under reports/)")
    p.add_argument("--export-embeddings", action="store_true")
    p.add_argument("--query-features", help="evaluate externally produced query embeddings")
    p.add_argument("--gallery-features")

    p = sub.add_parser("interpret", parents=[common], help="attention-by-viewpoint study")
    p.add_argument("--checkpoint")

    p = sub.add_parser("ablate", parents=[common], help="train and compare none / se / vcam")
    p.add_argument("--seeds", type=int, default=3)
    return parser


def load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    for item in args.set:
        config = apply_override(config, item)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.output_dir is not None:
        config = replace(config, output_dir=args.output_dir)
    if getattr(args, "variant", None):
        config = replace(config, backbone=replace(config.backbone, attention_variant=args.variant))
    return config.validate()


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
            "interpret": cmd_interpret, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args)
        if args.command == "train" and args.variant is None:
            args.variant = config.backbone.attention_variant
        run = Run(resolve_output_dir(config.output_dir))
        config.save(run.root / "config.yaml")
        torch.manual_seed(config.seed)
        return COMMANDS[args.command](config, run, args)
    except (ConfigurationError, ParameterError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, SamplingError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (IncompatibleCheckpointError, ContractViolation, RuntimeError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
