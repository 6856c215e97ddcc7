"""
One handler per subcommand. Each handler resolves its configuration
(flag > config file > default), verifies its inputs, delegates to the services
and writes exactly one run manifest.
"""
import json
import sys
from argparse import Namespace
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple, Type

import numpy as np
import torch
import yaml
from pydantic import BaseModel, ValidationError

from schemas.config import (
    EncoderConfig,
    FinetuneConfig,
    PreprocessConfig,
    PretrainConfig,
    ProfileConfig,
    SweepConfig,
    SynthConfig,
)
from schemas.report import EvalReport, MetricsReport, RunManifest
from services import evaluator, synth, trainer
from services.artifacts import (
    DatasetArtifact,
    list_checkpoints,
    load_checkpoint,
    load_dataset,
    make_dataset_artifact,
    save_checkpoint,
    save_dataset,
)
from services.social_graph import build_graph, split_edges
from utils.data_loader import load_tsv, load_yelp
from utils.errors import ConfigError, DataError
from utils.integrity import file_sha256, verify_file
from utils.logger import logger
from utils.preprocessing import (
    align_attributes,
    apply_cutoff,
    build_dataset,
    dataset_statistics,
    kcore_filter,
    split_leave_one_out,
    split_users,
)
from utils.settings import DEFAULT_THREADS, YELP_CUTOFF

ENCODER_FIELDS = set(EncoderConfig.model_fields)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def load_config_file(path: Optional[str]) -> Dict[str, Any]:
    if path is None:
        return {}
    try:
        with open(path) as handle:
            loaded = yaml.safe_load(handle) or {}
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"Config file {path} is not valid YAML: {e}") from e
    if not isinstance(loaded, dict):
        raise ConfigError(f"Config file {path} must hold a mapping of keys")
    return loaded


def resolve_config(model: Type[BaseModel], path: Optional[str], overrides: Dict[str, Any], section: Optional[str] = None) -> BaseModel:
    """
    Built-in defaults, then the config file (or one of its sections), then flags.
    Flags left unset (None) do not override. Pydantic reports every invalid field at once.
    """
    values = load_config_file(path)
    if section is not None:
        values = values.get(section, {}) or {}
    values = dict(values)
    for key, value in overrides.items():
        if value is None:
            continue
        if key in ENCODER_FIELDS and "encoder" in model.model_fields:
            values.setdefault("encoder", {})
            values["encoder"] = {**values["encoder"], key: value}
        else:
            values[key] = value
    return model.model_validate(values)


def configured_seed(path: Optional[str], section: Optional[str] = None) -> Optional[int]:
    values = load_config_file(path)
    if section is not None:
        values = values.get(section, {}) or {}
    return values.get("seed")


def resolve_seed(args: Namespace, configured: Optional[int]) -> Tuple[int, bool]:
    """Explicit --seed, else the config file's seed, else a fresh one that the manifest records."""
    if getattr(args, "seed", None) is not None:
        return args.seed, False
    if configured is not None:
        return configured, False
    seed = int(np.random.SeedSequence().entropy % (2 ** 31))
    logger.warning(f"No seed given; using auto-chosen seed {seed}")
    return seed, True


def manifest_path_for(output: Path) -> Path:
    output = Path(output)
    if output.is_dir() or output.suffix == "":
        return output / "manifest.json"
    return output.with_name(output.name + ".manifest.json")


def verified_input(path: Path) -> str:
    """
    Hash of an input artifact, checked against the manifest that produced it
    when that manifest sits next to it.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"Input not found: {path}")
    expected = None
    for candidate in (path.with_name(path.name + ".manifest.json"), path.parent / "manifest.json"):
        if not candidate.exists():
            continue
        try:
            recorded = RunManifest.model_validate_json(candidate.read_text())
        except ValidationError:
            logger.warning(f"Ignoring unreadable manifest {candidate}")
            continue
        expected = recorded.output_hashes.get(path.name)
        if expected:
            break
    return verify_file(path, expected)


@contextmanager
def run_manifest(command: str, output: Path, args: Namespace, inputs: Dict[str, Path]) -> Iterator[RunManifest]:
    manifest = RunManifest(
        command=command,
        config_path=getattr(args, "config", None),
        started_at=_now(),
        input_hashes={name: verified_input(p) for name, p in inputs.items() if p is not None},
    )
    try:
        yield manifest
        manifest.status = "ok"
    except Exception:
        manifest.status = "failed"
        raise
    finally:
        manifest.finished_at = _now()
        manifest.output_hashes = {
            Path(p).name: file_sha256(p) for p in manifest.outputs if Path(p).is_file()
        }
        path = manifest_path_for(output)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(manifest.model_dump_json(indent=2))
        logger.info(f"Run manifest written to {path}")


def set_threads(args: Namespace) -> None:
    threads = getattr(args, "threads", None) or DEFAULT_THREADS
    torch.set_num_threads(threads)


def _print_statistics(artifact: DatasetArtifact) -> None:
    stats = dataset_statistics(artifact.dataset, len(artifact.edges) + len(artifact.eval_edges))
    print(stats.table_line())
    print(stats.model_dump_json())


def cmd_preprocess(args: Namespace) -> None:
    set_threads(args)
    cfg = resolve_config(PreprocessConfig, args.config, {
        "format": args.format, "k": args.k, "cutoff": args.cutoff,
        "holdout_fraction": args.holdout_fraction, "seed": args.seed,
    }, section="preprocess")
    seed, auto = resolve_seed(args, configured_seed(args.config, "preprocess"))
    cfg = cfg.model_copy(update={"seed": seed})

    if cfg.format == "yelp":
        if not args.reviews or not args.users:
            raise ConfigError("--format yelp needs --reviews and --users")
        inputs = {"reviews": Path(args.reviews), "users": Path(args.users)}
    else:
        if not args.interactions:
            raise ConfigError("--format tsv needs --interactions")
        inputs = {"interactions": Path(args.interactions)}
        if args.edges:
            inputs["edges"] = Path(args.edges)
        if args.attributes:
            inputs["attributes"] = Path(args.attributes)

    out = Path(args.out)
    with run_manifest("preprocess", out, args, inputs) as manifest:
        manifest.config = cfg.model_dump(mode="json")
        manifest.seed, manifest.seed_auto_chosen = seed, auto
        if cfg.format == "yelp":
            loaded = load_yelp(inputs["reviews"], inputs["users"])
            cutoff = YELP_CUTOFF if cfg.cutoff is None else cfg.cutoff
        else:
            loaded = load_tsv(inputs["interactions"], inputs.get("edges"), inputs.get("attributes"))
            cutoff = cfg.cutoff
        records = apply_cutoff(loaded.records, cutoff) if cutoff else loaded.records
        records = kcore_filter(records, cfg.k)
        ds = build_dataset(records)
        graph = build_graph(loaded.edges, ds)
        attributes = align_attributes(loaded.attributes, loaded.schema, ds)
        train_users, holdout_users = split_users(ds, cfg.holdout_fraction, seed)
        train_graph, eval_edges = split_edges(graph, cfg.holdout_fraction, seed)
        split_leave_one_out(ds)

        artifact = make_dataset_artifact(ds, train_graph, eval_edges, loaded.schema, attributes, train_users, holdout_users)
        save_dataset(artifact, out)
        manifest.outputs = [str(out)]
        _print_statistics(artifact)


def cmd_synth(args: Namespace) -> None:
    set_threads(args)
    cfg = resolve_config(SynthConfig, args.config, {
        "n_users": args.n_users, "n_items": args.n_items, "n_clusters": args.n_clusters,
        "intra_cluster_item_prob": args.intra_prob, "friend_intra_prob": args.friend_intra_prob,
        "attribute_noise": args.attribute_noise, "kcore": args.k, "seed": args.seed,
    }, section="synth")
    seed, auto = resolve_seed(args, configured_seed(args.config, "synth"))
    cfg = cfg.model_copy(update={"seed": seed})

    out = Path(args.out)
    with run_manifest("synth", out, args, {}) as manifest:
        manifest.config = cfg.model_dump(mode="json")
        manifest.seed, manifest.seed_auto_chosen = seed, auto
        result = synth.generate(cfg)
        train_users, holdout_users = split_users(result.dataset, args.holdout_fraction, seed)
        train_graph, eval_edges = split_edges(result.graph, args.holdout_fraction, seed)
        artifact = make_dataset_artifact(
            result.dataset, train_graph, eval_edges, result.schema, result.attributes, train_users, holdout_users,
        )
        save_dataset(artifact, out)
        labels = result.write_labels(out.with_name(out.stem + ".labels.json"))
        manifest.outputs = [str(out), str(labels)]
        _print_statistics(artifact)


def _pretrain_config(args: Namespace) -> PretrainConfig:
    return resolve_config(PretrainConfig, args.config, {
        "lambda1": args.lambda1, "lambda2": args.lambda2, "lambda3": args.lambda3,
        "learning_rate": args.lr, "batch_size": args.batch_size, "srd_batch_size": args.srd_batch_size,
        "iterations_per_epoch": args.iterations, "num_epochs": args.epochs,
        "checkpoint_every": args.checkpoint_every, "mask_proportion": args.mask_proportion,
        "seed": args.seed, "srd_unmasked": args.srd_unmasked or None, "grad_clip": args.grad_clip,
        "double_precision": args.double or None, "prefetch": args.prefetch,
        "num_layers": args.num_layers, "num_heads": args.num_heads, "hidden_dim": args.hidden_dim,
        "max_len": args.max_len, "dropout_rate": args.dropout,
    }, section="pretrain")


def cmd_pretrain(args: Namespace) -> None:
    set_threads(args)
    cfg = _pretrain_config(args)
    seed, auto = resolve_seed(args, configured_seed(args.config, "pretrain"))
    cfg = cfg.model_copy(update={"seed": seed})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = {"data": Path(args.data)}
    if args.resume:
        inputs["resume"] = Path(args.resume)

    with run_manifest("pretrain", out, args, inputs) as manifest:
        manifest.config = cfg.model_dump(mode="json")
        manifest.seed, manifest.seed_auto_chosen = seed, auto
        manifest.ablation = cfg.ablation
        artifact = load_dataset(inputs["data"])
        resume = load_checkpoint(inputs["resume"]) if args.resume else None
        result = trainer.pretrain(
            artifact.dataset,
            artifact.graph if cfg.enable_srd else None,
            artifact.attributes,
            artifact.attribute_schema,
            cfg,
            out,
            train_users=artifact.train_users or None,
            resume_from=resume,
        )
        manifest.outputs = [str(p) for p in result.checkpoints] + [str(out / "train_log.jsonl")]


def _finetune_one(args: Namespace, artifact: DatasetArtifact, checkpoint, cfg):
    ds = artifact.dataset
    if args.task == "seqrec":
        return trainer.finetune_seqrec(checkpoint, ds, split_leave_one_out(ds), cfg)
    return trainer.finetune_profile(
        checkpoint, ds, artifact.attributes, artifact.attribute_schema, cfg,
        train_users=artifact.train_users or range(ds.num_users),
        eval_users=artifact.holdout_users or artifact.train_users or range(ds.num_users),
    )


def cmd_finetune(args: Namespace) -> None:
    set_threads(args)
    if args.task == "seqrec":
        cfg = resolve_config(FinetuneConfig, args.config, {
            "learning_rate": args.lr, "batch_size": args.batch_size, "num_epochs": args.epochs,
            "seed": args.seed, "n_neg": args.n_neg, "grad_clip": args.grad_clip,
            "random_cut": False if args.no_random_cut else None,
        }, section="finetune")
    else:
        cfg = resolve_config(ProfileConfig, args.config, {
            "task": args.task, "learning_rate": args.lr, "batch_size": args.batch_size,
            "num_epochs": args.epochs, "seed": args.seed, "grad_clip": args.grad_clip,
        }, section="profile")
    seed, auto = resolve_seed(args, configured_seed(args.config, "finetune" if args.task == "seqrec" else "profile"))
    cfg = cfg.model_copy(update={"seed": seed})

    out = Path(args.out)
    inputs = {"data": Path(args.data)}
    if args.all_checkpoints:
        sources = list_checkpoints(Path(args.checkpoint))
        if not sources:
            raise DataError(f"No checkpoints found in {args.checkpoint}")
    elif args.checkpoint:
        sources = [Path(args.checkpoint)]
    else:
        sources = []
    for i, source in enumerate(sources):
        inputs[f"checkpoint_{i}"] = source

    with run_manifest("finetune", out, args, inputs) as manifest:
        manifest.config = cfg.model_dump(mode="json")
        manifest.seed, manifest.seed_auto_chosen = seed, auto
        artifact = load_dataset(inputs["data"])
        if sources:
            starts = [load_checkpoint(p) for p in sources]
        else:
            encoder = resolve_config(EncoderConfig, args.config, {}, section="encoder")
            starts = [trainer.initial_checkpoint(artifact.dataset, artifact.attribute_schema, encoder, seed)]
        manifest.ablation = starts[0].ablation.get("name")

        results = [_finetune_one(args, artifact, start, cfg) for start in starts]
        if args.task == "seqrec":
            best = trainer.select_best([max(r.valid_hr1, default=0.0) for r in results])
            for source, r in zip(sources, results):
                logger.info(f"{source}: best valid HR@1 {max(r.valid_hr1, default=0.0):.4f} at epoch {r.best_epoch}")
            chosen = results[best].checkpoint
        else:
            best = trainer.select_best([r.report.accuracy if r.report.accuracy is not None else -r.report.mse for r in results])
            chosen = results[best].checkpoint
            print(results[best].report.model_dump_json())
        save_checkpoint(chosen, out)
        manifest.outputs = [str(out)]


def _human_table(title: str, values: Dict[str, Any]) -> str:
    lines = [title]
    for name, value in values.items():
        lines.append(f"  {name:<16}{value}")
    return "\n".join(lines)


def _seqrec_metrics(report: MetricsReport) -> Dict[str, Any]:
    return report.model_dump(exclude={"n_trials"})


def cmd_evaluate(args: Namespace) -> None:
    set_threads(args)
    seed, auto = resolve_seed(args, configured_seed(args.config, "evaluate"))
    inputs = {"data": Path(args.data)}
    if args.checkpoint:
        inputs["checkpoint"] = Path(args.checkpoint)
    needs_model = args.task in ("seqrec", "srd", "profile")
    if needs_model and not args.checkpoint:
        raise ConfigError(f"--task {args.task} needs --checkpoint")

    out = Path(args.out)
    with run_manifest("evaluate", out, args, inputs) as manifest:
        manifest.seed, manifest.seed_auto_chosen = seed, auto
        manifest.config = {"task": args.task, "target": args.target, "n_neg": args.n_neg, "by_length": args.by_length}
        artifact = load_dataset(inputs["data"])
        ds = artifact.dataset
        checkpoint = load_checkpoint(inputs["checkpoint"]) if needs_model else None
        checkpoint_id = checkpoint.digest() if checkpoint is not None else args.task

        if args.task in ("seqrec", "random", "popularity"):
            scorer = {
                "seqrec": checkpoint,
                "random": evaluator.random_scorer(seed),
                "popularity": evaluator.popularity_scorer(ds.popularity),
            }[args.task]
            split = split_leave_one_out(ds)
            if args.by_length:
                reports = evaluator.eval_seqrec_by_length(scorer, split, ds, args.target, args.n_neg, seed)
                metrics = {name: _seqrec_metrics(r) for name, r in reports.items()}
                n_trials = reports["all"].n_trials
                human = {f"{name} {k}": v for name, r in reports.items() for k, v in r.as_percent().items()}
            else:
                report = evaluator.eval_seqrec(scorer, split, ds, args.target, args.n_neg, seed)
                metrics, n_trials, human = _seqrec_metrics(report), report.n_trials, report.as_percent()
        elif args.task in ("srd", "sim"):
            if args.task == "srd":
                report = evaluator.eval_srd(checkpoint, artifact.eval_edges, ds, artifact.full_graph, artifact.graph,
                                            args.n_neg, seed, args.sampling)
            else:
                report = evaluator.eval_sim_baseline(artifact.eval_edges, ds, artifact.full_graph, args.n_neg, seed, args.sampling)
            metrics, n_trials = report.model_dump(exclude={"n_trials"}), report.n_trials
            human = {"accuracy": round(100 * report.accuracy, 2)}
            if report.accuracy_unseen is not None:
                human["accuracy_unseen"] = round(100 * report.accuracy_unseen, 2)
        else:
            if checkpoint.profile is None:
                raise DataError(f"{args.checkpoint} has no profile head; fine-tune it with --task <attribute> first")
            task = checkpoint.profile["task"]
            users = artifact.holdout_users or list(range(ds.num_users))
            report = evaluator.eval_profile(checkpoint, ds, artifact.attributes, artifact.attribute_schema, task, users)
            metrics, n_trials = report.model_dump(), report.n_users
            human = {k: v for k, v in metrics.items() if isinstance(v, float)}

        result = EvalReport(task=args.task, metrics=metrics, n_trials=n_trials, seed=seed, checkpoint_id=checkpoint_id)
        print(result.model_dump_json())
        print(_human_table(f"{args.task} ({n_trials} trials)", human), file=sys.stderr)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(result.model_dump_json() + "\n")
        manifest.outputs = [str(out)]


def cmd_sweep(args: Namespace) -> None:
    """Pre-train, fine-tune and test one model per (batch size, hidden size) pair."""
    set_threads(args)
    sweep = resolve_config(SweepConfig, args.config, {
        "batch_sizes": args.batch_sizes, "hidden_dims": args.hidden_dims, "n_neg": args.n_neg,
    }, section="sweep")
    base = _pretrain_config(args)
    seed, auto = resolve_seed(args, configured_seed(args.config, "pretrain"))
    finetune_cfg = resolve_config(FinetuneConfig, args.config, {
        "num_epochs": args.finetune_epochs, "seed": seed, "n_neg": args.n_neg,
    }, section="finetune")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with run_manifest("sweep", out, args, {"data": Path(args.data)}) as manifest:
        manifest.config = {"sweep": sweep.model_dump(), "pretrain": base.model_dump(mode="json"),
                           "finetune": finetune_cfg.model_dump(mode="json")}
        manifest.seed, manifest.seed_auto_chosen = seed, auto
        manifest.ablation = base.ablation
        artifact = load_dataset(Path(args.data))
        ds = artifact.dataset
        split = split_leave_one_out(ds)
        rows: List[Dict[str, Any]] = []
        for batch_size in sweep.batch_sizes:
            for hidden_dim in sweep.hidden_dims:
                encoder = base.encoder.model_copy(update={"hidden_dim": hidden_dim})
                cfg = base.model_copy(update={"batch_size": batch_size, "seed": seed, "encoder": EncoderConfig.model_validate(encoder.model_dump())})
                run_dir = out / f"b{batch_size}_d{hidden_dim}"
                result = trainer.pretrain(ds, artifact.graph if cfg.enable_srd else None, artifact.attributes,
                                          artifact.attribute_schema, cfg, run_dir, train_users=artifact.train_users or None)
                tuned = trainer.finetune_seqrec(result.final, ds, split, finetune_cfg)
                report = evaluator.eval_seqrec(tuned.checkpoint, split, ds, "test", sweep.n_neg, seed)
                row = {"batch_size": batch_size, "hidden_dim": hidden_dim, **report.model_dump()}
                rows.append(row)
                print(json.dumps(row))
                tuned_path = save_checkpoint(tuned.checkpoint, run_dir / "finetuned.bin")
                manifest.outputs.append(str(tuned_path))

        results = out / "sweep_results.jsonl"
        results.write_text("".join(json.dumps(r) + "\n" for r in rows))
        manifest.outputs.append(str(results))
        header = f"{'batch':>6} {'hidden':>6} " + " ".join(f"{m:>8}" for m in ("hr_1", "hr_10", "ndcg_10", "mrr"))
        lines = [header] + [
            f"{r['batch_size']:>6} {r['hidden_dim']:>6} " + " ".join(f"{100 * r[m]:>8.2f}" for m in ("hr_1", "hr_10", "ndcg_10", "mrr"))
            for r in rows
        ]
        print("\n".join(lines), file=sys.stderr)
