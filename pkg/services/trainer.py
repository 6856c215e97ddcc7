"""
Pre-training and fine-tuning loops.

Every epoch draws its batches from a generator seeded with (seed, epoch) and
reseeds torch's dropout RNG the same way, so resuming from a checkpoint taken
at the end of epoch e reproduces an uninterrupted run exactly.
"""
import copy
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from schemas.config import EncoderConfig, FinetuneConfig, PretrainConfig, ProfileConfig
from schemas.dataset import AttributeSchema, AttributeTable, InteractionDataset, LeaveOneOutSplit
from schemas.report import ProfileReport, TrainLogRecord
from services.artifacts import Checkpoint, checkpoint_path, save_checkpoint
from services.batch_prefetcher import BatchPrefetcher
from services.evaluator import ModelScorer, eval_profile, eval_seqrec
from services.objectives import (
    MaskedBatch,
    ProfileHead,
    SrdBatch,
    UPRecModel,
    huber,
    joint_loss,
    make_finetune_batch,
    make_masked_batch,
    make_srd_batch,
    mip_loss,
    pad_tokens,
    profile_repr,
    srd_loss,
    uap_loss,
    user_repr,
    wrap,
)
from services.social_graph import SocialGraph
from utils.errors import DataError, TrainingDivergedError
from utils.logger import logger
from utils.preprocessing import numeric_ranges, standardize, training_sequence
from utils.settings import SHOW_PROGRESS


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(epoch)]).generate_state(1)[0])


def make_optimizer(model: torch.nn.Module, lr: float) -> torch.optim.Adam:
    """Adam with the standard beta/epsilon defaults."""
    return torch.optim.Adam(model.parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8)


def adam_step(
    model: torch.nn.Module,
    optimizer: torch.optim.Optimizer,
    grad_clip: Optional[float] = None,
) -> None:
    """
    One bias-corrected Adam update. Refuses to step on a non-finite gradient
    and names the offending parameter.
    """
    for name, param in model.named_parameters():
        if param.grad is not None and not bool(torch.isfinite(param.grad).all()):
            logger.error(f"Non-finite gradient for parameter '{name}'")
            raise TrainingDivergedError(f"Non-finite gradient for parameter '{name}'", parameter=name)
    if grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()


@dataclass
class PretrainStep:
    masked: MaskedBatch
    users: np.ndarray
    srd: Optional[SrdBatch] = None
    srd_inputs: Optional[Tuple[torch.Tensor, torch.Tensor]] = None


@dataclass
class PretrainResult:
    checkpoints: List[Path]
    records: List[TrainLogRecord] = field(default_factory=list)
    epoch_losses: List[Dict[str, float]] = field(default_factory=list)
    final: Optional[Checkpoint] = None


def srd_pair_stream(
    graph: SocialGraph,
    rng: np.random.Generator,
    allowed_users: Optional[set] = None,
) -> Iterator[Tuple[int, int]]:
    """
    (query, friend) pairs pass after pass over the edges. Each edge gets a random
    direction and a user is the query at most once per pass.
    """
    edges = [e for e in graph.edges if allowed_users is None or (e[0] in allowed_users and e[1] in allowed_users)]
    if not edges:
        raise DataError("Relation detection is enabled but there are no pre-training edges")
    while True:
        used = set()
        for index in rng.permutation(len(edges)):
            u, v = edges[index]
            query, friend = (u, v) if rng.random() < 0.5 else (v, u)
            if query in used:
                continue
            used.add(query)
            yield query, friend


def _pretrain_batches(
    cfg: PretrainConfig,
    epoch: int,
    sequences: List[List[int]],
    users: np.ndarray,
    graph: Optional[SocialGraph],
    attributes: AttributeTable,
    ranges: np.ndarray,
    use_srd: bool,
) -> Iterator[PretrainStep]:
    rng = np.random.default_rng([cfg.seed, epoch])
    max_len = cfg.encoder.max_len
    pairs = srd_pair_stream(graph, rng, set(users.tolist())) if use_srd else None
    srd_size = cfg.srd_batch_size or cfg.batch_size
    for _ in range(cfg.iterations_per_epoch):
        batch_users = users[rng.integers(len(users), size=cfg.batch_size)]
        masked = make_masked_batch([sequences[u] for u in batch_users], cfg.mask_proportion, rng, max_len)
        step = PretrainStep(masked=masked, users=batch_users)
        if use_srd:
            pair_list = [next(pairs) for _ in range(max(2, srd_size))]
            step.srd = make_srd_batch(pair_list, graph, attributes, ranges, cfg.profile_similarity_threshold)
            members = [q for q, _ in pair_list] + [c for _, c in pair_list]
            if cfg.srd_unmasked:
                step.srd_inputs = pad_tokens([wrap(sequences[u], max_len) for u in members])
            else:
                srd_masked = make_masked_batch([sequences[u] for u in members], cfg.mask_proportion, rng, max_len)
                step.srd_inputs = (srd_masked.input_ids, srd_masked.attention_mask)
        yield step


def _build_model(cfg: EncoderConfig, schema: AttributeSchema, double: bool) -> UPRecModel:
    model = UPRecModel(cfg, schema)
    return model.double() if double else model


def pretrain(
    ds: InteractionDataset,
    graph: Optional[SocialGraph],
    attributes: AttributeTable,
    schema: AttributeSchema,
    cfg: PretrainConfig,
    out_dir: Path,
    train_users: Optional[Sequence[int]] = None,
    resume_from: Optional[Checkpoint] = None,
) -> PretrainResult:
    """
    Joint optimization of lambda1 MIP + lambda2 UAP + lambda3 SRD with Adam.
    Writes ckpt_{epoch}.bin every `checkpoint_every` epochs (and at the last epoch)
    plus a train_log.jsonl of per-iteration losses. The social graph is only
    touched when lambda3 > 0.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed_everything(cfg.seed)

    encoder_cfg = cfg.encoder.model_copy(update={"vocab_size": ds.vocab_size})
    cfg = cfg.model_copy(update={"encoder": encoder_cfg})
    use_uap = cfg.enable_uap and not schema.is_empty
    use_srd = cfg.enable_srd
    if cfg.enable_uap and schema.is_empty:
        logger.warning("UAP weight is positive but the dataset has no attributes; UAP is disabled")

    users = np.asarray(sorted(train_users) if train_users is not None else range(ds.num_users), dtype=np.int64)
    sequences = [training_sequence(s) for s in ds.sequences]
    standardized, constants = standardize(attributes, schema, users=users)
    ranges = numeric_ranges(standardized)

    model = _build_model(encoder_cfg, schema, cfg.double_precision)
    optimizer = make_optimizer(model, cfg.learning_rate)
    start_epoch = 0
    if resume_from is not None:
        model.load_state_dict(resume_from.model_state)
        if resume_from.optimizer_state is not None:
            optimizer.load_state_dict(resume_from.optimizer_state)
        constants = dict(resume_from.standardization) or constants
        standardized, _ = standardize(attributes, schema, constants=constants)
        ranges = numeric_ranges(standardized)
        start_epoch = resume_from.epoch
        logger.info(f"Resuming pre-training from epoch {start_epoch}")

    ablation = {"enable_uap": use_uap, "enable_srd": use_srd, "name": cfg.ablation}
    logger.info(
        f"Pre-training ({cfg.ablation}): {len(users)} users, vocab {ds.vocab_size}, "
        f"{cfg.num_epochs} epochs x {cfg.iterations_per_epoch} iterations, batch {cfg.batch_size}"
    )

    result = PretrainResult(checkpoints=[])
    last_checkpoint: Optional[Path] = None
    log_path = out_dir / "train_log.jsonl"
    mode = "a" if resume_from is not None else "w"

    def snapshot(epoch: int) -> Checkpoint:
        return Checkpoint(
            stage="pretrain",
            epoch=epoch,
            encoder_config=encoder_cfg,
            schema=schema,
            model_state=copy.deepcopy(model.state_dict()),
            standardization=constants,
            optimizer_state=copy.deepcopy(optimizer.state_dict()),
            config=cfg.model_dump(mode="json"),
            ablation=ablation,
            rng_state=torch.get_rng_state(),
            dtype="float64" if cfg.double_precision else "float32",
        )

    with open(log_path, mode) as log_file:
        for epoch in range(start_epoch + 1, cfg.num_epochs + 1):
            torch.manual_seed(epoch_seed(cfg.seed, epoch))
            model.train()
            sums = {"l_mip": 0.0, "l_uap": 0.0, "l_srd": 0.0, "l_total": 0.0}
            dropped_steps = 0
            producer = _pretrain_batches(cfg, epoch, sequences, users, graph if use_srd else None, standardized, ranges, use_srd)
            with BatchPrefetcher(producer, cfg.prefetch, name=f"pretrain-{epoch}") as batches:
                progress = tqdm(batches, total=cfg.iterations_per_epoch, desc=f"epoch {epoch}", disable=not SHOW_PROGRESS, leave=False)
                for iteration, step in enumerate(progress, start=1):
                    started = time.perf_counter()
                    optimizer.zero_grad(set_to_none=True)
                    masked = step.masked
                    hidden = model(masked.input_ids, masked.attention_mask)

                    l_mip = l_uap = l_srd = None
                    weights = [cfg.lambda1, cfg.lambda2 if use_uap else 0.0, cfg.lambda3 if use_srd else 0.0]
                    srd_dropped = use_srd and not bool(step.srd.negative_mask.any())
                    if srd_dropped:
                        logger.warning(
                            f"Epoch {epoch}, iteration {iteration}: every SRD query has all of its negatives "
                            f"masked; the SRD term is dropped for this step"
                        )
                        weights[2] = 0.0
                        dropped_steps += 1
                    if cfg.lambda1 > 0:
                        l_mip, _ = mip_loss(hidden, masked, model.mip_head, model.encoder.item_embeddings.weight)
                    if use_uap:
                        reprs = user_repr(hidden, masked.attention_mask)
                        l_uap = uap_loss(reprs, standardized.subset(step.users), schema, model.uap_head)
                    if use_srd and not srd_dropped:
                        srd_hidden = model(*step.srd_inputs)
                        srd_reprs = user_repr(srd_hidden, step.srd_inputs[1])
                        size = step.srd.size
                        l_srd, _ = srd_loss(step.srd, srd_reprs[:size], srd_reprs[size:], model.srd_head)

                    total = joint_loss(l_mip, l_uap, l_srd, *weights) if any(weights) else None
                    if total is not None:
                        if not bool(torch.isfinite(total)):
                            logger.error(f"Loss became non-finite at epoch {epoch}, iteration {iteration}")
                            raise TrainingDivergedError(
                                f"Non-finite loss at epoch {epoch}, iteration {iteration}",
                                last_checkpoint=str(last_checkpoint) if last_checkpoint else None,
                            )
                        total.backward()
                        try:
                            adam_step(model, optimizer, cfg.grad_clip)
                        except TrainingDivergedError as e:
                            e.last_checkpoint = str(last_checkpoint) if last_checkpoint else None
                            raise

                    record = TrainLogRecord(
                        epoch=epoch,
                        iter=iteration,
                        l_mip=None if l_mip is None else l_mip.item(),
                        l_uap=None if l_uap is None else l_uap.item(),
                        l_srd=None if l_srd is None else l_srd.item(),
                        l_total=0.0 if total is None else total.item(),
                        wall_ms=round(1000 * (time.perf_counter() - started), 3),
                        srd_dropped=srd_dropped,
                    )
                    log_file.write(record.model_dump_json() + "\n")
                    result.records.append(record)
                    for key in sums:
                        value = getattr(record, key)
                        sums[key] += 0.0 if value is None else value

            means = {key: value / cfg.iterations_per_epoch for key, value in sums.items()}
            result.epoch_losses.append({"epoch": epoch, **means, "srd_dropped": dropped_steps})
            logger.info(
                f"Epoch {epoch}: total {means['l_total']:.4f} (mip {means['l_mip']:.4f}, "
                f"uap {means['l_uap']:.4f}, srd {means['l_srd']:.4f})"
                + (f", SRD dropped in {dropped_steps} steps" if dropped_steps else "")
            )
            log_file.flush()

            if epoch % cfg.checkpoint_every == 0 or epoch == cfg.num_epochs:
                last_checkpoint = save_checkpoint(snapshot(epoch), checkpoint_path(out_dir, epoch))
                result.checkpoints.append(last_checkpoint)

    result.final = snapshot(max(start_epoch, cfg.num_epochs))
    return result


def initial_checkpoint(ds: InteractionDataset, schema: AttributeSchema, encoder: EncoderConfig, seed: int) -> Checkpoint:
    """Randomly initialized model, the starting point for training from scratch."""
    seed_everything(seed)
    encoder = encoder.model_copy(update={"vocab_size": ds.vocab_size})
    model = UPRecModel(encoder, schema)
    return Checkpoint(
        stage="scratch",
        epoch=0,
        encoder_config=encoder,
        schema=schema,
        model_state=copy.deepcopy(model.state_dict()),
        ablation={"enable_uap": False, "enable_srd": False, "name": "scratch"},
    )


def select_best(scores: Sequence[float]) -> int:
    """Index of the highest score; the earliest one wins ties."""
    best = 0
    for i, score in enumerate(scores):
        if score > scores[best]:
            best = i
    return best


@dataclass
class FinetuneResult:
    checkpoint: Checkpoint
    best_epoch: int
    valid_hr1: List[float] = field(default_factory=list)
    train_losses: List[float] = field(default_factory=list)


def _finetune_examples(split: LeaveOneOutSplit, rng: np.random.Generator, random_cut: bool) -> Tuple[List[List[int]], List[int]]:
    prefixes, targets = [], []
    for prefix in split.prefixes:
        if len(prefix) < 2:
            continue
        cut = int(rng.integers(1, len(prefix))) if random_cut else len(prefix) - 1
        prefixes.append(prefix[:cut])
        targets.append(prefix[cut])
    return prefixes, targets


def finetune_seqrec(
    checkpoint: Checkpoint,
    ds: InteractionDataset,
    split: LeaveOneOutSplit,
    cfg: FinetuneConfig,
) -> FinetuneResult:
    """
    Trains the encoder to predict a masked final item of training prefixes and
    keeps the epoch with the best valid HR@1 (earliest on ties).
    """
    if cfg.num_epochs == 0:
        return FinetuneResult(checkpoint=checkpoint, best_epoch=checkpoint.epoch)

    seed_everything(cfg.seed)
    model = checkpoint.build_model()
    optimizer = make_optimizer(model, cfg.learning_rate)
    max_len = checkpoint.encoder_config.max_len
    result = FinetuneResult(checkpoint=checkpoint, best_epoch=0)
    best_state = None

    for epoch in range(1, cfg.num_epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        torch.manual_seed(epoch_seed(cfg.seed, epoch))
        prefixes, targets = _finetune_examples(split, rng, cfg.random_cut)
        order = rng.permutation(len(prefixes))
        model.train()
        losses = []
        for start in tqdm(range(0, len(order), cfg.batch_size), desc=f"finetune {epoch}", disable=not SHOW_PROGRESS, leave=False):
            index = order[start:start + cfg.batch_size]
            batch = make_finetune_batch([prefixes[i] for i in index], [targets[i] for i in index], max_len)
            optimizer.zero_grad(set_to_none=True)
            hidden = model(batch.input_ids, batch.attention_mask)
            loss, _ = mip_loss(hidden, batch, model.mip_head, model.encoder.item_embeddings.weight)
            if not bool(torch.isfinite(loss)):
                raise TrainingDivergedError(f"Non-finite fine-tuning loss at epoch {epoch}")
            loss.backward()
            adam_step(model, optimizer, cfg.grad_clip)
            losses.append(loss.item())

        report = eval_seqrec(ModelScorer(model, max_len), split, ds, target="valid", n_neg=cfg.n_neg, seed=cfg.seed)
        result.valid_hr1.append(report.hr_1)
        result.train_losses.append(float(np.mean(losses)) if losses else 0.0)
        logger.info(f"Fine-tune epoch {epoch}: loss {result.train_losses[-1]:.4f}, valid HR@1 {report.hr_1:.4f}")
        if best_state is None or report.hr_1 > result.valid_hr1[result.best_epoch - 1]:
            best_state = copy.deepcopy(model.state_dict())
            result.best_epoch = epoch

    result.checkpoint = Checkpoint(
        stage="seqrec",
        epoch=result.best_epoch,
        encoder_config=checkpoint.encoder_config,
        schema=checkpoint.schema,
        model_state=best_state,
        standardization=checkpoint.standardization,
        config={"pretrain": checkpoint.config, "finetune": cfg.model_dump(mode="json")},
        ablation=checkpoint.ablation,
        dtype=checkpoint.dtype,
    )
    logger.info(f"Selected fine-tuning epoch {result.best_epoch} (valid HR@1 {max(result.valid_hr1):.4f})")
    return result


@dataclass
class ProfileResult:
    checkpoint: Checkpoint
    report: ProfileReport


def profile_targets(
    attributes: AttributeTable,
    schema: AttributeSchema,
    task: str,
    constants: Dict[str, Tuple[float, float]],
) -> Tuple[str, np.ndarray, Tuple[float, float]]:
    """Target column of one attribute; numeric targets come back standardized."""
    kind = schema.kind_of(task)
    if kind == "discrete":
        return kind, attributes.discrete[:, schema.discrete_names.index(task)].astype(np.int64), (0.0, 1.0)
    column = attributes.numeric[:, schema.numeric_names.index(task)]
    mean, std = constants[task]
    return kind, (column - mean) / std, (mean, std)


def cls_representations(model: UPRecModel, sequences: Sequence[Sequence[int]], max_len: int) -> torch.Tensor:
    input_ids, attention_mask = pad_tokens([wrap(s, max_len) for s in sequences])
    return profile_repr(model(input_ids, attention_mask))


def finetune_profile(
    checkpoint: Checkpoint,
    ds: InteractionDataset,
    attributes: AttributeTable,
    schema: AttributeSchema,
    cfg: ProfileConfig,
    train_users: Sequence[int],
    eval_users: Sequence[int],
) -> ProfileResult:
    """
    Trains a head on the CLS vector (and the encoder) to predict one attribute,
    then evaluates on held-out users only.
    """
    try:
        kind = schema.kind_of(cfg.task)
    except KeyError:
        raise DataError(f"Attribute '{cfg.task}' is not in the schema")

    seed_everything(cfg.seed)
    constants = dict(checkpoint.standardization)
    if kind == "numeric" and cfg.task not in constants:
        _, fitted = standardize(attributes, schema, users=train_users)
        constants[cfg.task] = fitted[cfg.task]
    _, targets, _ = profile_targets(attributes, schema, cfg.task, constants)
    present = targets >= 0 if kind == "discrete" else ~np.isnan(targets)
    users = np.asarray([u for u in train_users if present[u]], dtype=np.int64)
    if len(users) == 0:
        raise DataError(f"No training user has a value for '{cfg.task}'")

    model = checkpoint.build_model()
    outputs = 1 if kind == "numeric" else schema.discrete_cardinalities[schema.discrete_names.index(cfg.task)]
    head = ProfileHead(checkpoint.encoder_config.hidden_dim, outputs)
    if checkpoint.dtype == "float64":
        head = head.double()
    trainable = torch.nn.ModuleDict({"encoder": model, "head": head})
    optimizer = make_optimizer(trainable, cfg.learning_rate)
    max_len = checkpoint.encoder_config.max_len
    sequences = [training_sequence(s) for s in ds.sequences]
    dtype = torch.float64 if checkpoint.dtype == "float64" else torch.float32

    for epoch in range(1, cfg.num_epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        torch.manual_seed(epoch_seed(cfg.seed, epoch))
        order = users[rng.permutation(len(users))]
        model.train()
        head.train()
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch_users = order[start:start + cfg.batch_size]
            optimizer.zero_grad(set_to_none=True)
            out = head(cls_representations(model, [sequences[u] for u in batch_users], max_len))
            if kind == "numeric":
                loss = huber(out, torch.as_tensor(targets[batch_users], dtype=dtype)).mean()
            else:
                loss = F.cross_entropy(out, torch.as_tensor(targets[batch_users], dtype=torch.long))
            if not bool(torch.isfinite(loss)):
                logger.error(f"Profile fine-tuning loss became non-finite at epoch {epoch}")
                raise TrainingDivergedError(f"Non-finite profile fine-tuning loss at epoch {epoch}")
            loss.backward()
            adam_step(trainable, optimizer, cfg.grad_clip)
            losses.append(loss.item())
        logger.info(f"Profile fine-tune '{cfg.task}' epoch {epoch}: loss {np.mean(losses):.4f}")

    profile = {"task": cfg.task, "kind": kind, "outputs": outputs, "head_state": copy.deepcopy(head.state_dict())}
    result_checkpoint = Checkpoint(
        stage="profile",
        epoch=cfg.num_epochs,
        encoder_config=checkpoint.encoder_config,
        schema=schema,
        model_state=copy.deepcopy(model.state_dict()),
        standardization=constants,
        config={"pretrain": checkpoint.config, "profile": cfg.model_dump(mode="json")},
        ablation=checkpoint.ablation,
        profile=profile,
        dtype=checkpoint.dtype,
    )
    report = eval_profile(result_checkpoint, ds, attributes, schema, cfg.task, eval_users)
    return ProfileResult(checkpoint=result_checkpoint, report=report)
