"""
Training Module for the event-grounding toolkit.

Per-head masked negative log-likelihood, the seeded training loop, periodic
evaluation through the decoder and metrics, a central-difference gradient
checker and versioned checkpoints.
"""

import copy
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import torch
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from src.config.config import RunConfig
from src.core.decoder import generate
from src.core.errors import ContractError, TrainingDivergedError
from src.core.events import Response, VideoSample
from src.core.metrics import MetricReport, evaluate_task
from src.core.sequence_codec import (
    SequenceLayout,
    build_prompt,
    build_sequence,
    factorized_logprob_spans,
)
from src.core.synthetic_data import SyntheticDataset
from src.core.tokenizers import TaskTag
from src.core.toy_net import (
    HEAD_TAGS,
    TAG_CODES,
    ToyBatch,
    ToyNet,
    ToyNetScorer,
    collate,
    parameter_groups,
)
from src.utils.logging_utils import get_logger

logger = get_logger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
# gradients smaller than this are compared on an absolute scale
GRAD_CHECK_FLOOR = 1e-4


@dataclass
class LossBreakdown:
    """Masked NLL of a batch split by head, plus per-position NLL for span sums."""
    total: torch.Tensor
    head_sums: Dict[TaskTag, torch.Tensor]
    head_counts: Dict[TaskTag, int]
    token_nll: torch.Tensor  # (B, L); NLL of token p at column p, 0 where not scored
    layouts: Tuple[Optional[SequenceLayout], ...] = ()

    @property
    def count(self) -> int:
        return sum(self.head_counts.values())

    def head_means(self) -> Dict[str, float]:
        return {
            head.value: (self.head_sums[head].item() / self.head_counts[head]) if self.head_counts[head] else 0.0
            for head in HEAD_TAGS
        }

    def event_factors(self) -> List[List[Tuple[float, float, float]]]:
        """Per sample, per event: NLL of its time, score and text spans."""
        out = []
        for row, layout in enumerate(self.layouts):
            if layout is None:
                out.append([])
                continue
            nll = self.token_nll[row]
            out.append([
                tuple(float(nll[span.start:span.end].sum().item()) for span in spans.as_tuple())
                for spans in factorized_logprob_spans(layout)
            ])
        return out


def loss(model: ToyNet, batch: ToyBatch) -> LossBreakdown:
    """
    Mean NLL over loss-masked positions; target p is scored by the head
    assigned to p-1 at position p-1.

    Raises:
        ContractError: empty batch or a sample with no scored positions
    """
    if len(batch) == 0:
        raise ContractError("empty batch")
    targets_mask = batch.loss_mask[:, 1:]
    if not bool(targets_mask.any(dim=1).all()):
        raise ContractError("every sample needs at least one loss-masked position")

    log_probs = model(batch)
    pred = log_probs[:, :-1]
    targets = torch.where(targets_mask, batch.token_ids[:, 1:], torch.zeros_like(batch.token_ids[:, 1:]))
    picked = pred.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    nll = torch.where(targets_mask, -picked, torch.zeros_like(picked))

    heads = batch.head_codes[:, :-1]
    head_sums = {}
    head_counts = {}
    for head in HEAD_TAGS:
        selected = targets_mask & (heads == TAG_CODES[head])
        head_sums[head] = torch.where(selected, nll, torch.zeros_like(nll)).sum()
        head_counts[head] = int(selected.sum().item())

    count = int(targets_mask.sum().item())
    token_nll = torch.cat([torch.zeros_like(nll[:, :1]), nll], dim=1)
    return LossBreakdown(
        total=nll.sum() / count,
        head_sums=head_sums,
        head_counts=head_counts,
        token_nll=token_nll,
        layouts=batch.layouts,
    )


def build_layouts(samples: Sequence[VideoSample], config: RunConfig) -> List[SequenceLayout]:
    """Training sequences of a dataset; samples longer than model_max_length are an error."""
    layouts = []
    for sample in samples:
        layout = build_sequence(sample, sample.gold, slots_per_frame=config.slots_per_frame,
                                k_max=config.k_max, append_stop=config.append_stop)
        if len(layout) > config.model_max_length:
            raise ContractError(
                f"{sample.video_id}: sequence of {len(layout)} positions exceeds model_max_length "
                f"{config.model_max_length}"
            )
        layouts.append(layout)
    return layouts


class EpochRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    epoch: int
    loss: float
    lr: float
    head_losses: Dict[str, float] = Field(default_factory=dict)
    eval_metrics: Dict[str, float] = Field(default_factory=dict)


class TrainResult(BaseModel):
    """Trained model plus its loss curve."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    model: ToyNet
    history: List[EpochRecord] = Field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.history[-1].loss if self.history else math.nan

    def loss_curve(self) -> List[float]:
        return [record.loss for record in self.history]


def predict(model: ToyNet, sample: VideoSample, config: RunConfig, seed: Optional[int] = None):
    """Decode one sample with the run's decoding settings."""
    prompt = build_prompt(sample, config.slots_per_frame)
    return generate(
        ToyNetScorer(model, sample),
        prompt,
        policy=config.decode_policy,
        constrained=config.constrained,
        max_new_tokens=config.max_new_tokens,
        max_length=config.model_max_length,
        k_max=config.k_max,
        top_k=config.top_k,
        seed=config.seed if seed is None else seed,
    )


def evaluate_model(model: ToyNet, samples: Sequence[VideoSample], config: RunConfig,
                   show_progress: bool = False) -> Tuple[MetricReport, List[Response]]:
    """Generate answers for samples and score them against their gold answers."""
    preds = []
    for sample in tqdm(samples, desc="Generating", disable=not show_progress, leave=False):
        preds.append(predict(model, sample, config).response)
    report = evaluate_task(samples[0].task_kind if samples else "dvc", preds, [s.gold for s in samples])
    return report, preds


def _make_scheduler(optimizer: torch.optim.Optimizer, config: RunConfig, total_steps: int):
    if config.lr_scheduler == "cosine":
        return torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=max(1, total_steps))
    return torch.optim.lr_scheduler.LambdaLR(optimizer, lambda _: 1.0)


def train(config: RunConfig, dataset: Union[SyntheticDataset, Sequence[VideoSample]],
          eval_samples: Optional[Sequence[VideoSample]] = None, show_progress: bool = True) -> TrainResult:
    """
    Train a ToyNet on a dataset.

    Args:
        config: Run configuration (optimizer, schedule, model sizes, seed)
        dataset: Training samples
        eval_samples: Samples decoded every config.eval_every epochs
        show_progress: Show tqdm bars

    Returns:
        TrainResult with the model and per-epoch history

    Raises:
        TrainingDivergedError: the loss became non-finite
    """
    samples = list(dataset.samples if isinstance(dataset, SyntheticDataset) else dataset)
    if not samples:
        raise ContractError("empty training set")

    torch.manual_seed(config.seed)
    model = ToyNet.from_config(config)
    layouts = build_layouts(samples, config)
    items = list(zip(layouts, samples))

    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    steps_per_epoch = math.ceil(len(items) / config.batch_size)
    scheduler = _make_scheduler(optimizer, config, steps_per_epoch * config.train_epochs)
    shuffler = torch.Generator().manual_seed(config.seed)

    history: List[EpochRecord] = []
    step = 0
    for epoch in range(1, config.train_epochs + 1):
        model.train()
        order = torch.randperm(len(items), generator=shuffler).tolist()
        epoch_sum = 0.0
        epoch_count = 0
        head_sums = {head: 0.0 for head in HEAD_TAGS}
        head_counts = {head: 0 for head in HEAD_TAGS}

        batches = range(0, len(order), config.batch_size)
        for start in tqdm(batches, desc=f"Epoch {epoch}", disable=not show_progress, leave=False):
            batch = collate([items[i] for i in order[start:start + config.batch_size]])
            breakdown = loss(model, batch)

            if not torch.isfinite(breakdown.total):
                raise TrainingDivergedError("non-finite training loss", {
                    "epoch": epoch,
                    "step": step,
                    "lr": scheduler.get_last_lr()[0],
                    "head_losses": breakdown.head_means(),
                })

            optimizer.zero_grad()
            breakdown.total.backward()
            optimizer.step()
            scheduler.step()
            step += 1

            epoch_sum += breakdown.total.item() * breakdown.count
            epoch_count += breakdown.count
            for head in HEAD_TAGS:
                head_sums[head] += breakdown.head_sums[head].item()
                head_counts[head] += breakdown.head_counts[head]

        record = {
            "epoch": epoch,
            "loss": epoch_sum / epoch_count,
            "lr": scheduler.get_last_lr()[0],
            "head_losses": {
                head.value: head_sums[head] / head_counts[head] if head_counts[head] else 0.0 for head in HEAD_TAGS
            },
        }
        if eval_samples and config.eval_every and epoch % config.eval_every == 0:
            model.eval()
            report, _ = evaluate_model(model, list(eval_samples)[:config.eval_samples], config)
            record["eval_metrics"] = report.metrics

        history.append(EpochRecord(**record))
        extra = f" eval={record['eval_metrics']}" if "eval_metrics" in record else ""
        logger.info(f"Epoch {epoch}/{config.train_epochs} loss={record['loss']:.4f} lr={record['lr']:.2e}{extra}")

    model.eval()
    return TrainResult(model=model, history=history)


class GroupCheck(BaseModel):
    model_config = ConfigDict(frozen=True)

    group: str
    checked: int
    max_rel_error: float
    grad_norm: float


class GradCheckReport(BaseModel):
    """Analytic vs central-difference gradients per parameter group."""
    model_config = ConfigDict(frozen=True)

    epsilon: float
    groups: Dict[str, GroupCheck]

    @property
    def max_rel_error(self) -> float:
        return max((g.max_rel_error for g in self.groups.values()), default=0.0)

    @property
    def grad_norm(self) -> float:
        return math.sqrt(sum(g.grad_norm ** 2 for g in self.groups.values()))


def grad_check(model: ToyNet, batch: ToyBatch, epsilon: float = 1e-5, samples_per_group: int = 200,
               seed: int = 0) -> GradCheckReport:
    """
    Compare analytic gradients with central differences in double precision.

    The model is copied; the caller's parameters are untouched. Entries are
    sampled uniformly per group (every entry when the group is small).
    """
    model = copy.deepcopy(model).double()
    model.eval()
    batch = batch.to(torch.float64)

    model.zero_grad()
    loss(model, batch).total.backward()

    generator = torch.Generator().manual_seed(seed)
    results = {}
    for group, named in parameter_groups(model).items():
        flat_sizes = [p.numel() for _, p in named]
        total = sum(flat_sizes)
        grads = torch.cat([
            (p.grad if p.grad is not None else torch.zeros_like(p)).reshape(-1) for _, p in named
        ])
        if total <= samples_per_group:
            picks = list(range(total))
        else:
            picks = torch.randperm(total, generator=generator)[:samples_per_group].tolist()

        worst = 0.0
        for flat_index in picks:
            param, local = _locate(named, flat_sizes, flat_index)
            data = param.data.view(-1)
            original = data[local].item()
            with torch.no_grad():
                data[local] = original + epsilon
                plus = loss(model, batch).total.item()
                data[local] = original - epsilon
                minus = loss(model, batch).total.item()
                data[local] = original
            numeric = (plus - minus) / (2 * epsilon)
            analytic = grads[flat_index].item()
            rel = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), GRAD_CHECK_FLOOR)
            worst = max(worst, rel)

        results[group] = GroupCheck(
            group=group,
            checked=len(picks),
            max_rel_error=worst,
            grad_norm=float(grads.norm().item()),
        )
        logger.debug(f"grad check {group}: {len(picks)} entries, max rel error {worst:.2e}")

    return GradCheckReport(epsilon=epsilon, groups=results)


def _locate(named, sizes: List[int], flat_index: int):
    for (_, param), size in zip(named, sizes):
        if flat_index < size:
            return param, flat_index
        flat_index -= size
    raise IndexError(flat_index)


def save_checkpoint(path: Union[str, Path], model: ToyNet, config: RunConfig) -> Path:
    """Write {format_version, config, groups} with one tensor dict per parameter group."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    groups = {
        group: {name: param.detach().cpu().clone() for name, param in named}
        for group, named in parameter_groups(model).items()
    }
    torch.save({
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": config.model_dump(mode="json"),
        "groups": groups,
    }, path)
    logger.info(f"Saved checkpoint to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[ToyNet, RunConfig]:
    """
    Rebuild the model and its run config from a checkpoint.

    Raises:
        ContractError: unknown format version or missing parameters
    """
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ContractError(f"unsupported checkpoint format version {version!r}")

    config = RunConfig(**payload["config"])
    model = ToyNet.from_config(config)
    state = {}
    for tensors in payload["groups"].values():
        state.update(tensors)
    missing, unexpected = model.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise ContractError(f"checkpoint does not match the model: missing {missing}, unexpected {unexpected}")
    model.eval()
    return model, config
