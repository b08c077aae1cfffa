"""
Toy Network Module for the event-grounding toolkit.

A small autoregressive transformer with one embedding table and one decoding
head per task (time, score, text). Frames enter through a learned-query
compressor that turns each frame's patch features into a fixed number of
visual slot embeddings; visual tokens in the sequence index those slots.
"""

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
from torch.nn import functional as F

from src.config.config import RunConfig
from src.core.errors import ContractError
from src.core.events import VideoSample
from src.core.sequence_codec import SequenceLayout
from src.core.tokenizers import (
    DIGIT_SYMBOLS,
    DOT,
    SCORE_VOCAB,
    TEXT_VOCAB,
    TIME_VOCAB,
    VOCABS,
    TaskTag,
    TokenSeq,
    text_tokenize,
)
from src.utils.logging_utils import get_logger

logger = get_logger(__name__)

TAG_CODES: Dict[TaskTag, int] = {TaskTag.VISUAL: 0, TaskTag.TIME: 1, TaskTag.SCORE: 2, TaskTag.TEXT: 3}
HEAD_TAGS: Tuple[TaskTag, ...] = (TaskTag.TIME, TaskTag.SCORE, TaskTag.TEXT)
PAD_CODE = -1
NO_HEAD = -1
OUTPUT_WIDTH = max(len(VOCABS[tag]) for tag in HEAD_TAGS)

PARAMETER_GROUPS: Dict[str, Tuple[str, ...]] = {
    "compressor": ("compressor.",),
    "embed_time": ("embed_time.",),
    "embed_score": ("embed_score.",),
    "embed_text": ("embed_text.",),
    "pos_embed": ("pos_embed.",),
    "trunk": ("blocks.", "ln_f."),
    "head_time": ("head_time.",),
    "head_score": ("head_score.",),
    "head_text": ("head_text.",),
}


class FrameCompressor(nn.Module):
    """
    Learned queries cross-attend over a frame's patches, one output slot per query.

    (..., T, N_patch, D) -> (..., T, slots, d_model)
    """

    def __init__(self, feature_dim: int, d_model: int, slots: int):
        super().__init__()
        self.feature_dim = feature_dim
        self.slots = slots
        self.queries = nn.Parameter(torch.randn(slots, d_model) * 0.02)
        self.to_k = nn.Linear(feature_dim, d_model, bias=False)
        self.to_v = nn.Linear(feature_dim, d_model, bias=False)
        self.proj = nn.Linear(d_model, d_model)
        nn.init.zeros_(self.proj.bias)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.dim() < 3 or features.shape[-1] != self.feature_dim:
            raise ContractError(
                f"frame features must be (..., T, N_patch, {self.feature_dim}), got {tuple(features.shape)}"
            )
        k = self.to_k(features)
        v = self.to_v(features)
        att = torch.einsum("sd,...nd->...sn", self.queries, k) * (1.0 / math.sqrt(k.size(-1)))
        att = F.softmax(att, dim=-1)
        slots = torch.einsum("...sn,...nd->...sd", att, v)
        return self.proj(slots)


class CausalSelfAttention(nn.Module):

    def __init__(self, d_model: int, n_heads: int, max_length: int):
        super().__init__()
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)
        self.n_heads = n_heads
        self.d_model = d_model
        self.register_buffer(
            "causal", torch.tril(torch.ones(max_length, max_length, dtype=torch.bool)), persistent=False
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, L, C = x.size()
        q, k, v = self.qkv(x).split(self.d_model, dim=2)
        q = q.view(B, L, self.n_heads, C // self.n_heads).transpose(1, 2)
        k = k.view(B, L, self.n_heads, C // self.n_heads).transpose(1, 2)
        v = v.view(B, L, self.n_heads, C // self.n_heads).transpose(1, 2)

        att = (q @ k.transpose(-2, -1)) * (1.0 / math.sqrt(k.size(-1)))
        att = att.masked_fill(~self.causal[:L, :L], float("-inf"))
        att = F.softmax(att, dim=-1)
        y = (att @ v).transpose(1, 2).contiguous().view(B, L, C)
        return self.out(y)


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, d_model: int, n_heads: int, max_length: int):
        super().__init__()
        self.ln_1 = nn.LayerNorm(d_model)
        self.attn = CausalSelfAttention(d_model, n_heads, max_length)
        self.ln_2 = nn.LayerNorm(d_model)
        self.mlp = nn.Sequential(
            nn.Linear(d_model, 4 * d_model),
            nn.GELU(),
            nn.Linear(4 * d_model, d_model),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln_1(x))
        x = x + self.mlp(self.ln_2(x))
        return x


@dataclass
class ToyBatch:
    """Right-padded batch of built sequences with their frame features."""
    token_ids: torch.Tensor   # (B, L) long, 0 at padding
    tag_codes: torch.Tensor   # (B, L) long, PAD_CODE at padding
    head_codes: torch.Tensor  # (B, L) long, NO_HEAD where no head predicts the next token
    loss_mask: torch.Tensor   # (B, L) bool
    features: torch.Tensor    # (B, T, N_patch, D)
    layouts: Tuple[Optional[SequenceLayout], ...] = ()

    def __len__(self) -> int:
        return self.token_ids.shape[0]

    def to(self, dtype: torch.dtype) -> "ToyBatch":
        return ToyBatch(self.token_ids, self.tag_codes, self.head_codes, self.loss_mask,
                        self.features.to(dtype), self.layouts)


def _stack_features(samples: Sequence[VideoSample], dtype: torch.dtype) -> torch.Tensor:
    shapes = {sample.frame_features.shape for sample in samples}
    if len(shapes) != 1:
        raise ContractError(f"samples in one batch must share a frame feature shape, got {sorted(shapes)}")
    return torch.from_numpy(np.stack([sample.frame_features for sample in samples])).to(dtype)


def collate_tokens(
    sequences: Sequence[TokenSeq],
    samples: Sequence[VideoSample],
    head_assign: Optional[Sequence[Sequence[Optional[TaskTag]]]] = None,
    loss_mask: Optional[Sequence[Sequence[bool]]] = None,
    layouts: Optional[Sequence[SequenceLayout]] = None,
    dtype: torch.dtype = torch.float32,
) -> ToyBatch:
    """Pad token sequences into tensors; missing heads/masks default to none/False."""
    if not sequences:
        raise ContractError("empty batch")
    if len(sequences) != len(samples):
        raise ContractError(f"{len(sequences)} sequences for {len(samples)} samples")

    width = max(len(seq) for seq in sequences)
    token_ids = torch.zeros(len(sequences), width, dtype=torch.long)
    tag_codes = torch.full((len(sequences), width), PAD_CODE, dtype=torch.long)
    head_codes = torch.full((len(sequences), width), NO_HEAD, dtype=torch.long)
    mask = torch.zeros(len(sequences), width, dtype=torch.bool)

    for row, seq in enumerate(sequences):
        n = len(seq)
        token_ids[row, :n] = torch.tensor(seq.ids, dtype=torch.long)
        tag_codes[row, :n] = torch.tensor([TAG_CODES[tag] for tag in seq.tags], dtype=torch.long)
        if head_assign is not None:
            head_codes[row, :n] = torch.tensor(
                [TAG_CODES[head] if head is not None else NO_HEAD for head in head_assign[row]], dtype=torch.long
            )
        if loss_mask is not None:
            mask[row, :n] = torch.tensor(list(loss_mask[row]), dtype=torch.bool)

    return ToyBatch(
        token_ids=token_ids,
        tag_codes=tag_codes,
        head_codes=head_codes,
        loss_mask=mask,
        features=_stack_features(samples, dtype),
        layouts=tuple(layouts) if layouts is not None else (None,) * len(sequences),
    )


def collate(items: Sequence[Tuple[SequenceLayout, VideoSample]], dtype: torch.dtype = torch.float32) -> ToyBatch:
    """Batch (layout, sample) pairs for training."""
    layouts = [layout for layout, _ in items]
    return collate_tokens(
        [layout.tokens for layout in layouts],
        [sample for _, sample in items],
        head_assign=[layout.head_assign for layout in layouts],
        loss_mask=[layout.loss_mask for layout in layouts],
        layouts=layouts,
        dtype=dtype,
    )


class ToyNet(nn.Module):
    """
    Frame compressor, per-task embeddings, causal trunk and per-task heads.

    forward returns (B, L, OUTPUT_WIDTH) log-probabilities. Row p comes from
    the head assigned to p; columns past that head's vocabulary are -inf.
    Rows with no assigned head are zero.
    """

    def __init__(self, feature_dim: int, d_model: int = 64, n_layers: int = 2, n_heads: int = 4,
                 slots_per_frame: int = 8, max_length: int = 4096):
        super().__init__()
        if d_model % n_heads != 0:
            raise ContractError(f"d_model {d_model} is not divisible by n_heads {n_heads}")
        self.slots_per_frame = slots_per_frame
        self.max_length = max_length
        self.d_model = d_model

        self.compressor = FrameCompressor(feature_dim, d_model, slots_per_frame)
        self.embed_time = nn.Embedding(len(TIME_VOCAB), d_model)
        self.embed_score = nn.Embedding(len(SCORE_VOCAB), d_model)
        self.embed_text = nn.Embedding(len(TEXT_VOCAB), d_model)
        self.pos_embed = nn.Embedding(max_length, d_model)
        self.blocks = nn.ModuleList([Block(d_model, n_heads, max_length) for _ in range(n_layers)])
        self.ln_f = nn.LayerNorm(d_model)
        self.head_time = nn.Linear(d_model, len(TIME_VOCAB))
        self.head_score = nn.Linear(d_model, len(SCORE_VOCAB))
        self.head_text = nn.Linear(d_model, len(TEXT_VOCAB))

        self.apply(self._init_weights)
        self._init_digit_rows()

    @classmethod
    def from_config(cls, config: RunConfig) -> "ToyNet":
        return cls(
            feature_dim=config.feature_dim,
            d_model=config.d_model,
            n_layers=config.n_layers,
            n_heads=config.n_heads,
            slots_per_frame=config.slots_per_frame,
            max_length=config.model_max_length,
        )

    def _init_weights(self, module: nn.Module) -> None:
        if isinstance(module, nn.Linear):
            nn.init.normal_(module.weight, mean=0.0, std=0.02)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.Embedding):
            nn.init.normal_(module.weight, mean=0.0, std=0.02)

    @torch.no_grad()
    def _init_digit_rows(self) -> None:
        # digit and dot rows start from the text embedding of the same character
        for table, vocab in ((self.embed_time, TIME_VOCAB), (self.embed_score, SCORE_VOCAB)):
            for symbol in DIGIT_SYMBOLS + (DOT,):
                text_row = text_tokenize(symbol).ids[0]
                table.weight[vocab.id_of(symbol)] = self.embed_text.weight[text_row]

    def head_layer(self, head: TaskTag) -> nn.Linear:
        return {TaskTag.TIME: self.head_time, TaskTag.SCORE: self.head_score, TaskTag.TEXT: self.head_text}[head]

    def compress_frames(self, features: torch.Tensor) -> torch.Tensor:
        """(B, T, N_patch, D) -> (B, T, slots_per_frame, d_model)."""
        return self.compressor(features)

    def embed(self, batch: ToyBatch) -> torch.Tensor:
        B, L = batch.token_ids.shape
        if L > self.max_length:
            raise ContractError(f"sequence length {L} exceeds model_max_length {self.max_length}")

        slots = self.compress_frames(batch.features)
        slots = slots.reshape(B, -1, self.d_model)
        ids = batch.token_ids
        codes = batch.tag_codes

        visual = codes == TAG_CODES[TaskTag.VISUAL]
        if bool((ids[visual] >= slots.shape[1]).any()):
            raise ContractError(f"visual token indexes a slot beyond the {slots.shape[1]} compressed slots")

        x = torch.zeros(B, L, self.d_model, dtype=slots.dtype, device=slots.device)
        slot_index = torch.where(visual, ids, torch.zeros_like(ids))
        gathered = slots.gather(1, slot_index.unsqueeze(-1).expand(-1, -1, self.d_model))
        x = torch.where(visual.unsqueeze(-1), gathered, x)

        for tag, table in ((TaskTag.TIME, self.embed_time), (TaskTag.SCORE, self.embed_score),
                           (TaskTag.TEXT, self.embed_text)):
            selected = codes == TAG_CODES[tag]
            if bool((ids[selected] >= table.num_embeddings).any()):
                raise ContractError(f"token id outside the {tag.value} table")
            rows = table(torch.where(selected, ids, torch.zeros_like(ids)))
            x = torch.where(selected.unsqueeze(-1), rows, x)

        positions = torch.arange(L, device=ids.device)
        return x + self.pos_embed(positions).unsqueeze(0)

    def hidden(self, batch: ToyBatch) -> torch.Tensor:
        x = self.embed(batch)
        for block in self.blocks:
            x = block(x)
        return self.ln_f(x)

    def head_log_probs(self, h: torch.Tensor, head: TaskTag) -> torch.Tensor:
        return F.log_softmax(self.head_layer(head)(h), dim=-1)

    def forward(self, batch: ToyBatch) -> torch.Tensor:
        h = self.hidden(batch)
        B, L, _ = h.shape
        out = torch.zeros(B, L, OUTPUT_WIDTH, dtype=h.dtype, device=h.device)
        for head in HEAD_TAGS:
            log_probs = self.head_log_probs(h, head)
            pad = OUTPUT_WIDTH - log_probs.shape[-1]
            if pad:
                log_probs = F.pad(log_probs, (0, pad), value=float("-inf"))
            selected = (batch.head_codes == TAG_CODES[head]).unsqueeze(-1)
            out = torch.where(selected, log_probs, out)
        return out


def parameter_groups(model: ToyNet) -> Dict[str, List[Tuple[str, nn.Parameter]]]:
    """Named parameters of the model split into the checkpoint/grad-check groups."""
    groups: Dict[str, List[Tuple[str, nn.Parameter]]] = {name: [] for name in PARAMETER_GROUPS}
    for name, param in model.named_parameters():
        for group, prefixes in PARAMETER_GROUPS.items():
            if name.startswith(prefixes):
                groups[group].append((name, param))
                break
        else:
            raise ContractError(f"parameter {name} belongs to no group")
    return groups


class ToyNetScorer:
    """Adapts a ToyNet to the decoder's next-token interface by rescoring the prefix."""

    def __init__(self, model: ToyNet, sample: VideoSample):
        self.model = model
        self.sample = sample
        self.dtype = next(model.parameters()).dtype

    @torch.no_grad()
    def next_token_logits(self, prefix: TokenSeq, head: TaskTag) -> torch.Tensor:
        was_training = self.model.training
        self.model.eval()
        batch = collate_tokens([prefix], [self.sample], dtype=self.dtype)
        h = self.model.hidden(batch)
        if was_training:
            self.model.train()
        return self.model.head_log_probs(h[0, -1], head)
