"""Shared convolutional encoder for single JD items.

Each item (a short token sequence) goes through two 1-D convolution branches
with window sizes 2 and 3.  Per branch: embedding -> valid convolution ->
batch norm -> ReLU -> max-pool over positions.  The two pooled vectors are
concatenated and projected back to width ``d``.

Every item is left-padded with ``w - 1`` pad ids for window ``w``, so even a
one-token item yields a window, and appending a token only ever adds
windows.  The max-pooled activations are therefore monotone under
appending, and for a repeated single token they stop changing once the
item is as long as the widest window.  Batch-norm statistics are computed
over the valid (item, position) pairs of the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .core import PAD_ID, JobDescription, TokenizedItem
from .errors import DomainError

WINDOWS = (2, 3)


class MaskedBatchNorm1d(nn.Module):
    """Batch norm over channels of ``(n, channels, positions)`` with a position mask.

    ``momentum`` follows the running-average convention
    ``running = momentum * running + (1 - momentum) * batch``.
    """

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if self.training:
            m = mask.unsqueeze(1).to(x.dtype)
            count = m.sum()
            mean = (x * m).sum(dim=(0, 2)) / count
            var = (((x - mean[None, :, None]) ** 2) * m).sum(dim=(0, 2)) / count
            with torch.no_grad():
                unbiased = var * count / (count - 1) if count > 1 else var
                self.running_mean.mul_(self.momentum).add_((1 - self.momentum) * mean.detach())
                self.running_var.mul_(self.momentum).add_((1 - self.momentum) * unbiased.detach())
        else:
            mean, var = self.running_mean, self.running_var
        x_hat = (x - mean[None, :, None]) / torch.sqrt(var[None, :, None] + self.eps)
        return x_hat * self.weight[None, :, None] + self.bias[None, :, None]


@dataclass
class ItemBatch:
    """Collated token tensors, one ``(n_items, length)`` tensor per window."""

    tokens: list[torch.Tensor]
    valid: list[torch.Tensor]

    def __len__(self):
        return self.tokens[0].shape[0]


def collate_items(items: Sequence[TokenizedItem | Sequence[int]], windows=WINDOWS) -> ItemBatch:
    seqs = [it.token_ids if isinstance(it, TokenizedItem) else tuple(it) for it in items]
    if any(len(s) == 0 for s in seqs):
        raise DomainError("items must contain at least one token")
    tokens, valid = [], []
    lengths = np.array([len(s) for s in seqs])
    for w in windows:
        width = int(lengths.max()) + w - 1 if len(seqs) else w
        arr = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
        for i, s in enumerate(seqs):
            arr[i, w - 1:w - 1 + len(s)] = s  # w - 1 leading pads, trailing pads are masked out
        n_pos = width - w + 1
        tokens.append(torch.from_numpy(arr))
        valid.append(torch.from_numpy(np.arange(n_pos)[None, :] < lengths[:, None]))
    return ItemBatch(tokens, valid)


class ItemEncoder(nn.Module):
    def __init__(
        self,
        vocab_size: int,
        d: int,
        windows: Sequence[int] = WINDOWS,
        use_batchnorm: bool = True,
        bn_momentum: float = 0.9,
    ):
        super().__init__()
        self.vocab_size = vocab_size
        self.d = d
        self.windows = tuple(windows)
        self.use_batchnorm = use_batchnorm
        self.embedding = nn.Embedding(vocab_size, d, padding_idx=PAD_ID)
        # batch norm cancels a conv bias, so the branches only carry one without it
        self.convs = nn.ModuleList(nn.Conv1d(d, d, w, bias=not use_batchnorm) for w in self.windows)
        self.norms = nn.ModuleList(MaskedBatchNorm1d(d, bn_momentum) for _ in self.windows)
        self.proj = nn.Linear(len(self.windows) * d, d)

    def branch_activations(self, batch: ItemBatch) -> list[torch.Tensor]:
        """Per-branch activations after ReLU, ``(n, d, positions)``; invalid positions are 0."""
        outs = []
        for conv, norm, tok, valid in zip(self.convs, self.norms, batch.tokens, batch.valid):
            if tok.numel() and (int(tok.max()) >= self.vocab_size or int(tok.min()) < 0):
                raise DomainError(f"token id outside vocabulary of size {self.vocab_size}")
            x = self.embedding(tok).transpose(1, 2)  # (n, d, len)
            h = conv(x)
            if self.use_batchnorm:
                h = norm(h, valid)
            h = torch.relu(h)
            # relu output is >= 0, so zero-filling invalid positions leaves the max intact
            outs.append(h.masked_fill(~valid.unsqueeze(1), 0.0))
        return outs

    def pooled(self, batch: ItemBatch) -> torch.Tensor:
        """Per-branch pooled activations before the projection, ``(n, branches*d)``."""
        return torch.cat([h.max(dim=2).values for h in self.branch_activations(batch)], dim=1)

    def forward(self, batch: ItemBatch) -> torch.Tensor:
        return self.proj(self.pooled(batch))

    def encode_items(self, items: Sequence[TokenizedItem]) -> torch.Tensor:
        return self(collate_items(items, self.windows))


def encode_item(encoder: ItemEncoder, item: TokenizedItem, mode: str = "eval") -> torch.Tensor:
    """Encode one item to a ``d``-vector (``mode`` is ``"train"`` or ``"eval"``)."""
    _set_mode(encoder, mode)
    return encoder.encode_items([item])[0]


def encode_all_items(
    encoder: ItemEncoder, jd: JobDescription, max_items: int, mode: str = "eval"
) -> tuple[torch.Tensor, torch.Tensor]:
    """Return the ``(max_items, d)`` item matrix of a JD and its boolean item mask."""
    _set_mode(encoder, mode)
    items = jd.items[:max_items]
    enc = encoder.encode_items(items)
    out = enc.new_zeros(max_items, encoder.d)
    out[: len(items)] = enc
    mask = torch.zeros(max_items, dtype=torch.bool)
    mask[: len(items)] = True
    return out, mask


def _set_mode(module: nn.Module, mode: str) -> None:
    if mode not in ("train", "eval"):
        raise DomainError(f"mode must be 'train' or 'eval', got {mode!r}")
    module.train(mode == "train")
