"""Transformer encoder with local (intra-JD) and global (cross-JD) heads.

A JD tuple of ``L+1`` JDs is laid out as ``[CLS] item_1 .. item_M [SEP]`` per
JD, central JD first.  Local heads attend only within the query's own JD
block, global heads attend across the whole tuple; padded items are never
attended to.  Per position the ``N_l`` local and ``N_g`` global head outputs
are concatenated (local heads first) and merged by ``W_U``.  Sub-layers use
dropout, residual addition and post layer norm.  There are no positional
encodings: items are an unordered bag.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from .core import atomic_write_text
from .errors import ContractViolation, DomainError


@dataclass
class TupleSequence:
    tokens: torch.Tensor  # (B, T, d)
    local_mask: torch.Tensor  # (B, T, T) bool, True = may attend
    global_mask: torch.Tensor  # (B, T, T)
    n_jds: int
    max_items: int

    @property
    def block(self) -> int:
        return self.max_items + 2


def build_tuple_sequence(
    item_mats: torch.Tensor, item_mask: torch.Tensor, cls_token: torch.Tensor, sep_token: torch.Tensor
) -> TupleSequence:
    """Lay out a batch of tuples and build the local and global attention masks.

    ``item_mats`` is ``(B, L+1, M, d)`` (or ``(L+1, M, d)`` for one tuple),
    ``item_mask`` the matching boolean item mask.
    """
    if item_mats.dim() == 3:
        item_mats, item_mask = item_mats.unsqueeze(0), item_mask.unsqueeze(0)
    B, J, M, d = item_mats.shape
    cls = cls_token.view(1, 1, 1, d).expand(B, J, 1, d).to(item_mats.dtype)
    sep = sep_token.view(1, 1, 1, d).expand(B, J, 1, d).to(item_mats.dtype)
    tokens = torch.cat([cls, item_mats, sep], dim=2).reshape(B, J * (M + 2), d)

    always = torch.ones(B, J, 1, dtype=torch.bool, device=item_mask.device)
    valid = torch.cat([always, item_mask.bool(), always], dim=2).reshape(B, J * (M + 2))
    jd_of = torch.arange(J, device=item_mask.device).repeat_interleave(M + 2)
    same_jd = jd_of[:, None] == jd_of[None, :]
    global_mask = valid[:, None, :].expand(B, J * (M + 2), J * (M + 2))
    local_mask = global_mask & same_jd[None]
    return TupleSequence(tokens, local_mask, global_mask.clone(), J, M)


def attention_head(q, k, v, mask, scale=None, return_weights=False):
    """Masked scaled dot-product attention.

    Works for any leading batch dims: ``q`` is ``(..., T, dk)``, ``mask``
    broadcastable to ``(..., T, T)`` with True marking allowed keys.
    """
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[-1])
    scores = (q @ k.transpose(-2, -1)) * scale
    mask = mask.bool()
    if not bool(mask.any(dim=-1).all()):
        raise ContractViolation("a query row has no unmasked keys")
    scores = scores.masked_fill(~mask, float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    out = weights @ v
    return (out, weights) if return_weights else out


class EncoderLayer(nn.Module):
    def __init__(self, d: int, n_local: int, n_global: int, d_ff: int | None = None, dropout: float = 0.1):
        super().__init__()
        n_heads = n_local + n_global
        if n_heads < 1 or d % n_heads:
            raise DomainError(f"d={d} must be divisible by the head count {n_heads}")
        self.d, self.n_local, self.n_global = d, n_local, n_global
        self.n_heads = n_heads
        self.d_head = d // n_heads
        d_ff = d_ff or 4 * d
        # columns [h*d_head:(h+1)*d_head] of each projection belong to head h; local heads first
        self.w_q = nn.Linear(d, d, bias=False)
        self.w_k = nn.Linear(d, d, bias=False)
        self.w_v = nn.Linear(d, d, bias=False)
        self.w_u = nn.Linear(d, d, bias=False)
        self.ffn_in = nn.Linear(d, d_ff)
        self.ffn_out = nn.Linear(d_ff, d)
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.drop1 = nn.Dropout(dropout)
        self.drop2 = nn.Dropout(dropout)

    def head_masks(self, local_mask: torch.Tensor, global_mask: torch.Tensor) -> torch.Tensor:
        B, T, _ = local_mask.shape
        return torch.cat(
            [local_mask.unsqueeze(1).expand(B, self.n_local, T, T), global_mask.unsqueeze(1).expand(B, self.n_global, T, T)],
            dim=1,
        )

    def attend(self, x, local_mask, global_mask, return_weights=False):
        B, T, _ = x.shape

        def split(t):
            return t.view(B, T, self.n_heads, self.d_head).transpose(1, 2)

        q, k, v = split(self.w_q(x)), split(self.w_k(x)), split(self.w_v(x))
        out, weights = attention_head(
            q, k, v, self.head_masks(local_mask, global_mask), 1.0 / math.sqrt(self.d_head), return_weights=True
        )
        merged = out.transpose(1, 2).reshape(B, T, self.d)
        merged = self.w_u(merged)
        return (merged, weights) if return_weights else merged

    def forward(self, x, local_mask, global_mask, return_weights=False):
        att, weights = self.attend(x, local_mask, global_mask, return_weights=True)
        x = self.norm1(x + self.drop1(att))
        ff = self.ffn_out(torch.relu(self.ffn_in(x)))
        x = self.norm2(x + self.drop2(ff))
        return (x, weights) if return_weights else x


class SETransformer(nn.Module):
    """Stack of local-global encoder layers plus learned [CLS]/[SEP] tokens."""

    def __init__(
        self,
        d: int = 512,
        num_layers: int = 4,
        n_local: int = 6,
        n_global: int = 2,
        d_ff: int | None = None,
        dropout: float = 0.1,
    ):
        super().__init__()
        self.d = d
        self.cls_token = nn.Parameter(torch.zeros(d))
        self.sep_token = nn.Parameter(torch.zeros(d))
        self.layers = nn.ModuleList(EncoderLayer(d, n_local, n_global, d_ff, dropout) for _ in range(num_layers))

    def forward(self, item_mats, item_mask, return_attention=False):
        """Encode tuples; returns ``(B, L+1, M+1, d)`` with row 0 of each JD the [CLS] output."""
        squeeze = item_mats.dim() == 3
        seq = build_tuple_sequence(item_mats, item_mask, self.cls_token, self.sep_token)
        x = seq.tokens
        attentions = []
        for layer in self.layers:
            x, w = layer(x, seq.local_mask, seq.global_mask, return_weights=True)
            if return_attention:
                attentions.append(w)
        B = x.shape[0]
        out = x.view(B, seq.n_jds, seq.block, self.d)[:, :, : seq.max_items + 1]
        if squeeze:
            out = out[0]
        if return_attention:
            return out, attentions
        return out


def encode_tuple(transformer: SETransformer, item_mats, item_mask, mode: str = "eval"):
    """Per-JD representations ``[u_cls, u_1..u_M]`` for every member of a tuple."""
    if mode not in ("train", "eval"):
        raise DomainError(f"mode must be 'train' or 'eval', got {mode!r}")
    transformer.train(mode == "train")
    return transformer(item_mats, item_mask)


def cls_attention_rows(attentions, n_jds: int, max_items: int, item_mask: torch.Tensor) -> list[dict]:
    """Extract each JD's [CLS] attention over its own real items, per layer and head.

    ``attentions`` is the per-layer list returned by ``SETransformer`` for a
    single tuple (batch dim 1).  Returns one dict per JD:
    ``{"layers": [[[w_item1, ..], ..heads], ..layers]}``.
    """
    block = max_items + 2
    out = []
    for j in range(n_jds):
        n_real = int(item_mask[j].sum())
        cls_pos = j * block
        items = slice(cls_pos + 1, cls_pos + 1 + n_real)
        layers = [w[0, :, cls_pos, items].tolist() for w in attentions]
        out.append({"layers": layers})
    return out


def export_attention(path, records: list[dict]) -> Path:
    """Write attention rows as one JSON object per line."""
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    atomic_write_text(path, text)
    return Path(path)
