"""Decoder-only transformer over the combined text+image vocabulary.

Sequence layout (fixed per config so image tokens always sit at the same
absolute positions)::

    <BOS> text... <PAD>... <BOI> [<REP>] image_1 ... image_hw <EOI>

Text is right-padded to the vocabulary's ``max_len``; pads are masked out of
attention and out of every loss.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from arralab.errors import ConfigError, ShapeError
from arralab.layers import Block
from arralab.numerics import load_tensors, save_tensors
from arralab.tokenizers import TextVocab

TEXT, BOI, IMAGE, REP, PAD, EOI = range(6)
ROLE_NAMES = ("text", "boi", "image", "rep", "pad", "eoi")
MECHANISMS = ("HYBNEXT", "REP", "none")
MODE_TAGS = ("text_only", "t2i")


@dataclass
class TokenSequence:
    ids: np.ndarray  # (n,) or (B, n) int64
    roles: np.ndarray  # same shape, role codes
    mask: np.ndarray  # same shape, True = attendable

    def __len__(self):
        return self.ids.shape[-1]

    @property
    def role_names(self) -> list[str]:
        return [ROLE_NAMES[r] for r in np.asarray(self.roles).reshape(-1)]


def sequence_length(text_len: int, n_image: int, mechanism: str) -> int:
    return text_len + 1 + (mechanism == "REP") + n_image + 1


def build_sequence(
    text_ids, image_ids, mechanism: str, vocab: TextVocab, n_image: int, text_mask=None
) -> TokenSequence:
    """Assemble one sequence or a batch (leading axis) from text ids (with BOS)
    and combined-vocabulary image ids."""
    if mechanism not in MECHANISMS:
        raise ConfigError(f"unknown alignment mechanism {mechanism!r}")
    text_ids = np.asarray(text_ids, dtype=np.int64)
    image_ids = np.asarray(image_ids, dtype=np.int64)
    if image_ids.shape[-1] != n_image:
        raise ShapeError("build_sequence", {"image_ids": image_ids.shape, "grid": (n_image,)})
    if text_mask is None:
        text_mask = text_ids != vocab.pad_id
    text_mask = np.asarray(text_mask, dtype=bool)
    lead = text_ids.shape[:-1]

    def const(v, n=1):
        return np.full(lead + (n,), v, dtype=np.int64)

    parts_ids = [text_ids, const(vocab.boi_id)]
    parts_roles = [np.where(text_mask, TEXT, PAD), const(BOI)]
    if mechanism == "REP":
        parts_ids.append(const(vocab.rep_id))
        parts_roles.append(const(REP))
    parts_ids += [image_ids, const(vocab.eoi_id)]
    parts_roles += [np.full(image_ids.shape, IMAGE, dtype=np.int64), const(EOI)]
    ids = np.concatenate(parts_ids, axis=-1)
    roles = np.concatenate(parts_roles, axis=-1)
    return TokenSequence(ids, roles, roles != PAD)


def target_mask(roles, loss_on_text: bool = False) -> torch.Tensor:
    """(…, n) roles -> (…, n-1) bool: which positions carry an AR target."""
    nxt = torch.as_tensor(np.asarray(roles))[..., 1:]
    m = (nxt == IMAGE) | (nxt == EOI)
    if loss_on_text:
        m = m | (nxt == TEXT)
    return m


@dataclass(frozen=True)
class ArConfig:
    vocab_size: int
    max_len: int
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    mlp_ratio: int = 4
    mode_tag: str = "t2i"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForwardOutput:
    logits: torch.Tensor  # (B, n, |V|)
    hidden: list[torch.Tensor]  # n_layers + 1 entries of (B, n, d_model)


class ArModel(nn.Module):
    def __init__(self, config: ArConfig):
        super().__init__()
        if config.mode_tag not in MODE_TAGS:
            raise ConfigError(f"unknown mode tag {config.mode_tag!r}")
        self.config = config
        self.tok_emb = nn.Embedding(config.vocab_size, config.d_model)
        self.pos_emb = nn.Parameter(torch.zeros(config.max_len, config.d_model))
        self.blocks = nn.ModuleList(
            Block(config.d_model, config.n_heads, config.mlp_ratio) for _ in range(config.n_layers)
        )
        self.ln_f = nn.LayerNorm(config.d_model)
        self.head = nn.Linear(config.d_model, config.vocab_size)

    def forward(self, ids, key_mask=None, caches=None) -> ForwardOutput:
        """Causal forward. With ``caches`` (one dict per block) only the new
        tokens are fed; earlier keys/values come from the cache."""
        ids = torch.as_tensor(ids, dtype=torch.long)
        if ids.dim() == 1:
            ids = ids.unsqueeze(0)
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.config.vocab_size):
            raise IndexError(f"token ids must lie in [0, {self.config.vocab_size})")
        start = 0
        if caches is not None and "k" in caches[0]:
            start = caches[0]["k"].shape[2]
        n = ids.shape[1]
        if start + n > self.config.max_len:
            raise ShapeError("forward", {"length": (start + n,), "max_len": (self.config.max_len,)})
        if key_mask is not None:
            key_mask = torch.as_tensor(key_mask, dtype=torch.bool)
            if key_mask.dim() == 1:
                key_mask = key_mask.unsqueeze(0)
        x = self.tok_emb(ids) + self.pos_emb[start : start + n]
        hidden = [x]
        for i, blk in enumerate(self.blocks):
            x = blk(x, causal=True, key_mask=key_mask, cache=None if caches is None else caches[i])
            hidden.append(x)
        return ForwardOutput(self.head(self.ln_f(x)), hidden)

    def new_caches(self) -> list[dict]:
        return [{} for _ in self.blocks]


def ar_loss(logits: torch.Tensor, ids, roles, loss_on_text: bool = False) -> torch.Tensor:
    """Mean next-token cross-entropy over positions whose target is an image
    token or <EOI> (plus text targets when ``loss_on_text``)."""
    ids = torch.as_tensor(ids, dtype=torch.long)
    if ids.dim() == 1:
        ids, logits, roles = ids.unsqueeze(0), logits.unsqueeze(0), np.asarray(roles)[None]
    m = target_mask(roles, loss_on_text).to(logits.dtype)
    v = logits.shape[-1]
    ce = F.cross_entropy(
        logits[:, :-1].reshape(-1, v), ids[:, 1:].reshape(-1), reduction="none"
    ).view(m.shape)
    return (ce * m).sum() / m.sum()


def z_loss(logits: torch.Tensor, mask=None) -> torch.Tensor:
    """Mean over masked rows of logsumexp(logits)^2."""
    lse2 = torch.logsumexp(logits, dim=-1) ** 2
    if mask is None:
        return lse2.mean()
    m = torch.as_tensor(mask).to(lse2.dtype)
    return (lse2 * m).sum() / m.sum()


def save_model(model: ArModel, path, extra: dict | None = None, meta: dict | None = None) -> None:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    tensors.update(extra or {})
    save_tensors(path, tensors, {"ar_config": model.config.to_dict(), **(meta or {})})


def load_model(path) -> tuple[ArModel, dict, dict]:
    """Returns ``(model, other_tensors, meta)``."""
    tensors, meta = load_tensors(path)
    model = ArModel(ArConfig(**meta["ar_config"]))
    own = {k[len("model.") :]: v for k, v in tensors.items() if k.startswith("model.")}
    model.load_state_dict(own)
    rest = {k: v for k, v in tensors.items() if not k.startswith("model.")}
    return model, rest, meta


@dataclass(frozen=True)
class Layout:
    """Fixed sequence geometry shared by training and sampling."""

    text_len: int
    grid: tuple[int, int]
    mechanism: str = "HYBNEXT"

    @property
    def n_image(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def image_start(self) -> int:
        return self.text_len + 1 + (self.mechanism == "REP")

    @property
    def length(self) -> int:
        return sequence_length(self.text_len, self.n_image, self.mechanism)
