"""Small in-repo foundation encoders used as alignment targets and metric
feature extractors.

* ``CrossModalEncoder``: image tower with a learned CLS row plus a text tower,
  trained with symmetric InfoNCE (CLIP analog).
* ``VisionOnlyEncoder``: same image trunk without CLS or text tower, trained by
  masked-patch reconstruction (SAM analog).

Both are frozen once pretrained.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from arralab.errors import ConfigError, ShapeError
from arralab.layers import Block
from arralab.numerics import RngStreams, init_module, load_tensors, save_tensors
from arralab.tokenizers import TextVocab, patchify

AGGREGATIONS = ("cls", "avgpool", "concat")
ENCODER_KINDS = ("cross_modal", "vision_only")
ZERO_NORM = 1e-8


class ZeroNormError(ValueError):
    pass


def l2_normalize(x: torch.Tensor) -> torch.Tensor:
    norm = x.norm(dim=-1, keepdim=True)
    if bool((norm < ZERO_NORM).any()):
        raise ZeroNormError("cannot normalize a vector with norm < 1e-8")
    return x / norm


@dataclass
class PatchFeatures:
    features: torch.Tensor  # (..., N, D)
    has_cls: bool

    @property
    def n(self) -> int:
        return self.features.shape[-2]

    @property
    def dim(self) -> int:
        return self.features.shape[-1]


def aggregate(f_F: PatchFeatures, mode: str) -> torch.Tensor:
    """Global visual representation, L2-normalized: (..., D) or (..., 2D)."""
    feats = f_F.features
    if mode not in AGGREGATIONS:
        raise ConfigError(f"unknown aggregation {mode!r}")
    if mode in ("cls", "concat") and not f_F.has_cls:
        raise ConfigError(f"aggregation {mode!r} needs a CLS row; features have none")
    patches = feats[..., 1:, :] if f_F.has_cls else feats
    if mode == "cls":
        out = feats[..., 0, :]
    elif mode == "avgpool":
        out = patches.mean(dim=-2)
    else:
        out = torch.cat([feats[..., 0, :], patches.mean(dim=-2)], dim=-1)
    return l2_normalize(out)


def target_width(dim: int, mode: str) -> int:
    return 2 * dim if mode == "concat" else dim


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "cross_modal"
    dim: int = 32
    patch: int = 8
    canvas: int = 32
    n_layers: int = 2
    n_heads: int = 4
    text_vocab: int = 0
    text_len: int = 24

    @property
    def n_patches(self) -> int:
        return (self.canvas // self.patch) ** 2


class _ImageTrunk(nn.Module):
    def __init__(self, cfg: EncoderConfig, with_cls: bool):
        super().__init__()
        self.cfg = cfg
        self.with_cls = with_cls
        self.patch_embed = nn.Linear(3 * cfg.patch**2, cfg.dim)
        n = cfg.n_patches + (1 if with_cls else 0)
        self.pos = nn.Parameter(torch.zeros(n, cfg.dim))
        if with_cls:
            self.cls = nn.Parameter(torch.zeros(1, cfg.dim))
        self.blocks = nn.ModuleList(Block(cfg.dim, cfg.n_heads) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.dim)

    def embed(self, images):
        images = torch.as_tensor(images, dtype=self.patch_embed.weight.dtype)
        if images.dim() == 3:
            images = images.unsqueeze(0)
        if images.shape[1:] != (self.cfg.canvas, self.cfg.canvas, 3):
            raise ShapeError(
                "encode_image_patches",
                {"image": tuple(images.shape[1:]), "expected": (self.cfg.canvas,) * 2 + (3,)},
            )
        x = patchify(images, self.cfg.patch)
        return self.patch_embed(x.reshape(x.shape[0], -1, x.shape[-1]))

    def run(self, tokens):
        if self.with_cls:
            cls = self.cls.expand(tokens.shape[0], 1, -1)
            tokens = torch.cat([cls, tokens], dim=1)
        x = tokens + self.pos
        for blk in self.blocks:
            x = blk(x)
        return self.ln_f(x)


class CrossModalEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.image = _ImageTrunk(cfg, with_cls=True)
        self.tok_emb = nn.Embedding(cfg.text_vocab, cfg.dim)
        self.text_pos = nn.Parameter(torch.zeros(cfg.text_len, cfg.dim))
        self.text_blocks = nn.ModuleList(Block(cfg.dim, cfg.n_heads) for _ in range(cfg.n_layers))
        self.text_ln = nn.LayerNorm(cfg.dim)
        self.logit_scale = nn.Parameter(torch.tensor(math.log(1 / 0.07)))

    def encode_image_patches(self, images) -> PatchFeatures:
        return PatchFeatures(self.image.run(self.image.embed(images)), has_cls=True)

    def encode_text(self, ids, mask) -> torch.Tensor:
        ids = torch.as_tensor(ids, dtype=torch.long)
        mask = torch.as_tensor(mask, dtype=torch.bool)
        x = self.tok_emb(ids) + self.text_pos[: ids.shape[1]]
        for blk in self.text_blocks:
            x = blk(x, key_mask=mask)
        x = self.text_ln(x)
        m = mask.unsqueeze(-1).to(x.dtype)
        return (x * m).sum(1) / m.sum(1)

    def image_embedding(self, images) -> torch.Tensor:
        return l2_normalize(self.encode_image_patches(images).features[:, 0])

    def text_embedding(self, ids, mask) -> torch.Tensor:
        return l2_normalize(self.encode_text(ids, mask))


class VisionOnlyEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.image = _ImageTrunk(cfg, with_cls=False)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, cfg.dim))
        self.recon_head = nn.Linear(cfg.dim, 3 * cfg.patch**2)

    def encode_image_patches(self, images, patch_mask=None) -> PatchFeatures:
        tokens = self.image.embed(images)
        if patch_mask is not None:
            m = torch.as_tensor(patch_mask, dtype=torch.bool).unsqueeze(-1)
            tokens = torch.where(m, self.mask_token.expand_as(tokens), tokens)
        return PatchFeatures(self.image.run(tokens), has_cls=False)


def build_encoder(cfg: EncoderConfig) -> nn.Module:
    if cfg.kind == "cross_modal":
        return CrossModalEncoder(cfg)
    if cfg.kind == "vision_only":
        return VisionOnlyEncoder(cfg)
    raise ConfigError(f"unknown encoder kind {cfg.kind!r}")


def save_encoder(encoder: nn.Module, path) -> None:
    cfg = encoder.cfg
    meta = {
        "encoder_kind": cfg.kind,
        "D": cfg.dim,
        "patch_size": cfg.patch,
        "config": asdict(cfg),
    }
    save_tensors(path, encoder.state_dict(), meta)


def load_encoder(path) -> nn.Module:
    tensors, meta = load_tensors(path)
    enc = build_encoder(EncoderConfig(**meta["config"]))
    enc.load_state_dict(tensors)
    enc.eval()
    enc.requires_grad_(False)
    return enc


# ---------------------------------------------------------------------------
# objectives


def clip_loss(img: torch.Tensor, txt: torch.Tensor, logit_scale: torch.Tensor) -> torch.Tensor:
    """Symmetric InfoNCE over matching rows of unit-normalized embeddings."""
    logits = logit_scale * (img @ txt.T)
    target = torch.arange(img.shape[0])
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


def contrastive_loss(encoder: CrossModalEncoder, images, text_ids, text_mask) -> torch.Tensor:
    if len(text_ids) < 2:
        raise ValueError("contrastive loss needs a batch of at least 2 pairs")
    scale = encoder.logit_scale.exp().clamp(max=100.0)
    return clip_loss(
        encoder.image_embedding(images), encoder.text_embedding(text_ids, text_mask), scale
    )


def masked_recon_loss(encoder: VisionOnlyEncoder, images, patch_mask) -> torch.Tensor:
    """L2 on masked patches; with nothing masked, plain autoencoding over all."""
    images = torch.as_tensor(images, dtype=encoder.recon_head.weight.dtype)
    patch_mask = torch.as_tensor(patch_mask, dtype=torch.bool)
    feats = encoder.encode_image_patches(images, patch_mask).features
    pred = encoder.recon_head(feats)
    target = patchify(images, encoder.cfg.patch).reshape(pred.shape)
    per_patch = ((pred - target) ** 2).mean(-1)
    if bool(patch_mask.any()):
        w = patch_mask.to(per_patch.dtype)
        return (per_patch * w).sum() / w.sum()
    return per_patch.mean()


def random_patch_mask(rng: np.random.Generator, batch: int, n: int, ratio: float) -> np.ndarray:
    k = int(round(ratio * n))
    mask = np.zeros((batch, n), dtype=bool)
    for i in range(batch):
        mask[i, rng.choice(n, size=k, replace=False)] = True
    return mask


@dataclass
class EncoderTrainConfig:
    steps: int = 2000
    batch_size: int = 64
    lr: float = 2e-3
    weight_decay: float = 0.01
    mask_ratio: float = 0.5
    seed: int = 0


class EncoderTrainer:
    def __init__(self, encoder: nn.Module, vocab: TextVocab | None, config=EncoderTrainConfig()):
        self.encoder = encoder
        self.vocab = vocab
        self.config = config
        self.rng = RngStreams(config.seed)
        init_module(encoder, self.rng.get(f"{encoder.cfg.kind}_init"))
        if isinstance(encoder, CrossModalEncoder):
            with torch.no_grad():
                encoder.logit_scale.fill_(math.log(1 / 0.07))
        self.opt = torch.optim.AdamW(
            encoder.parameters(), lr=config.lr, weight_decay=config.weight_decay
        )

    def contrastive_train_step(self, images, captions) -> float:
        ids, mask = self.vocab.encode_batch(captions)
        loss = contrastive_loss(self.encoder, images, ids, mask)
        self._update(loss)
        return loss.item()

    def recon_train_step(self, images) -> float:
        rng = self.rng.get("patch_mask")
        mask = random_patch_mask(rng, len(images), self.encoder.cfg.n_patches, self.config.mask_ratio)
        loss = masked_recon_loss(self.encoder, images, mask)
        self._update(loss)
        return loss.item()

    def _update(self, loss):
        self.encoder.train()
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()

    def fit(self, images: np.ndarray, captions: list[str], log=None) -> list[float]:
        rng = self.rng.get("encoder_data")
        history = []
        for _ in range(self.config.steps):
            idx = rng.choice(len(images), size=self.config.batch_size, replace=False)
            if isinstance(self.encoder, CrossModalEncoder):
                loss = self.contrastive_train_step(images[idx], [captions[i] for i in idx])
            else:
                loss = self.recon_train_step(images[idx])
            history.append(loss)
            if log is not None:
                log(loss)
        self.encoder.eval()
        self.encoder.requires_grad_(False)
        return history


@torch.no_grad()
def encode_text_global(encoder: CrossModalEncoder, vocab: TextVocab, captions) -> torch.Tensor:
    """Unit text embeddings, one row per caption."""
    if isinstance(captions, str):
        captions = [captions]
    ids, mask = vocab.encode_batch(captions)
    return encoder.text_embedding(ids, mask)


@torch.no_grad()
def global_features(encoder, images, mode: str, batch: int = 256) -> torch.Tensor:
    """f_GF for a stack of images, computed in chunks."""
    out = []
    for i in range(0, len(images), batch):
        out.append(aggregate(encoder.encode_image_patches(images[i : i + batch]), mode))
    return torch.cat(out) if out else torch.zeros(0)


@torch.no_grad()
def retrieval_accuracy(encoder: CrossModalEncoder, vocab: TextVocab, images, captions) -> float:
    img = global_features(encoder, images, "cls")
    txt = encode_text_global(encoder, vocab, captions)
    pred = (img @ txt.T).argmax(1)
    return float((pred == torch.arange(len(captions))).float().mean())
