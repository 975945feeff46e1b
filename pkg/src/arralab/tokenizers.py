"""Text tokenizer over the caption grammar and the patch-MLP VQ image tokenizer
(encoder, nearest-code quantizer, decoder) with its training loop."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from arralab.corpus import grammar_words
from arralab.errors import ShapeError, VocabError
from arralab.numerics import RngStreams, gelu, init_module, load_tensors, save_tensors

SPECIALS = ("<PAD>", "<BOS>", "<BOI>", "<EOI>", "<UNCOND>", "<REP>")


class TextVocab:
    """Word-level vocabulary; special tokens occupy ids 0..5."""

    def __init__(self, words=None, max_len: int = 24):
        words = list(words if words is not None else grammar_words())
        self.tokens = list(SPECIALS) + [w for w in words if w not in SPECIALS]
        self.ids = {t: i for i, t in enumerate(self.tokens)}
        self.max_len = max_len

    pad_id = property(lambda self: self.ids["<PAD>"])
    bos_id = property(lambda self: self.ids["<BOS>"])
    boi_id = property(lambda self: self.ids["<BOI>"])
    eoi_id = property(lambda self: self.ids["<EOI>"])
    uncond_id = property(lambda self: self.ids["<UNCOND>"])
    rep_id = property(lambda self: self.ids["<REP>"])

    def __len__(self):
        return len(self.tokens)

    def encode(self, caption: str) -> list[int]:
        ids = [self.bos_id]
        for w in caption.split():
            if w not in self.ids or w in SPECIALS:
                raise VocabError(w)
            ids.append(self.ids[w])
        if len(ids) > self.max_len:
            raise ValueError(f"caption needs {len(ids)} tokens, max is {self.max_len}")
        return ids

    def encode_padded(self, caption: str) -> tuple[np.ndarray, np.ndarray]:
        ids = self.encode(caption)
        out = np.full(self.max_len, self.pad_id, dtype=np.int64)
        out[: len(ids)] = ids
        mask = np.zeros(self.max_len, dtype=bool)
        mask[: len(ids)] = True
        return out, mask

    def encode_batch(self, captions) -> tuple[np.ndarray, np.ndarray]:
        pairs = [self.encode_padded(c) for c in captions]
        if not pairs:
            return np.zeros((0, self.max_len), np.int64), np.zeros((0, self.max_len), bool)
        return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])

    def decode(self, ids) -> str:
        words = [self.tokens[int(i)] for i in ids]
        return " ".join(w for w in words if w not in SPECIALS)

    def to_json(self) -> str:
        return json.dumps(self.ids)

    @classmethod
    def from_json(cls, text: str, max_len: int = 24) -> "TextVocab":
        ids = json.loads(text)
        words = [t for t, _ in sorted(ids.items(), key=lambda kv: kv[1])]
        if tuple(words[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("special tokens must hold the lowest ids")
        return cls(words[len(SPECIALS) :], max_len)


@dataclass(frozen=True)
class Vocabulary:
    """Combined vocabulary: text ids (incl. specials) then image code ids."""

    n_text: int
    n_codes: int

    @property
    def size(self) -> int:
        return self.n_text + self.n_codes

    def image_id(self, local):
        return local + self.n_text

    def is_image_token(self, token_id) -> bool:
        return self.n_text <= token_id < self.size

    def local_index(self, token_id) -> int:
        if not self.is_image_token(token_id):
            raise ValueError(f"id {token_id} is not an image token")
        return token_id - self.n_text


def rasterize(q, vocab: Vocabulary | None = None) -> np.ndarray:
    q = np.asarray(q)
    flat = q.reshape(*q.shape[:-2], -1)
    return vocab.image_id(flat) if vocab is not None else flat.copy()


def derasterize(s, h: int, w: int, vocab: Vocabulary | None = None) -> np.ndarray:
    s = np.asarray(s)
    if s.shape[-1] != h * w:
        raise ShapeError("derasterize", {"sequence": tuple(s.shape), "grid": (h, w)})
    if vocab is not None:
        s = s - vocab.n_text
    return s.reshape(*s.shape[:-1], h, w)


# ---------------------------------------------------------------------------
# VQ tokenizer


@dataclass(frozen=True)
class VqConfig:
    codebook_size: int = 64
    code_dim: int = 16
    factor: int = 8
    hidden: int = 256
    beta: float = 0.25


class StraightThrough(torch.autograd.Function):
    """Forward returns the code vectors exactly; backward copies the gradient
    onto the pre-quantization features."""

    @staticmethod
    def forward(ctx, f, z_q):
        return z_q.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def nearest_code(f: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
    """argmin_k ||f - Z_k||; ties resolve to the lowest index. Distances are
    accumulated in float64 so near-ties are not decided by rounding."""
    dist = ((f.double().unsqueeze(-2) - codebook.double()) ** 2).sum(-1)
    return dist.argmin(-1)


def patchify(images: torch.Tensor, c: int) -> torch.Tensor:
    """(B, H, W, C) -> (B, H/c, W/c, c*c*C)."""
    b, hh, ww, ch = images.shape
    if hh % c or ww % c:
        raise ShapeError("patchify", {"image": (hh, ww), "factor": (c, c)})
    x = images.reshape(b, hh // c, c, ww // c, c, ch).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, hh // c, ww // c, c * c * ch)


def unpatchify(patches: torch.Tensor, c: int, channels: int = 3) -> torch.Tensor:
    b, h, w, _ = patches.shape
    x = patches.reshape(b, h, w, c, c, channels).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h * c, w * c, channels)


class VqTokenizer(nn.Module):
    def __init__(self, config: VqConfig = VqConfig()):
        super().__init__()
        self.config = config
        pdim = 3 * config.factor**2
        self.enc1 = nn.Linear(pdim, config.hidden)
        self.enc2 = nn.Linear(config.hidden, config.code_dim)
        self.codebook = nn.Parameter(torch.zeros(config.codebook_size, config.code_dim))
        self.dec1 = nn.Linear(config.code_dim, config.hidden)
        self.dec2 = nn.Linear(config.hidden, pdim)
        self.register_buffer("usage", torch.zeros(config.codebook_size, dtype=torch.long))

    def encode(self, images) -> torch.Tensor:
        """(B, H, W, 3) -> feature grid (B, H/c, W/c, d)."""
        images = torch.as_tensor(images, dtype=self.enc1.weight.dtype)
        return self.enc2(gelu(self.enc1(patchify(images, self.config.factor))))

    def quantize(self, f: torch.Tensor):
        q = nearest_code(f, self.codebook)
        z_q = self.codebook[q]
        return q, StraightThrough.apply(f, z_q)

    def decode_latent(self, z: torch.Tensor) -> torch.Tensor:
        return unpatchify(self.dec2(gelu(self.dec1(z))), self.config.factor)

    @torch.no_grad()
    def tokenize(self, images) -> torch.Tensor:
        return self.quantize(self.encode(images))[0]

    @torch.no_grad()
    def decode(self, q) -> torch.Tensor:
        q = torch.as_tensor(q, dtype=torch.long)
        if q.numel() and (int(q.min()) < 0 or int(q.max()) >= self.config.codebook_size):
            raise IndexError(f"code ids must lie in [0, {self.config.codebook_size})")
        return self.decode_latent(self.codebook[q]).clamp(0.0, 1.0)

    def save(self, path, extra_meta=None) -> None:
        meta = {"kind": "vq_tokenizer", "config": asdict(self.config), **(extra_meta or {})}
        save_tensors(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path) -> "VqTokenizer":
        tensors, meta = load_tensors(path)
        model = cls(VqConfig(**meta["config"]))
        model.load_state_dict(tensors)
        model.eval()
        return model


@dataclass
class VqTrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    reseed_every: int = 100
    seed: int = 0


class VqTrainer:
    """Trains recon + codebook + beta * commit; codes unused over an interval
    are re-seeded from encoder outputs far from every live code."""

    def __init__(self, model: VqTokenizer, config: VqTrainConfig = VqTrainConfig()):
        self.model = model
        self.config = config
        self.rng = RngStreams(config.seed)
        init_module(model, self.rng.get("vq_init"), std=0.05)
        self.opt = torch.optim.Adam(model.parameters(), lr=config.lr)
        self.steps_done = 0
        self._initialized_codes = False

    def _seed_codes(self, idx: torch.Tensor, f: torch.Tensor) -> None:
        rng = self.rng.get("vq_reseed")
        flat = f.detach().reshape(-1, f.shape[-1])
        live = torch.ones(self.model.config.codebook_size, dtype=torch.bool)
        live[idx] = False
        with torch.no_grad():
            for k in idx.tolist():
                if live.any():
                    d = ((flat.unsqueeze(1) - self.model.codebook[live]) ** 2).sum(-1).min(1).values
                    p = d.double().numpy()
                else:
                    p = np.ones(flat.shape[0])
                p = p / p.sum() if p.sum() > 0 else np.full(len(p), 1.0 / len(p))
                j = int(rng.choice(len(p), p=p))
                self.model.codebook[k] = flat[j]
                live[k] = True

    def step(self, images) -> dict:
        model, cfg = self.model, self.model.config
        model.train()
        x = torch.as_tensor(images, dtype=torch.float32)
        f = model.encode(x)
        if not self._initialized_codes:
            self._seed_codes(torch.arange(cfg.codebook_size), f)
            self._initialized_codes = True
        q, z_st = model.quantize(f)
        recon = F.mse_loss(model.decode_latent(z_st), x)
        z_q = model.codebook[q]
        codebook_loss = F.mse_loss(z_q, f.detach())
        commit = F.mse_loss(f, z_q.detach())
        total = recon + codebook_loss + cfg.beta * commit
        self.opt.zero_grad()
        total.backward()
        self.opt.step()
        with torch.no_grad():
            model.usage += torch.bincount(q.reshape(-1), minlength=cfg.codebook_size)
        self.steps_done += 1
        if self.steps_done % self.config.reseed_every == 0:
            dead = (model.usage == 0).nonzero().reshape(-1)
            if len(dead):
                self._seed_codes(dead, model.encode(x))
            model.usage.zero_()
        return {
            "recon_loss": recon.item(),
            "codebook_loss": codebook_loss.item(),
            "commit_loss": (cfg.beta * commit).item(),
            "total": total.item(),
        }

    def fit(self, images: np.ndarray, log=None) -> list[dict]:
        rng = self.rng.get("vq_data")
        history = []
        for _ in range(self.config.steps):
            idx = rng.integers(0, len(images), size=self.config.batch_size)
            rec = self.step(images[idx])
            history.append(rec)
            if log is not None:
                log(rec)
        # usage over the final (partial) interval stays in the buffer
        return history


def save_vocab(vocab: TextVocab, path) -> None:
    Path(path).write_text(vocab.to_json(), encoding="utf-8")


def load_vocab(path, max_len: int = 24) -> TextVocab:
    return TextVocab.from_json(Path(path).read_text(encoding="utf-8"), max_len)
