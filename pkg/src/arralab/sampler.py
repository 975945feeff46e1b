"""Autoregressive image-token sampling with classifier-free guidance.

Only the AR model, the text vocabulary and the VQ decoder take part in
generation; projection heads and foundation encoders never enter this path.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from arralab.armodel import ArModel, Layout, build_sequence
from arralab.errors import ConfigError
from arralab.numerics import RngStreams
from arralab.tokenizers import TextVocab, Vocabulary, VqTokenizer, derasterize


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class SampleConfig:
    temperature: float = 1.0
    top_k: int = 32
    cfg_scale: float = 2.0
    greedy: bool = False
    seed: int = 0
    use_cache: bool = True

    def validate(self, n_codes: int | None = None) -> None:
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0 (use greedy=True for argmax)")
        if self.top_k < 1 or (n_codes is not None and self.top_k > n_codes):
            raise ConfigError(f"top_k must lie in 1..{n_codes}")
        if self.cfg_scale < 0:
            raise ConfigError("cfg_scale must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def cfg_logits(cond, uncond, scale: float):
    """Guided logits ``uncond + scale * (cond - uncond)``, evaluated as
    ``scale * cond + (1 - scale) * uncond`` so scale 1 and 0 return the
    conditional / unconditional logits bit for bit."""
    return scale * cond + (1.0 - scale) * uncond


def uncond_text(vocab: TextVocab, n: int) -> tuple[np.ndarray, np.ndarray]:
    ids = np.full((n, vocab.max_len), vocab.pad_id, dtype=np.int64)
    ids[:, 0] = vocab.bos_id
    ids[:, 1] = vocab.uncond_id
    mask = ids != vocab.pad_id
    return ids, mask


def _pick(logits: np.ndarray, cfg: SampleConfig, rng: np.random.Generator) -> int:
    """Choose one id from a row of (already vocabulary-masked) logits."""
    finite = np.isfinite(logits)
    if not finite.any():
        raise SamplingError("every candidate logit is masked or non-finite")
    if cfg.greedy:
        return int(np.argmax(np.where(finite, logits, -np.inf)))
    order = np.argsort(-np.where(finite, logits, -np.inf), kind="stable")
    keep = order[: min(cfg.top_k, int(finite.sum()))]
    z = logits[keep] / cfg.temperature
    p = np.exp(z - z.max())
    cdf = np.cumsum(p)
    u = rng.random() * cdf[-1]
    return int(keep[min(np.searchsorted(cdf, u, side="right"), len(keep) - 1)])


@torch.no_grad()
def sample_tokens(
    model: ArModel,
    prompt_ids,
    config: SampleConfig,
    vocab: TextVocab,
    codes: Vocabulary,
    layout: Layout,
    prompt_mask=None,
    stream_offset: int = 0,
) -> np.ndarray:
    """Generate ``layout.n_image`` image tokens per prompt.

    ``prompt_ids``: (T,) or (B, T) padded text ids starting with <BOS>.
    Returns combined-vocabulary ids of shape (n_image,) or (B, n_image).
    Prompt ``i`` draws from its own named stream, so results do not depend
    on which other prompts share the batch.
    """
    config.validate(codes.n_codes)
    if model.config.mode_tag != "t2i":
        raise ConfigError(f"sampling needs a t2i model, got mode_tag {model.config.mode_tag!r}")
    prompt = np.asarray(prompt_ids, dtype=np.int64)
    single = prompt.ndim == 1
    prompt = np.atleast_2d(prompt)
    if prompt.shape[1] != layout.text_len:
        raise ConfigError(f"prompt length {prompt.shape[1]} != layout text_len {layout.text_len}")
    mask = prompt != vocab.pad_id if prompt_mask is None else np.atleast_2d(prompt_mask)
    b = prompt.shape[0]
    guided = config.cfg_scale != 1.0
    if guided:
        u_ids, u_mask = uncond_text(vocab, b)
        prompt = np.concatenate([prompt, u_ids])
        mask = np.concatenate([mask, u_mask])
    placeholder = np.zeros((prompt.shape[0], layout.n_image), dtype=np.int64)
    full = build_sequence(prompt, placeholder, layout.mechanism, vocab, layout.n_image, mask)
    ids = torch.as_tensor(full.ids)
    key_mask = torch.as_tensor(full.mask)
    start = layout.image_start
    streams = RngStreams(config.seed)
    rngs = [streams.get(f"sample/{stream_offset + i}") for i in range(b)]
    allowed = np.zeros(model.config.vocab_size, dtype=bool)
    allowed[codes.n_text : codes.size] = True

    model.eval()
    caches = model.new_caches() if config.use_cache else None
    out = np.zeros((b, layout.n_image), dtype=np.int64)
    for j in range(layout.n_image):
        pos = start + j
        if caches is None:
            logits = model(ids[:, :pos], key_mask[:, :pos]).logits[:, -1]
        elif j == 0:
            logits = model(ids[:, :pos], key_mask, caches).logits[:, -1]
        else:
            logits = model(ids[:, pos - 1 : pos], key_mask, caches).logits[:, -1]
        logits = logits.double()
        if guided:
            logits = cfg_logits(logits[:b], logits[b:], config.cfg_scale)
        logits = logits.numpy().copy()
        logits[:, ~allowed] = -np.inf
        for i in range(b):
            out[i, j] = _pick(logits[i], config, rngs[i])
        ids[:b, pos] = torch.as_tensor(out[:, j])
        if guided:
            # lockstep: the unconditional branch sees the same sampled tokens
            ids[b:, pos] = torch.as_tensor(out[:, j])
    return out[0] if single else out


@torch.no_grad()
def generate_images(
    model: ArModel,
    vq: VqTokenizer,
    vocab: TextVocab,
    codes: Vocabulary,
    layout: Layout,
    captions,
    config: SampleConfig,
    batch: int = 50,
) -> tuple[np.ndarray, np.ndarray]:
    """captions -> (images (N, H, W, 3), image token ids (N, n_image))."""
    ids, mask = vocab.encode_batch(captions)
    tokens = []
    for i in range(0, len(captions), batch):
        tokens.append(
            sample_tokens(
                model, ids[i : i + batch], config, vocab, codes, layout, mask[i : i + batch], i
            )
        )
    tokens = np.concatenate(tokens) if tokens else np.zeros((0, layout.n_image), np.int64)
    grid = derasterize(tokens, *layout.grid, vocab=codes)
    images = vq.decode(grid).numpy()
    return images, tokens


def generate_image(model, vq, vocab, codes, layout, caption: str, config: SampleConfig) -> np.ndarray:
    return generate_images(model, vq, vocab, codes, layout, [caption], config)[0][0]
