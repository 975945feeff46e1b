"""Training loop for the AR generator with optional global visual alignment.

Regimes:

* ``arra_base``: random init, trained with alignment.
* ``arra``: init from a text-only caption LM; image-token rows start fresh.
* ``arra_adapt``: init from a t2i model trained on a source palette.
* ``baseline``: random init, alignment disabled.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from arralab.alignment import (
    Z_LOSS_WEIGHT,
    AlignmentConfig,
    ProjectionHead,
    alignment_mask,
    composite_loss,
    gva_loss,
    mean_cosine,
)
from arralab.armodel import (
    MECHANISMS,
    PAD,
    TEXT,
    ArConfig,
    ArModel,
    Layout,
    ar_loss,
    build_sequence,
    load_model,
    save_model,
    sequence_length,
    target_mask,
    z_loss,
)
from arralab.corpus import CorpusConfig, CorpusSplit
from arralab.errors import ConfigError, NumericalAbort
from arralab.foundation import aggregate
from arralab.numerics import RngStreams, init_module, load_tensors, save_tensors
from arralab.sampler import uncond_text
from arralab.tokenizers import TextVocab, Vocabulary, VqTokenizer

REGIMES = ("arra_base", "arra", "arra_adapt", "baseline")


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 3e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    warmup: int = 100
    clip: float = 1.0


@dataclass(frozen=True)
class ModelSize:
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4


@dataclass(frozen=True)
class TrainConfig:
    regime: str = "arra_base"
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    model: ModelSize = field(default_factory=ModelSize)
    batch_size: int = 32
    steps: int = 2000
    cond_dropout_p: float = 0.1
    seed: int = 0
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    z_weight: float = Z_LOSS_WEIGHT
    loss_on_text: bool = False
    eval_every: int = 250
    n_eval: int = 256

    def __post_init__(self):
        if self.regime == "baseline" and self.alignment.mechanism != "none":
            object.__setattr__(self, "alignment", replace(self.alignment, mechanism="none"))

    def validate(self) -> None:
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if not self.optimizer.lr > 0:
            raise ConfigError("lr must be > 0")
        if not 0 <= self.cond_dropout_p < 1:
            raise ConfigError("cond_dropout_p must lie in [0, 1)")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")
        self.alignment.validate(self.model.n_layers)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["alignment"] = self.alignment.to_dict()
        d["corpus"] = self.corpus.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
        try:
            if "alignment" in d:
                d["alignment"] = AlignmentConfig.from_dict(d["alignment"])
            if "optimizer" in d:
                d["optimizer"] = OptimConfig(**d["optimizer"])
            if "model" in d:
                d["model"] = ModelSize(**d["model"])
            if "corpus" in d:
                d["corpus"] = CorpusConfig.from_dict(d["corpus"])
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def fingerprint(self) -> str:
        return config_hash(self.to_dict())


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def code_hash() -> str:
    """Content hash of the package sources (stands in for a commit id)."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def max_sequence_length(text_len: int, n_image: int) -> int:
    """Room for the longest layout, so one checkpoint serves every mechanism."""
    return max(sequence_length(text_len, n_image, m) for m in MECHANISMS)


# ---------------------------------------------------------------------------
# pre-tokenized data


@dataclass
class TokenizedSet:
    text_ids: np.ndarray  # (N, T)
    text_mask: np.ndarray  # (N, T)
    image_ids: np.ndarray  # (N, n_image), combined vocabulary
    captions: list[str]
    f_gf: dict[str, torch.Tensor] = field(default_factory=dict)  # "kind/agg" -> (N, D')

    def __len__(self):
        return len(self.captions)

    def to_tensors(self) -> dict:
        out = {
            "text_ids": self.text_ids,
            "text_mask": self.text_mask.astype(np.int64),
            "image_ids": self.image_ids,
        }
        out.update({f"f_gf.{k}": v for k, v in self.f_gf.items()})
        return out

    @classmethod
    def from_tensors(cls, t: dict, captions: list[str]) -> "TokenizedSet":
        return cls(
            t["text_ids"].numpy(),
            t["text_mask"].numpy().astype(bool),
            t["image_ids"].numpy(),
            captions,
            {k[len("f_gf.") :]: v for k, v in t.items() if k.startswith("f_gf.")},
        )


@torch.no_grad()
def pretokenize(
    split: CorpusSplit,
    vq: VqTokenizer,
    vocab: TextVocab,
    codes: Vocabulary,
    encoders: dict | None = None,
    batch: int = 256,
) -> TokenizedSet:
    """Encode every pair once: text ids, image token ids and, per frozen
    encoder and aggregation, the alignment target f_GF."""
    text_ids, text_mask = vocab.encode_batch(split.captions)
    grids = [vq.tokenize(split.images[i : i + batch]) for i in range(0, len(split), batch)]
    q = torch.cat(grids).reshape(len(split), -1).numpy()
    f_gf = {}
    for kind, enc in (encoders or {}).items():
        feats = [enc.encode_image_patches(split.images[i : i + batch]) for i in range(0, len(split), batch)]
        for agg in ("cls", "avgpool", "concat"):
            if not feats[0].has_cls and agg != "avgpool":
                continue
            f_gf[f"{kind}/{agg}"] = torch.cat([aggregate(f, agg) for f in feats]).float()
    return TokenizedSet(text_ids, text_mask, codes.image_id(q), list(split.captions), f_gf)


# ---------------------------------------------------------------------------
# model init


def build_ar_config(size: ModelSize, vocab_size: int, max_len: int, mode_tag: str) -> ArConfig:
    return ArConfig(
        vocab_size=vocab_size,
        max_len=max_len,
        n_layers=size.n_layers,
        d_model=size.d_model,
        n_heads=size.n_heads,
        mode_tag=mode_tag,
    )


def _require_tag(meta_cfg: ArConfig, expected: str, path) -> None:
    if meta_cfg.mode_tag != expected:
        raise ConfigError(
            f"checkpoint {path} has mode_tag {meta_cfg.mode_tag!r}, expected {expected!r}"
        )


def init_model(
    regime: str,
    config: ArConfig,
    seed: int,
    checkpoint=None,
) -> ArModel:
    """Fresh seeded init, optionally overwritten by a pretrained checkpoint.

    ``arra`` copies every weight of the text-only LM and keeps the seeded
    init for rows/positions that LM never had. ``arra_adapt`` loads a full
    t2i model whose geometry must match ``config``.
    """
    if regime not in REGIMES:
        raise ConfigError(f"unknown regime {regime!r}")
    model = ArModel(config)
    init_module(model, RngStreams(seed).get("model_init"))
    if regime in ("arra_base", "baseline"):
        return model
    if checkpoint is None:
        raise ConfigError(f"regime {regime!r} needs a pretrained checkpoint")
    src, _, _ = load_model(checkpoint)
    if regime == "arra":
        _require_tag(src.config, "text_only", checkpoint)
        if (src.config.d_model, src.config.n_layers, src.config.n_heads) != (
            config.d_model,
            config.n_layers,
            config.n_heads,
        ):
            raise ConfigError("text-only LM width/depth differ from the target model")
        own = model.state_dict()
        with torch.no_grad():
            for k, v in src.state_dict().items():
                if k in ("tok_emb.weight", "head.weight", "head.bias", "pos_emb"):
                    own[k][: v.shape[0]] = v
                else:
                    own[k].copy_(v)
        return model
    _require_tag(src.config, "t2i", checkpoint)
    if src.config != config:
        raise ConfigError(f"source model config {src.config} differs from target {config}")
    model.load_state_dict(src.state_dict())
    return model


# ---------------------------------------------------------------------------
# checkpoints


def _opt_tensors(opt: torch.optim.Optimizer) -> tuple[dict, dict]:
    sd = opt.state_dict()
    tensors = {}
    for pid, st in sd["state"].items():
        for k, v in st.items():
            tensors[f"opt.{pid}.{k}"] = torch.as_tensor(v)
    return tensors, {"param_groups": sd["param_groups"]}


def _opt_state_from(tensors: dict, groups: dict) -> dict:
    state: dict = {}
    for name, v in tensors.items():
        if name.startswith("opt."):
            _, pid, k = name.split(".", 2)
            state.setdefault(int(pid), {})[k] = v
    return {"state": state, "param_groups": groups["param_groups"]}


# ---------------------------------------------------------------------------
# trainer


@dataclass
class StepBatch:
    ids: torch.Tensor
    roles: np.ndarray
    mask: torch.Tensor
    f_gf: torch.Tensor | None
    dropped: np.ndarray


class Trainer:
    """Owns model, projection head, optimizer and RNG streams for one run."""

    def __init__(
        self,
        config: TrainConfig,
        vocab: TextVocab,
        codes: Vocabulary,
        layout_grid: tuple[int, int],
        data: TokenizedSet,
        heldout: TokenizedSet | None = None,
        init_checkpoint=None,
        run_dir=None,
    ):
        config.validate()
        self.config = config
        self.vocab, self.codes = vocab, codes
        align = config.alignment
        self.layout = Layout(vocab.max_len, layout_grid, align.mechanism)
        self.data, self.heldout = data, heldout
        self.rng = RngStreams(config.seed)
        ar_cfg = build_ar_config(
            config.model, codes.size, max_sequence_length(vocab.max_len, self.layout.n_image), "t2i"
        )
        self.model = init_model(config.regime, ar_cfg, config.seed, init_checkpoint)
        self.target_key = f"{align.encoder}/{align.aggregation}"
        self.head = None
        if align.enabled:
            if self.target_key not in data.f_gf:
                raise ConfigError(f"dataset carries no alignment targets for {self.target_key!r}")
            d_out = data.f_gf[self.target_key].shape[1]
            self.head = ProjectionHead(align.projection, ar_cfg.d_model, d_out)
            # own stream: adding the head leaves the model init untouched
            init_module(self.head, self.rng.get("head_init"))
        opt = config.optimizer
        groups = [{"params": list(self.model.parameters())}]
        if self.head is not None and any(True for _ in self.head.parameters()):
            groups.append({"params": list(self.head.parameters())})
        self.opt = torch.optim.AdamW(
            groups, lr=opt.lr, betas=(opt.beta1, opt.beta2), weight_decay=opt.weight_decay
        )
        self.step_idx = 0
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.records: list[dict] = []

    # -- batches ----------------------------------------------------------

    def make_batch(self, idx: np.ndarray, dropout: bool = True) -> StepBatch:
        d = self.data if dropout else self.heldout
        text, tmask = d.text_ids[idx].copy(), d.text_mask[idx].copy()
        dropped = np.zeros(len(idx), dtype=bool)
        if dropout and self.config.cond_dropout_p > 0:
            dropped = self.rng.get("cond_dropout").random(len(idx)) < self.config.cond_dropout_p
            if dropped.any():
                u_ids, u_mask = uncond_text(self.vocab, int(dropped.sum()))
                text[dropped], tmask[dropped] = u_ids, u_mask
        seq = build_sequence(
            text, d.image_ids[idx], self.layout.mechanism, self.vocab, self.layout.n_image, tmask
        )
        f = d.f_gf[self.target_key][idx] if self.head is not None else None
        return StepBatch(torch.as_tensor(seq.ids), seq.roles, torch.as_tensor(seq.mask), f, dropped)

    def losses(self, batch: StepBatch):
        out = self.model(batch.ids, batch.mask)
        ar = ar_loss(out.logits, batch.ids, batch.roles, self.config.loss_on_text)
        zmask = target_mask(batch.roles, self.config.loss_on_text)
        z = z_loss(out.logits[:, :-1], zmask)
        gva = None
        if self.head is not None:
            pos = alignment_mask(batch.roles, self.layout.mechanism)
            gva = gva_loss(out, pos, batch.f_gf, self.config.alignment, self.head)
        total = composite_loss(ar, gva, z, self.config.alignment, self.config.z_weight)
        return total, ar, gva, z, out

    # -- optimization -----------------------------------------------------

    def _lr(self) -> float:
        opt = self.config.optimizer
        if opt.warmup <= 0:
            return opt.lr
        return opt.lr * min(1.0, (self.step_idx + 1) / opt.warmup)

    def _clip(self) -> float:
        """Global-norm clip with a fixed-order float64 reduction: model
        parameters first, then the head. Zero head gradients leave the norm
        of the model gradients unchanged bit for bit."""
        params = list(self.model.parameters())
        if self.head is not None:
            params += list(self.head.parameters())
        total = 0.0
        for p in params:
            if p.grad is not None:
                total += float((p.grad.double() ** 2).sum())
        norm = math.sqrt(total)
        limit = self.config.optimizer.clip
        if limit > 0 and norm > limit:
            coef = limit / (norm + 1e-6)
            for p in params:
                if p.grad is not None:
                    p.grad.mul_(coef)
        return norm

    def train_step(self) -> dict:
        t0 = time.perf_counter()
        self.model.train()
        idx = self.rng.get("data").integers(0, len(self.data), size=self.config.batch_size)
        batch = self.make_batch(idx)
        total, ar, gva, z, out = self.losses(batch)
        if not torch.isfinite(total):
            self._dump_batch(batch, idx)
            raise NumericalAbort(f"non-finite loss {total.item()} at step {self.step_idx}")
        self.opt.zero_grad(set_to_none=True)
        total.backward()
        gnorm = self._clip()
        lr = self._lr()
        for g in self.opt.param_groups:
            g["lr"] = lr
        self.opt.step()
        rec = {
            "step": self.step_idx,
            "L_AR": ar.item(),
            "L_GVA": None if gva is None else gva.item(),
            "L_z": z.item(),
            "total": total.item(),
            "mean_cos": None,
            "grad_norm": gnorm,
            "lr": lr,
            "dropped": int(batch.dropped.sum()),
        }
        if self.head is not None:
            pos = alignment_mask(batch.roles, self.layout.mechanism)
            rec["mean_cos"] = mean_cosine(out, pos, batch.f_gf, self.config.alignment, self.head)
        self.step_idx += 1
        rec["wall_time"] = time.perf_counter() - t0
        return rec

    @torch.no_grad()
    def heldout_cosine(self) -> float | None:
        """Mean cos(f_A, f_GF) over aligned positions of the held-out pairs,
        teacher-forced with their true captions."""
        if self.head is None or self.heldout is None:
            return None
        self.model.eval()
        n = min(len(self.heldout), self.config.n_eval)
        vals, weights = [], []
        for i in range(0, n, 128):
            idx = np.arange(i, min(n, i + 128))
            batch = self.make_batch(idx, dropout=False)
            out = self.model(batch.ids, batch.mask)
            pos = alignment_mask(batch.roles, self.layout.mechanism)
            vals.append(mean_cosine(out, pos, batch.f_gf, self.config.alignment, self.head))
            weights.append(int(pos.sum()))
        return float(np.average(vals, weights=weights))

    def fit(self, steps: int | None = None, checkpoint_at: int | None = None, log=None) -> list[dict]:
        """Train up to ``steps`` total steps (default: config.steps)."""
        target = self.config.steps if steps is None else steps
        if self.step_idx == 0 and self.heldout is not None and not self.records:
            self._log({"step": 0, "eval_cos": self.heldout_cosine(), "kind": "eval"}, log)
        while self.step_idx < target:
            rec = self.train_step()
            rec["kind"] = "train"
            self._log(rec, log)
            every = self.config.eval_every
            done = self.step_idx
            if self.heldout is not None and (done == self.config.steps or (every and done % every == 0)):
                self._log({"step": done, "eval_cos": self.heldout_cosine(), "kind": "eval"}, log)
            if checkpoint_at is not None and done == checkpoint_at and self.run_dir is not None:
                self.save_checkpoint(self.run_dir / f"checkpoint_{done}.arrc")
        return self.records

    def _log(self, rec: dict, log) -> None:
        self.records.append(rec)
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            with open(self.run_dir / "metrics.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec) + "\n")
        if log is not None:
            log(rec)

    def _dump_batch(self, batch: StepBatch, idx: np.ndarray) -> None:
        if self.run_dir is None:
            return
        tensors = {"ids": batch.ids, "mask": batch.mask.long(), "index": torch.as_tensor(idx)}
        if batch.f_gf is not None:
            tensors["f_gf"] = batch.f_gf
        save_tensors(self.run_dir / "nan_batch.arrc", tensors, {"step": self.step_idx})

    # -- persistence ------------------------------------------------------

    def save_checkpoint(self, path) -> None:
        extra = {}
        if self.head is not None:
            extra.update({f"head.{k}": v for k, v in self.head.state_dict().items()})
        opt_t, opt_meta = _opt_tensors(self.opt)
        extra.update(opt_t)
        meta = {
            "train_config": self.config.to_dict(),
            "step": self.step_idx,
            "rng": self.rng.state_dict(),
            "optimizer": opt_meta,
            "head": None
            if self.head is None
            else {"kind": self.head.kind, "d_in": self.head.d_in, "d_out": self.head.d_out},
            "layout": {"text_len": self.layout.text_len, "grid": list(self.layout.grid)},
            "n_text": self.codes.n_text,
            "n_codes": self.codes.n_codes,
            "n_records": len(self.records),
        }
        save_model(self.model, path, extra, meta)

    def load_checkpoint(self, path) -> None:
        """Restore model, head, optimizer, step counter and RNG streams."""
        model, rest, meta = load_model(path)
        if TrainConfig.from_dict(meta["train_config"]) != self.config:
            raise ConfigError("checkpoint was written by a different train config")
        self.model.load_state_dict(model.state_dict())
        if self.head is not None:
            self.head.load_state_dict(
                {k[len("head.") :]: v for k, v in rest.items() if k.startswith("head.")}
            )
        self.opt.load_state_dict(_opt_state_from(rest, meta["optimizer"]))
        self.step_idx = int(meta["step"])
        self.rng = RngStreams(self.config.seed)
        self.rng.load_state_dict(meta["rng"])
        n = int(meta["n_records"])
        path = self.run_dir / "metrics.jsonl" if self.run_dir is not None else None
        if path is not None and path.exists():
            lines = path.read_text(encoding="utf-8").splitlines()[:n]
            self.records = [json.loads(l) for l in lines]
            path.write_text("".join(l + "\n" for l in lines), encoding="utf-8")
        else:
            self.records = self.records[:n]


def load_generator(path) -> tuple[ArModel, dict]:
    """Model and metadata from a training checkpoint; head and optimizer
    tensors are ignored, so they never influence generation."""
    model, _, meta = load_model(path)
    model.eval()
    return model, meta


def load_head(path) -> ProjectionHead | None:
    tensors, meta = load_tensors(path)
    spec = meta.get("head")
    if spec is None:
        return None
    head = ProjectionHead(spec["kind"], spec["d_in"], spec["d_out"])
    head.load_state_dict({k[len("head.") :]: v for k, v in tensors.items() if k.startswith("head.")})
    return head


# ---------------------------------------------------------------------------
# text-only LM pretraining (init for the ``arra`` regime)


@dataclass(frozen=True)
class TextLmConfig:
    steps: int = 1000
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0


def pretrain_text_lm(
    captions: list[str], vocab: TextVocab, size: ModelSize, cfg: TextLmConfig, log=None
) -> tuple[ArModel, list[float]]:
    """Caption language model over the text vocabulary only (mode text_only)."""
    ar_cfg = build_ar_config(size, len(vocab), vocab.max_len, "text_only")
    model = ArModel(ar_cfg)
    rng = RngStreams(cfg.seed)
    init_module(model, rng.get("text_lm_init"))
    ids, mask = vocab.encode_batch(captions)
    roles = np.where(mask, TEXT, PAD)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=(0.9, 0.95), weight_decay=0.05)
    data_rng = rng.get("text_lm_data")
    history = []
    model.train()
    for _ in range(cfg.steps):
        idx = data_rng.integers(0, len(captions), size=cfg.batch_size)
        out = model(ids[idx], torch.as_tensor(mask[idx]))
        loss = ar_loss(out.logits, ids[idx], roles[idx], loss_on_text=True)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append(loss.item())
        if log is not None:
            log(loss.item())
    model.eval()
    return model, history
