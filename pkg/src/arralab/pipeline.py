"""Flat-file workspace and the pipeline stages behind the CLI.

Every artifact lives under ``<workspace>/<stage>/<hash>/`` where the hash
covers the stage's own config and the hashes of its inputs, so identical
configs reuse artifacts and any upstream change invalidates downstream ones.
Each artifact directory carries a ``manifest.json``.
"""

from __future__ import annotations

import copy
import csv
import itertools
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from arralab.armodel import Layout
from arralab.corpus import CorpusSplit, generate_split
from arralab.errors import ArraError, ConfigError, DependencyError
from arralab.foundation import (
    ENCODER_KINDS,
    EncoderConfig,
    EncoderTrainConfig,
    EncoderTrainer,
    build_encoder,
    global_features,
    load_encoder,
    save_encoder,
)
from arralab.metrics import FeatureSet, attribute_accuracy, clip_score, frechet_distance, ms_ssim
from arralab.numerics import load_tensors, module_checksum, save_tensors, set_deterministic
from arralab.sampler import SampleConfig, generate_images
from arralab.tokenizers import (
    TextVocab,
    Vocabulary,
    VqConfig,
    VqTokenizer,
    VqTrainConfig,
    VqTrainer,
    load_vocab,
    save_vocab,
)
from arralab.trainer import (
    TextLmConfig,
    TokenizedSet,
    TrainConfig,
    Trainer,
    code_hash,
    config_hash,
    load_generator,
    pretokenize,
    pretrain_text_lm,
)

log = logging.getLogger("arralab")

HELDOUT_OFFSET = 1_000_000
SOURCE_OFFSET = 2_000_000


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 4000
    n_heldout: int = 256
    n_source: int = 2000
    source_palette: str = "alt"


@dataclass(frozen=True)
class EncoderStageConfig:
    dim: int = 32
    patch: int = 8
    n_layers: int = 2
    n_heads: int = 4
    train: EncoderTrainConfig = field(default_factory=EncoderTrainConfig)


@dataclass(frozen=True)
class TokenizerStageConfig:
    vq: VqConfig = field(default_factory=VqConfig)
    train: VqTrainConfig = field(default_factory=lambda: VqTrainConfig(steps=1500))


@dataclass(frozen=True)
class SourceConfig:
    """The t2i model trained on the source palette (init for arra_adapt)."""

    steps: int = 1000
    seed: int = 0


@dataclass(frozen=True)
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    tokenizer: TokenizerStageConfig = field(default_factory=TokenizerStageConfig)
    encoder: EncoderStageConfig = field(default_factory=EncoderStageConfig)
    text_lm: TextLmConfig = field(default_factory=TextLmConfig)
    source: SourceConfig = field(default_factory=SourceConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d or {})
        _check_keys(d, cls, "")
        try:
            out = cls(
                data=_plain(DataConfig, d.get("data", {}), "data"),
                tokenizer=TokenizerStageConfig(
                    vq=_plain(VqConfig, d.get("tokenizer", {}).get("vq", {}), "tokenizer.vq"),
                    train=_plain(
                        VqTrainConfig,
                        {"steps": 1500, **d.get("tokenizer", {}).get("train", {})},
                        "tokenizer.train",
                    ),
                ),
                encoder=EncoderStageConfig(
                    **{
                        k: v
                        for k, v in _plain(dict, d.get("encoder", {}), "encoder").items()
                        if k != "train"
                    },
                    train=_plain(
                        EncoderTrainConfig, d.get("encoder", {}).get("train", {}), "encoder.train"
                    ),
                ),
                text_lm=_plain(TextLmConfig, d.get("text_lm", {}), "text_lm"),
                source=_plain(SourceConfig, d.get("source", {}), "source"),
                train=TrainConfig.from_dict(d.get("train", {})),
                sample=_plain(SampleConfig, d.get("sample", {}), "sample"),
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        out.validate()
        return out

    def validate(self) -> None:
        self.train.validate()
        self.sample.validate(self.tokenizer.vq.codebook_size)
        if self.data.source_palette == self.train.corpus.palette:
            raise ConfigError("source palette must differ from the training palette")
        if min(self.data.n_train, self.data.n_heldout) < 2:
            raise ConfigError("n_train and n_heldout must be >= 2")


def _check_keys(d: dict, cls, where: str) -> None:
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        prefix = f"{where}." if where else ""
        raise ConfigError(f"unknown config fields: {sorted(prefix + k for k in unknown)}")


def _plain(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    if cls is dict:
        _check_keys(d, EncoderStageConfig, where)
        return d
    _check_keys(d, cls, where)
    return cls(**d)


def merge(base: dict, override: dict) -> dict:
    """Recursive dict merge; ``override`` wins."""
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    d = PipelineConfig().to_dict()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        d = merge(d, user)
    if overrides:
        d = merge(d, overrides)
    return PipelineConfig.from_dict(d)


# ---------------------------------------------------------------------------
# manifests


@dataclass
class RunManifest:
    stage: str
    config: dict
    code_hash: str
    inputs: dict
    outputs: dict
    summary: dict = field(default_factory=dict)

    def write(self, directory: Path) -> None:
        _write_json(directory / "manifest.json", asdict(self))

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# workspace


class Workspace:
    """Content-addressed artifact paths for one pipeline config."""

    def __init__(self, root, config: PipelineConfig):
        self.root = Path(root)
        self.config = config

    # hashes -----------------------------------------------------------------

    @property
    def data_hash(self) -> str:
        return config_hash({"data": asdict(self.config.data), "corpus": self.config.train.corpus.to_dict()})

    @property
    def tokenizer_hash(self) -> str:
        return config_hash({"tokenizer": asdict(self.config.tokenizer), "data": self.data_hash})

    def encoder_hash(self, kind: str) -> str:
        return config_hash({"encoder": asdict(self.config.encoder), "kind": kind, "data": self.data_hash})

    def lm_hash(self, mode: str) -> str:
        cfg = self.config
        if mode == "text_only":
            body = {"lm": asdict(cfg.text_lm), "data": self.data_hash}
        else:
            body = {"source": asdict(cfg.source), "data": self.data_hash, "tok": self.tokenizer_hash}
        return config_hash({**body, "mode": mode, "model": asdict(cfg.train.model)})

    def needed_encoders(self) -> list[str]:
        align = self.config.train.alignment
        kinds = {"cross_modal"}
        if align.enabled:
            kinds.add(align.encoder)
        return sorted(kinds)

    def init_mode(self) -> str | None:
        return {"arra": "text_only", "arra_adapt": "t2i"}.get(self.config.train.regime)

    @property
    def tokens_hash(self) -> str:
        return config_hash(
            {
                "data": self.data_hash,
                "tok": self.tokenizer_hash,
                "enc": {k: self.encoder_hash(k) for k in self.needed_encoders()},
            }
        )

    @property
    def run_hash(self) -> str:
        mode = self.init_mode()
        return config_hash(
            {
                "train": self.config.train.to_dict(),
                "tokens": self.tokens_hash,
                "init": self.lm_hash(mode) if mode else None,
            }
        )

    # paths ------------------------------------------------------------------

    @property
    def data_dir(self) -> Path:
        return self.root / "data" / self.data_hash

    @property
    def tokenizer_dir(self) -> Path:
        return self.root / "tokenizer" / self.tokenizer_hash

    def encoder_dir(self, kind: str) -> Path:
        return self.root / "encoder" / kind / self.encoder_hash(kind)

    def lm_dir(self, mode: str) -> Path:
        return self.root / "lm" / mode / self.lm_hash(mode)

    @property
    def tokens_dir(self) -> Path:
        return self.root / "tokens" / self.tokens_hash

    @property
    def run_dir(self) -> Path:
        return self.root / "runs" / self.run_hash

    # dependency checks ------------------------------------------------------

    def require(self, path: Path, artifact: str, producer: str) -> Path:
        if not path.exists():
            raise DependencyError(artifact, producer, path)
        return path

    def require_data(self):
        return self.require(self.data_dir / "manifest.json", "corpus data", "gen-data")

    def require_tokenizer(self):
        return self.require(self.tokenizer_dir / "manifest.json", "VQ tokenizer", "train-tokenizer")

    def require_encoder(self, kind: str):
        return self.require(
            self.encoder_dir(kind) / "manifest.json", f"{kind} encoder", f"train-encoder --kind {kind}"
        )

    def require_lm(self, mode: str):
        return self.require(
            self.lm_dir(mode) / "manifest.json", f"{mode} pretrained LM", f"pretrain-lm --mode {mode}"
        )

    def require_run(self):
        return self.require(self.run_dir / "manifest.json", "trained checkpoint", "train")

    def _manifest(self, stage, directory, inputs, outputs, summary=None, config=None):
        RunManifest(
            stage=stage,
            config=config if config is not None else self.config.to_dict(),
            code_hash=code_hash(),
            inputs=inputs,
            outputs=outputs,
            summary=summary or {},
        ).write(directory)


# ---------------------------------------------------------------------------
# stage: data


def _save_split(path: Path, split: CorpusSplit) -> None:
    save_tensors(path, {"images": split.images}, {"captions": split.captions})


def load_split(path) -> CorpusSplit:
    tensors, meta = load_tensors(path)
    return CorpusSplit(tensors["images"].numpy(), meta["captions"])


def gen_data(ws: Workspace, force: bool = False) -> Path:
    out = ws.data_dir
    if (out / "manifest.json").exists() and not force:
        return out
    cfg = ws.config
    corpus = cfg.train.corpus
    source = replace(corpus, palette=cfg.data.source_palette)
    splits = {
        "train": generate_split(range(cfg.data.n_train), corpus),
        "heldout": generate_split(
            range(HELDOUT_OFFSET, HELDOUT_OFFSET + cfg.data.n_heldout), corpus
        ),
        "source": generate_split(range(SOURCE_OFFSET, SOURCE_OFFSET + cfg.data.n_source), source),
    }
    out.mkdir(parents=True, exist_ok=True)
    for name, split in splits.items():
        _save_split(out / f"{name}.arrc", split)
    ws._manifest(
        "gen-data",
        out,
        {},
        {k: f"{k}.arrc" for k in splits},
        {k: len(v) for k, v in splits.items()},
        {"data": asdict(cfg.data), "corpus": corpus.to_dict()},
    )
    log.info("gen-data -> %s", out)
    return out


# ---------------------------------------------------------------------------
# stage: tokenizer


def train_tokenizer(ws: Workspace, force: bool = False) -> Path:
    ws.require_data()
    out = ws.tokenizer_dir
    if (out / "manifest.json").exists() and not force:
        return out
    cfg = ws.config.tokenizer
    images = np.concatenate(
        [load_split(ws.data_dir / "train.arrc").images, load_split(ws.data_dir / "source.arrc").images]
    )
    vq = VqTokenizer(cfg.vq)
    history = VqTrainer(vq, cfg.train).fit(images)
    vq.eval()
    out.mkdir(parents=True, exist_ok=True)
    vq.save(out / "vq.arrc")
    save_vocab(TextVocab(), out / "vocab.json")
    used = int(len(np.unique(vq.tokenize(images).numpy())))
    ws._manifest(
        "train-tokenizer",
        out,
        {"data": ws.data_hash},
        {"vq": "vq.arrc", "vocab": "vocab.json"},
        {"final": history[-1] if history else None, "codes_used": used, "checksum": module_checksum(vq)},
        {"tokenizer": asdict(cfg)},
    )
    log.info("train-tokenizer -> %s (%d codes used)", out, used)
    return out


def load_tokenizer(ws: Workspace) -> tuple[VqTokenizer, TextVocab, Vocabulary]:
    ws.require_tokenizer()
    vq = VqTokenizer.load(ws.tokenizer_dir / "vq.arrc")
    vq.requires_grad_(False)
    vocab = load_vocab(ws.tokenizer_dir / "vocab.json")
    return vq, vocab, Vocabulary(len(vocab), vq.config.codebook_size)


# ---------------------------------------------------------------------------
# stage: encoders


def encoder_config(ws: Workspace, kind: str, text_vocab: int) -> EncoderConfig:
    e = ws.config.encoder
    return EncoderConfig(
        kind=kind,
        dim=e.dim,
        patch=e.patch,
        canvas=ws.config.train.corpus.canvas,
        n_layers=e.n_layers,
        n_heads=e.n_heads,
        text_vocab=text_vocab if kind == "cross_modal" else 0,
        text_len=TextVocab().max_len,
    )


def train_encoder(ws: Workspace, kind: str, force: bool = False) -> Path:
    if kind not in ENCODER_KINDS:
        raise ConfigError(f"encoder kind must be one of {ENCODER_KINDS}")
    ws.require_data()
    out = ws.encoder_dir(kind)
    if (out / "manifest.json").exists() and not force:
        return out
    split = load_split(ws.data_dir / "train.arrc")
    vocab = TextVocab()
    enc = build_encoder(encoder_config(ws, kind, len(vocab)))
    history = EncoderTrainer(enc, vocab if kind == "cross_modal" else None, ws.config.encoder.train).fit(
        split.images, split.captions
    )
    out.mkdir(parents=True, exist_ok=True)
    save_encoder(enc, out / "encoder.arrc")
    summary = {"final_loss": history[-1] if history else None, "checksum": module_checksum(enc)}
    if kind == "cross_modal":
        from arralab.foundation import retrieval_accuracy

        held = load_split(ws.data_dir / "heldout.arrc")
        summary["heldout_retrieval"] = retrieval_accuracy(enc, vocab, held.images, held.captions)
    ws._manifest(
        "train-encoder",
        out,
        {"data": ws.data_hash},
        {"encoder": "encoder.arrc"},
        summary,
        {"encoder": asdict(ws.config.encoder), "kind": kind},
    )
    log.info("train-encoder %s -> %s", kind, out)
    return out


def load_frozen_encoder(ws: Workspace, kind: str):
    ws.require_encoder(kind)
    return load_encoder(ws.encoder_dir(kind) / "encoder.arrc")


# ---------------------------------------------------------------------------
# pre-tokenized cache


def tokenized(ws: Workspace, names=("train", "heldout")) -> dict[str, TokenizedSet]:
    """Load (building once if absent) the pre-tokenized splits."""
    ws.require_data()
    ws.require_tokenizer()
    for k in ws.needed_encoders():
        ws.require_encoder(k)
    out = ws.tokens_dir
    result = {}
    missing = [n for n in names if not (out / f"{n}.arrc").exists()]
    if missing:
        vq, vocab, codes = load_tokenizer(ws)
        encoders = {k: load_frozen_encoder(ws, k) for k in ws.needed_encoders()}
        out.mkdir(parents=True, exist_ok=True)
        for n in missing:
            split = load_split(ws.data_dir / f"{n}.arrc")
            ts = pretokenize(split, vq, vocab, codes, encoders)
            save_tensors(out / f"{n}.arrc", ts.to_tensors(), {"captions": ts.captions})
    for n in names:
        tensors, meta = load_tensors(out / f"{n}.arrc")
        result[n] = TokenizedSet.from_tensors(tensors, meta["captions"])
    return result


# ---------------------------------------------------------------------------
# stage: LM pretraining


def pretrain_lm(ws: Workspace, mode: str, force: bool = False) -> Path:
    """``text_only``: caption LM (init for arra). ``t2i``: generator trained on
    the source palette (init for arra_adapt)."""
    if mode not in ("text_only", "t2i"):
        raise ConfigError("pretrain-lm mode must be text_only or t2i")
    ws.require_data()
    out = ws.lm_dir(mode)
    if (out / "manifest.json").exists() and not force:
        return out
    cfg = ws.config
    out.mkdir(parents=True, exist_ok=True)
    if mode == "text_only":
        split = load_split(ws.data_dir / "train.arrc")
        model, history = pretrain_text_lm(split.captions, TextVocab(), cfg.train.model, cfg.text_lm)
        from arralab.armodel import save_model

        save_model(model, out / "model.arrc")
        summary = {"final_loss": history[-1] if history else None}
        inputs = {"data": ws.data_hash}
    else:
        ws.require_tokenizer()
        vq, vocab, codes = load_tokenizer(ws)
        source = load_split(ws.data_dir / "source.arrc")
        data = pretokenize(source, vq, vocab, codes)
        tcfg = replace(
            cfg.train,
            regime="baseline",
            steps=cfg.source.steps,
            seed=cfg.source.seed,
            corpus=replace(cfg.train.corpus, palette=cfg.data.source_palette),
        )
        trainer = Trainer(tcfg, vocab, codes, _grid(vq, cfg), data)
        trainer.fit()
        trainer.save_checkpoint(out / "model.arrc")
        summary = {"final_L_AR": trainer.records[-1]["L_AR"] if trainer.records else None}
        inputs = {"data": ws.data_hash, "tokenizer": ws.tokenizer_hash}
    ws._manifest(f"pretrain-lm:{mode}", out, inputs, {"model": "model.arrc"}, summary)
    log.info("pretrain-lm %s -> %s", mode, out)
    return out


def _grid(vq: VqTokenizer, cfg: PipelineConfig) -> tuple[int, int]:
    side = cfg.train.corpus.canvas // vq.config.factor
    return side, side


# ---------------------------------------------------------------------------
# stage: train


def check_train_dependencies(ws: Workspace) -> None:
    ws.require_data()
    ws.require_tokenizer()
    for k in ws.needed_encoders():
        ws.require_encoder(k)
    mode = ws.init_mode()
    if mode:
        ws.require_lm(mode)


def train(
    ws: Workspace,
    force: bool = False,
    resume=None,
    checkpoint_every: int | None = None,
    progress=None,
) -> Path:
    check_train_dependencies(ws)
    out = ws.run_dir
    if (out / "manifest.json").exists() and not force and resume is None:
        return out
    cfg = ws.config
    vq, vocab, codes = load_tokenizer(ws)
    sets = tokenized(ws)
    mode = ws.init_mode()
    init = ws.lm_dir(mode) / "model.arrc" if mode else None
    frozen = {"vq": module_checksum(vq)}
    frozen.update({k: module_checksum(load_frozen_encoder(ws, k)) for k in ws.needed_encoders()})
    out.mkdir(parents=True, exist_ok=True)
    if resume is None and (out / "metrics.jsonl").exists():
        (out / "metrics.jsonl").unlink()
    _write_json(out / "config.json", cfg.train.to_dict())
    trainer = Trainer(cfg.train, vocab, codes, _grid(vq, cfg), sets["train"], sets["heldout"], init, out)
    if resume is not None:
        trainer.load_checkpoint(resume)

    def hook(rec):
        if progress is not None:
            progress(rec)
        step = trainer.step_idx
        if checkpoint_every and rec.get("kind") == "train" and step % checkpoint_every == 0:
            trainer.save_checkpoint(out / f"checkpoint_{step}.arrc")

    trainer.fit(log=hook)
    trainer.save_checkpoint(out / "checkpoint.arrc")
    evals = [r for r in trainer.records if r.get("kind") == "eval"]
    last = [r for r in trainer.records if r.get("kind") == "train"]
    ws._manifest(
        "train",
        out,
        {
            "data": ws.data_hash,
            "tokenizer": ws.tokenizer_hash,
            "encoders": {k: ws.encoder_hash(k) for k in ws.needed_encoders()},
            "init": ws.lm_hash(mode) if mode else None,
            "frozen_checksums": frozen,
        },
        {"checkpoint": "checkpoint.arrc", "metrics": "metrics.jsonl", "config": "config.json"},
        {
            "steps": trainer.step_idx,
            "final_L_AR": last[-1]["L_AR"] if last else None,
            "eval_cos_initial": evals[0]["eval_cos"] if evals else None,
            "eval_cos_final": evals[-1]["eval_cos"] if evals else None,
            "fingerprint": fingerprint(cfg.train),
            "run_hash": ws.run_hash,
        },
    )
    log.info("train -> %s", out)
    return out


def fingerprint(train_cfg: TrainConfig) -> str:
    """Config identity across repeat seeds."""
    d = train_cfg.to_dict()
    d.pop("seed")
    return config_hash(d)


# ---------------------------------------------------------------------------
# stage: sample / eval


def _checkpoint(ws: Workspace, checkpoint) -> Path:
    if checkpoint is not None:
        path = Path(checkpoint)
        if not path.exists():
            raise DependencyError("checkpoint", "train", path)
        return path
    ws.require_run()
    return ws.run_dir / "checkpoint.arrc"


def sample(ws: Workspace, prompts: list[str], out_dir, checkpoint=None, scale: int = 4) -> list[Path]:
    """Write one PNG plus a JSON sidecar per prompt."""
    from PIL import Image

    ws.require_tokenizer()
    path = _checkpoint(ws, checkpoint)
    vq, vocab, codes = load_tokenizer(ws)
    model, meta = load_generator(path)
    layout = _layout(ws, vq, vocab)
    images, tokens = generate_images(model, vq, vocab, codes, layout, prompts, ws.config.sample)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i, (img, prompt) in enumerate(zip(images, prompts)):
        png = out_dir / f"sample_{i:04d}.png"
        arr = (np.clip(img, 0, 1) * 255).round().astype(np.uint8)
        if scale > 1:
            arr = arr.repeat(scale, axis=0).repeat(scale, axis=1)
        Image.fromarray(arr).save(png)
        _write_json(
            png.with_suffix(".json"),
            {
                "prompt": prompt,
                "tokens": tokens[i].tolist(),
                "sample_config": ws.config.sample.to_dict(),
                "checkpoint": str(path),
                "index": i,
            },
        )
        written.append(png)
    return written


def _layout(ws: Workspace, vq: VqTokenizer, vocab: TextVocab) -> Layout:
    return Layout(vocab.max_len, _grid(vq, ws.config), ws.config.train.alignment.mechanism)


METRIC_KEYS = (
    "frechet",
    "clip_score",
    "ms_ssim",
    "object_recall",
    "position_accuracy",
    "color_accuracy",
    "exact_match",
)
LOWER_IS_BETTER = {"frechet", "final_L_AR"}


def evaluate(ws: Workspace, checkpoint=None, force: bool = False) -> dict:
    """Generate for every held-out caption and score the images."""
    ws.require_data()
    ws.require_tokenizer()
    ws.require_encoder("cross_modal")
    path = _checkpoint(ws, checkpoint)
    report_path = ws.run_dir / "eval.json" if checkpoint is None else None
    if report_path is not None and report_path.exists() and not force:
        return json.loads(report_path.read_text(encoding="utf-8"))
    vq, vocab, _ = load_tokenizer(ws)
    codes = Vocabulary(len(vocab), vq.config.codebook_size)
    model, meta = load_generator(path)
    held = load_split(ws.data_dir / "heldout.arrc")
    images, _ = generate_images(
        model, vq, vocab, codes, _layout(ws, vq, vocab), held.captions, ws.config.sample
    )
    enc = load_frozen_encoder(ws, "cross_modal")
    f_gen = global_features(enc, images.astype(np.float32), "cls").double().numpy()
    f_ref = global_features(enc, held.images, "cls").double().numpy()
    attrs = attribute_accuracy(images, held.captions, ws.config.train.corpus.palette)
    report = {
        "frechet": frechet_distance(FeatureSet(f_gen, "generated"), FeatureSet(f_ref, "reference")),
        "clip_score": clip_score(enc, vocab, images, held.captions),
        "ms_ssim": float(np.mean([ms_ssim(a, b) for a, b in zip(images, held.images)])),
        **attrs,
        "n": len(held),
        "checkpoint": str(path),
        "sample_config": ws.config.sample.to_dict(),
        "fingerprint": fingerprint(ws.config.train),
        "run_hash": ws.run_hash,
    }
    if report_path is not None:
        _write_json(report_path, report)
    return report


# ---------------------------------------------------------------------------
# ablation grid


@dataclass
class AblationGrid:
    """``axes``: one full product. ``sweeps``: a list of products whose union
    forms the grid (one-axis-at-a-time tables). Both empty: the base cell."""

    base: dict = field(default_factory=dict)
    axes: dict = field(default_factory=dict)
    sweeps: list = field(default_factory=list)
    seeds: list = field(default_factory=lambda: [0])

    @classmethod
    def load(cls, path) -> "AblationGrid":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read grid {path}: {exc}") from None
        _check_keys(d, cls, "grid")
        return cls(**d)

    def cell_overrides(self) -> list[dict]:
        products = list(self.sweeps)
        if self.axes:
            products.append(self.axes)
        if not products:
            return [{}]
        cells = []
        for prod in products:
            keys = list(prod)
            for values in itertools.product(*(prod[k] for k in keys)):
                cells.append(dict(zip(keys, values)))
        return cells

    def axis_paths(self) -> list[str]:
        paths = list(self.axes)
        for s in self.sweeps:
            paths += [p for p in s if p not in paths]
        return paths


def _set_path(d: dict, path: str, value) -> None:
    keys = path.split(".")
    node = d
    for k in keys[:-1]:
        if not isinstance(node, dict) or k not in node:
            raise ConfigError(f"axis path {path!r} does not name a config field")
        node = node[k]
    if not isinstance(node, dict) or keys[-1] not in node:
        raise ConfigError(f"axis path {path!r} does not name a config field")
    node[keys[-1]] = value


def expand_grid(grid: AblationGrid, base_config_path=None) -> list[tuple[dict, PipelineConfig]]:
    """Every (cell overrides + seed) as a validated config, deduplicated by
    run identity. Raises ConfigError before anything is trained."""
    base = load_config(base_config_path, grid.base).to_dict()
    out, seen = [], set()
    for cell in grid.cell_overrides():
        for seed in grid.seeds:
            d = copy.deepcopy(base)
            for path, value in cell.items():
                _set_path(d, path, value)
            _set_path(d, "train.seed", seed)
            cfg = PipelineConfig.from_dict(d)
            key = config_hash(cfg.to_dict())
            if key in seen:
                continue
            seen.add(key)
            out.append(({**cell, "train.seed": seed}, cfg))
    return out


def prepare_upstream(root, cfg: PipelineConfig) -> None:
    ws = Workspace(root, cfg)
    gen_data(ws)
    train_tokenizer(ws)
    for k in ws.needed_encoders():
        train_encoder(ws, k)
    mode = ws.init_mode()
    if mode:
        pretrain_lm(ws, mode)
    tokenized(ws)


def run_cell(root, cfg_dict: dict, deterministic: bool = True) -> dict:
    """Train and evaluate one cell; never raises, so one failure cannot sink
    the grid."""
    if deterministic:
        set_deterministic(True)
    cfg = PipelineConfig.from_dict(cfg_dict)
    ws = Workspace(root, cfg)
    try:
        train(ws)
        report = evaluate(ws)
        manifest = RunManifest.read(ws.run_dir / "manifest.json")
        return {
            "status": "ok",
            "error": "",
            **{k: report[k] for k in METRIC_KEYS},
            "eval_cos_final": manifest.summary.get("eval_cos_final"),
            "final_L_AR": manifest.summary.get("final_L_AR"),
            "run_hash": ws.run_hash,
        }
    except (ArraError, ValueError, RuntimeError) as exc:
        return {"status": "failed", "error": f"{type(exc).__name__}: {exc}", "run_hash": ws.run_hash}


def ablate(
    root,
    grid: AblationGrid,
    base_config_path=None,
    parallel: int = 1,
    deterministic: bool = True,
    announce=print,
) -> tuple[list[dict], Path]:
    cells = expand_grid(grid, base_config_path)
    announce(f"ablation grid: {len(cells)} runs ({len(grid.cell_overrides())} cells x {len(grid.seeds)} seeds, deduplicated)")
    for _, cfg in cells:
        prepare_upstream(root, cfg)
    dicts = [cfg.to_dict() for _, cfg in cells]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(run_cell, [root] * len(dicts), dicts, [deterministic] * len(dicts)))
    else:
        results = []
        for i, d in enumerate(dicts):
            results.append(run_cell(root, d, deterministic))
            announce(f"cell {i + 1}/{len(dicts)}: {results[-1]['status']}")
    paths = grid.axis_paths()
    rows = []
    for (overrides, cfg), res in zip(cells, results):
        row = {"fingerprint": fingerprint(cfg.train), "seed": cfg.train.seed}
        row.update({p: json.dumps(_get_path(cfg.to_dict(), p)) for p in paths})
        row.update(res)
        rows.append(row)
    out = Path(root) / "ablations" / config_hash({"grid": asdict(grid), "base": str(base_config_path)})
    out.mkdir(parents=True, exist_ok=True)
    columns = ["fingerprint", "seed", *paths, "status", *METRIC_KEYS, "eval_cos_final", "final_L_AR", "run_hash", "error"]
    _write_csv(out / "results.csv", rows, columns)
    _write_json(out / "results.json", rows)
    return rows, out


def _get_path(d: dict, path: str):
    for k in path.split("."):
        d = d[k]
    return d


def _write_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({c: r.get(c, "") for c in columns})


# ---------------------------------------------------------------------------
# report


def _sample_std(xs: list[float]) -> float:
    return float(np.std(xs, ddof=1)) if len(xs) > 1 else 0.0


def report(manifest_dir, out_dir=None) -> dict:
    """Aggregate every trained run under ``manifest_dir`` by fingerprint."""
    root = Path(manifest_dir)
    runs = []
    for mpath in sorted(root.rglob("manifest.json")):
        m = RunManifest.read(mpath)
        if m.stage != "train":
            continue
        metrics = {"eval_cos_final": m.summary.get("eval_cos_final"), "final_L_AR": m.summary.get("final_L_AR")}
        eval_path = mpath.parent / "eval.json"
        if eval_path.exists():
            ev = json.loads(eval_path.read_text(encoding="utf-8"))
            metrics.update({k: ev[k] for k in METRIC_KEYS})
        runs.append((mpath.parent, m, metrics))
    if not runs:
        raise ConfigError(f"no train manifests found under {root}")
    out_dir = Path(out_dir) if out_dir is not None else root / "report"
    (out_dir / "curves").mkdir(parents=True, exist_ok=True)

    groups: dict[str, dict] = {}
    for run_dir, m, metrics in runs:
        fp = m.summary["fingerprint"]
        g = groups.setdefault(fp, {"fingerprint": fp, "config": m.config["train"], "seeds": [], "runs": [], "values": {}})
        g["seeds"].append(m.config["train"]["seed"])
        g["runs"].append(m.summary["run_hash"])
        for k, v in metrics.items():
            if v is not None:
                g["values"].setdefault(k, []).append(float(v))
        _write_curve(run_dir / "metrics.jsonl", out_dir / "curves" / f"{m.summary['run_hash']}.csv")

    summary = []
    for g in groups.values():
        stats = {k: {"mean": float(np.mean(v)), "std": _sample_std(v), "n": len(v)} for k, v in g["values"].items()}
        summary.append({k: g[k] for k in ("fingerprint", "config", "seeds", "runs")} | {"metrics": stats})
    best = {}
    for key in sorted({k for s in summary for k in s["metrics"]}):
        cands = [s for s in summary if key in s["metrics"]]
        pick = min if key in LOWER_IS_BETTER else max
        winner = pick(cands, key=lambda s: s["metrics"][key]["mean"])
        best[key] = winner["fingerprint"]
        for s in cands:
            s["metrics"][key]["best"] = s is winner
    result = {"groups": summary, "best": best, "n_runs": len(runs)}
    _write_json(out_dir / "summary.json", result)
    keys = sorted(best)
    rows = []
    for s in summary:
        row = {"fingerprint": s["fingerprint"], "n_seeds": len(s["seeds"])}
        for k in keys:
            if k in s["metrics"]:
                st = s["metrics"][k]
                row[f"{k}_mean"], row[f"{k}_std"] = st["mean"], st["std"]
                row[f"{k}_best"] = int(st["best"])
        rows.append(row)
    cols = ["fingerprint", "n_seeds"] + [f"{k}_{s}" for k in keys for s in ("mean", "std", "best")]
    _write_csv(out_dir / "summary.csv", rows, cols)
    return result


def _write_curve(metrics_path: Path, out: Path) -> None:
    if not metrics_path.exists():
        return
    rows = []
    for line in metrics_path.read_text(encoding="utf-8").splitlines():
        rec = json.loads(line)
        if rec.get("kind") == "train":
            rows.append(rec)
    _write_csv(out, rows, ["step", "L_AR", "L_GVA", "L_z", "total", "mean_cos"])


def read_metrics(run_dir) -> list[dict]:
    path = Path(run_dir) / "metrics.jsonl"
    return [json.loads(l) for l in path.read_text(encoding="utf-8").splitlines() if l.strip()]
