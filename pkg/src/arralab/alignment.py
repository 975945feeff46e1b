"""Global visual alignment: which positions are aligned, the projection head,
the alignment loss and the composite training objective.

The alignment loss is ``1 - cos(f_A, f_GF)`` (or a width-normalized squared
error), so minimizing it maximizes similarity. Every position whose next
token is an image token is aligned to the same image-level target.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from arralab.armodel import IMAGE, MECHANISMS, REP, ForwardOutput, TokenSequence
from arralab.errors import ConfigError, ShapeError
from arralab.foundation import AGGREGATIONS, ENCODER_KINDS
from arralab.numerics import gelu

OBJECTIVES = ("cosine", "mse")
PROJECTIONS = ("mlp2", "maxpool")
Z_LOSS_WEIGHT = 1e-5
LAMBDA_GRID = (0.5, 0.8, 1.0, 1.5, 2.0)


@dataclass(frozen=True)
class AlignmentConfig:
    mechanism: str = "HYBNEXT"
    aggregation: str = "cls"
    encoder: str = "cross_modal"
    depth: int = 1
    lam: float = 1.0
    objective: str = "cosine"
    projection: str = "mlp2"

    def validate(self, n_layers: int | None = None) -> None:
        checks = [
            (self.mechanism, MECHANISMS, "mechanism"),
            (self.aggregation, AGGREGATIONS, "aggregation"),
            (self.encoder, ENCODER_KINDS, "encoder"),
            (self.objective, OBJECTIVES, "objective"),
            (self.projection, PROJECTIONS, "projection"),
        ]
        for value, allowed, what in checks:
            if value not in allowed:
                raise ConfigError(f"{what} must be one of {allowed}, got {value!r}")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if n_layers is not None and not 1 <= self.depth <= n_layers:
            raise ConfigError(f"alignment depth must lie in 1..{n_layers}, got {self.depth}")
        if self.encoder == "vision_only" and self.aggregation != "avgpool" and self.enabled:
            raise ConfigError(f"vision_only features have no CLS row; {self.aggregation!r} invalid")

    @property
    def enabled(self) -> bool:
        return self.mechanism != "none"

    @property
    def effective_lambda(self) -> float:
        return self.lam if self.enabled else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AlignmentConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)


class ProjectionHead(nn.Module):
    """``mlp2``: Linear -> GELU -> Linear. ``maxpool``: parameter-free max over
    fixed non-overlapping windows of width ``d_in // d_out``."""

    def __init__(self, kind: str, d_in: int, d_out: int):
        super().__init__()
        if kind not in PROJECTIONS:
            raise ConfigError(f"unknown projection {kind!r}")
        self.kind, self.d_in, self.d_out = kind, d_in, d_out
        if kind == "mlp2":
            self.fc1 = nn.Linear(d_in, d_in)
            self.fc2 = nn.Linear(d_in, d_out)
        elif d_in % d_out:
            raise ConfigError(f"maxpool needs d_out | d_in, got {d_in} -> {d_out}")

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        if h.shape[-1] != self.d_in:
            raise ShapeError("project", {"hidden": tuple(h.shape), "head_input": (self.d_in,)})
        if self.kind == "mlp2":
            return self.fc2(gelu(self.fc1(h)))
        return h.reshape(*h.shape[:-1], self.d_out, self.d_in // self.d_out).amax(-1)


def project(hidden_state: torch.Tensor, head: ProjectionHead) -> torch.Tensor:
    return head(hidden_state)


def select_alignment_positions(seq: TokenSequence, mechanism: str) -> np.ndarray:
    """Indices aligned under ``mechanism`` for a single sequence."""
    roles = np.asarray(seq.roles)
    if roles.ndim != 1:
        raise ValueError("select_alignment_positions takes a single sequence")
    return np.flatnonzero(alignment_mask(roles, mechanism))


def alignment_mask(roles, mechanism: str) -> np.ndarray:
    """Boolean mask of aligned positions, same shape as ``roles``."""
    roles = np.asarray(roles)
    mask = np.zeros(roles.shape, dtype=bool)
    if mechanism == "HYBNEXT":
        # every position whose prediction target is an image token
        mask[..., :-1] = roles[..., 1:] == IMAGE
    elif mechanism == "REP":
        mask = roles == REP
        if not mask.any(axis=-1).all():
            raise ValueError("REP alignment requested but the sequence holds no <REP> token")
    elif mechanism != "none":
        raise ConfigError(f"unknown alignment mechanism {mechanism!r}")
    return mask


def _gather(hidden: torch.Tensor, positions, f_gf: torch.Tensor):
    """Rows of ``hidden`` (B, n, d) at ``positions`` and their targets."""
    if hidden.dim() == 2:
        hidden = hidden.unsqueeze(0)
    if f_gf.dim() == 1:
        f_gf = f_gf.unsqueeze(0)
    pos = np.asarray(positions)
    if pos.dtype == bool:
        mask = torch.as_tensor(np.broadcast_to(pos, hidden.shape[:2]).copy())
    else:
        mask = torch.zeros(hidden.shape[:2], dtype=torch.bool)
        mask[:, torch.as_tensor(pos, dtype=torch.long)] = True
    rows = mask.nonzero()[:, 0]
    return hidden[mask], f_gf[rows]


def per_position_losses(f_a: torch.Tensor, target: torch.Tensor, objective: str) -> torch.Tensor:
    if f_a.shape != target.shape:
        raise ShapeError("gva_loss", {"f_A": tuple(f_a.shape), "f_GF": tuple(target.shape)})
    if objective == "cosine":
        return 1.0 - F.cosine_similarity(f_a, target, dim=-1, eps=1e-8)
    if objective == "mse":
        return ((f_a - target) ** 2).sum(-1) / f_a.shape[-1]
    raise ConfigError(f"unknown objective {objective!r}")


def gva_loss(
    hidden: ForwardOutput | list,
    positions,
    f_gf: torch.Tensor,
    config: AlignmentConfig,
    head: ProjectionHead,
) -> torch.Tensor:
    """Mean over aligned positions of the per-position alignment loss, using
    the layer-``config.depth`` hidden states."""
    layers = hidden.hidden if isinstance(hidden, ForwardOutput) else hidden
    h, target = _gather(layers[config.depth], positions, f_gf)
    if h.shape[0] == 0:
        raise ValueError(f"no aligned positions for mechanism {config.mechanism!r}")
    return per_position_losses(head(h), target.to(h.dtype), config.objective).mean()


@torch.no_grad()
def mean_cosine(hidden, positions, f_gf, config: AlignmentConfig, head: ProjectionHead) -> float:
    layers = hidden.hidden if isinstance(hidden, ForwardOutput) else hidden
    h, target = _gather(layers[config.depth], positions, f_gf)
    return float(F.cosine_similarity(head(h), target.to(h.dtype), dim=-1, eps=1e-8).mean())


def composite_loss(ar, gva, z, config: AlignmentConfig, z_weight: float = Z_LOSS_WEIGHT):
    """L_AR + lambda * L_GVA + z_weight * L_z."""
    total = ar + z_weight * z
    if gva is not None:
        total = ar + config.effective_lambda * gva + z_weight * z
    return total
