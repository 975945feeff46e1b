"""Pre-norm transformer building blocks shared by the AR model and the
foundation encoders."""

from __future__ import annotations

import math

import torch
from torch import nn

from arralab.numerics import gelu


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.n_heads = n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)

    def forward(self, x, causal: bool, key_mask=None, cache=None):
        """``key_mask``: (B, n_keys) bool, True = attendable. ``cache``: dict
        holding past keys/values, extended in place."""
        b, n, d = x.shape
        hd = d // self.n_heads
        q, k, v = self.qkv(x).split(d, dim=-1)
        q, k, v = (t.reshape(b, n, self.n_heads, hd).transpose(1, 2) for t in (q, k, v))
        past = 0
        if cache is not None:
            if "k" in cache:
                past = cache["k"].shape[2]
                k = torch.cat([cache["k"], k], dim=2)
                v = torch.cat([cache["v"], v], dim=2)
            cache["k"], cache["v"] = k, v
        n_keys = k.shape[2]
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        allowed = torch.ones(n, n_keys, dtype=torch.bool)
        if causal:
            qpos = torch.arange(past, past + n).unsqueeze(1)
            allowed = torch.arange(n_keys).unsqueeze(0) <= qpos
        allowed = allowed.expand(b, 1, n, n_keys)
        if key_mask is not None:
            allowed = allowed & key_mask[:, None, None, :n_keys]
        scores = scores.masked_fill(~allowed, float("-inf"))
        att = torch.softmax(scores, dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, d_model: int, ratio: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(d_model, ratio * d_model)
        self.fc2 = nn.Linear(ratio * d_model, d_model)

    def forward(self, x):
        return self.fc2(gelu(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, d_model: int, n_heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = SelfAttention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.mlp = Mlp(d_model, mlp_ratio)

    def forward(self, x, causal=False, key_mask=None, cache=None):
        x = x + self.attn(self.ln1(x), causal, key_mask, cache)
        return x + self.mlp(self.ln2(x))
