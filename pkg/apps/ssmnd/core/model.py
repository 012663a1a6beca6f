"""
End-to-end network: patchify, patch + position embedding, the arranged
backbone, final norm, readout and head.

Parameters are a flat, ordered dict of float64 arrays. To differentiate, place them on
a Tape with `to_leaves` and call `forward` with the resulting Vars.
"""

from __future__ import annotations

import logging
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from core.blocks import Backbone, build
from core.errors import PatchError, ShapeError, TokenIndexError
from core.tensor import (
    DEFAULT_DTYPE,
    Tape,
    Var,
    matmul,
    reduce_mean,
    reshape,
    rms_norm,
    slice_axis,
)
from models import ModelConfig

logger = logging.getLogger("ssmnd.core.model")


def patchify(x: np.ndarray, patch: Sequence[int]) -> np.ndarray:
    """(B, *extents, C) -> (B, *grid, prod(patch) * C); patch contents ordered (p1..pN, C)."""
    x = np.asarray(x, dtype=DEFAULT_DTYPE)
    patch = tuple(int(p) for p in patch)
    extents = x.shape[1:-1]
    if len(extents) != len(patch):
        raise ShapeError(f"input {x.shape} has {len(extents)} axes, patch has {len(patch)}")
    for extent, p in zip(extents, patch):
        if p < 1 or extent % p:
            raise PatchError(f"extent {extent} is not divisible by patch size {p}", field="patch")
    grid = tuple(e // p for e, p in zip(extents, patch))
    split = (x.shape[0],) + tuple(v for g, p in zip(grid, patch) for v in (g, p)) + (x.shape[-1],)
    rank = len(patch)
    axes = (0,) + tuple(1 + 2 * i for i in range(rank)) + tuple(2 + 2 * i for i in range(rank))
    axes = axes + (2 * rank + 1,)
    tokens = x.reshape(split).transpose(axes)
    return tokens.reshape((x.shape[0],) + grid + (int(np.prod(patch)) * x.shape[-1],))


def token_grid(input_shape: Sequence[int], patch: Sequence[int]) -> tuple[int, ...]:
    for extent, p in zip(input_shape, patch):
        if extent % p:
            raise PatchError(f"extent {extent} is not divisible by patch size {p}", field="patch")
    return tuple(e // p for e, p in zip(input_shape, patch))


def vit_block_params(d_model: int) -> int:
    """Attention (qkv + proj) + 4x MLP + two LayerNorms, with biases."""
    return 12 * d_model * d_model + 13 * d_model


def to_leaves(tape: Tape, params: Mapping[str, np.ndarray]) -> dict[str, Var]:
    return {name: tape.leaf(value, name=name) for name, value in params.items()}


class SsmNdModel:
    """The network described by a ModelConfig."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.grid = token_grid(config.input_shape, config.patch)
        self.n_tokens = int(np.prod(self.grid))
        self.token_dim = int(np.prod(config.patch)) * config.in_channels
        self.arrangement = build(
            config.arrangement,
            config.rank,
            max(config.n_layers, 1),
            factorization=config.factorization,
            t_period=config.t_period,
        )
        layer_options = {
            "d_state": config.d_state,
            "expand": config.expand,
            "d_conv": config.d_conv,
            "euler_b": config.euler_b,
            "d_skip": config.d_skip,
            "scan_mode": config.scan_mode,
            "zero_out_proj": config.zero_init_out_proj,
        }
        if config.n_layers == 0:
            self.backbone = Backbone(self.arrangement, [], self.grid)
        else:
            self.backbone = Backbone.build(
                self.arrangement, config.d_model, self.grid, layer_options=layer_options
            )

    @property
    def head_outputs(self) -> int:
        if self.config.head == "regression":
            return self.config.out_channels
        return self.config.n_classes

    # ---------- parameters ----------

    def init_params(self, seed: int = 0) -> dict[str, np.ndarray]:
        cfg = self.config
        rng = np.random.default_rng(seed)
        d = cfg.d_model
        params: dict[str, np.ndarray] = {
            "patch_embed.w": rng.normal(0.0, self.token_dim**-0.5, size=(self.token_dim, d)),
            "patch_embed.b": np.zeros(d, dtype=DEFAULT_DTYPE),
            "pos_emb": rng.normal(0.0, 0.02, size=(self.n_tokens, d)),
        }
        params.update(self.backbone.init_params(rng))
        params["norm_f"] = np.ones(d, dtype=DEFAULT_DTYPE)
        if cfg.zero_init_head:
            params["head.w"] = np.zeros((d, self.head_outputs), dtype=DEFAULT_DTYPE)
        else:
            params["head.w"] = rng.normal(0.0, d**-0.5, size=(d, self.head_outputs))
        params["head.b"] = np.zeros(self.head_outputs, dtype=DEFAULT_DTYPE)
        return params

    def param_count(self) -> int:
        d = self.config.d_model
        embed = self.token_dim * d + d + self.n_tokens * d
        head = d + d * self.head_outputs + self.head_outputs
        return embed + self.backbone.param_count() + head

    # ---------- forward ----------

    def embed_input(self, x: np.ndarray) -> np.ndarray:
        """Raw (B, *extents, C) input -> (B, L, token_dim) patch tokens in canonical order."""
        x = np.asarray(x, dtype=DEFAULT_DTYPE)
        expected = tuple(self.config.input_shape) + (self.config.in_channels,)
        if x.shape[1:] != expected:
            raise ShapeError(f"model expects (B, {expected}), got {x.shape}")
        tokens = patchify(x, self.config.patch)
        return tokens.reshape(x.shape[0], self.n_tokens, self.token_dim)

    def features(
        self,
        params: Mapping[str, Union[Var, np.ndarray]],
        tokens: Union[Var, np.ndarray],
        train: bool = False,
        rng: Optional[np.random.Generator] = None,
        depth: Optional[int] = None,
    ) -> Var:
        """Normalised per-token features (B, L, D) before the readout."""
        cfg = self.config
        h = matmul(tokens, params["patch_embed.w"]) + params["patch_embed.b"] + params["pos_emb"]
        if train and cfg.dropout > 0:
            h = h * _dropout_mask(rng, h.shape, cfg.dropout)
        drop_path = cfg.drop_path if train else 0.0
        h = self.backbone.forward(params, h, depth=depth, drop_path=drop_path, rng=rng)
        return rms_norm(h, params["norm_f"])

    def forward_tokens(
        self,
        params: Mapping[str, Union[Var, np.ndarray]],
        tokens: Union[Var, np.ndarray],
        train: bool = False,
        rng: Optional[np.random.Generator] = None,
        depth: Optional[int] = None,
    ) -> Var:
        cfg = self.config
        h = self.features(params, tokens, train=train, rng=rng, depth=depth)
        if cfg.head == "regression":
            return h @ params["head.w"] + params["head.b"]
        if cfg.readout == "mean":
            pooled = reduce_mean(h, axis=1)
        else:
            if cfg.readout_index >= self.n_tokens:
                raise TokenIndexError(
                    f"readout index {cfg.readout_index} outside {self.n_tokens} tokens", field="readout_index"
                )
            row = slice_axis(h, 1, cfg.readout_index, cfg.readout_index + 1)
            pooled = reshape(row, (h.shape[0], h.shape[2]))
        return pooled @ params["head.w"] + params["head.b"]

    def forward(
        self,
        params: Mapping[str, Union[Var, np.ndarray]],
        x: np.ndarray,
        train: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> Var:
        return self.forward_tokens(params, self.embed_input(x), train=train, rng=rng)

    def predict(self, params: Mapping[str, np.ndarray], x: np.ndarray) -> np.ndarray:
        return self.forward(params, x).value


def _dropout_mask(rng: Optional[np.random.Generator], shape: tuple, rate: float) -> np.ndarray:
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = rng.random(shape) >= rate
    return keep.astype(DEFAULT_DTYPE) / (1.0 - rate)
