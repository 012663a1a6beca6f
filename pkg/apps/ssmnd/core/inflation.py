"""
2-D -> 3-D weight inflation.

Spatial layers of the 3-D model take the 2-D layers' weights unchanged, in order. The
patch embedding is repeated along time and divided by the temporal patch size, the
position embedding is spread over time by one of two policies, and the temporal
(T+ / T-) layers are initialised fresh with a scaled time-step bias.
"""

import dataclasses
import logging
from typing import Optional

import numpy as np

from core.errors import InflateError, PolicyError
from core.model import SsmNdModel
from models import InflationPlan, ModelConfig

logger = logging.getLogger("ssmnd.core.inflation")

POS_POLICIES = ("scaled_copy", "center_place")


def inflate_patch_embed(w2d: np.ndarray, t_patch: int) -> np.ndarray:
    """(K, D) -> (t_patch, K, D), each temporal tap w2d / t_patch."""
    if t_patch < 1:
        raise InflateError(f"t_patch must be >= 1, got {t_patch}", field="t_patch")
    w2d = np.asarray(w2d)
    return np.stack([w2d / t_patch for _ in range(t_patch)])


def inflate_pos_embed(e2d: np.ndarray, frames: int, policy: str) -> np.ndarray:
    """(H, W, D) -> (T, H, W, D) in the model's canonical T, H, W token order."""
    if frames < 1:
        raise InflateError(f"temporal extent must be >= 1, got {frames}", field="frames")
    e2d = np.asarray(e2d)
    if policy == "scaled_copy":
        return np.stack([e2d / frames for _ in range(frames)])
    if policy == "center_place":
        out = np.zeros((frames,) + e2d.shape, dtype=e2d.dtype)
        out[frames // 2] = e2d
        return out
    raise PolicyError(f"unknown position-embedding policy '{policy}'", field="pos_policy")


def inflated_config(config2d: ModelConfig, plan: InflationPlan) -> ModelConfig:
    if config2d.rank != 2:
        raise InflateError(f"source model must be 2-D, got rank {config2d.rank}", field="rank")
    if plan.frames % plan.t_patch:
        raise InflateError(
            f"{plan.frames} frames are not divisible by temporal patch {plan.t_patch}", field="frames"
        )
    n_layers = plan.n_layers
    if n_layers is None:
        n_layers = config2d.n_layers + 2 * (config2d.n_layers // plan.t_period)
    return config2d.model_copy(
        update={
            "name": f"{config2d.name}-inflated",
            "rank": 3,
            "input_shape": [plan.frames] + list(config2d.input_shape),
            "patch": [plan.t_patch] + list(config2d.patch),
            "n_layers": n_layers,
            "arrangement": "inflated",
            "t_period": plan.t_period,
            "factorization": "mono",
        }
    )


def inflate_model(
    config2d: ModelConfig,
    params2d: dict[str, np.ndarray],
    plan: InflationPlan,
    config3d: Optional[ModelConfig] = None,
) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    """Build 3-D parameters from a 2-D checkpoint; returns the 3-D config and params."""
    config3d = config3d or inflated_config(config2d, plan)
    model2d = SsmNdModel(config2d)
    model3d = SsmNdModel(config3d)
    if list(config3d.input_shape[1:]) != list(config2d.input_shape) or list(
        config3d.patch[1:]
    ) != list(config2d.patch):
        raise InflateError("3-D spatial extents or patch sizes differ from the 2-D model")
    missing = set(model2d.init_params(0)) - set(params2d)
    if missing:
        raise InflateError(f"2-D checkpoint is missing {sorted(missing)[:3]}...", field="params")

    logger.info(f"Step 1/4: initialising {config3d.n_layers}-layer 3-D model")
    params3d = model3d.init_params(plan.seed)

    logger.info("Step 2/4: copying spatial layers")
    layers2d = model2d.backbone.layers
    spatial = [
        layer for layer in model3d.backbone.layers if layer.variant.orderings[0].continuous_axis != 0
    ]
    spatial_ids = {id(layer) for layer in spatial}
    if len(spatial) != len(layers2d):
        raise InflateError(
            f"3-D schedule has {len(spatial)} spatial layers, the 2-D model has {len(layers2d)}",
            field="n_layers",
        )
    for src, dst in zip(layers2d, spatial):
        src_names = [n for n in params2d if n.startswith(src.prefix)]
        for name in src_names:
            target = dst.prefix + name[len(src.prefix) :]
            if target not in params3d or params3d[target].shape != params2d[name].shape:
                raise InflateError(f"no 3-D counterpart with matching shape for '{name}'")
            params3d[target] = np.array(params2d[name], copy=True)

    logger.info("Step 3/4: initialising temporal layers")
    rng = np.random.default_rng(plan.seed)
    for layer in model3d.backbone.layers:
        if id(layer) in spatial_ids:
            continue
        fresh = dataclasses.replace(
            layer, delta_scale=plan.delta_scale, zero_out_proj=plan.zero_init_new_layers
        )
        params3d.update(fresh.init_params(rng))

    logger.info("Step 4/4: inflating embeddings and copying the head")
    w3d = inflate_patch_embed(params2d["patch_embed.w"], plan.t_patch)
    params3d["patch_embed.w"] = w3d.reshape(-1, w3d.shape[-1])
    grid2d = model2d.grid
    e2d = np.asarray(params2d["pos_emb"]).reshape(grid2d + (config2d.d_model,))
    frames = model3d.grid[0]
    e3d = inflate_pos_embed(e2d, frames, plan.pos_policy)
    params3d["pos_emb"] = e3d.reshape(model3d.n_tokens, config3d.d_model)
    for name in ("patch_embed.b", "norm_f", "head.w", "head.b"):
        if params3d[name].shape != np.shape(params2d[name]):
            raise InflateError(
                f"'{name}' has shape {np.shape(params2d[name])}, 3-D needs {params3d[name].shape}"
            )
        params3d[name] = np.array(params2d[name], copy=True)
    return config3d, params3d
