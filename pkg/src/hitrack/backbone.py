"""Hierarchical backbone: patch embedding, three stages, per-stage features.

The template and search images are embedded by a shared stack of four
stride-2 3x3 convolutions (16x downsampling), flattened, concatenated
template-first and pushed through three stages of residual blocks joined by
Shrink Attention. After stage 1 the search slice is recorded as the
fine-resolution feature map ``s_max`` together with its mean ``g1``; stages 2
and 3 produce ``s_mid``, ``s_min`` and the final global vector ``g`` (mean
over the stage-3 search tokens).

The forward is split into ``stage1_forward`` and ``continue_forward`` so the
dynamic router can stop after stage 1 without touching the rest of the
network; ``backbone_forward`` composes the two.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import posenc
from .attention import shrink_attention, transformer_block
from .config import TokenLayout, geometry
from .errors import ShapeError
from .tensor import affine, conv2d, hardswish, mac_scope
from .weights import EmbedWeights, ModelParams


@dataclass(eq=False)
class Stage1State:
    """Everything the early-exit route needs from the shared trunk."""

    tokens: np.ndarray      # [N1, C1] stage-1 output (S1)
    s_max: np.ndarray       # [Hx/16, Wx/16, C1] search slice of S1
    g1: np.ndarray          # [C1] mean over the stage-1 search tokens


@dataclass(eq=False)
class StageOutputs:
    s_max: np.ndarray       # [Hx/16, Wx/16, C1]
    s_mid: np.ndarray       # [Hx/32, Wx/32, C2]
    s_min: np.ndarray       # [Hx/64, Wx/64, C3]
    g: np.ndarray           # [C3] mean over the stage-3 search tokens
    g1: np.ndarray          # [C1]
    s1: np.ndarray          # [N1, C1] raw stage-1 tokens


def patch_embed(image: np.ndarray, ew: EmbedWeights) -> np.ndarray:
    """Four stacked stride-2 convolutions with hardswish between: 16x down."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"patch_embed expects an HxWx3 image, got {image.shape}")
    if image.shape[0] % 16 or image.shape[1] % 16:
        raise ShapeError(f"image extents must be divisible by 16, got {image.shape[:2]}")
    x = image
    last = len(ew.convs) - 1
    for i, conv in enumerate(ew.convs):
        x = conv2d(x, conv.kernel, stride=2, padding=1)
        x = affine(x, conv.scale, conv.shift)
        if i != last:
            x = hardswish(x)
    return x


def extract_search(tokens: np.ndarray, layout: TokenLayout) -> np.ndarray:
    """Search-region tokens reshaped to their spatial grid."""
    if tokens.shape[0] != layout.n_tokens:
        raise ShapeError(f"{tokens.shape[0]} tokens do not fit layout {layout}")
    hx, wx = layout.search_hw
    return tokens[layout.n_template:].reshape(hx, wx, tokens.shape[1])


def global_vector(tokens: np.ndarray, layout: TokenLayout) -> np.ndarray:
    """Arithmetic mean over the search-region tokens."""
    if tokens.shape[0] != layout.n_tokens:
        raise ShapeError(f"{tokens.shape[0]} tokens do not fit layout {layout}")
    return tokens[layout.n_template:].mean(axis=0)


def _layer_bias(attn_weights, index: np.ndarray) -> np.ndarray | None:
    """Gathered per-head bias for one layer, cached on the weight object.

    Weights are immutable after construction (see the concurrency notes), so
    the gather is a pure function of the layer and can be reused across
    frames.
    """
    if attn_weights.bias_table is None:
        return None
    cached = getattr(attn_weights, "_bias_cache", None)
    if cached is None:
        cached = posenc.gather_bias(attn_weights.bias_table, index)
        attn_weights._bias_cache = cached
    return cached


def _run_stage(tokens: np.ndarray, blocks, stage_geo) -> np.ndarray:
    for bw in blocks:
        tokens = transformer_block(tokens, bw, _layer_bias(bw.attn, stage_geo.bias_index))
    return tokens


def embed_template(template_img: np.ndarray, params: ModelParams) -> np.ndarray:
    """Template patch-embed grid, computable once per sequence."""
    cfg = params.config
    if template_img.shape[:2] != (cfg.template_size, cfg.template_size):
        raise ShapeError(
            f"template is {template_img.shape[:2]}, config expects {cfg.template_size}x{cfg.template_size}")
    with mac_scope("embed"):
        return patch_embed(np.asarray(template_img, dtype=cfg.np_dtype), params.embed)


def stage1_forward(template_img: np.ndarray, search_img: np.ndarray,
                   params: ModelParams, template_grid: np.ndarray | None = None) -> Stage1State:
    cfg = params.config
    if search_img.shape[:2] != (cfg.search_size, cfg.search_size):
        raise ShapeError(
            f"search is {search_img.shape[:2]}, config expects {cfg.search_size}x{cfg.search_size}")
    geo = geometry(cfg)
    dt = cfg.np_dtype
    tpl = template_grid if template_grid is not None else embed_template(template_img, params)
    with mac_scope("embed"):
        srch = patch_embed(np.asarray(search_img, dtype=dt), params.embed)
    c1 = cfg.channels[0]
    tokens = np.concatenate([tpl.reshape(-1, c1), srch.reshape(-1, c1)], axis=0)
    if params.abs_pos is not None:
        tokens = tokens + params.abs_pos
    with mac_scope("stage1"):
        tokens = _run_stage(tokens, params.stages[0], geo.stages[0])
    layout1 = geo.stages[0].layout
    return Stage1State(
        tokens=tokens,
        s_max=extract_search(tokens, layout1),
        g1=global_vector(tokens, layout1),
    )


def continue_forward(state: Stage1State, params: ModelParams) -> StageOutputs:
    """Stages 2 and 3 (with their shrink layers) on top of a stage-1 state."""
    geo = geometry(params.config)
    tokens = state.tokens

    def shrink(idx, tokens):
        sw = params.shrinks[idx]
        sg = geo.shrinks[idx]
        return shrink_attention(tokens, sg.in_layout, sw, _layer_bias(sw, sg.bias_index))

    with mac_scope("sa1"):
        tokens = shrink(0, tokens)
    with mac_scope("stage2"):
        tokens = _run_stage(tokens, params.stages[1], geo.stages[1])
    s_mid = extract_search(tokens, geo.stages[1].layout)
    with mac_scope("sa2"):
        tokens = shrink(1, tokens)
    with mac_scope("stage3"):
        tokens = _run_stage(tokens, params.stages[2], geo.stages[2])
    layout3 = geo.stages[2].layout
    return StageOutputs(
        s_max=state.s_max,
        s_mid=s_mid,
        s_min=extract_search(tokens, layout3),
        g=global_vector(tokens, layout3),
        g1=state.g1,
        s1=state.tokens,
    )


def backbone_forward(template_img: np.ndarray, search_img: np.ndarray,
                     params: ModelParams) -> StageOutputs:
    return continue_forward(stage1_forward(template_img, search_img, params), params)
