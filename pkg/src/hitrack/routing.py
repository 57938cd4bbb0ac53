"""Dynamic routing: the scene router, early-exit dispatch and gated trackers.

The router is three linear layers with hardswish between and a sigmoid
output, applied per search token of the stage-1 feature map. Its pooled score
F is the mean of the per-token scores that exceed the foreground threshold
tau_fg; when no token clears the threshold F falls back to the mean of all
scores (keeping F strictly inside (0, 1), so T=0 always routes fast and T=1
always routes full under the strict comparisons below).

Dispatch (threshold T): F > T runs the fast route, Head1 on (s_max, g1),
and the rest of the network is never executed; F <= T runs stages 2-3, the
bridge and Head2. The tie F == T deliberately takes the full route.

The same decision gates an arbitrary base tracker in ``DyTracker``: easy
frames are answered by the fast route, hard frames are re-predicted by the
base tracker from the raw frame (fast-route features are never fed to it).
"""
from __future__ import annotations

from dataclasses import dataclass, replace as dc_replace

import numpy as np

from . import runtime
from .backbone import Stage1State, continue_forward, embed_template, stage1_forward
from .errors import DataError, ShapeError
from .fusion import BoxPrediction, bridge, corner_head
from .tensor import hardswish, linear, mac_scope, sigmoid
from .weights import ModelParams, RouterWeights

ROUTE1 = "route1"
ROUTE2 = "route2"


@dataclass(eq=False)
class RouteDecision:
    score_map: np.ndarray       # [Hx, Wx] per-token scores
    f: float                    # pooled score
    threshold: float
    route: str                  # ROUTE1 iff f > threshold
    fallback: bool              # no token above tau_fg
    reused: bool = False        # decision carried over (classify_every_n > 1)


def router_apply(features: np.ndarray, w: RouterWeights) -> np.ndarray:
    """Per-token scores in (0, 1) for a [T, C1] feature matrix."""
    z = hardswish(linear(features, w.w1, w.b1))
    z = hardswish(linear(z, w.w2, w.b2))
    return sigmoid(linear(z, w.w3, w.b3))[:, 0]


def router_score(s_max_feat: np.ndarray, w: RouterWeights):
    """Score map plus pooled score F; returns (scores, f, fallback)."""
    s_max_feat = np.asarray(s_max_feat)
    if s_max_feat.ndim != 3:
        raise ShapeError(f"router expects an HxWxC feature map, got {s_max_feat.shape}")
    h, wd, c = s_max_feat.shape
    if c != w.w1.shape[0]:
        raise ShapeError(f"router expects {w.w1.shape[0]} channels, features have {c}")
    with mac_scope("router"):
        scores = router_apply(s_max_feat.reshape(h * wd, c), w)
    above = scores > w.tau_fg
    if above.any():
        f = float(scores[above].mean())
        fallback = False
    else:
        f = float(scores.mean())
        fallback = True
    return scores.reshape(h, wd), f, fallback


def route_decision(s_max_feat: np.ndarray, w: RouterWeights, threshold: float) -> RouteDecision:
    if not 0.0 <= threshold <= 1.0:
        raise DataError(f"threshold must be in [0, 1], got {threshold}")
    scores, f, fallback = router_score(s_max_feat, w)
    route = ROUTE1 if f > threshold else ROUTE2
    return RouteDecision(scores, f, float(threshold), route, fallback)


def route1_head(state: Stage1State, params: ModelParams) -> BoxPrediction:
    return corner_head(state.s_max, state.g1, params.head1, scope="head1")


def route2_head(state: Stage1State, params: ModelParams) -> BoxPrediction:
    outs = continue_forward(state, params)
    fused = bridge(outs.s_max, outs.s_mid, outs.s_min, params.bridge)
    return corner_head(fused, outs.g, params.head2, scope="head2")


def route1_forward(template_img, search_img, params: ModelParams) -> BoxPrediction:
    """Standalone fast route: stage 1 + Head1, no router involved."""
    return route1_head(stage1_forward(template_img, search_img, params), params)


def full_forward(template_img, search_img, params: ModelParams) -> BoxPrediction:
    """The plain static tracker: all stages, bridge, Head2, no router."""
    return route2_head(stage1_forward(template_img, search_img, params), params)


def dyhit_forward(template_img, search_img, params: ModelParams,
                  threshold: float) -> tuple[BoxPrediction, RouteDecision]:
    """Early-exit dispatch on one image pair."""
    state = stage1_forward(template_img, search_img, params)
    decision = route_decision(state.s_max, params.router, threshold)
    if decision.route == ROUTE1:
        return route1_head(state, params), decision
    return route2_head(state, params), decision


# ---------------------------------------------------------------------------
# Base-tracker handles for the training-free gating wrapper.

class OracleBaseTracker:
    """Test double for a high-performance tracker: ground truth plus seeded
    Gaussian jitter on center and size. Noise is keyed by (seed, frame index)
    so predictions do not depend on which frames were routed to it."""

    latency_class = "oracle"

    def __init__(self, gt_boxes, noise_scale: float, seed: int):
        self.gt = [tuple(float(v) for v in b) for b in gt_boxes]
        self.noise = float(noise_scale)
        self.seed = int(seed)
        self._ready = False

    def init(self, frame, box) -> None:
        self._ready = True

    def predict(self, frame_index: int, frame, prev_box):
        if not self._ready:
            raise DataError("base tracker used before init")
        if not 0 <= frame_index < len(self.gt):
            raise DataError(f"no ground truth for frame index {frame_index}")
        x, y, w, h = self.gt[frame_index]
        if self.noise == 0.0:
            return (x, y, w, h)
        rng = np.random.default_rng((self.seed, frame_index))
        n = rng.standard_normal(4)
        cx = x + w / 2.0 + self.noise * w * n[0]
        cy = y + h / 2.0 + self.noise * h * n[1]
        nw = max(w * (1.0 + self.noise * n[2]), 1e-6)
        nh = max(h * (1.0 + self.noise * n[3]), 1e-6)
        return (cx - nw / 2.0, cy - nh / 2.0, nw, nh)


def oracle_base_tracker(gt_boxes, noise_scale: float, seed: int) -> OracleBaseTracker:
    return OracleBaseTracker(gt_boxes, noise_scale, seed)


class FileBaseTracker:
    """Replays per-frame boxes precomputed by any external tracker."""

    latency_class = "file"

    def __init__(self, path):
        self.path = path
        self.boxes = runtime.read_boxes(path)
        self._ready = False

    def init(self, frame, box) -> None:
        self._ready = True

    def predict(self, frame_index: int, frame, prev_box):
        if not self._ready:
            raise DataError("base tracker used before init")
        if frame_index >= len(self.boxes):
            raise DataError(
                f"{self.path}: no stored box for frame {frame_index + 1} "
                f"(file has {len(self.boxes)} lines)")
        return self.boxes[frame_index]


def file_base_tracker(path) -> FileBaseTracker:
    return FileBaseTracker(path)


# ---------------------------------------------------------------------------
# Tracker objects implementing the runtime protocol: init(frame, box) then
# step(frame, frame_index, prev_box) -> (box_xywh, decision | None, seconds).

TEMPLATE_FACTOR = 2.0
SEARCH_FACTOR = 4.0
MIN_CROP_EXTENT = 2.0  # pixels


def crop_reference(box, min_extent: float = MIN_CROP_EXTENT):
    """Previous-output box made crop-safe: extents floored, center kept.

    Untrained heads may emit inverted corners; the reported box keeps them,
    but the next frame's context crop needs a positive-area reference.
    """
    x, y, w, h = (float(v) for v in box)
    cx = x + w / 2.0
    cy = y + h / 2.0
    w = max(w, min_extent)
    h = max(h, min_extent)
    return (cx - w / 2.0, cy - h / 2.0, w, h)


class _ModelTracker:
    def __init__(self, params: ModelParams):
        self.params = params
        self.template = None
        self.template_grid = None  # template embed is fixed per sequence

    def init(self, frame, box) -> None:
        cfg = self.params.config
        self.template, _ = runtime.crop_resize(frame, box, TEMPLATE_FACTOR, cfg.template_size)
        self.template_grid = embed_template(self.template, self.params)

    def _stage1(self, patch) -> Stage1State:
        return stage1_forward(self.template, patch, self.params, self.template_grid)

    def _search(self, frame, prev_box):
        return runtime.crop_resize(frame, crop_reference(prev_box), SEARCH_FACTOR,
                                   self.params.config.search_size)


class Route1Tracker(_ModelTracker):
    """Fast route only (stage 1 + Head1)."""

    def step(self, frame, frame_index, prev_box):
        patch, mapping = self._search(frame, prev_box)
        t0 = runtime.now()
        pred = route1_head(self._stage1(patch), self.params)
        dt = runtime.now() - t0
        return runtime.map_box_to_frame(pred.corners, mapping), None, dt


class FullTracker(_ModelTracker):
    """Static full pipeline (all stages, bridge, Head2)."""

    def step(self, frame, frame_index, prev_box):
        patch, mapping = self._search(frame, prev_box)
        t0 = runtime.now()
        pred = route2_head(self._stage1(patch), self.params)
        dt = runtime.now() - t0
        return runtime.map_box_to_frame(pred.corners, mapping), None, dt


class DyHiTTracker(_ModelTracker):
    """Early-exit tracker; classify_every_n > 1 reuses the last decision."""

    def __init__(self, params: ModelParams, threshold: float, classify_every_n: int | None = None):
        super().__init__(params)
        self.threshold = float(threshold)
        self.every = int(params.config.classify_every_n if classify_every_n is None
                         else classify_every_n)
        if self.every < 1:
            raise DataError("classify_every_n must be >= 1")
        self._last: RouteDecision | None = None
        self._steps = 0
        self.router_runs = 0

    def init(self, frame, box) -> None:
        super().init(frame, box)
        self._last = None
        self._steps = 0
        self.router_runs = 0

    def step(self, frame, frame_index, prev_box):
        patch, mapping = self._search(frame, prev_box)
        t0 = runtime.now()
        state = self._stage1(patch)
        if self._steps % self.every == 0 or self._last is None:
            decision = route_decision(state.s_max, self.params.router, self.threshold)
            self.router_runs += 1
        else:
            decision = dc_replace(self._last, reused=True)
        self._last = decision
        self._steps += 1
        if decision.route == ROUTE1:
            pred = route1_head(state, self.params)
        else:
            pred = route2_head(state, self.params)
        dt = runtime.now() - t0
        return runtime.map_box_to_frame(pred.corners, mapping), decision, dt


class DyTracker(_ModelTracker):
    """Training-free gate: fast route plus router around a base tracker.

    ``route1_override`` substitutes the fast-route predictor (used by tests to
    model a fast tracker of known accuracy); routing still uses the real
    stage-1 features. The base tracker only ever sees the raw frame.
    """

    def __init__(self, params: ModelParams, threshold: float, base,
                 route1_override=None):
        super().__init__(params)
        self.threshold = float(threshold)
        self.base = base
        self.route1_override = route1_override

    def init(self, frame, box) -> None:
        super().init(frame, box)
        self.base.init(frame, box)
        if self.route1_override is not None:
            self.route1_override.init(frame, box)

    def step(self, frame, frame_index, prev_box):
        patch, mapping = self._search(frame, prev_box)
        t0 = runtime.now()
        state = self._stage1(patch)
        decision = route_decision(state.s_max, self.params.router, self.threshold)
        if decision.route == ROUTE1:
            if self.route1_override is not None:
                box = self.route1_override.predict(frame_index, frame, prev_box)
            else:
                pred = route1_head(state, self.params)
                box = runtime.map_box_to_frame(pred.corners, mapping)
        else:
            box = self.base.predict(frame_index, frame, prev_box)
        dt = runtime.now() - t0
        return box, decision, dt


def dytracker_step(frame, frame_index, prev_box, template_patch,
                   params: ModelParams, base, threshold: float,
                   route1_override=None):
    """One gating step on a raw frame; returns (box_xywh, RouteDecision).

    Functional form of ``DyTracker.step`` for callers that manage their own
    template and loop state.
    """
    patch, mapping = runtime.crop_resize(frame, crop_reference(prev_box), SEARCH_FACTOR,
                                         params.config.search_size)
    state = stage1_forward(template_patch, patch, params)
    decision = route_decision(state.s_max, params.router, threshold)
    if decision.route == ROUTE1:
        if route1_override is not None:
            return route1_override.predict(frame_index, frame, prev_box), decision
        pred = route1_head(state, params)
        return runtime.map_box_to_frame(pred.corners, mapping), decision
    return base.predict(frame_index, frame, prev_box), decision


def make_tracker(kind: str, params: ModelParams, threshold: float = 0.5,
                 base=None, classify_every_n: int | None = None):
    if kind == "route1":
        return Route1Tracker(params)
    if kind == "full":
        return FullTracker(params)
    if kind == "dyhit":
        return DyHiTTracker(params, threshold, classify_every_n)
    if kind == "dytracker":
        if base is None:
            raise DataError("dytracker needs a base tracker")
        return DyTracker(params, threshold, base)
    raise DataError(f"unknown tracker kind {kind!r}")
