"""Neural style transfer: texture/content losses and pixel optimization.

The base image starts from the content picture (or seeded noise) and is
updated by Adam on its pixels so that one deep activation map stays close
to the content image's while per-layer channel Gram matrices move toward
the style image's. Pixels are clamped to [0, 1] after every step.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import seeding
from .autodiff import Tensor
from .errors import ShapeError, StyleforgeError, SynthesisError
from .featnet import NetworkSpec, WeightBundle, run_network

DEFAULT_STYLE_LAYERS = ("conv1_1", "conv2_1", "conv3_1", "conv4_1")


@dataclass(frozen=True)
class StyleTransferConfig:
    content_weight: float = 0.025
    style_weight: float = 1.0
    content_layer: str = "conv4_2"
    style_layers: tuple[str, ...] = DEFAULT_STYLE_LAYERS
    iterations: int = 200
    learning_rate: float = 0.01
    init: str = "content"
    pooling: str = "max"

    def __post_init__(self):
        if self.content_weight < 0 or self.style_weight < 0:
            raise StyleforgeError("style/content weights must be non-negative")
        if self.content_weight == 0 and self.style_weight == 0:
            raise StyleforgeError("content and style weights cannot both be zero")
        if self.iterations < 1:
            raise StyleforgeError(f"iterations must be >= 1, got {self.iterations}")
        if self.init not in ("content", "noise"):
            raise StyleforgeError(f"init must be 'content' or 'noise', got {self.init!r}")
        if self.pooling != "max":
            raise StyleforgeError(f"only max pooling is supported, got {self.pooling!r}")
        if not self.style_layers:
            raise StyleforgeError("at least one style layer is required")

    def digest(self) -> str:
        payload = json.dumps(self.__dict__, sort_keys=True, default=list)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class GramMatrix:
    """Channel inner-product matrix of one activation map.

    ``matrix`` is a (C, C) tensor, graph-connected when the activation
    was; ``normalization`` records the H*W divisor applied.
    """

    matrix: Tensor
    normalization: float


@dataclass
class LossBreakdown:
    content: float
    style: float
    total: float
    per_style_layer: dict[str, float] = field(default_factory=dict)


@dataclass
class SynthesisResult:
    image: np.ndarray
    trace: list[LossBreakdown]
    final: LossBreakdown
    provenance: dict


def gram_matrix(activation: Tensor) -> GramMatrix:
    """G = F Ft / (H*W) with F the C x (H*W) channel-flattened activation."""
    shape = activation.data.shape
    if len(shape) != 3 or 0 in shape:
        raise ShapeError(f"gram_matrix: expected non-empty HxWxC activation, got {shape}")
    h, w, c = shape
    flat = ad.reshape(activation, (h * w, c))
    g = ad.matmul(ad.transpose2d(flat), flat) * (1.0 / (h * w))
    return GramMatrix(matrix=g, normalization=float(h * w))


def content_loss(f_base: Tensor, p_target: Tensor) -> Tensor:
    """MSE between the base and target content activations."""
    return ad.mse(f_base, p_target)


def style_loss(g_base: dict[str, GramMatrix], a_target: dict[str, GramMatrix]) -> Tensor:
    """Mean over style layers of the Gram-matrix MSE."""
    missing = sorted(set(a_target) - set(g_base))
    extra = sorted(set(g_base) - set(a_target))
    if missing or extra:
        raise ShapeError(
            f"style_loss: layer sets differ (missing {missing}, unexpected {extra})"
        )
    if not g_base:
        raise ShapeError("style_loss: empty layer set")
    total = None
    for name in sorted(g_base):
        term = ad.mse(g_base[name].matrix, a_target[name].matrix)
        total = term if total is None else total + term
    return total * (1.0 / len(g_base))


def total_loss(l_content, l_style, cfg: StyleTransferConfig):
    """Weighted sum w_c * L_c + w_s * L_s (tensor or float, matching inputs)."""
    c_val = l_content.item() if isinstance(l_content, Tensor) else float(l_content)
    s_val = l_style.item() if isinstance(l_style, Tensor) else float(l_style)
    if c_val < 0 or s_val < 0:
        raise StyleforgeError(f"losses must be non-negative, got {c_val}, {s_val}")
    if isinstance(l_content, Tensor) and isinstance(l_style, Tensor):
        return l_content * cfg.content_weight + l_style * cfg.style_weight
    return cfg.content_weight * c_val + cfg.style_weight * s_val


def _targets(spec, bundle, image, cfg):
    x = Tensor(np.asarray(image, dtype=np.float64))
    wanted = set(cfg.style_layers) | {cfg.content_layer}
    _, caps = run_network(spec, bundle, x, capture=wanted, stop_after_capture=True)
    return caps


def synthesize(
    content: np.ndarray,
    style: np.ndarray,
    spec: NetworkSpec,
    bundle: WeightBundle,
    cfg: StyleTransferConfig,
    seed: int,
    content_id: str | None = None,
    style_id: str | None = None,
) -> SynthesisResult:
    """Optimize a base image to carry ``content``'s layout and ``style``'s texture.

    Runs ``cfg.iterations`` Adam steps on the pixels, records the loss
    breakdown at the start of every iteration plus a final evaluation,
    and clamps to [0, 1] after each step. Deterministic given all
    arguments; a non-finite loss aborts with the iteration index.
    """
    content = np.asarray(content, dtype=np.float64)
    style = np.asarray(style, dtype=np.float64)
    expected = spec.input_size
    if content.shape != expected or style.shape != expected:
        raise ShapeError(
            f"synthesize: images must match network input {expected}; "
            f"got content {content.shape}, style {style.shape}"
        )
    for name in (*cfg.style_layers, cfg.content_layer):
        if name not in spec.layer_names():
            raise ShapeError(f"synthesize: layer {name!r} not in network {spec.name!r}")

    content_caps = _targets(spec, bundle, content, cfg)
    p_target = Tensor(content_caps[cfg.content_layer].data.copy())
    style_caps = _targets(spec, bundle, style, cfg)
    a_target = {}
    for name in cfg.style_layers:
        gram = gram_matrix(style_caps[name])
        a_target[name] = GramMatrix(Tensor(gram.matrix.data.copy()), gram.normalization)

    if cfg.init == "content":
        x0 = content.copy()
    else:
        rng = seeding.generator(seed, "nst-noise")
        x0 = rng.random(expected)
    x = Tensor(x0, requires_grad=True)
    optimizer = ad.Adam([x], lr=cfg.learning_rate)
    wanted = set(cfg.style_layers) | {cfg.content_layer}

    def evaluate(px: Tensor) -> tuple[Tensor, LossBreakdown]:
        _, caps = run_network(spec, bundle, px, capture=wanted, stop_after_capture=True)
        l_c = content_loss(caps[cfg.content_layer], p_target)
        base_grams = {name: gram_matrix(caps[name]) for name in cfg.style_layers}
        per_layer = {
            name: float(ad.mse(base_grams[name].matrix, a_target[name].matrix).data)
            for name in cfg.style_layers
        }
        l_s = style_loss(base_grams, a_target)
        l_t = total_loss(l_c, l_s, cfg)
        breakdown = LossBreakdown(
            content=l_c.item(), style=l_s.item(), total=l_t.item(),
            per_style_layer=per_layer,
        )
        return l_t, breakdown

    trace: list[LossBreakdown] = []
    for iteration in range(cfg.iterations):
        l_t, breakdown = evaluate(x)
        if not np.isfinite(breakdown.total):
            raise SynthesisError(
                f"non-finite loss {breakdown.total} at iteration {iteration}",
                iteration=iteration,
            )
        trace.append(breakdown)
        optimizer.zero_grad()
        l_t.backward()
        optimizer.step()
        np.clip(x.data, 0.0, 1.0, out=x.data)

    _, final = evaluate(Tensor(x.data))
    if not np.isfinite(final.total):
        raise SynthesisError(
            f"non-finite final loss {final.total}", iteration=cfg.iterations
        )
    return SynthesisResult(
        image=x.data.copy(),
        trace=trace,
        final=final,
        provenance={
            "content_id": content_id,
            "style_id": style_id,
            "seed": int(seed),
            "config_digest": cfg.digest(),
        },
    )
