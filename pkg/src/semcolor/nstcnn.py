"""Reference-guided colorization.

A fresh network is fitted to map one colorful reference image's L plane to
its own AB planes. The fitted weights are then applied to the grayscale
content image, so only colour, never shape, comes from the reference. With
several references, each one colours the content pixels of its own mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from semcolor.colorspace import ChromaMap, LabImage, RgbImage, rgb_to_lab
from semcolor.eecnn import (
    Colorizer,
    EeCnnConfig,
    EmbeddingProvider,
    ModelWeights,
    build_network,
    constant_embedder,
    embed_luminance,
    init_weights,
    luminance_tensor,
    weights_from_network,
)
from semcolor.errors import MaskError, ShapeError
from semcolor.prepost import RegionMask, enforce_same_l_same_ab
from semcolor.trainer import optimize_pair

DEFAULT_BUDGET = 2000
DEFAULT_THRESHOLD = 1.0


@dataclass(frozen=True, eq=False)
class ReferenceSpec:
    image: RgbImage | LabImage
    mask: np.ndarray | None = None  # boolean, content-sized

    def __post_init__(self):
        if self.mask is not None:
            m = np.asarray(self.mask).astype(bool)
            m.setflags(write=False)
            object.__setattr__(self, "mask", m)

    def lab(self) -> LabImage:
        return self.image if isinstance(self.image, LabImage) else rgb_to_lab(self.image)


@dataclass(frozen=True, eq=False)
class TransferJob:
    content_l: np.ndarray
    references: tuple[ReferenceSpec, ...]
    budget: int = DEFAULT_BUDGET
    threshold: float = DEFAULT_THRESHOLD
    bin_width: float = 1.0
    learning_rate: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "references", tuple(self.references))
        object.__setattr__(self, "content_l", np.asarray(self.content_l, dtype=np.float64))
        if not self.references:
            raise ValueError("a transfer job needs at least one reference")
        if self.budget < 1:
            raise ValueError("fit budget must be at least one step")
        for ref in self.references:
            if ref.mask is not None and ref.mask.shape != self.content_l.shape:
                raise ShapeError(f"mask {ref.mask.shape} does not match content {self.content_l.shape}")
        if len(self.references) > 1:
            if any(ref.mask is None for ref in self.references):
                raise MaskError("every reference needs a mask when more than one is given")
            check_partition([ref.mask for ref in self.references])


@dataclass(frozen=True, eq=False)
class FitResult:
    weights: ModelWeights
    final_loss: float
    steps: int
    converged: bool


def check_partition(masks) -> None:
    coverage = np.sum([np.asarray(m, dtype=np.int64) for m in masks], axis=0)
    gaps = int(np.sum(coverage == 0))
    overlaps = int(np.sum(coverage > 1))
    if gaps or overlaps:
        raise MaskError(f"masks must cover every pixel once: {gaps} uncovered, {overlaps} covered twice")


def default_provider(config: EeCnnConfig, seed: int = 0) -> EmbeddingProvider | None:
    return constant_embedder(config.embedding_dim, seed) if config.use_embedding else None


def fit_planes(
    l: np.ndarray,
    ab: ChromaMap,
    config: EeCnnConfig,
    budget: int = DEFAULT_BUDGET,
    threshold: float = DEFAULT_THRESHOLD,
    *,
    provider: EmbeddingProvider | None = None,
    learning_rate: float = 1e-4,
    seed: int = 0,
) -> FitResult:
    """Fit a fresh network to a single (L, AB) pair."""
    if budget < 1:
        raise ValueError("fit budget must be at least one step")
    l = np.asarray(l, dtype=np.float64)
    if l.shape != ab.shape:
        raise ShapeError(f"L plane {l.shape} vs chroma {ab.shape}")
    if provider is None:
        provider = default_provider(config, seed)
    net = build_network(init_weights(config, seed))
    emb = None
    if config.use_embedding:
        emb = torch.as_tensor(embed_luminance(provider, l), dtype=torch.float32)[None]
    target = torch.as_tensor(ab.stack().transpose(2, 0, 1) / config.ab_scale, dtype=torch.float32)[None]
    final, steps, converged = optimize_pair(
        net, luminance_tensor(l), target, emb,
        steps=budget, lr=learning_rate, threshold=threshold, ab_scale=config.ab_scale,
    )
    meta = {"fit_loss": final, "fit_steps": steps, "init_seed": seed}
    if provider is not None:
        meta["provider"] = provider.name
    return FitResult(weights_from_network(net.eval(), meta), final, steps, converged)


def fit_reference(
    ref: ReferenceSpec,
    config: EeCnnConfig,
    budget: int = DEFAULT_BUDGET,
    threshold: float = DEFAULT_THRESHOLD,
    **kwargs,
) -> FitResult:
    lab = ref.lab()
    return fit_planes(lab.l, ChromaMap(lab.a, lab.b), config, budget, threshold, **kwargs)


def composite(content_shape, chromas, masks) -> tuple[ChromaMap, RegionMask]:
    """Paste each chroma map into its mask; uncovered pixels stay neutral.

    Region ids follow reference order; uncovered pixels get the last id.
    """
    a = np.zeros(content_shape)
    b = np.zeros(content_shape)
    labels = np.full(content_shape, len(chromas), dtype=np.int64)
    for k, (ab, mask) in enumerate(zip(chromas, masks)):
        sel = np.ones(content_shape, dtype=bool) if mask is None else mask
        a[sel] = ab.a[sel]
        b[sel] = ab.b[sel]
        labels[sel] = k
    return ChromaMap(a, b), RegionMask.from_labels(labels)


def transfer(
    job: TransferJob,
    config: EeCnnConfig,
    provider: EmbeddingProvider | None = None,
    fits: list[FitResult] | None = None,
) -> ChromaMap:
    """Colour ``job.content_l`` from its references.

    Pass ``fits`` to reuse already fitted weights (one per reference).
    """
    if provider is None:
        provider = default_provider(config, job.seed)
    if fits is None:
        fits = [
            fit_reference(ref, config, job.budget, job.threshold,
                          provider=provider, learning_rate=job.learning_rate, seed=job.seed)
            for ref in job.references
        ]
    if len(fits) != len(job.references):
        raise ValueError("need one fit per reference")
    chromas = [Colorizer(fit.weights, provider)(job.content_l) for fit in fits]
    ab, regions = composite(job.content_l.shape, chromas, [r.mask for r in job.references])
    return enforce_same_l_same_ab(job.content_l, ab, job.bin_width, regions=regions)
