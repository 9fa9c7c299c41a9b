"""End-to-end descriptor model for ground-to-aerial place matching.

One parameter registry backs three interchangeable aggregators:

* ``ode-vlaq``  — query-residual aggregation whose prototype bank is shifted
  per ground observation by a conditioner driven through the fusion cascade;
* ``static-vlaq`` — the same aggregation with the shared, unshifted bank;
* ``pooling``  — mean pooling over projected tokens, as a baseline.

All aggregators register the identical parameter set in the identical RNG
draw order, so runs that differ only in aggregator start from bit-identical
weights. Aerial references always use the shared prototype bank, which keeps
their descriptors precomputable offline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import fusion, vlaq
from .errors import ConfigurationError, DimensionError
from .params import Layer, ParamStore, init_mlp
from .tokens import AerialReference, GroundObservation

AGGREGATORS = ("pooling", "static-vlaq", "ode-vlaq")
MODALITY_MASKS = ("both", "image-only", "lidar-only")


@dataclass(frozen=True)
class ModelConfig:
    raw_dim: int = 96
    proj_dim: int = 128
    num_queries: int = 64
    out_dim: int = 512
    fuse_dim: int = 64
    num_scales: int = 4
    ode_steps: int = 4
    horizon: float = 1.0
    alpha: float = 0.1
    aggregator: str = "ode-vlaq"
    msg_hidden: int = 64
    dyn_hidden: int = 64
    cond_hidden: int = 64
    activation: str = "tanh"

    def validate(self) -> None:
        if self.aggregator not in AGGREGATORS:
            raise ConfigurationError(
                f"unknown aggregator {self.aggregator!r}; expected one of {AGGREGATORS}"
            )
        if self.activation not in ("tanh", "relu"):
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if not math.isfinite(self.alpha):
            raise ConfigurationError(f"conditioning strength must be finite, got {self.alpha}")
        if min(self.raw_dim, self.msg_hidden, self.dyn_hidden, self.cond_hidden) < 1:
            raise ConfigurationError("model dims must be positive")
        self.vlaq_config().validate()
        self.fusion_config().validate()

    def vlaq_config(self) -> vlaq.VlaqConfig:
        return vlaq.VlaqConfig(
            num_queries=self.num_queries, proj_dim=self.proj_dim, out_dim=self.out_dim
        )

    def fusion_config(self) -> fusion.FusionConfig:
        return fusion.FusionConfig(
            fuse_dim=self.fuse_dim,
            num_scales=self.num_scales,
            steps=self.ode_steps,
            horizon=self.horizon,
        )


@dataclass
class GroundForward:
    """Descriptor plus the prototype shift that produced it (None if unshifted)."""

    descriptor: ad.Tensor
    delta: ad.Tensor | None = None


def _mask_modalities(mask: str) -> tuple[str, ...]:
    if mask not in MODALITY_MASKS:
        raise ConfigurationError(
            f"unknown modality mask {mask!r}; expected one of {MODALITY_MASKS}"
        )
    if mask == "image-only":
        return ("image",)
    if mask == "lidar-only":
        return ("lidar",)
    return ("image", "lidar")


class PlaceModel:
    """Parameter container and forward passes for the descriptor pipeline.

    Initialization draws every parameter in a fixed order from a single
    seeded generator: projectors, layer norms, prototypes, output
    projections, then per-scale fusion MLPs and the conditioner. Dynamics
    and conditioner final layers start at zero, so at initialization every
    flow is the identity and the prototype shift is exactly zero.
    """

    def __init__(self, config: ModelConfig, seed: int,
                 dtype: np.dtype = ad.DEFAULT_DTYPE) -> None:
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        self.store = ParamStore()
        rng = np.random.default_rng(seed)

        def linear_weight(name: str, fan_in: int, fan_out: int) -> ad.Tensor:
            scale = 1.0 / math.sqrt(fan_in)
            value = rng.normal(0.0, scale, size=(fan_in, fan_out)).astype(self.dtype)
            return self.store.add(name, value)

        c = config
        self.proj = {
            "image": linear_weight("proj.image.w", c.raw_dim, c.proj_dim),
            "lidar": linear_weight("proj.lidar.w", c.raw_dim, c.proj_dim),
            "aerial": linear_weight("proj.aerial.w", c.raw_dim, c.proj_dim),
        }
        self.ln = {}
        for modality in ("image", "lidar"):
            gain = self.store.add(
                f"ln.{modality}.gain", np.ones((1, c.proj_dim), dtype=self.dtype)
            )
            bias = self.store.add(
                f"ln.{modality}.bias", np.zeros((1, c.proj_dim), dtype=self.dtype)
            )
            self.ln[modality] = (gain, bias)
        self.prototypes = self.store.add(
            "prototypes",
            rng.normal(
                0.0, 1.0 / math.sqrt(c.proj_dim), size=(c.num_queries, c.proj_dim)
            ).astype(self.dtype),
        )
        self.agg_proj = linear_weight(
            "agg.proj.w", c.num_queries * c.proj_dim, c.out_dim
        )
        self.pool_proj = linear_weight("pool.proj.w", c.proj_dim, c.out_dim)

        self.msg_layers: dict[str, list[list[Layer]]] = {"image": [], "lidar": []}
        self.dyn_layers: list[list[Layer]] = []
        for idx in range(c.num_scales):
            for modality in ("image", "lidar"):
                self.msg_layers[modality].append(
                    init_mlp(
                        self.store,
                        f"fuse.msg.{modality}.{idx}",
                        (c.proj_dim, c.msg_hidden, c.fuse_dim),
                        rng,
                        dtype=self.dtype,
                    )
                )
            self.dyn_layers.append(
                init_mlp(
                    self.store,
                    f"fuse.dyn.{idx}",
                    (c.fuse_dim, c.dyn_hidden, c.fuse_dim),
                    rng,
                    zero_final=True,
                    dtype=self.dtype,
                )
            )
        self.cond_layers = init_mlp(
            self.store,
            "cond",
            (c.fuse_dim, c.cond_hidden, c.num_queries * c.proj_dim),
            rng,
            zero_final=True,
            dtype=self.dtype,
        )

    # ----- token preprocessing -------------------------------------------

    def _check_tokens(self, tokens: np.ndarray, owner: str) -> None:
        if tokens.ndim != 2 or tokens.shape[1] != self.config.raw_dim:
            raise DimensionError(
                f"{owner}: token matrix shape {tokens.shape} does not match "
                f"raw dim {self.config.raw_dim}"
            )

    def project_tokens(self, tokens: np.ndarray, modality: str,
                       owner: str = "tokens") -> ad.Tensor:
        """Project raw tokens into the working space; ground modalities are
        additionally layer-normalized per token, aerial tokens are not."""
        self._check_tokens(tokens, owner)
        projected = ad.matmul(
            ad.as_tensor(np.asarray(tokens, dtype=self.dtype)), self.proj[modality]
        )
        if modality == "aerial":
            return projected
        gain, bias = self.ln[modality]
        return ad.layer_norm(projected, gain, bias)

    def _ground_scales(self, obs: GroundObservation, modality: str) -> list[np.ndarray]:
        scales = obs.image.scales if modality == "image" else obs.lidar.scales
        if len(scales) != self.config.num_scales:
            raise DimensionError(
                f"{obs.id}: expected {self.config.num_scales} scales, got {len(scales)}"
            )
        return scales

    # ----- fusion + conditioning -----------------------------------------

    def fusion_embedding(self, obs: GroundObservation,
                         modalities: tuple[str, ...] = ("image", "lidar")) -> ad.Tensor:
        """Run the cascade over all scales of the unmasked modalities."""
        messages = []
        for idx in range(self.config.num_scales):
            terms = []
            for modality in modalities:
                tokens = self._ground_scales(obs, modality)[idx]
                pooled = ad.mean_rows(self.project_tokens(tokens, modality, obs.id))
                terms.append(
                    ad.mlp_forward(
                        pooled,
                        self.msg_layers[modality][idx],
                        activation=self.config.activation,
                    )
                )
            messages.append(terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1]))
        dynamics = [
            lambda y, layers=layers: ad.mlp_forward(
                y, layers, activation=self.config.activation
            )
            for layers in self.dyn_layers
        ]
        return fusion.fuse(messages, dynamics, self.config.fusion_config())

    def predict_query_shift(self, embedding: ad.Tensor) -> ad.Tensor:
        """Map a fusion embedding to an S x D additive prototype shift."""
        flat = ad.mlp_forward(
            embedding, self.cond_layers, activation=self.config.activation
        )
        return ad.reshape(flat, (self.config.num_queries, self.config.proj_dim))

    def adapt_prototypes(self, delta: ad.Tensor) -> ad.Tensor:
        return ad.add(self.prototypes, ad.scale(delta, self.config.alpha))

    # ----- descriptors ----------------------------------------------------

    def _ground_tokens(self, obs: GroundObservation,
                       modalities: tuple[str, ...]) -> ad.Tensor:
        parts = [
            self.project_tokens(self._ground_scales(obs, m)[-1], m, obs.id)
            for m in modalities
        ]
        return parts[0] if len(parts) == 1 else ad.concat_rows(parts)

    def ground_forward(self, obs: GroundObservation, mask: str = "both",
                       conditioned: bool | None = None) -> GroundForward:
        """Descriptor for a ground observation under an optional sensor mask.

        ``conditioned`` defaults to True only for the ode-vlaq aggregator;
        auxiliary single-modality descriptors pass False to stay on the
        shared prototype bank.
        """
        modalities = _mask_modalities(mask)
        if conditioned is None:
            conditioned = self.config.aggregator == "ode-vlaq"
        # A zero shift strength collapses conditioning to the shared bank
        # exactly, so the whole conditioning branch is skipped.
        conditioned = conditioned and self.config.alpha != 0.0
        tokens = self._ground_tokens(obs, modalities)
        if self.config.aggregator == "pooling":
            pooled = ad.mean_rows(tokens)
            return GroundForward(ad.l2_normalize(ad.matmul(pooled, self.pool_proj)))
        delta = None
        bank = self.prototypes
        if conditioned:
            delta = self.predict_query_shift(self.fusion_embedding(obs, modalities))
            bank = self.adapt_prototypes(delta)
        descriptor = vlaq.vlaq_descriptor(tokens, bank, self.agg_proj)
        return GroundForward(descriptor, delta)

    def aerial_descriptor(self, ref: AerialReference) -> ad.Tensor:
        """Descriptor for an aerial reference; never conditioned, so databases
        can be embedded once and reused for every query."""
        tokens = self.project_tokens(ref.token_set.scales[-1], "aerial", ref.id)
        if self.config.aggregator == "pooling":
            return ad.l2_normalize(ad.matmul(ad.mean_rows(tokens), self.pool_proj))
        return vlaq.vlaq_descriptor(tokens, self.prototypes, self.agg_proj)

    def assignment_heatmap(self, obs: GroundObservation, mask: str = "both",
                           conditioned: bool | None = None) -> np.ndarray:
        """Token-by-query soft-assignment matrix for inspection dumps."""
        if self.config.aggregator == "pooling":
            raise ConfigurationError("the pooling aggregator has no assignment matrix")
        with ad.no_grad():
            modalities = _mask_modalities(mask)
            if conditioned is None:
                conditioned = self.config.aggregator == "ode-vlaq"
            conditioned = conditioned and self.config.alpha != 0.0
            tokens = self._ground_tokens(obs, modalities)
            bank = self.prototypes
            if conditioned and self.config.aggregator == "ode-vlaq":
                delta = self.predict_query_shift(self.fusion_embedding(obs, modalities))
                bank = self.adapt_prototypes(delta)
            return vlaq.assignment_weights(tokens, bank).value.copy()
