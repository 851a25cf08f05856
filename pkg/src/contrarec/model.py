"""The session model: normalized embeddings, gated graph propagation,
attention readout, hybrid session embedding, scaled-cosine scoring.

Shapes use the row-vector convention (x @ W with W shaped in x out), a
batch axis first: node states are (B, N, d), position states (B, T, d).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DataError
from .graph import GraphBatch

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 100
    max_positions: int = 50
    layers: int = 1
    scale: float = 12.0          # cosine logit multiplier, must stay > 1
    dropout: float = 0.1
    normalized_scoring: bool = True   # off reproduces the raw inner-product variant
    positional: bool = True           # off drops the positional table

    def __post_init__(self):
        if self.dim < 1:
            raise ContractError(f"ModelConfig: dim {self.dim} < 1")
        if self.layers < 1:
            raise ContractError(f"ModelConfig: layers {self.layers} < 1")
        if self.normalized_scoring and self.scale <= 1.0:
            raise ContractError(f"ModelConfig: scale {self.scale} must be > 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError(f"ModelConfig: dropout {self.dropout} outside [0, 1)")


class ParameterStore:
    """All trainable tensors, initialized N(0, 0.1), padding row zeroed.

    Iteration order of .tensors is fixed by construction, which keeps
    seeded runs bit-reproducible.
    """

    def __init__(self, num_items: int, config: ModelConfig, rng=None, tensors=None):
        self.num_items = num_items
        self.config = config
        if tensors is not None:
            self.tensors = tensors
            return
        if rng is None:
            raise ContractError("ParameterStore: need an rng to initialize")
        d = config.dim
        sigma = 0.1

        def init(name, *shape):
            return Tensor(rng.normal(0.0, sigma, size=shape), name=name)

        self.tensors = {}
        emb = init("item_embeddings", num_items + 1, d)
        emb.data[0] = 0.0  # padding row stays zero: no gradient ever reaches it
        for t in (
            emb,
            init("edge_proj", d, 2 * d),
            init("edge_bias", d),
            init("w_update", d, d),
            init("u_update", d, d),
            init("w_reset", d, d),
            init("u_reset", d, d),
            init("w_cand", d, d),
            init("u_cand", d, d),
            init("attn_last", d, d),
            init("attn_each", d, d),
            init("attn_bias", d),
            init("attn_vector", d),
            init("combine", 2 * d, d),
            init("positions", config.max_positions, d),
        ):
            self.tensors[t.name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ParameterStore":
        tensors = {k: Tensor(v.data.copy(), name=k) for k, v in self.tensors.items()}
        return ParameterStore(self.num_items, self.config, tensors=tensors)

    # -- checkpointing ------------------------------------------------

    def save(self, path, extra_meta: dict | None = None):
        """Serialize to .npz with a json metadata record; exact for f64."""
        meta = {
            "format_version": CHECKPOINT_VERSION,
            "num_items": self.num_items,
            "dim": self.config.dim,
            "max_positions": self.config.max_positions,
            "layers": self.config.layers,
            "scale": self.config.scale,
            "dropout": self.config.dropout,
            "normalized_scoring": self.config.normalized_scoring,
            "positional": self.config.positional,
        }
        if extra_meta:
            meta.update(extra_meta)
        arrays = {name: t.data for name, t in self.tensors.items()}
        np.savez(Path(path), __meta__=np.frombuffer(
            json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8),
            **arrays)

    @classmethod
    def load(cls, path):
        """Load a checkpoint; returns (store, meta dict)."""
        with np.load(Path(path)) as bundle:
            if "__meta__" not in bundle:
                raise DataError(f"{path}: not a contrarec checkpoint")
            meta = json.loads(bundle["__meta__"].tobytes().decode("utf-8"))
            if meta.get("format_version") != CHECKPOINT_VERSION:
                raise DataError(f"{path}: unsupported checkpoint version "
                                f"{meta.get('format_version')}")
            tensors = {name: Tensor(bundle[name].astype(np.float64), name=name)
                       for name in bundle.files if name != "__meta__"}
        config = ModelConfig(
            dim=meta["dim"], max_positions=meta["max_positions"], layers=meta["layers"],
            scale=meta["scale"], dropout=meta["dropout"],
            normalized_scoring=meta["normalized_scoring"], positional=meta["positional"])
        store = cls(meta["num_items"], config, tensors=tensors)
        return store, meta


@dataclass
class ForwardResult:
    hybrid: Tensor   # (B, d) hybrid session embeddings
    logits: Tensor   # (B, m) scores over items 1..m (padding excluded)


class SessionGraphModel:
    """Forward pass over graph batches; stateless apart from parameters."""

    def __init__(self, params: ParameterStore, config: ModelConfig | None = None):
        self.p = params
        self.config = config or params.config

    # -- stages -------------------------------------------------------

    def embed_items(self, indices, rng=None, training: bool = False) -> Tensor:
        """Normalized (and, in training, dropped-out) embedding rows."""
        emb = ad.gather_rows(self.p["item_embeddings"], indices)
        normed = ad.l2_normalize(emb)
        return ad.dropout(normed, self.config.dropout, rng=rng, training=training)

    def propagate(self, batch: GraphBatch, states: Tensor) -> Tensor:
        """One gated update of node states through the connection matrix."""
        d = self.config.dim
        if states.shape[-1] != d:
            raise ContractError(f"propagate: state dim {states.shape[-1]} != {d}")
        projected = ad.matmul(states, self.p["edge_proj"])       # (B, N, 2d)
        out_part = ad.slice_axis(projected, -1, 0, d)
        in_part = ad.slice_axis(projected, -1, d, 2 * d)
        stacked = ad.concat([out_part, in_part], axis=1)         # (B, 2N, d)
        messages = ad.add(ad.matmul(ad.constant(batch.connection), stacked),
                          self.p["edge_bias"])
        update = ad.sigmoid(ad.add(ad.matmul(messages, self.p["w_update"]),
                                   ad.matmul(states, self.p["u_update"])))
        reset = ad.sigmoid(ad.add(ad.matmul(messages, self.p["w_reset"]),
                                  ad.matmul(states, self.p["u_reset"])))
        candidate = ad.tanh(ad.add(ad.matmul(messages, self.p["w_cand"]),
                                   ad.matmul(ad.mul(reset, states), self.p["u_cand"])))
        # (1 - z) * old + z * cand, written as old + z * (cand - old)
        return ad.add(states, ad.mul(update, ad.sub(candidate, states)))

    def encode(self, batch: GraphBatch, rng=None, training: bool = False) -> Tensor:
        """Run propagation layers, map nodes back to session positions,
        and add the positional embedding; returns (B, T, d)."""
        t_max = batch.alias.shape[1]
        if t_max > self.config.max_positions:
            raise ContractError(
                f"encode: session length {t_max} exceeds positional table "
                f"size {self.config.max_positions}")
        states = self.embed_items(batch.nodes, rng=rng, training=training)
        for _ in range(self.config.layers):
            states = self.propagate(batch, states)
        seq = ad.gather_nodes(states, batch.alias)               # (B, T, d)
        seq = ad.dropout(seq, self.config.dropout, rng=rng, training=training)
        if self.config.positional:
            pos = ad.slice_axis(self.p["positions"], 0, 0, t_max)
            seq = ad.add(seq, pos)
        mask = batch.seq_mask[:, :, None].astype(np.float64)
        return ad.mul(seq, ad.constant(mask))

    def attention_readout(self, encoded: Tensor, seq_mask, last_pos) -> Tensor:
        """Attention-pool position vectors against the final position."""
        if not np.asarray(seq_mask).any(axis=1).all():
            raise ContractError("attention_readout: a session has no real positions")
        b, t, d = encoded.shape
        last = ad.reshape(ad.gather_nodes(encoded, np.asarray(last_pos)[:, None]),
                          (b, 1, d))
        pre = ad.sigmoid(ad.add(ad.add(ad.matmul(last, self.p["attn_last"]),
                                       ad.matmul(encoded, self.p["attn_each"])),
                                self.p["attn_bias"]))
        scores = ad.reshape(ad.matmul(pre, ad.reshape(self.p["attn_vector"], (d, 1))),
                            (b, t))
        alpha = ad.softmax(scores, mask=seq_mask)
        pooled = ad.matmul(ad.reshape(alpha, (b, 1, t)), encoded)
        return ad.reshape(pooled, (b, d))

    def combine(self, s_long: Tensor, s_short: Tensor) -> Tensor:
        """Hybrid session embedding from long- and short-term parts."""
        return ad.matmul(ad.concat([s_long, s_short], axis=-1), self.p["combine"])

    def score(self, hybrid: Tensor) -> Tensor:
        """Logits over items 1..m.

        Normalized scoring compares directions only (scaled cosine against
        the raw embedding rows); the ablated path is a plain inner product.
        """
        emb = ad.slice_axis(self.p["item_embeddings"], 0, 1, self.p.num_items + 1)
        if not self.config.normalized_scoring:
            return ad.matmul(hybrid, ad.transpose_last(emb))
        norms = np.sqrt((hybrid.data ** 2).sum(axis=-1))
        if norms.min() <= ad.NORM_EPS:
            raise ContractError("score: zero hybrid embedding cannot be normalized")
        sims = ad.matmul(ad.l2_normalize(hybrid), ad.transpose_last(ad.l2_normalize(emb)))
        return ad.scalar_mul(sims, self.config.scale)

    # -- full pass ----------------------------------------------------

    def forward(self, batch: GraphBatch, rng=None, training: bool = False) -> ForwardResult:
        encoded = self.encode(batch, rng=rng, training=training)
        s_long = self.attention_readout(encoded, batch.seq_mask, batch.last_pos)
        b, _, d = encoded.shape
        s_short = ad.reshape(ad.gather_nodes(encoded, batch.last_pos[:, None]), (b, d))
        hybrid = self.combine(s_long, s_short)
        return ForwardResult(hybrid=hybrid, logits=self.score(hybrid))


def model_from_config(num_items: int, config: ModelConfig, rng) -> SessionGraphModel:
    return SessionGraphModel(ParameterStore(num_items, config, rng=rng))


def ablated_config(config: ModelConfig, *, norm: bool | None = None,
                   pe: bool | None = None) -> ModelConfig:
    """Convenience for the scoring/positional ablation variants."""
    changes = {}
    if norm is not None:
        changes["normalized_scoring"] = norm
    if pe is not None:
        changes["positional"] = pe
    return replace(config, **changes)
