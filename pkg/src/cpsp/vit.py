"""Micro vision transformer over pre-patchified token grids.

The same frozen weights serve two roles: a plain query pass that exposes the
final block's class-to-patch attention and per-token value norms, and a
prompted pass where learnable key/value prefix rows are injected into
configured blocks.  Token sequences keep their original one-based indices
(class token = 1, patches 2..N+1) so a sparse subsequence still knows where
each token came from.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

import cpsp.tensor as T
from cpsp.tensor import ContractError, DimensionError, Tensor, no_grad

__all__ = [
    "AttentionTrace",
    "BackboneConfig",
    "TokenSequence",
    "VisionTransformer",
    "load_checkpoint",
    "save_checkpoint",
]


@dataclass(frozen=True)
class BackboneConfig:
    """Architecture of the shared backbone.

    ``prompt_layers`` lists the zero-based blocks that receive key/value
    prefix rows when a prompt is injected.
    """

    num_layers: int = 4
    feature_dim: int = 32
    num_heads: int = 4
    mlp_ratio: int = 4
    grid_side: int = 8
    input_patch_dim: int = 16
    prompt_layers: tuple = (0, 1)

    def __post_init__(self):
        if self.feature_dim % self.num_heads != 0:
            raise ContractError("feature_dim must be divisible by num_heads")
        if self.num_layers < 1 or self.grid_side < 1:
            raise ContractError("num_layers and grid_side must be >= 1")
        if any(not 0 <= b < self.num_layers for b in self.prompt_layers):
            raise ContractError("prompt_layers out of range")

    @property
    def num_patches(self) -> int:
        return self.grid_side**2

    @property
    def mlp_dim(self) -> int:
        return self.mlp_ratio * self.feature_dim


@dataclass
class TokenSequence:
    """Batch of token sequences, each token tagged with its original index.

    ``embeddings`` is (B, n, D); ``orig_indices`` is (B, n) with the class
    token (index 1) first in every row and patch indices drawn from 2..N+1.
    """

    embeddings: Tensor
    orig_indices: np.ndarray
    class_first: bool = True

    def __post_init__(self):
        emb = self.embeddings
        if emb.data.ndim != 3:
            raise DimensionError(f"embeddings must be (B, n, D), got {emb.shape}")
        idx = np.asarray(self.orig_indices, dtype=np.int64)
        if idx.ndim == 1:
            idx = np.tile(idx, (emb.shape[0], 1))
        if idx.shape != emb.shape[:2]:
            raise DimensionError("orig_indices shape does not match embeddings")
        if not self.class_first or not (idx[:, 0] == 1).all():
            raise ContractError("class token (orig index 1) must come first")
        patches = idx[:, 1:]
        if patches.size and (patches < 2).any():
            raise ContractError("patch orig indices must be >= 2")
        for row in patches:
            if len(np.unique(row)) != row.size:
                raise ContractError("patch orig indices must be unique per sample")
        self.orig_indices = idx

    @property
    def batch_size(self) -> int:
        return self.embeddings.shape[0]

    @property
    def length(self) -> int:
        return self.embeddings.shape[1]


@dataclass
class AttentionTrace:
    """Final-block signals from the query pass, aligned with patch order.

    ``cls_to_patch`` sums the class-token attention rows across heads (raw
    sums, no renormalisation); ``value_norms`` are L2 norms of the
    head-concatenated value rows.  Both are (B, N) for a full sequence and
    keyed by ``patch_orig_indices``.
    """

    cls_to_patch: np.ndarray
    value_norms: np.ndarray
    patch_orig_indices: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.cls_to_patch.shape != self.value_norms.shape:
            raise DimensionError("trace arrays must share a shape")
        if (self.cls_to_patch < 0).any() or (self.value_norms < 0).any():
            raise ContractError("trace entries must be nonnegative")


def _init_params(config: BackboneConfig, rng: np.random.Generator) -> dict:
    d, m, pd = config.feature_dim, config.mlp_dim, config.input_patch_dim
    n_tok = config.num_patches + 1

    def w(shape, std):
        return Tensor(rng.normal(0.0, std, size=shape), is_param=True)

    params = {
        "embed.w": w((pd, d), pd**-0.5),
        "embed.b": Tensor(np.zeros(d), is_param=True),
        "cls": w((d,), 0.02),
        "pos": w((n_tok, d), 0.02),
    }
    for i in range(config.num_layers):
        params[f"blocks.{i}.ln1.g"] = Tensor(np.ones(d), is_param=True)
        params[f"blocks.{i}.ln1.b"] = Tensor(np.zeros(d), is_param=True)
        params[f"blocks.{i}.attn.w_qkv"] = w((d, 3 * d), d**-0.5)
        params[f"blocks.{i}.attn.b_qkv"] = Tensor(np.zeros(3 * d), is_param=True)
        params[f"blocks.{i}.attn.w_out"] = w((d, d), d**-0.5)
        params[f"blocks.{i}.attn.b_out"] = Tensor(np.zeros(d), is_param=True)
        params[f"blocks.{i}.ln2.g"] = Tensor(np.ones(d), is_param=True)
        params[f"blocks.{i}.ln2.b"] = Tensor(np.zeros(d), is_param=True)
        params[f"blocks.{i}.mlp.w1"] = w((d, m), d**-0.5)
        params[f"blocks.{i}.mlp.b1"] = Tensor(np.zeros(m), is_param=True)
        params[f"blocks.{i}.mlp.w2"] = w((m, d), m**-0.5)
        params[f"blocks.{i}.mlp.b2"] = Tensor(np.zeros(d), is_param=True)
    params["final_ln.g"] = Tensor(np.ones(d), is_param=True)
    params["final_ln.b"] = Tensor(np.zeros(d), is_param=True)
    return params


class VisionTransformer:
    """Backbone plus a linear classifier head.

    The backbone starts trainable (for pretraining / the naive fine-tuning
    baseline) and is frozen with :meth:`freeze_backbone` for prompt-based
    training.  The head is always a plain (D, C) linear map over the final
    class-token embedding.
    """

    TRAINABLE_GROUPS = frozenset({"prompt", "classifier"})

    def __init__(self, config: BackboneConfig, num_classes: int, rng: np.random.Generator):
        self.config = config
        self.params = _init_params(config, rng)
        self.set_backbone_trainable(True)
        self.num_classes = num_classes
        d = config.feature_dim
        self.head_w = Tensor(rng.normal(0.0, d**-0.5, size=(d, num_classes)),
                             requires_grad=True, is_param=True)
        self.head_b = Tensor(np.zeros(num_classes), requires_grad=True, is_param=True)

    # -- parameter bookkeeping ------------------------------------------------

    def backbone_parameters(self) -> dict:
        return dict(self.params)

    def head_parameters(self) -> dict:
        return {"head.w": self.head_w, "head.b": self.head_b}

    def set_backbone_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = bool(flag)

    def freeze_backbone(self) -> None:
        self.set_backbone_trainable(False)

    def reset_head(self, num_classes: int, rng: np.random.Generator) -> None:
        d = self.config.feature_dim
        self.num_classes = num_classes
        self.head_w = Tensor(rng.normal(0.0, d**-0.5, size=(d, num_classes)),
                             requires_grad=True, is_param=True)
        self.head_b = Tensor(np.zeros(num_classes), requires_grad=True, is_param=True)

    def load_backbone(self, blobs: dict) -> None:
        for name, arr in blobs.items():
            if name not in self.params:
                raise ContractError(f"unknown backbone parameter {name!r}")
            if self.params[name].shape != arr.shape:
                raise DimensionError(f"shape mismatch for {name!r}")
            self.params[name].data = np.array(arr, dtype=np.float64)

    # -- forward passes -------------------------------------------------------

    def embed(self, raw_patches: np.ndarray) -> TokenSequence:
        """Project a (B, N, patch_dim) grid, prepend the class token, add
        positional embeddings.  Gradients flow only while the backbone is
        trainable."""
        raw = np.asarray(raw_patches, dtype=np.float64)
        if raw.ndim == 2:
            raw = raw[None]
        c = self.config
        if raw.ndim != 3 or raw.shape[1] != c.num_patches or raw.shape[2] != c.input_patch_dim:
            raise DimensionError(
                f"expected (B, {c.num_patches}, {c.input_patch_dim}) patch grid, got {raw.shape}"
            )
        p = self.params
        tokens = T.add_rowvec(T.matmul(Tensor(raw), p["embed.w"]), p["embed.b"])
        cls = T.tile_token(p["cls"], raw.shape[0])
        seq = T.concat_tokens([cls, tokens])
        seq = T.add_posmat(seq, p["pos"])
        orig = np.arange(1, c.num_patches + 2, dtype=np.int64)
        return TokenSequence(seq, np.tile(orig, (raw.shape[0], 1)))

    def _block(self, x: Tensor, i: int, prefix_kv=None, want_aux=False):
        p = self.params
        h = T.layer_norm(x, p[f"blocks.{i}.ln1.g"], p[f"blocks.{i}.ln1.b"])
        pk, pv = prefix_kv if prefix_kv is not None else (None, None)
        attn = T.multi_head_attention(
            h,
            p[f"blocks.{i}.attn.w_qkv"],
            p[f"blocks.{i}.attn.b_qkv"],
            p[f"blocks.{i}.attn.w_out"],
            p[f"blocks.{i}.attn.b_out"],
            self.config.num_heads,
            prefix_k=pk,
            prefix_v=pv,
            return_aux=want_aux,
        )
        aux = None
        if want_aux:
            attn, aux = attn
        x = T.add(x, attn)
        h2 = T.layer_norm(x, p[f"blocks.{i}.ln2.g"], p[f"blocks.{i}.ln2.b"])
        m = T.add_rowvec(T.matmul(h2, p[f"blocks.{i}.mlp.w1"]), p[f"blocks.{i}.mlp.b1"])
        m = T.gelu(m)
        m = T.add_rowvec(T.matmul(m, p[f"blocks.{i}.mlp.w2"]), p[f"blocks.{i}.mlp.b2"])
        x = T.add(x, m)
        return (x, aux) if want_aux else x

    def _encode(self, seq: TokenSequence, prefix=None, want_aux=False):
        layers = {} if prefix is None else prefix
        x = seq.embeddings
        aux = None
        last = self.config.num_layers - 1
        for i in range(self.config.num_layers):
            kv = layers.get(i)
            if want_aux and i == last:
                x, aux = self._block(x, i, kv, want_aux=True)
            else:
                x = self._block(x, i, kv)
        cls = T.take_row(x, 0)
        feat = T.layer_norm(cls, self.params["final_ln.g"], self.params["final_ln.b"])
        return (feat, aux) if want_aux else feat

    def query_forward(self, seq: TokenSequence):
        """Frozen plain pass: class feature plus the final-block trace.

        Runs with gradients masked, so it never grows a tape.  The trace
        covers the patch tokens of ``seq`` in sequence order: attention from
        the class token summed across heads, and value norms over the full
        concatenated feature dimension.
        """
        with no_grad():
            feat, aux = self._encode(seq, prefix=None, want_aux=True)
        probs = aux["probs"]  # (B, H, n, n)
        cls_to_patch = probs[:, :, 0, 1:].sum(axis=1)
        value_norms = np.linalg.norm(aux["values_concat"][:, 1:, :], axis=-1)
        return feat.data, AttentionTrace(
            cls_to_patch=np.ascontiguousarray(cls_to_patch),
            value_norms=np.ascontiguousarray(value_norms),
            patch_orig_indices=seq.orig_indices[:, 1:].copy(),
        )

    def forward_features(self, seq: TokenSequence, prefix=None) -> Tensor:
        """Class-token embedding after the final layer norm."""
        layers = getattr(prefix, "layers", prefix)
        return self._encode(seq, prefix=layers)

    def prompt_forward(self, seq: TokenSequence, prefix=None, trainable=frozenset()) -> Tensor:
        """Prompted pass producing (B, C) logits.

        ``trainable`` selects which parameter groups may receive gradients:
        any subset of {"prompt", "classifier"}.  Groups outside the set are
        detached for this call, whatever their tensors say.
        """
        trainable = frozenset(trainable)
        unknown = trainable - self.TRAINABLE_GROUPS
        if unknown:
            raise ContractError(f"unknown trainable groups: {sorted(unknown)}")
        layers = getattr(prefix, "layers", prefix)
        if layers is not None and "prompt" not in trainable:
            layers = {i: (T.detach(k), T.detach(v)) for i, (k, v) in layers.items()}
        feat = self._encode(seq, prefix=layers)
        w, b = self.head_w, self.head_b
        if "classifier" not in trainable:
            w, b = T.detach(w), T.detach(b)
        return T.add_rowvec(T.matmul(feat, w), b)


# ---------------------------------------------------------------------------
# checkpoint io: JSON manifest + one binary blob of little-endian float64
# ---------------------------------------------------------------------------


def save_checkpoint(stem: str, params: dict) -> None:
    """Persist named parameters as ``stem.json`` (manifest) + ``stem.bin``."""
    entries = []
    offset = 0
    chunks = []
    for name in sorted(params):
        arr = params[name].data if isinstance(params[name], Tensor) else np.asarray(params[name])
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        chunks.append(arr.tobytes())
    manifest = {"format": "cpsp-checkpoint-1", "dtype": "<f8", "params": entries}
    os.makedirs(os.path.dirname(os.path.abspath(stem)), exist_ok=True)
    with open(stem + ".json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    with open(stem + ".bin", "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(stem: str) -> dict:
    """Load a checkpoint back into a name -> float64 array mapping."""
    with open(stem + ".json") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "cpsp-checkpoint-1":
        raise ContractError("unrecognised checkpoint manifest")
    flat = np.fromfile(stem + ".bin", dtype="<f8")
    out = {}
    for entry in manifest["params"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        chunk = flat[entry["offset"] : entry["offset"] + size]
        out[entry["name"]] = chunk.reshape(entry["shape"]).astype(np.float64)
    return out
