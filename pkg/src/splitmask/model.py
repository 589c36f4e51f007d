"""Vision transformer encoder, shallow decoder and the SplitMask / BEiT forward passes.

All forwards are batched.  Patches arrive as a ``(B, n, d)`` array and mask
plans as per-image index arrays; every image in a batch must mask the same
number of patches (masking produces exact counts, so this always holds for a
shared ratio).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ConfigMismatchError, DimensionError, UsageError
from .numerics import Tensor

__all__ = [
    "ModelConfig",
    "BranchOutput",
    "Model",
    "param_count",
    "save_checkpoint",
    "load_checkpoint",
    "Checkpoint",
]


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    encoder_depth: int = 4
    decoder_depth: int = 2
    num_heads: int = 4
    mlp_ratio: int = 4
    vocab_size: int = 512
    mode: str = "splitmask"  # or "beit"
    num_classes: int = 0  # > 0 attaches a classifier head
    normalize_descriptor: bool = True
    ln_eps: float = 1e-6
    init_std: float = 0.02

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.mode not in ("splitmask", "beit"):
            raise ConfigError(f"unknown model mode {self.mode!r}")
        if self.mode == "splitmask" and self.decoder_depth < 1:
            raise ConfigError("splitmask mode needs decoder_depth >= 1")
        if self.encoder_depth < 0 or self.vocab_size < 2:
            raise ConfigError("encoder_depth must be >= 0 and vocab_size >= 2")

    @property
    def grid(self) -> tuple[int, int]:
        g = self.image_size // self.patch_size
        return g, g

    @property
    def n(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size * self.patch_size

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _block_params(D: int, mlp_ratio: int) -> int:
    h = mlp_ratio * D
    return 4 * D + (3 * D * D + 3 * D) + (D * D + D) + (D * h + h) + (h * D + D)


def param_count(cfg: ModelConfig) -> int:
    """Closed-form number of scalars in :meth:`Model.init` for ``cfg``."""
    D = cfg.embed_dim
    total = cfg.patch_dim * D + D + cfg.n * D + D  # patch embed, pos embed, mask token
    total += cfg.encoder_depth * _block_params(D, cfg.mlp_ratio) + 2 * D
    if cfg.mode == "splitmask":
        total += cfg.decoder_depth * _block_params(D, cfg.mlp_ratio) + 2 * D
    total += D * cfg.vocab_size + cfg.vocab_size
    if cfg.num_classes:
        total += D * cfg.num_classes + cfg.num_classes
    return total


def _trunc_normal(rng, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


# names of parameters that never receive weight decay
NO_DECAY_SUFFIXES = (".bias", ".gain", "pos_embed", "mask_token")


def decays(name: str) -> bool:
    return not name.endswith(NO_DECAY_SUFFIXES)


@dataclass
class BranchOutput:
    decoded: Tensor  # (B, n, D)
    logits: Tensor  # (B, k, V)
    descriptor: Tensor  # (B, D)
    positions: np.ndarray  # (B, k) grid indices the logits belong to


class Model:
    """Parameters plus the forward passes; ``params`` maps names to leaf tensors."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.trace: list | None = None  # set to [] to record (event, payload) pairs

    # ------------------------------------------------------------ creation

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "Model":
        rng = np.random.default_rng(seed)
        D, std = config.embed_dim, config.init_std
        h = config.mlp_ratio * D
        specs: list[tuple[str, tuple, str]] = [
            ("patch_embed.weight", (config.patch_dim, D), "normal"),
            ("patch_embed.bias", (D,), "zeros"),
            ("pos_embed", (config.n, D), "normal"),
            ("mask_token", (D,), "normal"),
        ]

        def block(prefix):
            return [
                (f"{prefix}.norm1.gain", (D,), "ones"),
                (f"{prefix}.norm1.bias", (D,), "zeros"),
                (f"{prefix}.attn.qkv.weight", (D, 3 * D), "normal"),
                (f"{prefix}.attn.qkv.bias", (3 * D,), "zeros"),
                (f"{prefix}.attn.proj.weight", (D, D), "normal"),
                (f"{prefix}.attn.proj.bias", (D,), "zeros"),
                (f"{prefix}.norm2.gain", (D,), "ones"),
                (f"{prefix}.norm2.bias", (D,), "zeros"),
                (f"{prefix}.mlp.fc1.weight", (D, h), "normal"),
                (f"{prefix}.mlp.fc1.bias", (h,), "zeros"),
                (f"{prefix}.mlp.fc2.weight", (h, D), "normal"),
                (f"{prefix}.mlp.fc2.bias", (D,), "zeros"),
            ]

        for i in range(config.encoder_depth):
            specs += block(f"encoder.{i}")
        specs += [("encoder.norm.gain", (D,), "ones"), ("encoder.norm.bias", (D,), "zeros")]
        if config.mode == "splitmask":
            for i in range(config.decoder_depth):
                specs += block(f"decoder.{i}")
            specs += [("decoder.norm.gain", (D,), "ones"), ("decoder.norm.bias", (D,), "zeros")]
        specs += [("mim_head.weight", (D, config.vocab_size), "normal"), ("mim_head.bias", (config.vocab_size,), "zeros")]
        if config.num_classes:
            specs += [("classifier.weight", (D, config.num_classes), "normal"), ("classifier.bias", (config.num_classes,), "zeros")]

        params = {}
        for name, shape, kind in specs:
            if kind == "normal":
                arr = _trunc_normal(rng, shape, std)
            elif kind == "ones":
                arr = np.ones(shape)
            else:
                arr = np.zeros(shape)
            params[name] = Tensor(arr, requires_grad=True, name=name)
        return cls(config, params)

    def with_classifier(self, num_classes: int, seed: int = 0) -> "Model":
        """Copy of this model with a freshly initialised classifier head."""
        cfg = ModelConfig.from_dict({**self.config.to_dict(), "num_classes": num_classes})
        rng = np.random.default_rng(seed)
        params = {k: Tensor(v.data, requires_grad=True, name=k) for k, v in self.params.items()
                  if not k.startswith("classifier.")}
        D = cfg.embed_dim
        params["classifier.weight"] = Tensor(_trunc_normal(rng, (D, num_classes), cfg.init_std), requires_grad=True, name="classifier.weight")
        params["classifier.bias"] = Tensor(np.zeros(num_classes), requires_grad=True, name="classifier.bias")
        return Model(cfg, params)

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _log(self, event, payload):
        if self.trace is not None:
            self.trace.append((event, payload))

    # ------------------------------------------------------------ building blocks

    def _linear(self, x, prefix):
        return nx.add_bias(nx.matmul(x, self.params[prefix + ".weight"]), self.params[prefix + ".bias"])

    def _norm(self, x, prefix):
        return nx.layernorm(x, self.params[prefix + ".gain"], self.params[prefix + ".bias"], self.config.ln_eps)

    def _attention(self, x, prefix):
        B, m, D = x.shape
        H = self.config.num_heads
        hd = D // H
        qkv = self._linear(x, prefix + ".qkv")
        qkv = nx.transpose(nx.reshape(qkv, (B, m, 3, H, hd)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), hd ** -0.5)
        att = nx.softmax(scores, axis=-1)
        self._log("attention", att.data)
        out = nx.matmul(att, v)
        out = nx.reshape(nx.transpose(out, (0, 2, 1, 3)), (B, m, D))
        return self._linear(out, prefix + ".proj")

    def _block(self, x, prefix):
        x = nx.add(x, self._attention(self._norm(x, prefix + ".norm1"), prefix + ".attn"))
        h = nx.gelu(self._linear(self._norm(x, prefix + ".norm2"), prefix + ".mlp.fc1"))
        return nx.add(x, self._linear(h, prefix + ".mlp.fc2"))

    # ------------------------------------------------------------ public pieces

    def embed(self, patches: np.ndarray, indices=None) -> Tensor:
        """Project patches and add positional embeddings; optionally select ``indices`` per image.

        Positions are grid indices, so a subset keeps its absolute positions.
        """
        patches = np.asarray(patches, dtype=nx.default_dtype())
        squeeze = patches.ndim == 2
        if squeeze:
            patches = patches[None]
        if patches.shape[1:] != (self.config.n, self.config.patch_dim):
            raise DimensionError(f"expected patches (B, {self.config.n}, {self.config.patch_dim}), got {patches.shape}")
        x = nx.add_bias(self._linear(patches, "patch_embed"), self.params["pos_embed"])
        self._log("embed", x.data)
        if indices is not None:
            idx = np.asarray(indices, dtype=np.int64)
            if idx.ndim == 1:
                idx = np.broadcast_to(idx, (x.shape[0], idx.size))
            if idx.size and (idx.min() < 0 or idx.max() >= self.config.n):
                raise IndexError(f"patch index out of range [0, {self.config.n})")
            x = nx.gather_rows(x, idx)
        return x[0] if squeeze else x

    def encode(self, x: Tensor, upto: int | None = None) -> Tensor:
        """Run encoder blocks ``0 .. upto-1`` (all by default); no final norm."""
        self._log("encoder_input", x.shape)
        depth = self.config.encoder_depth if upto is None else upto
        for i in range(depth):
            x = self._block(x, f"encoder.{i}")
        return x

    def insert_mask_tokens(self, encoded: Tensor, A, B) -> Tensor:
        """Scatter encoded rows back to grid order and fill positions ``B`` with mask token + position."""
        A = np.atleast_2d(np.asarray(A, dtype=np.int64))
        B = np.atleast_2d(np.asarray(B, dtype=np.int64)) if np.size(B) else np.zeros((A.shape[0], 0), np.int64)
        squeeze = encoded.ndim == 2
        if squeeze:
            encoded = nx.reshape(encoded, (1,) + encoded.shape)
        n = self.config.n
        if A.shape[1] == 0:
            raise UsageError("encoder must see at least one patch (A is empty)")
        if A.shape[0] != encoded.shape[0] or A.shape[1] != encoded.shape[1] or B.shape[0] != A.shape[0]:
            raise UsageError(f"index sets {A.shape}/{B.shape} do not match encoded {encoded.shape}")
        order = np.concatenate([A, B], axis=1)
        if order.shape[1] != n or not (np.sort(order, axis=1) == np.arange(n)).all():
            raise UsageError("A and B must partition the patch grid")
        parts = [encoded]
        if B.shape[1]:
            pos_rows = nx.take(self.params["pos_embed"], B)
            parts.append(nx.add_bias(pos_rows, self.params["mask_token"]))
        seq = nx.concat(parts, axis=1) if len(parts) > 1 else encoded
        inverse = np.argsort(order, axis=1)
        full = nx.gather_rows(seq, inverse)
        return full[0] if squeeze else full

    def decode_branch(self, full_seq: Tensor, missing) -> BranchOutput:
        """Decoder over all ``n`` positions; MIM logits at ``missing``; pooled unit-norm descriptor."""
        if full_seq.shape[-2] != self.config.n:
            raise DimensionError(f"decoder expects {self.config.n} positions, got {full_seq.shape}")
        x = full_seq
        for i in range(self.config.decoder_depth):
            x = self._block(x, f"decoder.{i}")
        x = self._norm(x, "decoder.norm")
        missing = np.atleast_2d(np.asarray(missing, dtype=np.int64))
        logits = self._linear(nx.gather_rows(x, missing), "mim_head")
        desc = nx.mean_pool(x)
        if self.config.normalize_descriptor:
            desc = nx.l2_normalize(desc)
        return BranchOutput(x, logits, desc, missing)

    # ------------------------------------------------------------ full forwards

    @staticmethod
    def _index_sets(plans) -> tuple[np.ndarray, np.ndarray]:
        A = [p.observed_idx for p in plans]
        B = [p.masked_idx for p in plans]
        if len({a.size for a in A}) != 1:
            raise UsageError("all plans in a batch must mask the same number of patches")
        return np.stack(A), np.stack(B)

    def forward_splitmask(self, patches: np.ndarray, plans) -> tuple[BranchOutput, BranchOutput]:
        """Split, encode each subset, inpaint the other subset's tokens.

        Branch A encodes the observed set and predicts at the masked set;
        branch B does the reverse.  Both subsets share one encoder pass when
        they have equal size.
        """
        if self.config.mode != "splitmask":
            raise UsageError("forward_splitmask needs a splitmask-mode model")
        A, B = self._index_sets(plans)
        if A.shape[1] == 0 or B.shape[1] == 0:
            raise UsageError("splitmask needs both subsets nonempty")
        full = self.embed(patches)
        nb = full.shape[0]
        if A.shape[1] == B.shape[1]:
            both = nx.gather_rows(nx.concat([full, full], axis=0), np.concatenate([A, B]))
            enc = self._norm(self.encode(both), "encoder.norm")
            seq = self.insert_mask_tokens(enc, np.concatenate([A, B]), np.concatenate([B, A]))
            dec = self.decode_branch(seq, np.concatenate([B, A]))
            out_a = BranchOutput(dec.decoded[:nb], dec.logits[:nb], dec.descriptor[:nb], B)
            out_b = BranchOutput(dec.decoded[nb:], dec.logits[nb:], dec.descriptor[nb:], A)
            return out_a, out_b
        outs = []
        for seen, hidden in ((A, B), (B, A)):
            enc = self._norm(self.encode(nx.gather_rows(full, seen)), "encoder.norm")
            outs.append(self.decode_branch(self.insert_mask_tokens(enc, seen, hidden), hidden))
        return outs[0], outs[1]

    def forward_beit(self, patches: np.ndarray, plans) -> tuple[Tensor, np.ndarray]:
        """Encoder over all ``n`` tokens with masked positions replaced; logits at masked positions."""
        A, B = self._index_sets(plans)
        if B.shape[1] == 0:
            raise UsageError("beit forward needs at least one masked patch")
        full = self.embed(patches)
        visible = nx.gather_rows(full, A)
        x = self.insert_mask_tokens(visible, A, B) if A.shape[1] else self._all_masked(full.shape[0])
        x = self._norm(self.encode(x), "encoder.norm")
        logits = self._linear(nx.gather_rows(x, B), "mim_head")
        return logits, B

    def _all_masked(self, batch: int) -> Tensor:
        rows = nx.take(self.params["pos_embed"], np.broadcast_to(np.arange(self.config.n), (batch, self.config.n)))
        return nx.add_bias(rows, self.params["mask_token"])

    def layer_features(self, patches: np.ndarray, layers=None) -> dict[int, Tensor]:
        """Mean-pooled activations after each requested encoder block (0 = embeddings)."""
        layers = range(self.config.encoder_depth + 1) if layers is None else layers
        layers = sorted(set(layers))
        for li in layers:
            if not 0 <= li <= self.config.encoder_depth:
                raise IndexError(f"layer {li} outside [0, {self.config.encoder_depth}]")
        x = self.embed(patches)
        out = {}
        if 0 in layers:
            out[0] = nx.mean_pool(x)
        for i in range(max(layers)):
            x = self._block(x, f"encoder.{i}")
            if i + 1 in layers:
                out[i + 1] = nx.mean_pool(x)
        return out

    def features_at_layer(self, patches: np.ndarray, layer_index: int) -> Tensor:
        return self.layer_features(patches, [layer_index])[layer_index]

    def classify(self, patches: np.ndarray) -> Tensor:
        if not self.config.num_classes:
            raise UsageError("model has no classifier head")
        x = self._norm(self.encode(self.embed(patches)), "encoder.norm")
        return self._linear(nx.mean_pool(x), "classifier")


# ----------------------------------------------------------------- checkpoints

_CK_MAGIC = b"SMCK"
_CK_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    step: int = 0
    rng_state: dict | None = None
    extra: dict | None = None

    def model(self) -> Model:
        return Model(self.config, {k: Tensor(v, requires_grad=True, name=k) for k, v in self.params.items()})


def save_checkpoint(path, model: Model, step: int = 0, rng_state: dict | None = None, extra: dict | None = None) -> Path:
    """Write magic, version, JSON metadata, then (name, shape, float32 payload) records."""
    meta = json.dumps(
        {"model": model.config.to_dict(), "step": step, "rng_state": rng_state, "extra": extra or {}},
        sort_keys=True,
    ).encode("utf-8")
    chunks = [_CK_MAGIC, struct.pack("<HI", _CK_VERSION, len(meta)), meta, struct.pack("<I", len(model.params))]
    for name, t in model.params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<HB", len(raw), t.ndim) + raw)
        chunks.append(struct.pack(f"<{t.ndim}I", *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    path = Path(path)
    path.write_bytes(b"".join(chunks))
    return path


def load_checkpoint(path, expect: ModelConfig | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != _CK_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    version, meta_len = struct.unpack_from("<HI", raw, 4)
    if version != _CK_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 10
    meta = json.loads(raw[off : off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    params = {}
    for _ in range(count):
        name_len, ndim = struct.unpack_from("<HB", raw, off)
        off += 3
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32)
        off += 4 * size
    config = ModelConfig.from_dict(meta["model"])
    if expect is not None:
        mine, theirs = config.to_dict(), expect.to_dict()
        diff = {k: (mine[k], theirs[k]) for k in mine if k != "num_classes" and mine[k] != theirs[k]}
        if diff:
            raise ConfigMismatchError(f"checkpoint config differs from requested: {diff}")
    return Checkpoint(config, params, meta["step"], meta.get("rng_state"), meta.get("extra"))
