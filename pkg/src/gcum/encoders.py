"""Model state and the frozen encoder stack.

Three encoders act as stand-ins for large pretrained backbones, so their
weights are drawn once from the seed (Gaussian, std 0.02) and never
trained:

* member encoder — two-layer MLP mapping an appearance vector to a
  unit-norm member feature of width ``dim``;
* group encoder — a learnable group class token is prepended to the member
  features and run through two single-head self-attention blocks with
  residual connections.  The pipeline splits the encoder around the
  membership-simulation step: block 1 runs on [class token; members],
  block 2 on the recombined sequence, then the class-token row is
  projected and normalized into the group feature;
* text encoder — token embeddings plus learned positions, one
  self-attention block, mean-pool, projection, normalization.

Trainable state lives alongside: per-identity prompt tokens, padding
tokens, the member-count matrix, the refinement head, the classifier, and
the learnable inverse softmax temperature.  Which of those actually
receive gradients is decided per training stage by flipping
``requires_grad``.

Checkpoints are a little-endian binary table of named float64 tensors with
a JSON sidecar carrying the config echo.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import __version__
from . import diffcore as dc
from .diffcore import ShapeError, Tensor

CHECKPOINT_MAGIC = b"GCUM"
CHECKPOINT_VERSION = 1

_INIT_STREAM = 10

# Fixed template lengths: "a photo of a <tokens> person" and
# "a group of <slot tokens> persons".
MEMBER_PREFIX_LEN = 4
MEMBER_SUFFIX_LEN = 1
GROUP_PREFIX_LEN = 3
GROUP_SUFFIX_LEN = 1


class CheckpointError(ValueError):
    """A checkpoint file is malformed, truncated, or of an unknown version."""


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    d_a: int = 32
    max_members: int = 6          # longest member row block the model accepts
    group_slots: int = 6          # identity slots in the group text prompt
    tokens_per_identity: int = 4
    n_person_ids: int = 1
    n_group_classes: int = 1
    temperature_init: float = 1.0 / 0.07
    init_std: float = 0.02

    @property
    def hidden(self) -> int:
        return 2 * self.dim

    @property
    def member_prompt_len(self) -> int:
        return MEMBER_PREFIX_LEN + self.tokens_per_identity + MEMBER_SUFFIX_LEN

    @property
    def group_prompt_len(self) -> int:
        return GROUP_PREFIX_LEN + self.group_slots * self.tokens_per_identity + GROUP_SUFFIX_LEN

    @property
    def max_prompt_len(self) -> int:
        return max(self.member_prompt_len, self.group_prompt_len)

    def validate(self) -> None:
        if self.dim < 2 or self.d_a < 1:
            raise ValueError("dim must be >= 2 and d_a >= 1")
        if self.max_members < 1 or self.group_slots < 1:
            raise ValueError("max_members and group_slots must be positive")
        if self.group_slots < self.max_members:
            raise ValueError("group_slots must cover max_members identities")
        if self.tokens_per_identity < 1:
            raise ValueError("tokens_per_identity must be positive")
        if self.n_person_ids < 1 or self.n_group_classes < 1:
            raise ValueError("need at least one person identity and one group class")
        if self.temperature_init <= 0:
            raise ValueError("temperature_init must be positive")
        if self.init_std <= 0:
            raise ValueError("init_std must be positive")

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "d_a": self.d_a,
            "max_members": self.max_members,
            "group_slots": self.group_slots,
            "tokens_per_identity": self.tokens_per_identity,
            "n_person_ids": self.n_person_ids,
            "n_group_classes": self.n_group_classes,
            "temperature_init": self.temperature_init,
            "init_std": self.init_std,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        cfg = cls(
            dim=int(doc["dim"]),
            d_a=int(doc["d_a"]),
            max_members=int(doc["max_members"]),
            group_slots=int(doc["group_slots"]),
            tokens_per_identity=int(doc["tokens_per_identity"]),
            n_person_ids=int(doc["n_person_ids"]),
            n_group_classes=int(doc["n_group_classes"]),
            temperature_init=float(doc["temperature_init"]),
            init_std=float(doc["init_std"]),
        )
        cfg.validate()
        return cfg


# Parameter groups by role.  Encoder weights, template embeddings and text
# positions stay frozen through both stages; the rest is stage-gated.
STAGE1_TRAINABLE = ("prompt.x", "prompt.pad", "quantity.em", "temp.inv")
STAGE2_TRAINABLE = ("grce.wq", "grce.wk", "grce.wv", "grce.classifier")


@dataclass(eq=False)
class ModelState:
    """Named parameter tensors plus the structural config."""

    config: ModelConfig
    params: dict[str, Tensor]

    def with_param(self, name: str, tensor: Tensor) -> "ModelState":
        if name not in self.params:
            raise KeyError(f"unknown parameter {name!r}")
        new = dict(self.params)
        new[name] = tensor
        return ModelState(self.config, new)

    def with_params(self, updates: Mapping[str, Tensor]) -> "ModelState":
        new = dict(self.params)
        for name, t in updates.items():
            if name not in new:
                raise KeyError(f"unknown parameter {name!r}")
            new[name] = t
        return ModelState(self.config, new)

    def set_trainable(self, names: Iterable[str]) -> None:
        wanted = set(names)
        unknown = wanted - set(self.params)
        if unknown:
            raise KeyError(f"unknown parameters {sorted(unknown)}")
        for name, p in self.params.items():
            p.requires_grad = name in wanted

    def trainable_names(self) -> list[str]:
        return sorted(n for n, p in self.params.items() if p.requires_grad)


def init_model_state(config: ModelConfig, seed: int) -> ModelState:
    """Draw all parameters; bit-identical for identical ``(config, seed)``."""
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_INIT_STREAM,)))
    std = config.init_std
    dim, hidden = config.dim, config.hidden

    def normal(*shape):
        return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, _copy=False)

    params: dict[str, Tensor] = {}
    # member encoder
    params["member.w1"] = normal(config.d_a, hidden)
    params["member.b1"] = normal(hidden)
    params["member.w2"] = normal(hidden, dim)
    params["member.b2"] = normal(dim)
    # group encoder: class token, two attention blocks, final projection
    params["group.cls"] = normal(dim)
    for blk in ("group.blk1", "group.blk2"):
        for w in ("wq", "wk", "wv", "wo"):
            params[f"{blk}.{w}"] = normal(dim, dim)
    params["group.proj"] = normal(dim, dim)
    # text encoder: one block, positions, projection
    for w in ("wq", "wk", "wv", "wo"):
        params[f"text.attn.{w}"] = normal(dim, dim)
    params["text.pos"] = normal(config.max_prompt_len, dim)
    params["text.proj"] = normal(dim, dim)
    # prompt vocabulary: template words (frozen), per-identity tokens, padding
    params["prompt.member_prefix"] = normal(MEMBER_PREFIX_LEN, dim)
    params["prompt.member_suffix"] = normal(MEMBER_SUFFIX_LEN, dim)
    params["prompt.group_prefix"] = normal(GROUP_PREFIX_LEN, dim)
    params["prompt.group_suffix"] = normal(GROUP_SUFFIX_LEN, dim)
    params["prompt.x"] = normal(config.n_person_ids * config.tokens_per_identity, dim)
    params["prompt.pad"] = normal(config.tokens_per_identity, dim)
    # member-count refinement matrix starts neutral: zero rows add nothing
    # to the class token until stage-1 training moves them.
    params["quantity.em"] = Tensor(
        np.zeros((config.max_members, dim)), requires_grad=True, _copy=False
    )
    # refinement head and group classifier
    params["grce.wq"] = normal(dim, dim)
    params["grce.wk"] = normal(dim, dim)
    params["grce.wv"] = normal(dim, dim)
    params["grce.classifier"] = normal(config.n_group_classes, dim)
    # learnable inverse temperature, stored directly as the logit multiplier
    params["temp.inv"] = Tensor(
        np.asarray(config.temperature_init), requires_grad=True, _copy=False
    )
    return ModelState(config, params)


# --------------------------------------------------------------------------
# Forward passes


def attention_block(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor) -> Tensor:
    """Single-head self-attention with a residual connection.

    ``x`` is a (rows, dim) sequence; scores are scaled by 1/sqrt(dim).
    A zero output projection makes the block the identity map.
    """
    if x.ndim != 2:
        raise ShapeError(f"attention_block needs a (rows, dim) tensor, got {x.shape}")
    dim = x.shape[1]
    q = dc.matmul(x, wq)
    k = dc.matmul(x, wk)
    v = dc.matmul(x, wv)
    scores = dc.scale(dc.matmul(q, dc.transpose(k)), 1.0 / math.sqrt(dim))
    ctx = dc.matmul(dc.softmax_rows(scores), v)
    return dc.add(x, dc.matmul(ctx, wo))


def encode_members(appearances: Tensor, state: ModelState) -> Tensor:
    """Map an (n, d_a) appearance matrix to (n, dim) unit-norm features."""
    cfg = state.config
    if appearances.ndim != 2 or appearances.shape[1] != cfg.d_a:
        raise ShapeError(f"expected (n, {cfg.d_a}) appearances, got {appearances.shape}")
    p = state.params
    h = dc.tanh(dc.add(dc.matmul(appearances, p["member.w1"]), p["member.b1"]))
    out = dc.add(dc.matmul(h, p["member.w2"]), p["member.b2"])
    return dc.l2_normalize(out)


def encode_member(appearance: Tensor, state: ModelState) -> Tensor:
    """Single-vector convenience wrapper around ``encode_members``."""
    if appearance.ndim != 1:
        raise ShapeError(f"expected a (d_a,) appearance vector, got {appearance.shape}")
    return dc.take_row(encode_members(dc.stack([appearance]), state), 0)


def encode_group_prefix(member_features: Tensor, state: ModelState) -> tuple[Tensor, Tensor]:
    """Run block 1 over [class token; member features].

    Returns the contextualized class token (dim,) and member rows (n, dim).
    """
    cfg = state.config
    if member_features.ndim != 2 or member_features.shape[1] != cfg.dim:
        raise ShapeError(f"expected (n, {cfg.dim}) member features, got {member_features.shape}")
    n = member_features.shape[0]
    if n < 1:
        raise ShapeError("a group needs at least one member")
    if n > cfg.max_members:
        raise ShapeError(f"{n} members exceed the configured maximum {cfg.max_members}")
    p = state.params
    seq = dc.concat([dc.stack([p["group.cls"]]), member_features], axis=0)
    out = attention_block(seq, p["group.blk1.wq"], p["group.blk1.wk"], p["group.blk1.wv"], p["group.blk1.wo"])
    cls = dc.take_row(out, 0)
    members = dc.select_rows(out, [0] + [1] * n)
    return cls, members


def encode_group_suffix(fused: Tensor, state: ModelState) -> Tensor:
    """Run block 2 over the recombined sequence and read out the group feature."""
    cfg = state.config
    if fused.ndim != 2 or fused.shape[1] != cfg.dim:
        raise ShapeError(f"expected (1 + k, {cfg.dim}), got {fused.shape}")
    if fused.shape[0] < 2:
        raise ShapeError("fused sequence needs the class token plus at least one member")
    p = state.params
    out = attention_block(fused, p["group.blk2.wq"], p["group.blk2.wk"], p["group.blk2.wv"], p["group.blk2.wo"])
    pooled = dc.take_row(out, 0)
    return dc.l2_normalize(dc.matmul(pooled, p["group.proj"]))


def encode_text(tokens: Tensor, state: ModelState) -> Tensor:
    """Encode a (L, dim) token sequence into a unit-norm text feature."""
    cfg = state.config
    if tokens.ndim != 2 or tokens.shape[1] != cfg.dim:
        raise ShapeError(f"expected (L, {cfg.dim}) tokens, got {tokens.shape}")
    length = tokens.shape[0]
    if length < 1:
        raise ShapeError("empty token sequence")
    if length > cfg.max_prompt_len:
        raise ShapeError(f"prompt length {length} exceeds positional table {cfg.max_prompt_len}")
    p = state.params
    pos = dc.select_rows(p["text.pos"], [1] * length + [0] * (cfg.max_prompt_len - length)) \
        if length < cfg.max_prompt_len else p["text.pos"]
    seq = attention_block(dc.add(tokens, pos), p["text.attn.wq"], p["text.attn.wk"],
                          p["text.attn.wv"], p["text.attn.wo"])
    pooled = dc.reduce_mean(seq, axis=0)
    return dc.l2_normalize(dc.matmul(pooled, p["text.proj"]))


# --------------------------------------------------------------------------
# Checkpoint I/O


def save_checkpoint(path: str, params: Mapping[str, Tensor], meta: dict | None = None) -> None:
    """Write named tensors in a fixed little-endian binary layout.

    Layout: magic ``GCUM``, u32 version, u32 tensor count, then per tensor
    (in sorted name order): u32 name length, UTF-8 name, u32 rank, u64
    dims, float64 values.  ``meta`` (config echo etc.) goes to a JSON
    sidecar at ``path + ".meta.json"``.
    """
    names = sorted(params)
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(names))]
    for name in names:
        values = params[name].values if isinstance(params[name], Tensor) else np.asarray(params[name])
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", values.ndim))
        chunks.append(struct.pack(f"<{values.ndim}Q", *values.shape))
        chunks.append(np.ascontiguousarray(values, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))
    if meta is not None:
        doc = {"format": "gcum-checkpoint-meta", "version": 1, "tool_version": __version__}
        doc.update(meta)
        with open(path + ".meta.json", "w", encoding="utf-8") as fh:
            fh.write(json.dumps(doc, sort_keys=True, separators=(",", ":")))
            fh.write("\n")


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise CheckpointError(f"checkpoint truncated at byte {len(self.blob)} (needed {self.off + n})")
        out = self.blob[self.off : self.off + n]
        self.off += n
        return out


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic, not a checkpoint file")
    version, count = struct.unpack("<II", r.take(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", r.take(4))
        name = r.take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", r.take(4))
        if rank > 2:
            raise CheckpointError(f"tensor {name!r} has unsupported rank {rank}")
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank)) if rank else ()
        n_values = 1
        for d in dims:
            n_values *= d
        values = np.frombuffer(r.take(8 * n_values), dtype="<f8").reshape(dims).astype(np.float64)
        values.setflags(write=False)
        out[name] = values
    if r.off != len(blob):
        raise CheckpointError(f"{len(blob) - r.off} trailing bytes after the last tensor")
    return out


def load_checkpoint_meta(path: str) -> dict:
    with open(path + ".meta.json", "r", encoding="utf-8") as fh:
        return json.load(fh)


def state_from_checkpoint(path: str) -> tuple[ModelState, dict]:
    """Rebuild a ModelState from a checkpoint plus its sidecar metadata."""
    meta = load_checkpoint_meta(path)
    config = ModelConfig.from_dict(meta["model"])
    tensors = load_checkpoint(path)
    reference = init_model_state(config, seed=0)
    missing = set(reference.params) - set(tensors)
    extra = set(tensors) - set(reference.params)
    if missing or extra:
        raise CheckpointError(
            f"parameter set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}"
        )
    params = {}
    for name, ref in reference.params.items():
        arr = tensors[name]
        if arr.shape != ref.shape:
            raise CheckpointError(f"tensor {name!r} has shape {arr.shape}, expected {ref.shape}")
        params[name] = Tensor(arr, requires_grad=True, _copy=False)
    return ModelState(config, params), meta
