"""Spectrogram-patch transformer with recorded attention.

The encoder is built on the tape from :mod:`voicemap.grad` so that a forward
pass leaves behind everything gradient-weighted rollout needs: every per-head
attention matrix is marked on the tape and the class logits are registered as
the tape output.
"""

from dataclasses import dataclass, field
import math
import struct
import zlib

import numpy as np

from . import grad

CHECKPOINT_MAGIC = b"ASTR"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    layers: int = 4
    heads: int = 4
    patch: int = 16
    stride: int = 16
    mel_bins: int = 128
    max_frames: int = 1000
    num_classes: int = 2
    backbone_trainable: bool = False

    def __post_init__(self):
        if self.embed_dim <= 0 or self.layers <= 0 or self.heads <= 0:
            raise ValueError("embed_dim, layers and heads must be positive")
        if self.embed_dim % self.heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.mel_bins % self.patch != 0:
            raise ValueError(
                f"mel_bins {self.mel_bins} not divisible by patch {self.patch}")
        if not 1 <= self.stride <= self.patch:
            raise ValueError("stride must be in [1, patch]")
        if self.max_frames < self.patch:
            raise ValueError("max_frames must cover at least one patch")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")

    @property
    def grid_rows(self) -> int:
        return self.mel_bins // self.patch

    def grid_cols(self, frames: int) -> int:
        return max(1, math.ceil(frames / self.stride))

    @property
    def num_patches(self) -> int:
        """Positional-table capacity: patch count at max_frames."""
        return self.grid_rows * self.grid_cols(self.max_frames)


@dataclass
class Patches:
    """Flattened patch vectors plus the grid geometry rollout needs."""
    values: np.ndarray  # [count x patch*patch], time-major order
    rows: int
    cols: int

    @property
    def count(self) -> int:
        return self.values.shape[0]


@dataclass
class ForwardTrace:
    logits: np.ndarray              # [num_classes]
    cls_representation: np.ndarray  # [embed_dim]
    attentions: list                # per layer, [heads x (N+1) x (N+1)]
    tape: grad.Tape
    grid: tuple                     # (rows, cols) patch grid
    param_refs: dict = field(repr=False, default_factory=dict)
    logits_ref: int = -1


def patchify(spec, config: ModelConfig, fill: float = 0.0) -> Patches:
    """Cut a spectrogram into flattened patch vectors, time-major.

    The frame axis is right-padded with `fill` so the last patch window is
    complete. Order: all frequency patches of time block 0 (low bins first),
    then block 1, and so on. Each patch is flattened row-major.
    """
    values = np.asarray(spec.values, dtype=np.float64)
    if values.shape[0] != config.mel_bins:
        raise ValueError(
            f"expected {config.mel_bins} mel bins, got {values.shape[0]}")
    frames = values.shape[1]
    rows = config.grid_rows
    cols = config.grid_cols(frames)
    needed = (cols - 1) * config.stride + config.patch
    if needed > frames:
        values = np.concatenate(
            [values, np.full((config.mel_bins, needed - frames), fill)], axis=1)
    p = config.patch
    out = np.empty((rows * cols, p * p))
    for c in range(cols):
        t0 = c * config.stride
        for r in range(rows):
            out[c * rows + r] = values[r * p:(r + 1) * p, t0:t0 + p].reshape(-1)
    return Patches(out, rows, cols)


def _param_shapes(config: ModelConfig) -> dict:
    d = config.embed_dim
    hidden = 4 * d
    shapes = {
        "patch_proj_w": (config.patch * config.patch, d),
        "patch_proj_b": (1, d),
        "cls_token": (1, d),
        "positional": (config.num_patches + 1, d),
    }
    for l in range(config.layers):
        shapes[f"layer{l}.ln1_gamma"] = (1, d)
        shapes[f"layer{l}.ln1_beta"] = (1, d)
        for name in ("wq", "wk", "wv", "wo"):
            shapes[f"layer{l}.{name}"] = (d, d)
        for name in ("bq", "bk", "bv", "bo"):
            shapes[f"layer{l}.{name}"] = (1, d)
        shapes[f"layer{l}.ln2_gamma"] = (1, d)
        shapes[f"layer{l}.ln2_beta"] = (1, d)
        shapes[f"layer{l}.mlp_w1"] = (d, hidden)
        shapes[f"layer{l}.mlp_b1"] = (1, hidden)
        shapes[f"layer{l}.mlp_w2"] = (hidden, d)
        shapes[f"layer{l}.mlp_b2"] = (1, d)
    shapes["final_ln_gamma"] = (1, d)
    shapes["final_ln_beta"] = (1, d)
    shapes["head_w"] = (d, config.num_classes)
    shapes["head_b"] = (1, config.num_classes)
    return shapes


HEAD_KEYS = ("head_w", "head_b")


def backbone_keys(params: dict) -> list:
    return [k for k in params if k not in HEAD_KEYS]


def parameter_count(config: ModelConfig) -> int:
    """Closed form for the total scalar parameter count."""
    d = config.embed_dim
    n = config.num_patches
    per_layer = 12 * d * d + 13 * d
    return (
        config.patch * config.patch * d + d   # patch projection
        + d                                    # CLS token
        + (n + 1) * d                          # positions
        + config.layers * per_layer
        + 2 * d                                # final layernorm
        + d * config.num_classes + config.num_classes
    )


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    # redraw anything beyond two standard deviations
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def init_params(config: ModelConfig, seed: int) -> dict:
    """Truncated-normal weights (std 0.02), unit layernorm gains, zero biases.

    The classifier head starts at exactly zero so an untrained model is
    indifferent between classes.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _param_shapes(config).items():
        base = name.rsplit(".", 1)[-1]
        if base.endswith("_gamma"):
            params[name] = np.ones(shape)
        elif (base.endswith(("_beta", "_b", "_b1", "_b2"))
              or base in ("bq", "bk", "bv", "bo", "head_w", "head_b")):
            params[name] = np.zeros(shape)
        else:
            params[name] = _truncated_normal(rng, shape, 0.02)
    return params


def _attend(tape, x_ref, refs, layer: int, config: ModelConfig):
    """One multi-head self-attention block on the tape; marks every head."""
    d = config.embed_dim
    dh = d // config.heads
    q = tape.add(tape.matmul(x_ref, refs[f"layer{layer}.wq"]), refs[f"layer{layer}.bq"])
    k = tape.add(tape.matmul(x_ref, refs[f"layer{layer}.wk"]), refs[f"layer{layer}.bk"])
    v = tape.add(tape.matmul(x_ref, refs[f"layer{layer}.wv"]), refs[f"layer{layer}.bv"])
    ctx_heads = []
    for h in range(config.heads):
        span = (h * dh, (h + 1) * dh)
        qh = tape.slice(q, cols=span)
        kh = tape.slice(k, cols=span)
        vh = tape.slice(v, cols=span)
        scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), 1.0 / math.sqrt(dh))
        a = tape.softmax_rows(scores)
        tape.mark_attention(a, layer=layer, head=h)
        ctx_heads.append(tape.matmul(a, vh))
    ctx = ctx_heads[0] if len(ctx_heads) == 1 else tape.concat(ctx_heads, axis=1)
    return tape.add(tape.matmul(ctx, refs[f"layer{layer}.wo"]), refs[f"layer{layer}.bo"])


def forward_patches(patches: Patches, params: dict, config: ModelConfig) -> ForwardTrace:
    """Run the encoder on pre-cut patches and record the pass on a tape."""
    n = patches.count
    if n + 1 > params["positional"].shape[0]:
        raise ValueError(
            f"{n} patches exceed positional capacity {params['positional'].shape[0] - 1}")
    tape = grad.Tape()
    refs = {name: tape.leaf(value) for name, value in params.items()}

    proj = tape.add(tape.matmul(tape.leaf(patches.values), refs["patch_proj_w"]),
                    refs["patch_proj_b"])
    tokens = tape.concat([refs["cls_token"], proj], axis=0)
    pos = refs["positional"]
    if params["positional"].shape[0] != n + 1:
        pos = tape.slice(pos, rows=(0, n + 1))
    x = tape.add(tokens, pos)

    for l in range(config.layers):
        h = tape.layernorm(x, refs[f"layer{l}.ln1_gamma"], refs[f"layer{l}.ln1_beta"])
        x = tape.add(x, _attend(tape, h, refs, l, config))
        h = tape.layernorm(x, refs[f"layer{l}.ln2_gamma"], refs[f"layer{l}.ln2_beta"])
        m = tape.gelu(tape.add(tape.matmul(h, refs[f"layer{l}.mlp_w1"]),
                               refs[f"layer{l}.mlp_b1"]))
        m = tape.add(tape.matmul(m, refs[f"layer{l}.mlp_w2"]), refs[f"layer{l}.mlp_b2"])
        x = tape.add(x, m)

    xf = tape.layernorm(x, refs["final_ln_gamma"], refs["final_ln_beta"])
    cls = tape.slice(xf, rows=(0, 1))
    logits_ref = tape.add(tape.matmul(cls, refs["head_w"]), refs["head_b"])
    tape.register_output("logits", logits_ref)

    marks = {}
    for mark in tape.attention_marks:
        marks.setdefault(mark.layer, []).append(mark)
    attentions = [
        np.stack([tape.value(m.ref) for m in sorted(marks[l], key=lambda m: m.head)])
        for l in sorted(marks)
    ]
    return ForwardTrace(
        logits=tape.value(logits_ref)[0].copy(),
        cls_representation=tape.value(cls)[0].copy(),
        attentions=attentions,
        tape=tape,
        grid=(patches.rows, patches.cols),
        param_refs=refs,
        logits_ref=logits_ref,
    )


def forward(spec, params: dict, config: ModelConfig) -> ForwardTrace:
    return forward_patches(patchify(spec, config), params, config)


def embed(patches: Patches, params: dict, config: ModelConfig) -> np.ndarray:
    """Token sequence [CLS; projected patches] + positions, as plain values."""
    n = patches.count
    if n + 1 > params["positional"].shape[0]:
        raise ValueError(
            f"{n} patches exceed positional capacity {params['positional'].shape[0] - 1}")
    proj = patches.values @ params["patch_proj_w"] + params["patch_proj_b"]
    tokens = np.concatenate([params["cls_token"], proj], axis=0)
    return tokens + params["positional"][:n + 1]


_CONFIG_FIELDS = ("embed_dim", "layers", "heads", "patch", "stride",
                  "mel_bins", "max_frames", "num_classes", "backbone_trainable")


def save_checkpoint(params: dict, config: ModelConfig, path) -> None:
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    parts.append(struct.pack("<9I", *(int(getattr(config, f)) for f in _CONFIG_FIELDS)))
    shapes = _param_shapes(config)
    for name, shape in shapes.items():
        value = params[name]
        if value.shape != shape:
            raise ValueError(f"{name}: shape {value.shape}, expected {shape}")
        parts.append(value.astype("<f4").tobytes())
    blob = b"".join(parts)
    with open(path, "wb") as f:
        f.write(blob + struct.pack("<I", zlib.crc32(blob)))


def load_checkpoint(path):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if zlib.crc32(blob[:-4]) != struct.unpack("<I", blob[-4:])[0]:
        raise CheckpointChecksumError(f"{path}: checksum mismatch")
    version = struct.unpack_from("<I", blob, 4)[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: version {version}, expected {CHECKPOINT_VERSION}")
    raw = struct.unpack_from("<9I", blob, 8)
    fields = dict(zip(_CONFIG_FIELDS, raw))
    fields["backbone_trainable"] = bool(fields["backbone_trainable"])
    config = ModelConfig(**fields)
    offset = 8 + 36
    params = {}
    for name, shape in _param_shapes(config).items():
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(blob) - 4:
            raise CheckpointError(f"{path}: truncated parameter block {name}")
        params[name] = np.frombuffer(blob[offset:end], dtype="<f4").astype(
            np.float64).reshape(shape)
        offset = end
    if offset != len(blob) - 4:
        raise CheckpointError(f"{path}: trailing bytes after parameters")
    return params, config
