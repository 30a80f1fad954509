"""Gradient-weighted attention rollout.

Per layer, attention is fused with its gradient as mean_heads(max(0, grad * A))
(elementwise product, positive part, then the head mean, in that order). The
relevance matrix starts at identity and accumulates R <- R + a_bar R through
the layers; the CLS row, minus its self-relevance entry, scores the patches.
"""

from dataclasses import dataclass
import json
import struct

import numpy as np

from . import grad, model

MAP_MAGIC = b"RMAP"
MAP_VERSION = 1


@dataclass(frozen=True)
class LayerAttribution:
    a_bar: np.ndarray  # [tokens x tokens], nonnegative


@dataclass
class RelevanceMap:
    patch_scores: np.ndarray  # length rows*cols, time-major
    grid: tuple               # (rows, cols)
    pixels: np.ndarray        # [mel_bins x padded_frames] upsampled scores
    final: np.ndarray         # [mel_bins x original_frames] in [0, 1]


@dataclass
class Explanation:
    map: RelevanceMap
    predicted_class: int
    class_explained: int
    logits: np.ndarray


def head_aggregate(attention: np.ndarray, attention_grad: np.ndarray) -> LayerAttribution:
    """Fuse per-head attention with gradients: clip the product, then average."""
    a = np.asarray(attention, dtype=np.float64)
    g = np.asarray(attention_grad, dtype=np.float64)
    if a.shape != g.shape or a.ndim != 3 or a.shape[1] != a.shape[2]:
        raise ValueError(
            f"need matching [heads x T x T] stacks, got {a.shape} and {g.shape}")
    return LayerAttribution(np.maximum(g * a, 0.0).mean(axis=0))


def rollout(layers, tokens: int) -> np.ndarray:
    """Accumulate relevance through the layers starting from identity."""
    r = np.eye(tokens)
    for i, layer in enumerate(layers):
        a_bar = layer.a_bar if isinstance(layer, LayerAttribution) else np.asarray(layer)
        if a_bar.shape != (tokens, tokens):
            raise ValueError(
                f"layer {i}: attribution shape {a_bar.shape}, expected {(tokens, tokens)}")
        r = r + a_bar @ r
    return r


def cls_relevance(r: np.ndarray) -> np.ndarray:
    """CLS row of R without the CLS self-relevance column."""
    r = np.asarray(r)
    if r.ndim != 2 or r.shape[0] != r.shape[1] or r.shape[0] < 2:
        raise ValueError(f"R must be square with at least 2 tokens, got {r.shape}")
    return r[0, 1:].copy()


def bilinear_upsample(grid_vals: np.ndarray, out_rows: int, out_cols: int) -> np.ndarray:
    """Corner-aligned bilinear resize: grid corners land on output corners."""
    src = np.asarray(grid_vals, dtype=np.float64)
    if src.ndim != 2 or src.size == 0:
        raise ValueError(f"need a non-empty matrix, got shape {src.shape}")
    if out_rows < 1 or out_cols < 1:
        raise ValueError("output size must be positive")

    def coords(n_src, n_out):
        if n_out == 1 or n_src == 1:
            return np.zeros(n_out)
        return np.arange(n_out) * (n_src - 1) / (n_out - 1)

    rc = coords(src.shape[0], out_rows)
    cc = coords(src.shape[1], out_cols)
    r0 = np.minimum(rc.astype(int), src.shape[0] - 1)
    r1 = np.minimum(r0 + 1, src.shape[0] - 1)
    c0 = np.minimum(cc.astype(int), src.shape[1] - 1)
    c1 = np.minimum(c0 + 1, src.shape[1] - 1)
    wr = (rc - r0)[:, None]
    wc = (cc - c0)[None, :]
    top = src[np.ix_(r0, c0)] * (1 - wc) + src[np.ix_(r0, c1)] * wc
    bottom = src[np.ix_(r1, c0)] * (1 - wc) + src[np.ix_(r1, c1)] * wc
    return top * (1 - wr) + bottom * wr


def to_map(scores, grid: tuple, spec) -> RelevanceMap:
    """Patch scores -> pixel relevance aligned with the input spectrogram.

    Scores arrive time-major (all frequency rows of time block 0 first).
    The pixel map covers the padded input; `final` is cut back to the
    unpadded frames and min-max normalized, constant maps collapsing to zero.
    """
    rows, cols = grid
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (rows * cols,):
        raise ValueError(f"got {scores.size} scores for a {rows}x{cols} grid")
    node_grid = scores.reshape(cols, rows).T
    pixels = bilinear_upsample(node_grid, spec.values.shape[0], spec.values.shape[1])
    final = pixels[:, :spec.original_frames].copy()
    lo, hi = final.min(), final.max()
    if hi > lo:
        final = (final - lo) / (hi - lo)
    else:
        final = np.zeros_like(final)
    return RelevanceMap(patch_scores=scores.copy(), grid=(rows, cols),
                        pixels=pixels, final=final)


def explain(spec, params: dict, config: model.ModelConfig,
            class_index: int = None) -> Explanation:
    """Forward pass, per-layer attention gradients, rollout, pixel map.

    Explains the predicted class unless `class_index` picks one explicitly.
    """
    trace = model.forward(spec, params, config)
    predicted = int(np.argmax(trace.logits))
    target = predicted if class_index is None else int(class_index)
    per_layer = grad.attention_grads(trace.tape, target)
    attributions = [head_aggregate(a, ga) for _, a, ga in per_layer]
    tokens = trace.attentions[0].shape[1]
    scores = cls_relevance(rollout(attributions, tokens))
    return Explanation(map=to_map(scores, trace.grid, spec),
                       predicted_class=predicted,
                       class_explained=target,
                       logits=trace.logits.copy())


def save_map(rmap: RelevanceMap, path, meta: dict = None) -> None:
    """Binary map export plus a `<path>.json` sidecar describing the decision."""
    final = rmap.final
    header = MAP_MAGIC + struct.pack(
        "<IIII", MAP_VERSION, final.shape[0], final.shape[1], final.shape[1])
    with open(path, "wb") as f:
        f.write(header + final.astype("<f4").tobytes())
    if meta is not None:
        sidecar = dict(meta)
        if "logits" in sidecar:
            sidecar["logits"] = [float(x) for x in np.asarray(sidecar["logits"])]
        with open(f"{path}.json", "w") as f:
            json.dump(sidecar, f, indent=2, sort_keys=True)
            f.write("\n")


def load_map(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 20 or blob[:4] != MAP_MAGIC:
        raise ValueError(f"{path}: not a relevance map file")
    version, bins, frames, _ = struct.unpack_from("<IIII", blob, 4)
    if version != MAP_VERSION:
        raise ValueError(f"{path}: unsupported map version {version}")
    data = np.frombuffer(blob, dtype="<f4", offset=20)
    if data.size != bins * frames:
        raise ValueError(f"{path}: payload size does not match header")
    return data.astype(np.float64).reshape(bins, frames)
