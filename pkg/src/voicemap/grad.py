"""Tape-based reverse-mode differentiation for the encoder's tensor ops.

Values are eagerly computed float64 arrays (2-D matrices, or 0-d scalars for
reduction outputs). Every recorded node keeps the intermediates its backward
rule needs; `backward` replays the tape in reverse to fill a gradient store.

Attention probability matrices (softmax outputs) can be marked with a
(layer, head) tag so their values and their gradients with respect to a
chosen class logit can be pulled out in one pass. Gradients are taken with
respect to the post-softmax probabilities, i.e. the adjoint at the marked
node itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

LAYERNORM_EPS = 1e-5
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Raised when operands do not conform to a primitive's shape contract."""


@dataclass
class Node:
    op: str
    value: np.ndarray
    parents: tuple[int, ...]
    # maps the output adjoint to one adjoint per parent
    vjp: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None


@dataclass(frozen=True)
class AttentionMark:
    layer: int
    head: int
    ref: int


class GradientStore:
    """Gradients per node ref; nodes that are not ancestors of the output read as zeros."""

    def __init__(self, tape: "Tape", grads: dict[int, np.ndarray]):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, ref: int) -> np.ndarray:
        g = self._grads.get(ref)
        if g is None:
            return np.zeros_like(self._tape.value(ref))
        return g

    def __contains__(self, ref: int) -> bool:
        return ref in self._grads


def _as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim not in (0, 2):
        raise ShapeError(f"tape values must be 0-d or 2-d, got shape {a.shape}")
    return a


class Tape:
    """Append-only record of one computation; single writer, acyclic by construction."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.attention_marks: list[AttentionMark] = []
        self.outputs: dict[str, int] = {}

    def value(self, ref: int) -> np.ndarray:
        return self.nodes[ref].value

    def _append(self, op, value, parents, vjp) -> int:
        self.nodes.append(Node(op, value, parents, vjp))
        return len(self.nodes) - 1

    def register_output(self, name: str, ref: int) -> None:
        self.outputs[name] = ref

    def mark_attention(self, ref: int, layer: int, head: int) -> None:
        if self.nodes[ref].op != "softmax_rows":
            raise ValueError("only softmax_rows outputs may be marked as attention")
        self.attention_marks.append(AttentionMark(layer, head, ref))

    # -- primitives ---------------------------------------------------------

    def leaf(self, value) -> int:
        return self._append("leaf", _as_matrix(value), (), None)

    def matmul(self, a: int, b: int) -> int:
        av, bv = self.value(a), self.value(b)
        if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
            raise ShapeError(f"matmul: cannot multiply {av.shape} by {bv.shape}")
        out = av @ bv

        def vjp(g):
            return g @ bv.T, av.T @ g

        return self._append("matmul", out, (a, b), vjp)

    def add(self, a: int, b: int) -> int:
        av, bv = self.value(a), self.value(b)
        if av.shape == bv.shape:
            def vjp(g):
                return g, g
        elif av.ndim == 2 and bv.shape == (1, av.shape[1]):
            # row-vector broadcast over rows, used for biases and positions
            def vjp(g):
                return g, g.sum(axis=0, keepdims=True)
        else:
            raise ShapeError(f"add: shapes {av.shape} and {bv.shape} do not conform")
        return self._append("add", av + bv, (a, b), vjp)

    def scale(self, a: int, c: float) -> int:
        av = self.value(a)
        c = float(c)

        def vjp(g):
            return (g * c,)

        return self._append("scale", av * c, (a,), vjp)

    def softmax_rows(self, a: int) -> int:
        av = self.value(a)
        if av.ndim != 2:
            raise ShapeError(f"softmax_rows: expected a matrix, got shape {av.shape}")
        z = av - av.max(axis=1, keepdims=True)
        e = np.exp(z)
        s = e / e.sum(axis=1, keepdims=True)

        def vjp(g):
            return ((g - (g * s).sum(axis=1, keepdims=True)) * s,)

        return self._append("softmax_rows", s, (a,), vjp)

    def layernorm(self, x: int, gamma: int, beta: int) -> int:
        xv, gv, bv = self.value(x), self.value(gamma), self.value(beta)
        if xv.ndim != 2 or gv.shape != (1, xv.shape[1]) or bv.shape != (1, xv.shape[1]):
            raise ShapeError(
                f"layernorm: x {xv.shape} with gamma {gv.shape}, beta {bv.shape}"
            )
        mu = xv.mean(axis=1, keepdims=True)
        xc = xv - mu
        var = (xc * xc).mean(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + LAYERNORM_EPS)
        xhat = xc * inv
        out = xhat * gv + bv

        def vjp(g):
            gx_hat = g * gv
            gx = inv * (
                gx_hat
                - gx_hat.mean(axis=1, keepdims=True)
                - xhat * (gx_hat * xhat).mean(axis=1, keepdims=True)
            )
            return gx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

        return self._append("layernorm", out, (x, gamma, beta), vjp)

    def gelu(self, a: int) -> int:
        xv = self.value(a)
        # exact Gaussian-CDF form, not the tanh approximation
        cdf = 0.5 * (1.0 + erf(xv * _INV_SQRT2))
        out = xv * cdf

        def vjp(g):
            pdf = np.exp(-0.5 * xv * xv) * _INV_SQRT_2PI
            return (g * (cdf + xv * pdf),)

        return self._append("gelu", out, (a,), vjp)

    def mean(self, a: int) -> int:
        av = self.value(a)
        n = av.size

        def vjp(g):
            return (np.full_like(av, float(g) / n),)

        return self._append("mean", np.asarray(av.mean()), (a,), vjp)

    def slice(self, a: int, rows: tuple[int, int] | None = None,
              cols: tuple[int, int] | None = None) -> int:
        av = self.value(a)
        if av.ndim != 2:
            raise ShapeError(f"slice: expected a matrix, got shape {av.shape}")
        r0, r1 = rows if rows is not None else (0, av.shape[0])
        c0, c1 = cols if cols is not None else (0, av.shape[1])
        if not (0 <= r0 <= r1 <= av.shape[0] and 0 <= c0 <= c1 <= av.shape[1]):
            raise ShapeError(f"slice: range rows={rows} cols={cols} outside {av.shape}")
        out = av[r0:r1, c0:c1].copy()

        def vjp(g):
            ga = np.zeros_like(av)
            ga[r0:r1, c0:c1] = g
            return (ga,)

        return self._append("slice", out, (a,), vjp)

    def concat(self, refs: Sequence[int], axis: int = 0) -> int:
        vals = [self.value(r) for r in refs]
        if axis not in (0, 1) or any(v.ndim != 2 for v in vals):
            raise ShapeError(f"concat: needs matrices, got {[v.shape for v in vals]}")
        out = np.concatenate(vals, axis=axis)
        sizes = [v.shape[axis] for v in vals]
        bounds = np.cumsum([0] + sizes)

        def vjp(g):
            if axis == 0:
                return tuple(g[bounds[i]:bounds[i + 1], :] for i in range(len(vals)))
            return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(vals)))

        return self._append("concat", out, tuple(refs), vjp)

    def transpose(self, a: int) -> int:
        av = self.value(a)
        if av.ndim != 2:
            raise ShapeError(f"transpose: expected a matrix, got shape {av.shape}")

        def vjp(g):
            return (g.T,)

        return self._append("transpose", av.T.copy(), (a,), vjp)

    def cross_entropy(self, logits: int, target: int) -> int:
        """Scalar negative log-likelihood of `target` under softmax(logits). Stable log-sum-exp."""
        lv = self.value(logits)
        if lv.ndim != 2 or lv.shape[0] != 1:
            raise ShapeError(f"cross_entropy: logits must be [1 x C], got {lv.shape}")
        if not 0 <= target < lv.shape[1]:
            raise ShapeError(f"cross_entropy: target {target} outside {lv.shape[1]} classes")
        m = lv.max()
        lse = m + np.log(np.exp(lv - m).sum())
        loss = np.asarray(lse - lv[0, target])
        probs = np.exp(lv - lse)

        def vjp(g):
            gl = probs.copy()
            gl[0, target] -= 1.0
            return (gl * float(g),)

        return self._append("cross_entropy", loss, (logits,), vjp)


def backward(tape: Tape, output: int) -> GradientStore:
    """Populate gradients of the scalar at `output` for all its tape ancestors."""
    out_val = tape.value(output)
    if out_val.size != 1:
        raise ValueError(f"backward: output must be scalar, got shape {out_val.shape}")
    grads: dict[int, np.ndarray] = {output: np.ones_like(out_val)}
    for ref in range(output, -1, -1):
        g = grads.get(ref)
        if g is None:
            continue
        node = tape.nodes[ref]
        if node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            acc = grads.get(parent)
            grads[parent] = pg if acc is None else acc + pg
    return GradientStore(tape, grads)


def attention_grads(tape: Tape, logit_index: int):
    """Per-layer attention values and their gradients w.r.t. the class logit.

    Requires a recorded forward pass that registered its logits node under
    "logits" and marked every attention matrix. Returns a list, one entry per
    layer in forward order, of (layer, A, gradA) with A and gradA stacked over
    heads as [heads x tokens x tokens].
    """
    if "logits" not in tape.outputs:
        raise ValueError("tape has no registered logits output")
    logits_ref = tape.outputs["logits"]
    n_classes = tape.value(logits_ref).shape[1]
    if not 0 <= logit_index < n_classes:
        raise IndexError(f"class index {logit_index} outside {n_classes} classes")
    y_t = tape.slice(logits_ref, rows=(0, 1), cols=(logit_index, logit_index + 1))
    store = backward(tape, y_t)

    by_layer: dict[int, list[AttentionMark]] = {}
    for mark in tape.attention_marks:
        by_layer.setdefault(mark.layer, []).append(mark)
    result = []
    for layer in sorted(by_layer):
        marks = sorted(by_layer[layer], key=lambda m: m.head)
        a = np.stack([tape.value(m.ref) for m in marks])
        ga = np.stack([store[m.ref] for m in marks])
        result.append((layer, a, ga))
    return result


def finite_diff_check(build, point: np.ndarray, step: float, coords=None) -> float:
    """Max relative error between taped gradients and central differences.

    `build(tape, ref) -> scalar ref` records the computation from a single
    leaf holding `point`. Central differences (f(x+h) - f(x-h)) / 2h are
    evaluated per coordinate (all of them unless `coords` lists a subset) and
    compared against the backward pass, with relative error denominator
    max(|analytic|, |numeric|, 1e-8).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(point, dtype=np.float64)

    tape = Tape()
    x_ref = tape.leaf(x.copy())
    out_ref = build(tape, x_ref)
    analytic = backward(tape, out_ref)[x_ref]

    def f(xs: np.ndarray) -> float:
        t = Tape()
        return t.value(build(t, t.leaf(xs))).item()

    flat = x.reshape(-1)
    analytic_flat = analytic.reshape(-1)
    if coords is None:
        coords = range(flat.size)
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + step
        f_plus = f(x)
        flat[i] = orig - step
        f_minus = f(x)
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * step)
        a = analytic_flat[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
