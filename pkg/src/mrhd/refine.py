"""Query-guided refinement of clip features into joint features.

The refinement path scores every clip against every word through learned
linear maps, attends in both directions (clips over words, and words
back over clips), fuses the attended streams with the original clip
features and a replicated global text vector, and finally runs one
cross-attention layer from the fused clips into the words to produce the
joint per-clip features consumed by the downstream heads.

The cross-attention output keeps a residual connection from its input
plus a layer-norm by default so per-clip identity survives the text
mixing; ``raw_attention=True`` disables both and yields the bare
attention mixture.

This module also hosts the generic multi-head attention helper and
sinusoidal position table used elsewhere in the model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .align import ProjectedFeatures, apply_layer_norm, init_layer_norm, init_linear, linear
from .tensor import ContractError, Tensor


@dataclass
class CrossSimilarity:
    """Clip-word score matrix with its row- and column-stochastic forms."""

    a: Tensor
    a_row: Tensor
    a_col: Tensor


@dataclass
class JointFeatures:
    z: Tensor


# ---------------------------------------------------------------------------
# positional encoding


def positional_encoding(length: int, d: int) -> np.ndarray:
    """Standard sinusoidal table: sin on even channels, cos on odd."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(idx / 2.0) / d)
    table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return table


def add_positions(v_hat: Tensor) -> Tensor:
    length, d = v_hat.shape
    return T.add(v_hat, Tensor(positional_encoding(length, d)))


# ---------------------------------------------------------------------------
# parameters


def init_refine_params(params: dict, rng: np.random.Generator, d: int):
    init_linear(params, rng, "cross.v", d, d)
    init_linear(params, rng, "cross.t", d, d)
    init_linear(params, rng, "fuse", 5 * d, d)
    for name in ("zattn.q", "zattn.k", "zattn.v"):
        init_linear(params, rng, name, d, d)
    init_layer_norm(params, "zattn.ln", d)


# ---------------------------------------------------------------------------
# operations


def cross_similarity(p: ProjectedFeatures, params: dict) -> CrossSimilarity:
    """Scaled product of linearly mapped clips and words, (L, N), with
    row-softmax and column-softmax variants."""
    d = p.v_hat.shape[1]
    scores = T.scale(
        T.matmul(linear(p.v_hat, params, "cross.v"), T.transpose(linear(p.t_hat, params, "cross.t"))),
        1.0 / math.sqrt(d),
    )
    return CrossSimilarity(
        a=scores,
        a_row=T.softmax(scores, axis=1),
        a_col=T.softmax(scores, axis=0),
    )


def bidirectional_attend(cs: CrossSimilarity, p: ProjectedFeatures) -> tuple[Tensor, Tensor]:
    """Clip-to-word attention and its word-to-clip round trip.

    The first stream mixes word vectors per clip; the second routes clip
    vectors through the word axis and back.
    """
    f_v2q = T.matmul(cs.a_row, p.t_hat)
    f_q2v = T.matmul(T.matmul(cs.a_row, T.transpose(cs.a_col)), p.v_hat)
    return f_v2q, f_q2v


def fuse(p: ProjectedFeatures, f_v2q: Tensor, f_q2v: Tensor, params: dict) -> Tensor:
    """Five-block concat -> linear back to d.

    Blocks: clips, attended words, clip (x) attended-word product, clip (x)
    routed-clip product, and the mean word vector replicated per clip.
    """
    length = p.v_hat.shape[0]
    text_global = T.broadcast_rows(T.tmean(p.t_hat, axis=0), length)
    stacked = T.concat(
        [p.v_hat, f_v2q, T.mul(p.v_hat, f_v2q), T.mul(p.v_hat, f_q2v), text_global],
        axis=1,
    )
    return linear(stacked, params, "fuse")


def cross_attention_fusion(
    f_v_bar: Tensor, t_hat: Tensor, params: dict, raw_attention: bool = False
) -> JointFeatures:
    """Single-head cross-attention from refined clips into words.

    Query comes from the clips, key/value from the words. By default the
    input is added back and layer-normed; ``raw_attention`` returns the
    plain attention mixture instead.
    """
    d = f_v_bar.shape[1]
    q = linear(f_v_bar, params, "zattn.q")
    k = linear(t_hat, params, "zattn.k")
    v = linear(t_hat, params, "zattn.v")
    weights = T.softmax(T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(d)), axis=1)
    mixed = T.matmul(weights, v)
    if raw_attention:
        return JointFeatures(z=mixed)
    return JointFeatures(z=apply_layer_norm(T.add(f_v_bar, mixed), params, "zattn.ln"))


# ---------------------------------------------------------------------------
# generic multi-head attention (shared by the downstream heads and decoder)


def init_attention(params: dict, rng: np.random.Generator, prefix: str, d: int):
    for name in ("q", "k", "v", "o"):
        init_linear(params, rng, f"{prefix}.{name}", d, d)


def multi_head_attention(
    q_in: Tensor, kv_in: Tensor, params: dict, prefix: str, heads: int
) -> Tensor:
    """Multi-head scaled dot-product attention with an output projection.

    ``q_in`` supplies the queries; ``kv_in`` supplies keys and values.
    Self-attention is the q_in == kv_in case.
    """
    d = q_in.shape[1]
    if d % heads != 0:
        raise ContractError(f"model dim {d} not divisible by {heads} heads")
    dh = d // heads
    q = linear(q_in, params, f"{prefix}.q")
    k = linear(kv_in, params, f"{prefix}.k")
    v = linear(kv_in, params, f"{prefix}.v")
    outputs = []
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        qh, kh, vh = (T.slice_cols(m, lo, hi) for m in (q, k, v))
        w = T.softmax(T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / math.sqrt(dh)), axis=1)
        outputs.append(T.matmul(w, vh))
    return linear(T.concat(outputs, axis=1), params, f"{prefix}.o")
