"""Task cooperation between highlight scoring and moment decoding.

Four pieces chain together here:

* a highlight head scoring every clip from the joint features,
* a forward hand-off that softmaxes those scores, scales the joint
  features row-wise with them, and re-encodes through the SAME
  self-attention block the highlight head used (the two call sites
  resolve to one parameter set, which is the point),
* a set-prediction decoder: M learned query vectors, K layers of
  cross-attention over the enhanced features plus feed-forward, a span
  head emitting normalized (center, width) pairs through a sigmoid, and
  a foreground-score head,
* a reverse hand-off that summarizes the top span's clips with a GRU,
  scores every clip by cosine similarity against that summary, and
  linearly maps the re-weighted features to refined highlight scores.

All attention blocks are pre-norm residual blocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .align import apply_layer_norm, init_layer_norm, init_linear, linear, row_norms
from .refine import JointFeatures, init_attention, multi_head_attention
from .tensor import ContractError, Tensor

SHARED_PREFIX = "shared_attn"


@dataclass
class HighlightScores:
    h: Tensor
    h_bar: Tensor


@dataclass
class DecoderOutput:
    """Differentiable decoder products: normalized spans and foreground scores."""

    center_width: Tensor  # (M, 2), sigmoid outputs
    scores: Tensor  # (M,), sigmoid outputs


@dataclass
class MomentPrediction:
    """Final per-query prediction: scored spans in seconds plus clip scores."""

    spans: list[tuple[float, float, float]]
    highlight: np.ndarray


# ---------------------------------------------------------------------------
# parameters


def init_transformer_block(params: dict, rng: np.random.Generator, prefix: str, d: int):
    init_attention(params, rng, f"{prefix}.attn", d)
    init_layer_norm(params, f"{prefix}.ln1", d)
    init_layer_norm(params, f"{prefix}.ln2", d)
    init_linear(params, rng, f"{prefix}.ff.l0", d, 4 * d)
    init_linear(params, rng, f"{prefix}.ff.l1", 4 * d, d)


def init_cooperate_params(
    params: dict, rng: np.random.Generator, d: int, num_queries: int, decoder_layers: int
):
    init_transformer_block(params, rng, SHARED_PREFIX, d)
    init_linear(params, rng, "highlight", d, 1)
    params["decoder.queries"] = Tensor(
        rng.standard_normal((num_queries, d)) / math.sqrt(d), requires_grad=True
    )
    for k in range(decoder_layers):
        init_transformer_block(params, rng, f"decoder.layer{k}", d)
    init_linear(params, rng, "decoder.span", d, 2)
    init_linear(params, rng, "decoder.cls", d, 1)
    for gate in ("u", "r", "c"):
        init_linear(params, rng, f"gru.x{gate}", d, d)
        init_linear(params, rng, f"gru.h{gate}", d, d)
    init_linear(params, rng, "refine_out", d, 1)


# ---------------------------------------------------------------------------
# shared self-attention block


def _feed_forward(x: Tensor, params: dict, prefix: str) -> Tensor:
    return linear(T.relu(linear(x, params, f"{prefix}.ff.l0")), params, f"{prefix}.ff.l1")


def transformer_block(
    x: Tensor, params: dict, prefix: str, heads: int, memory: Tensor | None = None
) -> Tensor:
    """Pre-norm residual block: attention then feed-forward.

    Self-attention when ``memory`` is None, cross-attention over it
    otherwise.
    """
    normed = apply_layer_norm(x, params, f"{prefix}.ln1")
    kv = normed if memory is None else memory
    x = T.add(x, multi_head_attention(normed, kv, params, f"{prefix}.attn", heads))
    return T.add(x, _feed_forward(apply_layer_norm(x, params, f"{prefix}.ln2"), params, prefix))


# ---------------------------------------------------------------------------
# highlight head and forward hand-off


def highlight_head(joint: JointFeatures, params: dict, heads: int) -> Tensor:
    """Clip scores: shared self-attention block, then a linear map to one
    logit per clip."""
    encoded = transformer_block(joint.z, params, SHARED_PREFIX, heads)
    length = encoded.shape[0]
    return T.reshape(linear(encoded, params, "highlight"), (length,))


def hd2mr(joint: JointFeatures, h: Tensor, params: dict, heads: int) -> Tensor:
    """Enhance joint features with softmaxed highlight scores, then re-encode
    with the same shared block the highlight head used."""
    length, d = joint.z.shape
    weights = T.softmax(h, axis=0)
    scaled = T.mul(joint.z, T.broadcast_cols(weights, d))
    return transformer_block(T.add(joint.z, scaled), params, SHARED_PREFIX, heads)


# ---------------------------------------------------------------------------
# moment decoder


def moment_decoder(z_hat: Tensor, params: dict, heads: int, decoder_layers: int) -> DecoderOutput:
    q = params["decoder.queries"]
    for k in range(decoder_layers):
        q = transformer_block(q, params, f"decoder.layer{k}", heads, memory=z_hat)
    m = q.shape[0]
    center_width = T.sigmoid(linear(q, params, "decoder.span"))
    scores = T.reshape(T.sigmoid(linear(q, params, "decoder.cls")), (m,))
    return DecoderOutput(center_width=center_width, scores=scores)


def decode_spans(out: DecoderOutput, duration: float) -> list[tuple[float, float, float]]:
    """Materialize (start, end, score) triples in seconds, best first."""
    cw = out.center_width.data
    starts = np.clip((cw[:, 0] - cw[:, 1] / 2.0) * duration, 0.0, duration)
    ends = np.clip((cw[:, 0] + cw[:, 1] / 2.0) * duration, 0.0, duration)
    scores = out.scores.data
    order = np.argsort(-scores, kind="stable")
    return [(float(starts[i]), float(ends[i]), float(scores[i])) for i in order]


# ---------------------------------------------------------------------------
# GRU and reverse hand-off


def gru_cell(x: Tensor, hidden: Tensor, params: dict) -> Tensor:
    """One gated-recurrent step over (1, d) row vectors.

    update u = sigm(Wu x + Uu h), reset r = sigm(Wr x + Ur h),
    candidate c = tanh(Wc x + Uc (r*h)), out = (1-u)*h + u*c.
    """
    u = T.sigmoid(T.add(linear(x, params, "gru.xu"), linear(hidden, params, "gru.hu")))
    r = T.sigmoid(T.add(linear(x, params, "gru.xr"), linear(hidden, params, "gru.hr")))
    cand = T.tanh(
        T.add(linear(x, params, "gru.xc"), linear(T.mul(r, hidden), params, "gru.hc"))
    )
    keep = T.mul(T.add_scalar(T.scale(u, -1.0), 1.0), hidden)
    return T.add(keep, T.mul(u, cand))


def span_to_clip_range(start: float, end: float, clip_len: float, num_clips: int) -> tuple[int, int]:
    """Clip index range [i0, i1) covered by a span, clamped non-empty."""
    i0 = int(math.floor(start / clip_len))
    i1 = int(math.ceil(end / clip_len))
    if i1 <= 0 or i0 >= num_clips:
        raise ContractError(
            f"span [{start}, {end}] lies outside the {num_clips}-clip video"
        )
    i0 = max(i0, 0)
    i1 = min(i1, num_clips)
    if i1 <= i0:
        i1 = i0 + 1
    return i0, i1


def mr2hd(
    v_hat: Tensor,
    joint: JointFeatures,
    z_hat: Tensor,
    top_span: tuple[float, float],
    clip_len: float,
    params: dict,
) -> Tensor:
    """Refined highlight scores from the retrieved moment.

    A GRU (zero initial state) summarizes the top span's rows of the
    projected clip features; every clip is scored by cosine similarity
    against that summary; the softmaxed similarities re-weight the
    enhanced features, which are added back to the joint features and
    mapped to one score per clip.
    """
    length, d = v_hat.shape
    i0, i1 = span_to_clip_range(top_span[0], top_span[1], clip_len, length)
    moment_rows = T.slice_rows(v_hat, i0, i1)
    hidden = Tensor(np.zeros((1, d)))
    for t in range(i1 - i0):
        hidden = gru_cell(T.slice_rows(moment_rows, t, t + 1), hidden, params)

    dots = T.reshape(T.matmul(v_hat, T.transpose(hidden)), (length,))
    norm_prod = T.mul(row_norms(v_hat), T.expand_scalar(row_norms(hidden), (length,)))
    s_ref = T.div(dots, norm_prod)
    weights = T.softmax(s_ref, axis=0)
    reweighted = T.mul(z_hat, T.broadcast_cols(weights, d))
    refined = linear(T.add(joint.z, reweighted), params, "refine_out")
    return T.reshape(refined, (length,))
