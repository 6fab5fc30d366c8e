"""Learned pair discriminator over concatenated embeddings.

Every embedding in a batch is concatenated with every other one into a
b x b x 2d pairing tensor; each slot runs independently through a small
dense stack ending in a sigmoid, giving a same-identity probability per
ordered pair. Trained with binary cross-entropy against a same-class label
matrix, it replaces a hand-picked distance threshold with a learned one.

Slot independence is a hard guarantee here: the dense forward uses the
fixed-reduction-order matmul, so the probability of a pair is bit-identical
whether it is computed alone, inside a full batch, or inside a row tile.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor

# Full b x b x 2d materialization is capped; larger batches run in row tiles
# with bit-identical results (see cmd_probabilities).
PAIR_MATERIALIZE_LIMIT = 512

DEFAULT_HIDDEN = (128, 64)

MASK_POLICIES = ("offdiag", "all", "cross-modal")


def glorot_uniform(rng, shape, dtype):
    fan_in, fan_out = shape[0], shape[-1]
    if len(shape) == 4:  # conv kernels
        rf = shape[0] * shape[1]
        fan_in, fan_out = rf * shape[2], rf * shape[3]
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape).astype(dtype)


class PairDiscriminator:
    """Dense stack 2d -> h1 -> h2 -> 1 applied to each pair slot."""

    def __init__(self, layers):
        self.layers = list(layers)  # [(w, b), ...], last layer has width 1

    @property
    def pair_dim(self):
        return self.layers[0][0].shape[0]

    @classmethod
    def initialize(cls, pair_dim, hidden=DEFAULT_HIDDEN, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        widths = [pair_dim, *hidden, 1]
        layers = []
        for w_in, w_out in zip(widths[:-1], widths[1:]):
            w = Tensor(glorot_uniform(rng, (w_in, w_out), dtype), requires_grad=True)
            b = Tensor(np.zeros(w_out, dtype=dtype), requires_grad=True)
            layers.append((w, b))
        return cls(layers)

    def named_parameters(self, prefix="disc"):
        out = {}
        for i, (w, b) in enumerate(self.layers):
            out[f"{prefix}.dense{i}.w"] = w
            out[f"{prefix}.dense{i}.b"] = b
        return out

    @classmethod
    def from_named(cls, tensors, hidden_count, prefix="disc"):
        layers = []
        for i in range(hidden_count + 1):
            layers.append((tensors[f"{prefix}.dense{i}.w"], tensors[f"{prefix}.dense{i}.b"]))
        return cls(layers)

    def dense_forward(self, rows: Tensor) -> Tensor:
        """Per-row forward over an n x 2d matrix of concatenated pairs."""
        h = rows
        for w, b in self.layers[:-1]:
            h = ag.relu(ag.add_bias(ag.matmul(h, w, fixed_order=True), b))
        w, b = self.layers[-1]
        return ag.sigmoid(ag.add_bias(ag.matmul(h, w, fixed_order=True), b))


def pair_concat_cross(a, b) -> Tensor:
    """m x n x 2d tensor with slot (i, j) = concat(a_i, b_j)."""
    a, b = ag.as_tensor(a), ag.as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"pair_concat_cross: shapes {a.shape} and {b.shape} do not align")
    m, d = a.shape
    n = b.shape[0]
    out = np.empty((m, n, 2 * d), dtype=np.result_type(a.data, b.data))
    out[:, :, :d] = a.data[:, None, :]
    out[:, :, d:] = b.data[None, :, :]

    def backward(g):
        ag.accumulate(a, g[:, :, :d].sum(axis=1))
        ag.accumulate(b, g[:, :, d:].sum(axis=0))

    return ag.make_op(out, (a, b), backward)


def pair_concat(embeddings) -> Tensor:
    """Square all-pairs concatenation of a batch of (unit-norm) embeddings.

    Slot (i, j) is exactly concat(e_i, e_j); each embedding therefore receives
    adjoints from its b row slots and b column slots.
    """
    e = ag.as_tensor(embeddings)
    if e.data.ndim != 2 or e.shape[0] < 2:
        raise ValueError(f"pair_concat: need at least 2 embeddings, got shape {e.shape}")
    return pair_concat_cross(e, e)


def genuine_labels(class_ids) -> np.ndarray:
    """b x b same-class indicator matrix: symmetric, all-ones diagonal."""
    ids = np.asarray(class_ids)
    return (ids[:, None] == ids[None, :]).astype(np.float64)


def cmd_forward(pairs, disc: PairDiscriminator) -> Tensor:
    """Probability matrix from a pairing tensor; slots evaluated independently."""
    pairs = ag.as_tensor(pairs)
    if pairs.data.ndim != 3:
        raise ValueError(f"cmd_forward: expected m x n x 2d pairs, got {pairs.shape}")
    m, n, pd = pairs.shape
    if pd != disc.pair_dim:
        raise ValueError(f"cmd_forward: pair width {pd} does not match discriminator input {disc.pair_dim}")
    flat = ag.reshape(pairs, (m * n, pd))
    probs = disc.dense_forward(flat)
    return ag.reshape(probs, (m, n))


def cmd_probabilities(embeddings, disc: PairDiscriminator,
                      materialize_limit=PAIR_MATERIALIZE_LIMIT) -> Tensor:
    """All-pairs probabilities straight from embeddings.

    For b <= materialize_limit the full pairing tensor is built in one piece;
    beyond that the rows are processed in tiles. Results are bit-identical
    either way.
    """
    e = ag.as_tensor(embeddings)
    b = e.shape[0]
    if b <= materialize_limit:
        return cmd_forward(pair_concat(e), disc)
    tiles = []
    for r0 in range(0, b, materialize_limit):
        r1 = min(r0 + materialize_limit, b)
        rows = ag.make_op(e.data[r0:r1].copy(), (e,), _row_slice_backward(e, r0, r1))
        tiles.append(cmd_forward(pair_concat_cross(rows, e), disc))
    return _vstack(tiles)


def _row_slice_backward(src, r0, r1):
    def backward(g):
        gs = np.zeros_like(src.data)
        gs[r0:r1] = g
        ag.accumulate(src, gs)
    return backward


def _vstack(tiles):
    datas = [t.data for t in tiles]
    offsets = np.cumsum([0] + [d.shape[0] for d in datas])

    def backward(g):
        for t, o0, o1 in zip(tiles, offsets[:-1], offsets[1:]):
            ag.accumulate(t, g[o0:o1])

    return ag.make_op(np.concatenate(datas, axis=0), tuple(tiles), backward)


def pair_mask(b, policy="offdiag", modalities=None) -> np.ndarray:
    """Boolean matrix of slots included in the discriminator loss."""
    if policy not in MASK_POLICIES:
        raise ValueError(f"unknown mask policy {policy!r}, expected one of {MASK_POLICIES}")
    if policy == "all":
        return np.ones((b, b), dtype=bool)
    if policy == "offdiag":
        return ~np.eye(b, dtype=bool)
    if modalities is None:
        raise ValueError("mask policy 'cross-modal' needs modality tags")
    mods = np.asarray(modalities)
    return mods[:, None] != mods[None, :]


def cmd_loss(probs, labels, mask_policy="offdiag", modalities=None) -> Tensor:
    """Binary cross-entropy over the included pair slots.

    Self pairs are free positives, so the diagonal is excluded by default;
    'all' keeps it, 'cross-modal' additionally drops same-modality pairs.
    """
    probs = ag.as_tensor(probs)
    labels = np.asarray(labels, dtype=np.float64)
    if probs.data.ndim != 2 or probs.shape != labels.shape:
        raise ValueError(f"cmd_loss: probability shape {probs.shape} vs labels {labels.shape}")
    mask = pair_mask(probs.shape[0], mask_policy, modalities)
    return ag.binary_cross_entropy(probs, labels, mask=mask)


def score_pairs(a, b, disc: PairDiscriminator) -> np.ndarray:
    """Forward-only probability matrix for rows of ``a`` against rows of ``b``."""
    pairs = pair_concat_cross(Tensor(np.asarray(a)), Tensor(np.asarray(b)))
    return cmd_forward(pairs, disc).data


def cmd_score(e1, e2, disc: PairDiscriminator) -> float:
    """Same-identity probability for one ordered pair, concat(e1, e2).

    Bit-identical to the (i, j) slot of a full-batch forward; note the
    concatenation order matters, so score(e1, e2) and score(e2, e1) may
    differ. Evaluation symmetrizes by averaging the two.
    """
    e1 = np.asarray(e1).reshape(1, -1)
    e2 = np.asarray(e2).reshape(1, -1)
    if e1.shape[1] != e2.shape[1]:
        raise ValueError(f"cmd_score: embedding widths differ: {e1.shape[1]} vs {e2.shape[1]}")
    return float(score_pairs(e1, e2, disc)[0, 0])


def symmetrized_scores(probes, gallery, disc: PairDiscriminator) -> np.ndarray:
    """(score(p, g) + score(g, p)) / 2 for every probe/gallery pair."""
    forward = score_pairs(probes, gallery, disc)
    backward = score_pairs(gallery, probes, disc)
    return (forward + backward.T) / 2.0
