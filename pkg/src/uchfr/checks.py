"""Finite-difference verification suite over every differentiable piece.

One place defines the checks; the test suite and the command line both run
it. Each named check draws a handful of random float64 instances and compares
analytic gradients against central differences. Hinge-bearing losses are
checked away from their kinks: batches are resampled until every hinge
argument and every hardest-mean selection sits at least ``KINK_MARGIN`` from
a switch point, far beyond the stencil step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import discriminator as dsc
from . import losses as ls
from .autograd import Tensor
from .backbone import SEBlock

KINK_MARGIN = 1e-3
FD_STEP = 1e-5
DEFAULT_TOL = 1e-4


@dataclass
class CheckOutcome:
    name: str
    instances: int
    worst_rel_err: float
    tol: float
    passed: bool

    def row(self):
        status = "pass" if self.passed else "FAIL"
        return f"{self.name:<38} {self.instances:>3}x  max rel err {self.worst_rel_err:.3e}  {status}"


def _unit_rows(rng, b, d):
    e = rng.standard_normal((b, d))
    return e / np.linalg.norm(e, axis=1, keepdims=True)


def random_contract_batch(rng, classes=3, per_modality=2, dim=6):
    """Random unit-embedding batch satisfying the sampler contract."""
    rows, ids, mods = [], [], []
    for c in range(classes):
        for m in ("A", "B"):
            for _ in range(per_modality):
                rows.append(_unit_rows(rng, 1, dim)[0])
                ids.append(c)
                mods.append(m)
    return ls.LabeledBatch(Tensor(np.array(rows)), np.array(ids), np.array(mods))


def _hinge_args_clear(batch, cfg, margin):
    """True when every hinge argument and mean-argmin is at least margin from a kink."""
    triplets = ls.mine_triplets(batch.class_ids, batch.modalities)
    sample = ls._sample_gaps(batch, cfg.metric, triplets).data
    mean_gaps = ls._anchor_mean_gaps(batch, cfg.metric).data[:, 0]
    a_idx = triplets[0]
    args = [sample + cfg.alpha,
            mean_gaps + cfg.alpha,
            (1 - cfg.beta) * mean_gaps[a_idx] + cfg.beta * sample + cfg.alpha]
    if any(np.any(np.abs(a) < margin) for a in args):
        return False
    # hardest off-class mean must be a clear argmin per anchor
    uids, means = ls.class_means(batch)
    dm = ls.distance_matrix(batch.embeddings, means, cfg.metric).data.copy()
    own = np.searchsorted(uids, batch.class_ids)
    dm[np.arange(len(batch)), own] = np.inf
    dm.sort(axis=1)
    return bool(np.all(dm[:, 1] - dm[:, 0] > margin))


def sample_kink_free_batch(rng, cfg, classes=3, per_modality=2, dim=6,
                           margin=KINK_MARGIN, max_tries=500):
    for _ in range(max_tries):
        batch = random_contract_batch(rng, classes, per_modality, dim)
        if _hinge_args_clear(batch, cfg, margin):
            return batch
    raise RuntimeError("could not sample a kink-free batch")


def _rebatch(batch, emb_tensor):
    return ls.LabeledBatch(emb_tensor, batch.class_ids, batch.modalities)


def _disc_relu_margin(e, disc):
    """Smallest |pre-activation| across the discriminator's relu layers."""
    d = e.shape[1]
    flat = np.empty((e.shape[0] ** 2, 2 * d))
    flat[:, :d] = np.repeat(e, e.shape[0], axis=0)
    flat[:, d:] = np.tile(e, (e.shape[0], 1))
    h, margin = flat, np.inf
    for w, b in disc.layers[:-1]:
        z = h @ w.data + b.data
        margin = min(margin, float(np.abs(z).min()))
        h = np.maximum(z, 0.0)
    return margin


def sample_kink_free_disc(rng, e, pair_dim, hidden, margin=KINK_MARGIN, max_tries=200):
    """Draw a discriminator whose relu pre-activations stay clear of 0 on ``e``."""
    for _ in range(max_tries):
        disc = dsc.PairDiscriminator.initialize(pair_dim, hidden=hidden,
                                                seed=int(rng.integers(1 << 30)), dtype=np.float64)
        if _disc_relu_margin(e, disc) > margin:
            return disc
    raise RuntimeError("could not sample a kink-free discriminator")


def run_gradient_suite(instances=10, tol=DEFAULT_TOL, seed=20240, h=FD_STEP):
    """Run every check; returns a list of CheckOutcome, one per named check."""
    outcomes = []

    def check(name, make_case):
        worst = 0.0
        for k in range(instances):
            rng = np.random.default_rng([seed, len(outcomes), k])
            f, x = make_case(rng)
            res = ag.gradcheck(f, x, tol=tol, h=h)
            worst = max(worst, res.max_rel_err)
        outcomes.append(CheckOutcome(name, instances, worst, tol, worst < tol))

    # --- elementary operations -------------------------------------------
    def case_matmul_a(rng):
        b = Tensor(rng.standard_normal((4, 3)))
        w = Tensor(rng.standard_normal(12))
        return (lambda a: ag.sum_all(ag.mul(ag.reshape(ag.matmul(a, b), (12,)), w)),
                rng.standard_normal((4, 4)))
    check("matmul (left operand)", case_matmul_a)

    def case_matmul_b(rng):
        a = Tensor(rng.standard_normal((4, 4)))
        w = Tensor(rng.standard_normal(12))
        return (lambda b: ag.sum_all(ag.mul(ag.reshape(ag.matmul(a, b), (12,)), w)),
                rng.standard_normal((4, 3)))
    check("matmul (right operand)", case_matmul_b)

    def case_add(rng):
        other = Tensor(rng.standard_normal(6))
        return lambda t: ag.sum_all(ag.mul(ag.add(t, other), ag.add(t, 0.5))), rng.standard_normal(6)
    check("add", case_add)

    def case_sub(rng):
        other = Tensor(rng.standard_normal(6))
        return lambda t: ag.sum_all(ag.mul(ag.sub(t, other), t)), rng.standard_normal(6)
    check("sub", case_sub)

    def case_mul(rng):
        other = Tensor(rng.standard_normal(6))
        return lambda t: ag.sum_all(ag.mul(ag.mul(t, other), t)), rng.standard_normal(6)
    check("mul", case_mul)

    def case_scale(rng):
        return lambda t: ag.sum_all(ag.scale(ag.mul(t, t), -1.7)), rng.standard_normal(6)
    check("scale", case_scale)

    def case_relu(rng):
        x = rng.standard_normal(12)
        x = np.where(np.abs(x) < KINK_MARGIN, x + 4 * KINK_MARGIN, x)
        w = Tensor(rng.standard_normal(12))
        return lambda t: ag.sum_all(ag.mul(ag.relu(t), w)), x
    check("relu (off-kink)", case_relu)

    def case_sigmoid(rng):
        w = Tensor(rng.standard_normal(8))
        return lambda t: ag.sum_all(ag.mul(ag.sigmoid(t), w)), rng.standard_normal(8)
    check("sigmoid", case_sigmoid)

    def case_sqrt(rng):
        return lambda t: ag.sum_all(ag.sqrt(t)), rng.uniform(0.5, 3.0, size=7)
    check("sqrt", case_sqrt)

    def case_l2_normalize(rng):
        w = Tensor(rng.standard_normal((3, 5)))
        return lambda t: ag.sum_all(ag.mul(ag.l2_normalize(t), w)), rng.standard_normal((3, 5))
    check("l2_normalize", case_l2_normalize)

    def case_add_bias(rng):
        x = Tensor(rng.standard_normal((4, 3)))
        return lambda t: ag.sum_all(ag.mul(ag.add_bias(x, t), ag.add_bias(x, t))), rng.standard_normal(3)
    check("add_bias", case_add_bias)

    def case_gather(rng):
        rows = rng.integers(0, 4, size=6)
        cols = rng.integers(0, 3, size=6)
        w = Tensor(rng.standard_normal(6))
        return lambda t: ag.sum_all(ag.mul(ag.gather2d(t, rows, cols), w)), rng.standard_normal((4, 3))
    check("gather2d", case_gather)

    def case_pairwise(rng):
        b = Tensor(rng.standard_normal((3, 4)))
        return lambda t: ag.sum_all(ag.sqrt(ag.pairwise_sqdist(t, b))), rng.standard_normal((5, 4))
    check("pairwise_sqdist + sqrt", case_pairwise)

    def case_softmax_ce(rng):
        labels = rng.integers(0, 4, size=5)
        return lambda t: ag.softmax_cross_entropy(t, labels), rng.standard_normal((5, 4))
    check("softmax_cross_entropy", case_softmax_ce)

    def case_bce(rng):
        y = rng.integers(0, 2, size=9).astype(float)
        return lambda t: ag.binary_cross_entropy(t, y), rng.uniform(0.05, 0.95, size=9)
    check("binary_cross_entropy", case_bce)

    # --- structured blocks -------------------------------------------------
    def case_conv(rng):
        w = Tensor(rng.standard_normal((3, 3, 1, 2)))
        b = Tensor(rng.standard_normal(2))
        return lambda t: ag.sum_all(ag.sigmoid(ag.conv2d(t, w, b))), rng.standard_normal((2, 6, 6, 1))
    check("conv2d", case_conv)

    def case_pool(rng):
        return lambda t: ag.sum_all(ag.mul(ag.avg_pool2d(t, 2), ag.avg_pool2d(t, 2))), \
            rng.standard_normal((2, 4, 4, 3))
    check("avg_pool2d", case_pool)

    def case_se_vector(rng):
        c = 6
        se = SEBlock(Tensor(rng.standard_normal((c, 3))), Tensor(rng.standard_normal((3, c))))
        w = Tensor(rng.standard_normal((4, c)))
        return lambda t: ag.sum_all(ag.mul(se(t), w)), rng.standard_normal((4, c))
    check("se_block (features)", case_se_vector)

    def case_se_image(rng):
        c = 4
        se = SEBlock(Tensor(rng.standard_normal((c, 2))), Tensor(rng.standard_normal((2, c))))
        return lambda t: ag.sum_all(ag.mul(ag.mean_spatial(se(t)), ag.mean_spatial(se(t)))), \
            rng.standard_normal((2, 3, 3, c))
    check("se_block (feature maps)", case_se_image)

    def case_se_weights(rng):
        c = 6
        x = Tensor(rng.standard_normal((4, c)))
        w2 = Tensor(rng.standard_normal((3, c)))
        w = Tensor(rng.standard_normal((4, c)))
        return (lambda t: ag.sum_all(ag.mul(SEBlock(t, w2)(x), w)), rng.standard_normal((c, 3)))
    check("se_block (gate weights)", case_se_weights)

    # --- the three losses ---------------------------------------------------
    def loss_case(kind, metric):
        def make(rng):
            cfg = ls.LossConfig(alpha=0.7, beta=0.4, metric=metric)
            batch = sample_kink_free_batch(rng, cfg)
            fn = ls.loss_by_name(kind)
            return lambda t: fn(_rebatch(batch, t), cfg), batch.embeddings.data.copy()
        return make

    for kind in ("triplet", "class-mean", "unit-class"):
        check(f"{kind} loss (cosine)", loss_case(kind, "cosine"))
    check("unit-class loss (l2)", loss_case("unit-class", "l2"))

    # --- full discriminator path --------------------------------------------
    def case_cmd_embeddings(rng):
        d = 4
        e = _unit_rows(rng, 5, d)
        disc = sample_kink_free_disc(rng, e, 2 * d, hidden=(6, 4))
        ids = np.array([0, 0, 1, 1, 2])
        labels = dsc.genuine_labels(ids)
        return (lambda t: dsc.cmd_loss(dsc.cmd_forward(dsc.pair_concat(t), disc), labels), e)
    check("cmd path (embeddings)", case_cmd_embeddings)

    def case_cmd_weights(rng):
        d = 4
        ev = _unit_rows(rng, 5, d)
        disc = sample_kink_free_disc(rng, ev, 2 * d, hidden=(6, 4))
        e = Tensor(ev)
        labels = dsc.genuine_labels(np.array([0, 0, 1, 1, 2]))

        def f(t):
            layers = [(t, disc.layers[0][1])] + disc.layers[1:]
            return dsc.cmd_loss(dsc.cmd_forward(dsc.pair_concat(e), dsc.PairDiscriminator(layers)), labels)
        return f, disc.layers[0][0].data.copy()
    check("cmd path (dense weights)", case_cmd_weights)

    # --- combined training objective -----------------------------------------
    def case_combined(rng):
        cfg = ls.LossConfig(alpha=0.7, beta=0.4, mu=0.8)
        batch = sample_kink_free_batch(rng, cfg, dim=4)
        disc = sample_kink_free_disc(rng, batch.embeddings.data, 8, hidden=(6, 4))
        labels = dsc.genuine_labels(batch.class_ids)

        def f(e):
            rb = _rebatch(batch, e)
            l_uc = ls.unit_class_loss(rb, cfg)
            l_cmd = dsc.cmd_loss(dsc.cmd_forward(dsc.pair_concat(e), disc), labels)
            return ag.add(ag.scale(l_uc, cfg.mu), l_cmd)
        return f, batch.embeddings.data.copy()
    check("combined objective (embeddings)", case_combined)

    return outcomes


def format_report(outcomes):
    lines = [o.row() for o in outcomes]
    n_fail = sum(not o.passed for o in outcomes)
    lines.append(f"{len(outcomes)} checks, {len(outcomes) - n_fail} passed, {n_fail} failed")
    return "\n".join(lines)
