"""Two-stage optimization pipeline with Adam and plateau scheduling.

Stage one trains the trunk with a softmax head and cross-entropy on
modality-mixed, class-balanced batches. Stage two swaps the head, then
optimizes the blended margin loss on the embeddings together with the pair
discriminator's binary cross-entropy; one Adam instance updates the full
parameter set. The learning rate drops by a fixed factor whenever the epoch
loss stops improving and never increases; runs stop at the epoch cap or once
the rate hits its floor.

Everything downstream of the seeds is deterministic, so reruns produce
bit-identical checkpoints; the wall-time column of the log is the one
exception and is documented as such.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import checkpoint as ckpt
from .backbone import BackboneConfig, Network, build_pretrain_network, load_network, save_network, swap_head
from .data import Dataset, SamplerConfig, epoch_batches
from .discriminator import cmd_loss, cmd_probabilities, genuine_labels
from .evaluation import ProtocolConfig, evaluate
from .losses import LabeledBatch, LossConfig, loss_by_name


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class OptimConfig:
    lr: float = 3e-4
    max_epochs: int = 60
    pretrain_epochs: int | None = None   # stage-one cap; falls back to max_epochs
    patience: int = 5
    plateau_factor: float = 0.8
    rel_tol: float = 1e-3
    min_lr: float = 1e-6

    def __post_init__(self):
        if self.lr <= 0 or self.min_lr <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must be in (0, 1)")
        if self.patience < 1 or self.max_epochs < 1:
            raise ValueError("patience and max_epochs must be >= 1")
        if self.pretrain_epochs is not None and self.pretrain_epochs < 1:
            raise ValueError("pretrain_epochs must be >= 1")

    def pretrain_variant(self) -> "OptimConfig":
        if self.pretrain_epochs is None:
            return self
        return OptimConfig(lr=self.lr, max_epochs=self.pretrain_epochs,
                           patience=self.patience, plateau_factor=self.plateau_factor,
                           rel_tol=self.rel_tol, min_lr=self.min_lr)


@dataclass
class AdamState:
    """Per-parameter first/second moment accumulators plus the step counter."""
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params, lr):
        state = cls(lr=lr)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(params: dict, state: AdamState):
    """Bias-corrected Adam update, in place, in sorted parameter order."""
    state.step += 1
    t = state.step
    for name in sorted(params):
        p = params[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if np.isnan(g).any():
            raise TrainingDiverged(f"NaN gradient in parameter {name!r} at step {t}")
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - state.beta1) * (g - m)
        v += (1.0 - state.beta2) * (g * g - v)
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)


@dataclass
class PlateauState:
    """Reduce-on-plateau bookkeeping; the rate only ever moves down."""
    lr: float
    patience: int = 5
    factor: float = 0.8
    rel_tol: float = 1e-3
    min_lr: float = 1e-6
    best: float = float("inf")
    since_improvement: int = 0

    def at_floor(self):
        return self.lr <= self.min_lr


def plateau_update(state: PlateauState, metric: float) -> float:
    """Track the best metric; after ``patience`` stale epochs cut lr by the factor."""
    metric = float(metric)
    if not np.isfinite(metric):
        raise TrainingDiverged(f"non-finite epoch metric {metric}")
    if metric < state.best * (1.0 - state.rel_tol):
        state.best = metric
        state.since_improvement = 0
    else:
        state.since_improvement += 1
        if state.since_improvement >= state.patience:
            state.lr = max(state.lr * state.factor, state.min_lr)
            state.since_improvement = 0
    return state.lr


TRAINLOG_HEADER = ["epoch", "l_uc", "l_cmd", "total", "lr", "seconds"]


class TrainLog:
    """Append-only per-epoch records, serialized as CSV.

    The header comment line carries the seed, the config hash and the loss
    weights. The ``seconds`` column is measured wall time and is the only
    nondeterministic field in any artifact.
    """

    def __init__(self, meta=None):
        self.meta = dict(meta or {})
        self.rows = []

    def add(self, epoch, l_uc, l_cmd, total, lr, seconds):
        self.rows.append({"epoch": epoch, "l_uc": l_uc, "l_cmd": l_cmd,
                          "total": total, "lr": lr, "seconds": seconds})

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as f:
            tags = " ".join(f"{k}={self.meta[k]}" for k in sorted(self.meta))
            f.write(f"# {tags}\n")
            writer = csv.DictWriter(f, fieldnames=TRAINLOG_HEADER)
            writer.writeheader()
            for row in self.rows:
                writer.writerow(row)


def zero_grads(params):
    for p in params.values():
        p.grad = None


def _remap_classes(class_ids):
    uids = np.unique(class_ids)
    lookup = {int(c): i for i, c in enumerate(uids)}
    return uids, lookup


def _run_epochs(net, ds, sampler_cfg, optim_cfg, batch_loss, log, start_epoch=0,
                adam=None, plateau=None):
    """Shared epoch loop: batches -> loss -> backward -> adam -> plateau."""
    adam = adam or AdamState.for_params(net.params, optim_cfg.lr)
    plateau = plateau or PlateauState(lr=optim_cfg.lr, patience=optim_cfg.patience,
                                      factor=optim_cfg.plateau_factor,
                                      rel_tol=optim_cfg.rel_tol, min_lr=optim_cfg.min_lr)
    for epoch in range(start_epoch, optim_cfg.max_epochs):
        t0 = time.perf_counter()
        sums = np.zeros(3)
        batches = epoch_batches(ds, sampler_cfg, epoch)
        for batch in batches:
            total, l_uc, l_cmd = batch_loss(net, batch)
            if not np.isfinite(total.item()):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            zero_grads(net.params)
            total.backward()
            adam.lr = plateau.lr
            adam_step(net.params, adam)
            sums += (l_uc, l_cmd, total.item())
        means = sums / len(batches)
        lr_used = plateau.lr
        plateau_update(plateau, means[2])
        log.add(epoch, means[0], means[1], means[2], lr_used,
                round(time.perf_counter() - t0, 3))
        if plateau.at_floor():
            break
    return net, adam, plateau


def _train_state_meta(adam, plateau, next_epoch):
    return {"step": adam.step, "lr": plateau.lr, "best": plateau.best,
            "since_improvement": plateau.since_improvement, "next_epoch": next_epoch}


def _optim_tensors(adam):
    out = {}
    for name in sorted(adam.m):
        out[f"optim.m.{name}"] = adam.m[name]
        out[f"optim.v.{name}"] = adam.v[name]
    return out


def _restore_train_state(net, extra, meta, optim_cfg):
    ts = meta["train_state"]
    adam = AdamState(lr=ts["lr"], step=ts["step"])
    for name in net.params:
        adam.m[name] = extra[f"optim.m.{name}"].copy()
        adam.v[name] = extra[f"optim.v.{name}"].copy()
    plateau = PlateauState(lr=ts["lr"], patience=optim_cfg.patience,
                           factor=optim_cfg.plateau_factor, rel_tol=optim_cfg.rel_tol,
                           min_lr=optim_cfg.min_lr, best=ts["best"],
                           since_improvement=ts["since_improvement"])
    return adam, plateau, ts["next_epoch"]


def pretrain(ds: Dataset, backbone_cfg: BackboneConfig, sampler_cfg: SamplerConfig,
             optim_cfg: OptimConfig, seed=0, log_meta=None, resume=None):
    """Stage one: cross-entropy training of the classification head.

    Both modalities are classified under the same class label; batches come
    from the class-balanced sampler. Returns (network, TrainLog, train_state)
    where train_state allows a bit-exact resume.
    """
    uids, lookup = _remap_classes(ds.class_ids)
    if backbone_cfg.num_classes != len(uids):
        raise ValueError(f"backbone num_classes={backbone_cfg.num_classes} but dataset "
                         f"has {len(uids)} classes")
    if resume is None:
        net = build_pretrain_network(backbone_cfg, seed=seed)
        adam = plateau = None
        start_epoch = 0
    else:
        net, meta, extra = resume
        if net.stage != ckpt.STAGE_PRETRAINED:
            raise ValueError(f"resume checkpoint has stage {net.stage!r}, expected pretrained")
        adam, plateau, start_epoch = _restore_train_state(net, extra, meta, optim_cfg)

    def batch_loss(net, batch):
        labels = np.array([lookup[int(c)] for c in batch.class_ids])
        loss = ag.softmax_cross_entropy(net.classify(batch.features), labels)
        return loss, 0.0, 0.0

    log = TrainLog(meta=dict(log_meta or {}, stage="pretrain", seed=seed))
    net, adam, plateau = _run_epochs(net, ds, sampler_cfg, optim_cfg, batch_loss, log,
                                     start_epoch=start_epoch, adam=adam, plateau=plateau)
    state = {"adam": adam, "plateau": plateau, "next_epoch": log.rows[-1]["epoch"] + 1 if log.rows else start_epoch}
    return net, log, state


def classification_accuracy(net: Network, ds: Dataset) -> float:
    uids, lookup = _remap_classes(ds.class_ids)
    logits = net.classify(ds.features).data
    pred = logits.argmax(axis=1)
    truth = np.array([lookup[int(c)] for c in ds.class_ids])
    return float((pred == truth).mean())


def train_hfr(ds: Dataset, pretrained: Network, loss_cfg: LossConfig,
              sampler_cfg: SamplerConfig, optim_cfg: OptimConfig, seed=0,
              loss_kind="unit-class", with_disc=True, mask_policy="offdiag",
              embedding_dim=None, disc_hidden=None, log_meta=None, resume=None):
    """Stage two: joint margin + discriminator training from a pretrained trunk.

    Per batch the embeddings feed the selected margin loss and, when the
    discriminator is enabled, the all-pairs probability head; the combined
    objective is mu * margin_loss + discriminator_loss under one optimizer.
    """
    loss_fn = loss_by_name(loss_kind)
    if resume is None:
        kwargs = {}
        if disc_hidden is not None:
            kwargs["disc_hidden"] = tuple(disc_hidden)
        net = swap_head(pretrained, seed=seed, embedding_dim=embedding_dim,
                        with_disc=with_disc, **kwargs)
        adam = plateau = None
        start_epoch = 0
    else:
        net, meta, extra = resume
        if net.stage != ckpt.STAGE_HFR:
            raise ValueError(f"resume checkpoint has stage {net.stage!r}, expected hfr")
        adam, plateau, start_epoch = _restore_train_state(net, extra, meta, optim_cfg)

    def batch_loss(net, batch):
        emb = net.embed(batch.features)
        lb = LabeledBatch(emb, batch.class_ids, batch.modalities)
        l_uc = loss_fn(lb, loss_cfg)
        if net.disc is None:
            return l_uc, l_uc.item(), 0.0
        probs = cmd_probabilities(emb, net.disc)
        labels = genuine_labels(batch.class_ids)
        l_cmd = cmd_loss(probs, labels, mask_policy, modalities=batch.modalities)
        total = ag.add(ag.scale(l_uc, loss_cfg.mu), l_cmd)
        return total, l_uc.item(), l_cmd.item()

    log = TrainLog(meta=dict(log_meta or {}, stage="hfr", seed=seed, loss=loss_kind,
                             alpha=loss_cfg.alpha, beta=loss_cfg.beta, mu=loss_cfg.mu))
    net, adam, plateau = _run_epochs(net, ds, sampler_cfg, optim_cfg, batch_loss, log,
                                     start_epoch=start_epoch, adam=adam, plateau=plateau)
    state = {"adam": adam, "plateau": plateau,
             "next_epoch": log.rows[-1]["epoch"] + 1 if log.rows else start_epoch}
    return net, log, state


def save_training_checkpoint(net, path, state, meta=None):
    """Checkpoint with optimizer moments so training can resume bit-exactly."""
    full = dict(meta or {})
    full["train_state"] = _train_state_meta(state["adam"], state["plateau"], state["next_epoch"])
    save_network(net, path, meta=full, extra_tensors=_optim_tensors(state["adam"]))


# ---------------------------------------------------------------------------
# ablation matrices


LOSS_MATRIX_CELLS = (
    ("Exp. 1: Triplet Loss", "triplet", False),
    ("Exp. 2: Class mean Loss", "class-mean", False),
    ("Exp. 3: Class mean Loss + CMD block", "class-mean", True),
    ("Exp. 4: Unit-Class Loss", "unit-class", False),
    ("Exp. 5: Triplet Loss + CMD block", "triplet", True),
    ("Exp. 6: Proposed (Unit-Class Loss + CMD block)", "unit-class", True),
)

MARGIN_GRID_ALPHAS = (0.5, 1.0, 2.0)
MARGIN_GRID_BETAS = (0.2, 0.5, 0.8)


@dataclass
class AblationSpec:
    kind: str = "loss-matrix"            # or "margin-grid"
    seeds: tuple = (0,)
    alphas: tuple = MARGIN_GRID_ALPHAS
    betas: tuple = MARGIN_GRID_BETAS

    def __post_init__(self):
        if self.kind not in ("loss-matrix", "margin-grid"):
            raise ValueError("ablation kind must be 'loss-matrix' or 'margin-grid'")
        self.seeds = tuple(int(s) for s in self.seeds)
        self.alphas = tuple(float(a) for a in self.alphas)
        self.betas = tuple(float(b) for b in self.betas)

    def cells(self, base: LossConfig):
        if self.kind == "loss-matrix":
            return [{"name": name, "loss": kind, "with_disc": disc,
                     "cfg": LossConfig(alpha=base.alpha, beta=base.beta, mu=base.mu,
                                       metric=base.metric)}
                    for name, kind, disc in LOSS_MATRIX_CELLS]
        return [{"name": f"alpha={a:g} beta={b:g}", "loss": "unit-class", "with_disc": True,
                 "cfg": LossConfig(alpha=a, beta=b, mu=base.mu, metric=base.metric)}
                for a in self.alphas for b in self.betas]


def resolve_workers(requested, n_tasks):
    """Worker-process count for ablation cells.

    ``requested=None`` means "as many as the environment allows": the
    UCHFR_THREADS env var caps parallelism, and without it runs stay
    sequential. An explicit request is likewise capped by the env var.
    """
    raw = os.environ.get("UCHFR_THREADS")
    env_cap = None
    if raw is not None:
        try:
            env_cap = int(raw)
        except ValueError as exc:
            raise ValueError(f"UCHFR_THREADS must be an integer, got {raw!r}") from exc
    if requested is None:
        allowed = env_cap if env_cap is not None else 1
    else:
        allowed = min(requested, env_cap) if env_cap is not None else requested
    return max(1, min(n_tasks, allowed))


def _ablation_cell_task(payload):
    """One (seed, cell) training+evaluation; must stay importable for process pools."""
    (cell, seed, pretrained_path, train_ds, eval_ds,
     sampler_cfg, optim_cfg, protocol_cfg, embedding_dim, disc_hidden) = payload
    pretrained, _, _ = load_network(pretrained_path)
    sampler = SamplerConfig(batch_size=sampler_cfg.batch_size,
                            classes_per_batch=sampler_cfg.classes_per_batch,
                            samples_per_class=sampler_cfg.samples_per_class, seed=seed)
    net, _, _ = train_hfr(train_ds, pretrained, cell["cfg"], sampler, optim_cfg,
                          seed=seed, loss_kind=cell["loss"], with_disc=cell["with_disc"],
                          embedding_dim=embedding_dim, disc_hidden=disc_hidden)
    report = evaluate(net, eval_ds, protocol_cfg)
    m = report.modes["Embd"]
    return {"rank1": m.rank1,
            "tpr_far_1pct": m.tpr_at_far.get("0.01"),
            "tpr_far_0p1pct": m.tpr_at_far.get("0.001")}


def run_ablation(train_ds: Dataset, eval_ds: Dataset, spec: AblationSpec,
                 base_loss: LossConfig, backbone_cfg: BackboneConfig,
                 sampler_cfg: SamplerConfig, optim_cfg: OptimConfig,
                 protocol_cfg: ProtocolConfig, out_dir, embedding_dim=None,
                 disc_hidden=None, workers=None):
    """Train and score every cell of the requested matrix.

    One pretraining run per seed is shared by all cells of that seed; each
    cell then runs the second stage from that trunk and reports embedding-mode
    metrics averaged over seeds. A failing cell is recorded with its error and
    the remaining cells continue. Deterministic: same spec and seeds give an
    identical table.
    """
    from pathlib import Path
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    pretrained_paths = {}
    for seed in spec.seeds:
        sampler = SamplerConfig(batch_size=sampler_cfg.batch_size,
                                classes_per_batch=sampler_cfg.classes_per_batch,
                                samples_per_class=sampler_cfg.samples_per_class, seed=seed)
        net, _, state = pretrain(train_ds, backbone_cfg, sampler,
                                 optim_cfg.pretrain_variant(), seed=seed)
        path = out_dir / f"pretrained_seed{seed}.uchfr"
        save_training_checkpoint(net, path, state, meta={"seed": seed})
        pretrained_paths[seed] = path

    cells = spec.cells(base_loss)
    tasks = []
    for ci, cell in enumerate(cells):
        for seed in spec.seeds:
            tasks.append((ci, (cell, seed, pretrained_paths[seed], train_ds, eval_ds,
                               sampler_cfg, optim_cfg, protocol_cfg,
                               embedding_dim, disc_hidden)))
    workers = resolve_workers(workers, len(tasks))

    results = {}
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_ablation_cell_task, payload) for _, payload in tasks]
            for idx, fut in enumerate(futures):
                try:
                    results[idx] = fut.result()
                except Exception as exc:  # cell failures are recorded, not fatal
                    results[idx] = {"error": f"{type(exc).__name__}: {exc}"}
    else:
        for idx, (_, payload) in enumerate(tasks):
            try:
                results[idx] = _ablation_cell_task(payload)
            except Exception as exc:
                results[idx] = {"error": f"{type(exc).__name__}: {exc}"}

    rows = []
    for ci, cell in enumerate(cells):
        per_seed = [results[idx] for idx, (cell_idx, _) in enumerate(tasks) if cell_idx == ci]
        errors = [r["error"] for r in per_seed if "error" in r]
        row = {"experiment": cell["name"], "alpha": cell["cfg"].alpha,
               "beta": cell["cfg"].beta, "loss": cell["loss"],
               "cmd": "on" if cell["with_disc"] else "off", "n_seeds": len(spec.seeds)}
        if errors:
            row.update({"rank1": "", "tpr_far_1pct": "", "tpr_far_0p1pct": "",
                        "error": "; ".join(errors)})
        else:
            def mean_of(key):
                vals = [r[key] for r in per_seed]
                if any(v is None for v in vals):
                    return "undefined"
                return float(np.mean(vals))
            row.update({"rank1": mean_of("rank1"),
                        "tpr_far_1pct": mean_of("tpr_far_1pct"),
                        "tpr_far_0p1pct": mean_of("tpr_far_0p1pct"), "error": ""})
        rows.append(row)
    return rows


def write_ablation_csv(rows, path):
    fields = ["experiment", "alpha", "beta", "loss", "cmd", "rank1",
              "tpr_far_1pct", "tpr_far_0p1pct", "n_seeds", "error"]
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
