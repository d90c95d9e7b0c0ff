"""Pairwise-ranking matrix-factorization trainer with pluggable fairness hooks.

The base learner optimizes the pairwise logistic (BPR) loss over sampled
(user, positive, negative) triples with SGD.  Fairness enters through three
independent hook slots:

* ``weight_provider``: per-sample loss weights (static ones, inverse group
  popularity, or dual-mirror-descent weights favouring worst-off groups),
* ``group_sampler``: positive sampling (uniform, or softmax over running
  group-loss averages),
* ``regularizer``: a differentiable penalty on batch score statistics.

Training is single-threaded and bit-reproducible for a fixed seed; hooks
observe batch-level statistics.  Hooks act on item groups (a user-group
switch is a documented extension point).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml

from .core import Catalog, DualState, InteractionLog, ScoreMatrix
from .errors import (
    DivergenceError,
    InvariantViolation,
    IoError,
    UnknownEntity,
    VersionError,
    ZeroPopularity,
)
from .ingest import SplitDataset

WEIGHT_PROVIDERS = ("static", "ips", "fairdual")
GROUP_SAMPLERS = ("uniform", "minmax")
REGULARIZERS = ("none", "focf", "reg")


@dataclass
class TrainConfig:
    """Hyperparameters of the pairwise trainer."""

    dim: int = 32
    epochs: int = 30
    lr: float = 0.05
    l2: float = 1e-4
    batch_size: int = 256
    seed: int = 42
    use_item_bias: bool = False
    ips_smooth: float = 0.0

    def __post_init__(self) -> None:
        if self.dim < 1 or self.epochs < 1 or self.batch_size < 1:
            raise InvariantViolation("dim, epochs, and batch_size must be positive")
        if self.lr <= 0 or self.l2 < 0:
            raise InvariantViolation("lr must be positive and l2 non-negative")


@dataclass
class TrainHooks:
    """Hook selection: exactly one choice per slot plus hook hyperparameters."""

    weight_provider: str = "static"
    group_sampler: str = "uniform"
    regularizer: str = "none"
    reg_weight: float = 0.0
    dual_budget: float = 1.0
    dual_step: float = 0.1
    sampler_step: float = 1.0

    def __post_init__(self) -> None:
        if self.weight_provider not in WEIGHT_PROVIDERS:
            raise InvariantViolation(f"unknown weight provider {self.weight_provider!r}")
        if self.group_sampler not in GROUP_SAMPLERS:
            raise InvariantViolation(f"unknown group sampler {self.group_sampler!r}")
        if self.regularizer not in REGULARIZERS:
            raise InvariantViolation(f"unknown regularizer {self.regularizer!r}")
        if self.reg_weight < 0:
            raise InvariantViolation("reg_weight must be non-negative")


@dataclass
class MFModel:
    """Dot-product factorization model with optional item bias."""

    user_ids: list[str]
    item_ids: list[str]
    user_vecs: np.ndarray
    item_vecs: np.ndarray
    item_bias: np.ndarray | None
    config: TrainConfig
    loss_curve: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._user_index = {u: i for i, u in enumerate(self.user_ids)}
        self._item_index = {i: j for j, i in enumerate(self.item_ids)}
        if self.user_vecs.shape != (len(self.user_ids), self.config.dim):
            raise InvariantViolation("user embedding shape mismatch")
        if self.item_vecs.shape != (len(self.item_ids), self.config.dim):
            raise InvariantViolation("item embedding shape mismatch")

    def score(self, user: str, item: str) -> float:
        ui = self._user_index.get(user)
        ii = self._item_index.get(item)
        if ui is None:
            raise UnknownEntity(f"user {user!r} not in model")
        if ii is None:
            raise UnknownEntity(f"item {item!r} not in model")
        s = float(self.user_vecs[ui] @ self.item_vecs[ii])
        if self.item_bias is not None:
            s += float(self.item_bias[ii])
        return s


# ---------------------------------------------------------------------------
# Hook primitives
# ---------------------------------------------------------------------------


def ips_weights(log: InteractionLog, catalog: Catalog, smooth: float = 0.0) -> dict[str, float]:
    """Inverse group-popularity weights, rescaled to mean 1.

    Popularity of a group is the summed interaction count of its items
    (optionally smoothed by ``smooth`` per item).  A zero-popularity group
    raises :class:`ZeroPopularity`; pass ``smooth=1`` to avoid that.
    """
    pop: dict[str, float] = {item: smooth for item in catalog.items}
    for rec in log.records:
        if rec.item not in pop:
            raise UnknownEntity(f"item {rec.item!r} not in catalog")
        pop[rec.item] += 1.0
    group_pop = {g: 0.0 for g in catalog.groups}
    for item, p in pop.items():
        for g in catalog.item_groups[item]:
            group_pop[g] += p
    for g, p in group_pop.items():
        if p <= 0:
            raise ZeroPopularity(f"group {g!r} has zero popularity (consider smooth=1)")
    raw = {g: 1.0 / p for g, p in group_pop.items()}
    mean = sum(raw.values()) / len(raw)
    return {g: w / mean for g, w in raw.items()}


def fairdual_step(
    state: DualState,
    batch_groups: Sequence[frozenset[str]],
    target_shares: Mapping[str, float] | None = None,
) -> tuple[np.ndarray, DualState]:
    """Dual-mirror-descent re-weighting of one batch.

    The batch is summarised by its per-group share of positive-item
    memberships; prices move multiplicatively toward groups that fell short
    of their target share, then samples are weighted by their member groups'
    normalized prices (``|G| * mu_g / budget``; multi-group items take the
    mean).  A zero budget leaves the state untouched and all weights at 1.
    """
    state.validate(tol=1e-6)
    if not batch_groups:
        raise InvariantViolation("empty batch")
    groups = sorted(state.prices)
    if target_shares is None:
        target_shares = {g: 1.0 / len(groups) for g in groups}

    counts = {g: 0.0 for g in groups}
    total = 0.0
    for gs in batch_groups:
        for g in gs:
            if g not in counts:
                raise UnknownEntity(f"group {g!r} not in dual state")
            counts[g] += 1.0
            total += 1.0
    shares = {g: counts[g] / total for g in groups} if total > 0 else {g: 0.0 for g in groups}

    if state.budget == 0:
        return np.ones(len(batch_groups)), state

    gradient = {g: target_shares[g] - shares[g] for g in groups}
    new_state = state.exp_step(gradient, ascent=True)
    n = len(groups)
    norm_price = {g: n * new_state.prices[g] / new_state.budget for g in groups}
    weights = np.array([float(np.mean([norm_price[g] for g in sorted(gs)])) for gs in batch_groups])
    return weights, new_state


def minmax_sampler_update(
    ema: dict[str, float] | None,
    batch_losses: Mapping[str, float],
    sampler_step: float = 1.0,
) -> tuple[dict[str, float], dict[str, float]]:
    """Update running group-loss averages and return the sampling softmax.

    The EMA initialises to the first observed losses, then follows
    ``0.9 * ema + 0.1 * loss``.  Sampling probabilities are
    ``softmax(sampler_step * ema)``.
    """
    for g, loss in batch_losses.items():
        if not np.isfinite(loss):
            raise InvariantViolation(f"non-finite loss for group {g!r}")
    if ema is None:
        new_ema = dict(batch_losses)
    else:
        new_ema = dict(ema)
        for g, loss in batch_losses.items():
            new_ema[g] = 0.9 * new_ema.get(g, loss) + 0.1 * loss
    groups = sorted(new_ema)
    logits = np.array([sampler_step * new_ema[g] for g in groups])
    logits -= logits.max()
    q = np.exp(logits)
    q /= q.sum()
    return {g: float(q[i]) for i, g in enumerate(groups)}, new_ema


def fairness_penalty(scores_by_group: Mapping[str, np.ndarray], kind: str) -> float:
    """Batch-level score-parity penalty.

    ``reg``: sum of squared differences between group mean scores over all
    group pairs.  ``focf``: sum of absolute deviations of group means from
    their unweighted grand mean.  A single-group batch contributes 0.
    """
    if kind not in ("focf", "reg"):
        raise InvariantViolation(f"unknown penalty kind {kind!r}")
    groups = sorted(scores_by_group)
    if len(groups) < 2:
        return 0.0
    means = np.array([float(np.mean(scores_by_group[g])) for g in groups])
    if kind == "reg":
        total = 0.0
        for a in range(len(groups)):
            for b in range(a + 1, len(groups)):
                total += (means[a] - means[b]) ** 2
        return float(total)
    grand = float(np.mean(means))
    return float(np.sum(np.abs(means - grand)))


def fairness_penalty_grad(scores_by_group: Mapping[str, np.ndarray], kind: str) -> dict[str, np.ndarray]:
    """Analytic gradient of :func:`fairness_penalty` w.r.t. each score."""
    if kind not in ("focf", "reg"):
        raise InvariantViolation(f"unknown penalty kind {kind!r}")
    groups = sorted(scores_by_group)
    grads = {g: np.zeros(len(scores_by_group[g])) for g in groups}
    if len(groups) < 2:
        return grads
    means = {g: float(np.mean(scores_by_group[g])) for g in groups}
    if kind == "reg":
        for g in groups:
            d_mean = sum(2.0 * (means[g] - means[h]) for h in groups if h != g)
            grads[g][:] = d_mean / len(scores_by_group[g])
        return grads
    n = len(groups)
    grand = float(np.mean([means[g] for g in groups]))
    signs = {g: float(np.sign(means[g] - grand)) for g in groups}
    sign_sum = sum(signs.values())
    for g in groups:
        d_mean = signs[g] - sign_sum / n
        grads[g][:] = d_mean / len(scores_by_group[g])
    return grads


def bpr_triple_loss(
    p_u: np.ndarray,
    q_pos: np.ndarray,
    q_neg: np.ndarray,
    weight: float,
    l2: float,
    b_pos: float = 0.0,
    b_neg: float = 0.0,
    use_bias: bool = False,
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray, float, float]:
    """Loss and analytic gradients of a single weighted BPR triple.

    Returns ``(loss, g_pu, g_qpos, g_qneg, g_bpos, g_bneg)``.
    """
    x = float(p_u @ (q_pos - q_neg))
    if use_bias:
        x += b_pos - b_neg
    loss = weight * float(np.logaddexp(0.0, -x))
    reg = l2 * float(p_u @ p_u + q_pos @ q_pos + q_neg @ q_neg)
    if use_bias:
        reg += l2 * (b_pos**2 + b_neg**2)
    sig = float(1.0 / (1.0 + np.exp(x)))  # sigma(-x)
    coef = weight * sig
    g_pu = -coef * (q_pos - q_neg) + 2.0 * l2 * p_u
    g_qpos = -coef * p_u + 2.0 * l2 * q_pos
    g_qneg = coef * p_u + 2.0 * l2 * q_neg
    g_bpos = (-coef + 2.0 * l2 * b_pos) if use_bias else 0.0
    g_bneg = (coef + 2.0 * l2 * b_neg) if use_bias else 0.0
    return loss + reg, g_pu, g_qpos, g_qneg, g_bpos, g_bneg


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _draw_negatives(rng: np.random.Generator, user_rows: np.ndarray, pos_mask: np.ndarray, n_items: int) -> np.ndarray:
    neg = rng.integers(0, n_items, size=user_rows.size)
    while True:
        bad = np.flatnonzero(pos_mask[user_rows, neg])
        if bad.size == 0:
            return neg
        neg[bad] = rng.integers(0, n_items, size=bad.size)


def train(dataset: SplitDataset, config: TrainConfig, hooks: TrainHooks) -> MFModel:
    """Fit the factorization model on the train split.

    One uniformly re-sampled negative per positive; parameters updated by
    plain SGD over batches of ``config.batch_size``.  With neutral hooks the
    arithmetic is identical to an unhooked BPR loop, so results bit-match.
    """
    cat = dataset.catalog
    if not dataset.train.records:
        raise InvariantViolation("train split is empty")

    users = list(cat.users)
    items = list(cat.items)
    groups = sorted(cat.groups)
    u_index = {u: i for i, u in enumerate(users)}
    i_index = {it: j for j, it in enumerate(items)}
    g_index = {g: j for j, g in enumerate(groups)}

    pos_mask = np.zeros((len(users), len(items)), dtype=bool)
    pos_u: list[int] = []
    pos_i: list[int] = []
    for rec in dataset.train.records:
        pos_mask[u_index[rec.user], i_index[rec.item]] = True
        pos_u.append(u_index[rec.user])
        pos_i.append(i_index[rec.item])
    # Users interacting with every item admit no negative sample; drop their triples.
    full_rows = set(np.flatnonzero(pos_mask.sum(axis=1) >= len(items)).tolist())
    keep = [k for k in range(len(pos_u)) if pos_u[k] not in full_rows]
    if not keep:
        raise InvariantViolation("no user admits a negative sample")
    pos_u_arr = np.array([pos_u[k] for k in keep])
    pos_i_arr = np.array([pos_i[k] for k in keep])
    n_pos = pos_u_arr.size

    item_member: list[frozenset[str]] = [cat.item_groups[it] for it in items]
    group_members_idx: dict[int, np.ndarray] = {}
    for g in groups:
        gj = g_index[g]
        rows = [k for k in range(n_pos) if g in item_member[pos_i_arr[k]]]
        group_members_idx[gj] = np.array(rows, dtype=int)

    rng = np.random.default_rng(config.seed)
    P = rng.normal(0.0, 0.1, size=(len(users), config.dim))
    Q = rng.normal(0.0, 0.1, size=(len(items), config.dim))
    bias = np.zeros(len(items)) if config.use_item_bias else None

    ips_map: dict[str, float] | None = None
    if hooks.weight_provider == "ips":
        ips_map = ips_weights(dataset.train, cat, smooth=config.ips_smooth)
    dual = DualState.uniform(hooks.dual_budget, groups, hooks.dual_step)
    sampler_ema: dict[str, float] | None = None
    sampler_q: dict[str, float] = {g: 1.0 / len(groups) for g in groups}
    eligible_groups = [g_index[g] for g in groups if group_members_idx[g_index[g]].size > 0]

    loss_curve: list[float] = []
    for epoch in range(config.epochs):
        if hooks.group_sampler == "uniform":
            order = rng.permutation(n_pos)
        else:
            probs = np.array([sampler_q[groups[gj]] for gj in eligible_groups])
            probs = probs / probs.sum()
            drawn = rng.choice(len(eligible_groups), size=n_pos, p=probs)
            order = np.empty(n_pos, dtype=int)
            for k, gsel in enumerate(drawn):
                pool = group_members_idx[eligible_groups[gsel]]
                order[k] = pool[rng.integers(0, pool.size)]

        epoch_loss = 0.0
        for start in range(0, n_pos, config.batch_size):
            batch = order[start : start + config.batch_size]
            bu = pos_u_arr[batch]
            bi = pos_i_arr[batch]
            bn = _draw_negatives(rng, bu, pos_mask, len(items))

            Pu = P[bu]
            Qp = Q[bi]
            Qn = Q[bn]
            x = np.einsum("bd,bd->b", Pu, Qp) - np.einsum("bd,bd->b", Pu, Qn)
            if bias is not None:
                x = x + bias[bi] - bias[bn]

            if hooks.weight_provider == "static":
                w = np.ones(batch.size)
            elif hooks.weight_provider == "ips":
                w = np.array(
                    [float(np.mean([ips_map[g] for g in sorted(item_member[i])])) for i in bi]
                )
            else:
                batch_sets = [item_member[i] for i in bi]
                w, dual = fairdual_step(dual, batch_sets)

            sig = 1.0 / (1.0 + np.exp(x))
            coef = w * sig
            sample_loss = w * np.logaddexp(0.0, -x)
            epoch_loss += float(sample_loss.sum())

            lr = config.lr
            l2 = config.l2
            np.add.at(P, bu, -lr * (-coef[:, None] * (Qp - Qn) + 2.0 * l2 * Pu))
            np.add.at(Q, bi, -lr * (-coef[:, None] * Pu + 2.0 * l2 * Qp))
            np.add.at(Q, bn, -lr * (coef[:, None] * Pu + 2.0 * l2 * Qn))
            if bias is not None:
                np.add.at(bias, bi, -lr * (-coef + 2.0 * l2 * bias[bi]))
                np.add.at(bias, bn, -lr * (coef + 2.0 * l2 * bias[bn]))

            if hooks.regularizer != "none" and hooks.reg_weight > 0:
                pos_scores = np.einsum("bd,bd->b", Pu, Qp)
                if bias is not None:
                    pos_scores = pos_scores + bias[bi]
                by_group: dict[str, list[int]] = {}
                for k, i in enumerate(bi):
                    for g in item_member[i]:
                        by_group.setdefault(g, []).append(k)
                scores_by_group = {g: pos_scores[np.array(idx)] for g, idx in sorted(by_group.items())}
                epoch_loss += hooks.reg_weight * fairness_penalty(scores_by_group, hooks.regularizer)
                grads = fairness_penalty_grad(scores_by_group, hooks.regularizer)
                ds = np.zeros(batch.size)
                for g, idx in sorted(by_group.items()):
                    ds[np.array(idx)] += grads[g]
                ds *= hooks.reg_weight
                np.add.at(P, bu, -lr * ds[:, None] * Qp)
                np.add.at(Q, bi, -lr * ds[:, None] * Pu)
                if bias is not None:
                    np.add.at(bias, bi, -lr * ds)

            if hooks.group_sampler == "minmax":
                losses_by_group: dict[str, list[float]] = {}
                for k, i in enumerate(bi):
                    for g in item_member[i]:
                        losses_by_group.setdefault(g, []).append(float(sample_loss[k]))
                batch_group_losses = {g: float(np.mean(v)) for g, v in sorted(losses_by_group.items())}
                sampler_q, sampler_ema = minmax_sampler_update(
                    sampler_ema, batch_group_losses, hooks.sampler_step
                )

        l2_term = config.l2 * (float(np.sum(P * P)) + float(np.sum(Q * Q)))
        if bias is not None:
            l2_term += config.l2 * float(np.sum(bias * bias))
        mean_loss = epoch_loss / n_pos + l2_term
        if not np.isfinite(mean_loss):
            raise DivergenceError(f"non-finite loss at epoch {epoch}")
        loss_curve.append(mean_loss)

    return MFModel(
        user_ids=users,
        item_ids=items,
        user_vecs=P,
        item_vecs=Q,
        item_bias=bias,
        config=config,
        loss_curve=loss_curve,
    )


def predict(
    model: MFModel,
    users: Sequence[str],
    exclude: Mapping[str, set[str]] | None = None,
) -> ScoreMatrix:
    """Score all candidate items for the given users.

    ``exclude`` removes per-user items (typically training positives) from
    the candidate rows.  Scores are raw dot products plus the optional item
    bias.
    """
    rows: dict[str, dict[str, float]] = {}
    item_ids = model.item_ids
    for user in users:
        ui = model._user_index.get(user)
        if ui is None:
            raise UnknownEntity(f"user {user!r} not in model")
        scores = model.item_vecs @ model.user_vecs[ui]
        if model.item_bias is not None:
            scores = scores + model.item_bias
        banned = exclude.get(user, set()) if exclude else set()
        rows[user] = {item: float(scores[j]) for j, item in enumerate(item_ids) if item not in banned}
    return ScoreMatrix(rows, semantics="raw")


def exclude_train_items(dataset: SplitDataset) -> dict[str, set[str]]:
    """Per-user train-split items, the standard prediction exclusion set."""
    out: dict[str, set[str]] = {}
    for rec in dataset.train.records:
        out.setdefault(rec.user, set()).add(rec.item)
    return out


CHECKPOINT_FORMAT_VERSION = 1


def save_model(model: MFModel, directory: str | Path, hooks: TrainHooks | None = None) -> None:
    """Write the model as text embedding tables plus a manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "dim": model.config.dim,
        "seed": model.config.seed,
        "epochs": model.config.epochs,
        "lr": model.config.lr,
        "l2": model.config.l2,
        "batch_size": model.config.batch_size,
        "use_item_bias": model.config.use_item_bias,
        "loss_curve": [float(x) for x in model.loss_curve],
    }
    if hooks is not None:
        manifest["hooks"] = {
            "weight_provider": hooks.weight_provider,
            "group_sampler": hooks.group_sampler,
            "regularizer": hooks.regularizer,
            "reg_weight": hooks.reg_weight,
        }
    (directory / "manifest.yaml").write_text(yaml.safe_dump(manifest, sort_keys=True), encoding="utf-8")

    def write_table(path, ids, vecs, bias=None):
        with path.open("w", encoding="utf-8") as fh:
            for idx, entity in enumerate(ids):
                values = "\t".join(repr(float(x)) for x in vecs[idx])
                if bias is not None:
                    values += f"\t{float(bias[idx])!r}"
                fh.write(f"{entity}\t{values}\n")

    write_table(directory / "user_vecs.tsv", model.user_ids, model.user_vecs)
    write_table(directory / "item_vecs.tsv", model.item_ids, model.item_vecs, model.item_bias)


def load_model(directory: str | Path) -> MFModel:
    """Read back a checkpoint written by :func:`save_model`."""
    directory = Path(directory)
    manifest_path = directory / "manifest.yaml"
    if not manifest_path.exists():
        raise IoError(f"no model manifest in {directory}")
    manifest = yaml.safe_load(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise VersionError(f"checkpoint version {manifest.get('format_version')} unsupported")

    def read_table(path, extra_col):
        ids, rows, extras = [], [], []
        with path.open("r", encoding="utf-8") as fh:
            for line in fh:
                fields = line.rstrip("\n").split("\t")
                ids.append(fields[0])
                values = [float(x) for x in fields[1:]]
                if extra_col:
                    extras.append(values.pop())
                rows.append(values)
        return ids, np.array(rows), (np.array(extras) if extra_col else None)

    use_bias = bool(manifest.get("use_item_bias"))
    user_ids, user_vecs, _ = read_table(directory / "user_vecs.tsv", extra_col=False)
    item_ids, item_vecs, bias = read_table(directory / "item_vecs.tsv", extra_col=use_bias)
    config = TrainConfig(
        dim=int(manifest["dim"]),
        epochs=int(manifest["epochs"]),
        lr=float(manifest["lr"]),
        l2=float(manifest["l2"]),
        batch_size=int(manifest["batch_size"]),
        seed=int(manifest["seed"]),
        use_item_bias=use_bias,
    )
    return MFModel(
        user_ids=user_ids,
        item_ids=item_ids,
        user_vecs=user_vecs,
        item_vecs=item_vecs,
        item_bias=bias,
        config=config,
        loss_curve=[float(x) for x in manifest.get("loss_curve", [])],
    )
