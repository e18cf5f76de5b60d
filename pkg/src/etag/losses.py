"""Solver objectives: classification, rotation-task, feature and embedding distillation terms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .augmentation import N_ROTATIONS, augment_rotations
from .autodiff import Tensor
from .errors import DomainError, ShapeError, UsageError

DEFAULT_TAU = 3.0


@dataclass(frozen=True)
class LambdaSchedule:
    """Weight m_{:t-1} / m_t shared by the replay, distillation and reconstruction terms."""

    m_prev_total: int
    m_t: int

    def __post_init__(self):
        if self.m_t <= 0 or self.m_prev_total < 0:
            raise DomainError(f"invalid class counts ({self.m_prev_total}, {self.m_t})")

    @property
    def value(self) -> float:
        return self.m_prev_total / self.m_t

    @classmethod
    def at_task(cls, task_sizes, t: int) -> "LambdaSchedule":
        return cls(int(np.sum(task_sizes[:t])), int(task_sizes[t]))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over rows of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.shape[0] == 0 or labels.size == 0:
        raise DomainError("cross-entropy of an empty batch")
    if logits.ndim != 2 or logits.shape[0] != labels.size:
        raise ShapeError(f"logits {logits.shape} do not match {labels.size} labels")
    logp = ad.log_softmax(logits)
    return -ad.mean(ad.sum(logp * ad.one_hot(labels, logits.shape[1]), axis=1))


def ce_final(logits: Tensor, labels) -> Tensor:
    return cross_entropy(logits, labels)


def ce_inter(stage_logits: list[Tensor], aug_labels, n_rotations: int = N_ROTATIONS) -> Tensor:
    """Rotation-task loss summed over stages, averaged over rotations and samples.

    Rows of every entry of ``stage_logits`` are stacked rotation-major, so the
    average over rotations of per-rotation batch means is one mean over all rows.
    ``n_rotations=1`` is the unrotated variant used when self-supervision is off.
    """
    if n_rotations not in (1, N_ROTATIONS):
        raise DomainError(f"rotation task needs {N_ROTATIONS} rotations, got {n_rotations}")
    aug_labels = np.asarray(aug_labels)
    if len(aug_labels) % n_rotations:
        raise DomainError(f"{len(aug_labels)} rows cannot hold {n_rotations} equal rotation blocks")
    return _stage_sum([cross_entropy(z, aug_labels) for z in stage_logits])


def l2_final(f_new: Tensor, f_old, squared: bool = False) -> Tensor:
    """Batch mean of the per-sample distance between new and frozen final features."""
    f_old = Tensor(np.asarray(f_old.data if isinstance(f_old, Tensor) else f_old))
    if f_new.shape != f_old.shape:
        raise ShapeError(f"feature shapes {f_new.shape} and {f_old.shape} differ")
    diff = f_new - f_old
    per_sample = ad.squared_l2(diff) if squared else ad.l2_norm(diff)
    return ad.mean(per_sample)


def kl_inter(new_logits: list[Tensor], old_logits: list, tau: float = DEFAULT_TAU) -> Tensor:
    """tau^2 * sum over stages of mean KL(softmax(old/tau) || softmax(new/tau)).

    Each new head is cut to the width of its frozen counterpart, so the new
    head's extra columns (classes added since) are not compared.
    """
    if len(new_logits) != len(old_logits):
        raise ShapeError(f"{len(new_logits)} new heads vs {len(old_logits)} old heads")
    terms = []
    for new, old in zip(new_logits, old_logits):
        old = np.asarray(old.data if isinstance(old, Tensor) else old)
        width = old.shape[1]
        if new.shape[0] != old.shape[0] or new.shape[1] < width:
            raise ShapeError(f"new head {new.shape} cannot be sliced to old head {old.shape}")
        p = ad.softmax_with_temperature(Tensor(old), tau)
        q = ad.softmax_with_temperature(new[:, :width] if new.shape[1] != width else new, tau)
        terms.append(ad.mean(ad.kl_divergence(p, q)))
    return _stage_sum(terms) * (float(tau) ** 2)


def ce_new(cur_logits: Tensor, labels, replay_logits: Tensor | None = None,
           replay_labels=None, n_old: int | None = None, lam: float = 0.0) -> Tensor:
    """Current-task cross-entropy plus ``lam`` times cross-entropy on replayed old features.

    ``replay_logits`` are the classifier outputs on generated features restricted
    to whatever support the caller chose (all seen classes or only the old rows).
    """
    loss = ce_final(cur_logits, labels)
    if replay_logits is None or replay_logits.shape[0] == 0:
        return loss
    replay_labels = np.asarray(replay_labels)
    if n_old is not None and (replay_labels.min() < 0 or replay_labels.max() >= n_old):
        raise DomainError(f"replayed labels must be learned classes in [0, {n_old})")
    return loss + cross_entropy(replay_logits, replay_labels) * lam


def solver_loss_initial(ce_final_term: Tensor, ce_inter_term: Tensor | None, t: int = 0) -> Tensor:
    if t != 0:
        raise UsageError(f"the initial objective applies to task 0 only, got t={t}")
    return ce_final_term if ce_inter_term is None else ce_final_term + ce_inter_term


def solver_loss_incremental(ce_new_term: Tensor, l2_term: Tensor | None, kl_term: Tensor | None,
                            schedule: LambdaSchedule, ce_inter_term: Tensor | None = None) -> Tensor:
    distill = [x for x in (l2_term, kl_term) if x is not None]
    loss = ce_new_term
    if distill:
        loss = loss + _stage_sum(distill) * schedule.value
    if ce_inter_term is not None:
        loss = loss + ce_inter_term
    return loss


def _stage_sum(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


# --------------------------------------------------------------------------
# objective assembly


@dataclass(frozen=True)
class ObjectiveTerms:
    """Which solver-side terms are wired; the method variants differ only here."""

    self_supervised: bool = True      # aux heads see four rotations (else unrotated only)
    aux_ce: bool = True               # rotation-task cross-entropy on task 0
    ss_ce_incremental: bool = False   # also apply it on tasks t >= 1
    feature_distill: bool = True      # final-feature L2 distillation
    embed_distill: bool = True        # stage-wise KL distillation through aux heads
    replay: bool = True               # generated old-class features for the classifier
    squared_l2: bool = False
    replay_support: str = "all"       # "all": softmax over every seen class; "old": old rows only

    @property
    def uses_aux(self) -> bool:
        return self.aux_ce or self.embed_distill or self.ss_ce_incremental


def aux_targets(labels, rotation_index, task_sizes) -> np.ndarray:
    """Aux-head column for each (global class, rotation).

    Every task owns a contiguous block of 4 * m_t columns appended when it
    arrived; inside the block the index is rotation * m_t + local class.
    """
    labels = np.asarray(labels, dtype=np.int64)
    sizes = np.asarray(task_sizes, dtype=np.int64)
    class_offsets = np.concatenate([[0], np.cumsum(sizes)])
    task = np.searchsorted(class_offsets, labels, side="right") - 1
    local = labels - class_offsets[task]
    return N_ROTATIONS * class_offsets[task] + np.asarray(rotation_index) * sizes[task] + local


def solver_objective(solver, images, labels, task_sizes, t: int, terms: ObjectiveTerms,
                     snapshot=None, replay=None, tau: float = DEFAULT_TAU,
                     schedule: LambdaSchedule | None = None, joint: bool = False):
    """Assemble the task-t solver loss.

    ``labels`` are global class ids. ``replay`` is ``(features, labels)`` drawn
    from the frozen generator, or None. With ``joint`` the task-0 objective is
    applied to whatever (cumulative) data is passed. Returns ``(loss, parts)``
    where ``parts`` maps term names to floats.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    n_rot = N_ROTATIONS if terms.self_supervised else 1
    initial = t == 0 or joint
    if not initial and snapshot is None:
        raise UsageError("incremental objective needs the previous task's frozen solver")
    want_aux = terms.uses_aux and (
        (initial and terms.aux_ce) or (not initial and (terms.embed_distill or terms.ss_ce_incremental)))

    if want_aux:
        batch = augment_rotations(images, np.zeros(n, dtype=np.int64), 1, range(n_rot))
        x = batch.images
        outs = solver.forward_all(x)
        f_last = outs[-1][:n] if n_rot > 1 else outs[-1]
        targets = aux_targets(np.tile(labels, n_rot), batch.rotation_index, task_sizes[: t + 1])
    else:
        x = images
        outs = solver.forward_all(x)
        f_last = outs[-1]
    parts = {}
    logits = solver.classifier.logits(f_last)

    if initial:
        ce = ce_final(logits, labels)
        inter = None
        if want_aux:
            inter = ce_inter([solver.aux_logits(l, outs[l - 1]) for l in range(1, len(outs))],
                             targets, n_rot)
            parts["ce_inter"] = inter.item()
        parts["ce_final"] = ce.item()
        loss = ce if inter is None else ce + inter
        parts["total"] = loss.item()
        return loss, parts

    schedule = schedule or LambdaSchedule.at_task(task_sizes, t)
    n_old = schedule.m_prev_total
    replay_logits = replay_labels = None
    if terms.replay and replay is not None and len(replay[1]):
        rows = slice(0, n_old) if terms.replay_support == "old" else None
        replay_logits = solver.classifier.logits(Tensor(np.asarray(replay[0])), rows=rows)
        replay_labels = replay[1]
    cn = ce_new(logits, labels, replay_logits, replay_labels, n_old, schedule.value)
    parts["ce_new"] = cn.item()

    l2 = kl = inter = None
    snap_outs = None
    if terms.feature_distill or (terms.embed_distill and want_aux):
        snap_outs = snapshot.forward_all(x)
    if terms.feature_distill:
        f_old = snap_outs[-1].data[:n]
        l2 = l2_final(f_last, f_old, squared=terms.squared_l2)
        parts["l2_final"] = l2.item()
    heads = None
    if want_aux:
        heads = [solver.aux_logits(l, outs[l - 1]) for l in range(1, len(outs))]
    if terms.embed_distill and want_aux:
        old = [snapshot.aux_logits(l, snap_outs[l - 1]).data for l in range(1, len(outs))]
        kl = kl_inter(heads, old, tau)
        parts["kl_inter"] = kl.item()
    if terms.ss_ce_incremental and want_aux:
        inter = ce_inter(heads, targets, n_rot)
        parts["ce_inter"] = inter.item()
    loss = solver_loss_incremental(cn, l2, kl, schedule, inter)
    parts["total"] = loss.item()
    return loss, parts
