"""Self-supervised objectives and their auxiliary state.

Every function here is pure: losses take tensors and return tensors (with
autograd intact), and the momentum / centering updates return new state
objects rather than mutating their inputs.

Two-view embedding batches use the interleaved row order
``(z_1^(1), z_1^(2), z_2^(1), z_2^(2), ...)``, so rows ``2i`` and ``2i + 1``
are the positive pair of sample ``i``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence, Union

import torch
import torch.nn.functional as F

NORM_EPS = 1e-12
UNIT_TOL = 1e-6


class ObjectiveError(ValueError):
    pass


def l2_normalize(z: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    """Scale the last axis to unit Euclidean length; zero vectors are an error."""
    norm = torch.linalg.vector_norm(z, dim=-1, keepdim=True)
    if bool((norm <= eps).any()):
        raise ObjectiveError("cannot normalize a vector with (near-)zero norm")
    return z / norm


def interleave(view1: torch.Tensor, view2: torch.Tensor) -> torch.Tensor:
    """Stack two ``(N, d)`` view batches into the interleaved ``(2N, d)`` layout."""
    if view1.shape != view2.shape:
        raise ObjectiveError(f"view shapes differ: {tuple(view1.shape)} vs {tuple(view2.shape)}")
    return torch.stack((view1, view2), dim=1).reshape(-1, view1.shape[-1])


def positive_index(n_rows: int) -> torch.Tensor:
    """Row index of each row's positive partner in the interleaved layout."""
    idx = torch.arange(n_rows)
    return idx ^ 1


def similarity_matrix(z: torch.Tensor, temperature: float) -> torch.Tensor:
    if temperature <= 0:
        raise ObjectiveError("temperature must be positive")
    return z @ z.T / temperature


def _check_unit_rows(z: torch.Tensor) -> None:
    norms = torch.linalg.vector_norm(z.detach(), dim=-1)
    if bool(((norms - 1).abs() > UNIT_TOL).any()):
        raise ObjectiveError("embedding rows must be L2-normalized")


def nt_xent_loss(z: torch.Tensor, temperature: float = 0.5) -> tuple[torch.Tensor, torch.Tensor]:
    """Normalized-temperature cross-entropy over an interleaved two-view batch.

    Args:
        z: ``(2N, d)`` unit-norm rows in interleaved view order.
        temperature: similarity divisor.

    Returns:
        ``(loss, per_row)`` where ``per_row[r]`` is the term for row ``r``
        and ``loss`` is their mean. Each row's denominator runs over all
        other ``2N - 1`` rows, the positive included; only the anchor
        itself is left out.
    """
    if z.ndim != 2 or z.shape[0] % 2 or z.shape[0] == 0:
        raise ObjectiveError("expected an even, non-zero number of rows")
    _check_unit_rows(z)
    s = similarity_matrix(z, temperature)
    n = s.shape[0]
    self_mask = torch.eye(n, dtype=torch.bool, device=s.device)
    logits = s.masked_fill(self_mask, float("-inf"))
    pos = positive_index(n).to(s.device)
    per_row = torch.logsumexp(logits, dim=1) - s[torch.arange(n, device=s.device), pos]
    return per_row.mean(), per_row


def byol_loss(p_online: torch.Tensor, z_target: torch.Tensor) -> torch.Tensor:
    """Mean of ``2 - 2 cos(p, z)`` over row-aligned pairs; lies in ``[0, 4]``.

    Rows are paired as given. To symmetrize over view assignments, stack
    both directions (see :func:`symmetrized`). The target side is detached.
    """
    if p_online.shape != z_target.shape:
        raise ObjectiveError("online and target batches must be row-aligned")
    p = l2_normalize(p_online)
    z = l2_normalize(z_target.detach())
    return (2 - 2 * (p * z).sum(dim=-1)).mean()


def moco_v3_loss(q: torch.Tensor, k: torch.Tensor, temperature: float = 0.2) -> torch.Tensor:
    """InfoNCE with in-batch negatives: row ``i`` of ``k`` is the positive for ``q_i``.

    Both inputs are L2-normalized here, and ``k`` is detached (momentum branch).
    """
    if q.shape != k.shape:
        raise ObjectiveError("query and key batches must be row-aligned")
    if q.shape[0] < 2:
        raise ObjectiveError("MoCo v3 needs at least two rows so negatives exist")
    if temperature <= 0:
        raise ObjectiveError("temperature must be positive")
    qn = l2_normalize(q)
    kn = l2_normalize(k.detach())
    logits = qn @ kn.T / temperature
    target = torch.arange(q.shape[0], device=q.device)
    return F.cross_entropy(logits, target)


def symmetrized(loss_fn, online: Sequence[torch.Tensor], target: Sequence[torch.Tensor], **kwargs) -> torch.Tensor:
    """Average ``loss_fn(online[a], target[b])`` over both cross-view assignments."""
    (o1, o2), (t1, t2) = online, target
    return 0.5 * (loss_fn(o1, t2, **kwargs) + loss_fn(o2, t1, **kwargs))


@dataclass(frozen=True)
class CenterState:
    center: torch.Tensor
    momentum: float = 0.9

    @classmethod
    def zeros(cls, dim: int, momentum: float = 0.9, dtype=torch.float32) -> "CenterState":
        return cls(torch.zeros(dim, dtype=dtype), momentum)


def teacher_distribution(teacher_logits: torch.Tensor, center: torch.Tensor, teacher_temp: float) -> torch.Tensor:
    return torch.softmax((teacher_logits.detach() - center) / teacher_temp, dim=-1)


Views = Union[torch.Tensor, Sequence[torch.Tensor]]


def dino_loss(
    student_logits: Views,
    teacher_logits: Views,
    center: CenterState,
    student_temp: float = 0.1,
    teacher_temp: float = 0.04,
) -> torch.Tensor:
    """Cross-entropy between the centered, sharpened teacher and the student.

    With a single tensor on each side the pair is used as is. With a
    sequence of views on each side, the loss averages over every pair in
    which student and teacher saw different views.
    """
    if student_temp <= 0 or teacher_temp <= 0:
        raise ObjectiveError("temperatures must be positive")
    students = [student_logits] if isinstance(student_logits, torch.Tensor) else list(student_logits)
    teachers = [teacher_logits] if isinstance(teacher_logits, torch.Tensor) else list(teacher_logits)
    single = len(students) == 1 and len(teachers) == 1
    total, terms = 0.0, 0
    for ti, t in enumerate(teachers):
        t_prob = teacher_distribution(t, center.center, teacher_temp)
        for si, s in enumerate(students):
            if not single and si == ti:
                continue
            if s.shape[-1] != t.shape[-1]:
                raise ObjectiveError(f"student dim {s.shape[-1]} != teacher dim {t.shape[-1]}")
            total = total + (-t_prob * F.log_softmax(s / student_temp, dim=-1)).sum(dim=-1).mean()
            terms += 1
    if terms == 0:
        raise ObjectiveError("no student/teacher pair with different views")
    return total / terms


def dino_center_update(center: CenterState, teacher_batch_mean: torch.Tensor) -> CenterState:
    lam = center.momentum
    new = lam * center.center + (1 - lam) * teacher_batch_mean.detach().to(center.center.dtype)
    return CenterState(new, lam)


@dataclass(frozen=True)
class MomentumState:
    """Parameters of the momentum (target) network and how often they were updated."""

    params: Mapping[str, torch.Tensor]
    updates: int = 0

    @classmethod
    def from_named(cls, named_params) -> "MomentumState":
        return cls({k: v.detach().clone() for k, v in named_params}, 0)


@torch.no_grad()
def ema_update(target: MomentumState, online: Mapping[str, torch.Tensor], m: float) -> MomentumState:
    """``xi' = m * xi + (1 - m) * theta`` for every named tensor."""
    if not 0 <= m <= 1:
        raise ObjectiveError("momentum must lie in [0, 1]")
    if set(target.params) != set(online):
        raise ObjectiveError("target and online parameter sets differ")
    new = {}
    for name, xi in target.params.items():
        theta = online[name].detach()
        if theta.shape != xi.shape:
            raise ObjectiveError(f"shape mismatch for {name}: {tuple(xi.shape)} vs {tuple(theta.shape)}")
        if m == 1:
            new[name] = xi.clone()
        elif m == 0:
            new[name] = theta.clone()
        else:
            new[name] = xi * m + theta * (1 - m)
    return MomentumState(new, target.updates + 1)
