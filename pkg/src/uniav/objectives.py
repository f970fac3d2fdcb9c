"""The three training losses and their unweighted sum.

cl: two-sided temperature-scaled contrastive loss over batch score matrices
whose entries add a global cosine term and a max-over-cells local term.
mas: mean binary cross-entropy between the predicted soft mask and the
dominance target. mva: the mixed-frame alignment loss, a convex combination
of two contrastive losses that use the local-max similarity only.

Everything is dtype-polymorphic torch (float64 in the finite-difference
tests, float32 in training).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, InputError, TrainingDivergenceError

SCORE_BOUND = 2.0  # sum of two cosines
_RANGE_TOL = 1e-4


@dataclass
class ScoreMatrix:
    """B x B pairwise correspondence scores with their temperature."""

    values: torch.Tensor
    temperature: float

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
            raise InputError(f"score matrix must be square, got {tuple(self.values.shape)}")
        if self.temperature <= 0:
            raise ConfigurationError(f"temperature must be positive, got {self.temperature}")
        bound = SCORE_BOUND + _RANGE_TOL
        detached = self.values.detach()
        if detached.abs().max().item() > bound:
            raise InputError(
                f"scores outside [-2, 2]: max |s| = {detached.abs().max().item():.4f}"
            )


def correspondence_score(a_glb: torch.Tensor, a_loc: torch.Tensor,
                         v_glb: torch.Tensor, v_loc_set: torch.Tensor) -> torch.Tensor:
    """Pairwise score: cos(a_glb, v_glb) + max over the local visual set of
    cos(a_loc, v_loc). All inputs are unit vectors; v_loc_set is cells x dim."""
    if v_loc_set.ndim != 2 or v_loc_set.shape[0] == 0:
        raise InputError("local visual set must be a nonempty cells x dim matrix")
    return a_glb @ v_glb + (v_loc_set @ a_loc).max()


def score_matrix(a_glb: torch.Tensor, a_loc: torch.Tensor, v_glb: torch.Tensor,
                 v_loc: torch.Tensor, temperature: float) -> ScoreMatrix:
    """Batched s_ij: audio i against visual j, global plus local-max term.

    a_glb/a_loc: B x P. v_glb: B x P. v_loc: B x cells x P.
    """
    if v_loc.ndim != 3 or v_loc.shape[1] == 0:
        raise InputError("v_loc must be B x cells x P with at least one cell")
    glb = a_glb @ v_glb.T
    loc = torch.einsum("ip,jcp->ijc", a_loc, v_loc).amax(dim=2)
    return ScoreMatrix(glb + loc, temperature)


def local_score_matrix(a_vecs: torch.Tensor, v_cells: torch.Tensor,
                       temperature: float) -> ScoreMatrix:
    """Local-max-only scores (the mixed-visual alignment form)."""
    if v_cells.ndim != 3 or v_cells.shape[1] == 0:
        raise InputError("v_cells must be B x cells x P with at least one cell")
    loc = torch.einsum("ip,jcp->ijc", a_vecs, v_cells).amax(dim=2)
    # single cosine: entries live in [-1, 1], well inside the bound
    return ScoreMatrix(loc, temperature)


def contrastive_loss(scores: ScoreMatrix) -> torch.Tensor:
    """Two-sided batch contrastive loss.

    Per sample: -log softmax over its row at the diagonal plus -log softmax
    over its column at the diagonal, denominators including the positive;
    returns the batch mean. Zero for a singleton batch.
    """
    logits = scores.values / scores.temperature
    b = logits.shape[0]
    targets = torch.arange(b, device=logits.device)
    row = F.cross_entropy(logits, targets)
    col = F.cross_entropy(logits.T, targets)
    return row + col


def separation_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy over all time-frequency bins."""
    if pred.shape != target.shape:
        raise InputError(f"mask shapes differ: pred {tuple(pred.shape)}, "
                         f"target {tuple(target.shape)}")
    p = torch.clamp(pred, 1e-6, 1.0 - 1e-6)
    return F.binary_cross_entropy(p, target.to(p.dtype), reduction="mean")


def mva_loss(v_mixed_cells: torch.Tensor, a_base: torch.Tensor,
             a_partner: torch.Tensor, alpha: float, temperature: float) -> torch.Tensor:
    """Mixed-frame alignment: alpha-weighted contrastive losses tying the
    mixed frame's local cells to both constituent audios.

    v_mixed_cells: B x cells x P (mixed-frame projections). a_base and
    a_partner: B x P. Negatives are the other mixed frames in the batch.
    """
    if not 0.0 <= alpha <= 1.0:
        raise InputError(f"alpha {alpha} outside [0, 1]")
    loss_base = contrastive_loss(local_score_matrix(a_base, v_mixed_cells, temperature))
    if alpha == 1.0:
        return loss_base
    loss_partner = contrastive_loss(local_score_matrix(a_partner, v_mixed_cells, temperature))
    if alpha == 0.0:
        return loss_partner
    return alpha * loss_base + (1.0 - alpha) * loss_partner


@dataclass
class LossBundle:
    """The three objective values plus their unweighted sum.

    Disabled objectives contribute an exact scalar zero (no gradient path).
    """

    cl: torch.Tensor | float
    mas: torch.Tensor | float
    mva: torch.Tensor | float
    total: torch.Tensor | float

    def detached(self) -> dict:
        def val(x):
            return float(x.detach()) if torch.is_tensor(x) else float(x)
        return {"cl": val(self.cl), "mas": val(self.mas),
                "mva": val(self.mva), "total": val(self.total)}


def total_loss(cl, mas, mva) -> LossBundle:
    """Unweighted sum of the enabled objectives."""
    for name, term in (("cl", cl), ("mas", mas), ("mva", mva)):
        value = float(term.detach()) if torch.is_tensor(term) else float(term)
        if not (value == value and abs(value) != float("inf")):
            raise TrainingDivergenceError(f"{name} loss is non-finite: {value}")
    return LossBundle(cl=cl, mas=mas, mva=mva, total=cl + mas + mva)
