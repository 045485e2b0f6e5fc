"""Training-objective terms and the part-location template bank.

The objective has three parts: a feature reconstruction term, a gate term
that rewards routing information through the interpretable track, and a
per-filter term equal to minus the mutual information between a filter's
feature maps and a bank of candidate part-location templates. Minimizing
the last term makes a filter fire at one image-specific location instead
of spreading over the map.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np
import torch

from .errors import ContractError

if TYPE_CHECKING:  # pragma: no cover
    from .explainer import ExplainerOutputs


def default_tau(n: int) -> float:
    """Peak template magnitude; shrinks with map area so scores stay bounded."""
    return 0.5 / (n * n)


def default_positive_mass(n: int) -> float:
    """Prior mass shared by the positive templates (each then gets 1/(1+n^2))."""
    return (n * n) / (1.0 + n * n)


@dataclass(frozen=True)
class PartTemplate:
    """An n x n map peaking at `center` and decaying with L1 distance.

    t_ij = tau * max(1 - beta * |(i,j) - center|_1 / n, -1). The negative
    template (center None) is the constant -tau and models "filter silent".
    """

    center: tuple[int, int] | None
    values: torch.Tensor


@dataclass
class TemplateBank:
    """All n^2 positive templates plus the negative one, with their prior."""

    n: int
    tau: float
    beta: float
    positive_mass: float
    score_temperature: float
    templates: torch.Tensor  # (n^2 + 1, n, n); index -1 is the negative template
    prior: torch.Tensor  # (n^2 + 1,), sums to 1
    masks: torch.Tensor  # (n^2, n, n) = clamp(T+, 0) / tau, values in [0, 1]

    @property
    def num_templates(self) -> int:
        return self.n * self.n + 1

    def to(self, dtype: torch.dtype) -> "TemplateBank":
        if self.templates.dtype == dtype:
            return self
        return TemplateBank(
            self.n,
            self.tau,
            self.beta,
            self.positive_mass,
            self.score_temperature,
            self.templates.to(dtype),
            self.prior.to(dtype),
            self.masks.to(dtype),
        )

    def constants(self) -> dict:
        return {
            "n": self.n,
            "tau": self.tau,
            "beta": self.beta,
            "positive_mass": self.positive_mass,
            "score_temperature": self.score_temperature,
        }


def build_template(
    n: int,
    center: tuple[int, int],
    tau: float,
    beta: float,
    dtype: torch.dtype = torch.float64,
) -> PartTemplate:
    r, c = center
    if not (0 <= r < n and 0 <= c < n):
        raise ContractError(f"template center {center} outside {n}x{n} grid")
    ii = torch.arange(n, dtype=dtype)
    d1 = (ii[:, None] - r).abs() + (ii[None, :] - c).abs()
    values = tau * torch.clamp(1.0 - beta * d1 / n, min=-1.0)
    return PartTemplate(center=(r, c), values=values)


def build_template_bank(
    n: int,
    tau: float | None = None,
    beta: float = 4.0,
    positive_mass: float | None = None,
    score_temperature: float = 1.0,
    dtype: torch.dtype = torch.float64,
) -> TemplateBank:
    if n < 1:
        raise ContractError(f"bank needs n >= 1, got {n}")
    if tau is None:
        tau = default_tau(n)
    if positive_mass is None:
        positive_mass = default_positive_mass(n)
    if not (0.0 < positive_mass < 1.0):
        raise ContractError(f"positive prior mass must be in (0,1), got {positive_mass}")
    templates = torch.empty((n * n + 1, n, n), dtype=dtype)
    for r in range(n):
        for c in range(n):
            templates[r * n + c] = build_template(n, (r, c), tau, beta, dtype).values
    templates[-1] = -tau
    prior = torch.full((n * n + 1,), positive_mass / (n * n), dtype=dtype)
    prior[-1] = 1.0 - positive_mass
    masks = torch.clamp(templates[:-1], min=0.0) / tau
    return TemplateBank(
        n=n,
        tau=tau,
        beta=beta,
        positive_mass=positive_mass,
        score_temperature=score_temperature,
        templates=templates,
        prior=prior,
        masks=masks,
    )


def template_score(feature_map: torch.Tensor, template: PartTemplate | torch.Tensor) -> torch.Tensor:
    """Frobenius inner product between a feature map and a template."""
    values = template.values if isinstance(template, PartTemplate) else template
    if feature_map.shape != values.shape:
        raise ContractError(
            f"map shape {tuple(feature_map.shape)} != template {tuple(values.shape)}"
        )
    return (feature_map * values).sum()


def filter_loss(
    maps: torch.Tensor,
    labels: torch.Tensor,
    target_category: int,
    bank: TemplateBank,
) -> torch.Tensor:
    """Minus the mutual information between a mini-batch of maps and templates.

    maps: (B, n, n) post-ReLU pre-mask outputs of one filter. For images of
    the filter's target category the fitness to every candidate template is
    its own inner product; images of other categories are represented by
    their fitness to the negative template. p(x|T) is a softmax over the
    batch per template, p(x) mixes the conditionals with the bank prior, and
    the result is a differentiable scalar <= 0.
    """
    if maps.dim() != 3 or maps.shape[0] == 0:
        raise ContractError(f"expected maps (B, n, n) with B >= 1, got {tuple(maps.shape)}")
    if maps.shape[1] != bank.n or maps.shape[2] != bank.n:
        raise ContractError(
            f"maps are {tuple(maps.shape[1:])} but the bank is {bank.n}x{bank.n}"
        )
    if labels.shape[0] != maps.shape[0]:
        raise ContractError("labels and maps disagree on batch size")
    bank = bank.to(maps.dtype)
    b = maps.shape[0]
    t = bank.num_templates
    scores = maps.reshape(b, -1) @ bank.templates.reshape(t, -1).T
    scores = scores / bank.score_temperature
    on_target = (labels == target_category).to(maps.device)
    scores = torch.where(on_target[:, None], scores, scores[:, -1:].expand(b, t))
    log_p_x_given_t = torch.log_softmax(scores, dim=0)
    log_prior = torch.log(bank.prior)
    log_p_x = torch.logsumexp(log_p_x_given_t + log_prior[None, :], dim=1)
    mutual_information = (
        bank.prior[None, :]
        * torch.exp(log_p_x_given_t)
        * (log_p_x_given_t - log_p_x[:, None])
    ).sum()
    return -mutual_information


def assign_filter_categories(mean_activation: np.ndarray) -> np.ndarray:
    """Per-filter target category: row-wise argmax, ties to the lowest index."""
    acts = np.asarray(mean_activation)
    if acts.ndim != 2 or acts.shape[1] < 1:
        raise ContractError(f"expected an (F, C) matrix, got shape {acts.shape}")
    return np.argmax(acts, axis=1).astype(np.int64)


def reconstruction_loss(
    outputs: Sequence[torch.Tensor],
    targets: Sequence[torch.Tensor],
    layer_weights: Sequence[float],
) -> torch.Tensor:
    """Weighted squared-error sum over decoder layers.

    Accepts vectors (D,) or batches (B, D); batched inputs average the
    per-image value over the batch.
    """
    if not (len(outputs) == len(targets) == len(layer_weights)):
        raise ContractError("outputs, targets, and weights must align per layer")
    total = None
    for out, tgt, w in zip(outputs, targets, layer_weights):
        if out.shape != tgt.shape:
            raise ContractError(
                f"output shape {tuple(out.shape)} != target {tuple(tgt.shape)}"
            )
        sq = ((out - tgt) ** 2).sum(dim=-1)
        term = w * (sq.mean() if sq.dim() > 0 else sq)
        total = term if total is None else total + term
    if total is None:
        raise ContractError("need at least one layer")
    return total


def gate_loss(p: torch.Tensor | float, eta: float) -> torch.Tensor:
    """-eta * log p; small when the interpretable track carries the signal."""
    p_t = p if isinstance(p, torch.Tensor) else torch.tensor(float(p), dtype=torch.float64)
    p_val = float(p_t.detach())
    if not (0.0 < p_val < 1.0):
        raise ContractError(f"gate weight p must be in (0,1), got {p_val}")
    return -eta * torch.log(p_t)


@dataclass(frozen=True)
class LossWeights:
    lambda_fc1: float = 1.0
    lambda_fc2: float = 1.0
    eta: float = 0.2
    lambda_filter: float = 0.0  # resolved per run; see resolve_lambda_filter


def resolve_lambda_filter(
    lambda_filter: float | None, num_filters: int, batch_size: int, n: int
) -> float:
    """Default per-filter weight 5 / (F * B * n^2) unless overridden."""
    if lambda_filter is not None:
        return lambda_filter
    return 5.0 / (num_filters * batch_size * n * n)


def total_loss(
    outputs: "ExplainerOutputs",
    targets: tuple[torch.Tensor, torch.Tensor],
    labels: torch.Tensor,
    assignment: np.ndarray,
    bank: TemplateBank,
    weights: LossWeights,
) -> tuple[torch.Tensor, dict]:
    """Reconstruction + gate + weighted filter terms, with a logged breakdown."""
    recon = reconstruction_loss(
        (outputs.x_fcdec1, outputs.x_fcdec2),
        targets,
        (weights.lambda_fc1, weights.lambda_fc2),
    )
    gate = gate_loss(outputs.trace.p, weights.eta)
    premask = outputs.trace.per_filter_premask
    num_filters = premask.shape[1]
    if len(assignment) != num_filters:
        raise ContractError(
            f"assignment covers {len(assignment)} filters, maps have {num_filters}"
        )
    filt = premask.new_zeros(())
    for f in range(num_filters):
        filt = filt + weights.lambda_filter * filter_loss(
            premask[:, f], labels, int(assignment[f]), bank
        )
    total = recon + gate + filt
    breakdown = {
        "reconstruction": float(recon.detach()),
        "gate": float(gate.detach()),
        "filter": float(filt.detach()),
        "total": float(total.detach()),
        "p": float(outputs.trace.p.detach()),
    }
    return total, breakdown
