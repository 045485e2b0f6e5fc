"""Distillation loop: freeze the performer, fit the explainer on its features.

The performer checkpoint is digest-verified before and after training; the
loop never reads part annotations. Running RMS statistics update with the
configured momentum during training and are frozen into the checkpoint.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from . import scenes
from .checkpoints import archive_digest
from .errors import DivergenceError, FreezeViolationError
from .explainer import ExplainerArch, ExplainerNet, new_explainer, save_explainer
from .losses import (
    LossWeights,
    assign_filter_categories,
    build_template_bank,
    resolve_lambda_filter,
    total_loss,
)
from .performer import PerformerNet, load_performer

LOG_COLUMNS = ("step", "recon", "gate", "filter", "total", "p")


@dataclass(frozen=True)
class DistillSettings:
    """Everything the distillation run needs beyond the artifacts themselves."""

    epochs: int = 60
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    lr_decay: float = 0.98
    rms_momentum: float = 0.99
    assignment_refresh: int = 1  # epochs between target-category refreshes
    log_every: int = 10
    filters: int = 16
    kernel: int = 3
    lambda_fc1: float = 1.0
    lambda_fc2: float = 1.0
    eta: float = 0.2
    lambda_filter: float | None = None  # None = 5 / (F * B * n^2)
    tau: float | None = None  # None = 0.5 / n^2
    beta: float = 4.0
    positive_mass: float | None = None  # None = n^2 / (1 + n^2)
    score_temperature: float = 1.0


@dataclass
class TrainLog:
    steps: list[dict]  # {step, recon, gate, filter, total, p}
    epochs: list[dict]  # {epoch, p, assignment, seconds}

    def write(self, out_dir: Path) -> None:
        with (out_dir / "train_log.csv").open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            writer.writeheader()
            for row in self.steps:
                writer.writerow({k: row[k] for k in LOG_COLUMNS})
        (out_dir / "epochs.json").write_text(
            json.dumps(self.epochs, indent=2) + "\n"
        )


def precompute_taps(
    performer: PerformerNet, images: np.ndarray, batch: int = 64
) -> dict[str, torch.Tensor]:
    """Run the frozen performer once over a split; keeps training cheap."""
    xs = torch.from_numpy(images)
    taps, f1s, f2s, logits = [], [], [], []
    with torch.no_grad():
        for lo in range(0, len(xs), batch):
            bundle = performer(xs[lo : lo + batch])
            taps.append(bundle.x_tap)
            f1s.append(bundle.fc1_star)
            f2s.append(bundle.fc2_star)
            logits.append(bundle.logits)
    return {
        "x_tap": torch.cat(taps),
        "fc1_star": torch.cat(f1s),
        "fc2_star": torch.cat(f2s),
        "logits": torch.cat(logits),
    }


def mean_category_activation(
    net: ExplainerNet,
    x_tap: torch.Tensor,
    labels: np.ndarray,
    num_categories: int,
    batch: int = 64,
) -> np.ndarray:
    """(F, C) mean pre-mask activation of each filter per category."""
    sums = np.zeros((net.arch.filters, num_categories))
    counts = np.zeros(num_categories)
    with torch.no_grad():
        for lo in range(0, len(x_tap), batch):
            trace = net.encode(x_tap[lo : lo + batch])
            per_image = trace.per_filter_premask.mean(dim=(2, 3)).numpy()
            for c in range(num_categories):
                sel = labels[lo : lo + batch] == c
                if sel.any():
                    sums[:, c] += per_image[sel].sum(axis=0)
                    counts[c] += sel.sum()
    return sums / np.maximum(counts, 1.0)[None, :]


def train_explainer(
    performer_ckpt: Path | str,
    manifest_path: Path | str,
    out_dir: Path | str,
    *,
    seed: int,
    settings: DistillSettings = DistillSettings(),
) -> tuple[Path, TrainLog]:
    """Train the explainer against a frozen performer; returns (ckpt, log)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    digest_before = archive_digest(performer_ckpt)
    performer, _ = load_performer(performer_ckpt)
    performer.eval()
    for param in performer.parameters():
        param.requires_grad_(False)

    manifest = scenes.read_manifest(manifest_path)
    num_categories = len(manifest.categories)
    tr_imgs, tr_labs, _, _ = scenes.load_split_arrays(manifest_path, "train")
    va_imgs, va_labs, _, _ = scenes.load_split_arrays(manifest_path, "val")
    train_feats = precompute_taps(performer, tr_imgs)
    val_feats = precompute_taps(performer, va_imgs)
    tr_labels_t = torch.from_numpy(tr_labs)

    n = performer.arch.tap_spatial
    bank = build_template_bank(
        n,
        tau=settings.tau,
        beta=settings.beta,
        positive_mass=settings.positive_mass,
        score_temperature=settings.score_temperature,
        dtype=torch.float32,
    )
    arch = ExplainerArch(
        in_channels=performer.arch.tap_channels,
        spatial=n,
        filters=settings.filters,
        kernel=settings.kernel,
        fc1=performer.arch.fc1,
        fc2=performer.arch.fc2,
        rms_momentum=settings.rms_momentum,
    )
    net = new_explainer(arch, bank, seed=seed)
    weights = LossWeights(
        lambda_fc1=settings.lambda_fc1,
        lambda_fc2=settings.lambda_fc2,
        eta=settings.eta,
        lambda_filter=resolve_lambda_filter(
            settings.lambda_filter, settings.filters, settings.batch_size, n
        ),
    )

    opt = torch.optim.SGD(net.parameters(), lr=settings.lr, momentum=settings.momentum)
    shuffle = np.random.default_rng(np.random.SeedSequence([seed, 22]))
    log = TrainLog(steps=[], epochs=[])
    assignment = assign_filter_categories(
        mean_category_activation(net, val_feats["x_tap"], va_labs, num_categories)
    )
    t0 = time.monotonic()
    step = 0
    for epoch in range(settings.epochs):
        if epoch % max(settings.assignment_refresh, 1) == 0:
            net.eval()
            assignment = assign_filter_categories(
                mean_category_activation(
                    net, val_feats["x_tap"], va_labs, num_categories
                )
            )
        net.train()
        perm = shuffle.permutation(len(tr_labs))
        for lo in range(0, len(perm), settings.batch_size):
            idx = torch.from_numpy(perm[lo : lo + settings.batch_size].copy())
            outputs = net(train_feats["x_tap"][idx], update_stats=True)
            targets = (train_feats["fc1_star"][idx], train_feats["fc2_star"][idx])
            loss, breakdown = total_loss(
                outputs, targets, tr_labels_t[idx], assignment, net.bank, weights
            )
            for term, value in breakdown.items():
                if not np.isfinite(value):
                    raise DivergenceError(
                        f"non-finite {term} term at step {step} (epoch {epoch})"
                    )
            opt.zero_grad()
            loss.backward()
            opt.step()
            if step % settings.log_every == 0:
                log.steps.append(
                    {
                        "step": step,
                        "recon": breakdown["reconstruction"],
                        "gate": breakdown["gate"],
                        "filter": breakdown["filter"],
                        "total": breakdown["total"],
                        "p": breakdown["p"],
                    }
                )
            step += 1
        for group in opt.param_groups:
            group["lr"] *= settings.lr_decay
        net.eval()
        log.epochs.append(
            {
                "epoch": epoch,
                "p": net.p,
                "assignment": [int(c) for c in assignment],
                "seconds": time.monotonic() - t0,
            }
        )

    net.eval()
    assignment = assign_filter_categories(
        mean_category_activation(net, val_feats["x_tap"], va_labs, num_categories)
    )
    if archive_digest(performer_ckpt) != digest_before:
        raise FreezeViolationError(
            "performer checkpoint changed during explainer training"
        )

    metrics = {"p": net.p, "steps": step, "epochs": settings.epochs}
    if log.steps:
        metrics["final_total_loss"] = log.steps[-1]["total"]
    ckpt = save_explainer(
        net,
        out_dir,
        seed=seed,
        performer_digest=digest_before,
        assignment=assignment,
        metrics=metrics,
        extra={
            "settings": asdict(settings),
            "resolved_weights": {
                "lambda_fc1": weights.lambda_fc1,
                "lambda_fc2": weights.lambda_fc2,
                "eta": weights.eta,
                "lambda_filter": weights.lambda_filter,
            },
        },
    )
    log.write(out_dir)
    return ckpt, log
