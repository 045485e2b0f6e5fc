"""Interpretability and fidelity metrics over a trained performer/explainer pair.

Location instability: for a filter, infer a part location per image from the
argmax of its map, measure the normalized distance to each ground-truth
landmark, and take the standard deviation over images; a filter glued to one
part has near-constant distances and therefore low instability.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import scenes
from .checkpoints import archive_digest, load_archive
from .errors import CheckpointError, ContractError
from .explainer import ExplainerNet, load_explainer
from .performer import PerformerNet, load_performer
from .training import precompute_taps

DIAG_NORM = np.sqrt(2.0)


def infer_part_location(feature_map: np.ndarray, image_size: int) -> tuple[float, float]:
    """Pixel coordinates of the map's argmax cell center (row-major ties)."""
    fmap = np.asarray(feature_map)
    if fmap.ndim != 2 or fmap.size == 0:
        raise ContractError(f"expected a nonempty 2-D map, got shape {fmap.shape}")
    n_r, n_c = fmap.shape
    flat = int(np.argmax(fmap))
    r, c = flat // n_c, flat % n_c
    return (
        r * (image_size / n_r) + image_size / (2 * n_r),
        c * (image_size / n_c) + image_size / (2 * n_c),
    )


@dataclass
class InstabilityResult:
    per_filter: list[float | None]  # None = inactive filter
    aggregate: float | None  # None = no active filter
    active_filters: int
    firing_counts: list[int] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return self.active_filters == 0


def location_instability(
    maps: np.ndarray,
    landmarks: np.ndarray,
    image_size: int,
    *,
    min_active: int = 30,
    aggregation: str = "mean",
) -> InstabilityResult:
    """Per-filter location instability over an eval set.

    maps: (N, F, n, n) post-ReLU activations; landmarks: (N, K, 2) pixel
    coordinates. Distances are normalized by the image diagonal; the spread
    is the population standard deviation over the images where the filter
    fires. Filters firing on fewer than min_active images are inactive.
    """
    if aggregation not in ("mean", "nearest"):
        raise ContractError(f"unknown aggregation {aggregation!r}")
    maps = np.asarray(maps)
    landmarks = np.asarray(landmarks)
    if maps.ndim != 4:
        raise ContractError(f"expected maps (N, F, n, n), got shape {maps.shape}")
    if landmarks.ndim != 3 or landmarks.shape[0] != maps.shape[0]:
        raise ContractError("landmarks must be (N, K, 2) matching the maps")
    num_images, num_filters = maps.shape[:2]
    diag = image_size * DIAG_NORM

    per_filter: list[float | None] = []
    firing_counts = []
    for f in range(num_filters):
        firing = [i for i in range(num_images) if maps[i, f].max() > 0.0]
        firing_counts.append(len(firing))
        if len(firing) < min_active:
            per_filter.append(None)
            continue
        pos = np.array(
            [infer_part_location(maps[i, f], image_size) for i in firing]
        )
        dists = (
            np.linalg.norm(pos[:, None, :] - landmarks[firing], axis=2) / diag
        )  # (firing, K)
        stds = dists.std(axis=0)  # population std per landmark
        per_filter.append(float(stds.mean() if aggregation == "mean" else stds.min()))

    active = [v for v in per_filter if v is not None]
    return InstabilityResult(
        per_filter=per_filter,
        aggregate=float(np.mean(active)) if active else None,
        active_filters=len(active),
        firing_counts=firing_counts,
    )


def explainer_eval_maps(
    performer: PerformerNet,
    explainer: ExplainerNet,
    images: np.ndarray,
    batch: int = 64,
) -> dict[str, np.ndarray]:
    """One eval-split pass: premask maps, tap maps, decoder outputs, targets."""
    feats = precompute_taps(performer, images, batch=batch)
    premask, d1s, d2s, sub_logits = [], [], [], []
    with torch.no_grad():
        x_tap = feats["x_tap"]
        for lo in range(0, len(x_tap), batch):
            outputs = explainer(x_tap[lo : lo + batch])
            premask.append(outputs.trace.per_filter_premask)
            d1s.append(outputs.x_fcdec1)
            d2s.append(outputs.x_fcdec2)
            sub_logits.append(performer.classify_from_fc2(outputs.x_fcdec2))
    return {
        "premask": torch.cat(premask).numpy(),
        "x_tap": x_tap.numpy(),
        "x_fcdec1": torch.cat(d1s).numpy(),
        "x_fcdec2": torch.cat(d2s).numpy(),
        "fc1_star": feats["fc1_star"].numpy(),
        "fc2_star": feats["fc2_star"].numpy(),
        "performer_logits": feats["logits"].numpy(),
        "substituted_logits": torch.cat(sub_logits).numpy(),
    }


def performer_baseline_instability(
    performer_ckpt: Path | str,
    manifest_path: Path | str,
    *,
    split: str = "test",
    min_active: int = 30,
    aggregation: str = "mean",
) -> InstabilityResult:
    """The same instability metric applied to the performer's tap channels."""
    performer, _ = load_performer(performer_ckpt)
    images, _, landmarks, _ = scenes.load_split_arrays(manifest_path, split)
    taps = precompute_taps(performer, images)["x_tap"].numpy()
    return location_instability(
        taps,
        landmarks,
        performer.arch.image_size,
        min_active=min_active,
        aggregation=aggregation,
    )


def measure_p(explainer_ckpt: Path | str) -> float:
    """Gate weight sigmoid(w_p) read straight from the checkpoint."""
    arrays, _, _ = load_archive(explainer_ckpt, expected_kind="explainer")
    return float(torch.sigmoid(torch.from_numpy(arrays["w_p"].reshape(()))))


def relative_l2(outputs: np.ndarray, targets: np.ndarray) -> float:
    """Mean over rows of ||out - tgt|| / ||tgt|| (zero targets guard to eps)."""
    num = np.linalg.norm(outputs - targets, axis=-1)
    den = np.maximum(np.linalg.norm(targets, axis=-1), 1e-12)
    return float(np.mean(num / den))


def substitution_fidelity(
    performer_ckpt: Path | str,
    explainer_ckpt: Path | str,
    manifest_path: Path | str,
    *,
    split: str = "test",
) -> tuple[float, dict[str, float]]:
    """Agreement between decoder-substituted and native predictions.

    Routes the reconstructed fc2 feature through the performer's own
    classification layer and compares argmax predictions; also reports the
    mean relative L2 reconstruction error per decoder layer.
    """
    explainer, meta = load_explainer(explainer_ckpt)
    if meta["performer_digest"] != archive_digest(performer_ckpt):
        raise CheckpointError(
            "explainer was trained against a different performer checkpoint"
        )
    performer, _ = load_performer(performer_ckpt)
    images, _, _, _ = scenes.load_split_arrays(manifest_path, split)
    data = explainer_eval_maps(performer, explainer, images)
    agreement = float(
        np.mean(
            data["substituted_logits"].argmax(axis=1)
            == data["performer_logits"].argmax(axis=1)
        )
    )
    rel = {
        "fc_dec_1": relative_l2(data["x_fcdec1"], data["fc1_star"]),
        "fc_dec_2": relative_l2(data["x_fcdec2"], data["fc2_star"]),
    }
    return agreement, rel


@dataclass
class MetricsReport:
    """Everything the evaluation stage measures, in report order."""

    per_filter_instability: dict[str, list[float | None]]
    aggregate_instability: dict[str, float | None]
    p: float
    reconstruction_relative_error: dict[str, float]
    substitution_agreement: float
    runtime: dict

    def to_dict(self) -> dict:
        return {
            "per_filter_instability": self.per_filter_instability,
            "aggregate_instability": self.aggregate_instability,
            "p": self.p,
            "reconstruction_relative_error": self.reconstruction_relative_error,
            "substitution_agreement": self.substitution_agreement,
            "runtime": self.runtime,
        }

    @staticmethod
    def from_dict(d: dict) -> "MetricsReport":
        return MetricsReport(**{k: d[k] for k in MetricsReport.__annotations__})


def evaluate_run(
    performer_ckpt: Path | str,
    explainer_ckpt: Path | str,
    manifest_path: Path | str,
    *,
    split: str = "test",
    min_active: int = 30,
    aggregation: str = "mean",
    extra_runtime: dict | None = None,
) -> MetricsReport:
    """Compute the full metrics report for one trained pair."""
    explainer, meta = load_explainer(explainer_ckpt)
    if meta["performer_digest"] != archive_digest(performer_ckpt):
        raise CheckpointError(
            "explainer was trained against a different performer checkpoint"
        )
    performer, _ = load_performer(performer_ckpt)
    images, _, landmarks, _ = scenes.load_split_arrays(manifest_path, split)
    image_size = performer.arch.image_size
    data = explainer_eval_maps(performer, explainer, images)

    expl = location_instability(
        data["premask"], landmarks, image_size,
        min_active=min_active, aggregation=aggregation,
    )
    perf = location_instability(
        data["x_tap"], landmarks, image_size,
        min_active=min_active, aggregation=aggregation,
    )
    agreement = float(
        np.mean(
            data["substituted_logits"].argmax(axis=1)
            == data["performer_logits"].argmax(axis=1)
        )
    )
    runtime = {
        "split": split,
        "n_eval_images": int(len(images)),
        "image_size": int(image_size),
        "min_active_images": int(min_active),
        "aggregation": aggregation,
        "std_convention": "population",
        "active_filters": {
            "explainer": expl.active_filters,
            "performer": perf.active_filters,
        },
    }
    if extra_runtime:
        runtime.update(extra_runtime)
    return MetricsReport(
        per_filter_instability={
            "explainer": expl.per_filter,
            "performer": perf.per_filter,
        },
        aggregate_instability={
            "explainer": expl.aggregate,
            "performer": perf.aggregate,
        },
        p=measure_p(explainer_ckpt),
        reconstruction_relative_error={
            "fc_dec_1": relative_l2(data["x_fcdec1"], data["fc1_star"]),
            "fc_dec_2": relative_l2(data["x_fcdec2"], data["fc2_star"]),
        },
        substitution_agreement=agreement,
        runtime=runtime,
    )


def emit_report(
    metrics: MetricsReport,
    out_dir: Path | str,
    p_trajectory: list[tuple[int, float]] | None = None,
) -> list[Path]:
    """Write metrics.json, metrics.csv, and comparison plots.

    Deterministic: identical inputs produce byte-identical files.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    json_path = out_dir / "metrics.json"
    json_path.write_text(json.dumps(metrics.to_dict(), indent=2, sort_keys=True) + "\n")
    written.append(json_path)

    csv_path = out_dir / "metrics.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["section", "name", "value"])
        for net in ("explainer", "performer"):
            writer.writerow(
                ["aggregate_instability", net, metrics.aggregate_instability[net]]
            )
        for net in ("explainer", "performer"):
            for i, v in enumerate(metrics.per_filter_instability[net]):
                writer.writerow(["filter_instability", f"{net}_{i:02d}", v])
        writer.writerow(["gate", "p", metrics.p])
        for layer, v in sorted(metrics.reconstruction_relative_error.items()):
            writer.writerow(["reconstruction_relative_error", layer, v])
        writer.writerow(["fidelity", "agreement", metrics.substitution_agreement])
    written.append(csv_path)

    fig, ax = plt.subplots(figsize=(4, 3), dpi=100)
    names = ["performer", "explainer"]
    values = [metrics.aggregate_instability[n] or 0.0 for n in names]
    ax.bar(names, values, color=["#888888", "#2a9d8f"])
    ax.set_ylabel("location instability")
    ax.set_title("lower is more interpretable")
    fig.tight_layout()
    bar_path = out_dir / "instability_bars.png"
    fig.savefig(bar_path)
    plt.close(fig)
    written.append(bar_path)

    if p_trajectory:
        fig, ax = plt.subplots(figsize=(4, 3), dpi=100)
        xs = [e for e, _ in p_trajectory]
        ys = [p for _, p in p_trajectory]
        ax.plot(xs, ys, marker="o", markersize=3, color="#2a9d8f")
        ax.set_xlabel("epoch")
        ax.set_ylabel("p")
        ax.set_ylim(0.0, 1.0)
        fig.tight_layout()
        p_path = out_dir / "p_trajectory.png"
        fig.savefig(p_path)
        plt.close(fig)
        written.append(p_path)
    return written
