"""Command-line pipeline driver with reproducible experiment directories.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 configuration
error (including missing prerequisite artifacts).
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import scenes
from .config import ExperimentConfig, validate_config
from .errors import ConfigError, PartlensError

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3

COMMANDS = (
    "gen-data",
    "train-performer",
    "train-explainer",
    "eval",
    "visualize",
    "report",
    "run-all",
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="partlens",
        description="Distill a frozen CNN into per-part interpretable filters "
        "and measure the result.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None, help="JSON config file")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config key by dotted path, e.g. train.epochs=5",
        )
        p.add_argument(
            "--out",
            type=Path,
            default=None,
            help="experiment directory (default: new hash+timestamp dir)",
        )
    return parser


def _experiment_dir(cfg: ExperimentConfig, out: Path | None) -> Path:
    if out is not None:
        return out
    root = cfg.paths.out_root or os.environ.get("EXPLAINER_HOME") or "experiments"
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    return Path(root) / f"{cfg.config_hash()}-{stamp}"


def _echo_config(cfg: ExperimentConfig, exp_dir: Path) -> None:
    exp_dir.mkdir(parents=True, exist_ok=True)
    (exp_dir / "config.json").write_text(
        json.dumps(cfg.normalized(), indent=2, sort_keys=True) + "\n"
    )


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise ConfigError(f"{what} not found at {path}; run the earlier stages first")
    return path


def _paths(exp_dir: Path) -> dict[str, Path]:
    return {
        "dataset": exp_dir / "dataset",
        "manifest": exp_dir / "dataset" / "manifest.json",
        "performer": exp_dir / "performer",
        "explainer": exp_dir / "explainer",
        "eval": exp_dir / "eval",
        "viz": exp_dir / "viz",
    }


def _cmd_gen_data(cfg: ExperimentConfig, exp_dir: Path) -> None:
    d = cfg.data
    manifest = scenes.generate_dataset(
        _paths(exp_dir)["dataset"],
        seed=cfg.seed,
        num_scenes=d.num_scenes,
        num_categories=d.categories,
        parts_per_category=d.parts_per_category,
        image_size=d.image_size,
        image_format=d.image_format,
        split_fractions=(d.split_train, d.split_val, d.split_test),
        jitter_frac=d.jitter_frac,
        scale_range=(d.scale_min, d.scale_max),
        noise_sigma=d.noise_sigma,
        clutter_dots=d.clutter_dots,
    )
    print(
        f"dataset: {manifest.num_scenes} scenes, "
        f"{len(manifest.categories)} categories -> {_paths(exp_dir)['dataset']}"
    )


def _cmd_train_performer(cfg: ExperimentConfig, exp_dir: Path) -> None:
    from .performer import PerformerArch, train_performer

    paths = _paths(exp_dir)
    manifest = scenes.read_manifest(_require(paths["manifest"], "dataset manifest"))
    p = cfg.performer
    arch = PerformerArch(
        image_size=cfg.data.image_size,
        channels=tuple(p.channels),
        kernel=p.kernel,
        tap_layer=p.tap_layer,
        fc1=p.fc1,
        fc2=p.fc2,
        classes=max(2, len(manifest.categories)),
    )
    ckpt, metrics = train_performer(
        paths["manifest"],
        paths["performer"],
        seed=cfg.seed,
        arch=arch,
        epochs=p.epochs,
        batch_size=p.batch_size,
        lr=p.lr,
        momentum=p.momentum,
        lr_decay=p.lr_decay,
        min_val_accuracy=p.min_val_accuracy,
    )
    print(
        f"performer: val_accuracy={metrics['val_accuracy']:.4f} "
        f"({metrics['status']}) -> {ckpt}"
    )


def _cmd_train_explainer(cfg: ExperimentConfig, exp_dir: Path) -> None:
    from .training import DistillSettings, train_explainer

    paths = _paths(exp_dir)
    settings = DistillSettings(
        epochs=cfg.train.epochs,
        batch_size=cfg.train.batch_size,
        lr=cfg.train.lr,
        momentum=cfg.train.momentum,
        lr_decay=cfg.train.lr_decay,
        rms_momentum=cfg.train.rms_momentum,
        assignment_refresh=cfg.train.assignment_refresh,
        log_every=cfg.train.log_every,
        filters=cfg.explainer.filters,
        kernel=cfg.explainer.kernel,
        lambda_fc1=cfg.losses.lambda_fc1,
        lambda_fc2=cfg.losses.lambda_fc2,
        eta=cfg.losses.eta,
        lambda_filter=cfg.losses.lambda_filter,
        tau=cfg.losses.tau,
        beta=cfg.losses.beta,
        positive_mass=cfg.losses.positive_mass,
        score_temperature=cfg.losses.score_temperature,
    )
    ckpt, log = train_explainer(
        _require(paths["performer"], "performer checkpoint"),
        _require(paths["manifest"], "dataset manifest"),
        paths["explainer"],
        seed=cfg.seed,
        settings=settings,
    )
    final_p = log.epochs[-1]["p"] if log.epochs else 0.5
    print(f"explainer: p={final_p:.4f} after {settings.epochs} epochs -> {ckpt}")


def _gradcam_files(cfg: ExperimentConfig, exp_dir: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .explainer import load_explainer
    from .gradcam import explainer_grad_cam, performer_grad_cam
    from .performer import load_performer

    paths = _paths(exp_dir)
    count = cfg.eval.gradcam_images
    if count == 0:
        return
    performer, _ = load_performer(paths["performer"])
    explainer, _ = load_explainer(paths["explainer"])
    images, labels, _, _ = scenes.load_split_arrays(paths["manifest"], cfg.eval.split)
    out = paths["eval"] / "gradcam"
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    for i in range(min(count, len(images))):
        cls = int(labels[i])
        cam_p = performer_grad_cam(performer, images[i], cls)
        cam_e = explainer_grad_cam(performer, explainer, images[i], cls)
        fig, axes = plt.subplots(1, 3, figsize=(7.5, 2.6), dpi=100)
        for ax, (data, title) in zip(
            axes,
            [
                (images[i, 0], "input"),
                (cam_p, "performer grad-CAM"),
                (cam_e, "explainer grad-CAM"),
            ],
        ):
            ax.imshow(data, cmap="gray" if title == "input" else "magma", vmin=0, vmax=1)
            ax.set_title(title, fontsize=8)
            ax.axis("off")
        fig.tight_layout()
        fig.savefig(out / f"image_{i:02d}.png")
        plt.close(fig)
        summary.append(
            {
                "image": i,
                "class": cls,
                "performer_peak": float(cam_p.max()),
                "explainer_peak": float(cam_e.max()),
            }
        )
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")


def _cmd_eval(cfg: ExperimentConfig, exp_dir: Path) -> None:
    from .evaluation import emit_report, evaluate_run

    paths = _paths(exp_dir)
    metrics = evaluate_run(
        _require(paths["performer"], "performer checkpoint"),
        _require(paths["explainer"], "explainer checkpoint"),
        _require(paths["manifest"], "dataset manifest"),
        split=cfg.eval.split,
        min_active=cfg.eval.min_active_images,
        aggregation=cfg.eval.landmark_aggregation,
        extra_runtime={"seed": cfg.seed, "config_hash": cfg.config_hash()},
    )
    emit_report(metrics, paths["eval"], p_trajectory=_p_trajectory(exp_dir))
    _gradcam_files(cfg, exp_dir)
    agg = metrics.aggregate_instability
    print(
        f"eval: instability performer={agg['performer']} explainer={agg['explainer']} "
        f"p={metrics.p:.4f} agreement={metrics.substitution_agreement:.3f}"
    )


def _p_trajectory(exp_dir: Path) -> list[tuple[int, float]] | None:
    epochs_path = _paths(exp_dir)["explainer"] / "epochs.json"
    if not epochs_path.exists():
        return None
    rows = json.loads(epochs_path.read_text())
    return [(row["epoch"], row["p"]) for row in rows]


def _cmd_visualize(cfg: ExperimentConfig, exp_dir: Path) -> None:
    from .explainer import load_explainer
    from .performer import load_performer
    from .visualize import visualize_filters

    paths = _paths(exp_dir)
    performer, _ = load_performer(_require(paths["performer"], "performer checkpoint"))
    explainer, _ = load_explainer(_require(paths["explainer"], "explainer checkpoint"))
    images, _, _, _ = scenes.load_split_arrays(
        _require(paths["manifest"], "dataset manifest"), cfg.eval.split
    )
    written = visualize_filters(
        performer, explainer, images, paths["viz"], top_k=cfg.eval.top_crops
    )
    print(
        f"visualize: {len(written['explainer'])} explainer grids, "
        f"{len(written['performer'])} performer grids -> {paths['viz']}"
    )


def _cmd_report(cfg: ExperimentConfig, exp_dir: Path) -> None:
    from .evaluation import MetricsReport, emit_report

    paths = _paths(exp_dir)
    metrics_path = _require(paths["eval"] / "metrics.json", "metrics report")
    metrics = MetricsReport.from_dict(json.loads(metrics_path.read_text()))
    written = emit_report(metrics, paths["eval"], p_trajectory=_p_trajectory(exp_dir))
    print(f"report: {len(written)} files -> {paths['eval']}")


_DISPATCH = {
    "gen-data": _cmd_gen_data,
    "train-performer": _cmd_train_performer,
    "train-explainer": _cmd_train_explainer,
    "eval": _cmd_eval,
    "visualize": _cmd_visualize,
    "report": _cmd_report,
}


def cli_dispatch(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK

    try:
        cfg = validate_config(args.config, args.overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    exp_dir = _experiment_dir(cfg, args.out)
    try:
        _echo_config(cfg, exp_dir)
        if args.command == "run-all":
            for name in (
                "gen-data",
                "train-performer",
                "train-explainer",
                "eval",
                "visualize",
                "report",
            ):
                _DISPATCH[name](cfg, exp_dir)
        else:
            _DISPATCH[args.command](cfg, exp_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PartlensError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"experiment directory: {exp_dir}")
    return EXIT_OK


def main() -> None:
    np.seterr(all="warn")
    sys.exit(cli_dispatch())


if __name__ == "__main__":
    main()
