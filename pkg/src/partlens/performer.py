"""The performer: a small CNN classifier that is trained once, then frozen.

Its tapped conv feature map feeds the explainer, and its two post-ReLU FC
features are the reconstruction targets. Inference is a pure function of
(input, parameters).
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoints, scenes
from .errors import CheckpointError, ConfigError, ContractError, DivergenceError

CONV_STRIDES = (2, 2, 2, 1)  # stride-2 downsampling on layers 1-3


@dataclass(frozen=True)
class PerformerArch:
    image_size: int = 64
    in_channels: int = 1
    channels: tuple[int, int, int, int] = (16, 32, 32, 32)
    kernel: int = 3
    tap_layer: int = 3
    fc1: int = 64
    fc2: int = 32
    classes: int = 2

    def __post_init__(self):
        if self.tap_layer not in (1, 2, 3, 4):
            raise ConfigError(f"tap_layer must be in 1..4, got {self.tap_layer}")
        if self.tap_spatial < 4:
            raise ConfigError(
                f"tap layer output is {self.tap_spatial}x{self.tap_spatial}; need >= 4"
            )
        if self.fc1 < self.classes or self.fc2 < self.classes:
            raise ConfigError("fc widths must be >= class count")

    def conv_spatial(self, layer: int) -> int:
        s = self.image_size
        for stride in CONV_STRIDES[:layer]:
            s = (s + 2 * (self.kernel // 2) - self.kernel) // stride + 1
        return s

    @property
    def tap_spatial(self) -> int:
        return self.conv_spatial(self.tap_layer)

    @property
    def tap_channels(self) -> int:
        return self.channels[self.tap_layer - 1]

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "in_channels": self.in_channels,
            "channels": list(self.channels),
            "kernel": self.kernel,
            "tap_layer": self.tap_layer,
            "fc1": self.fc1,
            "fc2": self.fc2,
            "classes": self.classes,
        }

    @staticmethod
    def from_dict(d: dict) -> "PerformerArch":
        return PerformerArch(
            image_size=d["image_size"],
            in_channels=d["in_channels"],
            channels=tuple(d["channels"]),
            kernel=d["kernel"],
            tap_layer=d["tap_layer"],
            fc1=d["fc1"],
            fc2=d["fc2"],
            classes=d["classes"],
        )


class TapBundle(NamedTuple):
    """Everything one forward pass exposes to the explainer and the metrics."""

    x_tap: torch.Tensor  # (B, C_tap, n, n), post-ReLU
    fc1_star: torch.Tensor  # (B, D1), post-ReLU
    fc2_star: torch.Tensor  # (B, D2), post-ReLU
    logits: torch.Tensor  # (B, classes)


def seeded_uniform_init_(module: nn.Module, rng: np.random.Generator) -> None:
    """Kaiming-uniform style init driven by a numpy generator.

    Using an explicit generator keeps parameter initialization a pure
    function of the seed, independent of torch's global RNG state.
    """
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight.shape[1:].numel()
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=tuple(m.weight.shape))
            with torch.no_grad():
                m.weight.copy_(torch.from_numpy(w))
                if m.bias is not None:
                    b = rng.uniform(-bound, bound, size=tuple(m.bias.shape))
                    m.bias.copy_(torch.from_numpy(b))


class PerformerNet(nn.Module):
    def __init__(self, arch: PerformerArch, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.arch = arch
        pad = arch.kernel // 2
        chans = (arch.in_channels,) + arch.channels
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], arch.kernel, CONV_STRIDES[i], pad)
            for i in range(4)
        )
        flat = arch.channels[-1] * arch.conv_spatial(4) ** 2
        self.fc1 = nn.Linear(flat, arch.fc1)
        self.fc2 = nn.Linear(arch.fc1, arch.fc2)
        self.head = nn.Linear(arch.fc2, arch.classes)
        self.to(dtype)

    def forward(self, images: torch.Tensor, tap_layer: int | None = None) -> TapBundle:
        arch = self.arch
        if images.dim() != 4 or images.shape[1:] != (
            arch.in_channels,
            arch.image_size,
            arch.image_size,
        ):
            raise ContractError(
                f"expected images (B, {arch.in_channels}, {arch.image_size}, "
                f"{arch.image_size}), got {tuple(images.shape)}"
            )
        tap = arch.tap_layer if tap_layer is None else tap_layer
        x = images
        x_tap = None
        for i, conv in enumerate(self.convs, start=1):
            x = F.relu(conv(x))
            if i == tap:
                x_tap = x
        fc1_star = F.relu(self.fc1(x.flatten(1)))
        fc2_star = F.relu(self.fc2(fc1_star))
        logits = self.head(fc2_star)
        return TapBundle(x_tap, fc1_star, fc2_star, logits)

    def classify_from_fc2(self, fc2: torch.Tensor) -> torch.Tensor:
        """Apply only the final classification layer to an fc2-shaped vector."""
        if fc2.shape[-1] != self.arch.fc2:
            raise ContractError(
                f"fc2 vector length {fc2.shape[-1]} != {self.arch.fc2}"
            )
        return self.head(fc2)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        state = self.state_dict()
        if set(state) != set(arrays):
            raise CheckpointError(
                "parameter names do not match this performer architecture"
            )
        self.load_state_dict(
            {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in arrays.items()}
        )


def new_performer(
    arch: PerformerArch, seed: int, dtype: torch.dtype = torch.float32
) -> PerformerNet:
    net = PerformerNet(arch, dtype=dtype)
    seeded_uniform_init_(net, np.random.default_rng(np.random.SeedSequence([seed, 11])))
    return net.to(dtype)


def save_performer(
    net: PerformerNet, out_dir: Path | str, seed: int, metrics: dict, extra: dict | None = None
) -> Path:
    arch = net.arch.to_dict()
    meta = {
        "arch": arch,
        "arch_hash": checkpoints.arch_hash(arch),
        "seed": seed,
        "metrics": metrics,
    }
    if extra:
        meta.update(extra)
    return checkpoints.save_archive(out_dir, "performer", net.state_arrays(), meta)


def torch_dtype_of(arr: np.ndarray) -> torch.dtype:
    table = {"float32": torch.float32, "float64": torch.float64}
    name = arr.dtype.name
    if name not in table:
        raise CheckpointError(f"unsupported parameter dtype {name!r}")
    return table[name]


def load_performer(ckpt_dir: Path | str) -> tuple[PerformerNet, dict]:
    arrays, meta, _ = checkpoints.load_archive(ckpt_dir, expected_kind="performer")
    if checkpoints.arch_hash(meta["arch"]) != meta["arch_hash"]:
        raise CheckpointError("architecture hash mismatch; manifest was altered")
    arch = PerformerArch.from_dict(meta["arch"])
    net = PerformerNet(arch, dtype=torch_dtype_of(next(iter(arrays.values()))))
    net.load_state_arrays(arrays)
    net.eval()
    return net, meta


def _accuracy(net: PerformerNet, images: torch.Tensor, labels: torch.Tensor) -> float:
    with torch.no_grad():
        preds = net(images).logits.argmax(dim=1)
    return float((preds == labels).double().mean())


def _with_noise_negatives(
    images: np.ndarray, labels: np.ndarray, image_size: int, seed: int, stream: int
) -> tuple[np.ndarray, np.ndarray]:
    """For the single-category regime: pad the set with clutter-only negatives."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7, stream]))
    neg = np.stack(
        [scenes.generate_clutter_image(rng, image_size)[None] for _ in range(len(images))]
    )
    imgs = np.concatenate([images, neg.astype(np.float32)])
    labs = np.concatenate([labels, np.ones(len(neg), dtype=np.int64)])
    return imgs, labs


def train_performer(
    manifest_path: Path | str,
    out_dir: Path | str,
    *,
    seed: int,
    arch: PerformerArch | None = None,
    epochs: int = 30,
    batch_size: int = 32,
    lr: float = 0.1,
    momentum: float = 0.9,
    lr_decay: float = 0.97,
    min_val_accuracy: float = 0.95,
) -> tuple[Path, dict]:
    """Train the performer on the synthetic task and checkpoint it.

    A run that ends below min_val_accuracy is saved anyway, with
    status="failed", so it can be inspected.
    """
    manifest = scenes.read_manifest(manifest_path)
    num_classes = max(2, len(manifest.categories))
    single_category = len(manifest.categories) == 1

    tr_imgs, tr_labs, _, _ = scenes.load_split_arrays(manifest_path, "train")
    va_imgs, va_labs, _, _ = scenes.load_split_arrays(manifest_path, "val")
    if single_category:
        tr_imgs, tr_labs = _with_noise_negatives(
            tr_imgs, tr_labs, manifest.image_size, seed, 0
        )
        va_imgs, va_labs = _with_noise_negatives(
            va_imgs, va_labs, manifest.image_size, seed, 1
        )

    if arch is None:
        arch = PerformerArch(image_size=manifest.image_size, classes=num_classes)
    elif arch.classes != num_classes:
        raise ConfigError(
            f"arch has {arch.classes} classes but the task needs {num_classes}"
        )

    net = new_performer(arch, seed)
    xs = torch.from_numpy(tr_imgs)
    ys = torch.from_numpy(tr_labs)
    vxs = torch.from_numpy(va_imgs)
    vys = torch.from_numpy(va_labs)

    opt = torch.optim.SGD(net.parameters(), lr=lr, momentum=momentum)
    shuffle = np.random.default_rng(np.random.SeedSequence([seed, 12]))
    log_rows = []
    final_loss = float("nan")
    t0 = time.monotonic()
    step = 0
    for epoch in range(epochs):
        net.train()
        perm = shuffle.permutation(len(xs))
        epoch_losses = []
        for lo in range(0, len(xs), batch_size):
            idx = torch.from_numpy(perm[lo : lo + batch_size].copy())
            loss = F.cross_entropy(net(xs[idx]).logits, ys[idx])
            if not torch.isfinite(loss):
                raise DivergenceError(
                    f"performer training diverged at step {step} (cross-entropy)"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(float(loss.detach()))
            step += 1
        for group in opt.param_groups:
            group["lr"] *= lr_decay
        net.eval()
        final_loss = float(np.mean(epoch_losses))
        log_rows.append(
            {
                "epoch": epoch,
                "train_loss": final_loss,
                "val_accuracy": _accuracy(net, vxs, vys),
                "seconds": time.monotonic() - t0,
            }
        )

    net.eval()
    val_acc = _accuracy(net, vxs, vys)
    status = "converged" if val_acc >= min_val_accuracy else "failed"
    metrics = {
        "val_accuracy": val_acc,
        "final_train_loss": final_loss,
        "epochs": epochs,
        "status": status,
    }
    ckpt = save_performer(
        net,
        out_dir,
        seed,
        metrics,
        extra={
            "train_config": {
                "epochs": epochs,
                "batch_size": batch_size,
                "lr": lr,
                "momentum": momentum,
                "lr_decay": lr_decay,
                "min_val_accuracy": min_val_accuracy,
                "single_category": single_category,
            }
        },
    )
    log_path = Path(out_dir) / "train_log.csv"
    with log_path.open("w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["epoch", "train_loss", "val_accuracy", "seconds"]
        )
        writer.writeheader()
        writer.writerows(log_rows)
    return ckpt, metrics
