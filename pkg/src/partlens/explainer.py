"""The explainer: a two-track encoder plus a small FC decoder.

The interpretable track runs two shape-preserving conv layers, each
followed by ReLU and a location mask that multiplies the map by the
template centered at its own argmax. The ordinary track is conv + ReLU +
shape-preserving 3x3 max pool. Both tracks are RMS-normalized per channel
(shared scale vector, separate running stats), then blended by the gate
p = sigmoid(w_p). The decoder reconstructs the performer's two FC features
from the blended map.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoints
from .errors import CheckpointError, ConfigError, ContractError
from .losses import TemplateBank, build_template_bank
from .performer import seeded_uniform_init_, torch_dtype_of

# sigmoid output is clamped to the open interval so p stays a valid gate
# weight even when w_p saturates in low precision
P_EPS = 1e-7


@dataclass(frozen=True)
class ExplainerArch:
    in_channels: int  # tap channels of the performer
    spatial: int  # n, tap map side
    filters: int = 16  # interpretable filter budget F (both tracks match it)
    kernel: int = 3
    fc1: int = 64  # decoder widths mirror the performer FC widths
    fc2: int = 32
    rms_momentum: float = 0.99

    def __post_init__(self):
        if self.filters < 1:
            raise ConfigError("need at least one interpretable filter")
        if not (0.0 <= self.rms_momentum < 1.0):
            raise ConfigError(f"rms_momentum must be in [0,1), got {self.rms_momentum}")

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "spatial": self.spatial,
            "filters": self.filters,
            "kernel": self.kernel,
            "fc1": self.fc1,
            "fc2": self.fc2,
            "rms_momentum": self.rms_momentum,
        }

    @staticmethod
    def from_dict(d: dict) -> "ExplainerArch":
        return ExplainerArch(
            in_channels=d["in_channels"],
            spatial=d["spatial"],
            filters=d["filters"],
            kernel=d["kernel"],
            fc1=d["fc1"],
            fc2=d["fc2"],
            rms_momentum=d["rms_momentum"],
        )


class EncoderTrace(NamedTuple):
    x_interp: torch.Tensor  # (B, F, n, n) normalized interpretable track
    x_ordin: torch.Tensor  # (B, F, n, n) normalized ordinary track
    x_enc: torch.Tensor  # (B, F, n, n) gated blend
    p: torch.Tensor  # scalar in (0, 1)
    per_filter_premask: torch.Tensor  # (B, F, n, n) conv-2 post-ReLU, pre-mask
    mask_centers: torch.Tensor  # (B, F, 2) argmax (row, col) per filter


class ExplainerOutputs(NamedTuple):
    trace: EncoderTrace
    x_fcdec1: torch.Tensor  # (B, D1) post-ReLU
    x_fcdec2: torch.Tensor  # (B, D2) post-ReLU


def flat_argmax(maps: torch.Tensor) -> torch.Tensor:
    """Row-major argmax over the trailing two dims (first hit wins ties)."""
    return maps.flatten(-2).argmax(dim=-1)


def apply_location_masks(
    maps: torch.Tensor,
    bank: TemplateBank,
    frozen_idx: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Multiply each (n, n) map by the mask centered at its own argmax.

    maps: (..., n, n) nonnegative. The argmax index is treated as a constant;
    gradient flows only through the elementwise product. Pass frozen_idx to
    pin the centers (used by finite-difference checks).
    """
    n = bank.n
    if maps.shape[-2:] != (n, n):
        raise ContractError(
            f"maps spatial size {tuple(maps.shape[-2:])} != bank size {n}x{n}"
        )
    idx = flat_argmax(maps.detach()) if frozen_idx is None else frozen_idx
    masks = bank.to(maps.dtype).masks[idx]
    return maps * masks, idx


def mask_layer(
    feature_map: torch.Tensor, bank: TemplateBank
) -> tuple[torch.Tensor, tuple[int, int]]:
    """Single-map mask layer; returns the masked map and its center.

    An all-zero map is valid: ties resolve row-major to (0, 0).
    """
    if feature_map.dim() != 2:
        raise ContractError(f"expected an (n, n) map, got {tuple(feature_map.shape)}")
    if float(feature_map.detach().min()) < 0.0:
        raise ContractError("mask layer expects a nonnegative (post-ReLU) map")
    masked, idx = apply_location_masks(feature_map[None], bank)
    flat = int(idx[0])
    return masked[0], (flat // bank.n, flat % bank.n)


def norm_layer(
    x: torch.Tensor, alpha: torch.Tensor, running_rms: torch.Tensor
) -> torch.Tensor:
    """Per-channel scaling: out_c = alpha_c * x_c / running_rms_c."""
    channels = x.shape[-3]
    if alpha.shape != (channels,) or running_rms.shape != (channels,):
        raise ContractError(
            f"alpha/running_rms must be ({channels},) vectors for {channels} channels"
        )
    if float(running_rms.min()) <= 0.0:
        raise ContractError("running RMS must be strictly positive")
    shape = (channels, 1, 1)
    return x * (alpha / running_rms).reshape(shape)


def gate(
    x_interp: torch.Tensor,
    x_ordin: torch.Tensor,
    w_p: torch.Tensor | float,
    p_eps: float = 0.0,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Convex blend of the tracks with weight p = sigmoid(w_p)."""
    if x_interp.shape != x_ordin.shape:
        raise ContractError(
            f"track shapes differ: {tuple(x_interp.shape)} vs {tuple(x_ordin.shape)}"
        )
    w = w_p if isinstance(w_p, torch.Tensor) else torch.tensor(float(w_p))
    p = torch.sigmoid(w)
    if p_eps > 0.0:
        p = p.clamp(p_eps, 1.0 - p_eps)
    return p * x_interp + (1.0 - p) * x_ordin, p


def batch_rms(x: torch.Tensor) -> torch.Tensor:
    """Per-channel RMS over batch and space, floored away from zero."""
    return torch.sqrt((x * x).mean(dim=(0, 2, 3)) + 1e-12)


class ExplainerNet(nn.Module):
    def __init__(
        self,
        arch: ExplainerArch,
        bank: TemplateBank | None = None,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.arch = arch
        if bank is None:
            bank = build_template_bank(arch.spatial, dtype=dtype)
        if bank.n != arch.spatial:
            raise ConfigError(f"bank size {bank.n} != tap spatial {arch.spatial}")
        self.bank = bank.to(dtype)
        pad = arch.kernel // 2
        f = arch.filters
        self.conv_interp1 = nn.Conv2d(arch.in_channels, f, arch.kernel, 1, pad)
        self.conv_interp2 = nn.Conv2d(f, f, arch.kernel, 1, pad)
        self.conv_ordin = nn.Conv2d(arch.in_channels, f, arch.kernel, 1, pad)
        self.alpha = nn.Parameter(torch.ones(f))
        self.w_p = nn.Parameter(torch.zeros(()))
        flat = f * arch.spatial * arch.spatial
        self.fc_dec1 = nn.Linear(flat, arch.fc1)
        self.fc_dec2 = nn.Linear(arch.fc1, arch.fc2)
        self.register_buffer("rms_interp", torch.ones(f))
        self.register_buffer("rms_ordin", torch.ones(f))
        self.to(dtype)

    @property
    def p(self) -> float:
        return float(torch.sigmoid(self.w_p.detach()))

    def interpretable_track(
        self,
        x_tap: torch.Tensor,
        frozen_centers: tuple[torch.Tensor, torch.Tensor] | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        """Returns (masked output, premask conv-2 maps, centers1, centers2)."""
        h1 = F.relu(self.conv_interp1(x_tap))
        h1m, idx1 = apply_location_masks(
            h1, self.bank, None if frozen_centers is None else frozen_centers[0]
        )
        h2 = F.relu(self.conv_interp2(h1m))
        h2m, idx2 = apply_location_masks(
            h2, self.bank, None if frozen_centers is None else frozen_centers[1]
        )
        return h2m, h2, idx1, idx2

    def ordinary_track(self, x_tap: torch.Tensor) -> torch.Tensor:
        o = F.relu(self.conv_ordin(x_tap))
        return F.max_pool2d(o, kernel_size=3, stride=1, padding=1)

    def encode(
        self,
        x_tap: torch.Tensor,
        update_stats: bool = False,
        frozen_centers: tuple[torch.Tensor, torch.Tensor] | None = None,
    ) -> EncoderTrace:
        arch = self.arch
        if x_tap.dim() != 4 or x_tap.shape[1:] != (
            arch.in_channels,
            arch.spatial,
            arch.spatial,
        ):
            raise ContractError(
                f"expected x_tap (B, {arch.in_channels}, {arch.spatial}, "
                f"{arch.spatial}), got {tuple(x_tap.shape)}"
            )
        h2m, h2, _, idx2 = self.interpretable_track(x_tap, frozen_centers)
        ordin = self.ordinary_track(x_tap)
        if update_stats:
            m = arch.rms_momentum
            with torch.no_grad():
                self.rms_interp.mul_(m).add_((1.0 - m) * batch_rms(h2m))
                self.rms_ordin.mul_(m).add_((1.0 - m) * batch_rms(ordin))
        x_interp = norm_layer(h2m, self.alpha, self.rms_interp)
        x_ordin = norm_layer(ordin, self.alpha, self.rms_ordin)
        x_enc, p = gate(x_interp, x_ordin, self.w_p, p_eps=P_EPS)
        centers = torch.stack((idx2 // arch.spatial, idx2 % arch.spatial), dim=-1)
        return EncoderTrace(
            x_interp=x_interp,
            x_ordin=x_ordin,
            x_enc=x_enc,
            p=p,
            per_filter_premask=h2,
            mask_centers=centers,
        )

    def decode(self, x_enc: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        flat = x_enc.flatten(1)
        if flat.shape[1] != self.fc_dec1.in_features:
            raise ContractError(
                f"encoder output flattens to {flat.shape[1]}, decoder expects "
                f"{self.fc_dec1.in_features}"
            )
        d1 = F.relu(self.fc_dec1(flat))
        d2 = F.relu(self.fc_dec2(d1))
        return d1, d2

    def forward(
        self,
        x_tap: torch.Tensor,
        update_stats: bool = False,
        frozen_centers: tuple[torch.Tensor, torch.Tensor] | None = None,
    ) -> ExplainerOutputs:
        trace = self.encode(x_tap, update_stats=update_stats, frozen_centers=frozen_centers)
        d1, d2 = self.decode(trace.x_enc)
        return ExplainerOutputs(trace=trace, x_fcdec1=d1, x_fcdec2=d2)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        state = self.state_dict()
        if set(state) != set(arrays):
            raise CheckpointError(
                "parameter names do not match this explainer architecture"
            )
        self.load_state_dict(
            {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in arrays.items()}
        )


def new_explainer(
    arch: ExplainerArch,
    bank: TemplateBank | None = None,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
) -> ExplainerNet:
    net = ExplainerNet(arch, bank, dtype=dtype)
    seeded_uniform_init_(net, np.random.default_rng(np.random.SeedSequence([seed, 21])))
    with torch.no_grad():
        net.alpha.fill_(1.0)  # neutral norm scale
        net.w_p.fill_(0.0)  # p starts at 0.5
    return net.to(dtype)


def save_explainer(
    net: ExplainerNet,
    out_dir: Path | str,
    *,
    seed: int,
    performer_digest: str,
    assignment: np.ndarray,
    metrics: dict,
    extra: dict | None = None,
) -> Path:
    arch = net.arch.to_dict()
    meta = {
        "arch": arch,
        "arch_hash": checkpoints.arch_hash(arch),
        "seed": seed,
        "performer_digest": performer_digest,
        "template_constants": net.bank.constants(),
        "assignment": [int(c) for c in assignment],
        "reconstruction_target": "post_relu",
        "metrics": metrics,
    }
    if extra:
        meta.update(extra)
    return checkpoints.save_archive(out_dir, "explainer", net.state_arrays(), meta)


def load_explainer(ckpt_dir: Path | str) -> tuple[ExplainerNet, dict]:
    arrays, meta, _ = checkpoints.load_archive(ckpt_dir, expected_kind="explainer")
    if checkpoints.arch_hash(meta["arch"]) != meta["arch_hash"]:
        raise CheckpointError("architecture hash mismatch; manifest was altered")
    arch = ExplainerArch.from_dict(meta["arch"])
    tc = meta["template_constants"]
    dtype = torch_dtype_of(next(iter(arrays.values())))
    bank = build_template_bank(
        tc["n"],
        tau=tc["tau"],
        beta=tc["beta"],
        positive_mass=tc["positive_mass"],
        score_temperature=tc["score_temperature"],
        dtype=dtype,
    )
    net = ExplainerNet(arch, bank, dtype=dtype)
    net.load_state_arrays(arrays)
    net.eval()
    return net, meta
