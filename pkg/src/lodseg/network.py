"""Progressive level-of-detail (LOD) segmentation network.

Level 1 works at full resolution, level ``L`` on the input mean-pooled by
``d**(L-1)``. Each level is a small U-net with additive skips. A finer level
receives the next coarser level's last decoder features through a
transposed convolution (factor ``d``) that is summed into its first encoder
block. Levels are trained coarse to fine and frozen once done.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as nnf
from torch import nn


class ConfigError(ValueError):
    pass


FUSION_MODES = ("features", "probabilities")


@dataclass
class LODConfig:
    levels: int = 2
    down_factor: int = 4
    input_side: int = 256
    num_classes: int = 8
    # channels_per_level[l - 1] lists the U-net widths of level l, shallow to deep.
    channels_per_level: list[list[int]] = field(default_factory=lambda: [[8, 16, 32], [16, 32, 64]])
    convs_per_block: int = 2
    dropout_rate: float = 0.05
    norm_group_size: int = 4
    kernel_side: int = 3
    in_channels: int = 1
    fusion: str = "features"

    def __post_init__(self):
        self.channels_per_level = [[int(w) for w in ws] for ws in self.channels_per_level]

    def level_side(self, level: int) -> int:
        return self.input_side // self.down_factor ** (level - 1)

    def problems(self) -> list[str]:
        out = []
        if self.levels < 1:
            out.append(f"levels must be >= 1 (got {self.levels})")
        if self.down_factor < 2:
            out.append(f"down_factor must be >= 2 (got {self.down_factor})")
        if len(self.channels_per_level) != self.levels:
            out.append(
                f"channels_per_level has {len(self.channels_per_level)} entries for {self.levels} levels"
            )
        if self.convs_per_block < 1:
            out.append("convs_per_block must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            out.append(f"dropout_rate must be in [0, 1) (got {self.dropout_rate})")
        if self.kernel_side < 1 or self.kernel_side % 2 == 0:
            out.append(f"kernel_side must be odd and positive (got {self.kernel_side})")
        if self.norm_group_size < 1:
            out.append("norm_group_size must be >= 1")
        if self.fusion not in FUSION_MODES:
            out.append(f"fusion must be one of {FUSION_MODES} (got {self.fusion!r})")
        if self.num_classes < 2:
            out.append("num_classes must be >= 2")
        if out:
            return out
        total = self.down_factor ** (self.levels - 1)
        if self.input_side % total:
            out.append(
                f"input_side {self.input_side} not divisible by down_factor**(levels-1) = {total}"
            )
            return out
        for lvl, widths in enumerate(self.channels_per_level, start=1):
            if not widths or min(widths) < 1:
                out.append(f"level {lvl}: widths must be positive, got {widths}")
                continue
            stride = 2 ** (len(widths) - 1)
            side = self.level_side(lvl)
            if side % stride:
                out.append(
                    f"level {lvl}: grid side {side} not divisible by internal stride {stride}"
                )
        return out

    def validate(self) -> "LODConfig":
        problems = self.problems()
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LODConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown LODConfig keys: {unknown}")
        return cls(**d)


def norm_groups(channels: int, group_size: int) -> int:
    """Number of GroupNorm groups for ``channels``.

    ``channels // group_size`` when that divides evenly, otherwise the largest
    divisor of ``channels`` not above it.
    """
    target = max(1, channels // group_size)
    for g in range(target, 0, -1):
        if channels % g == 0:
            return g
    return 1


# -- parameter counting (closed form, no torch) -----------------------------


def _conv(cin, cout, k):
    return k**3 * cin * cout + cout


def _block(cin, cout, cfg: LODConfig):
    n = 0
    for i in range(cfg.convs_per_block):
        n += _conv(cin if i == 0 else cout, cout, cfg.kernel_side) + 2 * cout
    return n


def _level_params(cfg: LODConfig, level: int) -> int:
    ws = cfg.channels_per_level[level - 1]
    n = _block(cfg.in_channels, ws[0], cfg)
    for j in range(1, len(ws)):
        n += _conv(ws[j - 1], ws[j], 2) + _block(ws[j], ws[j], cfg)
    for j in range(len(ws) - 2, -1, -1):
        n += _conv(ws[j + 1], ws[j], 2) + _block(ws[j], ws[j], cfg)
    n += _conv(ws[0], cfg.num_classes, 1)
    if level < cfg.levels:
        src = cfg.channels_per_level[level][0] if cfg.fusion == "features" else cfg.num_classes
        n += _conv(src, ws[0], cfg.down_factor)
    return n


def parameter_count(cfg: LODConfig) -> int:
    return sum(_level_params(cfg, lvl) for lvl in range(1, cfg.levels + 1))


# -- modules ------------------------------------------------------------------


class FeatureBlock(nn.Module):
    """(conv -> group norm -> relu) x n, then dropout."""

    def __init__(self, cin, cout, cfg: LODConfig):
        super().__init__()
        self.n = cfg.convs_per_block
        pad = cfg.kernel_side // 2
        for i in range(self.n):
            self.add_module(
                f"conv{i}",
                nn.Conv3d(cin if i == 0 else cout, cout, cfg.kernel_side, padding=pad),
            )
            self.add_module(f"norm{i}", nn.GroupNorm(norm_groups(cout, cfg.norm_group_size), cout))
        self.drop = nn.Dropout(cfg.dropout_rate)

    def forward(self, x):
        for i in range(self.n):
            x = getattr(self, f"norm{i}")(getattr(self, f"conv{i}")(x))
            x = nnf.relu(x)
        return self.drop(x)


class Resample(nn.Module):
    def __init__(self, cin, cout, factor, up: bool):
        super().__init__()
        cls = nn.ConvTranspose3d if up else nn.Conv3d
        self.conv = cls(cin, cout, factor, stride=factor)

    def forward(self, x):
        return nnf.relu(self.conv(x))


class LevelNet(nn.Module):
    def __init__(self, cfg: LODConfig, level: int):
        super().__init__()
        self.level = level
        ws = cfg.channels_per_level[level - 1]
        self.depth = len(ws)
        self.enc0 = FeatureBlock(cfg.in_channels, ws[0], cfg)
        for j in range(1, self.depth):
            self.add_module(f"down{j}", Resample(ws[j - 1], ws[j], 2, up=False))
            self.add_module(f"enc{j}", FeatureBlock(ws[j], ws[j], cfg))
        for j in range(self.depth - 2, -1, -1):
            self.add_module(f"up{j}", Resample(ws[j + 1], ws[j], 2, up=True))
            self.add_module(f"dec{j}", FeatureBlock(ws[j], ws[j], cfg))
        self.head = nn.Module()
        self.head.conv = nn.Conv3d(ws[0], cfg.num_classes, 1)
        self.fusion_mode = cfg.fusion
        if level < cfg.levels:
            src = cfg.channels_per_level[level][0] if cfg.fusion == "features" else cfg.num_classes
            self.fusion = Resample(src, ws[0], cfg.down_factor, up=True)
        else:
            self.fusion = None

    def forward(self, x, coarse=None):
        """Return (decoder features, class probabilities).

        ``coarse`` is the (features, probabilities) pair of the next coarser level.
        """
        h = self.enc0(x)
        if self.fusion is not None:
            if coarse is None:
                raise ValueError(f"level {self.level} needs the coarser level's output")
            # Swap point for the inter-level connection: decoder features or
            # probability maps of the coarser level, selected by cfg.fusion.
            src = coarse[0] if self.fusion_mode == "features" else coarse[1]
            h = h + self.fusion(src)
        skips = [h]
        for j in range(1, self.depth):
            h = getattr(self, f"enc{j}")(getattr(self, f"down{j}")(h))
            skips.append(h)
        for j in range(self.depth - 2, -1, -1):
            h = getattr(self, f"up{j}")(h) + skips[j]
            h = getattr(self, f"dec{j}")(h)
        logits = self.head.conv(h)
        return h, torch.softmax(logits, dim=1)


def _init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.ConvTranspose3d):
            # Non-overlapping transposed conv: each output voxel sums cin inputs.
            nn.init.normal_(m.weight, 0.0, float(np.sqrt(2.0 / m.in_channels)))
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Conv3d):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            nn.init.zeros_(m.bias)


def mean_pool(x, factor: int):
    """Mean over non-overlapping factor**3 blocks; works on arrays or tensors.

    The last three axes are pooled.
    """
    if factor == 1:
        return x
    shape = tuple(x.shape)
    if any(s % factor for s in shape[-3:]):
        raise ValueError(f"grid {shape[-3:]} not divisible by {factor}")
    if torch.is_tensor(x):
        lead = shape[:-3]
        y = nnf.avg_pool3d(x.reshape((-1, 1) + shape[-3:]), factor)
        return y.reshape(lead + tuple(y.shape[-3:]))
    x = np.asarray(x)
    new = []
    for s in shape[-3:]:
        new += [s // factor, factor]
    y = x.reshape(shape[:-3] + tuple(new))
    n = len(shape) - 3
    return y.mean(axis=(n + 1, n + 3, n + 5))


def downsample_input(v, factor: int):
    data = getattr(v, "data", v)
    return mean_pool(data, factor)


def majority_pool(labels: np.ndarray, factor: int, num_classes: int) -> np.ndarray:
    """Most frequent label per factor**3 block; ties go to the smaller class id."""
    labels = np.asarray(labels)
    if factor == 1:
        return labels.copy()
    shape = labels.shape[-3:]
    if any(s % factor for s in shape):
        raise ValueError(f"grid {shape} not divisible by {factor}")
    lead = labels.shape[:-3]
    blocks = labels.reshape(lead + (shape[0] // factor, factor, shape[1] // factor, factor,
                                    shape[2] // factor, factor))
    n = len(lead)
    blocks = np.moveaxis(blocks, (n + 1, n + 3, n + 5), (-3, -2, -1))
    blocks = blocks.reshape(blocks.shape[:-3] + (-1,))
    counts = np.stack([(blocks == c).sum(axis=-1) for c in range(num_classes)], axis=-1)
    return counts.argmax(axis=-1).astype(labels.dtype)


class LODNetwork(nn.Module):
    def __init__(self, cfg: LODConfig, seed: int | None = 0):
        super().__init__()
        self.cfg = cfg.validate()
        self.levels = nn.ModuleDict(
            {f"level{lvl}": LevelNet(cfg, lvl) for lvl in range(1, cfg.levels + 1)}
        )
        if seed is None:
            _init_weights(self)
        else:
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(seed)
                _init_weights(self)
        self.frozen_levels: set[int] = set()

    # -- freezing ---------------------------------------------------------

    def level(self, lvl: int) -> LevelNet:
        self._check_level(lvl)
        return self.levels[f"level{lvl}"]

    def _check_level(self, lvl: int) -> None:
        if not 1 <= int(lvl) <= self.cfg.levels:
            raise ValueError(f"level must be in [1, {self.cfg.levels}], got {lvl}")

    def freeze_level(self, lvl: int) -> None:
        mod = self.level(lvl)
        for p in mod.parameters():
            p.requires_grad_(False)
            p.grad = None
        mod.eval()
        self.frozen_levels.add(int(lvl))

    def unfreeze_level(self, lvl: int) -> None:
        mod = self.level(lvl)
        for p in mod.parameters():
            p.requires_grad_(True)
        mod.train(self.training)
        self.frozen_levels.discard(int(lvl))

    def train(self, mode: bool = True):
        super().train(mode)
        # Frozen levels stay deterministic (no dropout) while finer levels train.
        for lvl in self.frozen_levels:
            self.levels[f"level{lvl}"].eval()
        return self

    # -- naming -----------------------------------------------------------

    @staticmethod
    def export_name(torch_name: str) -> str:
        """'levels.level1.enc0.conv0.weight' -> 'level1/enc0/conv0.weight'."""
        parts = torch_name.split(".")
        if parts[0] == "levels":
            parts = parts[1:]
        return "/".join(parts[:-2]) + "/" + ".".join(parts[-2:])

    def named_level_parameters(self, lvl: int):
        prefix = f"levels.level{lvl}."
        return [(n, p) for n, p in self.named_parameters() if n.startswith(prefix)]

    def export_state(self) -> dict[str, np.ndarray]:
        return {
            self.export_name(n): p.detach().cpu().numpy().copy()
            for n, p in self.named_parameters()
        }

    def import_state(self, params: dict[str, np.ndarray], levels: Sequence[int] | None = None,
                     strict: bool = True) -> None:
        own = dict(self.named_parameters())
        wanted = None if levels is None else {f"level{lvl}/" for lvl in levels}
        expected = {self.export_name(n): n for n in own}
        if wanted is not None:
            expected = {k: v for k, v in expected.items()
                        if any(k.startswith(w) for w in wanted)}
        missing = sorted(set(expected) - set(params))
        if strict and missing:
            raise KeyError(f"missing parameters: {missing[:5]}{'...' if len(missing) > 5 else ''}")
        for ename, tname in expected.items():
            if ename not in params:
                continue
            arr = np.asarray(params[ename])
            p = own[tname]
            if tuple(arr.shape) != tuple(p.shape):
                raise ValueError(f"{ename}: shape {arr.shape} != {tuple(p.shape)}")
            with torch.no_grad():
                p.copy_(torch.from_numpy(arr).to(p.dtype))

    # -- inference --------------------------------------------------------

    def _as_input(self, x):
        if not torch.is_tensor(x):
            x = torch.as_tensor(np.asarray(x, dtype=np.float32))
        if x.ndim == 3:
            x = x[None, None]
        elif x.ndim == 4:
            x = x[:, None]
        side = self.cfg.input_side
        if x.ndim != 5 or tuple(x.shape[1:]) != (self.cfg.in_channels, side, side, side):
            raise ValueError(
                f"input shape {tuple(x.shape)} does not match "
                f"(B, {self.cfg.in_channels}, {side}, {side}, {side})"
            )
        p = next(self.parameters())
        return x.to(dtype=p.dtype, device=p.device)

    def forward(self, x, level: int = 1, return_all: bool = False):
        """Class probabilities at ``level``'s resolution (level 1 = full size)."""
        self._check_level(level)
        x = self._as_input(x)
        d = self.cfg.down_factor
        outputs = {}
        coarse = None
        for lvl in range(self.cfg.levels, level - 1, -1):
            xl = mean_pool(x, d ** (lvl - 1))
            mod = self.levels[f"level{lvl}"]
            if lvl in self.frozen_levels and torch.is_grad_enabled():
                with torch.no_grad():
                    coarse = mod(xl, coarse)
            else:
                coarse = mod(xl, coarse)
            outputs[lvl] = coarse[1]
        return outputs if return_all else outputs[level]

    @torch.no_grad()
    def predict(self, x, level: int = 1) -> np.ndarray:
        """Inference-mode probabilities as an array (C, s, s, s) or (B, C, s, s, s)."""
        was = self.training
        self.eval()
        try:
            single = not torch.is_tensor(x) and np.ndim(x) == 3
            out = self.forward(x, level=level).cpu().numpy()
        finally:
            self.train(was)
        return out[0] if single else out


def build(cfg: LODConfig, seed: int | None = 0) -> LODNetwork:
    return LODNetwork(cfg, seed=seed)


def level_output(model: LODNetwork, x, level: int) -> np.ndarray:
    model._check_level(level)
    return model.predict(x, level=level)


def freeze_level(model: LODNetwork, level: int) -> None:
    model.freeze_level(level)


def unfreeze_level(model: LODNetwork, level: int) -> None:
    model.unfreeze_level(level)
