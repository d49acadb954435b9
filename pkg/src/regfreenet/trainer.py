"""Training loop: masked random crops, AdamW, linear warmup + cosine annealing.

Every source of randomness is derived from ``(seed, step)`` or
``(seed, epoch)``, so a run resumed from a checkpoint replays the same samples,
crops and dropout masks as an uninterrupted run.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .core import (
    BinaryMask,
    ConfigError,
    LeakageError,
    FormatError,
    SlopePair,
    VoxelVolume,
    crop,
    data_root,
    load_landmarks,
    load_volume,
)
from .inference import predict_volume
from .labelgen import MaskingConfig, jitter_mask, mask_implant, rasterize_all
from .metrics import binarize, dice_score, iou_score
from .network import NetworkConfig, RegFreeNet, build_model
from .objectives import total_loss
from .slope import slopes_from_label

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int
    warmup_steps: int = 0
    batch_size: int = 4
    base_lr: float = 3e-4
    weight_decay: float = 5e-5
    crop_size: tuple[int, int, int] = (128, 128, 128)
    seed: int = 0
    fg_fraction: float = 0.5
    fg_mode: str = "voxel"
    centroid_jitter: int = 4
    slope_weight: float = 1.0
    ce_normalize: bool = True
    checkpoint_every: int = 100
    masking: MaskingConfig = field(default_factory=MaskingConfig)

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError("need 0 <= warmup_steps < total_steps")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be > 0")
        if self.fg_mode not in ("voxel", "centroid"):
            raise ConfigError(f"fg_mode must be 'voxel' or 'centroid', got {self.fg_mode!r}")
        if not 0 <= self.fg_fraction <= 1 or self.centroid_jitter < 0:
            raise ConfigError("need 0 <= fg_fraction <= 1 and centroid_jitter >= 0")
        size = self.crop_size
        size = (int(size),) * 3 if isinstance(size, (int, np.integer)) else tuple(int(s) for s in size)
        masking = self.masking if isinstance(self.masking, MaskingConfig) else MaskingConfig(**self.masking)
        object.__setattr__(self, "crop_size", size)
        object.__setattr__(self, "masking", masking)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear ramp 0 -> base_lr over the warmup, then cosine decay to 0."""
    if not 0 <= step <= config.total_steps:
        raise ValueError(f"step {step} outside [0, {config.total_steps}]")
    w, t = config.warmup_steps, config.total_steps
    if step < w:
        return config.base_lr * step / w
    return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * (step - w) / (t - w)))


# --- data ---------------------------------------------------------------------

@dataclass
class Sample:
    scan_id: str
    patient_id: str
    split: str
    volume: VoxelVolume
    label: BinaryMask


def check_split_integrity(samples: Sequence[Sample]) -> None:
    """Refuse any patient or scan that appears in more than one split."""
    for attr in ("patient_id", "scan_id"):
        seen: dict[str, str] = {}
        for s in samples:
            key = getattr(s, attr)
            if key in seen and seen[key] != s.split:
                raise LeakageError(f"{attr} {key!r} appears in both {seen[key]!r} and {s.split!r}")
            seen[key] = s.split


def load_manifest(path, radius: float = 14) -> list[Sample]:
    """Read a tab/space separated manifest of ``volume landmarks split patient_id``.

    Relative paths resolve against ``$REGFREE_DATA_ROOT`` when set, otherwise
    against the manifest's directory. Labels are rasterized from landmarks.
    """
    path = Path(path)
    root = data_root() or path.parent
    samples = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise FormatError(f"{path}:{n}: expected 4 fields, got {len(parts)}")
        vol_path, lm_path, split, patient = parts
        vol = load_volume(root / vol_path)
        lms = load_landmarks(root / lm_path)
        label = rasterize_all(lms, vol.shape, radius)
        samples.append(Sample(Path(vol_path).stem, patient, split, vol, label))
    check_split_integrity(samples)
    return samples


def _pad_symmetric(arr: np.ndarray, size) -> np.ndarray:
    pads = []
    for n, c in zip(arr.shape, size):
        total = max(c - n, 0)
        pads.append((total // 2, total - total // 2))
    return np.pad(arr, pads) if any(p != (0, 0) for p in pads) else arr


def sample_crop_origin(
    label: np.ndarray,
    size,
    fg_fraction: float,
    rng: np.random.Generator,
    mode: str = "voxel",
    jitter: int = 4,
):
    """Pick a crop origin, forcing foreground with probability ``fg_fraction``.

    ``mode="voxel"`` draws a label voxel and then any crop that contains it.
    ``mode="centroid"`` centres the crop on the label centroid, shifted by up
    to ``jitter`` voxels per axis, so the whole implant tends to be in view.
    """
    fg = rng.random() < fg_fraction
    idx = np.flatnonzero(label) if fg else ()
    if len(idx) and mode == "centroid":
        centre = np.argwhere(label).mean(0)
        shift = rng.integers(-jitter, jitter + 1, size=3)
        return tuple(int(np.clip(round(c - s / 2) + d, 0, n - s))
                     for c, d, s, n in zip(centre, shift, size, label.shape))
    if len(idx):
        voxel = np.unravel_index(idx[rng.integers(len(idx))], label.shape)
        lo = [max(0, v - c + 1) for v, c in zip(voxel, size)]
        hi = [min(v, n - c) for v, n, c in zip(voxel, label.shape, size)]
    else:
        lo = [0, 0, 0]
        hi = [n - c for n, c in zip(label.shape, size)]
    return tuple(int(rng.integers(a, b + 1)) for a, b in zip(lo, hi))


def make_training_sample(
    volume: VoxelVolume,
    label: BinaryMask,
    config: TrainConfig,
    rng: np.random.Generator,
) -> tuple[VoxelVolume, BinaryMask, SlopePair]:
    """Mask a jittered copy of the implant, then take an aligned crop.

    The slope target comes from the whole label, not the crop.
    """
    if volume.shape != label.shape:
        raise ValueError(f"volume {volume.shape} vs label {label.shape}")
    slopes = slopes_from_label(label)
    region = jitter_mask(label, config.masking, rng)
    masked = mask_implant(volume, region, config.masking)
    size = config.crop_size
    vol_arr = _pad_symmetric(masked.data, size)
    lab_arr = _pad_symmetric(label.data, size)
    origin = sample_crop_origin(lab_arr, size, config.fg_fraction, rng, config.fg_mode, config.centroid_jitter)
    vol_c = crop(VoxelVolume(vol_arr, volume.spacing), origin, size)
    lab_c = crop(BinaryMask(lab_arr), origin, size)
    return vol_c, lab_c, slopes


def _batch_indices(step: int, n: int, batch_size: int, seed: int) -> list[int]:
    out = []
    for pos in range(step * batch_size, (step + 1) * batch_size):
        epoch, i = divmod(pos, n)
        perm = np.random.default_rng((seed, 1, epoch)).permutation(n)
        out.append(int(perm[i]))
    return out


def make_batch(samples: Sequence[Sample], step: int, config: TrainConfig, dtype=torch.float32):
    rng = np.random.default_rng((config.seed, 2, step))
    xs, ys, ks = [], [], []
    for i in _batch_indices(step, len(samples), config.batch_size, config.seed):
        v, y, k = make_training_sample(samples[i].volume, samples[i].label, config, rng)
        xs.append(v.data)
        ys.append(y.data)
        ks.append(k.as_array())
    x = torch.as_tensor(np.stack(xs)[:, None], dtype=dtype)
    y = torch.as_tensor(np.stack(ys)[:, None], dtype=dtype)
    k = torch.as_tensor(np.stack(ks), dtype=dtype)
    return x, y, k


# --- evaluation ----------------------------------------------------------------

def evaluate(
    model: RegFreeNet,
    samples: Sequence[Sample],
    masking: MaskingConfig | None = None,
    window=None,
    overlap: float = 0.25,
    threshold: float = 0.5,
) -> dict:
    """Mask each scan with its own label (no jitter) and score whole-volume predictions."""
    masking = masking or MaskingConfig()
    window = window or model.config.input_size
    rows = []
    for s in samples:
        masked = mask_implant(s.volume, s.label, masking)
        prob, k = predict_volume(masked, model, window, overlap)
        pred = binarize(prob, threshold)
        row = {"scan": s.scan_id, "dice": dice_score(pred, s.label), "iou": iou_score(pred, s.label)}
        if k is not None:
            truth = slopes_from_label(s.label)
            row["slope_ae"] = abs(k.k1 - truth.k1) + abs(k.k2 - truth.k2)
            row["slope_mae"] = row["slope_ae"] / 2
        rows.append(row)
    out = {
        "n_scans": len(rows),
        "dice": float(np.mean([r["dice"] for r in rows])) if rows else float("nan"),
        "iou": float(np.mean([r["iou"] for r in rows])) if rows else float("nan"),
        "scans": rows,
    }
    if rows and "slope_mae" in rows[0]:
        out["slope_mae"] = float(np.mean([r["slope_mae"] for r in rows]))
    return out


# --- training --------------------------------------------------------------------

def run_fingerprint(net_cfg: NetworkConfig, train_cfg: TrainConfig) -> str:
    blob = json.dumps({"net": net_cfg.to_dict(), "train": train_cfg.to_dict()}, sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class TrainResult:
    model: RegFreeNet
    history: list[dict]
    step: int
    checkpoint: Path | None = None


def save_checkpoint(path, model, optimizer, step, net_cfg, train_cfg, history) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    torch.save(
        {
            "step": step,
            "model": model.state_dict(),
            "optimizer": optimizer.state_dict() if optimizer is not None else None,
            "net_config": net_cfg.to_dict(),
            "train_config": train_cfg.to_dict() if train_cfg is not None else None,
            "fingerprint": run_fingerprint(net_cfg, train_cfg) if train_cfg is not None else None,
            "history": history,
        },
        tmp,
    )
    tmp.replace(path)
    return path


def load_model(path, dtype=torch.float32) -> RegFreeNet:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    model = RegFreeNet(NetworkConfig.from_dict(ckpt["net_config"])).to(dtype)
    model.load_state_dict(ckpt["model"])
    model.eval()
    return model


def _write_log(out_dir: Path, history: list[dict]) -> None:
    lines = ["step\tlr\tloss\tseg_loss\tslope_loss"]
    for h in history:
        lines.append(f"{h['step']}\t{h['lr']:.6e}\t{h['loss']:.8f}\t{h['seg_loss']:.8f}\t{h['slope_loss']:.8f}")
    (out_dir / "loss_log.tsv").write_text("\n".join(lines) + "\n")


def train(
    samples: Sequence[Sample],
    train_cfg: TrainConfig,
    net_cfg: NetworkConfig,
    out_dir=None,
    resume: bool = False,
    max_steps: int | None = None,
    callback: Callable[[int, RegFreeNet, list[dict]], bool] | None = None,
    dtype=torch.float32,
) -> TrainResult:
    """Train on the ``train`` split of ``samples``.

    ``max_steps`` stops after that many steps of this invocation (the schedule
    still spans ``total_steps``). ``callback(step, model, history)`` returning
    True ends training early.
    """
    check_split_integrity(samples)
    train_set = [s for s in samples if s.split == "train"]
    if not train_set:
        raise ValueError("no training samples")
    if net_cfg.use_spb and tuple(train_cfg.crop_size) != net_cfg.input_size:
        raise ConfigError(f"crop size {train_cfg.crop_size} must equal network input {net_cfg.input_size}")

    out_dir = Path(out_dir) if out_dir is not None else None
    model = build_model(net_cfg, seed=train_cfg.seed, dtype=dtype)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=train_cfg.base_lr, weight_decay=train_cfg.weight_decay
    )
    history: list[dict] = []
    start = 0
    ckpt_path = out_dir / "last.pt" if out_dir is not None else None
    if resume:
        if ckpt_path is None or not ckpt_path.exists():
            raise FileNotFoundError(f"nothing to resume in {out_dir}")
        ckpt = torch.load(ckpt_path, map_location="cpu", weights_only=False)
        if ckpt["fingerprint"] != run_fingerprint(net_cfg, train_cfg):
            raise ConfigError("checkpoint was written with a different configuration")
        model.load_state_dict(ckpt["model"])
        optimizer.load_state_dict(ckpt["optimizer"])
        start, history = ckpt["step"], list(ckpt["history"])
        log.info("resumed from step %d", start)

    end = train_cfg.total_steps if max_steps is None else min(train_cfg.total_steps, start + max_steps)
    step = start
    model.train()
    for step in range(start, end):
        x, y, k = make_batch(train_set, step, train_cfg, dtype)
        lr = lr_at(step + 1, train_cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        torch.manual_seed(train_cfg.seed * 1_000_003 + step)
        prob, k_hat = model(x)
        loss = total_loss(
            prob, y, k_hat, k,
            use_spb=net_cfg.use_spb,
            slope_weight=train_cfg.slope_weight,
            ce_normalize=train_cfg.ce_normalize,
        )
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        with torch.no_grad():
            seg = total_loss(prob, y, use_spb=False, ce_normalize=train_cfg.ce_normalize).item()
        history.append(
            {"step": step + 1, "lr": lr, "loss": loss.item(), "seg_loss": seg, "slope_loss": loss.item() - seg}
        )
        done = step + 1
        if out_dir is not None and (done % train_cfg.checkpoint_every == 0 or done == end):
            save_checkpoint(ckpt_path, model, optimizer, done, net_cfg, train_cfg, history)
            _write_log(out_dir, history)
        if callback is not None and callback(done, model, history):
            if out_dir is not None:
                save_checkpoint(ckpt_path, model, optimizer, done, net_cfg, train_cfg, history)
                _write_log(out_dir, history)
            step = done
            break
    else:
        step = end
    model.eval()
    return TrainResult(model, history, step, ckpt_path)
