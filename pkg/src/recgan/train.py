"""Losses, alternating adversarial training, checkpoints and inference."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import autodiff as ad
from . import nets
from .dataset import Entry, Manifest, ManifestError, load_pair
from .grid import DimensionError, OccupancyGrid, ProbGrid, iou
from .nets import ArchConfig

log = logging.getLogger(__name__)

LOSS_HEADER = ("step", "l_en", "l_gan_g", "l_gan_d", "gp")
CLAMP = 1e-7


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 0.85
    beta: float = 0.2
    lam: float = 10.0
    lr_d: float = 5e-5
    lr_g: float = 1e-4
    batch: int = 4
    epochs: int = 100
    steps: int = 0  # overrides epochs when > 0
    seed: int = 0
    mode: str = "recgan"
    ckpt_every: int = 500
    validate: bool = True

    def __post_init__(self):
        if not 0 < self.alpha < 1 or not 0 < self.beta <= 1:
            raise ValueError("alpha must lie in (0,1) and beta in (0,1]")
        if self.lam < 0 or self.batch < 1 or self.ckpt_every < 1:
            raise ValueError("lam must be >= 0, batch and ckpt_every >= 1")
        if self.epochs < 1 or self.steps < 0:
            raise ValueError("epochs must be >= 1 and steps >= 0")
        if self.mode not in ("recgan", "recae"):
            raise ValueError(f"mode must be recgan or recae, got {self.mode!r}")
        if self.lr_d <= 0 or self.lr_g <= 0:
            raise ValueError("learning rates must be positive")


# ---------------------------------------------------------------------------
# losses

def loss_en(y: torch.Tensor, target: torch.Tensor, alpha: float) -> torch.Tensor:
    """Weighted binary cross-entropy, averaged over every voxel."""
    if y.shape != target.shape:
        raise DimensionError(f"loss_en: shapes {tuple(y.shape)} and {tuple(target.shape)} differ")
    y = y.clamp(CLAMP, 1 - CLAMP)
    t = target.to(y.dtype)
    return torch.mean(-alpha * t * torch.log(y) - (1 - alpha) * (1 - t) * torch.log1p(-y))


def loss_gan_g(m_fake: torch.Tensor) -> torch.Tensor:
    if m_fake.numel() == 0:
        raise ValueError("empty batch")
    return -m_fake.mean()


def gradient_penalty(d_params: dict, y_hat: torch.Tensor, x: torch.Tensor,
                     cfg: ArchConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean of (||grad_yhat D(yhat|x)|| - 1)^2 per sample; differentiable w.r.t. ``d_params``."""
    if not y_hat.requires_grad:
        y_hat = y_hat.detach().requires_grad_()
    m, _ = nets.discriminator_forward(y_hat, x, d_params, cfg)
    g = ad.input_gradient(m.sum(), y_hat)
    norms = torch.linalg.vector_norm(g.reshape(g.shape[0], -1), dim=1)
    return torch.mean((norms - 1) ** 2), norms


def loss_gan_d(m_fake: torch.Tensor, m_real: torch.Tensor, gp: torch.Tensor,
               lam: float) -> torch.Tensor:
    return m_fake.mean() - m_real.mean() + lam * gp


def loss_g(l_en, l_gan_g, beta: float):
    return beta * l_en + (1 - beta) * l_gan_g


# ---------------------------------------------------------------------------
# state and checkpoints

@dataclass
class TrainState:
    arch: ArchConfig
    config: TrainConfig
    g: dict
    d: dict | None
    adam_g: ad.AdamState
    adam_d: ad.AdamState | None
    step: int = 0

    @classmethod
    def fresh(cls, arch: ArchConfig, config: TrainConfig) -> "TrainState":
        g = nets.init_generator(arch, _derive(config.seed, 0))
        state = cls(arch, config, g, None, ad.AdamState.for_params(g, config.lr_g), None)
        if config.mode == "recgan":
            state.ensure_discriminator()
        return state

    def ensure_discriminator(self) -> None:
        if self.d is None:
            self.d = nets.init_discriminator(self.arch, _derive(self.config.seed, 1))
            self.adam_d = ad.AdamState.for_params(self.d, self.config.lr_d)


def _derive(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    tensors: dict = {}
    for prefix, params, adam in (("g", state.g, state.adam_g), ("d", state.d, state.adam_d)):
        if params is None:
            continue
        for name, p in params.items():
            tensors[f"{prefix}/{name}"] = p
            tensors[f"adam_{prefix}/m/{name}"] = adam.m[name]
            tensors[f"adam_{prefix}/v/{name}"] = adam.v[name]
    meta = {"step": state.step, "adam_g_t": state.adam_g.t,
            "adam_d_t": state.adam_d.t if state.adam_d else None}
    tensors["meta/arch"] = ad.blob_tensor(state.arch.to_json().encode())
    tensors["meta/train"] = ad.blob_tensor(json.dumps(asdict(state.config), sort_keys=True).encode())
    tensors["meta/state"] = ad.blob_tensor(json.dumps(meta, sort_keys=True).encode())
    ad.save_tensors(tensors, path)


def _meta(tensors: dict, key: str) -> dict:
    return json.loads(ad.tensor_blob(tensors[key]).decode())


def load_checkpoint(path: str | Path, config: TrainConfig | None = None) -> TrainState:
    """Restore training state; ``config`` (e.g. from the CLI) overrides the stored one."""
    tensors = ad.load_tensors(path)
    arch = ArchConfig(**_meta(tensors, "meta/arch"))
    stored = TrainConfig(**_meta(tensors, "meta/train"))
    config = config or stored
    meta = _meta(tensors, "meta/state")

    def group(prefix):
        out = {k[len(prefix) + 1:]: v.clone() for k, v in tensors.items()
               if k.startswith(prefix + "/")}
        return {k: v.requires_grad_() for k, v in out.items()} if prefix in ("g", "d") else out

    g = group("g")
    adam_g = ad.AdamState(lr=config.lr_g, t=meta["adam_g_t"], m=group("adam_g/m"), v=group("adam_g/v"))
    d = group("d") or None
    adam_d = None
    if d is not None:
        adam_d = ad.AdamState(lr=config.lr_d, t=meta["adam_d_t"], m=group("adam_d/m"),
                              v=group("adam_d/v"))
    return TrainState(arch, config, g, d, adam_g, adam_d, meta["step"])


def load_generator(path: str | Path) -> tuple[ArchConfig, dict]:
    """Generator weights and architecture only; the discriminator is never touched."""
    tensors = ad.load_tensors(path)
    arch = ArchConfig(**_meta(tensors, "meta/arch"))
    return arch, {k[2:]: v for k, v in tensors.items() if k.startswith("g/")}


# ---------------------------------------------------------------------------
# training

def _grids_to_tensor(grids: Sequence[OccupancyGrid]) -> torch.Tensor:
    return torch.from_numpy(np.stack([g.data for g in grids]).astype(np.float32))[:, None]


def train_step(state: TrainState, x: torch.Tensor, target: torch.Tensor) -> dict:
    """One discriminator update followed by one generator update (recgan), or a G update only."""
    cfg, arch = state.config, state.arch
    logs = {"step": state.step + 1}
    adversarial = cfg.mode == "recgan"
    if adversarial:
        state.ensure_discriminator()
        with torch.no_grad():
            fake = nets.generator_forward(x, state.g, arch)
        gen = torch.Generator().manual_seed(_derive(cfg.seed, 2, state.step))
        eps = torch.rand((x.shape[0], 1, 1, 1, 1), generator=gen, dtype=fake.dtype)
        m_fake, _ = nets.discriminator_forward(fake, x, state.d, arch)
        m_real, _ = nets.discriminator_forward(target, x, state.d, arch)
        y_hat = (eps * target + (1 - eps) * fake).requires_grad_()
        gp, _ = gradient_penalty(state.d, y_hat, x, arch)
        l_d = loss_gan_d(m_fake, m_real, gp, cfg.lam)
        ad.adam_step(state.d, ad.backward(l_d, state.d), state.adam_d)
        logs.update(l_gan_d=l_d.item(), gp=gp.item())

    y = nets.generator_forward(x, state.g, arch)
    l_en = loss_en(y, target, cfg.alpha)
    if adversarial:
        m_fake, _ = nets.discriminator_forward(y, x, state.d, arch)
        l_gg = loss_gan_g(m_fake)
        l_g = loss_g(l_en, l_gg, cfg.beta)
        logs["l_gan_g"] = l_gg.item()
    else:
        l_g = l_en
    ad.adam_step(state.g, ad.backward(l_g, state.g), state.adam_g)
    logs["l_en"] = l_en.item()
    state.step += 1
    bad = {k: v for k, v in logs.items() if k != "step" and not math.isfinite(v)}
    if bad:
        raise TrainingDiverged(f"non-finite loss at step {state.step}: {bad}")
    return logs


def _format_row(logs: dict) -> list:
    return [logs["step"]] + [repr(logs[k]) if k in logs else "" for k in LOSS_HEADER[1:]]


def schedule(n_pairs: int, config: TrainConfig) -> tuple[int, int]:
    """(steps per epoch, total steps)."""
    per_epoch = math.ceil(n_pairs / config.batch)
    return per_epoch, config.steps if config.steps > 0 else per_epoch * config.epochs


def batch_indices(n_pairs: int, config: TrainConfig, step: int) -> np.ndarray:
    """Pair indices for a 0-based global step: seeded shuffle per epoch, then slicing."""
    per_epoch = math.ceil(n_pairs / config.batch)
    epoch, b = divmod(step, per_epoch)
    perm = np.random.default_rng(_derive(config.seed, 3, epoch)).permutation(n_pairs)
    return perm[b * config.batch:(b + 1) * config.batch]


def checkpoint_path(out_dir: str | Path, step: int) -> Path:
    return Path(out_dir) / f"ckpt_{step:06d}.rgpw"


def latest_checkpoint(out_dir: str | Path) -> Path | None:
    found = sorted(Path(out_dir).glob("ckpt_*.rgpw"))
    return found[-1] if found else None


def predict_batch(params: dict, arch: ArchConfig, grids: Sequence[OccupancyGrid],
                  batch: int = 4) -> list[ProbGrid]:
    for g in grids:
        if g.resolution != arch.r_in:
            raise DimensionError(
                f"input resolution {g.resolution} does not match the network's {arch.r_in}")
    out = []
    with torch.no_grad():
        for i in range(0, len(grids), batch):
            y = nets.generator_forward(_grids_to_tensor(grids[i:i + batch]), params, arch)
            out.extend(ProbGrid(v[0].numpy()) for v in y.to(torch.float32))
    return out


def predict(x: OccupancyGrid, checkpoint: str | Path) -> ProbGrid:
    arch, params = load_generator(checkpoint)
    return predict_batch(params, arch, [x])[0]


def train_loop(root: str | Path, manifest: Manifest, arch: ArchConfig, config: TrainConfig,
               out_dir: str | Path, resume: str | Path | None = None,
               on_step: Callable[[dict], None] | None = None) -> TrainState:
    """Train on the manifest's ``train`` split, writing checkpoints and ``loss.csv`` to ``out_dir``."""
    entries: list[Entry] = manifest.select("train")
    if not entries:
        raise ManifestError("manifest has no training pairs")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    state = load_checkpoint(resume, config) if resume else TrainState.fresh(arch, config)
    if state.config.mode == "recgan":
        state.ensure_discriminator()
    per_epoch, total = schedule(len(entries), config)
    val_entries = manifest.select("val-SV")

    loss_path = out_dir / "loss.csv"
    rows = []
    if resume and loss_path.exists():
        with open(loss_path) as fh:
            rows = [r for r in csv.reader(fh)][1:]
        rows = [r for r in rows if int(r[0]) <= state.step]
    val_path = out_dir / "val.csv"
    val_rows = []
    if resume and val_path.exists():
        with open(val_path) as fh:
            val_rows = [r for r in csv.reader(fh)][1:]
        val_rows = [r for r in val_rows if int(r[1]) <= state.step]

    def flush():
        with open(loss_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOSS_HEADER)
            w.writerows(rows)
        if val_rows:
            with open(val_path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(("epoch", "step", "iou"))
                w.writerows(val_rows)

    while state.step < total:
        idx = batch_indices(len(entries), config, state.step)
        loaded = [load_pair(root, entries[i]) for i in idx]
        x = _grids_to_tensor([p for p, _ in loaded])
        target = _grids_to_tensor([f for _, f in loaded])
        step = state.step + 1
        try:
            logs = train_step(state, x, target)
        except TrainingDiverged as exc:
            dump = out_dir / f"diverged_step{step:06d}.json"
            dump.write_text(json.dumps({"error": str(exc), "step": step,
                                        "pairs": [entries[i].path for i in idx]}, indent=2))
            flush()
            raise
        rows.append(_format_row(logs))
        if on_step:
            on_step(logs)
        if state.step % per_epoch == 0 and config.validate and val_entries:
            epoch = state.step // per_epoch
            val_rows.append([epoch, state.step, repr(validation_iou(root, val_entries, state))])
        if state.step % config.ckpt_every == 0 or state.step == total:
            save_checkpoint(state, checkpoint_path(out_dir, state.step))
            flush()
    flush()
    return state


def validation_iou(root, entries: Sequence[Entry], state: TrainState, p: float = 0.5) -> float:
    pairs = [load_pair(root, e) for e in entries]
    preds = predict_batch(state.g, state.arch, [x for x, _ in pairs])
    return float(np.mean([iou(y, gt, p) for y, (_, gt) in zip(preds, pairs)]))
