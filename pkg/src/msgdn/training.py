"""Training harness for the objective (L1 -> MSE) and GAN (L1 -> hybrid) tracks."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import random
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .adversarial import Discriminator, DiscriminatorConfig, discriminator_loss, relativistic_d
from .archive import load_archive, load_state_strict, save_archive, split_prefix, with_prefix
from .data import DatasetManifest, crop, load_rgb, random_window
from .errors import ConfigError, TrainingError
from .losses import (FeatureExtractor, FeatureExtractorSpec, HybridLossWeights, hybrid_loss,
                     l1_loss, mse_loss)
from .model import MSGDN, ModelConfig, load_generator

log = logging.getLogger(__name__)

PHASE_LOSSES = ("l1", "mse", "hybrid")


@dataclass
class Phase:
    loss: str
    epochs: int

    def __post_init__(self):
        if self.loss not in PHASE_LOSSES:
            raise ConfigError(f"unknown phase loss {self.loss!r}; expected one of {PHASE_LOSSES}")
        if self.epochs < 1:
            raise ConfigError("phase epochs must be >= 1")


@dataclass
class TrainPlan:
    track: str = "objective"
    phases: List[Phase] = field(default_factory=lambda: [Phase("l1", 1)])
    batch_size: int = 8
    base_lr: float = 1e-4
    lr_decay_factor: float = 0.5
    lr_decay_every_epochs: int = 100
    betas: List[float] = field(default_factory=lambda: [0.9, 0.999])
    seed: int = 0
    deterministic: bool = True
    patch_size: int = 64
    identity_init: bool = True
    keep_checkpoints: int = 0  # newest N epoch checkpoints kept; 0 keeps all
    init_generator: Optional[str] = None
    model: ModelConfig = field(default_factory=ModelConfig)
    # GAN track only
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    loss_weights: HybridLossWeights = field(default_factory=HybridLossWeights)
    extractor: Optional[FeatureExtractorSpec] = None
    d_lr: Optional[float] = None
    d_steps_per_g: int = 1
    collapse_threshold: float = 0.99
    collapse_window: int = 50

    def __post_init__(self):
        self.phases = [p if isinstance(p, Phase) else Phase(**p) for p in self.phases]
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if isinstance(self.discriminator, dict):
            self.discriminator = DiscriminatorConfig(**self.discriminator)
        if isinstance(self.loss_weights, dict):
            self.loss_weights = HybridLossWeights(**self.loss_weights)
        if isinstance(self.extractor, dict):
            self.extractor = FeatureExtractorSpec(**self.extractor)
        self.betas = [float(b) for b in self.betas]
        if self.track not in ("objective", "gan"):
            raise ConfigError(f"unknown track {self.track!r}")
        if not self.phases:
            raise ConfigError("a plan needs at least one phase")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 < self.lr_decay_factor <= 1:
            raise ConfigError("lr_decay_factor must lie in (0, 1]")
        if self.keep_checkpoints < 0:
            raise ConfigError("keep_checkpoints must be >= 0")
        if self.lr_decay_every_epochs < 1 or self.d_steps_per_g < 1:
            raise ConfigError("lr_decay_every_epochs and d_steps_per_g must be >= 1")
        if self.track == "objective" and any(p.loss == "hybrid" for p in self.phases):
            raise ConfigError("hybrid phases belong to the gan track")
        if self.track == "gan" and self.discriminator.patch_size != self.patch_size:
            raise ConfigError(
                f"discriminator patch_size {self.discriminator.patch_size} != crop size {self.patch_size}"
            )

    @property
    def total_epochs(self) -> int:
        return sum(p.epochs for p in self.phases)

    def phase_at(self, epoch: int) -> Phase:
        for p in self.phases:
            if epoch < p.epochs:
                return p
            epoch -= p.epochs
        raise IndexError("epoch beyond the last phase")

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_file(cls, path) -> "TrainPlan":
        path = Path(path)
        text = path.read_text()
        if path.suffix == ".toml":
            import tomli

            data = tomli.loads(text)
        else:
            data = json.loads(text)
        return cls(**data)


def lr_at(epoch: int, plan: TrainPlan) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return plan.base_lr * plan.lr_decay_factor ** (epoch // plan.lr_decay_every_epochs)


def set_deterministic(seed: int, enabled: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(enabled)


def grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(p.grad.detach().double().pow(2).sum())
    return math.sqrt(total)


def _check_finite(value: torch.Tensor, what: str, batch_ids, breakdown: Dict[str, float]) -> None:
    if not torch.isfinite(value):
        raise TrainingError(f"non-finite {what} on batch {list(batch_ids or [])}: {breakdown}")


def train_step_objective(model: MSGDN, optimizer: torch.optim.Optimizer, compressed: torch.Tensor,
                         original: torch.Tensor, loss: str = "l1", batch_ids=None) -> Dict[str, float]:
    """One optimizer update of the generator on an L1 or MSE objective."""
    if compressed.shape != original.shape:
        raise ConfigError(f"batch shapes differ: {tuple(compressed.shape)} vs {tuple(original.shape)}")
    fn = {"l1": l1_loss, "mse": mse_loss}.get(loss)
    if fn is None:
        raise ConfigError(f"objective loss must be l1 or mse, got {loss!r}")
    model.train()
    optimizer.zero_grad()
    out = model(compressed)
    value = fn(out, original)
    _check_finite(value, f"{loss} loss", batch_ids, {loss: value.item()})
    value.backward()
    gn = grad_norm(model.parameters())
    optimizer.step()
    v = value.item()
    return {"loss": v, loss: v, "grad_norm": gn}


def train_step_gan(model: MSGDN, g_opt: torch.optim.Optimizer, disc: Discriminator,
                   d_opt: torch.optim.Optimizer, compressed: torch.Tensor, original: torch.Tensor,
                   weights: HybridLossWeights, extractor: FeatureExtractor | None = None,
                   d_steps: int = 1, batch_ids=None) -> Dict[str, float]:
    """Discriminator update(s) on detached fakes, then one generator update on the hybrid loss."""
    if compressed.shape != original.shape:
        raise ConfigError(f"batch shapes differ: {tuple(compressed.shape)} vs {tuple(original.shape)}")
    model.train()
    disc.train()
    g_opt.zero_grad()
    fake = model(compressed)

    disc.requires_grad_(True)
    for _ in range(d_steps):
        d_opt.zero_grad()
        c_real = disc(original)
        c_fake = disc(fake.detach())
        d_loss = discriminator_loss(c_real, c_fake)
        _check_finite(d_loss, "discriminator loss", batch_ids, {"d_loss": d_loss.item()})
        d_loss.backward()
        d_opt.step()
    with torch.no_grad():
        d_real = float(relativistic_d(c_real, c_fake).mean())
        d_fake = float(relativistic_d(c_fake, c_real).mean())

    disc.requires_grad_(False)
    c_real_g = c_fake_g = None
    if weights.w_adv:
        c_real_g = disc(original).detach()
        c_fake_g = disc(fake)
    total, br = hybrid_loss(fake, original, c_real_g, c_fake_g, weights, extractor)
    _check_finite(total, "hybrid loss", batch_ids, {k: v.item() for k, v in br.items()})
    total.backward()
    gn = grad_norm(model.parameters())
    g_opt.step()
    disc.requires_grad_(True)
    return {
        "loss": total.item(),
        "l1": br["raw_l1"].item(),
        "adv": br["raw_adv"].item(),
        "perc": br["raw_perc"].item(),
        "d_loss": d_loss.item(),
        "d_real": d_real,
        "d_fake": d_fake,
        "grad_norm": gn,
    }


# --- optimizer state <-> archive -------------------------------------------

def _optim_tensors(opt: torch.optim.Optimizer, prefix: str):
    sd = opt.state_dict()
    tensors = {}
    for idx, st in sd["state"].items():
        for name, v in st.items():
            tensors[f"{prefix}.{idx}.{name}"] = torch.as_tensor(v)
    return tensors, sd["param_groups"]


def _optim_restore(opt: torch.optim.Optimizer, tensors, groups, prefix: str) -> None:
    state: Dict[int, Dict[str, torch.Tensor]] = {}
    for key, v in split_prefix(tensors, prefix).items():
        idx, name = key.split(".", 1)
        state.setdefault(int(idx), {})[name] = v
    opt.load_state_dict({"state": state, "param_groups": groups})


@dataclass
class Checkpoint:
    path: Path
    epoch: int
    global_step: int


class Trainer:
    """Owns generator/discriminator state for one run directory."""

    def __init__(self, plan: TrainPlan, manifest: DatasetManifest, out_dir):
        if not manifest.pairs:
            raise ConfigError("manifest has no pairs")
        self.plan = plan
        self.manifest = manifest
        self.out_dir = Path(out_dir)
        self.ckpt_dir = self.out_dir / "checkpoints"
        self.metrics_path = self.out_dir / "metrics.jsonl"
        set_deterministic(plan.seed, plan.deterministic)
        self.rng = np.random.default_rng(plan.seed)

        self.pairs = list(manifest.pairs)
        self.images = [
            (load_rgb(manifest.resolve(p.original_path)), load_rgb(manifest.resolve(p.compressed_path)))
            for p in self.pairs
        ]

        if plan.init_generator:
            self.model = load_generator(plan.init_generator)
            if self.model.config != plan.model:
                raise ConfigError("init_generator config differs from the plan's model config")
        else:
            self.model = MSGDN(plan.model)
            if plan.identity_init:
                self.model.zero_residual_()
        self.g_opt = torch.optim.Adam(self.model.parameters(), lr=plan.base_lr, betas=tuple(plan.betas))

        self.disc = self.d_opt = self.extractor = None
        if plan.track == "gan":
            self.disc = Discriminator(plan.discriminator)
            self.d_opt = torch.optim.Adam(self.disc.parameters(), lr=plan.d_lr or plan.base_lr,
                                          betas=tuple(plan.betas))
            if plan.loss_weights.w_perc:
                if plan.extractor is None:
                    raise ConfigError("gan plan with a perceptual weight needs an extractor spec")
                self.extractor = FeatureExtractor(plan.extractor)
        self.epoch = 0
        self.global_step = 0
        self._d_real_window: deque = deque(maxlen=plan.collapse_window)

    # -- batches --
    def epoch_batches(self):
        """One random patch per pair, in a shuffled order, grouped into batches."""
        order = self.rng.permutation(len(self.pairs))
        p = self.plan.patch_size
        crops = []
        for i in order:
            orig, comp = self.images[i]
            window = random_window(orig.shape[0], orig.shape[1], p, self.rng)
            crops.append((int(i), crop(orig, window, p), crop(comp, window, p)))
        bs = self.plan.batch_size
        for start in range(0, len(crops), bs):
            chunk = crops[start:start + bs]
            ids = [c[0] for c in chunk]
            orig = torch.from_numpy(np.stack([c[1] for c in chunk])).permute(0, 3, 1, 2).float() / 255.0
            comp = torch.from_numpy(np.stack([c[2] for c in chunk])).permute(0, 3, 1, 2).float() / 255.0
            yield ids, comp.contiguous(), orig.contiguous()

    def _set_lr(self, lr: float) -> None:
        for g in self.g_opt.param_groups:
            g["lr"] = lr
        if self.d_opt is not None:
            d_lr = lr * (self.plan.d_lr / self.plan.base_lr) if self.plan.d_lr else lr
            for g in self.d_opt.param_groups:
                g["lr"] = d_lr

    def step(self, phase: Phase, ids, comp, orig) -> Dict[str, float]:
        if phase.loss in ("l1", "mse"):
            return train_step_objective(self.model, self.g_opt, comp, orig, phase.loss, ids)
        metrics = train_step_gan(self.model, self.g_opt, self.disc, self.d_opt, comp, orig,
                                 self.plan.loss_weights, self.extractor, self.plan.d_steps_per_g, ids)
        self._d_real_window.append(metrics["d_real"])
        window = self._d_real_window
        collapsed = (len(window) == window.maxlen
                     and all(v > self.plan.collapse_threshold for v in window))
        if collapsed:
            log.warning("discriminator collapse: mean D(real) > %.2f for %d steps",
                        self.plan.collapse_threshold, window.maxlen)
        metrics["d_collapse"] = collapsed
        return metrics

    # -- checkpoints --
    def checkpoint_path(self, epoch: int) -> Path:
        return self.ckpt_dir / f"epoch_{epoch:04d}.safetensors"

    def save_checkpoint(self, path: Path | None = None) -> Path:
        self.ckpt_dir.mkdir(parents=True, exist_ok=True)
        path = path or self.checkpoint_path(self.epoch)
        tensors = with_prefix(self.model.state_dict(), "generator")
        g_t, g_groups = _optim_tensors(self.g_opt, "optim_g")
        tensors.update(g_t)
        meta = {
            "kind": "training",
            "generator": {"kind": "generator", "config": self.plan.model.to_dict(),
                          "fingerprint": self.plan.model.fingerprint()},
            "optim_g_groups": g_groups,
            "epoch": self.epoch,
            "global_step": self.global_step,
            "numpy_rng": self.rng.bit_generator.state,
            "plan_fingerprint": self.plan.fingerprint(),
            "d_real_window": list(self._d_real_window),
        }
        if self.disc is not None:
            tensors.update(with_prefix(self.disc.state_dict(), "discriminator"))
            d_t, d_groups = _optim_tensors(self.d_opt, "optim_d")
            tensors.update(d_t)
            meta["discriminator"] = {"kind": "discriminator", "config": self.plan.discriminator.to_dict()}
            meta["optim_d_groups"] = d_groups
        tensors["rng.torch"] = torch.get_rng_state()
        save_archive(path, tensors, meta)
        return path

    def load_checkpoint(self, path) -> None:
        tensors, meta = load_archive(path)
        if meta.get("kind") != "training":
            raise ConfigError(f"{path} is not a training checkpoint")
        if meta["plan_fingerprint"] != self.plan.fingerprint():
            raise ConfigError(f"{path} was written by a different plan; refusing to resume")
        load_state_strict(self.model, split_prefix(tensors, "generator"), f"generator in {path}")
        _optim_restore(self.g_opt, tensors, meta["optim_g_groups"], "optim_g")
        if self.disc is not None:
            load_state_strict(self.disc, split_prefix(tensors, "discriminator"), f"discriminator in {path}")
            _optim_restore(self.d_opt, tensors, meta["optim_d_groups"], "optim_d")
        torch.set_rng_state(tensors["rng.torch"])
        self.rng.bit_generator.state = meta["numpy_rng"]
        self.epoch = meta["epoch"]
        self.global_step = meta["global_step"]
        self._d_real_window = deque(meta.get("d_real_window", []), maxlen=self.plan.collapse_window)

    def _prune_checkpoints(self) -> None:
        keep = self.plan.keep_checkpoints
        if keep:
            for old in sorted(self.ckpt_dir.glob("epoch_*.safetensors"))[:-keep]:
                old.unlink()

    def latest_checkpoint(self) -> Optional[Path]:
        found = sorted(self.ckpt_dir.glob("epoch_*.safetensors"))
        return found[-1] if found else None

    def resume(self) -> bool:
        latest = self.latest_checkpoint()
        if latest is None:
            return False
        self.load_checkpoint(latest)
        # drop log lines written after the checkpoint
        if self.metrics_path.is_file():
            kept = [ln for ln in self.metrics_path.read_text().splitlines()
                    if ln and json.loads(ln)["step"] <= self.global_step]
            self.metrics_path.write_text("".join(ln + "\n" for ln in kept))
        log.info("resumed from %s (epoch %d, step %d)", latest, self.epoch, self.global_step)
        return True

    # -- main loop --
    def run(self, max_steps: int | None = None) -> Checkpoint | None:
        """Train to the end of the plan; checkpoints after every epoch.

        `max_steps` stops early (without a checkpoint) once that many global
        steps are done, which is how an interrupted run is simulated.
        """
        self.out_dir.mkdir(parents=True, exist_ok=True)
        with open(self.metrics_path, "a") as logf:
            while self.epoch < self.plan.total_epochs:
                phase = self.plan.phase_at(self.epoch)
                lr = lr_at(self.epoch, self.plan)
                self._set_lr(lr)
                for ids, comp, orig in self.epoch_batches():
                    if max_steps is not None and self.global_step >= max_steps:
                        return None
                    metrics = self.step(phase, ids, comp, orig)
                    self.global_step += 1
                    record = {"step": self.global_step, "epoch": self.epoch, "phase": phase.loss,
                              "loss_name": phase.loss, "lr": lr, "batch": ids, **metrics}
                    logf.write(json.dumps(record, sort_keys=True) + "\n")
                    logf.flush()
                self.epoch += 1
                path = self.save_checkpoint()
                self._prune_checkpoints()
        return Checkpoint(path, self.epoch, self.global_step)


def run(plan: TrainPlan, manifest: DatasetManifest, out_dir, resume: bool = False) -> Checkpoint:
    trainer = Trainer(plan, manifest, out_dir)
    if resume:
        trainer.resume()
    elif trainer.latest_checkpoint() is not None:
        raise ConfigError(f"{out_dir} already holds checkpoints; pass resume=True to continue")
    else:
        trainer.metrics_path.unlink(missing_ok=True)
    if trainer.epoch >= plan.total_epochs:
        path = trainer.latest_checkpoint()
        return Checkpoint(path, trainer.epoch, trainer.global_step)
    return trainer.run()
