"""Patch-based training loop with plateau learning-rate decay.

One "epoch" is a fixed number of sampled patches per training case since
patch sampling is unbounded.  The optimized objective is the Generalized
Dice Loss plus an explicit ``weight_decay * sum(theta^2)`` penalty, and the
learning rate is divided by ``plateau_factor`` whenever the validation loss
has not improved for ``plateau_patience`` epochs.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import __version__
from .augment import apply, sample_train_transform
from .errors import ConfigError, TrainingError
from .losses import generalized_dice_loss, one_hot_labels
from .nets import NetConfig, Network, build_network
from .sampling import check_strategy, default_strategy, extract_patch, sample_center
from .volume import Case

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("epoch", "train_loss", "val_loss", "lr", "patch_size")

Size = Tuple[int, int, int]

# (epoch fraction, patch size, batch size): 128^3 x1 for the first half, then 112^3 x2
MULTISCALE_PRESET = ((0.0, (128, 128, 128), 1), (0.5, (112, 112, 112), 2))


def scale_schedule(schedule, divisor: int, multiple: int = 4):
    """Shrink every patch size in ``schedule`` by ``divisor`` for toy runs,
    rounding to a positive multiple of ``multiple``."""
    out = []
    for frac, size, batch in schedule:
        scaled = tuple(max(multiple, int(round(s / divisor / multiple)) * multiple) for s in size)
        out.append((frac, scaled, batch))
    return tuple(out)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    plateau_factor: float = 5.0
    plateau_patience: int = 30
    plateau_threshold: float = 1e-5
    weight_decay: float = 1e-5
    batch_size: int = 2
    patch_size: Size = (32, 32, 32)
    patch_schedule: Optional[tuple] = None
    strategy: Optional[str] = None
    max_epochs: int = 10
    patches_per_case: int = 250
    max_steps: Optional[int] = None
    val_patches_per_case: int = 4
    augment: bool = True
    train_dropout_p: Optional[float] = None
    weight_power: float = 1.0
    loss_eps: float = 1e-5
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        self.patch_size = tuple(int(s) for s in self.patch_size)
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.plateau_patience < 1:
            raise ConfigError("plateau_patience must be >= 1")
        if self.plateau_factor <= 1:
            raise ConfigError("plateau_factor must be > 1")
        if self.patch_schedule is not None:
            sched = tuple((float(f), tuple(int(s) for s in size), int(b)) for f, size, b in self.patch_schedule)
            fracs = [f for f, _, _ in sched]
            if not sched or fracs[0] != 0.0 or any(b <= a for a, b in zip(fracs, fracs[1:])) or fracs[-1] > 1:
                raise ConfigError("patch_schedule fractions must start at 0 and increase within [0, 1]")
            self.patch_schedule = sched

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


def patch_size_for_epoch(epoch: int, cfg: TrainConfig) -> Tuple[Size, int]:
    """``(patch_size, batch_size)`` in effect at ``epoch`` (0-based)."""
    if not cfg.patch_schedule:
        return cfg.patch_size, cfg.batch_size
    frac = epoch / cfg.max_epochs
    current = cfg.patch_schedule[0]
    for entry in cfg.patch_schedule:
        if entry[0] <= frac:
            current = entry
    return current[1], current[2]


@dataclass
class PlateauState:
    base_lr: float = 1e-4
    factor: float = 5.0
    patience: int = 30
    threshold: float = 1e-5
    best: float = math.inf
    bad_epochs: int = 0
    reductions: int = 0
    seen: int = 0

    @property
    def lr(self) -> float:
        return self.base_lr / self.factor ** self.reductions


def update_lr(history: Sequence[float], state: PlateauState) -> float:
    """Fold any unseen entries of ``history`` into ``state`` and return the lr.

    An epoch improves when its loss is at least ``threshold`` below the best
    so far.  After ``patience`` consecutive non-improving epochs the lr is
    divided by ``factor`` and the counter restarts.
    """
    if not history:
        raise ValueError("history must be non-empty")
    for value in history[state.seen:]:
        if value <= state.best - state.threshold:
            state.best = value
            state.bad_epochs = 0
        else:
            state.bad_epochs += 1
            if state.bad_epochs >= state.patience:
                state.reductions += 1
                state.bad_epochs = 0
    state.seen = len(history)
    return state.lr


def l2_penalty(net: Network) -> torch.Tensor:
    return sum(torch.sum(p * p) for p in net.parameters())


def objective(net: Network, probs: torch.Tensor, target: torch.Tensor, cfg: TrainConfig):
    """Returns ``(total, gdl)``; total includes the weight-decay penalty."""
    gdl = generalized_dice_loss(probs, target, eps=cfg.loss_eps, weight_power=cfg.weight_power)
    total = gdl + cfg.weight_decay * l2_penalty(net) if cfg.weight_decay else gdl
    return total, gdl


def split_cases(cases: Sequence[Case], val_fraction: float = 0.2, seed: int = 0):
    """Deterministic train/validation split; validation is empty for a single case."""
    order = np.random.default_rng(seed).permutation(len(cases))
    n_val = int(round(len(cases) * val_fraction)) if len(cases) > 1 else 0
    val = [cases[i] for i in sorted(order[:n_val])]
    train = [cases[i] for i in sorted(order[n_val:])]
    return train, val


class Trainer:
    """Owns a network, its Adam optimizer and all RNG state for one run."""

    def __init__(self, net: Network, cfg: TrainConfig, train_cases: Sequence[Case], val_cases: Sequence[Case] = ()):
        if not train_cases:
            raise ConfigError("at least one training case is required")
        self.net = net
        self.cfg = cfg
        self.train_cases = list(train_cases)
        self.val_cases = list(val_cases)
        torch.manual_seed(cfg.seed)
        self.rng = np.random.default_rng(cfg.seed)
        self.optimizer = torch.optim.Adam(net.parameters(), lr=cfg.lr, betas=cfg.adam_betas, eps=cfg.adam_eps)
        self.plateau = PlateauState(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_threshold)
        self.epoch = 0
        self.step_count = 0
        self.history: List[dict] = []
        self.best_val = math.inf
        self._val_batches = None

    # -- data ---------------------------------------------------------------

    def _strategy(self, size) -> str:
        if self.cfg.strategy:
            check_strategy(size, self.cfg.strategy)
            return self.cfg.strategy
        return default_strategy(size)

    def _sample(self, case: Case, size, rng, augment: bool):
        center = sample_center(case, self._strategy(size), rng)
        x, y = extract_patch(case, center, size)
        if augment:
            x, y = apply(sample_train_transform(rng), x, y)
        return x, y

    def sample_batch(self, size, batch_size):
        xs, ys = [], []
        for _ in range(batch_size):
            case = self.train_cases[int(self.rng.integers(len(self.train_cases)))]
            x, y = self._sample(case, size, self.rng, self.cfg.augment)
            xs.append(x)
            ys.append(y)
        return torch.from_numpy(np.stack(xs)), one_hot_labels(torch.from_numpy(np.stack(ys).astype(np.int64)))

    def validation_batches(self):
        """Fixed validation patches, sampled once from a dedicated seed."""
        if self._val_batches is None:
            rng = np.random.default_rng([self.cfg.seed, 1])
            size, _ = patch_size_for_epoch(0, self.cfg)
            batches = []
            for case in self.val_cases:
                for _ in range(self.cfg.val_patches_per_case):
                    x, y = self._sample(case, size, rng, augment=False)
                    batches.append((torch.from_numpy(x[None]), one_hot_labels(torch.from_numpy(y[None].astype(np.int64)))))
            self._val_batches = batches
        return self._val_batches

    # -- optimization ---------------------------------------------------------

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def steps_per_epoch(self, batch_size: int) -> int:
        return max(1, math.ceil(len(self.train_cases) * self.cfg.patches_per_case / batch_size))

    def step(self, size=None, batch_size=None) -> float:
        if size is None:
            size, batch_size = patch_size_for_epoch(self.epoch, self.cfg)
        x, y = self.sample_batch(size, batch_size)
        self.net.set_mode("train", self.cfg.train_dropout_p)
        logits = self.net(x.to(self.net.device))
        total, gdl = objective(self.net, torch.softmax(logits, dim=1), y.to(logits.device), self.cfg)
        if not torch.isfinite(total):
            raise TrainingError(f"non-finite loss at step {self.step_count} (epoch {self.epoch}, lr {self.lr:g})")
        self.optimizer.zero_grad()
        total.backward()
        self.optimizer.step()
        self.step_count += 1
        return float(gdl.detach())

    def validation_loss(self) -> Optional[float]:
        batches = self.validation_batches()
        if not batches:
            return None
        self.net.set_mode("eval")
        losses = []
        with torch.no_grad():
            for x, y in batches:
                probs = torch.softmax(self.net(x.to(self.net.device)), dim=1)
                losses.append(float(generalized_dice_loss(probs, y.to(probs.device), self.cfg.loss_eps, self.cfg.weight_power)))
        return float(np.mean(losses))

    def run_epoch(self) -> dict:
        size, batch_size = patch_size_for_epoch(self.epoch, self.cfg)
        n = self.steps_per_epoch(batch_size)
        if self.cfg.max_steps is not None:
            n = min(n, self.cfg.max_steps - self.step_count)
        losses = [self.step(size, batch_size) for _ in range(n)]
        train_loss = float(np.mean(losses)) if losses else float("nan")
        val_loss = self.validation_loss()
        if val_loss is None:
            # no held-out cases: plateau tracking falls back to the training loss
            val_loss = train_loss
        row = {
            "epoch": self.epoch,
            "train_loss": train_loss,
            "val_loss": val_loss,
            "lr": self.lr,
            "patch_size": "x".join(str(s) for s in size),
        }
        self.history.append(row)
        new_lr = update_lr([r["val_loss"] for r in self.history], self.plateau)
        for group in self.optimizer.param_groups:
            group["lr"] = new_lr
        self.epoch += 1
        log.info("epoch %d train %.5f val %.5f lr %.2e", row["epoch"], train_loss, val_loss, row["lr"])
        return row

    def done(self) -> bool:
        if self.epoch >= self.cfg.max_epochs:
            return True
        return self.cfg.max_steps is not None and self.step_count >= self.cfg.max_steps

    # -- state --------------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "package_version": __version__,
            "net_config": self.net.config.to_dict(),
            "train_config": self.cfg.to_dict(),
            "model_state": {k: v.clone() for k, v in self.net.state_dict().items()},
            "optimizer_state": self.optimizer.state_dict(),
            "plateau_state": asdict(self.plateau),
            "epoch": self.epoch,
            "step": self.step_count,
            "best_val": self.best_val,
            "history": list(self.history),
            "torch_rng": torch.get_rng_state(),
            "numpy_rng": self.rng.bit_generator.state,
        }

    def load_state_dict(self, state: dict):
        check_checkpoint_config(state, self.net.config)
        self.net.load_state_dict(state["model_state"])
        self.optimizer.load_state_dict(state["optimizer_state"])
        self.plateau = PlateauState(**state["plateau_state"])
        self.epoch = state["epoch"]
        self.step_count = state["step"]
        self.best_val = state["best_val"]
        self.history = list(state["history"])
        torch.set_rng_state(state["torch_rng"])
        self.rng.bit_generator.state = state["numpy_rng"]

    def save_checkpoint(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.state_dict(), path)
        return path


def check_checkpoint_config(state: dict, config: NetConfig):
    if state.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {state.get('format_version')}")
    if state["net_config"] != config.to_dict():
        raise ConfigError(f"checkpoint NetConfig {state['net_config']} does not match {config.to_dict()}")


def load_checkpoint(path, config: Optional[NetConfig] = None) -> Tuple[Network, dict]:
    """Rebuild the network stored in a checkpoint.

    Raises:
        ConfigError: ``config`` is given and differs from the stored one.
    """
    state = torch.load(path, map_location="cpu", weights_only=False)
    stored = NetConfig(**state["net_config"])
    check_checkpoint_config(state, config or stored)
    net = build_network(stored)
    net.load_state_dict(state["model_state"])
    return net, state


def write_log(history: Sequence[dict], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({k: row[k] for k in LOG_COLUMNS})
    return path


@dataclass
class TrainResult:
    history: List[dict] = field(default_factory=list)
    best_checkpoint: Optional[Path] = None
    last_checkpoint: Optional[Path] = None
    trainer: Optional[Trainer] = None


def train(net: Network, dataset: Sequence[Case], cfg: TrainConfig, out_dir=None, val_cases: Sequence[Case] = ()) -> TrainResult:
    """Train ``net`` on patches drawn from ``dataset``.

    Writes ``best.pt`` (lowest validation loss), ``last.pt`` and
    ``metrics.csv`` into ``out_dir`` when given.
    """
    trainer = Trainer(net, cfg, dataset, val_cases)
    out = Path(out_dir) if out_dir is not None else None
    result = TrainResult(trainer=trainer)
    while not trainer.done():
        row = trainer.run_epoch()
        if row["val_loss"] < trainer.best_val:
            trainer.best_val = row["val_loss"]
            if out is not None:
                result.best_checkpoint = trainer.save_checkpoint(out / "best.pt")
    if out is not None:
        result.last_checkpoint = trainer.save_checkpoint(out / "last.pt")
        write_log(trainer.history, out / "metrics.csv")
    result.history = trainer.history
    return result
