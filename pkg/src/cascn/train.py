"""Optimizers, the epoch/step training loop, and evaluation.

All randomness inside an epoch derives from (seed, epoch), so a run can be
checkpointed at an epoch boundary and resumed bit-for-bit. One training
thread mutates parameters; evaluation runs on the in-place model in eval
mode.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import AugmentationPolicy, Sample
from .errors import CheckpointError, ConfigError, ContractError, NumericalError
from .losses import PixelBatch, seg_loss
from .metrics import MetricReport, confusion, metrics
from .model import CascnModel, load_model, save_model
from .tensor import Tape, Tensor, backward, set_debug_checks


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"  # adam | sgd_nesterov
    lr: float = 0.003
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9

    def __post_init__(self):
        if self.kind not in ("adam", "sgd_nesterov"):
            raise ConfigError(f"optimizer must be adam|sgd_nesterov, "
                              f"got '{self.kind}'")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("adam betas must lie in [0, 1)")


def adam_update(w: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray,
                t: int, cfg: OptimizerConfig) -> np.ndarray:
    """One bias-corrected update; mutates the moment slots, returns new w."""
    m[...] = cfg.beta1 * m + (1.0 - cfg.beta1) * g
    v[...] = cfg.beta2 * v + (1.0 - cfg.beta2) * (g * g)
    m_hat = m / (1.0 - cfg.beta1 ** t)
    v_hat = v / (1.0 - cfg.beta2 ** t)
    return w - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


def sgd_nesterov_update(w: np.ndarray, g: np.ndarray, vel: np.ndarray,
                        cfg: OptimizerConfig) -> np.ndarray:
    """v <- mu*v - lr*g; w <- w + mu*v - lr*g. Mutates vel, returns new w."""
    vel[...] = cfg.momentum * vel - cfg.lr * g
    return w + cfg.momentum * vel - cfg.lr * g


class Optimizer:
    """Per-parameter slot state plus the update rule from the config."""

    def __init__(self, named_params: list[tuple[str, Tensor]],
                 cfg: OptimizerConfig, t: int = 0):
        self.cfg = cfg
        self.named_params = named_params
        self.t = t
        self.slots: dict[str, dict[str, np.ndarray]] = {}
        for name, p in named_params:
            if cfg.kind == "adam":
                self.slots[name] = {"m": np.zeros_like(p.data, dtype=np.float64),
                                    "v": np.zeros_like(p.data, dtype=np.float64)}
            else:
                self.slots[name] = {"vel": np.zeros_like(p.data,
                                                         dtype=np.float64)}

    def step(self, grads: dict[Tensor, np.ndarray]) -> None:
        self.t += 1
        for name, p in self.named_params:
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.data)
            slot = self.slots[name]
            if self.cfg.kind == "adam":
                p.data = adam_update(p.data, g, slot["m"], slot["v"], self.t,
                                     self.cfg).astype(p.dtype)
            else:
                p.data = sgd_nesterov_update(p.data, g, slot["vel"],
                                             self.cfg).astype(p.dtype)

    def slot_tensors(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for name, parts in self.slots.items():
            for key, arr in parts.items():
                out.append((f"slot.{key}.{name}", arr))
        return out

    def restore_slots(self, tensors: dict[str, np.ndarray]) -> None:
        for name, parts in self.slots.items():
            for key, arr in parts.items():
                stored = tensors.get(f"slot.{key}.{name}")
                if stored is None:
                    raise CheckpointError(
                        f"checkpoint missing optimizer slot '{key}.{name}'")
                arr[...] = stored


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    best_di: float = -1.0
    best_path: str | None = None
    log_lines: list[str] = field(default_factory=list)


def _batch_arrays(samples: list[Sample], dtype) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in samples]).astype(dtype) / 255.0
    images = images.transpose(0, 3, 1, 2)
    masks = np.stack([s.mask for s in samples]).astype(dtype)[:, None]
    return images, masks


def _locate_non_finite(model: CascnModel, images, masks) -> str:
    set_debug_checks(True)
    try:
        with Tape():
            pred = model.forward(Tensor(images))
            seg_loss(PixelBatch(pred, masks))
    except NumericalError as exc:
        return str(exc)
    finally:
        set_debug_checks(False)
    return "loss non-finite but every op output was finite"


def evaluate(model, samples: list[Sample], batch_size: int = 4) -> MetricReport:
    """Per-image metrics plus their mean; model parameters are untouched.

    `model` only needs an ``infer(images) -> probabilities`` method, so
    stub predictors can be evaluated by the same path.
    """
    if not samples:
        raise ContractError("cannot evaluate on an empty dataset")
    rows = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        images, _ = _batch_arrays(chunk, np.float64)
        probs = model.infer(images)
        for sample, prob in zip(chunk, probs):
            counts = confusion(prob[0], sample.mask)
            rows.append((sample.id, metrics(counts)))
    return MetricReport(rows)


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def train(model: CascnModel, train_samples: list[Sample], epochs: int,
          opt_cfg: OptimizerConfig, *, val_samples: list[Sample] | None = None,
          batch_size: int = 2, policy: AugmentationPolicy | None = None,
          seed: int = 0, out_dir=None, max_steps: int | None = None,
          state: TrainState | None = None, optimizer: Optimizer | None = None
          ) -> tuple[TrainState, Optimizer]:
    """Run the epoch loop: shuffle, augment, forward, combined loss,
    backward, optimizer step; per-epoch validation metrics and best-DI
    checkpointing. Resumes from `state`/`optimizer` when given.
    """
    if not train_samples:
        raise ContractError("training set is empty")
    expected = model.config.input_size
    for s in train_samples + (val_samples or []):
        if s.size != expected:
            raise ContractError(
                f"sample '{s.id}' has size {s.size}; resize the dataset to "
                f"the configured input size {expected} first")
    policy = policy or AugmentationPolicy.none()
    state = state or TrainState()
    if optimizer is None:
        optimizer = Optimizer(model.named_parameters(), opt_cfg, t=state.step)
    val_set = val_samples if val_samples else train_samples
    dtype = model.config.dtype
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    n = len(train_samples)
    for epoch in range(state.epoch, epochs):
        if max_steps is not None and state.step >= max_steps:
            break
        rng = _epoch_rng(seed, epoch)
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, batch_size):
            if max_steps is not None and state.step >= max_steps:
                break
            chunk = [policy.apply(train_samples[i], rng)
                     for i in order[start:start + batch_size]]
            images, masks = _batch_arrays(chunk, dtype)
            model.set_mode(True)
            with Tape() as tape:
                pred = model.forward(Tensor(images))
                loss = seg_loss(PixelBatch(pred, masks))
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                detail = _locate_non_finite(model, images, masks)
                raise NumericalError(
                    f"non-finite loss at step {state.step}: {detail}")
            batch_losses.append(loss_value)
            grads = backward(tape, loss)
            optimizer.step(grads)
            state.step += 1
        state.epoch = epoch + 1
        train_loss = math.fsum(batch_losses) / max(len(batch_losses), 1)
        report = evaluate(model, val_set)
        mean = report.mean()
        state.log_lines.append(
            f"{epoch}\t{train_loss:.4f}\t" + "\t".join(
                f"{mean[m]:.4f}" for m in ("SE", "SP", "AC", "DI", "JA")))
        if mean["DI"] > state.best_di:
            state.best_di = mean["DI"]
            if out_path is not None:
                best = out_path / "best.ckpt"
                save_train_checkpoint(best, model, state, optimizer)
                state.best_path = str(best)

    if out_path is not None and state.step > 0:
        save_train_checkpoint(out_path / "last.ckpt", model, state, optimizer)
    if out_path is not None and state.log_lines:
        (out_path / "train.log").write_text(
            "".join(line + "\n" for line in state.log_lines))
    return state, optimizer


def save_train_checkpoint(path, model: CascnModel, state: TrainState,
                          optimizer: Optimizer) -> None:
    pairs = [
        ("train.epoch", str(state.epoch)),
        ("train.step", str(state.step)),
        ("train.best_di", state.best_di.hex()),
        ("train.optimizer", optimizer.cfg.kind),
        ("train.lr", repr(optimizer.cfg.lr)),
        ("train.beta1", repr(optimizer.cfg.beta1)),
        ("train.beta2", repr(optimizer.cfg.beta2)),
        ("train.eps", repr(optimizer.cfg.eps)),
        ("train.momentum", repr(optimizer.cfg.momentum)),
    ]
    save_model(model, path, extra_pairs=pairs,
               extra_tensors=optimizer.slot_tensors())


def load_train_checkpoint(path) -> tuple[CascnModel, TrainState, Optimizer]:
    model, pairs, tensors = load_model(path)
    if "train.epoch" not in pairs:
        raise CheckpointError("checkpoint carries no training state")
    cfg = OptimizerConfig(
        kind=pairs["train.optimizer"], lr=float(pairs["train.lr"]),
        beta1=float(pairs["train.beta1"]), beta2=float(pairs["train.beta2"]),
        eps=float(pairs["train.eps"]), momentum=float(pairs["train.momentum"]))
    state = TrainState(step=int(pairs["train.step"]),
                       epoch=int(pairs["train.epoch"]),
                       best_di=float.fromhex(pairs["train.best_di"]))
    optimizer = Optimizer(model.named_parameters(), cfg, t=state.step)
    optimizer.restore_slots(tensors)
    return model, state, optimizer
