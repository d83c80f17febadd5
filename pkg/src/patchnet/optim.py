"""Adam, binary cross entropy on the aggregated prediction, training loop.

The loop trains on whole images: each image expands to its patch batch, the
patch probabilities are averaged into one global prediction, and the cross
entropy gradient flows back through the average into the shared subnet. It
stops on validation patience, 100% training accuracy, or the epoch cap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import imaging
from .nn import SubnetParams, clone_params, param_arrays, subnet_backward, subnet_forward
from .patchcore import PatchConfig, chunk_patches, normalize_patches
from .tensor import Rng, fsum

PROB_EPS = 1e-7  # clamp before logarithms; exact 0/1 is reachable only by rounding

AUGMENT_OPS = ("rotate180", "zoom", "hflip", "vflip")


class TrainingDiverged(RuntimeError):
    pass


def bce_loss(p_global: float, y: int) -> tuple[float, float]:
    """Binary cross entropy and its derivative at the clamped probability."""
    if y not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {y!r}")
    p = min(max(float(p_global), PROB_EPS), 1.0 - PROB_EPS)
    loss = -(y * math.log(p) + (1 - y) * math.log(1.0 - p))
    dloss_dp = (p - y) / (p * (1.0 - p))
    return loss, dloss_dp


@dataclass
class AdamState:
    step: int
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def init_adam_arrays(arrays: list[np.ndarray], lr: float, beta1: float = 0.9,
                     beta2: float = 0.999, epsilon: float = 1e-8) -> AdamState:
    return AdamState(
        step=0,
        first_moment=[np.zeros_like(a) for a in arrays],
        second_moment=[np.zeros_like(a) for a in arrays],
        lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon,
    )


def init_adam(params: SubnetParams, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, epsilon: float = 1e-8) -> AdamState:
    return init_adam_arrays(param_arrays(params), lr, beta1, beta2, epsilon)


def adam_update_arrays(state: AdamState, arrays: list[np.ndarray],
                       grad_arrays: list[np.ndarray]) -> None:
    """One bias-corrected Adam update, in place on a list of arrays."""
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for i, (p, g) in enumerate(zip(arrays, grad_arrays)):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.first_moment[i]
        v = state.second_moment[i]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.epsilon)


def adam_step(state: AdamState, params: SubnetParams, grads: SubnetParams) -> None:
    adam_update_arrays(state, param_arrays(params), param_arrays(grads))


@dataclass
class TrainConfig:
    patch_size: int
    train_stride: int = 0          # 0 means "equal to patch_size"
    lr: float = 1e-4
    batch_size_images: int = 4
    patience_epochs: int = 1000
    max_epochs: int = 100000
    seed: int = 0
    balance_classes: bool = True
    stop_on_train_acc: bool = True  # the 100%-accuracy rule can stop far from
                                    # probe convergence on tiny synthetic sets
    coverage_mode: str = "clamp_to_edge"
    augment: tuple[str, ...] = ()
    augment_mode: str = "stochastic"  # or "expanded"
    verbose: bool = False

    def __post_init__(self):
        if self.train_stride == 0:
            self.train_stride = self.patch_size
        if self.patch_size < 1 or self.train_stride < 1:
            raise ValueError("patch_size and train_stride must be positive")
        if self.batch_size_images < 1 or self.max_epochs < 1:
            raise ValueError("batch_size_images and max_epochs must be positive")
        if self.patience_epochs < 0:
            raise ValueError("patience_epochs must be >= 0")
        for op in self.augment:
            if op not in AUGMENT_OPS:
                raise ValueError(f"unknown augment op {op!r}")
        if self.augment_mode not in ("stochastic", "expanded"):
            raise ValueError(f"unknown augment_mode {self.augment_mode!r}")

    def patch_config(self) -> PatchConfig:
        return PatchConfig(self.patch_size, self.patch_size,
                           self.train_stride, self.train_stride, self.coverage_mode)


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    stop_reason: str = ""
    epochs_run: int = 0


def select_epoch_indices(labels: list[int], balance: bool, rng: Rng) -> list[int]:
    """Training order for one epoch; undersamples the majority class if balancing."""
    by_class = {0: [i for i, y in enumerate(labels) if y == 0],
                1: [i for i, y in enumerate(labels) if y == 1]}
    if balance:
        k = min(len(by_class[0]), len(by_class[1]))
        chosen = []
        for cls in (0, 1):
            idx = by_class[cls]
            order = rng.permutation(len(idx))
            chosen += [idx[j] for j in order[:k]]
    else:
        chosen = list(range(len(labels)))
    order = rng.permutation(len(chosen))
    return [chosen[j] for j in order]


def _augment_image(img: np.ndarray, ops: tuple[str, ...], rng: Rng) -> np.ndarray:
    for op in ops:
        if rng.uniform01(1)[0] < 0.5:
            continue
        if op == "zoom":
            scale = 1.2 - 0.2 * rng.uniform01(1)[0]  # (1.0, 1.2]
            img = imaging.augment(img, "zoom", scale=scale)
        else:
            img = imaging.augment(img, op)
    return img


def _expand_dataset(dataset, ops):
    out = list(dataset)
    for img, y in dataset:
        for op in ops:
            if op == "zoom":
                out.append((imaging.augment(img, "zoom", scale=1.2), y))
            else:
                out.append((imaging.augment(img, op), y))
    return out


def _image_forward(params, img, pcfg):
    grid = chunk_patches(img, pcfg)
    x = normalize_patches(grid.patches)
    cache: list = []
    q = subnet_forward(params, x, _cache_out=cache)
    p = fsum(q) / len(q)
    return x, q, p, cache


def evaluate(params: SubnetParams, dataset, pcfg: PatchConfig) -> tuple[float, float]:
    """Mean loss and accuracy (global probability thresholded at >= 0.5)."""
    losses, correct = [], 0
    for img, y in dataset:
        _, _, p, _ = _image_forward(params, img, pcfg)
        losses.append(bce_loss(p, y)[0])
        correct += int((p >= 0.5) == bool(y))
    return fsum(losses) / len(losses), correct / len(losses)


def train(params: SubnetParams, train_set, val_set,
          cfg: TrainConfig) -> tuple[SubnetParams, TrainReport]:
    """Patience-based training; returns (best-validation params, report).

    train_set / val_set: sequences of (image, label) with uint8 images shaped
    (m, n, c).  `params` is updated in place; the returned parameters are the
    snapshot from the best-validation epoch.
    """
    if not train_set or not val_set:
        raise ValueError("train and validation sets must be non-empty")
    labels = [y for _, y in train_set]
    if len(set(labels)) < 2:
        raise ValueError("training set must contain both classes")

    if cfg.augment and cfg.augment_mode == "expanded":
        train_set = _expand_dataset(train_set, cfg.augment)
        labels = [y for _, y in train_set]

    pcfg = cfg.patch_config()
    rng = Rng(cfg.seed)
    adam = init_adam(params, cfg.lr)
    report = TrainReport()
    best = clone_params(params)
    since_improvement = 0

    for epoch in range(1, cfg.max_epochs + 1):
        epoch_rng = rng.derive(epoch)
        order = select_epoch_indices(labels, cfg.balance_classes, epoch_rng)

        epoch_losses, correct = [], 0
        for start in range(0, len(order), cfg.batch_size_images):
            batch = order[start:start + cfg.batch_size_images]
            batch_grads = None
            for idx in batch:
                img, y = train_set[idx]
                if cfg.augment and cfg.augment_mode == "stochastic":
                    img = _augment_image(img, cfg.augment, epoch_rng)
                x, q, p, cache = _image_forward(params, img, pcfg)
                loss, dp = bce_loss(p, y)
                if not math.isfinite(loss):
                    raise TrainingDiverged(
                        f"non-finite loss {loss} at epoch {epoch} (p={p}, label={y})")
                epoch_losses.append(loss)
                correct += int((p >= 0.5) == bool(y))
                upstream = np.full(len(q), dp / len(q))
                g = subnet_backward(params, x, upstream, cache)
                if batch_grads is None:
                    batch_grads = g
                else:
                    for acc, gi in zip(param_arrays(batch_grads), param_arrays(g)):
                        acc += gi
            scale = 1.0 / len(batch)
            for acc in param_arrays(batch_grads):
                acc *= scale
            adam_step(adam, params, batch_grads)

        train_loss = fsum(epoch_losses) / len(epoch_losses)
        train_acc = correct / len(epoch_losses)
        val_loss, val_acc = evaluate(params, val_set, pcfg)
        report.train_loss.append(train_loss)
        report.train_acc.append(train_acc)
        report.val_loss.append(val_loss)
        report.val_acc.append(val_acc)
        report.epochs_run = epoch

        if val_loss < report.best_val_loss:
            report.best_val_loss = val_loss
            report.best_epoch = epoch
            best = clone_params(params)
            since_improvement = 0
        else:
            since_improvement += 1

        if cfg.verbose:
            print(f"epoch={epoch} train_loss={train_loss:.6f} train_acc={train_acc:.4f} "
                  f"val_loss={val_loss:.6f} val_acc={val_acc:.4f}", flush=True)

        if cfg.stop_on_train_acc and train_acc == 1.0:
            report.stop_reason = "train_acc_100"
            break
        if since_improvement >= max(cfg.patience_epochs, 1):
            report.stop_reason = "patience"
            break
    else:
        report.stop_reason = "max_epochs"

    return best, report
