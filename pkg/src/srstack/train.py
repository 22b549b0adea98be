"""Deterministic training loop: Adam, random crops, stack augmentation,
checkpointing.

Every source of randomness in a step is drawn from a generator keyed by
(seed, step), so resuming from a checkpoint at step N reproduces the
uninterrupted run bit for bit.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .arrayio import config_hash, load_arrays, save_arrays
from .dataset import Dataset
from .loss import LossConfig, registered_loss
from .model import ModelConfig, StudentModel
from .stack import Frame, pad_truncate_stack, select_window


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    steps: int = 800
    batch_size: int = 4
    crop_lr: int = 16
    eval_center_crop_lr: int = 16
    seed: int = 0
    pad_probability: float = 0.3
    frame_mode: str = "window"  # or "duplicate_center"
    log_every: int = 1
    checkpoint_every: int = 0  # 0: final checkpoint only

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch size must be positive")
        if self.eval_center_crop_lr > self.crop_lr:
            raise ValueError("eval center crop cannot exceed the training crop")
        if self.frame_mode not in ("window", "duplicate_center"):
            raise ValueError(f"unknown frame mode {self.frame_mode!r}")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def fresh(cls, params: dict[str, T.TensorNode]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p.value) for k, p in params.items()},
            v={k: np.zeros_like(p.value) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, T.TensorNode],
    grads: dict[str, np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
) -> None:
    """Standard bias-corrected Adam update, in place."""
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p.value -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


# ---------------------------------------------------------------------------
# Checkpoints


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    step: int
    config_hash: str
    state: dict[str, np.ndarray] = field(default_factory=dict)  # bn running stats

    def __post_init__(self):
        if set(self.params) != set(self.adam_m) or set(self.params) != set(self.adam_v):
            raise ValueError("params and optimizer moments must carry the same names")


def run_config_hash(model_cfg: ModelConfig, loss_cfg: LossConfig, train_cfg: TrainConfig) -> str:
    return config_hash({"model": asdict(model_cfg), "loss": asdict(loss_cfg), "train": asdict(train_cfg)})


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    arrays: dict[str, np.ndarray] = {}
    for group, blob in (("param", ckpt.params), ("m", ckpt.adam_m), ("v", ckpt.adam_v), ("state", ckpt.state)):
        for name, arr in blob.items():
            arrays[f"{group}/{name}"] = arr
    save_arrays(path, arrays, meta={"step": ckpt.step, "config_hash": ckpt.config_hash})


def load_checkpoint(path, expect_hash: str | None = None) -> Checkpoint:
    arrays, meta = load_arrays(path)
    if expect_hash is not None and meta.get("config_hash") != expect_hash:
        raise ValueError(
            f"checkpoint config hash {meta.get('config_hash')!r} does not match expected {expect_hash!r}"
        )
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "m": {}, "v": {}, "state": {}}
    for key, arr in arrays.items():
        group, name = key.split("/", 1)
        groups[group][name] = np.array(arr, copy=True)
    return Checkpoint(
        params=groups["param"],
        adam_m=groups["m"],
        adam_v=groups["v"],
        step=int(meta["step"]),
        config_hash=meta["config_hash"],
        state=groups["state"],
    )


def checkpoint_from(model: StudentModel, state: AdamState, step: int, chash: str) -> Checkpoint:
    return Checkpoint(
        params={k: v.value.copy() for k, v in model.params.items()},
        adam_m={k: v.copy() for k, v in state.m.items()},
        adam_v={k: v.copy() for k, v in state.v.items()},
        step=step,
        config_hash=chash,
        state={k: v.copy() for k, v in model.state_arrays().items()},
    )


# ---------------------------------------------------------------------------
# Training


def _epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng((seed, epoch, 0x9E9)).permutation(n)


def crop_frames(frames: list[Frame], y0: int, x0: int, size: int) -> list[Frame]:
    out = []
    for f in frames:
        bands = np.asarray(f.bands[y0 : y0 + size, x0 : x0 + size, :])
        meta = f.meta
        if meta.opaque_cloud.shape != (size, size):
            meta = copy.copy(meta)
            meta.opaque_cloud = meta.opaque_cloud[y0 : y0 + size, x0 : x0 + size]
        out.append(Frame(bands, meta))
    return out


def train_loop(
    dataset: Dataset,
    model_cfg: ModelConfig,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    out_dir=None,
    resume: Checkpoint | None = None,
    progress=None,
):
    """Run the optimization; returns (model, adam state, loss log).

    Writes periodic and final checkpoints when ``out_dir`` is given; with a
    ``resume`` checkpoint, continues at its step with identical results to
    an uninterrupted run.
    """
    mx, my = loss_cfg.max_shift
    dmx, dmy = dataset.margin_px
    if mx > dmx or my > dmy:
        raise ValueError(f"loss search window {loss_cfg.max_shift} exceeds dataset label margins")
    lr_extent = dataset.get_stack(0).frames[0].bands.shape[0]
    if train_cfg.crop_lr > lr_extent:
        raise ValueError(f"crop {train_cfg.crop_lr} exceeds the dataset LR extent {lr_extent}")

    chash = run_config_hash(model_cfg, loss_cfg, train_cfg)
    model = StudentModel(model_cfg, seed=train_cfg.seed)
    state = AdamState.fresh(model.params)
    start = 0
    if resume is not None:
        if resume.config_hash != chash:
            raise ValueError("resume checkpoint was produced by a different configuration")
        model.load_arrays(resume.params, resume.state)
        state = AdamState(
            m={k: v.copy() for k, v in resume.adam_m.items()},
            v={k: v.copy() for k, v in resume.adam_v.items()},
            t=resume.step,
        )
        start = resume.step

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    gamma = model_cfg.upscale_factor
    n = len(dataset)
    batch = train_cfg.batch_size
    crop = train_cfg.crop_lr
    log: list[dict] = []

    for step in range(start, train_cfg.steps):
        rng = np.random.default_rng((train_cfg.seed, step, 0x5E9))
        model.zero_param_grads()
        batch_loss = 0.0
        for j in range(batch):
            g = step * batch + j
            perm = _epoch_permutation(train_cfg.seed, g // n, n)
            idx = int(perm[g % n])
            stack = dataset.get_stack(idx)
            label = dataset.get_label(idx)
            frames = select_window(stack, model_cfg.frames, train_cfg.frame_mode)

            hi = lr_extent - crop
            y0 = int(rng.integers(0, hi + 1))
            x0 = int(rng.integers(0, hi + 1))
            frames = crop_frames(frames, y0, x0, crop)
            pad_seed = int(rng.integers(0, 2**31 - 1))
            if train_cfg.pad_probability > 0 and train_cfg.frame_mode == "window" and model_cfg.frames % 2 == 0:
                frames = pad_truncate_stack(
                    frames, model_cfg.frames, seed=pad_seed, p=train_cfg.pad_probability,
                    grid_resolution_m=dataset.grid_res, native_resolution_m=dataset.native_res,
                ).frames

            label_c = label.window(gamma * y0, gamma * x0, gamma * crop, gamma * crop, (mx, my))
            pred = model.forward(frames, training=True)
            loss_node, _ = registered_loss(pred, label_c, dataset.record(idx).has_height, loss_cfg)
            T.backprop(loss_node)
            batch_loss += float(loss_node.value)

        grads = {k: p.grad / batch for k, p in model.params.items()}
        adam_step(model.params, grads, state, train_cfg)

        if step % train_cfg.log_every == 0 or step == train_cfg.steps - 1:
            log.append({"step": step, "loss": batch_loss / batch})
            if progress:
                progress(step, batch_loss / batch)
        if out_dir is not None and train_cfg.checkpoint_every and (step + 1) % train_cfg.checkpoint_every == 0:
            save_checkpoint(checkpoint_from(model, state, step + 1, chash), out_dir / f"ckpt_{step + 1:07d}.bin")

    final = checkpoint_from(model, state, train_cfg.steps, chash)
    if out_dir is not None:
        save_checkpoint(final, out_dir / "ckpt_final.bin")
    return model, state, log
