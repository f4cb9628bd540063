"""Pretraining, early stopping, few-frame fine-tuning, and benchmarks.

Protocol pieces:
  * group splits assign, per subject, videos 1..train to training and the
    next ``val`` videos to validation (splits 2:1, 4:1, 8:2 only);
  * training runs minibatch Adam for at most ``max_epochs`` epochs with
    early stopping on validation loss (patience / min_delta), returning the
    best-validation checkpoint and a per-epoch history;
  * fine-tuning rounds sample k frames uniformly without replacement from a
    pool, seeded per (base_seed, k, round), and always restart from the base
    checkpoint — rounds never chain;
  * matched-condition benchmarks train on the test subjects themselves
    (videos 1-8 train / 9-10 val, or first 70% / rest of video 1).

Cross-resolution adaptation resizes frames bilinearly to the model input
and nearest-downsamples the native-resolution target masks; evaluation
scores at native resolution (see metrics.evaluate_model).

A training job owns its model exclusively; distinct fine-tuning rounds are
independent and may run in parallel processes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import torch

from .corpus import Corpus
from .errors import ConfigError, TrainingDivergence
from .metrics import EvalSample, dice
from .model import ModelConfig, SegModel, bce_loss, build_model, clone_model
from .rasterize import masks_from_contours, resize_frame, resize_mask
from .registry import Registry, RegistryEntry
from .seeding import stable_seed

ADAPTATION_FRAME_MENU = (1, 5, 10, 15)


@dataclass(frozen=True)
class SplitSpec:
    name: str
    train_videos: int
    val_videos: int

    _ALLOWED = {"2:1": (2, 1), "4:1": (4, 1), "8:2": (8, 2)}

    def __post_init__(self) -> None:
        expected = self._ALLOWED.get(self.name)
        if expected is None or expected != (self.train_videos, self.val_videos):
            raise ConfigError(
                f"split must be one of {sorted(self._ALLOWED)} with matching "
                f"video counts, got {self.name!r} = "
                f"({self.train_videos}, {self.val_videos})"
            )

    @staticmethod
    def from_name(name: str) -> "SplitSpec":
        counts = SplitSpec._ALLOWED.get(name)
        if counts is None:
            raise ConfigError(f"unknown split {name!r}; expected one of "
                              f"{sorted(SplitSpec._ALLOWED)}")
        return SplitSpec(name, *counts)


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 30
    patience: int = 5
    min_delta: float = 1e-4
    learning_rate: float = 1e-3
    batch_size: int = 8
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.min_delta < 0:
            raise ConfigError("min_delta must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.optimizer != "adam":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")


# Adaptation default: same stopping rule, smaller step size.
ADAPT_LEARNING_RATE = 1e-4


@dataclass(frozen=True)
class Sample:
    """One training frame: image plus stacked target masks (3, H, W)."""

    image: np.ndarray
    masks: np.ndarray


@dataclass(frozen=True)
class AdaptationSpec:
    frame_counts: tuple[int, ...]
    rounds: int
    pool: tuple[Sample, ...]
    validation: tuple[Sample, ...]
    base_seed: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "frame_counts", tuple(self.frame_counts))
        object.__setattr__(self, "pool", tuple(self.pool))
        object.__setattr__(self, "validation", tuple(self.validation))
        if not self.frame_counts:
            raise ConfigError("frame_counts must be non-empty")
        bad = [k for k in self.frame_counts if k not in ADAPTATION_FRAME_MENU]
        if bad:
            raise ConfigError(
                f"frame counts {bad} outside the supported menu {ADAPTATION_FRAME_MENU}"
            )
        over = [k for k in self.frame_counts if k > len(self.pool)]
        if over:
            raise ConfigError(
                f"frame counts {over} exceed the pool size {len(self.pool)}"
            )
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_dice: tuple[float, float, float] | None


@dataclass
class TrainHistory:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    stopped_early: bool = False

    def best_val_dice(self) -> tuple[float, float, float] | None:
        for e in self.epochs:
            if e.epoch == self.best_epoch:
                return e.val_dice
        return None


def rasterized_samples(corpus: Corpus, subject_id: str, video_index: int) -> list[Sample]:
    """All frames of one clip, with targets rasterized at native resolution."""
    clip = corpus.clip(subject_id, video_index)
    w, h = corpus.profile.frame_width, corpus.profile.frame_height
    out = []
    for frame, cs in zip(clip.frames, clip.annotations):
        masks = masks_from_contours(cs, w, h).as_stack()
        out.append(Sample(image=frame.pixels, masks=masks))
    return out


def make_group_splits(
    group: Sequence[str], split: SplitSpec, corpus: Corpus
) -> tuple[list[Sample], list[Sample]]:
    """Per subject: videos 1..train to training, the next val to validation."""
    need = split.train_videos + split.val_videos
    train, val = [], []
    for sid in group:
        clips = sorted(corpus.clips_for(sid), key=lambda c: c.video_index)
        if len(clips) < need:
            raise ConfigError(
                f"subject {sid} has {len(clips)} videos; split {split.name} needs {need}"
            )
        for clip in clips[: split.train_videos]:
            train.extend(rasterized_samples(corpus, sid, clip.video_index))
        for clip in clips[split.train_videos : need]:
            val.extend(rasterized_samples(corpus, sid, clip.video_index))
    return train, val


def adapt_samples_to_model(samples: Sequence[Sample], config: ModelConfig) -> list[Sample]:
    """Resize images (bilinear) and masks (nearest) to the model input dims."""
    w, h = config.input_width, config.input_height
    out = []
    for s in samples:
        if s.image.shape == (h, w):
            out.append(s)
        else:
            image = resize_frame(s.image, w, h)
            masks = np.stack([resize_mask(m, w, h) for m in s.masks])
            out.append(Sample(image=image, masks=masks))
    return out


def eval_samples(samples: Sequence[Sample]) -> list[EvalSample]:
    return [EvalSample(image=s.image, masks=s.masks) for s in samples]


def _stack_tensors(samples: Sequence[Sample]) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.from_numpy(np.stack([s.image for s in samples])).unsqueeze(1).float()
    y = torch.from_numpy(np.stack([s.masks for s in samples])).float()
    return x, y


@torch.no_grad()
def _validation_pass(
    model: SegModel, x: torch.Tensor, y: torch.Tensor, batch_size: int = 64
) -> tuple[float, tuple[float, float, float]]:
    was_training = model.training
    model.eval()
    total = 0.0
    dices = np.zeros(3)
    n = x.shape[0]
    for start in range(0, n, batch_size):
        xb = x[start : start + batch_size]
        yb = y[start : start + batch_size]
        probs = model.probabilities(xb)
        total += float(bce_loss(probs, yb)) * xb.shape[0]
        pred = (probs >= 0.5).to(torch.uint8).numpy()
        gt = yb.to(torch.uint8).numpy()
        for j in range(xb.shape[0]):
            for m in range(3):
                dices[m] += dice(pred[j, m], gt[j, m])
    model.train(was_training)
    return total / n, tuple(dices / n)


def train_model(
    model: SegModel,
    train_set: Sequence[Sample],
    val_set: Sequence[Sample],
    config: TrainConfig,
    val_loss_fn: Callable[[SegModel, int], float] | None = None,
) -> tuple[SegModel, TrainHistory]:
    """Minibatch Adam with early stopping; returns the best-val checkpoint.

    ``val_loss_fn(model, epoch)`` overrides validation-loss computation
    (scripted-loss harness for testing the stopping rule); per-mask
    validation dice is then not computed.
    """
    if not train_set or not val_set:
        raise ConfigError("train and validation sets must be non-empty")
    x_train, y_train = _stack_tensors(train_set)
    x_val, y_val = _stack_tensors(val_set)

    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    history = TrainHistory()
    best_state: dict | None = None
    bad_epochs = 0
    n = x_train.shape[0]

    for epoch in range(1, config.max_epochs + 1):
        model.train()
        order = np.random.default_rng(
            stable_seed(config.seed, "epoch-order", epoch)
        ).permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = torch.from_numpy(order[start : start + config.batch_size].copy())
            optimizer.zero_grad(set_to_none=True)
            probs = model.probabilities(x_train[idx])
            batch_loss = bce_loss(probs, y_train[idx])
            if not torch.isfinite(batch_loss):
                raise TrainingDivergence(
                    f"non-finite training loss at epoch {epoch}", history=history
                )
            batch_loss.backward()
            optimizer.step()
            epoch_loss += float(batch_loss.detach()) * idx.shape[0]
        train_loss = epoch_loss / n

        if val_loss_fn is not None:
            val_loss = float(val_loss_fn(model, epoch))
            val_dice = None
        else:
            val_loss, val_dice = _validation_pass(model, x_val, y_val)
        if not np.isfinite(val_loss):
            raise TrainingDivergence(
                f"non-finite validation loss at epoch {epoch}", history=history
            )
        history.epochs.append(EpochStats(epoch, train_loss, val_loss, val_dice))

        if val_loss <= history.best_val_loss - config.min_delta or best_state is None:
            history.best_val_loss = val_loss
            history.best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                history.stopped_early = True
                break

    assert best_state is not None
    model.load_state_dict(best_state)
    model.eval()
    return model, history


def select_frame_indices(base_seed: int, k: int, round_index: int, pool_size: int) -> np.ndarray:
    """Uniform sample of k pool indices without replacement, seeded per round."""
    if k > pool_size:
        raise ConfigError(f"cannot sample {k} frames from a pool of {pool_size}")
    rng = np.random.default_rng(stable_seed(base_seed, k, round_index))
    return rng.choice(pool_size, size=k, replace=False)


@dataclass
class FineTuneResult:
    k: int
    round: int
    frame_indices: np.ndarray
    model: SegModel
    history: TrainHistory


def fine_tune_one(
    base: SegModel,
    spec: AdaptationSpec,
    k: int,
    round_index: int,
    config: TrainConfig,
) -> FineTuneResult:
    """One adaptation round, always restarted from the base checkpoint."""
    indices = select_frame_indices(spec.base_seed, k, round_index, len(spec.pool))
    pool = adapt_samples_to_model(spec.pool, base.config)
    val = adapt_samples_to_model(spec.validation, base.config)
    chosen = [pool[i] for i in indices]
    model = clone_model(base)
    round_config = replace(
        config,
        batch_size=min(config.batch_size, k),
        seed=stable_seed(config.seed, "fine-tune", k, round_index),
    )
    model, history = train_model(model, chosen, val, round_config)
    return FineTuneResult(
        k=k, round=round_index, frame_indices=indices, model=model, history=history
    )


def fine_tune(
    base: SegModel, spec: AdaptationSpec, config: TrainConfig
) -> list[FineTuneResult]:
    """All (k, round) adaptation runs for a base model."""
    results = []
    for k in spec.frame_counts:
        for round_index in range(1, spec.rounds + 1):
            results.append(fine_tune_one(base, spec, k, round_index, config))
    return results


# ---------------------------------------------------------------------------
# Matched-condition benchmarks
# ---------------------------------------------------------------------------

MATCHED_RULES = ("corpusA", "corpusB")


def matched_split(
    corpus: Corpus, subjects: Sequence[str], rule: str
) -> tuple[list[Sample], list[Sample]]:
    """Training/validation sets for the matched-condition benchmark.

    corpusA rule: videos 1-8 of each subject train, videos 9-10 validate.
    corpusB rule: first 70% (floor) of video 1 trains, the rest validates.
    """
    if rule not in MATCHED_RULES:
        raise ConfigError(f"unknown matched rule {rule!r}; expected one of {MATCHED_RULES}")
    train, val = [], []
    if rule == "corpusA":
        for sid in subjects:
            clips = sorted(corpus.clips_for(sid), key=lambda c: c.video_index)
            if len(clips) < 10:
                raise ConfigError(
                    f"subject {sid} has {len(clips)} videos; matched corpusA rule needs 10"
                )
            for clip in clips[:8]:
                train.extend(rasterized_samples(corpus, sid, clip.video_index))
            for clip in clips[8:10]:
                val.extend(rasterized_samples(corpus, sid, clip.video_index))
    else:
        for sid in subjects:
            clips = sorted(corpus.clips_for(sid), key=lambda c: c.video_index)
            if not clips:
                raise ConfigError(f"subject {sid} has no videos")
            samples = rasterized_samples(corpus, sid, clips[0].video_index)
            n_train = int(np.floor(0.7 * len(samples)))
            if n_train == 0:
                raise ConfigError(
                    f"subject {sid}: video {clips[0].video_index} has too few frames "
                    f"({len(samples)}) for the 70/30 matched split"
                )
            train.extend(samples[:n_train])
            val.extend(samples[n_train:])
    return train, val


def matched_condition(
    corpus: Corpus,
    subjects: Sequence[str],
    rule: str,
    model_config: ModelConfig,
    train_config: TrainConfig,
) -> tuple[SegModel, TrainHistory]:
    """Benchmark model trained only on the test subjects' own data."""
    train, val = matched_split(corpus, subjects, rule)
    train = adapt_samples_to_model(train, model_config)
    val = adapt_samples_to_model(val, model_config)
    model = build_model(model_config)
    return train_model(model, train, val, train_config)


# ---------------------------------------------------------------------------
# Pretraining grid
# ---------------------------------------------------------------------------

def group_label(subject_ids: Sequence[str], train_videos: int) -> str:
    """Registry naming: consecutive same-letter subjects collapse their digits.

    ["F1", "F2", "M1", "M2"] with 4 training videos -> "F12M12_4".
    """
    parts: list[list[str]] = []
    for sid in subject_ids:
        letter, digits = sid[0], sid[1:]
        if parts and parts[-1][0] == letter:
            parts[-1][1] += digits
        else:
            parts.append([letter, digits])
    return "".join(letter + digits for letter, digits in parts) + f"_{train_videos}"


def pretrain_one(
    corpus: Corpus,
    group: Sequence[str],
    split: SplitSpec,
    architecture: str,
    model_config: ModelConfig,
    train_config: TrainConfig,
) -> tuple[SegModel, TrainHistory, str]:
    """Train one base model; returns (model, history, registry name)."""
    name = group_label(group, split.train_videos)
    train, val = make_group_splits(group, split, corpus)
    config = replace(
        model_config,
        variant=architecture,
        seed=stable_seed(train_config.seed, architecture, name),
    )
    model = build_model(config)
    model, history = train_model(model, train, val, train_config)
    return model, history, name


def _grid_jobs(
    corpus: Corpus,
    groups: Sequence[Sequence[str]],
    splits: Sequence[SplitSpec],
    architectures: Sequence[str],
    model_config: ModelConfig,
    train_config: TrainConfig,
):
    for architecture in architectures:
        for group in groups:
            for split in splits:
                name = group_label(group, split.train_videos)
                seed = stable_seed(train_config.seed, architecture, name)
                config = replace(model_config, variant=architecture, seed=seed)
                yield architecture, tuple(group), split, name, config


def _run_grid_job(args) -> tuple:
    corpus, group, split, architecture, model_config, train_config = args
    model, history, name = pretrain_one(
        corpus, group, split, architecture, model_config, train_config
    )
    return model, history, name


def pretrain_grid(
    corpus: Corpus,
    groups: Sequence[Sequence[str]],
    splits: Sequence[SplitSpec],
    architectures: Sequence[str],
    model_config: ModelConfig,
    train_config: TrainConfig,
    registry: "Registry",
    jobs: int = 1,
    log: Callable[[str], None] = lambda msg: None,
) -> list["RegistryEntry"]:
    """Train the full grid into a registry; completed entries are skipped.

    Returns the registry entries for every (architecture, group, split)
    cell, trained or reused. With jobs > 1 the pending trainings run in
    parallel worker processes; index writes stay in this process.
    """
    pending = []
    reused = []
    for architecture, group, split, name, config in _grid_jobs(
        corpus, groups, splits, architectures, model_config, train_config
    ):
        if registry.has_valid_entry(architecture, name, config.hash()):
            log(f"grid: {architecture} {name}: checkpoint up to date, skipping")
            reused.append(registry.find(architecture, name))
        else:
            pending.append((architecture, group, split, name, config))

    def store(model: SegModel, history: TrainHistory, architecture: str,
              group: tuple[str, ...], split: SplitSpec, name: str) -> "RegistryEntry":
        return registry.store_model(
            model,
            name=name,
            architecture=architecture,
            group=group,
            split=split.name,
            seed=model.config.seed,
            val_loss=history.best_val_loss,
            val_dice=history.best_val_dice(),
            epochs_run=len(history.epochs),
        )

    trained = []
    if jobs <= 1 or len(pending) <= 1:
        for architecture, group, split, name, config in pending:
            log(f"grid: training {architecture} {name}")
            model, history, _ = pretrain_one(
                corpus, group, split, architecture, model_config, train_config
            )
            trained.append(store(model, history, architecture, group, split, name))
    else:
        import concurrent.futures

        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {
                pool.submit(
                    _run_grid_job,
                    (corpus, group, split, architecture, model_config, train_config),
                ): (architecture, group, split, name)
                for architecture, group, split, name, _ in pending
            }
            for future in concurrent.futures.as_completed(futures):
                architecture, group, split, name = futures[future]
                model, history, _ = future.result()
                log(f"grid: finished {architecture} {name}")
                trained.append(store(model, history, architecture, group, split, name))

    entries = reused + trained
    entries.sort(key=lambda e: e.key())
    return entries
