"""Search orchestration: interleaved supernet/controller training, best-of-N
derivation on the validation split, retrain-from-scratch, and the 1D -> 2D
transfer path. All randomness flows through named Philox streams derived
from one seed, so runs are reproducible bit-for-bit."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics, supernet
from .controller import Controller, SampledArch
from .datagen import Volume, batches, stack_volumes
from .optim import Adam
from .search_space import FixedBlock, Genome, decode, encode, random_genome
from .supernet import ModelWeights, SupernetSpec
from .tensor import Tensor

__all__ = [
    "SearchSchedule",
    "SearchResult",
    "DivergenceError",
    "stream",
    "derive_seed",
    "search",
    "random_search_baseline",
    "retrain",
    "transfer_and_retrain",
    "select_best",
]

SUPERNET_LR = 1e-3
CONTROLLER_LR = 0.02
CONTROLLER_ENTROPY = 1e-3


class DivergenceError(RuntimeError):
    """Raised when a loss goes non-finite; carries a diagnostic snapshot."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


def _salt(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")


def stream(seed: int, name: str) -> np.random.Generator:
    """Named, independent, platform-stable random stream."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, _salt(name)])))


def derive_seed(seed: int, name: str) -> int:
    return int(stream(seed, name).integers(0, 2**62))


@dataclass(frozen=True)
class SearchSchedule:
    """Knobs of one search run; ``desk`` pins the small-scale defaults."""

    epochs: int = 20
    supernet_steps_per_epoch: int | None = None
    controller_steps_per_epoch: int = 30
    n_derive_samples: int = 20
    train_batch: int = 32
    reward_batch: int = 16
    supernet_lr: float = SUPERNET_LR
    controller_lr: float = CONTROLLER_LR
    controller_entropy: float = CONTROLLER_ENTROPY
    uniform_warmup_epochs: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.n_derive_samples < 1:
            raise ValueError(f"n_derive_samples must be >= 1, got {self.n_derive_samples}")
        if not 0 <= self.uniform_warmup_epochs <= self.epochs:
            raise ValueError("uniform_warmup_epochs must lie within [0, epochs]")

    @classmethod
    def desk(cls, rank: int, seed: int = 0, epochs: int = 20) -> "SearchSchedule":
        # 15 supernet steps per epoch at either rank: the rank-1 train split
        # is smaller than one batch-32 pass would need, so it cycles
        warmup = epochs // 2
        if rank == 1:
            return cls(epochs=epochs, supernet_steps_per_epoch=30,
                       train_batch=32, reward_batch=16,
                       uniform_warmup_epochs=warmup, seed=seed)
        return cls(epochs=epochs, supernet_steps_per_epoch=30,
                   train_batch=4, reward_batch=2,
                   uniform_warmup_epochs=warmup, seed=seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _genome_obj(genome: Genome) -> dict:
    return json.loads(encode(genome))


def _genome_from_obj(obj: dict) -> Genome:
    return decode(json.dumps(obj))


@dataclass
class SearchResult:
    best_genome: Genome
    candidates: list[tuple[Genome, float]]
    wall_clock_seconds: float
    reward_curve: list[float]
    config: dict

    def to_dict(self) -> dict:
        return {
            "best_genome": _genome_obj(self.best_genome),
            "candidates": [
                {"genome": _genome_obj(g), "val_dice": d} for g, d in self.candidates
            ],
            "wall_clock_seconds": self.wall_clock_seconds,
            "reward_curve": self.reward_curve,
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SearchResult":
        return cls(
            best_genome=_genome_from_obj(d["best_genome"]),
            candidates=[
                (_genome_from_obj(c["genome"]), float(c["val_dice"]))
                for c in d["candidates"]
            ],
            wall_clock_seconds=float(d["wall_clock_seconds"]),
            reward_curve=[float(r) for r in d["reward_curve"]],
            config=d["config"],
        )


def select_best(candidates: list[tuple[Genome, float]]) -> int:
    """Index of the highest-scoring candidate; ties go to the earliest
    sampled. Invariant under positive affine rescaling of the scores."""
    if not candidates:
        raise ValueError("no candidates to select from")
    best = 0
    for i, (_, score) in enumerate(candidates):
        if score > candidates[best][1]:
            best = i
    return best


def _check_finite(loss: Tensor, context: dict) -> None:
    value = float(loss.data)
    if not np.isfinite(value):
        raise DivergenceError(
            f"non-finite loss {value} at {context}", {**context, "loss": value}
        )


def _require_splits(data: dict[str, list[Volume]], names: tuple[str, ...]) -> None:
    missing = [n for n in names if not data.get(n)]
    if missing:
        raise ValueError(f"dataset is missing required splits: {missing}")


def _sample_genome(controller: Controller | None, rng: np.random.Generator) -> Genome:
    if controller is None:
        return random_genome(rng)
    return controller.sample(rng).genome


def _supernet_epoch(weights: ModelWeights, spec: SupernetSpec,
                    controller: Controller | None, train_vols: list[Volume],
                    schedule: SearchSchedule, adam: Adam,
                    rng_data: np.random.Generator, rng_sample: np.random.Generator,
                    epoch: int, fixed_genome: Genome | None = None) -> float:
    """One pass over the training split; a fresh genome is drawn per batch
    unless a fixed genome is given. Returns the mean loss."""
    losses = []
    target = schedule.supernet_steps_per_epoch
    step = 0
    while True:
        for x, y in batches(train_vols, schedule.train_batch, rng_data):
            if target is not None and step >= target:
                break
            genome = fixed_genome or _sample_genome(controller, rng_sample)
            scores = supernet.forward(weights, spec, genome, Tensor(x), training=True)
            loss = metrics.soft_dice_loss(scores, y, spec.n_classes)
            _check_finite(loss, {"phase": "supernet", "epoch": epoch, "step": step,
                                 "genome": _genome_obj(genome)})
            loss.backward()
            adam.step()
            adam.zero_grad()
            losses.append(float(loss.data))
            step += 1
        if target is None or step >= target:
            break
    return float(np.mean(losses)) if losses else float("nan")


def _controller_epoch(controller: Controller | None, weights: ModelWeights,
                      spec: SupernetSpec, reward_vols: list[Volume],
                      schedule: SearchSchedule, rng_sample: np.random.Generator,
                      rng_reward: np.random.Generator) -> list[float]:
    """Policy updates against rewards measured with frozen supernet weights.
    With no controller (uniform policy) rewards are still recorded so the
    curves stay comparable."""
    rewards = []
    for _ in range(schedule.controller_steps_per_epoch):
        if controller is not None:
            arch = controller.sample(rng_sample)
        else:
            arch = SampledArch(random_genome(rng_sample), 0.0, 0.0)
        idx = rng_reward.choice(len(reward_vols),
                                size=min(schedule.reward_batch, len(reward_vols)),
                                replace=False)
        x, y = stack_volumes([reward_vols[i] for i in idx])
        reward = metrics.batch_reward(weights, spec, arch.genome, x, y)
        if controller is not None:
            controller.reinforce_step([(arch, reward)])
        rewards.append(reward)
    return rewards


def _derive(controller: Controller | None, weights: ModelWeights, spec: SupernetSpec,
            val_vols: list[Volume], n_samples: int,
            rng_sample: np.random.Generator) -> list[tuple[Genome, float]]:
    candidates = []
    for _ in range(n_samples):
        genome = _sample_genome(controller, rng_sample)
        report = metrics.evaluate(weights, spec, genome, val_vols, batch_stats=True)
        candidates.append((genome, report.mean))
    return candidates


def _run_search(data: dict[str, list[Volume]], spec: SupernetSpec,
                schedule: SearchSchedule, policy: str) -> SearchResult:
    _require_splits(data, ("train", "reward", "val"))
    t0 = time.monotonic()
    weights = supernet.init_search_weights(spec, stream(schedule.seed, "supernet-init"))
    controller = None
    if policy == "controller":
        controller = Controller(seed=derive_seed(schedule.seed, "controller-init"),
                                lr=schedule.controller_lr,
                                entropy_weight=schedule.controller_entropy)
    adam = Adam(weights.trainable(), lr=schedule.supernet_lr)
    rng_data = stream(schedule.seed, "data")
    rng_sample = stream(schedule.seed, "controller-sampling")
    rng_reward = stream(schedule.seed, "reward-batch")

    reward_curve = []
    for epoch in range(schedule.epochs):
        # warmup epochs train the shared weights on uniformly sampled paths
        # and leave the policy untouched, so every candidate op is fit
        # before rewards start steering the sampling distribution
        warm = epoch < schedule.uniform_warmup_epochs
        _supernet_epoch(weights, spec, None if warm else controller,
                        data["train"], schedule, adam, rng_data, rng_sample, epoch)
        rewards = _controller_epoch(None if warm else controller, weights, spec,
                                    data["reward"], schedule, rng_sample, rng_reward)
        reward_curve.append(float(np.mean(rewards)))

    candidates = _derive(controller, weights, spec, data["val"],
                         schedule.n_derive_samples, rng_sample)
    best = select_best(candidates)
    wall = time.monotonic() - t0
    return SearchResult(
        best_genome=candidates[best][0],
        candidates=candidates,
        wall_clock_seconds=wall,
        reward_curve=reward_curve,
        config={
            "policy": policy,
            "spec": spec.to_dict(),
            "schedule": schedule.to_dict(),
        },
    )


def search(data: dict[str, list[Volume]], spec: SupernetSpec,
           schedule: SearchSchedule) -> SearchResult:
    """Full protocol: per epoch, one pass of path-sampled supernet training
    then policy updates on frozen-weight rewards; afterwards, sample
    candidates, rank them on the validation split, return the best."""
    return _run_search(data, spec, schedule, policy="controller")


def random_search_baseline(data: dict[str, list[Volume]], spec: SupernetSpec,
                           schedule: SearchSchedule) -> SearchResult:
    """Control run: identical protocol with uniform genome sampling and no
    policy updates."""
    return _run_search(data, spec, schedule, policy="random")


def retrain(data: dict[str, list[Volume]], spec: SupernetSpec,
            arch: Genome | FixedBlock, epochs: int, seed: int = 0,
            batch_size: int | None = None, lr: float = SUPERNET_LR,
            ) -> tuple[ModelWeights, metrics.DiceReport]:
    """Train from a fresh initialization on the training split only, then
    report test dice. ``arch`` is a genome or the fixed baseline block."""
    _require_splits(data, ("train", "test"))
    if batch_size is None:
        batch_size = 32 if spec.rank == 1 else 4
    rng_init = stream(seed, "retrain-init")
    rng_data = stream(seed, "retrain-data")
    if isinstance(arch, FixedBlock):
        weights = supernet.init_baseline_weights(spec, rng_init, arch)
        genome = None
    else:
        weights = supernet.init_search_weights(spec, rng_init)
        genome = arch
    adam = Adam(weights.trainable(), lr=lr)
    schedule = SearchSchedule(epochs=max(epochs, 1), train_batch=batch_size, seed=seed)
    for epoch in range(epochs):
        if genome is None:
            for step, (x, y) in enumerate(batches(data["train"], batch_size, rng_data)):
                scores = supernet.forward_baseline(weights, spec, Tensor(x), training=True)
                loss = metrics.soft_dice_loss(scores, y, spec.n_classes)
                _check_finite(loss, {"phase": "retrain-baseline", "epoch": epoch, "step": step})
                loss.backward()
                adam.step()
                adam.zero_grad()
        else:
            _supernet_epoch(weights, spec, None, data["train"], schedule, adam,
                            rng_data, rng_data, epoch, fixed_genome=genome)
    report = metrics.evaluate(weights, spec, genome, data["test"])
    return weights, report


def transfer_and_retrain(data2d: dict[str, list[Volume]], genome: Genome,
                         spec: SupernetSpec, epochs: int, seed: int = 0,
                         batch_size: int | None = None, lr: float = SUPERNET_LR,
                         ) -> tuple[ModelWeights, metrics.DiceReport]:
    """Reuse a block design discovered on rank-1 data at rank 2: extend the
    kernels isotropically and retrain from scratch on the rank-2 dataset."""
    genome2, spec2 = supernet.extend_to_2d(genome, spec)
    return retrain(data2d, spec2, genome2, epochs, seed=seed,
                   batch_size=batch_size, lr=lr)
