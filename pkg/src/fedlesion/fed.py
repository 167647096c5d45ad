"""Federated training: site rounds, even aggregation, validation-gated teacher.

One round = every site trains locally for ``local_epochs`` passes over its
slice set starting from the distributed central student, the server averages
the resulting weights evenly, scores the average on the clean central
validation set, and promotes it to teacher only if it strictly beats the best
score so far. Both the new average and the (possibly unchanged) teacher are
redistributed. Correction modes act inside the site loop: the local-EMA
variant rebuilds its teacher from the distributed student each round and
tracks the student every iteration, the central variant uses the fixed
best-so-far central model and never touches it.

Sites are simulated in one process as isolated state; training is sequential
and fully reproducible from the config seeds (Adam state is rebuilt at each
site every round, since only weights travel).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from . import ingest
from .correction import (
    CorrectionPolicy,
    dhlc_correct,
    ema_update_module,
    flip_counts,
    smooth_labels,
    soft_correct,
)
from .errors import ConfigurationError, TrainingError
from .metrics import MetricsReport, binarize, evaluate
from .model import (
    LesionUNet,
    UNetConfig,
    WeightVector,
    build_model,
    init_weights,
    load_saved_weights,
    make_optimizer,
    predict_probs,
    save_weights,
    train_step,
    weights_from_module,
)
from .synth import FederationDataset, Volume


@dataclass(frozen=True)
class FederationConfig:
    n_sites: int = 3
    rounds: int = 20
    learning_rate: float = 7.0e-4
    weight_decay: float = 1.0e-5
    batch_size: int = 8
    local_epochs: int = 1
    policy: CorrectionPolicy = field(default_factory=CorrectionPolicy)
    seed: int = 0
    site_seeds: tuple[int, ...] | None = None
    validation_metric: str = "v_dice"
    checkpoint_every: int = 1

    def __post_init__(self):
        if self.n_sites < 1 or self.rounds < 0:
            raise ConfigurationError("n_sites must be >= 1 and rounds >= 0")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.local_epochs < 1:
            raise ConfigurationError("learning_rate, batch_size and local_epochs must be positive")
        if self.site_seeds is not None and len(self.site_seeds) != self.n_sites:
            raise ConfigurationError("site_seeds must list one seed per site")
        if self.validation_metric not in ("v_dice", "p_dice", "precision", "recall"):
            raise ConfigurationError(f"unknown validation metric {self.validation_metric!r}")

    def resolved_site_seeds(self) -> tuple[int, ...]:
        if self.site_seeds is not None:
            return tuple(self.site_seeds)
        state = np.random.SeedSequence([self.seed, 7]).generate_state(self.n_sites)
        return tuple(int(s) for s in state)


@dataclass
class FederationState:
    round: int = -1
    student: WeightVector | None = None
    teacher: WeightVector | None = None
    best_val_score: float = float("-inf")
    history: list[dict] = field(default_factory=list)

    def history_dict(self) -> dict:
        return {"round": self.round, "best_val_score": self.best_val_score, "history": self.history}


def aggregate(site_weights: list[WeightVector]) -> WeightVector:
    """Unweighted elementwise mean of same-architecture weight vectors."""
    if not site_weights:
        raise ConfigurationError("cannot aggregate an empty list of weights")
    first = site_weights[0]
    for other in site_weights[1:]:
        first.check_combinable(other)
    arrays = {}
    for name, ref in first.arrays.items():
        stacked = np.stack([w.arrays[name].astype(np.float64) for w in site_weights])
        mean = stacked.mean(axis=0)
        if np.issubdtype(ref.dtype, np.integer):
            arrays[name] = np.rint(mean).astype(ref.dtype)
        else:
            arrays[name] = mean.astype(ref.dtype)
    return WeightVector(arrays=arrays, fingerprint=first.fingerprint)


def volumes_to_arrays(volumes: list[Volume]) -> tuple[np.ndarray, np.ndarray]:
    """Pool every brain slice of the volumes into [N,2,H,W] / [N,H,W] arrays."""
    records = [rec for vol in volumes for rec in ingest.slices(vol)]
    if not records:
        return np.zeros((0, 2, 1, 1), np.float32), np.zeros((0, 1, 1), np.int64)
    images = np.stack([r.image_slice for r in records]).astype(np.float32)
    labels = np.stack([r.mask_slice for r in records]).astype(np.int64)
    return images, labels


def _batch_targets(
    policy: CorrectionPolicy,
    active: bool,
    student: LesionUNet,
    teacher: LesionUNet | None,
    x: torch.Tensor,
    y: torch.Tensor,
) -> tuple[torch.Tensor, tuple[int, int]]:
    if not active or policy.mode == "none":
        return y, (0, 0)
    if policy.mode == "smoothing":
        return smooth_labels(y, policy.alpha), (0, 0)
    if policy.mode == "soft":
        with torch.no_grad():
            student.eval()
            probs = F.softmax(student(x), dim=1)
            student.train()
        return soft_correct(y, probs, policy.epsilon), (0, 0)
    # hard correction from a teacher (local EMA copy or fixed central model)
    with torch.no_grad():
        teacher.eval()
        probs = F.softmax(teacher(x), dim=1)
    corrected = dhlc_correct(y, probs, policy.h0, policy.h1)
    return corrected, flip_counts(y, corrected)


def train_site_round(
    images: np.ndarray,
    labels: np.ndarray,
    start_weights: WeightVector,
    teacher_weights: WeightVector,
    model_cfg: UNetConfig,
    fed_cfg: FederationConfig,
    round_index: int,
    site_seed: int,
) -> tuple[WeightVector, dict]:
    """Run one site's local epoch(s); returns final weights and a round log.

    The passed teacher weights are never modified; the local-EMA mode works
    on a fresh copy re-synchronized to the distributed student.
    """
    policy = fed_cfg.policy
    log = {"loss": 0.0, "steps": 0, "flips_10": 0, "flips_01": 0}
    n = len(images)
    if n == 0:
        return start_weights.copy(), log

    student = build_model(model_cfg, start_weights)
    optimizer = make_optimizer(student, fed_cfg.learning_rate, fed_cfg.weight_decay)
    active = round_index >= policy.warmup_epochs and policy.mode != "none"
    teacher: LesionUNet | None = None
    if active and policy.mode == "dhlc_local":
        teacher = build_model(model_cfg, start_weights)
    elif active and policy.mode == "celc_central":
        teacher = build_model(model_cfg, teacher_weights)

    rng = np.random.default_rng([site_seed, round_index])
    total_loss = 0.0
    for _epoch in range(fed_cfg.local_epochs):
        order = rng.permutation(n)
        for lo in range(0, n, fed_cfg.batch_size):
            idx = order[lo : lo + fed_cfg.batch_size]
            x = torch.from_numpy(images[idx])
            y = torch.from_numpy(labels[idx])
            targets, (f10, f01) = _batch_targets(policy, active, student, teacher, x, y)
            try:
                total_loss += train_step(student, optimizer, x, targets)
            except TrainingError as exc:
                raise TrainingError(f"round {round_index}, site seed {site_seed}: {exc}") from exc
            log["steps"] += 1
            log["flips_10"] += f10
            log["flips_01"] += f01
            if active and policy.mode == "dhlc_local":
                ema_update_module(teacher, student, policy.ema_decay)

    log["loss"] = total_loss / max(log["steps"], 1)
    return weights_from_module(student), log


def predict_volume_mask(module: LesionUNet, volume: Volume, batch_size: int = 16) -> np.ndarray:
    """Binary prediction with the volume's spatial shape (argmax per voxel)."""
    records = ingest.slices(volume)
    out = np.zeros(volume.spatial_shape, dtype=np.uint8)
    if not records:
        return out
    stack = np.stack([r.image_slice for r in records]).astype(np.float32)
    probs = predict_probs(module, stack, batch_size=batch_size)
    for rec, prob in zip(records, probs):
        if volume.image.ndim == 3:
            out[...] = binarize(prob)
        else:
            out[rec.slice_index] = binarize(prob)
    return out


def evaluate_weights(
    model_cfg: UNetConfig,
    weights: WeightVector,
    volumes: list[Volume],
    batch_size: int = 16,
) -> MetricsReport:
    """Score a weight vector against the volumes' clean ground truth."""
    module = build_model(model_cfg, weights)
    predictions = [predict_volume_mask(module, v, batch_size) for v in volumes]
    truths = [v.ground_truth for v in volumes]
    return evaluate(predictions, truths, [v.subject_id for v in volumes])


def update_central_teacher(state: FederationState, new_central: WeightVector, val_score: float) -> bool:
    """Install the new aggregate as student; promote to teacher only on strict improvement."""
    state.student = new_central
    promoted = val_score > state.best_val_score
    if promoted:
        state.teacher = new_central.copy()
        state.best_val_score = val_score
    return promoted


def _write_round_checkpoint(out_dir: Path, state: FederationState, model_cfg: UNetConfig) -> None:
    ck = out_dir / "checkpoints" / f"round_{state.round:03d}"
    ck.mkdir(parents=True, exist_ok=True)
    save_weights(state.student, ck / "student.npz", model_cfg)
    save_weights(state.teacher, ck / "teacher.npz", model_cfg)
    (ck / "state.json").write_text(json.dumps(state.history_dict(), indent=2))
    (out_dir / "history.json").write_text(json.dumps(state.history_dict(), indent=2))


def load_round_checkpoint(round_dir: str | Path) -> FederationState:
    round_dir = Path(round_dir)
    student, _ = load_saved_weights(round_dir / "student.npz")
    teacher, _ = load_saved_weights(round_dir / "teacher.npz")
    saved = json.loads((round_dir / "state.json").read_text())
    return FederationState(
        round=saved["round"],
        student=student,
        teacher=teacher,
        best_val_score=saved["best_val_score"],
        history=saved["history"],
    )


def run_federation(
    datasets: FederationDataset,
    model_cfg: UNetConfig,
    fed_cfg: FederationConfig,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    progress: Callable[[str], None] | None = None,
) -> tuple[WeightVector, FederationState]:
    """Run R rounds of site training / aggregation / validation / distribution.

    Returns the best central model by validation score (the final teacher)
    together with the full state and per-round history.
    """
    if len(datasets.site_train) != fed_cfg.n_sites:
        raise ConfigurationError(
            f"config expects {fed_cfg.n_sites} sites but the dataset has {len(datasets.site_train)}"
        )
    if not datasets.central_validation:
        raise ConfigurationError("a central validation set is required for teacher promotion")

    site_data = [volumes_to_arrays(vols) for vols in datasets.site_train]
    site_seeds = fed_cfg.resolved_site_seeds()

    if resume is not None:
        state = load_round_checkpoint(resume)
        if state.student.fingerprint != model_cfg.fingerprint():
            raise ConfigurationError("resume checkpoint does not match the model config")
    else:
        student = init_weights(model_cfg, fed_cfg.seed)
        state = FederationState(round=-1, student=student, teacher=student.copy())

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    for round_index in range(state.round + 1, fed_cfg.rounds):
        site_weights = []
        site_logs = []
        for site, (images, labels) in enumerate(site_data):
            weights, log = train_site_round(
                images, labels, state.student, state.teacher,
                model_cfg, fed_cfg, round_index, site_seeds[site],
            )
            site_weights.append(weights)
            site_logs.append(log)

        new_central = aggregate(site_weights)
        report = evaluate_weights(model_cfg, new_central, datasets.central_validation)
        val_score = report.cohort()[fed_cfg.validation_metric]
        promoted = update_central_teacher(state, new_central, val_score)
        state.round = round_index
        state.history.append(
            {
                "round": round_index,
                "site_losses": [lg["loss"] for lg in site_logs],
                "site_flips_10": [lg["flips_10"] for lg in site_logs],
                "site_flips_01": [lg["flips_01"] for lg in site_logs],
                "val_score": val_score,
                "val_metric": fed_cfg.validation_metric,
                "best_val_score": state.best_val_score,
                "teacher_updated": promoted,
            }
        )
        if progress is not None:
            progress(
                f"round {round_index + 1}/{fed_cfg.rounds} "
                f"val {fed_cfg.validation_metric}={val_score:.4f} best={state.best_val_score:.4f}"
            )
        if out_path is not None and (
            round_index % fed_cfg.checkpoint_every == 0 or round_index == fed_cfg.rounds - 1
        ):
            _write_round_checkpoint(out_path, state, model_cfg)

    return state.teacher, state


def train_centralized(
    pooled: list[Volume],
    model_cfg: UNetConfig,
    fed_cfg: FederationConfig,
    validation: list[Volume],
    out_dir: str | Path | None = None,
    progress: Callable[[str], None] | None = None,
) -> tuple[WeightVector, FederationState]:
    """Same optimizer and schedule on merged data: a one-site federation."""
    if not pooled:
        raise ConfigurationError("centralized training needs a non-empty data pool")
    datasets = FederationDataset(site_train=[list(pooled)], central_validation=list(validation))
    seeds = fed_cfg.resolved_site_seeds()[:1] if fed_cfg.site_seeds else None
    cfg = dataclasses.replace(fed_cfg, n_sites=1, site_seeds=seeds)
    return run_federation(datasets, model_cfg, cfg, out_dir=out_dir, progress=progress)
