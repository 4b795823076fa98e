"""Self-supervised generator training against a frozen LLM backend.

The structural fidelity term backpropagates normally. The semantic term
is a set distance over generated text, so no gradient exists; two
strategies are provided:

  * ``spsa`` (default): a simultaneous-perturbation estimate of the
    semantic gradient at the generator output, injected as an upstream
    gradient. Perturbations are Rademacher +-1, shared across the batch,
    and perturbed images are clamped to [0, 1] before captioning.
  * ``staged``: fidelity-only gradients; after a warmup the semantic
    loss is evaluated on the validation set for checkpoint selection and
    early stopping, never for gradients.

All randomness is derived statelessly from (seed, epoch/step) so an
interrupted run resumed from its saved state continues identically.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import BackendError, BackendFailure, MissingRGBPair, ShapeMismatch
from .events import DatasetIndex, load_events_file
from .generator import CheckpointMeta, Generator, load_checkpoint, pad_to_grid, save_checkpoint
from .llm import CAPTION_PROMPT, CaptionRequest, caption, image_sha256
from .losses import LossWeights, dual_loss, fidelity_loss_t, jaccard_loss
from .representation import encode_tencode, load_image

METRICS_HEADER = ("step", "semantic", "fidelity", "dual", "lr", "wall_ms")
LAST_CHECKPOINT = "last.ckpt"
BEST_CHECKPOINT = "best.ckpt"
TRAIN_STATE = "train_state.pt"

# rng stream tags, to keep stateless draws from colliding
_RNG_SHUFFLE = 17
_RNG_SPSA = 23


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weights: LossWeights = field(default_factory=LossWeights)
    semantic_strategy: str = "spsa"  # spsa | staged
    spsa_pairs_per_batch: int = 1
    spsa_step: float = 0.05
    warmup_epochs: int = 0
    seed: int = 0
    checkpoint_interval: int = 100
    grad_clip_norm: float = 1.0
    caption_max_tokens: int = 64
    early_stop_patience: int = 0  # epochs without val improvement; 0 disables

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.semantic_strategy not in ("spsa", "staged"):
            raise ValueError(f"unknown semantic strategy {self.semantic_strategy!r}")
        if self.spsa_pairs_per_batch < 1:
            raise ValueError("spsa_pairs_per_batch must be >= 1")
        if self.spsa_step <= 0:
            raise ValueError("spsa_step must be positive")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")


@dataclass(frozen=True)
class TrainPair:
    sample_id: str
    input_frame: np.ndarray   # (H, W, 3) float32 in [0, 1]
    target_frame: np.ndarray  # paired RGB frame, same shape


@dataclass
class MetricsRow:
    step: int
    semantic: float
    fidelity: float
    dual: float
    lr: float
    wall_ms: float


@dataclass
class TrainResult:
    checkpoint_path: str
    metrics: list[MetricsRow]
    best_checkpoint_path: str | None = None
    best_val_dual: float | None = None


def load_train_pairs(
    index: DatasetIndex,
    grid_factor: int,
    sensor_size: tuple[int, int] = (34, 34),
) -> list[TrainPair]:
    """Materialize (Tencode frame, RGB frame) pairs for every sample.

    Every sample needs a paired RGB frame; the pairing is explicit in the
    manifest rather than guessed from file names.
    """
    pairs = []
    width, height = sensor_size
    for sample in index.samples:
        if not sample.rgb_path:
            raise MissingRGBPair(f"sample {sample.sample_id!r} has no rgb_path")
        stream = load_events_file(sample.events_path, width, height)
        t0, t1 = stream.time_span()
        frame = encode_tencode(stream, t0, t1)
        rgb = load_image(sample.rgb_path)
        if rgb.shape != frame.pixels.shape:
            raise ShapeMismatch(
                f"sample {sample.sample_id!r}: rgb {rgb.shape} vs events {frame.pixels.shape}"
            )
        x, _ = pad_to_grid(frame.pixels, grid_factor)
        y, _ = pad_to_grid(rgb, grid_factor)
        pairs.append(TrainPair(sample.sample_id, x, y))
    return pairs


# --- zeroth-order gradient estimation ---


@dataclass
class SpsaEstimate:
    gradient: np.ndarray
    value: float  # mean of the probed loss values


def spsa_gradient(x, loss_fn, pairs: int, step: float, rng, perturbation_shape=None) -> SpsaEstimate:
    """Two-sided simultaneous-perturbation gradient estimate of ``loss_fn``.

    For each pair a Rademacher perturbation ``delta`` is drawn and the
    estimate ``(L(x + step*delta) - L(x - step*delta)) / (2*step) * delta``
    is accumulated. ``perturbation_shape`` may broadcast against ``x``
    (e.g. one perturbation shared across a leading batch axis).
    """
    if pairs < 1:
        raise ValueError("pairs must be >= 1")
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=np.float64)
    shape = tuple(perturbation_shape) if perturbation_shape is not None else x.shape
    grad = np.zeros_like(x)
    probes = []
    for _ in range(pairs):
        delta = rng.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0
        loss_plus = float(loss_fn(x + step * delta))
        loss_minus = float(loss_fn(x - step * delta))
        grad += (loss_plus - loss_minus) / (2.0 * step) * np.broadcast_to(delta, x.shape)
        probes.extend((loss_plus, loss_minus))
    grad /= pairs
    return SpsaEstimate(gradient=grad, value=float(np.mean(probes)))


def _caption_bchw(backend, image_chw: np.ndarray, max_tokens: int) -> str:
    hwc = np.ascontiguousarray(np.transpose(image_chw, (1, 2, 0)), dtype=np.float32)
    req = CaptionRequest(image=hwc, prompt=CAPTION_PROMPT, max_tokens=max_tokens)
    return caption(backend, req).text


def semantic_gradient_spsa(
    output: np.ndarray,
    rgb_frames: np.ndarray,
    backend,
    pairs: int,
    step: float,
    rng,
    caption_cache: dict | None = None,
    max_tokens: int = 64,
) -> SpsaEstimate:
    """Estimate the semantic-loss gradient at the generator output.

    ``output`` and ``rgb_frames`` are (B, 3, H, W) arrays. The reference
    captions of the RGB frames are fixed for the whole estimate (and may
    be cached across steps, keyed by image content).
    """
    output = np.asarray(output, dtype=np.float64)
    rgb_frames = np.asarray(rgb_frames, dtype=np.float64)
    cache = caption_cache if caption_cache is not None else {}
    try:
        refs = []
        for frame in rgb_frames:
            key = image_sha256(np.transpose(frame, (1, 2, 0)).astype(np.float32))
            if key not in cache:
                cache[key] = _caption_bchw(backend, frame, max_tokens)
            refs.append(cache[key])

        def semantic_of(batch: np.ndarray) -> float:
            batch = np.clip(batch, 0.0, 1.0)
            losses = [
                jaccard_loss(_caption_bchw(backend, img, max_tokens), ref)
                for img, ref in zip(batch, refs)
            ]
            return float(np.mean(losses))

        return spsa_gradient(
            output, semantic_of, pairs, step, rng, perturbation_shape=output.shape[1:]
        )
    except BackendError as e:
        raise BackendFailure(str(e)) from e


def evaluate_semantic(generator: Generator, val_pairs, backend, max_tokens: int = 64) -> float:
    """Mean caption-distance between generated output and paired RGB frames."""
    if not val_pairs:
        raise ValueError("validation set must be nonempty")
    generator.eval()
    losses = []
    try:
        with torch.no_grad():
            for pair in val_pairs:
                x = torch.from_numpy(np.transpose(pair.input_frame, (2, 0, 1))[None]).float()
                out = generator(x)[0].numpy()
                cap_e = _caption_bchw(backend, out, max_tokens)
                cap_r = _caption_bchw(backend, np.transpose(pair.target_frame, (2, 0, 1)), max_tokens)
                losses.append(jaccard_loss(cap_e, cap_r))
    except BackendError as e:
        raise BackendFailure(str(e)) from e
    return float(np.mean(losses))


# --- the training loop ---


def _stack_pairs(pairs) -> tuple[torch.Tensor, torch.Tensor]:
    xs = np.stack([np.transpose(p.input_frame, (2, 0, 1)) for p in pairs])
    ys = np.stack([np.transpose(p.target_frame, (2, 0, 1)) for p in pairs])
    return torch.from_numpy(xs).float(), torch.from_numpy(ys).float()


def _validation_fidelity(generator, val_x, val_y) -> float:
    generator.eval()
    with torch.no_grad():
        return float(fidelity_loss_t(generator(val_x), val_y))


def _save_state(out_dir: Path, generator, optimizer, step, config, metrics_tail):
    save_checkpoint(
        generator,
        out_dir / LAST_CHECKPOINT,
        CheckpointMeta(seed=config.seed, step=step, metrics_tail=metrics_tail),
    )
    torch.save(
        {"optimizer": optimizer.state_dict(), "step": step, "seed": config.seed},
        out_dir / TRAIN_STATE,
    )


def train(
    train_pairs,
    val_pairs,
    generator: Generator,
    backend,
    config: TrainConfig,
    out_dir: str | Path,
    resume_from: str | Path | None = None,
) -> TrainResult:
    """Run the dual-objective training loop.

    Saves a rolling resumable state (``last.ckpt`` + ``train_state.pt``)
    every ``checkpoint_interval`` steps and at the end; when a validation
    set is given, the lowest-validation-dual checkpoint is kept as
    ``best.ckpt``. Metrics are appended per step to ``metrics.csv``.
    """
    if not train_pairs:
        raise ValueError("training set must be nonempty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    lam = config.weights.lambda_semantic
    gam = config.weights.gamma_fidelity
    x_all, y_all = _stack_pairs(train_pairs)
    n = len(train_pairs)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * steps_per_epoch

    optimizer = torch.optim.Adam(
        generator.parameters(), lr=config.learning_rate, betas=(config.beta1, config.beta2)
    )
    start_step = 0
    if resume_from is not None:
        resume_dir = Path(resume_from)
        restored, meta = load_checkpoint(resume_dir / LAST_CHECKPOINT, expected_config=generator.config)
        generator.load_state_dict(restored.state_dict())
        state = torch.load(resume_dir / TRAIN_STATE, weights_only=False)
        optimizer.load_state_dict(state["optimizer"])
        start_step = int(state["step"])

    metrics: list[MetricsRow] = []
    metrics_path = out_dir / "metrics.csv"
    fresh_log = start_step == 0 or not metrics_path.exists()
    log_fh = open(metrics_path, "w" if fresh_log else "a", newline="")
    writer = csv.writer(log_fh)
    if fresh_log:
        writer.writerow(METRICS_HEADER)

    caption_cache: dict[str, str] = {}
    use_spsa = config.semantic_strategy == "spsa" and lam > 0
    val_x, val_y = _stack_pairs(val_pairs) if val_pairs else (None, None)
    best_val = math.inf
    best_path: str | None = None
    epochs_since_best = 0
    order = None

    try:
        for step in range(start_step, total_steps):
            epoch, pos = divmod(step, steps_per_epoch)
            if pos == 0 or order is None:
                order = np.random.default_rng([config.seed, _RNG_SHUFFLE, epoch]).permutation(n)
            idx = torch.as_tensor(
                order[pos * config.batch_size : (pos + 1) * config.batch_size], dtype=torch.long
            )
            xb, yb = x_all[idx], y_all[idx]

            started = time.perf_counter()
            generator.train()
            out = generator(xb)
            fid = fidelity_loss_t(out, yb)
            fid_value = float(fid.detach())
            semantic_value = 0.0
            loss = gam * fid
            if use_spsa:
                estimate = semantic_gradient_spsa(
                    out.detach().numpy(),
                    yb.numpy(),
                    backend,
                    config.spsa_pairs_per_batch,
                    config.spsa_step,
                    np.random.default_rng([config.seed, _RNG_SPSA, step]),
                    caption_cache=caption_cache,
                    max_tokens=config.caption_max_tokens,
                )
                semantic_value = estimate.value
                ghat = torch.from_numpy(estimate.gradient.astype(np.float32))
                loss = loss + lam * (ghat * out).sum()
            optimizer.zero_grad()
            loss.backward()
            if config.grad_clip_norm > 0:
                nn.utils.clip_grad_norm_(generator.parameters(), config.grad_clip_norm)
            optimizer.step()

            breakdown = dual_loss(semantic_value, fid_value, config.weights)
            row = MetricsRow(
                step=step,
                semantic=breakdown.semantic,
                fidelity=breakdown.fidelity,
                dual=breakdown.dual,
                lr=config.learning_rate,
                wall_ms=(time.perf_counter() - started) * 1000.0,
            )
            metrics.append(row)
            writer.writerow([row.step, row.semantic, row.fidelity, row.dual, row.lr, row.wall_ms])
            log_fh.flush()

            if config.checkpoint_interval > 0 and (step + 1) % config.checkpoint_interval == 0:
                _save_state(out_dir, generator, optimizer, step + 1, config, _tail(metrics))

            end_of_epoch = pos == steps_per_epoch - 1
            if end_of_epoch and val_pairs:
                val_fid = _validation_fidelity(generator, val_x, val_y)
                val_sem = 0.0
                semantic_applies = lam > 0 and (
                    config.semantic_strategy == "spsa" or epoch + 1 > config.warmup_epochs
                )
                if semantic_applies:
                    val_sem = evaluate_semantic(
                        generator, val_pairs, backend, config.caption_max_tokens
                    )
                val_dual = lam * val_sem + gam * val_fid
                if val_dual < best_val:
                    best_val = val_dual
                    best_path = str(out_dir / BEST_CHECKPOINT)
                    save_checkpoint(
                        generator,
                        best_path,
                        CheckpointMeta(seed=config.seed, step=step + 1, metrics_tail=_tail(metrics)),
                    )
                    epochs_since_best = 0
                else:
                    epochs_since_best += 1
                    if config.early_stop_patience and epochs_since_best >= config.early_stop_patience:
                        break
    except BackendFailure:
        _save_state(out_dir, generator, optimizer, step, config, _tail(metrics))
        log_fh.close()
        raise
    else:
        _save_state(out_dir, generator, optimizer, total_steps, config, _tail(metrics))
        log_fh.close()

    return TrainResult(
        checkpoint_path=str(out_dir / LAST_CHECKPOINT),
        metrics=metrics,
        best_checkpoint_path=best_path,
        best_val_dual=None if best_val is math.inf else best_val,
    )


def _tail(metrics, k: int = 20) -> list:
    return [[r.step, r.semantic, r.fidelity, r.dual] for r in metrics[-k:]]
