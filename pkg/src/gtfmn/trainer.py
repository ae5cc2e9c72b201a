"""Training loop, evaluation sweeps and the two ablations."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import DegradationSpec, PairedSample, bicubic_upscale, load_pairs, patch_sampler
from .metrics import MetricReport, aggregate, evaluate_pair, write_report
from .model import GtfmnConfig, GtfmnModel, count_parameters, load_checkpoint, save_checkpoint
from .optim import Adam, l1_loss, map_smoothness_loss
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, checkpoint: Path):
        super().__init__(f"non-finite loss at step {step}; last good weights saved to {checkpoint}")
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    model: GtfmnConfig = field(default_factory=GtfmnConfig)
    spec: DegradationSpec = field(default_factory=DegradationSpec)
    manifest: str = ""
    eval_manifests: dict[str, str] = field(default_factory=dict)
    # desk defaults; none of these are published
    lr_patch: int = 32
    batch: int = 8
    steps: int = 20000
    lr: float = 2e-4
    lr_milestones: tuple[int, ...] = ()
    seed: int = 0
    ckpt_every: int = 1000
    eval_every: int = 0
    log_every: int = 100
    deterministic: bool = True
    augment: bool = False
    border_crop: int | None = None
    map_smoothness: float = 0.0

    def __post_init__(self):
        for name in ("lr_patch", "batch", "steps", "ckpt_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.eval_every < 0 or self.log_every < 0:
            raise ValueError("eval_every and log_every must be >= 0")
        if self.spec.scale != self.model.scale:
            raise ValueError(f"degradation scale {self.spec.scale} != model scale {self.model.scale}")
        if self.lr < 0 or self.map_smoothness < 0:
            raise ValueError("lr and map_smoothness must be >= 0")

    @property
    def crop(self) -> int:
        return self.model.scale if self.border_crop is None else self.border_crop

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            val = getattr(self, f.name)
            if f.name in ("model", "spec"):
                for k, v in asdict(val).items():
                    lines.append(f"{f.name}.{k} = {_fmt(v)}")
            elif f.name == "eval_manifests":
                for k, v in val.items():
                    lines.append(f"eval_manifests.{k} = {v}")
            else:
                lines.append(f"{f.name} = {_fmt(val)}")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


@dataclass
class RunLog:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    wall: list[float] = field(default_factory=list)
    evals: list[tuple[int, str, MetricReport]] = field(default_factory=list)
    checkpoint: Path | None = None
    map_reads: int = 0
    parameters: int = 0


def _thread_guard(deterministic: bool):
    if not deterministic:
        return nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=1)


def train_step(model: GtfmnModel, opt: Adam, lr: np.ndarray, hr: np.ndarray, map_smoothness: float = 0.0) -> float:
    """One sample -> forward -> L1 -> backward -> Adam step. Returns the loss.

    Raises FloatingPointError without touching the weights when the loss is not finite.
    """
    opt.zero_grad()
    with Tape() as tape:
        sr, illum = model(Tensor(lr, dtype=model.dtype))
        loss = l1_loss(sr, Tensor(hr, dtype=model.dtype))
        if map_smoothness > 0 and model.illumination is not None:
            loss = T.add(loss, T.scale(map_smoothness_loss(illum.values), map_smoothness))
    value = loss.item()
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite loss {value}")
    tape.backward(loss)
    opt.step()
    return value


def train(config: TrainConfig, run_dir: str | Path, pairs: Sequence[PairedSample] | None = None) -> tuple[RunLog, GtfmnModel]:
    """Train a model and write ``config.txt``, ``loss.csv``, ``eval_*.csv``, ``ckpt_*.bin``."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if pairs is None:
        if not config.manifest:
            raise FileNotFoundError("no training manifest configured")
        pairs = load_pairs(config.manifest, config.model.scale)
    (run_dir / "config.txt").write_text(config.to_text())

    model = GtfmnModel(config.model, seed=config.seed)
    opt = Adam(model.parameters(), lr=config.lr, milestones=config.lr_milestones)
    batches = patch_sampler(pairs, config.lr_patch, config.batch, seed=config.seed,
                            scale=config.model.scale, augment=config.augment)
    eval_sets = {name: load_pairs(path, config.model.scale) for name, path in config.eval_manifests.items()}

    run = RunLog(parameters=count_parameters(model))
    start = time.perf_counter()
    last_good = run_dir / "ckpt_last_good.bin"
    with _thread_guard(config.deterministic), open(run_dir / "loss.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for step in range(1, config.steps + 1):
            lr, hr = next(batches)
            try:
                value = train_step(model, opt, lr, hr, config.map_smoothness)
            except FloatingPointError:
                save_checkpoint(model, last_good, extra={"step": step - 1})
                raise TrainingDiverged(step, last_good) from None
            run.steps.append(step)
            run.losses.append(value)
            run.wall.append(time.perf_counter() - start)
            writer.writerow([step, repr(value)])
            if config.log_every and step % config.log_every == 0:
                log.info("step %d loss %.5f", step, value)
            if step % config.ckpt_every == 0:
                save_checkpoint(model, run_dir / f"ckpt_{step:06d}.bin", extra={"step": step})
            if config.eval_every and step % config.eval_every == 0:
                for name, ev in eval_sets.items():
                    reports = evaluate_model(model, ev, config.crop)
                    write_eval_csv(run_dir / f"eval_{name}_{step:06d}.csv", reports)
                    run.evals.append((step, name, aggregate(reports)))
    final = run_dir / "ckpt_final.bin"
    save_checkpoint(model, final, extra={"step": config.steps})
    run.checkpoint = final
    run.map_reads = model.map_reads
    return run, model


def fit_patch(model: GtfmnModel, lr: np.ndarray, hr: np.ndarray, steps: int, lr_rate: float = 2e-4,
              target: float | None = None, deterministic: bool = True) -> list[float]:
    """Overfit a single (LR, HR) pair; stops early once the loss drops below ``target``."""
    opt = Adam(model.parameters(), lr=lr_rate)
    losses = []
    with _thread_guard(deterministic):
        for _ in range(steps):
            losses.append(train_step(model, opt, lr, hr))
            if target is not None and losses[-1] < target:
                break
    return losses


def write_eval_csv(path: str | Path, reports: Sequence[MetricReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "psnr", "mse", "ssim", "border_crop"])
        for r in list(reports) + [aggregate(reports)]:
            w.writerow([r.id, f"{r.psnr:.6f}", f"{r.mse:.6f}", f"{r.ssim:.6f}", r.border_crop])


# ---------------------------------------------------------------------------
# evaluation


def super_resolve(model: GtfmnModel, lr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Run inference on one 3 x H x W image; returns (SR clipped to [0, 1], M)."""
    with T.no_grad():
        sr, illum = model(Tensor(lr[None], dtype=model.dtype))
    return np.clip(sr.data[0].astype(np.float64), 0.0, 1.0), illum.values.data[0, 0].astype(np.float64)


def evaluate_model(model: GtfmnModel, pairs: Sequence[PairedSample], border_crop: int) -> list[MetricReport]:
    s = model.config.scale
    reports = []
    for p in pairs:
        if p.hr.shape[1] != p.lr.shape[1] * s or p.hr.shape[2] != p.lr.shape[2] * s:
            raise ValueError(f"{p.id}: pair is not x{s} (LR {p.lr.shape[1:]}, HR {p.hr.shape[1:]})")
        sr, _ = super_resolve(model, p.lr)
        reports.append(evaluate_pair(sr, p.hr, border_crop, p.id))
    return reports


def evaluate_bicubic(pairs: Sequence[PairedSample], scale: int, border_crop: int) -> list[MetricReport]:
    return [evaluate_pair(bicubic_upscale(p.lr, scale), p.hr, border_crop, p.id) for p in pairs]


def evaluate(checkpoint: str | Path | GtfmnModel, manifest: str | Path, border_crop: int | None = None,
             out_path: str | Path | None = None) -> tuple[list[MetricReport], MetricReport]:
    """Per-image and mean Y-channel metrics of a checkpoint on a test manifest."""
    model = checkpoint if isinstance(checkpoint, GtfmnModel) else load_checkpoint(checkpoint)
    crop = model.config.scale if border_crop is None else border_crop
    pairs = load_pairs(manifest)
    reports = evaluate_model(model, pairs, crop)
    if out_path is not None:
        write_report(reports, out_path)
    return reports, aggregate(reports)


# ---------------------------------------------------------------------------
# ablations


@dataclass
class AblationRow:
    label: str
    parameters: int
    metrics: dict[str, MetricReport]
    final_loss: float
    map_reads: int = 0


def _run_variant(config: TrainConfig, run_dir: Path, label: str, pairs, test_sets) -> AblationRow:
    run, model = train(config, run_dir, pairs)
    metrics = {name: aggregate(evaluate_model(model, ev, config.crop)) for name, ev in test_sets.items()}
    final = float(np.mean(run.losses[-min(50, len(run.losses)):]))
    return AblationRow(label, run.parameters, metrics, final, model.map_reads)


def _load_sets(test_manifests: Mapping[str, str], scale: int) -> dict[str, list[PairedSample]]:
    if not test_manifests:
        raise ValueError("at least one test manifest is required")
    return {name: load_pairs(path, scale) for name, path in test_manifests.items()}


def ablate_blocks(config: TrainConfig, depths: Sequence[int], run_dir: str | Path,
                  test_manifests: Mapping[str, str]) -> list[AblationRow]:
    """One run per IGM block count with a shared seed and corpus."""
    if not depths:
        raise ValueError("depths must be non-empty")
    run_dir = Path(run_dir)
    pairs = load_pairs(config.manifest, config.model.scale)
    test_sets = _load_sets(test_manifests, config.model.scale)
    rows = []
    for d in depths:
        cfg = replace(config, model=replace(config.model, depth=int(d)))
        rows.append(_run_variant(cfg, run_dir / f"depth_{d}", str(d), pairs, test_sets))
    write_table(rows, run_dir / "ablate_blocks.txt", "# Blocks")
    return rows


def ablate_illumination(config: TrainConfig, run_dir: str | Path, test_manifests: Mapping[str, str]) -> list[AblationRow]:
    """Matched runs with and without the illumination stream."""
    run_dir = Path(run_dir)
    pairs = load_pairs(config.manifest, config.model.scale)
    test_sets = _load_sets(test_manifests, config.model.scale)
    rows = []
    for on in (True, False):
        cfg = replace(config, model=replace(config.model, use_illumination_stream=on))
        label = "w Illumination Stream" if on else "w/o Illumination Stream"
        rows.append(_run_variant(cfg, run_dir / ("illum_on" if on else "illum_off"), label, pairs, test_sets))
    write_table(rows, run_dir / "ablate_illum.txt", "Variant", with_mse=True)
    return rows


def format_table(rows: Sequence[AblationRow], key: str, with_mse: bool = False) -> str:
    sets = list(rows[0].metrics)
    cols = ["PSNR (dB)", "SSIM"] + (["MSE"] if with_mse else [])
    header = [key, "Params"] + [f"{s} {c}" for s in sets for c in cols] + ["final L1"]
    out = [" | ".join(header)]
    for r in rows:
        cells = [r.label, str(r.parameters)]
        for s in sets:
            m = r.metrics[s]
            cells += [f"{m.psnr:.4f}", f"{m.ssim:.4f}"] + ([f"{m.mse:.4f}"] if with_mse else [])
        cells.append(f"{r.final_loss:.5f}")
        out.append(" | ".join(cells))
    return "\n".join(out) + "\n"


def write_table(rows: Sequence[AblationRow], path: Path, key: str, with_mse: bool = False) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_table(rows, key, with_mse))
    payload = [
        {"label": r.label, "parameters": r.parameters, "final_loss": r.final_loss, "map_reads": r.map_reads,
         "metrics": {k: asdict(v) for k, v in r.metrics.items()}}
        for r in rows
    ]
    path.with_suffix(".json").write_text(json.dumps(payload, indent=2))
