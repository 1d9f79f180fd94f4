# dccrn_kws/trainer.py
"""Training loop: on-the-fly batches, the multi-task loss and Noam-scheduled Adam.

The batch drawn at iteration ``i`` depends only on ``(seed, i)``, so prefetch
workers never change what the model sees.
"""
import logging
import math
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np
import pandas as pd
import torch
import torch.nn as nn

from dccrn_kws.checkpoint import load_checkpoint, restore_model, restore_optimizer, save_model
from dccrn_kws.config import Architecture, BiasMode, RunConfig
from dccrn_kws.context_bias import BiasList, load_bias_audio, make_bias_list
from dccrn_kws.errors import CheckpointError, SimulationError, TrainingDivergedError
from dccrn_kws.losses import frame_accuracy, noam_lr, total_loss
from dccrn_kws.model import require_training_graph
from dccrn_kws.simulate import IGNORE, ManifestEntry, SimulatedUtterance, Simulator, UtteranceType

logger = logging.getLogger(__name__)

MAX_DRAW_ATTEMPTS = 16


@dataclass
class Batch:
    noisy: torch.Tensor
    target: torch.Tensor
    labels: torch.Tensor
    lengths: List[int]
    ids: List[str]
    speakers: List[Optional[str]]

    @property
    def n_positive(self) -> int:
        return int(sum(1 for row in self.labels if bool((row == 1).any())))


def collate(items: Sequence[SimulatedUtterance]) -> Batch:
    """Zero-pad waveforms and pad labels with ignore."""
    n = max(len(u.pair.noisy) for u in items)
    t = max(len(u.labels) for u in items)
    noisy = np.zeros((len(items), n), dtype=np.float32)
    target = np.zeros((len(items), n), dtype=np.float32)
    labels = np.full((len(items), t), IGNORE, dtype=np.int64)
    for i, u in enumerate(items):
        m = len(u.pair.noisy)
        noisy[i, :m] = u.pair.noisy.samples
        target[i, :m] = u.pair.target.samples
        labels[i, : len(u.labels)] = u.labels.labels
    return Batch(
        noisy=torch.from_numpy(noisy),
        target=torch.from_numpy(target),
        labels=torch.from_numpy(labels),
        lengths=[len(u.pair.noisy) for u in items],
        ids=[u.pair.meta.utterance_id for u in items],
        speakers=[u.pair.meta.speaker for u in items],
    )


class BatchSource:
    """Draws ``batch_positive`` keyword and ``batch_negative`` non-keyword mixtures per iteration."""

    def __init__(self, simulator: Simulator, run_cfg: RunConfig):
        self.simulator = simulator
        self.cfg = run_cfg.train
        self.seed = run_cfg.train.seed
        if self.cfg.batch_positive and not simulator.keywords:
            raise SimulationError("training manifest has no keyword entries")
        if self.cfg.batch_negative and not simulator.negatives:
            raise SimulationError("training manifest has no negative entries")

    def _draw(self, pool: Sequence[ManifestEntry], iteration: int, slot: int) -> SimulatedUtterance:
        for attempt in range(MAX_DRAW_ATTEMPTS):
            rng = np.random.default_rng([self.seed, iteration, slot, attempt])
            entry = pool[int(rng.integers(len(pool)))]
            utt = self.simulator.generate(
                entry, [iteration, slot, attempt], max_seconds=self.cfg.max_utterance_s
            )
            if utt is not None:
                return utt
        raise SimulationError(f"iteration {iteration} slot {slot}: no usable utterance after {MAX_DRAW_ATTEMPTS} draws")

    def batch(self, iteration: int) -> Batch:
        items = [self._draw(self.simulator.keywords, iteration, s) for s in range(self.cfg.batch_positive)]
        items += [
            self._draw(self.simulator.negatives, iteration, self.cfg.batch_positive + s)
            for s in range(self.cfg.batch_negative)
        ]
        return collate(items)


class Prefetcher:
    """Builds upcoming batches on worker threads; results are keyed by iteration."""

    def __init__(self, source: BatchSource, workers: int, depth: int):
        self.source = source
        self.depth = depth
        self.pool = ThreadPoolExecutor(max_workers=workers) if workers > 0 else None
        self.pending: Dict[int, Future] = {}

    def get(self, iteration: int, last: int) -> Batch:
        if self.pool is None:
            return self.source.batch(iteration)
        for it in range(iteration, min(last, iteration + self.depth) + 1):
            if it not in self.pending:
                self.pending[it] = self.pool.submit(self.source.batch, it)
        return self.pending.pop(iteration).result()

    def close(self) -> None:
        if self.pool is not None:
            self.pool.shutdown(wait=False, cancel_futures=True)


def prepare_bias(model: nn.Module, run_cfg: RunConfig, entries: Sequence[ManifestEntry]) -> Optional[BiasList]:
    """Attach clean keyword clips and the bias list to the model's context bias."""
    bias = getattr(model, "context_bias", None)
    if bias is None:
        return None
    mode = run_cfg.model.bias_mode
    if mode == BiasMode.LEARNABLE:
        bias_list = BiasList(mode=mode, seed=run_cfg.train.seed)
        bias.attach(bias_list, {})
        return bias_list
    if run_cfg.paths.bias_list is not None:
        bias_list = BiasList.load(run_cfg.paths.bias_list)
    else:
        speaker = None
        if mode == BiasMode.SPEAKER:
            speaker = sorted({e.speaker for e in entries if e.type == UtteranceType.KEYWORD and e.speaker})[0]
        bias_list = make_bias_list(entries, mode, run_cfg.train.seed, run_cfg.model.bias_list_size, speaker)
    keyword_entries = [e for e in entries if e.type == UtteranceType.KEYWORD]
    audio = load_bias_audio(keyword_entries, run_cfg.spectro.sample_rate)
    bias.attach(bias_list, audio, {e.id: e.speaker for e in keyword_entries})
    logger.info(f"Bias list: mode={mode.value}, {len(bias_list.entries)} entries, pool of {len(audio)} clips")
    return bias_list


class Trainer:
    def __init__(self, run_cfg: RunConfig, model: nn.Module, entries: Sequence[ManifestEntry]):
        require_training_graph(model)
        self.run_cfg = run_cfg
        self.cfg = run_cfg.train
        self.model = model
        self.enhance = run_cfg.model.architecture == Architecture.DCCRN_KWS
        self.simulator = Simulator(entries, run_cfg.simulation, run_cfg.spectro, seed=self.cfg.seed)
        self.source = BatchSource(self.simulator, run_cfg)
        self.bias_list = prepare_bias(model, run_cfg, entries)
        self.optimizer = torch.optim.Adam(
            model.parameters(),
            lr=noam_lr(1, self.cfg),
            betas=(self.cfg.adam_beta1, self.cfg.adam_beta2),
            eps=self.cfg.adam_eps,
        )
        self.iteration = 0
        self.history: List[Dict[str, float]] = []

    def resume(self, path: Path) -> None:
        ckpt = load_checkpoint(path)
        restore_model(self.model, ckpt, expected_hash=self.run_cfg.config_hash())
        restore_optimizer(self.optimizer, self.model, ckpt)
        self.iteration = ckpt.iteration
        logger.info(f"🔄 Resumed from {path} at iteration {self.iteration}")

    def step(self, iteration: int, batch: Batch) -> Dict[str, float]:
        lr = noam_lr(iteration, self.cfg)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.model.train()
        out = self.model(batch.noisy, speakers=batch.speakers, iteration=iteration, enhance=self.enhance)
        loss, parts = total_loss(
            out.posteriors, batch.labels,
            out.enhanced, batch.target if self.enhance else None, batch.lengths,
        )
        if not torch.isfinite(loss):
            raise TrainingDivergedError(
                f"non-finite loss at iteration {iteration} (lr={lr:.3e}, parts={parts}, batch={batch.ids})"
            )
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if self.cfg.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.grad_clip)
        self.optimizer.step()
        record = {
            "iteration": iteration,
            "lr": lr,
            "loss": float(loss.detach()),
            "accuracy": frame_accuracy(out.posteriors.detach(), batch.labels),
            **parts,
        }
        self.history.append(record)
        return record

    def checkpoint_path(self, iteration: int) -> Path:
        return self.run_cfg.paths.output_dir / f"ckpt_{iteration:06d}.ckpt"

    def save(self, iteration: int) -> Path:
        bias = getattr(self.model, "context_bias", None)
        if bias is not None:
            bias.refresh_cache()
        path = save_model(
            self.checkpoint_path(iteration), self.model, self.run_cfg.config_hash(), iteration,
            config=self.run_cfg.flat(), optimizer=self.optimizer,
            meta={
                "sample_rate": self.run_cfg.spectro.sample_rate,
                "mask": "complex-unbounded",
                "norm": "batchnorm-per-part",
                "activation": "leaky_relu",
                "bias_list": self.bias_list.model_dump(mode="json") if self.bias_list else None,
            },
        )
        latest = self.run_cfg.paths.output_dir / "latest.ckpt"
        latest.write_bytes(path.read_bytes())
        return path

    def run(self) -> Iterator[Path]:
        """Train to ``iterations``; yields each checkpoint as it is written."""
        total = self.cfg.iterations
        if self.iteration >= total:
            raise CheckpointError(f"checkpoint already at iteration {self.iteration} >= {total}")
        self.run_cfg.paths.output_dir.mkdir(parents=True, exist_ok=True)
        prefetcher = Prefetcher(self.source, self.cfg.data_workers, self.cfg.prefetch)
        logger.info(f"🚀 Training from iteration {self.iteration + 1} to {total}")
        try:
            for it in range(self.iteration + 1, total + 1):
                record = self.step(it, prefetcher.get(it, total))
                self.iteration = it
                if it % self.cfg.log_every == 0 or it == 1:
                    recent = pd.DataFrame(self.history[-self.cfg.log_every:])
                    logger.info(
                        f"iter {it}/{total} lr={record['lr']:.2e} loss={recent['loss'].mean():.4f} "
                        f"bce={recent['bce'].mean():.4f} acc={recent['accuracy'].mean():.4f}"
                    )
                if it % self.cfg.checkpoint_every == 0 or it == total:
                    yield self.save(it)
        finally:
            prefetcher.close()
            self.write_history()
        logger.info(f"✅ Training finished at iteration {self.iteration}")

    def write_history(self) -> Optional[Path]:
        if not self.history:
            return None
        path = self.run_cfg.paths.output_dir / "train_log.tsv"
        frame = pd.DataFrame(self.history)
        if path.exists():
            frame = pd.concat([pd.read_csv(path, sep="\t"), frame]).drop_duplicates("iteration", keep="last")
        frame.to_csv(path, sep="\t", index=False)
        return path

    def smoothed_accuracy(self, window: int = 50) -> float:
        if not self.history:
            return math.nan
        return float(pd.DataFrame(self.history[-window:])["accuracy"].mean())
