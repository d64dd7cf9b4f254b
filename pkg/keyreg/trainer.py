"""Unsupervised multi-view descriptor training with FastAP."""

import csv
import logging
import math
import time
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .augment import MultiViewBatch, TrainConfig, build_batch
from .checkpoint_manager import CheckpointManager
from .descriptor import NetworkParams, image_to_tensor, sample_descriptors_tensor
from .errors import ConfigError, DivergedLoss, NoNegatives, NoPositives
from .fastap import fastap_loss_tensor
from .imagecore import Image, RoiMask, resize_image, resize_mask
from .utils import format_duration

CHECKPOINT_NAME = "checkpoint_latest.ukdc"
LOG_NAME = "train_log.csv"


def prepare_dataset(dataset: Sequence[Tuple[Image, RoiMask]], size: int) -> List[Tuple[Image, RoiMask]]:
    """Resize every (image, RoI) pair to size x size; gray images become 3-channel."""
    prepared = []
    for img, roi in dataset:
        if img.ndim == 2:
            img = np.repeat(img[..., None], 3, axis=2)
        if img.shape[:2] != (size, size):
            img = resize_image(img, (size, size))
            roi = resize_mask(roi, (size, size))
        prepared.append((img.astype(np.float32, copy=False), np.asarray(roi, dtype=bool)))
    return prepared


class DescriptorTrainer:
    """Trains a descriptor network on multi-view batches.

    One step is one original image plus ``cfg.views`` augmentations: the
    network describes all of them, descriptors are sampled at the anchors and
    at their visible mapped positions, and the pooled set is scored with
    FastAP (same anchor identity across views = positive).
    """

    def __init__(
        self,
        cfg: TrainConfig,
        out_dir: Optional[Path] = None,
        checkpoint_manager: Optional[CheckpointManager] = None,
        logger: Optional[logging.Logger] = None,
    ):
        """Initialize the trainer.

        Args:
            cfg: Training configuration
            out_dir: Directory for the loss log and per-epoch checkpoints
            checkpoint_manager: Optional checkpoint manager instance
            logger: Optional logger instance
        """
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.logger = logger or logging.getLogger(__name__)
        self.checkpoints = checkpoint_manager or CheckpointManager(self.logger)
        self.epoch_losses: List[float] = []
        self.last_good_state: Optional[Dict[str, torch.Tensor]] = None

        # Callbacks
        self.on_epoch_complete: Optional[Callable[[int, float], None]] = None
        self.on_step: Optional[Callable[[int, int, float], None]] = None

    def batch_loss(self, params: NetworkParams, batch: MultiViewBatch) -> torch.Tensor:
        """Pooled FastAP loss of one multi-view batch."""
        net = params.net
        images = torch.cat([image_to_tensor(img, net.in_channels) for img in batch.images], dim=0)
        dmaps = net(images)
        points, labels = batch.pooled_points()
        descs = [
            sample_descriptors_tensor(dmaps[i], torch.from_numpy(pts))
            for i, pts in enumerate(points) if len(pts)
        ]
        pooled = torch.cat(descs, dim=0)
        return fastap_loss_tensor(pooled, torch.from_numpy(labels), self.cfg.fastap_bins, check_norm=False)

    def train(
        self,
        dataset: Sequence[Tuple[Image, RoiMask]],
        params: Optional[NetworkParams] = None,
    ) -> NetworkParams:
        """Run the full training loop.

        Args:
            dataset: (image, RoI mask) pairs; resized to ``cfg.image_size``
            params: Optional network to continue from; a fresh one is seeded otherwise

        Returns:
            Trained network

        Raises:
            DivergedLoss: loss became NaN/Inf; carries the last good state
        """
        if not dataset:
            raise ConfigError("Training needs at least one image")
        cfg = self.cfg
        torch.manual_seed(cfg.seed)
        rng = np.random.default_rng(cfg.seed)
        data = prepare_dataset(dataset, cfg.image_size)

        if params is None:
            params = NetworkParams.create(cfg.widths, cfg.descriptor_dim, 3, seed=cfg.seed)
        params.metadata["train_config_hash"] = cfg.config_hash()
        params.metadata["train_config"] = cfg.to_dict()
        net = params.net
        net.train()
        optimizer = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)
        self.last_good_state = params.state_dict()

        started = time.time()
        log_rows = []
        start_epoch = int(params.metadata.get("epochs", 0))
        self.logger.info(
            f"Training {cfg.epochs} epochs on {len(data)} images "
            f"(views={cfg.views}, K={cfg.keypoints_per_image}, D={cfg.descriptor_dim}, lr={cfg.learning_rate})"
        )
        for epoch in range(cfg.epochs):
            losses = []
            for step, idx in enumerate(rng.permutation(len(data))):
                img, roi = data[idx]
                batch = build_batch(img, roi, cfg, rng)
                optimizer.zero_grad()
                try:
                    loss = self.batch_loss(params, batch)
                except (NoPositives, NoNegatives) as e:
                    self.logger.warning(f"Skipping step {step} of epoch {epoch}: {e}")
                    continue
                value = float(loss.detach())
                if not math.isfinite(value):
                    net.load_state_dict(self.last_good_state)
                    raise DivergedLoss(
                        f"Loss became {value} at epoch {epoch}, step {step}",
                        last_good_state=self.last_good_state,
                        epoch=epoch,
                    )
                loss.backward()
                optimizer.step()
                losses.append(value)
                log_rows.append((start_epoch + epoch, step, value))
                if self.on_step:
                    self.on_step(epoch, step, value)

            mean_loss = float(np.mean(losses)) if losses else float("nan")
            self.epoch_losses.append(mean_loss)
            self.last_good_state = params.state_dict()
            params.metadata["epochs"] = start_epoch + epoch + 1
            self.logger.info(f"Epoch {epoch + 1}/{cfg.epochs}: mean loss {mean_loss:.4f}")
            if self.out_dir is not None:
                self._write_log(log_rows)
                self.checkpoints.save(self.out_dir / CHECKPOINT_NAME, params)
            if self.on_epoch_complete:
                self.on_epoch_complete(epoch, mean_loss)

        net.eval()
        self.logger.info(f"Training finished in {format_duration(time.time() - started)}")
        return params

    def _write_log(self, rows) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        with open(self.out_dir / LOG_NAME, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "step", "loss"])
            for epoch, step, loss in rows:
                writer.writerow([epoch, step, repr(loss)])


def train(dataset: Sequence[Tuple[Image, RoiMask]], cfg: TrainConfig, out_dir: Optional[Path] = None) -> NetworkParams:
    """Train a descriptor network with default trainer settings."""
    return DescriptorTrainer(cfg, out_dir).train(dataset)
