"""Model assembly, joint training, and window scoring."""
from __future__ import annotations

import json
import logging
import os
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import __version__
from .augment import build_neighbor_index, make_pairs
from .dataio import SplitSpec, TimeSeriesDataset, WindowBatch, slide_windows, split, zscore_normalize, zscore_stats
from .diffnet import (
    EncoderOutput,
    GraphEncoder,
    ManifoldHead,
    NonFiniteError,
    TemporalEncoder,
    backprop,
    load_checkpoint,
    save_checkpoint,
)
from .flow import FlowBlockStack, FlowResult, item_log_prob, mle_objective
from .losses import KernelConfig, MMLConfig, batch_mml
from .metrics import EvalReport

log = logging.getLogger(__name__)

MANIFEST_FORMAT = 1
SCORE_CHUNK = 256
FLOW_INPUTS = ("window", "causal", "head", "gnn")


class TrainingDiverged(NonFiniteError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    learning_rate: float = 0.01
    seed: int = 15
    window_size: int = 60
    stride: int = 10
    k: int = 10
    epsilon: float | None = None
    n_blocks: int = 1
    hidden_size: int = 32
    head_dim: int = 16
    interp_alpha: str | float = "uniform"
    mml: MMLConfig = field(default_factory=MMLConfig)
    flow_input: str = "window"
    train_split: float = 0.6
    val_split: float = 0.2
    dtype: str = "float32"
    nu: float | None = None  # recorded only

    def __post_init__(self):
        if isinstance(self.mml, dict):
            mml = dict(self.mml)
            mml["kernel"] = KernelConfig(**mml.get("kernel", {}))
            self.mml = MMLConfig(**mml)
        errors = []
        if self.epochs < 1:
            errors.append("epochs must be >= 1")
        if self.batch_size < 2:
            errors.append("batch_size must be >= 2")
        if self.learning_rate <= 0:
            errors.append("learning_rate must be > 0")
        if self.window_size < 1 or self.stride < 1:
            errors.append("window_size and stride must be >= 1")
        if self.k < 1:
            errors.append("k must be >= 1")
        if self.n_blocks < 1:
            errors.append("n_blocks must be >= 1")
        if self.flow_input not in FLOW_INPUTS:
            errors.append(f"flow_input must be one of {', '.join(FLOW_INPUTS)}")
        if self.dtype not in ("float32", "float64"):
            errors.append("dtype must be float32 or float64")
        if errors:
            raise ValueError("; ".join(errors))

    @property
    def split_spec(self) -> SplitSpec:
        return SplitSpec(self.train_split, self.val_split)

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32


class DMTFDModel(nn.Module):
    """GRU -> attention graph -> manifold head -> conditional flow."""

    def __init__(self, n_entities: int, window_size: int, hidden: int = 32, head_dim: int = 16,
                 n_blocks: int = 1, flow_input: str = "window"):
        super().__init__()
        self.n_entities = n_entities
        self.window_size = window_size
        self.flow_input = flow_input
        self.temporal = TemporalEncoder(hidden)
        self.graph = GraphEncoder(hidden)
        self.head = ManifoldHead(hidden, head_dim)
        if flow_input == "window":
            # density of each entity's raw window, conditioned on its head features
            flow_dim, cond_dim = window_size, head_dim
        elif flow_input == "causal":
            # density of each reading, conditioned on head features of the steps before it
            flow_dim, cond_dim = 1, head_dim
        else:
            flow_dim, cond_dim = (head_dim if flow_input == "head" else hidden), hidden
        self.flow = FlowBlockStack(flow_dim, cond_dim=cond_dim, n_blocks=n_blocks, hidden=hidden)

    def dims(self) -> dict:
        return {
            "n_entities": self.n_entities,
            "window_size": self.window_size,
            "hidden": self.temporal.hidden,
            "head_dim": self.head.fc2.out_features,
            "n_blocks": self.flow.n_blocks,
            "flow_input": self.flow_input,
        }

    def encode(self, windows: torch.Tensor, steps: bool = True) -> EncoderOutput:
        """Window features; ``steps=False`` skips the per-step features of causal mode."""
        if self.flow_input == "causal" and steps:
            return self._encode_steps(windows)
        g = self.temporal(windows)
        y = self.graph(g)
        return EncoderOutput(temporal=g, spatial=y, head=self.head(y))

    def _encode_steps(self, windows: torch.Tensor) -> EncoderOutput:
        seq = self.temporal.sequence(windows)
        # state before step 0 is the GRU's zero initial state
        g = torch.cat([torch.zeros_like(seq[:, :, :1]), seq], dim=2)  # (B, K, T+1, h)
        y = self.graph(g.transpose(1, 2)).transpose(1, 2)
        z = self.head(y)
        return EncoderOutput(temporal=g[:, :, -1], spatial=y[:, :, -1], head=z[:, :, -1], steps=z[:, :, :-1])

    def flow_terms(self, windows: torch.Tensor, enc: EncoderOutput) -> FlowResult:
        if self.flow_input == "window":
            return self.flow(windows, enc.head)
        if self.flow_input == "causal":
            res = self.flow(windows.unsqueeze(-1), enc.steps)
            # one item per (window, entity): readings become the T coordinates
            return FlowResult(res.z_hat.squeeze(-1), res.log_det.sum(dim=-1))
        x = enc.head if self.flow_input == "head" else enc.spatial
        return self.flow(x, enc.temporal)

    def log_density(self, windows: torch.Tensor) -> torch.Tensor:
        """Entity-averaged log density per window."""
        res = self.flow_terms(windows, self.encode(windows))
        return item_log_prob(res, self.flow.mu).mean(dim=-1)


def version_string() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _threads() -> int:
    return max(1, int(os.environ.get("DMTFD_THREADS", "1")))


def build_model(n_entities: int, cfg: TrainConfig) -> DMTFDModel:
    torch.manual_seed(cfg.seed)
    model = DMTFDModel(n_entities, cfg.window_size, cfg.hidden_size, cfg.head_dim, cfg.n_blocks, cfg.flow_input)
    return model.to(cfg.torch_dtype)


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def train(dataset: TimeSeriesDataset | WindowBatch, cfg: TrainConfig, n_entities: int | None = None):
    """Fit the full model on (already normalized) training data.

    Returns ``(model, manifest)``.  With one intra-op thread the run is
    bitwise reproducible for a fixed seed.
    """
    torch.set_num_threads(_threads())
    torch.use_deterministic_algorithms(True)
    batch = dataset if isinstance(dataset, WindowBatch) else slide_windows(dataset, cfg.window_size, cfg.stride)
    n = len(batch)
    if n < 1:
        raise ValueError("training data yields no windows")
    k_ent = batch.windows.shape[1] if n_entities is None else n_entities
    model = build_model(k_ent, cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    windows = torch.as_tensor(batch.windows, dtype=cfg.torch_dtype)
    use_mml = cfg.mml.active
    index = build_neighbor_index(batch.windows, cfg.k, cfg.epsilon) if use_mml else None
    rng = np.random.default_rng(cfg.seed)

    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        pair_seed = _epoch_seed(cfg.seed, epoch)
        sums = np.zeros(3)
        n_steps = 0
        for lo in range(0, n, cfg.batch_size):
            ids = order[lo : lo + cfg.batch_size]
            x = windows[ids]
            enc = model.encode(x)
            res = model.flow_terms(x, enc)
            mle = mle_objective(res, model.flow.mu)
            if use_mml and len(ids) > 1:
                pairs = make_pairs(batch.windows, index, cfg.interp_alpha, pair_seed, anchor_ids=ids)
                # views only enter the manifold loss, so only their window-level features are needed
                view_enc = model.encode(torch.as_tensor(pairs.views, dtype=cfg.torch_dtype), steps=False)
                mml = batch_mml(torch.cat([enc.spatial, view_enc.spatial]), torch.cat([enc.head, view_enc.head]),
                                cfg.mml)
            else:
                mml = torch.zeros((), dtype=mle.dtype)
            loss = mle + mml
            opt.zero_grad(set_to_none=False)
            try:
                backprop(loss, [
                    ("windows", x), ("temporal", enc.temporal), ("spatial", enc.spatial), ("head", enc.head),
                    ("z_hat", res.z_hat), ("log_det", res.log_det), ("mle", mle), ("mml", mml),
                ])
            except NonFiniteError as exc:
                raise TrainingDiverged(
                    f"step {step} (epoch {epoch}): mle={mle.item()!r} mml={mml.item()!r}: {exc}"
                ) from exc
            opt.step()
            sums += (loss.item(), mle.item(), mml.item())
            n_steps += 1
            step += 1
        mean = sums / n_steps
        history.append({"epoch": epoch, "loss": mean[0], "mle": mean[1], "mml": mean[2]})
        if epoch % 20 == 0 or epoch == cfg.epochs - 1:
            log.info("epoch %d loss %.4f (mle %.4f, mml %.4f)", epoch, *mean)

    manifest = {
        "format": MANIFEST_FORMAT,
        "version": version_string(),
        "config": config_dict(cfg),
        "n_train_windows": n,
        "n_epochs": cfg.epochs,
        "steps_per_epoch": -(-n // cfg.batch_size),
        "n_steps": step,
        "epoch_losses": history,
        "final_loss": history[-1]["loss"],
    }
    model.eval()
    return model, manifest


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def _score_chunk(model, chunk):
    with torch.no_grad():
        return (-model.log_density(chunk)).cpu().numpy().astype(np.float64)


def score_windows(model: DMTFDModel, batch, workers: int = 1) -> np.ndarray:
    """Negative entity-mean log density per window; higher is more anomalous.

    Windows are processed in fixed-size chunks, so the parallel path
    computes exactly the same arithmetic as the serial one.
    """
    data = getattr(batch, "windows", batch)
    dtype = next(model.parameters()).dtype
    data = torch.as_tensor(np.asarray(data), dtype=dtype)
    if len(data) == 0:
        return np.zeros(0)
    chunks = [data[i : i + SCORE_CHUNK] for i in range(0, len(data), SCORE_CHUNK)]
    was_training = model.training
    model.eval()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda c: _score_chunk(model, c), chunks))
    else:
        parts = [_score_chunk(model, c) for c in chunks]
    model.train(was_training)
    return np.concatenate(parts)


@dataclass
class PipelineResult:
    model: DMTFDModel
    manifest: dict
    report: EvalReport | None
    stats: tuple
    test_windows: WindowBatch


def prepare(ds: TimeSeriesDataset, cfg: TrainConfig):
    """Split chronologically and z-score every part with training statistics."""
    train_ds, val_ds, test_ds = split(ds, cfg.split_spec)
    stats = zscore_stats(train_ds)
    return [zscore_normalize(p, stats) if p.length else p for p in (train_ds, val_ds, test_ds)], stats


def run_pipeline(ds: TimeSeriesDataset, cfg: TrainConfig, workers: int = 1) -> PipelineResult:
    (train_ds, val_ds, test_ds), stats = prepare(ds, cfg)
    model, manifest = train(train_ds, cfg)
    test = slide_windows(test_ds, cfg.window_size, cfg.stride)
    scores = score_windows(model, test, workers)
    if val_ds.length >= cfg.window_size:
        val_scores = score_windows(model, slide_windows(val_ds, cfg.window_size, cfg.stride), workers)
        manifest["val_mean_score"] = float(val_scores.mean())
    report = None
    if 0 < test.window_labels.sum() < len(test):
        report = EvalReport.from_scores(scores, test.window_labels, test.window_starts)
        manifest["test_metrics"] = report.metrics()
    return PipelineResult(model, manifest, report, stats, test)


def save_model(model: DMTFDModel, cfg: TrainConfig, stats, directory, manifest: dict | None = None,
               extra_meta: dict | None = None) -> None:
    meta = {
        **(extra_meta or {}),
        "dims": model.dims(),
        "config": config_dict(cfg),
        "zscore_mean": [repr(float(v)) for v in stats[0]],
        "zscore_std": [repr(float(v)) for v in stats[1]],
    }
    save_checkpoint(model.state_dict(), directory, meta)
    if manifest is not None:
        Path(directory, "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_model(directory):
    """Returns ``(model, cfg, stats, meta)``."""
    state, meta = load_checkpoint(directory)
    cfg = TrainConfig(**meta["config"])
    d = meta["dims"]
    model = DMTFDModel(d["n_entities"], d["window_size"], d["hidden"], d["head_dim"], d["n_blocks"], d["flow_input"])
    model = model.to(cfg.torch_dtype)
    model.load_state_dict(state)
    model.eval()
    stats = (np.array([float(v) for v in meta["zscore_mean"]]), np.array([float(v) for v in meta["zscore_std"]]))
    return model, cfg, stats, meta
