"""
Training, evaluation and experiment protocols.
"""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import settings
from .errors import ContractError, DegenerateVarianceError, MaskError, TrainingDivergedError
from .graph import DatasetBundle, GraphBatch, SplitMasks, batch_graphs, full_batch, perturb_edges
from .models import OscillatorGNN
from .schemas import (
    DepthRow,
    EpochRecord,
    ExperimentConfig,
    MetricsReport,
    RobustnessRow,
    TrainConfig,
    TTestResult,
)
from .tensor import RealTensor, Tape, cross_entropy, mean_squared_error, numerical_gradient, relative_error, take_rows
from .utils.reproducibility import config_digest, make_rng

logger = logging.getLogger(__name__)

T_THRESHOLD = 1.66


# ---------------------------------------------------------------------------
# losses and metrics

def _select(outputs: RealTensor, targets: np.ndarray, mask: Optional[np.ndarray]) -> Tuple[RealTensor, np.ndarray]:
    if mask is None:
        return outputs, targets
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise MaskError("loss requested over an empty mask")
    return take_rows(outputs, idx), targets[idx]


def compute_loss(outputs: RealTensor, targets: np.ndarray, task: str, mask: Optional[np.ndarray] = None) -> RealTensor:
    """Cross entropy for classification, mean squared error for regression."""
    outputs, targets = _select(outputs, np.asarray(targets), mask)
    if task == "graph-reg":
        return mean_squared_error(outputs, targets)
    return cross_entropy(outputs, targets)


def compute_metric(outputs: RealTensor, targets: np.ndarray, task: str, mask: Optional[np.ndarray] = None) -> float:
    """Accuracy in percent (argmax, ties to the lowest class) or mean squared error."""
    outputs, targets = _select(outputs, np.asarray(targets), mask)
    if task == "graph-reg":
        return float(np.mean((outputs.data[:, 0] - targets) ** 2))
    return float(100.0 * np.mean(np.argmax(outputs.data, axis=1) == targets))


# ---------------------------------------------------------------------------
# optimizers

class SGD:
    def __init__(self, params: Sequence[RealTensor], lr: float, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                continue
            p.assign(p.data - self.lr * (p.grad + self.weight_decay * p.data))


class Adam:
    """Adam with decoupled weight decay."""

    def __init__(
        self,
        params: Sequence[RealTensor],
        lr: float,
        weight_decay: float = 0.0,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            update = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.assign(p.data - self.lr * (update + self.weight_decay * p.data))


def make_optimizer(params: Sequence[RealTensor], cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD(params, cfg.lr, cfg.weight_decay)
    return Adam(params, cfg.lr, cfg.weight_decay)


# ---------------------------------------------------------------------------
# training loop

def _layer_norms(model: OscillatorGNN) -> Dict[str, float]:
    return {name: float(np.linalg.norm(p.data)) for name, p in model.params.items()}


def _train_batches(bundle: DatasetBundle, masks: SplitMasks, cfg: TrainConfig, epoch: int) -> List[Tuple[GraphBatch, np.ndarray, Optional[np.ndarray]]]:
    if not bundle.is_graph_level:
        return [(full_batch(bundle), bundle.labels, masks.train)]
    order = make_rng(cfg.seed, "order", epoch).permutation(np.flatnonzero(masks.train))
    batches = []
    for start in range(0, order.shape[0], cfg.batch_size):
        chunk = order[start:start + cfg.batch_size]
        batches.append((batch_graphs(bundle, chunk), bundle.labels[chunk], None))
    return batches


def evaluate(model: OscillatorGNN, bundle: DatasetBundle, mask: np.ndarray) -> Tuple[float, float]:
    """(loss, metric) over the units selected by ``mask`` in evaluation mode."""
    if not mask.any():
        raise MaskError("evaluation mask is empty")
    if bundle.is_graph_level:
        idx = np.flatnonzero(mask)
        out = model(batch_graphs(bundle, idx))
        targets = bundle.labels[idx]
        return compute_loss(out, targets, bundle.task).item(), compute_metric(out, targets, bundle.task)
    out = model(full_batch(bundle))
    return (
        compute_loss(out, bundle.labels, bundle.task, mask).item(),
        compute_metric(out, bundle.labels, bundle.task, mask),
    )


def train(model: OscillatorGNN, bundle: DatasetBundle, masks: SplitMasks, cfg: TrainConfig, digest: str = "") -> MetricsReport:
    """Gradient-based training with early stopping on validation loss.

    The parameters with the lowest validation loss are restored before the
    test evaluation.
    """
    started = time.perf_counter()
    optimizer = make_optimizer(model.parameters(), cfg)
    history: List[EpochRecord] = []
    best_loss, best_epoch, best_state = math.inf, 0, model.state_dict()
    stale = 0
    epochs_run = 0

    for epoch in range(1, cfg.epochs + 1):
        epochs_run = epoch
        losses = []
        for b, (batch, targets, mask) in enumerate(_train_batches(bundle, masks, cfg, epoch)):
            model.zero_grad()
            rng = make_rng(cfg.seed, "dropout", epoch, b)
            with Tape() as tape:
                loss = compute_loss(model(batch, training=True, rng=rng), targets, bundle.task, mask)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingDivergedError(
                        f"loss became {value} at epoch {epoch}", epoch=epoch, layer_norms=_layer_norms(model)
                    )
                tape.backward(loss)
            optimizer.step()
            losses.append(value)

        val_loss, val_metric = evaluate(model, bundle, masks.val)
        if not math.isfinite(val_loss):
            raise TrainingDivergedError(f"validation loss became {val_loss} at epoch {epoch}", epoch=epoch, layer_norms=_layer_norms(model))
        history.append(EpochRecord(epoch=epoch, train_loss=float(np.mean(losses)), val_loss=val_loss, val_metric=val_metric))
        if epoch % cfg.log_every == 0:
            logger.info("epoch %d train_loss=%.4f val_loss=%.4f val_metric=%.2f", epoch, history[-1].train_loss, val_loss, val_metric)

        if val_loss < best_loss:
            best_loss, best_epoch, best_state = val_loss, epoch, model.state_dict()
            stale = 0
        else:
            stale += 1
            if cfg.patience is not None and stale >= cfg.patience:
                logger.info("Early stop at epoch %d; best epoch %d (val_loss=%.4f)", epoch, best_epoch, best_loss)
                break

    model.load_state_dict(best_state)
    val_loss, val_metric = evaluate(model, bundle, masks.val)
    _, test_metric = evaluate(model, bundle, masks.test)
    return MetricsReport(
        task=bundle.task,
        family=model.cfg.family,
        coupling=model.cfg.coupling.kind,
        seed=cfg.seed,
        epochs_run=epochs_run,
        best_epoch=best_epoch,
        test_metric=test_metric,
        val_metric=val_metric,
        val_loss=val_loss,
        history=history,
        config_digest=digest,
        wall_time=time.perf_counter() - started,
    )


# ---------------------------------------------------------------------------
# gradient verification

def gradient_check(
    model: OscillatorGNN,
    batch: GraphBatch,
    targets: np.ndarray,
    task: str,
    mask: Optional[np.ndarray] = None,
    h: float = 1e-5,
) -> Dict[str, float]:
    """Relative error between tape gradients and central differences, per parameter.

    The Newton tolerance is tightened for the duration of the check so the
    finite differences see a smooth magnitude solve.
    """
    saved_cfg = model.cfg
    model.cfg = saved_cfg.model_copy(update={"newton_tol": 1e-12, "newton_max_iter": max(saved_cfg.newton_max_iter, 100)})
    try:
        model.zero_grad()
        with Tape() as tape:
            loss = compute_loss(model(batch), targets, task, mask)
            tape.backward(loss)
        analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros(p.shape)) for name, p in model.params.items()}

        def objective() -> RealTensor:
            return compute_loss(model(batch), targets, task, mask)

        errors = {}
        for name, p in model.params.items():
            numeric = numerical_gradient(objective, p, h)
            errors[name] = relative_error(analytic[name], numeric)
        return errors
    finally:
        model.cfg = saved_cfg
        model.zero_grad()


# ---------------------------------------------------------------------------
# statistics

def t_score(mu1: float, sigma1: float, mu2: float, sigma2: float, n: int) -> TTestResult:
    """Welch-style score (mu1 - mu2) / sqrt(s1^2/n + s2^2/n) for a one-tailed comparison."""
    if n < 2:
        raise ContractError(f"t-score needs n >= 2, got {n}", n=n)
    if sigma1 < 0 or sigma2 < 0:
        raise ContractError("standard deviations must be nonnegative", sigma1=sigma1, sigma2=sigma2)
    pooled = sigma1 ** 2 / n + sigma2 ** 2 / n
    if pooled == 0:
        raise DegenerateVarianceError("both standard deviations are zero")
    score = (mu1 - mu2) / math.sqrt(pooled)
    return TTestResult(t_score=score, threshold=T_THRESHOLD, significant=score > T_THRESHOLD)


# ---------------------------------------------------------------------------
# experiment protocols

def build_model(exp: ExperimentConfig, bundle: DatasetBundle, seed: Optional[int] = None) -> OscillatorGNN:
    out_dim = bundle.num_classes if bundle.is_classification else 1
    return OscillatorGNN(exp.model_config_record(), bundle.features.cols, out_dim, seed=exp.seed if seed is None else seed)


def run_experiment(exp: ExperimentConfig, bundle: DatasetBundle, masks: SplitMasks) -> Tuple[OscillatorGNN, MetricsReport]:
    model = build_model(exp, bundle)
    report = train(model, bundle, masks, exp.train_config_record(), digest=config_digest(exp.model_dump()))
    return model, report


def depth_sweep(exp: ExperimentConfig, bundle: DatasetBundle, masks: SplitMasks, depths: Sequence[int]) -> List[DepthRow]:
    """One training run per depth with an otherwise identical configuration."""
    if not depths:
        raise ContractError("depth sweep needs at least one depth")
    rows = []
    for depth in depths:
        _, report = run_experiment(exp.model_copy(update={"layers": int(depth)}), bundle, masks)
        logger.info("depth %d: test_metric=%.2f", depth, report.test_metric)
        rows.append(DepthRow(depth=int(depth), test_metric=report.test_metric, val_metric=report.val_metric, epochs_run=report.epochs_run))
    return rows


def _robustness_trial(args) -> float:
    exp_payload, bundle, masks, level, trial_seed = args
    exp = ExperimentConfig(**exp_payload).model_copy(update={"seed": trial_seed})
    graph = perturb_edges(bundle.graph, level, seed=trial_seed)
    _, report = run_experiment(exp, bundle.with_graph(graph), masks)
    return report.test_metric


def robustness_sweep(
    exp: ExperimentConfig,
    bundle: DatasetBundle,
    masks: SplitMasks,
    edge_counts: Sequence[int],
    trials: int,
    seed: int,
    jobs: int = settings.jobs,
) -> List[RobustnessRow]:
    """Test metric under random fake edges, summarised per perturbation level.

    Trial ``t`` uses seed ``seed + t`` for both the perturbation and the model,
    so level 0 repeats the unperturbed runs exactly.
    """
    if trials < 1:
        raise ContractError("robustness sweep needs at least one trial")
    tasks = [(exp.model_dump(), bundle, masks, int(level), seed + t) for level in edge_counts for t in range(trials)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            scores = list(pool.map(_robustness_trial, tasks))
    else:
        scores = [_robustness_trial(task) for task in tasks]

    rows = []
    for i, level in enumerate(edge_counts):
        values = np.array(scores[i * trials:(i + 1) * trials])
        rows.append(RobustnessRow(
            level=int(level),
            mean=float(values.mean()),
            p25=float(np.percentile(values, 25)),
            p75=float(np.percentile(values, 75)),
        ))
        logger.info("fake edges %d: mean=%.2f", level, rows[-1].mean)
    return rows
