"""
Hybrid expectation-maximization trainer.

Each outer iteration computes posteriors under the current model ``H_old`` once, updates the
initial distribution, the transitions and the mixture weights in closed form, and fits the
flow parameters by minibatch Adam against the responsibility-weighted flow cost

    L(Phi) = - sum_{t,s,k} gamma_t(s, k) log p_{s,k}(x_t)

with the responsibilities held fixed. GMM emissions replace the inner loop by their exact
M-step. Per-class training is independent and runs on a thread pool with seed-split streams.
"""

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt

from flowhmm.config import Config, FlowConfig, ModelConfig, TrainConfig
from flowhmm.exceptions import DataError, NumericalError, ShapeError
from flowhmm.glow import GlowStack
from flowhmm.gmm import GmmEmission, gmm_m_step, init_gmm
from flowhmm.hmm import (
    HmmModel,
    MarkovChain,
    PosteriorStats,
    e_step_all,
    stack_stats,
    total_log_likelihood,
    uniform_segmentation,
    update_chain,
)
from flowhmm.logger import (
    get_logger,
    log_convergence,
    log_inner_iteration,
    log_numerical_issue,
    log_outer_iteration,
)
from flowhmm.metrics import TrainingMetrics
from flowhmm.networks import Params
from flowhmm.nmm import NmmEmission, update_pi
from flowhmm.numerics import FloatArray, RngStream, derive_rng

logger = get_logger("trainer")


# ---------------------------------------------------------------------------
# Optimizer and convergence test


@dataclass
class AdamState:
    """First and second moment estimates for one named parameter set."""

    m: Params
    v: Params
    step: int = 0

    @classmethod
    def for_params(cls, params: Params) -> "AdamState":
        return cls(
            m={name: np.zeros_like(value) for name, value in params.items()},
            v={name: np.zeros_like(value) for name, value in params.items()},
        )

    def copy(self) -> "AdamState":
        return AdamState(
            m={name: value.copy() for name, value in self.m.items()},
            v={name: value.copy() for name, value in self.v.items()},
            step=self.step,
        )


def adam_step(
    state: AdamState,
    params: Params,
    grads: Params,
    learning_rate: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Params:
    """
    One bias-corrected Adam descent step.

    Args:
        state: Moment estimates; updated in place
        params: Current parameters
        grads: Gradient of the objective being minimized
        learning_rate: Step size

    Returns:
        New parameter dictionary
    """
    for name, grad in grads.items():
        if name not in params or np.shape(grad) != np.shape(params[name]):
            raise ShapeError(f"Gradient for {name!r} does not match its parameter")
        if not np.all(np.isfinite(grad)):
            raise NumericalError(f"Non-finite gradient in parameter block {name!r}")

    state.step += 1
    correction1 = 1.0 - beta1**state.step
    correction2 = 1.0 - beta2**state.step
    updated: Params = {}
    for name, value in params.items():
        grad = grads.get(name)
        if grad is None:
            updated[name] = value
            continue
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * grad
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * grad * grad
        m_hat = state.m[name] / correction1
        v_hat = state.v[name] / correction2
        updated[name] = value - learning_rate * m_hat / (np.sqrt(v_hat) + eps)
    return updated


def check_convergence(
    previous: float, current: float, threshold: float, streak: int, required: int
) -> Tuple[bool, int]:
    """
    Relative-change criterion ``|current - previous| / |previous| < threshold``.

    Args:
        previous: Previous negative log-likelihood
        current: Current negative log-likelihood
        threshold: Relative tolerance
        streak: Consecutive satisfactions so far
        required: Satisfactions in a row needed to declare convergence

    Returns:
        ``(converged, new_streak)``
    """
    if previous == 0:
        raise NumericalError("Relative change is undefined for a previous value of 0")
    satisfied = abs(current - previous) / abs(previous) < threshold
    new_streak = streak + 1 if satisfied else 0
    return new_streak >= required, new_streak


# ---------------------------------------------------------------------------
# Training log


@dataclass
class OuterRecord:
    """Summary of one outer iteration."""

    outer_iter: int
    nll: float
    inner_iters: int
    learning_rate: float
    wall_time: float
    inner_costs: List[float] = field(default_factory=list)


@dataclass
class TrainLog:
    """Per-class training history."""

    class_label: str = ""
    settings: Dict[str, Any] = field(default_factory=dict)
    records: List[OuterRecord] = field(default_factory=list)
    final_nll: Optional[float] = None
    converged: bool = False

    def append(self, record: OuterRecord) -> None:
        if not np.isfinite(record.nll):
            raise NumericalError(f"Non-finite NLL at outer iteration {record.outer_iter}")
        self.records.append(record)

    @property
    def nlls(self) -> List[float]:
        return [record.nll for record in self.records]

    def to_records(self) -> List[Dict[str, Any]]:
        """Line-delimited records: one per outer iteration, then a summary line."""
        lines: List[Dict[str, Any]] = [
            {"type": "outer", "class_label": self.class_label, **asdict(record)}
            for record in self.records
        ]
        lines.append(
            {
                "type": "summary",
                "class_label": self.class_label,
                "final_nll": self.final_nll,
                "converged": self.converged,
                "settings": self.settings,
            }
        )
        return lines

    def without_timing(self) -> List[Dict[str, Any]]:
        """Records with wall times removed, for determinism comparisons."""
        return [
            {key: value for key, value in line.items() if key != "wall_time"}
            for line in self.to_records()
        ]

    def copy(self) -> "TrainLog":
        return TrainLog(
            class_label=self.class_label,
            settings=dict(self.settings),
            records=[
                OuterRecord(**{**asdict(r), "inner_costs": list(r.inner_costs)})
                for r in self.records
            ],
            final_nll=self.final_nll,
            converged=self.converged,
        )


@dataclass
class TrainingState:
    """Everything needed to continue a run after an outer iteration."""

    model: HmmModel
    adam: List[AdamState]
    rng: RngStream
    learning_rate: float
    outer_iter: int = 0
    streak: int = 0
    previous_nll: Optional[float] = None
    log: TrainLog = field(default_factory=TrainLog)
    done: bool = False


CheckpointFn = Callable[[TrainingState], None]


# ---------------------------------------------------------------------------
# Model construction


def build_model(
    sequences: Sequence[FloatArray],
    model_config: ModelConfig,
    flow_config: FlowConfig,
    train_config: TrainConfig,
    class_index: int = 0,
    label: str = "",
) -> HmmModel:
    """
    Initial class model: left-to-right chain plus emissions of ``model_config.kind``.

    GMMs are seeded from the flat-start segmentation of the data; flow mixtures start as
    identity maps with jittered hidden layers.
    """
    if not sequences:
        raise DataError(f"Class {label or class_index!r} has no training sequences")
    dim = int(np.atleast_2d(sequences[0]).shape[1])
    num_states = model_config.num_states
    num_mix = model_config.resolved_num_mix()
    chain = MarkovChain.left_to_right(num_states)
    if model_config.kind == "gmm":
        emission: Any = init_gmm(
            sequences, num_states, num_mix, derive_rng(train_config.seed, class_index, 1)
        )
    else:
        emission = NmmEmission.create(
            model_config.kind,
            num_states,
            num_mix,
            dim,
            flow_config,
            seed=train_config.seed,
            key=(class_index,),
            det_warning_threshold=train_config.det_warning_threshold,
        )
    metadata = {"train": train_config.model_dump(mode="json"), "seed": train_config.seed}
    return HmmModel(chain=chain, emission=emission, label=label, metadata=metadata)


def _copy_model(model: HmmModel) -> HmmModel:
    emission = model.emission
    if isinstance(emission, NmmEmission):
        emission = emission.copy()
    elif isinstance(emission, GmmEmission):
        emission = GmmEmission(
            emission.log_weights.copy(), emission.means.copy(), emission.log_variances.copy()
        )
    return HmmModel(
        chain=model.chain, emission=emission, label=model.label, metadata=dict(model.metadata)
    )


# ---------------------------------------------------------------------------
# Trainer


class HybridTrainer:
    """Trains one class model by hybrid EM."""

    def __init__(
        self,
        config: TrainConfig,
        flow_config: Optional[FlowConfig] = None,
        class_label: str = "",
        metrics: Optional[TrainingMetrics] = None,
        checkpoint_fn: Optional[CheckpointFn] = None,
    ) -> None:
        self.config = config
        self.flow_config = flow_config if flow_config is not None else FlowConfig()
        self.class_label = class_label
        self.metrics = metrics
        self.checkpoint_fn = checkpoint_fn
        self.logger = logger

    def settings(self, kind: str) -> Dict[str, Any]:
        """Configuration snapshot stored in the training log."""
        return {
            "kind": kind,
            "learning_rate": self.config.resolved_learning_rate(kind),
            **self.config.model_dump(exclude={"learning_rate"}),
        }

    def initial_state(self, model: HmmModel, rng: RngStream) -> TrainingState:
        model = _copy_model(model)
        adam: List[AdamState] = []
        if isinstance(model.emission, NmmEmission):
            adam = [AdamState.for_params(flow.params) for _, _, flow in model.emission.iter_flows()]
        return TrainingState(
            model=model,
            adam=adam,
            rng=rng,
            learning_rate=self.config.resolved_learning_rate(model.kind),
            log=TrainLog(class_label=self.class_label, settings=self.settings(model.kind)),
        )

    # Inner loop -----------------------------------------------------------------------

    def _minibatches(self, lengths: Sequence[int]) -> List[npt.NDArray[np.int64]]:
        order = np.argsort(np.asarray(lengths), kind="stable")
        size = self.config.batch_size
        return [order[i : i + size] for i in range(0, len(order), size)]

    @staticmethod
    def flow_cost(emission: NmmEmission, frames: FloatArray, resp: FloatArray) -> float:
        """Responsibility-weighted negative flow log-likelihood over ``frames``."""
        cost = 0.0
        for s, k, flow in emission.iter_flows():
            weights = resp[:, s, k]
            if not np.any(weights):
                continue
            try:
                values = np.asarray(flow.log_likelihood(frames))
            except NumericalError as e:
                raise type(e)(str(e), state=s, component=k) from e
            bad = np.flatnonzero(~np.isfinite(values) & (weights > 0))
            if bad.size:
                raise NumericalError(
                    "Non-finite flow log-likelihood in the inner cost",
                    state=s,
                    component=k,
                    frame=int(bad[0]),
                )
            cost -= float(np.dot(weights, np.where(weights > 0, values, 0.0)))
        return cost

    def train_inner(
        self,
        emission: NmmEmission,
        sequences: Sequence[FloatArray],
        stats: Sequence[PosteriorStats],
        state: TrainingState,
    ) -> Tuple[int, List[float]]:
        """
        Minibatch Adam epochs on the flow parameters with responsibilities frozen.

        Flow parameters of ``emission`` and the Adam moments in ``state`` are updated in
        place. Stops after ``max_inner_iters`` epochs or when the full-data cost meets the
        convergence criterion ``convergence_streak`` times in a row.

        Returns:
            ``(epochs run, cost after each epoch)``
        """
        cfg = self.config
        if cfg.max_inner_iters == 0:
            return 0, []
        frames_by_seq = [np.atleast_2d(seq) for seq in sequences]
        resp_by_seq = [np.exp(s.comp_gamma) for s in stats]
        all_frames = np.concatenate(frames_by_seq, axis=0)
        all_resp = np.exp(stack_stats(stats))
        batches = self._minibatches([f.shape[0] for f in frames_by_seq])

        costs: List[float] = []
        previous: Optional[float] = None
        streak = 0
        epochs = 0
        for epoch in range(cfg.max_inner_iters):
            for b in state.rng.permutation(len(batches)):
                index = batches[b]
                frames = np.concatenate([frames_by_seq[i] for i in index], axis=0)
                resp = np.concatenate([resp_by_seq[i] for i in index], axis=0)
                scale = 1.0 / frames.shape[0]
                for j, (s, k, flow) in enumerate(emission.iter_flows()):
                    ascent = flow.backward(frames, resp[:, s, k] * scale)
                    descent = {name: -grad for name, grad in ascent.items()}
                    flow.params = adam_step(
                        state.adam[j],
                        flow.params,
                        descent,
                        state.learning_rate,
                        cfg.adam_beta1,
                        cfg.adam_beta2,
                        cfg.adam_eps,
                    )
            epochs = epoch + 1

            cost = self.flow_cost(emission, all_frames, all_resp)
            if not np.isfinite(cost):
                raise NumericalError(f"Non-finite inner cost after epoch {epochs}")
            costs.append(cost)
            log_inner_iteration(self.logger, self.class_label, epochs, cost)

            if previous is not None and previous != 0:
                converged, streak = check_convergence(
                    previous, cost, cfg.convergence_threshold, streak, cfg.convergence_streak
                )
                if converged:
                    log_convergence(self.logger, self.class_label, "inner", epochs)
                    break
            previous = cost

        if self.metrics is not None:
            self.metrics.record_min_abs_det(self.class_label, emission.min_abs_det())
        return epochs, costs

    # Outer loop -----------------------------------------------------------------------

    def _initialize_actnorm(self, emission: NmmEmission, sequences: Sequence[FloatArray]) -> None:
        if self.flow_config.actnorm_init == "first_batch":
            chosen = [sequences[i] for i in self._minibatches([len(s) for s in sequences])[0]]
        else:
            chosen = list(sequences)
        per_state: List[List[FloatArray]] = [[] for _ in range(emission.num_states)]
        for seq in chosen:
            frames = np.atleast_2d(seq)
            alignment = uniform_segmentation(frames.shape[0], emission.num_states)
            for s in range(emission.num_states):
                per_state[s].append(frames[alignment == s])
        batches = []
        for s, parts in enumerate(per_state):
            frames = np.concatenate(parts, axis=0)
            batches.append(frames if frames.shape[0] else np.concatenate(chosen, axis=0))
        emission.initialize_actnorm(batches)

    def train_outer(
        self,
        model: HmmModel,
        sequences: Sequence[FloatArray],
        rng: Optional[RngStream] = None,
        state: Optional[TrainingState] = None,
    ) -> Tuple[HmmModel, TrainLog]:
        """
        Run outer iterations until ``outer_iters`` or outer convergence.

        Args:
            model: Initial model (left untouched)
            sequences: Training sequences of one class
            rng: Stream for minibatch order (ignored when resuming)
            state: Checkpointed state to resume from

        Returns:
            ``(trained model, training log)``
        """
        if not sequences:
            raise DataError(f"Class {self.class_label!r} has no training sequences")
        for seq in sequences:
            if np.atleast_2d(seq).shape[1] != model.dim:
                raise ShapeError(
                    f"Sequence dimension {np.atleast_2d(seq).shape[1]} does not match "
                    f"model ({model.dim})"
                )
        if state is None:
            state = self.initial_state(model, rng if rng is not None else derive_rng(0))
        cfg = self.config

        emission = state.model.emission
        if isinstance(emission, NmmEmission) and emission.flow_kind == "glow":
            if not all(
                isinstance(f, GlowStack) and f.is_initialized for _, _, f in emission.iter_flows()
            ):
                self._initialize_actnorm(emission, sequences)

        while not state.done and state.outer_iter < cfg.outer_iters:
            self._outer_iteration(state, sequences)
            if self.checkpoint_fn is not None:
                self.checkpoint_fn(state)

        current = state.model
        state.log.final_nll = -total_log_likelihood(current.chain, current.emission, sequences)
        return state.model, state.log

    def _outer_iteration(self, state: TrainingState, sequences: Sequence[FloatArray]) -> None:
        cfg = self.config
        started = time.perf_counter()
        model = state.model
        try:
            stats = e_step_all(model.chain, model.emission, sequences)
        except NumericalError as e:
            log_numerical_issue(
                self.logger, f"[{self.class_label}] {e}", e.state, e.component, e.frame
            )
            raise
        nll = -float(sum(s.log_likelihood for s in stats))

        inner_iters = 0
        inner_costs: List[float] = []
        emission = model.emission
        if isinstance(emission, GmmEmission):
            emission = gmm_m_step(stats, sequences, emission)
        elif isinstance(emission, NmmEmission):
            log_weights = update_pi(stats, emission.log_weights)
            inner_iters, inner_costs = self.train_inner(emission, sequences, stats, state)
            emission = NmmEmission(log_weights, emission.flows, emission.flow_kind)
        chain = update_chain(stats, model.chain)
        state.model = HmmModel(chain, emission, model.label, model.metadata)

        duration = time.perf_counter() - started
        state.log.append(
            OuterRecord(
                outer_iter=state.outer_iter,
                nll=nll,
                inner_iters=inner_iters,
                learning_rate=state.learning_rate,
                wall_time=duration,
                inner_costs=inner_costs,
            )
        )
        log_outer_iteration(
            self.logger, self.class_label, state.outer_iter, nll, inner_iters, state.learning_rate
        )
        if self.metrics is not None:
            self.metrics.record_outer_iteration(
                self.class_label, nll, state.learning_rate, inner_iters, duration
            )

        if state.previous_nll is not None and state.previous_nll != 0:
            converged, state.streak = check_convergence(
                state.previous_nll,
                nll,
                cfg.convergence_threshold,
                state.streak,
                cfg.convergence_streak,
            )
            if converged:
                state.log.converged = True
                log_convergence(self.logger, self.class_label, "outer", state.outer_iter + 1)
                if cfg.stop_on_convergence:
                    state.done = True
        state.previous_nll = nll

        state.outer_iter += 1
        if state.outer_iter % cfg.lr_decay_every == 0:
            state.learning_rate *= cfg.lr_decay_factor


# ---------------------------------------------------------------------------
# Class sets


def train_class_set(
    datasets: Sequence[Sequence[FloatArray]],
    labels: Sequence[str],
    config: Config,
    metrics: Optional[TrainingMetrics] = None,
    checkpoint_factory: Optional[Callable[[int, str], CheckpointFn]] = None,
    resume_fn: Optional[Callable[[int, str], Optional[TrainingState]]] = None,
) -> List[Tuple[HmmModel, TrainLog]]:
    """
    Train one model per class.

    ``checkpoint_factory(index, label)`` supplies the per-class checkpoint callback;
    ``resume_fn(index, label)`` may return a saved state to continue from.

    Class ``c`` uses streams derived from ``(config.train.seed, c)``, so the result does not
    depend on ``config.jobs`` or on scheduling. Results come back in class order.
    """
    if len(datasets) != len(labels):
        raise DataError(f"{len(datasets)} datasets for {len(labels)} labels")
    for label, data in zip(labels, datasets):
        if not data:
            raise DataError(f"Class {label!r} has no training sequences")

    def train_one(index: int) -> Tuple[HmmModel, TrainLog]:
        label = labels[index]
        model = build_model(
            datasets[index], config.model, config.flow, config.train, index, label
        )
        trainer = HybridTrainer(
            config.train,
            config.flow,
            class_label=label,
            metrics=metrics,
            checkpoint_fn=checkpoint_factory(index, label) if checkpoint_factory else None,
        )
        state = resume_fn(index, label) if resume_fn is not None else None
        return trainer.train_outer(
            model, datasets[index], derive_rng(config.train.seed, index), state=state
        )

    logger.info(
        f"Training {len(labels)} {config.model.kind} class models with {config.jobs} job(s)"
    )
    if config.jobs == 1:
        return [train_one(i) for i in range(len(labels))]
    with ThreadPoolExecutor(max_workers=config.jobs) as executor:
        futures = [executor.submit(train_one, i) for i in range(len(labels))]
        return [future.result() for future in futures]
