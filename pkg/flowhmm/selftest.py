"""
Built-in correctness oracles.

Each suite checks one piece against an independent reference: forward-backward against
brute-force path enumeration, flows against their own inverse and against finite-difference
Jacobians and gradients, identity flows against the unit Gaussian, EM monotonicity and the
voting rules.
"""

import itertools
import time
from dataclasses import dataclass
from typing import Callable, List, Tuple

import numpy as np

from flowhmm.classify import vote
from flowhmm.config import FlowConfig, ModelConfig, TrainConfig
from flowhmm.glow import GlowStack
from flowhmm.gmm import GmmEmission
from flowhmm.hmm import HmmModel, MarkovChain, e_step, emission_log_likelihood
from flowhmm.logger import get_logger
from flowhmm.networks import FlowStack
from flowhmm.nmm import FLOW_KINDS, NmmEmission, build_flow
from flowhmm.numerics import (
    RngStream,
    derive_rng,
    grad_check,
    log_abs_det,
    log_sum_exp,
    numerical_jacobian,
)
from flowhmm.synth import sample_hmm
from flowhmm.trainer import HybridTrainer, build_model

logger = get_logger("selftest")

POSTERIOR_TOL = 1e-9
BIJECTION_TOL = 1e-8
JACOBIAN_TOL = 1e-4
GRADIENT_TOL = 1e-5
IDENTITY_TOL = 1e-10
EM_SLACK = 1e-8


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def randomize_flow(flow: FlowStack, rng: RngStream, scale: float = 0.1) -> FlowStack:
    """Perturb every parameter so no layer is an exact identity; Glow actnorm is initialized."""
    if isinstance(flow, GlowStack) and not flow.is_initialized:
        flow.initialize(rng.standard_normal((64, flow.dim)))
    vector = flow.parameter_vector()
    flow.set_parameter_vector(vector + scale * rng.standard_normal(vector.size))
    return flow


def random_flow(kind: str, dim: int, rng: RngStream, depth: int = 2) -> FlowStack:
    config = FlowConfig(coupling_layers=depth, flow_steps=depth, init_jitter=0.1)
    return randomize_flow(build_flow(kind, dim, config, rng), rng)


def random_gmm_model(rng: RngStream, num_states: int, num_mix: int, dim: int) -> HmmModel:
    q = rng.dirichlet(np.ones(num_states))
    A = rng.dirichlet(np.ones(num_states), size=num_states)
    emission = GmmEmission(
        np.log(rng.dirichlet(np.ones(num_mix), size=num_states)),
        rng.standard_normal((num_states, num_mix, dim)),
        0.3 * rng.standard_normal((num_states, num_mix, dim)),
    )
    return HmmModel(MarkovChain.from_probs(q, A), emission)


def enumerate_posteriors(
    chain: MarkovChain, emis: np.ndarray
) -> Tuple[float, np.ndarray, np.ndarray]:
    """Log-likelihood, state posteriors and summed pair posteriors by summing over all paths."""
    T, S = emis.shape
    paths = list(itertools.product(range(S), repeat=T))
    joint = np.empty(len(paths))
    for n, path in enumerate(paths):
        value = chain.log_q[path[0]] + emis[0, path[0]]
        for t in range(1, T):
            value += chain.log_A[path[t - 1], path[t]] + emis[t, path[t]]
        joint[n] = value
    total = float(log_sum_exp(joint))
    weights = np.exp(joint - total)
    gamma = np.zeros((T, S))
    xi = np.zeros((S, S))
    for w, path in zip(weights, paths):
        for t in range(T):
            gamma[t, path[t]] += w
        for t in range(T - 1):
            xi[path[t], path[t + 1]] += w
    return total, gamma, xi


# ---------------------------------------------------------------------------
# Suites


def check_forward_backward(instances: int, seed: int = 0) -> str:
    worst = 0.0
    for n in range(instances):
        rng = derive_rng(seed, 1, n)
        S, T, K = int(rng.integers(1, 4)), int(rng.integers(1, 6)), int(rng.integers(1, 3))
        model = random_gmm_model(rng, S, K, 2)
        seq = rng.standard_normal((T, 2))
        emis, _ = emission_log_likelihood(model.emission, seq)
        total, gamma, xi = enumerate_posteriors(model.chain, emis)
        stats = e_step(model.chain, model.emission, seq)
        with np.errstate(under="ignore"):
            errors = [
                abs(np.exp(stats.log_likelihood - total) - 1.0),
                float(np.max(np.abs(np.exp(stats.log_gamma) - gamma))),
                float(np.max(np.abs(np.exp(stats.log_xi_sum) - xi))),
                float(np.max(np.abs(np.exp(log_sum_exp(stats.comp_gamma, axis=2)) - gamma))),
            ]
        worst = max(worst, max(errors))
    if worst > POSTERIOR_TOL:
        raise AssertionError(f"posterior mismatch {worst:.3g} > {POSTERIOR_TOL}")
    return f"{instances} instances, max error {worst:.2e}"


def check_bijectivity(dims: Tuple[int, ...], seed: int = 0) -> str:
    worst = 0.0
    for kind in FLOW_KINDS:
        for dim in dims:
            rng = derive_rng(seed, 2, dim)
            flow = random_flow(kind, dim, rng)
            x = rng.standard_normal((16, dim))
            z, _ = flow.forward(x)
            error = float(np.max(np.abs(flow.inverse(z) - x)))
            worst = max(worst, error)
            if error > BIJECTION_TOL:
                raise AssertionError(f"{kind} D={dim}: reconstruction error {error:.3g}")
    return f"dims {list(dims)}, max reconstruction error {worst:.2e}"


def check_jacobian(dims: Tuple[int, ...], seed: int = 0) -> str:
    worst = 0.0
    for kind in FLOW_KINDS:
        for dim in dims:
            rng = derive_rng(seed, 3, dim)
            flow = random_flow(kind, dim, rng)
            x = rng.standard_normal(dim)
            _, analytic = flow.forward(x)
            numeric = log_abs_det(
                numerical_jacobian(lambda v: flow.forward(v)[0], x, eps=1e-6)
            )
            error = abs(analytic - numeric) / max(1.0, abs(numeric))
            worst = max(worst, error)
            if error > JACOBIAN_TOL:
                raise AssertionError(f"{kind} D={dim}: log-det error {error:.3g}")
    return f"dims {list(dims)}, max relative log-det error {worst:.2e}"


def check_gradients(dim: int = 4, seed: int = 0) -> str:
    worst = 0.0
    for kind in FLOW_KINDS:
        rng = derive_rng(seed, 4)
        flow = random_flow(kind, dim, rng)
        x = rng.standard_normal((5, dim))
        analytic = flow.backward(x, 1.0)
        vector = flow.parameter_vector()
        trial = flow.copy()

        def objective(p: np.ndarray) -> float:
            trial.set_parameter_vector(p)
            return float(np.sum(trial.log_likelihood(x)))

        flat = np.concatenate([analytic[name].ravel() for name in sorted(analytic)])
        error = grad_check(objective, vector, flat)
        worst = max(worst, error)
        if error > GRADIENT_TOL:
            raise AssertionError(f"{kind}: gradient error {error:.3g}")
    return f"D={dim}, max relative gradient error {worst:.2e}"


def check_identity_anchor(seed: int = 0) -> str:
    rng = derive_rng(seed, 5)
    dim = 3
    x = rng.standard_normal((8, dim))
    unit = GmmEmission.unit(2, dim, 2).component_log_densities(x)
    for kind in FLOW_KINDS:
        emission = NmmEmission.identity(kind, 2, 2, dim)
        error = float(np.max(np.abs(emission.component_log_densities(x) - unit)))
        if error > IDENTITY_TOL:
            raise AssertionError(f"{kind}: identity flow differs from unit Gaussian by {error:.3g}")
    return "identity flows match the unit Gaussian"


def check_em_monotone(kinds: Tuple[str, ...], seed: int = 0) -> str:
    rng = derive_rng(seed, 6)
    generator = random_gmm_model(rng, 2, 1, 2)
    data = [sample_hmm(generator, int(rng.integers(8, 16)), rng)[0] for _ in range(6)]
    details = []
    for kind in kinds:
        model_config = ModelConfig(kind=kind, num_states=2, num_mix=1)
        flow_config = FlowConfig(coupling_layers=2, flow_steps=2)
        train_config = TrainConfig(
            outer_iters=4, max_inner_iters=2, stop_on_convergence=False, seed=seed
        )
        model = build_model(data, model_config, flow_config, train_config)
        trainer = HybridTrainer(train_config, flow_config, class_label=f"selftest-{kind}")
        _, log = trainer.train_outer(model, data, derive_rng(seed, 7))
        nlls = log.nlls + [log.final_nll]
        if kind == "gmm":
            rises = [b - a for a, b in zip(nlls, nlls[1:]) if b - a > EM_SLACK * max(1, abs(a))]
            if rises:
                raise AssertionError(f"gmm: NLL increased by {max(rises):.3g} during EM")
        elif not np.all(np.isfinite(nlls)):
            raise AssertionError(f"{kind}: non-finite NLL during training")
        details.append(f"{kind} {nlls[0]:.3f} -> {nlls[-1]:.3f}")
    return ", ".join(details)


def check_voting(seed: int = 0) -> str:
    rng = derive_rng(seed, 8)
    fixed = [(["a", "a", "a"], "a"), (["a", "a", "b"], "a"), (["b", "a", "b"], "b")]
    for labels, expected in fixed:
        if vote(labels, rng) != expected:
            raise AssertionError(f"vote({labels}) != {expected}")
    draws = [vote(["a", "b", "c"], rng) for _ in range(3000)]
    shares = [draws.count(label) / len(draws) for label in "abc"]
    if min(shares) < 0.25 or max(shares) > 0.42:
        raise AssertionError(f"three-way disagreement is not uniform: {shares}")
    return f"truth table ok, disagreement shares {[round(s, 3) for s in shares]}"


def suites(fast: bool = False, seed: int = 0) -> List[Tuple[str, Callable[[], str]]]:
    dims: Tuple[int, ...] = (2, 8) if fast else (2, 8, 39)
    jacobian_dims: Tuple[int, ...] = (2, 4) if fast else (2, 4, 8)
    em_kinds: Tuple[str, ...] = ("gmm",) if fast else ("gmm", "nvp", "glow")
    instances = 10 if fast else 50
    return [
        ("forward-backward vs enumeration", lambda: check_forward_backward(instances, seed)),
        ("flow bijectivity", lambda: check_bijectivity(dims, seed)),
        ("log-det vs finite differences", lambda: check_jacobian(jacobian_dims, seed)),
        ("gradients vs finite differences", lambda: check_gradients(4, seed)),
        ("identity anchor", lambda: check_identity_anchor(seed)),
        ("EM monotonicity", lambda: check_em_monotone(em_kinds, seed)),
        ("voting rules", lambda: check_voting(seed)),
    ]


def run_selftest(fast: bool = False, seed: int = 0) -> List[SuiteResult]:
    """Run every oracle suite; failures are reported, not raised."""
    results = []
    for name, suite in suites(fast, seed):
        started = time.perf_counter()
        try:
            detail, passed = suite(), True
        except Exception as e:
            detail, passed = f"{type(e).__name__}: {e}", False
        result = SuiteResult(name, passed, detail, time.perf_counter() - started)
        log = logger.info if passed else logger.error
        log(f"{'PASS' if passed else 'FAIL'} {name}: {detail} ({result.seconds:.2f}s)")
        results.append(result)
    return results

