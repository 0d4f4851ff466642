"""Marginal-likelihood PAC-Bayes bound with Monte Carlo consistency mass.

The prior over hypotheses is the initialization distribution (fan-in-scaled
Gaussian weights). P(C(S)) -- the prior mass of nets with zero training error
-- is estimated by counting exact-fit draws; the posterior is realized by
rejection sampling, which returns the prior restricted to the consistency set.
Draw k always uses the stream spawned at index k, so sharding the draw budget
across workers cannot change any result.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, corrupt_labels, split_train_test, synth_blobs
from .errors import BoundUndefined, ConfigError, InvalidDataset, RejectionExhausted, \
    ZeroHits
from .net import Checkpoint, NetSpec, init_checkpoint
from .rng import Rng, child_seeds, gaussian_matrix, states_from_seeds
from . import rng as _rng_mod

_WILSON_Z = 1.96


@dataclass(frozen=True)
class PriorConfig:
    std_scale: float = 1.0  # multiplies the He factor sqrt(2/fan_in)


@dataclass
class ConsistencyEstimate:
    hits: int
    draws: int
    p_hat: float  # None when hits == 0
    wilson_lo: float
    wilson_hi: float
    rule_of_three_upper: float = None  # flagged pessimistic option when hits == 0
    sampler: dict = field(default_factory=dict)

    def require_p_hat(self) -> float:
        if self.p_hat is None:
            raise ZeroHits(
                f"no consistent draws in {self.draws}; "
                f"rule-of-three upper mass {self.rule_of_three_upper}")
        return self.p_hat


def wilson_interval(hits: int, draws: int, z: float = _WILSON_Z):
    """95% Wilson score interval for a binomial proportion."""
    if draws <= 0:
        raise ConfigError("draws must be positive")
    phat = hits / draws
    z2 = z * z
    center = (phat + z2 / (2 * draws)) / (1 + z2 / draws)
    half = z * math.sqrt(phat * (1 - phat) / draws + z2 / (4 * draws * draws)) / (
        1 + z2 / draws)
    return max(0.0, center - half), min(1.0, center + half)


def _layer_plan(spec: NetSpec, prior: PriorConfig):
    """(sizes, stds, shapes) for the sampled (trainable) layers, in order."""
    sizes, stds, shapes = [], [], []
    for i in spec.trainable_layers:
        fan_in, fan_out = spec.layer_dims[i], spec.layer_dims[i + 1]
        sizes.append(fan_out * fan_in)
        stds.append(prior.std_scale * math.sqrt(2.0 / fan_in))
        shapes.append((fan_out, fan_in))
    return sizes, stds, shapes


def _resolve_fixed_readout(spec: NetSpec, seed: int, prior: PriorConfig,
                           fixed_readout):
    if not spec.frozen_readout:
        return None
    if fixed_readout is not None:
        return np.asarray(fixed_readout, dtype=np.float64)
    i = spec.num_layers - 1
    fan_in, fan_out = spec.layer_dims[i], spec.layer_dims[i + 1]
    std = prior.std_scale * math.sqrt(2.0 / fan_in)
    return Rng(seed).spawn_key("frozen-readout").gaussians(
        fan_out * fan_in).reshape(fan_out, fan_in) * std


def prior_predictions(spec: NetSpec, X: np.ndarray, seeds: np.ndarray,
                      prior: PriorConfig = PriorConfig(),
                      fixed_readout=None) -> np.ndarray:
    """Predicted labels, shape (K, n), for one prior draw per seed.

    Each seed's weight layout matches the scalar initialization stream exactly,
    so draw k can be re-materialized with spawn_index(k).
    """
    if spec.bias_enabled or spec.normalize_hidden:
        raise ConfigError("prior sampling supports plain (bias-free) nets")
    sizes, stds, shapes = _layer_plan(spec, prior)
    K = len(seeds)
    states = states_from_seeds(seeds)
    A = None
    for li, (size, std, shape) in enumerate(zip(sizes, stds, shapes)):
        cols = 2 * ((size + 1) // 2)
        u = np.empty((K, cols), dtype=np.uint64)
        _rng_mod._kernels.fill_u64_multi(states, u)
        W = (_rng_mod._box_muller(u)[:, :size] * std).reshape((K,) + shape)
        if A is None:
            Z = np.einsum("nd,kod->kno", X, W)
        else:
            Z = np.einsum("knh,koh->kno", A, W)
        is_hidden = li < spec.num_layers - 1 or spec.frozen_readout
        if is_hidden:
            A = np.maximum(Z, 0.0) if spec.activation == "relu" else Z
    if spec.frozen_readout:
        if fixed_readout is None:
            raise ConfigError("frozen readout weights required")
        Z = np.einsum("knh,oh->kno", A, fixed_readout)
    return Z.argmax(axis=2)


def draw_checkpoint(spec: NetSpec, seed: int, index: int,
                    prior: PriorConfig = PriorConfig(),
                    fixed_readout=None) -> Checkpoint:
    """Materialize prior draw `index` (bit-identical to the vectorized row)."""
    ck = init_checkpoint(spec, Rng(seed).spawn_index(index),
                         std_scale=prior.std_scale)
    if spec.frozen_readout:
        ro = _resolve_fixed_readout(spec, seed, prior, fixed_readout)
        ck.weights[-1] = ro.copy()
        ck.init_weights[-1] = ro.copy()
    return ck


def estimate_consistency_mass(spec: NetSpec, ds: Dataset, draws: int, seed: int,
                              prior: PriorConfig = PriorConfig(),
                              fixed_readout=None,
                              shard_size: int = 4096) -> ConsistencyEstimate:
    """Hit fraction of exact-interpolation prior draws, with a Wilson interval."""
    if ds.num_classes != 2:
        raise InvalidDataset("consistency mass estimation is binary-only")
    if draws < 1:
        raise ConfigError("need at least one draw")
    ro = _resolve_fixed_readout(spec, seed, prior, fixed_readout)
    hits = 0
    y = ds.labels
    for lo in range(0, draws, shard_size):
        hi = min(lo + shard_size, draws)
        seeds = child_seeds(seed, lo, hi)
        preds = prior_predictions(spec, ds.features, seeds, prior, ro)
        hits += int((preds == y[None, :]).all(axis=1).sum())
    est = ConsistencyEstimate(
        hits=hits,
        draws=draws,
        p_hat=(hits / draws) if hits else None,
        wilson_lo=0.0,
        wilson_hi=0.0,
        sampler={"seed": seed, "spec_hash": spec.hash(),
                 "std_scale": prior.std_scale},
    )
    est.wilson_lo, est.wilson_hi = wilson_interval(hits, draws)
    if hits == 0:
        est.rule_of_three_upper = 3.0 / draws
    return est


@dataclass(frozen=True)
class BoundInput:
    n: int
    p_hat: float
    delta_conf: float = 0.05
    gamma_conf: float = 0.05

    def __post_init__(self):
        if self.n < 2:
            raise ConfigError("bound requires n >= 2")
        if not 0.0 < self.delta_conf <= 1.0 or not 0.0 < self.gamma_conf <= 1.0:
            raise ConfigError("confidence levels must be in (0, 1]")


@dataclass
class BoundResult:
    rhs: float
    epsilon_bound: float
    vacuous: bool  # bound above 1/2: uninformative for binary labels

    def to_dict(self) -> dict:
        return {"rhs": self.rhs, "epsilon_bound": self.epsilon_bound,
                "vacuous": self.vacuous}


def ml_pacbayes_bound(inp: BoundInput) -> BoundResult:
    """epsilon <= 1 - exp(-[ln(1/p) + ln n + ln(1/delta) + ln(1/gamma)]/(n-1))."""
    if inp.p_hat is None or inp.p_hat <= 0.0:
        raise BoundUndefined("consistency mass estimate must be positive")
    rhs = (
        math.log(1.0 / inp.p_hat) + math.log(inp.n)
        + math.log(1.0 / inp.delta_conf) + math.log(1.0 / inp.gamma_conf)
    ) / (inp.n - 1)
    eps = 1.0 - math.exp(-rhs)
    return BoundResult(rhs=rhs, epsilon_bound=eps, vacuous=eps >= 0.5)


def gibbs_sample_consistent(spec: NetSpec, ds: Dataset, max_attempts: int,
                            seed: int, prior: PriorConfig = PriorConfig(),
                            fixed_readout=None, shard_size: int = 2048):
    """First prior draw with zero training error: an exact posterior sample.

    Returns (checkpoint, attempts). Uses its own stream family ('gibbs'), kept
    independent from the mass estimator's draws.
    """
    if ds.num_classes != 2:
        raise InvalidDataset("rejection sampling is binary-only")
    root = Rng(seed).spawn_key("gibbs")
    ro = _resolve_fixed_readout(spec, root.seed, prior, fixed_readout)
    y = ds.labels
    for lo in range(0, max_attempts, shard_size):
        hi = min(lo + shard_size, max_attempts)
        seeds = child_seeds(root.seed, lo, hi)
        preds = prior_predictions(spec, ds.features, seeds, prior, ro)
        ok = (preds == y[None, :]).all(axis=1)
        where = np.flatnonzero(ok)
        if len(where):
            k = lo + int(where[0])
            ck = draw_checkpoint(spec, root.seed, k, prior, ro)
            ck.meta["gibbs_attempts"] = k + 1
            return ck, k + 1
    raise RejectionExhausted(f"no consistent draw in {max_attempts} attempts")


@dataclass(frozen=True)
class EvidenceTask:
    n_train: int = 16
    n_heldout: int = 2000
    dim: int = 2
    separation: float = 4.0
    num_classes: int = 2
    draws: int = 100000
    repetitions: int = 100
    delta_conf: float = 0.05
    gamma_conf: float = 0.05
    corruptions: tuple = (0.0,)
    max_attempts: int = 200000


def bound_vs_error_experiment(spec: NetSpec, task: EvidenceTask, seed: int,
                              prior: PriorConfig = PriorConfig()) -> dict:
    """Fresh data per repetition: estimate mass, bound, posterior sample, true error.

    Per-repetition failures (zero hits, rejection exhausted) are recorded and
    skipped in the violation count, never fatal.
    """
    rows = []
    root = Rng(seed)
    for p in task.corruptions:
        for rep in range(task.repetitions):
            rs = root.spawn_key(f"rep={rep}|p={p!r}")
            full = synth_blobs(task.n_train + task.n_heldout, task.dim,
                               task.num_classes, task.separation,
                               seed=rs.spawn_key("data").next_u64())
            train, heldout = split_train_test(full, task.n_train,
                                              seed=rs.spawn_key("split").next_u64())
            if p > 0:
                train = corrupt_labels(train, p, seed=rs.spawn_key("corrupt").next_u64())
            est = estimate_consistency_mass(spec, train, task.draws,
                                            seed=rs.spawn_key("mc").next_u64(),
                                            prior=prior)
            row = {
                "rep": rep, "corruption": p, "hits": est.hits, "draws": est.draws,
                "p_hat": est.p_hat, "bound": None, "sample_error": None,
                "violation": None, "status": "ok",
            }
            if est.p_hat is None:
                row["status"] = "zero_hits"
                rows.append(row)
                continue
            bound = ml_pacbayes_bound(BoundInput(task.n_train, est.p_hat,
                                                 task.delta_conf, task.gamma_conf))
            row["bound"] = bound.epsilon_bound
            try:
                ck, attempts = gibbs_sample_consistent(
                    spec, train, task.max_attempts,
                    seed=rs.spawn_key("posterior").next_u64(), prior=prior)
            except RejectionExhausted:
                row["status"] = "rejection_exhausted"
                rows.append(row)
                continue
            from .net import forward_batch

            preds = forward_batch(spec, ck.weights, ck.biases,
                                  heldout.features).argmax(axis=1)
            err = float((preds != heldout.labels).mean())
            row["sample_error"] = err
            row["violation"] = bool(err > bound.epsilon_bound)
            row["attempts"] = attempts
            rows.append(row)
    evaluated = [r for r in rows if r["violation"] is not None]
    violations = sum(1 for r in evaluated if r["violation"])
    medians = {}
    for p in task.corruptions:
        bounds = sorted(r["bound"] for r in rows
                        if r["corruption"] == p and r["bound"] is not None)
        if bounds:
            mid = len(bounds) // 2
            medians[repr(float(p))] = (
                bounds[mid] if len(bounds) % 2 else
                0.5 * (bounds[mid - 1] + bounds[mid]))
    return {
        "task": {k: getattr(task, k) for k in task.__dataclass_fields__},
        "rows": rows,
        "evaluated": len(evaluated),
        "violations": violations,
        "violation_rate": (violations / len(evaluated)) if evaluated else None,
        "median_bound_by_corruption": medians,
        "skipped": {
            "zero_hits": sum(1 for r in rows if r["status"] == "zero_hits"),
            "rejection_exhausted": sum(
                1 for r in rows if r["status"] == "rejection_exhausted"),
        },
    }
