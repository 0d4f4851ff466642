"""Post-mortem generalization measures computed from a checkpoint and a dataset.

The vocabulary matches the audit report tables exactly. All quantities use the
flattened trainable parameter vector w (frozen readouts are excluded, so the
schedule-equivalence scaling identities hold for the reported values).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateLayer, MarginNotPositive, SigmaSearchFailed
from .net import Checkpoint, NetSpec, flatten_params, forward_batch, margins, \
    unflatten_params
from .rng import Rng

MEASURE_NAMES = (
    "PARAMS",
    "INVERSE_MARGIN",
    "FRO_DIST",
    "PARAM_NORM",
    "SUM_OF_FRO",
    "SUM_OF_FRO_OVER_MARGIN",
    "PROD_OF_FRO",
    "PROD_OF_FRO_OVER_MARGIN",
    "SUM_OF_SPEC",
    "SUM_OF_SPEC_OVER_MARGIN",
    "PROD_OF_SPEC",
    "PROD_OF_SPEC_OVER_MARGIN",
    "DIST_SPEC_INIT",
    "FRO_OVER_SPEC",
    "SPEC_ORIG_MAIN",
    "SPEC_INIT_MAIN",
    "PATH_NORM",
    "PATH_NORM_OVER_MARGIN",
    "PACBAYES_ORIG",
    "PACBAYES_INIT",
    "PACBAYES_FLATNESS",
    "PACBAYES_MAG_ORIG",
    "PACBAYES_MAG_INIT",
    "PACBAYES_MAG_FLATNESS",
)

_MARGIN_MEASURES = frozenset(
    n for n in MEASURE_NAMES if n.endswith("_OVER_MARGIN")
) | {"INVERSE_MARGIN", "SPEC_ORIG_MAIN", "SPEC_INIT_MAIN"}
_SIGMA_MEASURES = frozenset({"PACBAYES_ORIG", "PACBAYES_INIT", "PACBAYES_FLATNESS"})
_SIGMA0_MEASURES = frozenset({"PACBAYES_MAG_ORIG", "PACBAYES_MAG_INIT",
                              "PACBAYES_MAG_FLATNESS"})

_SPECTRAL_START_SEED = 0x5EED5EED5EED5EED


@dataclass(frozen=True)
class MeasureConfig:
    sigma_target_dev: float = 0.1
    sigma_mc_draws: int = 15
    sigma_iters: int = 20
    sigma_lo: float = 1e-5
    sigma_hi: float = 10.0
    kappa: float = 1e-3
    delta: float = 0.05
    seed: int = 0
    spectral_tol: float = 1e-10
    spectral_max_iters: int = 20000
    margin_percentile: float = 0.10


@dataclass
class SigmaSearchResult:
    sigma: float
    target_dev: float
    mc_draws: int
    iterations: int
    converged: bool
    final_drop: float
    magnitude_aware: bool = False


@dataclass
class MeasureSet:
    values: dict = field(default_factory=dict)  # name -> positive finite float
    errors: dict = field(default_factory=dict)  # name -> error tag
    diagnostics: dict = field(default_factory=dict)

    def record(self, name: str, value) -> None:
        v = float(value)
        if v == 0.0:
            self.errors[name] = "ZeroValue"
        elif not np.isfinite(v):
            self.errors[name] = "NonFinite"
        elif v < 0:
            self.errors[name] = "NegativeValue"
        else:
            self.values[name] = v


def measure_layers(spec: NetSpec, ckpt: Checkpoint):
    """(weights, init_weights) the measures run over: trainable layers only."""
    idx = spec.trainable_layers
    return [ckpt.weights[i] for i in idx], [ckpt.init_weights[i] for i in idx]


def spectral_norm(W: np.ndarray, tol: float = 1e-10, max_iters: int = 20000):
    """Largest singular value by power iteration on the Gram matrix.

    Returns (sigma, relative_residual, iterations, converged). The start vector
    comes from a fixed stream so results are reproducible.
    """
    W = np.asarray(W, dtype=np.float64)
    if not np.any(W):
        raise DegenerateLayer("zero matrix has no spectral direction")
    G = W.T @ W if W.shape[1] <= W.shape[0] else W @ W.T
    k = G.shape[0]
    rng = Rng(_SPECTRAL_START_SEED)
    v = rng.gaussians(k)
    v /= np.linalg.norm(v)
    lam, residual = 0.0, np.inf
    iters = 0
    for iters in range(1, max_iters + 1):
        u = G @ v
        norm_u = np.linalg.norm(u)
        if norm_u == 0.0:  # started in the kernel; redraw deterministically
            v = rng.gaussians(k)
            v /= np.linalg.norm(v)
            continue
        lam = float(v @ u)
        residual = float(np.linalg.norm(u - lam * v) / abs(lam)) if lam else np.inf
        v = u / norm_u
        if residual <= tol:
            break
    return float(np.sqrt(max(lam, 0.0))), residual, iters, residual <= tol


def frobenius_measures(spec: NetSpec, ckpt: Checkpoint, n: int) -> dict:
    """FRO_DIST, PARAM_NORM, SUM_OF_FRO, PROD_OF_FRO."""
    Ws, W0s = measure_layers(spec, ckpt)
    sq = [float(np.sum(W * W)) for W in Ws]
    dist_sq = [float(np.sum((W - W0) ** 2)) for W, W0 in zip(Ws, W0s)]
    return {
        "FRO_DIST": float(np.sqrt(sum(dist_sq) / n)),
        "PARAM_NORM": float(np.sqrt(sum(sq) / n)),
        "SUM_OF_FRO": float(np.sqrt(sum(sq) / n)),
        "PROD_OF_FRO": float(np.sqrt(np.prod(sq) / n)),
    }


def inverse_margin(margin_gamma: float, n: int) -> float:
    """sqrt(n) / gamma (proportionality constant fixed to 1)."""
    if margin_gamma <= 0:
        raise MarginNotPositive(f"margin gamma {margin_gamma} <= 0")
    return float(np.sqrt(n) / margin_gamma)


def spectral_measures(spec: NetSpec, ckpt: Checkpoint, n: int, margin_gamma=None,
                      tol: float = 1e-10, max_iters: int = 20000):
    """Spectral-norm family; returns (values, residual diagnostics).

    SPEC_ORIG_MAIN / SPEC_INIT_MAIN require a positive margin and are skipped
    (left to the caller's error tagging) when margin_gamma is None.
    """
    Ws, W0s = measure_layers(spec, ckpt)
    specs, residuals = [], []
    for W in Ws:
        s, res, _, _ = spectral_norm(W, tol, max_iters)
        if s == 0.0:
            raise DegenerateLayer("layer with zero spectral norm")
        specs.append(s)
        residuals.append(res)
    spec_sq = [s * s for s in specs]
    dist_sq = []
    for W, W0 in zip(Ws, W0s):
        D = W - W0
        if np.any(D):
            s, _, _, _ = spectral_norm(D, tol, max_iters)
        else:
            s = 0.0
        dist_sq.append(s * s)
    fro_sq = [float(np.sum(W * W)) for W in Ws]
    stable_ranks = [f / s for f, s in zip(fro_sq, spec_sq)]
    values = {
        "SUM_OF_SPEC": float(np.sqrt(sum(spec_sq) / n)),
        "PROD_OF_SPEC": float(np.sqrt(np.prod(spec_sq) / n)),
        "DIST_SPEC_INIT": float(np.sqrt(sum(dist_sq) / n)),
        "FRO_OVER_SPEC": float(sum(stable_ranks)),
    }
    if margin_gamma is not None:
        if margin_gamma <= 0:
            raise MarginNotPositive(f"margin gamma {margin_gamma} <= 0")
        prod_spec = float(np.prod(spec_sq))
        orig_sum = sum(f / s for f, s in zip(fro_sq, spec_sq))
        init_sum = sum(
            float(np.sum((W - W0) ** 2)) / s
            for W, W0, s in zip(Ws, W0s, spec_sq)
        )
        g2n = margin_gamma * margin_gamma * n
        values["SPEC_ORIG_MAIN"] = prod_spec * orig_sum / g2n
        values["SPEC_INIT_MAIN"] = prod_spec * init_sum / g2n
    return values, residuals


def path_norm(spec: NetSpec, ckpt: Checkpoint, n: int) -> float:
    """sqrt(sum of logits / n) for the squared-weight pass on the all-ones input.

    Normalization layers are bypassed; the pass runs the plain ReLU chain.
    """
    plain = NetSpec(spec.layer_dims, spec.activation, normalize_hidden=False,
                    frozen_readout=spec.frozen_readout,
                    bias_enabled=spec.bias_enabled)
    weights = [W * W for W in ckpt.weights]
    biases = [b * b for b in ckpt.biases] if ckpt.biases else []
    ones = np.ones((1, spec.layer_dims[0]))
    logits = forward_batch(plain, weights, biases, ones)[0]
    total = float(logits.sum())
    assert total >= 0.0, "squared-weight pass produced a negative logit sum"
    return float(np.sqrt(total / n))


def vc_params_proxy(spec: NetSpec, n: int) -> float:
    """Parameter-count surrogate sqrt(sum_i c_{i-1} (c_i + 1) / n); spec-only."""
    dims = spec.layer_dims
    total = sum(dims[i] * (dims[i + 1] + 1) for i in range(spec.num_layers))
    return float(np.sqrt(total / n))


def _perturbed_accuracy(spec, ckpt, X, y, w, noise):
    ck = unflatten_params(spec, w + noise, ckpt)
    logits = forward_batch(spec, ck.weights, ck.biases, X)
    return float((logits.argmax(axis=1) == y).mean())


def sigma_search(spec: NetSpec, ckpt: Checkpoint, dataset, cfg: MeasureConfig,
                 magnitude_aware: bool = False) -> SigmaSearchResult:
    """Largest radius whose mean train-accuracy drop stays within the target.

    Plain mode perturbs w with N(0, sigma^2 I); the magnitude-aware mode scales
    coordinate i by sigma0*(|w_i| + kappa). The same noise draws are reused at
    every radius, so the search is deterministic given the seed.
    """
    X, y = dataset.features, dataset.labels
    w = flatten_params(spec, ckpt.weights, ckpt.biases)
    logits = forward_batch(spec, ckpt.weights, ckpt.biases, X)
    acc0 = float((logits.argmax(axis=1) == y).mean())
    stream = Rng(cfg.seed).spawn_key("sigma-mag" if magnitude_aware else "sigma")
    draws = [stream.spawn_index(d).gaussians(w.size) for d in range(cfg.sigma_mc_draws)]
    scale = (np.abs(w) + cfg.kappa) if magnitude_aware else 1.0

    def drop(radius: float) -> float:
        accs = [
            _perturbed_accuracy(spec, ckpt, X, y, w, radius * scale * xi)
            for xi in draws
        ]
        return acc0 - float(np.mean(accs))

    target = cfg.sigma_target_dev
    hi_drop = drop(cfg.sigma_hi)
    if hi_drop <= target:
        return SigmaSearchResult(cfg.sigma_hi, target, cfg.sigma_mc_draws, 0, True,
                                 hi_drop, magnitude_aware)
    lo, lo_drop = cfg.sigma_lo, drop(cfg.sigma_lo)
    if lo_drop > target:
        raise SigmaSearchFailed(
            f"accuracy drop {lo_drop:.3f} at radius {cfg.sigma_lo} exceeds {target}"
        )
    hi = cfg.sigma_hi
    for _ in range(cfg.sigma_iters):
        mid = float(np.sqrt(lo * hi))
        d = drop(mid)
        if d <= target:
            lo, lo_drop = mid, d
        else:
            hi = mid
    converged = abs(lo_drop - target) <= 0.2 * target
    return SigmaSearchResult(lo, target, cfg.sigma_mc_draws, cfg.sigma_iters,
                             converged, lo_drop, magnitude_aware)


def pacbayes_measures(w: np.ndarray, w0: np.ndarray, n: int, sigma=None,
                      sigma0=None, delta: float = 0.05, kappa: float = 1e-3) -> dict:
    """PAC-Bayes proxies from posterior radii; only the radii supplied are used."""
    out = {}
    log_term = np.log(n / delta) + 10.0
    if sigma is not None:
        q = 4.0 * sigma * sigma
        out["PACBAYES_ORIG"] = float(np.sqrt((w @ w) / q + log_term) / np.sqrt(n))
        d = w - w0
        out["PACBAYES_INIT"] = float(np.sqrt((d @ d) / q + log_term) / np.sqrt(n))
        out["PACBAYES_FLATNESS"] = float(1.0 / (sigma * np.sqrt(n)))
    if sigma0 is not None:
        denom = 4.0 * (sigma0 * (np.abs(w) + kappa)) ** 2
        out["PACBAYES_MAG_ORIG"] = float(
            np.sqrt(np.sum(w * w / denom) + log_term) / np.sqrt(n))
        d = w - w0
        out["PACBAYES_MAG_INIT"] = float(
            np.sqrt(np.sum(d * d / denom) + log_term) / np.sqrt(n))
        out["PACBAYES_MAG_FLATNESS"] = float(1.0 / (sigma0 * np.sqrt(n)))
    return out


def compute_all(spec: NetSpec, ckpt: Checkpoint, dataset, cfg: MeasureConfig = None,
                include=()) -> MeasureSet:
    """Attempt every measure; per-measure failures are tagged, never fatal."""
    cfg = cfg or MeasureConfig()
    wanted = set(include or MEASURE_NAMES)
    ms = MeasureSet()
    n = dataset.n

    gamma = None
    try:
        stats = margins(spec, ckpt, dataset.features, dataset.labels,
                        cfg.margin_percentile, dataset.num_classes)
        gamma = stats.margin_gamma
        ms.diagnostics["margin_gamma"] = gamma
    except Exception as exc:
        for name in _MARGIN_MEASURES & wanted:
            ms.errors[name] = type(exc).__name__

    if "PARAMS" in wanted:
        ms.record("PARAMS", vc_params_proxy(spec, n))

    fro = frobenius_measures(spec, ckpt, n)
    for name in ("FRO_DIST", "PARAM_NORM", "SUM_OF_FRO", "PROD_OF_FRO"):
        if name in wanted:
            ms.record(name, fro[name])

    if wanted & {"SUM_OF_SPEC", "PROD_OF_SPEC", "DIST_SPEC_INIT", "FRO_OVER_SPEC",
                 "SPEC_ORIG_MAIN", "SPEC_INIT_MAIN", "SUM_OF_SPEC_OVER_MARGIN",
                 "PROD_OF_SPEC_OVER_MARGIN"}:
        try:
            spec_vals, residuals = spectral_measures(
                spec, ckpt, n, gamma if (gamma is not None and gamma > 0) else None,
                cfg.spectral_tol, cfg.spectral_max_iters)
            ms.diagnostics["spectral_residuals"] = residuals
            for name, value in spec_vals.items():
                if name in wanted:
                    ms.record(name, value)
        except DegenerateLayer:
            for name in ("SUM_OF_SPEC", "PROD_OF_SPEC", "DIST_SPEC_INIT",
                         "FRO_OVER_SPEC", "SPEC_ORIG_MAIN", "SPEC_INIT_MAIN",
                         "SUM_OF_SPEC_OVER_MARGIN", "PROD_OF_SPEC_OVER_MARGIN"):
                if name in wanted:
                    ms.errors[name] = "DegenerateLayer"
            spec_vals = {}
    else:
        spec_vals = {}

    if wanted & {"PATH_NORM", "PATH_NORM_OVER_MARGIN"}:
        pn = path_norm(spec, ckpt, n)
        if "PATH_NORM" in wanted:
            ms.record("PATH_NORM", pn)
    else:
        pn = None

    if gamma is not None and gamma > 0:
        if "INVERSE_MARGIN" in wanted:
            ms.record("INVERSE_MARGIN", inverse_margin(gamma, n))
        base_over_margin = {
            "SUM_OF_FRO_OVER_MARGIN": fro["SUM_OF_FRO"],
            "PROD_OF_FRO_OVER_MARGIN": fro["PROD_OF_FRO"],
            "SUM_OF_SPEC_OVER_MARGIN": spec_vals.get("SUM_OF_SPEC"),
            "PROD_OF_SPEC_OVER_MARGIN": spec_vals.get("PROD_OF_SPEC"),
            "PATH_NORM_OVER_MARGIN": pn,
        }
        for name, base in base_over_margin.items():
            if name in wanted and base is not None:
                ms.record(name, base / gamma)
    elif gamma is not None:
        for name in _MARGIN_MEASURES & wanted:
            ms.errors[name] = "MarginNotPositive"

    w = flatten_params(spec, ckpt.weights, ckpt.biases)
    w0 = flatten_params(spec, ckpt.init_weights, ckpt.init_biases)
    sigma = sigma0 = None
    if wanted & _SIGMA_MEASURES:
        try:
            res = sigma_search(spec, ckpt, dataset, cfg, magnitude_aware=False)
            sigma = res.sigma
            ms.diagnostics["sigma"] = res.sigma
            ms.diagnostics["sigma_converged"] = res.converged
        except SigmaSearchFailed:
            for name in _SIGMA_MEASURES & wanted:
                ms.errors[name] = "SigmaSearchFailed"
    if wanted & _SIGMA0_MEASURES:
        try:
            res0 = sigma_search(spec, ckpt, dataset, cfg, magnitude_aware=True)
            sigma0 = res0.sigma
            ms.diagnostics["sigma0"] = res0.sigma
            ms.diagnostics["sigma0_converged"] = res0.converged
        except SigmaSearchFailed:
            for name in _SIGMA0_MEASURES & wanted:
                ms.errors[name] = "SigmaSearchFailed"
    if sigma is not None or sigma0 is not None:
        for name, value in pacbayes_measures(w, w0, n, sigma, sigma0, cfg.delta,
                                             cfg.kappa).items():
            if name in wanted:
                ms.record(name, value)
    ms.diagnostics["delta"] = cfg.delta
    return ms


def compute_selected(spec: NetSpec, ckpt: Checkpoint, dataset, names,
                     cfg: MeasureConfig = None) -> dict:
    """Values for the named measures, None where a measure failed (trace snapshots)."""
    ms = compute_all(spec, ckpt, dataset, cfg, include=tuple(names))
    return {name: ms.values.get(name) for name in names}
