"""Close-error pair statistics: measure spread at matched test error.

The spread of a measure C over run pairs with |err_r - err_s| <= delta is
summarized by the median |log C_r - log C_s| (CMS); the seed-adjusted excess
(eCMS) subtracts the same-config different-seed spread from the cross-config
spread and clips at zero. Pair statistics use log ratios, so rescaling every
C by a constant cancels exactly.
"""

import csv
import io
import math
from dataclasses import dataclass, field

from .rng import Rng

UNDEFINED = None  # rendered as "Undefined" in reports


@dataclass(frozen=True)
class FragilityConfig:
    deltas: tuple = (0.01, 0.02, 0.05)
    pair_budget: int = 10000  # 0 = unlimited
    subsample_seed: int = 0

    def __post_init__(self):
        if any(d <= 0 for d in self.deltas):
            raise ValueError("deltas must be positive")
        if self.pair_budget < 0:
            raise ValueError("pair budget must be >= 0")
        object.__setattr__(self, "deltas", tuple(float(d) for d in self.deltas))


def median(values) -> float:
    """Median with the even-length convention: mean of the two middle values."""
    xs = sorted(values)
    if not xs:
        raise ValueError("median of empty list")
    k = len(xs)
    mid = k // 2
    if k % 2:
        return float(xs[mid])
    return float(0.5 * (xs[mid - 1] + xs[mid]))


def _scan_order(records):
    """Indices sorted by (test error, run id): the pair-scan traversal order."""
    return sorted(range(len(records)),
                  key=lambda i: (records[i].test_error, records[i].run_id))


def _scan_pairs(records, order, delta):
    """Close-error pairs by the sorted two-index scan, in scan order."""
    n = len(order)
    for a in range(n):
        i = order[a]
        for b in range(a + 1, n):
            j = order[b]
            if records[j].test_error - records[i].test_error > delta:
                break
            yield i, j


def close_error_pairs(records, delta):
    """All pairs (r, s), r < s by record position, with |err_r - err_s| <= delta."""
    order = _scan_order(records)
    return [(min(i, j), max(i, j)) for i, j in _scan_pairs(records, order, delta)]


def split_pairs(records, delta):
    """(seed_pairs, inter_pairs): same-config/different-seed vs different-config.

    Pairs with identical config and identical seed belong to neither class.
    """
    order = _scan_order(records)
    seed_pairs, inter_pairs = [], []
    for i, j in _scan_pairs(records, order, delta):
        pair = (min(i, j), max(i, j))
        if records[i].h_key() == records[j].h_key():
            if records[i].seed != records[j].seed:
                seed_pairs.append(pair)
        else:
            inter_pairs.append(pair)
    return seed_pairs, inter_pairs


def _log_ratio(a: float, b: float) -> float:
    # |log a - log b| realized as log(max/min): orientation-free in floats
    return math.log(a / b) if a >= b else math.log(b / a)


def _subsample(items, budget, rng):
    if budget and len(items) > budget:
        picked = rng.choose(len(items), budget)
        return [items[k] for k in picked]
    return items


def _eligible(records, measure):
    """Records carrying a positive finite value of the measure."""
    out = []
    for r in records:
        v = r.measures.get(measure)
        if v is not None and v > 0 and v == v and v != float("inf"):
            out.append(r)
    return out


def cms(records, measure, delta, pair_budget=0, rng=None):
    """Median |log C_r - log C_s| over close-error pairs, or None if no pairs."""
    rows = _eligible(records, measure)
    order = _scan_order(rows)
    spreads = [
        _log_ratio(rows[i].measures[measure], rows[j].measures[measure])
        for i, j in _scan_pairs(rows, order, delta)
    ]
    if not spreads:
        return UNDEFINED
    spreads = _subsample(spreads, pair_budget, rng or Rng(0))
    return median(spreads)


def ecms(records, measure, delta, pair_budget=0, rng_seed=None, rng_inter=None):
    """[median(inter) - median(seed)]_+ with independent subsampling budgets.

    Returns (ecms, cms_seed, cms_inter), each None when its pair set is empty.
    """
    rows = _eligible(records, measure)
    order = _scan_order(rows)
    seed_spreads, inter_spreads = [], []
    for i, j in _scan_pairs(rows, order, delta):
        v = _log_ratio(rows[i].measures[measure], rows[j].measures[measure])
        if rows[i].h_key() == rows[j].h_key():
            if rows[i].seed != rows[j].seed:
                seed_spreads.append(v)
        else:
            inter_spreads.append(v)
    cms_seed = cms_inter = value = UNDEFINED
    if seed_spreads:
        cms_seed = median(_subsample(seed_spreads, pair_budget, rng_seed or Rng(0)))
    if inter_spreads:
        cms_inter = median(_subsample(inter_spreads, pair_budget, rng_inter or Rng(1)))
    if cms_seed is not UNDEFINED and cms_inter is not UNDEFINED:
        value = max(0.0, cms_inter - cms_seed)
    return value, cms_seed, cms_inter


@dataclass
class CellScore:
    cms: float = UNDEFINED
    cms_seed: float = UNDEFINED
    cms_inter: float = UNDEFINED
    ecms: float = UNDEFINED
    n_pairs: int = 0
    n_seed_pairs: int = 0
    n_inter_pairs: int = 0
    n_runs_used: int = 0
    n_runs_excluded: int = 0


def score_group(group: str, records, measures, config: FragilityConfig) -> dict:
    """CellScore per (measure, delta) for one group's records."""
    root = Rng(config.subsample_seed)
    out = {}
    for measure in measures:
        rows = _eligible(records, measure)
        order = _scan_order(rows)
        for delta in config.deltas:
            all_spreads, seed_spreads, inter_spreads = [], [], []
            for i, j in _scan_pairs(rows, order, delta):
                v = _log_ratio(rows[i].measures[measure], rows[j].measures[measure])
                all_spreads.append(v)
                if rows[i].h_key() == rows[j].h_key():
                    if rows[i].seed != rows[j].seed:
                        seed_spreads.append(v)
                else:
                    inter_spreads.append(v)
            cell = CellScore(
                n_pairs=len(all_spreads),
                n_seed_pairs=len(seed_spreads),
                n_inter_pairs=len(inter_spreads),
                n_runs_used=len(rows),
                n_runs_excluded=len(records) - len(rows),
            )
            streams = {
                cls: root.spawn_key(f"{group}|{measure}|{delta!r}|{cls}")
                for cls in ("all", "seed", "inter")
            }
            if all_spreads:
                cell.cms = median(
                    _subsample(all_spreads, config.pair_budget, streams["all"]))
            if seed_spreads:
                cell.cms_seed = median(
                    _subsample(seed_spreads, config.pair_budget, streams["seed"]))
            if inter_spreads:
                cell.cms_inter = median(
                    _subsample(inter_spreads, config.pair_budget, streams["inter"]))
            if cell.cms_seed is not UNDEFINED and cell.cms_inter is not UNDEFINED:
                cell.ecms = max(0.0, cell.cms_inter - cell.cms_seed)
            out[(measure, delta)] = cell
    return out


@dataclass
class AggregateScore:
    cms_med: float = UNDEFINED
    ecms_med: float = UNDEFINED
    cms_coverage: float = 0.0
    ecms_coverage: float = 0.0
    per_group: dict = field(default_factory=dict)  # group -> CellScore


def aggregate_groups(group_scores: dict) -> dict:
    """Across-group medians with Undefined groups omitted; coverage fractions.

    group_scores: {group: {(measure, delta): CellScore}}.
    """
    cells = {}
    for group, scores in group_scores.items():
        for key, cell in scores.items():
            cells.setdefault(key, {})[group] = cell
    total = max(len(group_scores), 1)
    out = {}
    for key, per_group in cells.items():
        agg = AggregateScore(per_group=dict(sorted(per_group.items())))
        cms_vals = [c.cms for c in per_group.values() if c.cms is not UNDEFINED]
        ecms_vals = [c.ecms for c in per_group.values() if c.ecms is not UNDEFINED]
        if cms_vals:
            agg.cms_med = median(cms_vals)
        if ecms_vals:
            agg.ecms_med = median(ecms_vals)
        agg.cms_coverage = len(cms_vals) / total
        agg.ecms_coverage = len(ecms_vals) / total
        out[key] = agg
    return out


def score_records(records, measures, config: FragilityConfig):
    """Full scoring: group -> cells, plus across-group aggregates."""
    by_group = {}
    for r in records:
        by_group.setdefault(r.group, []).append(r)
    group_scores = {
        g: score_group(g, rows, measures, config)
        for g, rows in sorted(by_group.items())
    }
    return group_scores, aggregate_groups(group_scores)


def _fmt(x, text=False) -> str:
    if x is UNDEFINED:
        return "Undefined"
    return f"{x:.3f}" if text else repr(float(x))


def _row_order(aggregates, measures, delta):
    def key(m):
        agg = aggregates.get((m, delta))
        cms_med = agg.cms_med if agg else UNDEFINED
        return (cms_med is UNDEFINED, cms_med if cms_med is not UNDEFINED else 0.0, m)

    return sorted(measures, key=key)


def emit_table_csv(aggregates: dict, groups, measures, delta: float) -> str:
    """Long-format CSV: one cms row and one ecms row per measure (stacked)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["measure", "delta", "stat", "aggregate", "coverage"]
                    + list(groups))
    for m in _row_order(aggregates, measures, delta):
        agg = aggregates.get((m, delta)) or AggregateScore()
        for stat in ("cms", "ecms"):
            med = agg.cms_med if stat == "cms" else agg.ecms_med
            cov = agg.cms_coverage if stat == "cms" else agg.ecms_coverage
            row = [m, repr(float(delta)), stat, _fmt(med), repr(cov)]
            for g in groups:
                cell = agg.per_group.get(g)
                val = UNDEFINED if cell is None else (
                    cell.cms if stat == "cms" else cell.ecms)
                row.append(_fmt(val))
            writer.writerow(row)
    return buf.getvalue()


def emit_table_text(aggregates: dict, groups, measures, delta: float) -> str:
    """Plain-text rendering; per cell the CMS sits on top of the eCMS line."""
    cols = ["measure", "agg"] + list(groups)
    rows = []
    for m in _row_order(aggregates, measures, delta):
        agg = aggregates.get((m, delta)) or AggregateScore()
        top, bottom = [m, _fmt(agg.cms_med, text=True)], ["", _fmt(agg.ecms_med, text=True)]
        for g in groups:
            cell = agg.per_group.get(g)
            top.append(_fmt(cell.cms if cell else UNDEFINED, text=True))
            bottom.append(_fmt(cell.ecms if cell else UNDEFINED, text=True))
        rows.append((top, bottom))
    widths = [max(len(col), *(len(r[k][i]) for r in rows for k in (0, 1)))
              if rows else len(col) for i, col in enumerate(cols)]
    lines = [f"# delta = {delta}  (top: CMS, bottom: eCMS)"]
    lines.append("  ".join(c.ljust(w) for c, w in zip(cols, widths)))
    lines.append("  ".join("-" * w for w in widths))
    for top, bottom in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(top, widths)))
        lines.append("  ".join(c.ljust(w) for c, w in zip(bottom, widths)))
    return "\n".join(lines) + "\n"


def any_defined(aggregates: dict) -> bool:
    return any(
        a.cms_med is not UNDEFINED or a.ecms_med is not UNDEFINED
        for a in aggregates.values()
    )
