"""Which labels matter: exact label-flip influence and its fast surrogates.

The exact influence of a unit (a pixel, or any set of pixels) is measured
by complementing its bag labels, re-fitting the model warm-started from
the baseline solution, and taking the squared distance between the two
target signatures. That is faithful but costs one model fit per unit, so
this module also exposes the two cheap stand-ins an analyst can compute
from a single fit: the target proportion of each pixel and its
reconstruction residual. Rank agreement between the exact sweep and the
stand-ins is scored with Spearman correlation.

`mislabel_recovery` simulates the full review loop: corrupt a fraction of
the negative labels, fit on the corrupted labels, use the surrogates to
pick which labels to review, fix the wrong ones found, refit, and score
how much of the damage each selection strategy undid.
"""

from __future__ import annotations

import io as _io
import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from scipy import stats

from .core import Bag, BagSet, EndmemberSet, HsiCube
from .em import EfumiConfig, EfumiResult, run_efumi
from .rng import Rng
from .unmix import residuals, unmix_all

PT_TOL = 1e-8

# The review simulation scores label selections against the corrupted
# fit, not the clean one: the analyst it models only ever sees the
# corrupted result. Serialized reports carry this note.
SURROGATE_SOURCE_NOTE = "surrogates computed from the erroneous run"

_STRATEGIES = ("rand", "pt", "re")


@dataclass(frozen=True)
class InfluenceRecord:
    """Influence scores for one unit.

    ``exact`` is the squared shift of the target signature under a label
    flip, or None when only surrogates were computed. ``surrogate_pt`` is
    the unit's largest target proportion, ``surrogate_re`` its largest
    reconstruction residual. Region-level aggregates (``max_pt``,
    ``sum_pt``, ``max_re``, ``sum_re``) ride along in ``metrics``.
    """

    unit_id: int
    exact: Optional[float]
    surrogate_pt: float
    surrogate_re: float
    metrics: Optional[dict] = None

    def __post_init__(self):
        if self.exact is not None:
            exact = float(self.exact)
            if not exact >= 0.0:
                raise ValueError("exact influence must be >= 0")
            object.__setattr__(self, "exact", exact)
        pt = float(self.surrogate_pt)
        if not -PT_TOL <= pt <= 1.0 + PT_TOL:
            raise ValueError(f"surrogate_pt {pt!r} outside [0, 1]")
        object.__setattr__(self, "surrogate_pt", min(max(pt, 0.0), 1.0))
        re_ = float(self.surrogate_re)
        if not re_ >= 0.0:
            raise ValueError("surrogate_re must be >= 0")
        object.__setattr__(self, "surrogate_re", re_)


@dataclass(frozen=True)
class DoIReport:
    """Outcome of one label-review strategy in the recovery simulation.

    ``doi`` (degree of improvement) compares the refit target signature
    against the clean-label and corrupted-label ones: 1 means the strategy
    fully undid the corruption, 0 means no improvement, negative means it
    made things worse.
    """

    strategy: str
    doi: float
    e_true: np.ndarray
    e_err: np.ndarray
    e_strategy: np.ndarray
    alpha: float
    beta_frac: float

    def __post_init__(self):
        if self.strategy not in _STRATEGIES:
            raise ValueError(f"strategy must be one of {_STRATEGIES}")
        vecs = []
        for name in ("e_true", "e_err", "e_strategy"):
            v = np.ascontiguousarray(np.asarray(getattr(self, name), dtype=np.float64))
            if v.ndim != 1:
                raise ValueError(f"{name} must be a vector")
            v.setflags(write=False)
            object.__setattr__(self, name, v)
            vecs.append(v)
        if not (vecs[0].shape == vecs[1].shape == vecs[2].shape):
            raise ValueError("endmember vectors must share one length")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must be in (0, 1)")
        if not 0.0 < self.beta_frac <= 1.0:
            raise ValueError("beta_frac must be in (0, 1]")
        object.__setattr__(self, "doi", float(self.doi))


def influence_norm(e_base: np.ndarray, e_flipped: np.ndarray) -> float:
    """Squared Euclidean distance between two signatures."""
    a = np.asarray(e_base, dtype=np.float64)
    b = np.asarray(e_flipped, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return float(d @ d)


def _fresh_bag_id(taken: set, base: str) -> str:
    if base not in taken:
        return base
    n = 2
    while f"{base}-{n}" in taken:
        n += 1
    return f"{base}-{n}"


def flip_labels(bags: BagSet, unit: Iterable[int]) -> BagSet:
    """Complement the bag label of every pixel in ``unit``.

    Flipped pixels leave their bags and regroup into at most two fresh
    bags (one per destination label); all other memberships are
    untouched. Bags emptied by the move are dropped.
    """
    pixels = np.unique(np.asarray(list(unit), dtype=np.intp))
    if pixels.size == 0:
        return bags
    labels = bags.label_map()
    missing = [int(p) for p in pixels if int(p) not in labels]
    if missing:
        raise ValueError(f"pixel {missing[0]} is not in any bag")
    kept = []
    for bag in bags.bags:
        stays = ~np.isin(bag.pixels, pixels)
        if stays.all():
            kept.append(bag)
        elif stays.any():
            kept.append(Bag(bag.bag_id, bag.label, bag.pixels[stays]))
    taken = {b.bag_id for b in kept}
    for new_label, base in ((1, "flip-pos"), (0, "flip-neg")):
        group = [int(p) for p in pixels if labels[int(p)] != new_label]
        if group:
            bag_id = _fresh_bag_id(taken, base)
            taken.add(bag_id)
            kept.append(Bag(bag_id, new_label, tuple(group)))
    return BagSet(tuple(kept))


def _endmembers_of(baseline: Union[EfumiResult, EndmemberSet]) -> EndmemberSet:
    if isinstance(baseline, EfumiResult):
        return baseline.endmembers
    if isinstance(baseline, EndmemberSet):
        return baseline
    raise TypeError("baseline must be an EfumiResult or EndmemberSet")


def surrogates(cube: HsiCube, baseline: Union[EfumiResult, EndmemberSet]) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel (target proportion, reconstruction residual) from one unmix."""
    ems = _endmembers_of(baseline)
    props = unmix_all(cube, ems)
    pt = np.ascontiguousarray(props.target_column)
    re_ = residuals(cube.data, ems.matrix, props.values)
    return pt, re_


def surrogate_pt(cube: HsiCube, baseline: Union[EfumiResult, EndmemberSet]) -> np.ndarray:
    """Target proportion of every pixel under the baseline signatures."""
    return surrogates(cube, baseline)[0]


def surrogate_re(cube: HsiCube, baseline: Union[EfumiResult, EndmemberSet]) -> np.ndarray:
    """Reconstruction residual of every pixel under the baseline signatures."""
    return surrogates(cube, baseline)[1]


def _sweep_one(cube, bags, baseline, config, pixels, unit_id, pt, re_, cold_start):
    if pixels.size == 0:
        return InfluenceRecord(unit_id=unit_id, exact=0.0, surrogate_pt=0.0, surrogate_re=0.0)
    flipped = flip_labels(bags, pixels)
    init = None if cold_start else (baseline.endmembers, baseline.proportions)
    rerun = run_efumi(cube, flipped, config, init=init)
    return InfluenceRecord(
        unit_id=unit_id,
        exact=influence_norm(baseline.endmembers.target, rerun.endmembers.target),
        surrogate_pt=float(pt[pixels].max()),
        surrogate_re=float(re_[pixels].max()),
    )


def exact_influence_sweep(
    cube: HsiCube,
    bags: BagSet,
    baseline: EfumiResult,
    units: Sequence[Iterable[int]],
    config: Optional[EfumiConfig] = None,
    *,
    unit_ids: Optional[Sequence[int]] = None,
    cold_start: bool = False,
    workers: int = 1,
) -> list[InfluenceRecord]:
    """Measure the exact influence of every unit by flip-and-refit.

    Each unit's labels are complemented and the model refit, by default
    warm-started from the baseline solution (``cold_start=True`` refits
    from scratch instead, for sensitivity studies). Empty units are fixed
    points of the warm start and score exactly zero without a refit.
    Units are independent, so ``workers > 1`` fans them out across a
    thread pool; records carry unit ids, making the merge order-free.

    Singleton units are identified by their pixel id, larger ones by
    position, unless ``unit_ids`` overrides both.
    """
    if config is None:
        config = baseline.config
    pixel_sets = [np.unique(np.asarray(list(u), dtype=np.intp)) for u in units]
    if unit_ids is None:
        ids = [int(p[0]) if p.size == 1 else k for k, p in enumerate(pixel_sets)]
    else:
        if len(unit_ids) != len(pixel_sets):
            raise ValueError("unit_ids must match units in length")
        ids = [int(u) for u in unit_ids]
    pt, re_ = surrogates(cube, baseline)

    def work(k: int) -> InfluenceRecord:
        return _sweep_one(cube, bags, baseline, config, pixel_sets[k], ids[k], pt, re_, cold_start)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(work, range(len(pixel_sets))))
    return [work(k) for k in range(len(pixel_sets))]


def spearman(a: Sequence[float], b: Sequence[float]) -> float:
    """Rank correlation between two score lists (average ranks on ties)."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1:
        raise ValueError("inputs must be one-dimensional")
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("need at least two observations")
    if np.unique(x).size < 2 or np.unique(y).size < 2:
        raise ValueError("zero rank variance: a constant list has no rank order")
    return float(stats.spearmanr(x, y).statistic)


def doi(e_true: np.ndarray, e_err: np.ndarray, e_k: np.ndarray) -> float:
    """How much of the gap between e_err and e_true the candidate closed.

    Ratio of squared distances: 1 when ``e_k`` equals ``e_true``, 0 when
    it is as far from the truth as ``e_err``, negative when it is worse.
    Scaling all three vectors together leaves the value unchanged.
    """
    gap = influence_norm(e_true, e_err)
    if gap == 0.0:
        raise ValueError("e_true and e_err coincide; improvement is undefined")
    return (gap - influence_norm(e_true, e_k)) / gap


def _flip_each(bags: BagSet, pixels: Iterable[int]) -> BagSet:
    """Flip pixels one at a time, one fresh singleton bag per pixel."""
    out = bags
    for p in sorted(int(q) for q in pixels):
        out = flip_labels(out, [p])
    return out


def mislabel_recovery(
    cube: HsiCube,
    bags: BagSet,
    config: EfumiConfig,
    alpha: float,
    beta_frac: float,
    rng: Union[Rng, int],
) -> tuple[DoIReport, DoIReport, DoIReport]:
    """Corrupt labels, then score three label-review strategies.

    A fraction ``alpha`` of the negative-bag pixels is flipped to
    positive (each in its own singleton bag). The model is fit on the
    corrupted labels, and surrogates from that corrupted fit drive the
    review: each strategy picks ``beta_frac`` of the labeled pixels —
    uniformly at random, by largest target proportion, or by largest
    residual — and any corrupted labels among its picks are restored.
    The model is refit per strategy from a fresh data-driven init, and
    each refit is scored against the clean-label fit.

    Returns the (rand, pt, re) reports in that order.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    if not 0.0 < beta_frac <= 1.0:
        raise ValueError("beta_frac must be in (0, 1]")
    if isinstance(rng, int):
        rng = Rng(rng)
    negatives = bags.negative_pixels()
    n_flip = int(round(alpha * negatives.size))
    if n_flip == 0:
        raise ValueError(
            f"alpha={alpha} flips zero of the {negatives.size} negative pixels"
        )

    res_true = run_efumi(cube, bags, config)
    flipped = rng.child("flips").generator.choice(negatives, size=n_flip, replace=False)
    flipped_set = set(int(p) for p in flipped)
    bags_err = _flip_each(bags, flipped)
    res_err = run_efumi(cube, bags_err, config)

    # The review scores come from the corrupted fit's own estimates, not
    # a fresh label-blind unmix: the stored proportions are exactly zero
    # on target for negative-labeled pixels, which is what lets the
    # review concentrate on the positively-labeled ones.
    pool_ids = bags.pixel_ids
    n_sel = int(round(beta_frac * pool_ids.size))
    pt = res_err.proportions.target_column
    re_ = residuals(cube.data, res_err.endmembers.matrix, res_err.proportions.values)

    def top_by(scores: np.ndarray) -> np.ndarray:
        order = np.lexsort((pool_ids, -scores[pool_ids]))
        return pool_ids[order[:n_sel]]

    selections = {
        "rand": rng.child("review").generator.choice(pool_ids, size=n_sel, replace=False),
        "pt": top_by(pt),
        "re": top_by(re_),
    }
    reports = []
    for strategy in _STRATEGIES:
        corrected = flipped_set.intersection(int(p) for p in selections[strategy])
        still_wrong = sorted(flipped_set - corrected)
        bags_k = _flip_each(bags, still_wrong)
        res_k = run_efumi(cube, bags_k, config)
        reports.append(
            DoIReport(
                strategy=strategy,
                doi=doi(res_true.endmembers.target, res_err.endmembers.target, res_k.endmembers.target),
                e_true=res_true.endmembers.target,
                e_err=res_err.endmembers.target,
                e_strategy=res_k.endmembers.target,
                alpha=alpha,
                beta_frac=beta_frac,
            )
        )
    return tuple(reports)


def _score(record: InfluenceRecord, by: str) -> float:
    if by == "pt":
        return record.surrogate_pt
    if by == "re":
        return record.surrogate_re
    if by in ("max_pt", "sum_pt", "max_re", "sum_re"):
        if record.metrics is None or by not in record.metrics:
            raise ValueError(f"record {record.unit_id} has no {by!r} metric")
        return float(record.metrics[by])
    raise ValueError(f"unknown ranking key {by!r}")


def rank_units(records: Sequence[InfluenceRecord], by: str) -> list[int]:
    """Unit ids sorted by a score, best first; ties go to the smaller id."""
    return [
        r.unit_id for r in sorted(records, key=lambda r: (-_score(r, by), r.unit_id))
    ]


def _cell(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


def records_to_csv(records: Sequence[InfluenceRecord]) -> str:
    """Render records as ``unit_id,exact,pt,re`` CSV (exact blank if absent)."""
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["unit_id", "exact", "pt", "re"])
    for r in records:
        writer.writerow([r.unit_id, _cell(r.exact), _cell(r.surrogate_pt), _cell(r.surrogate_re)])
    return buf.getvalue()


def records_to_json(records: Sequence[InfluenceRecord]) -> str:
    rows = []
    for r in records:
        row = {"unit_id": r.unit_id, "exact": r.exact, "pt": r.surrogate_pt, "re": r.surrogate_re}
        if r.metrics is not None:
            row["metrics"] = {k: float(v) for k, v in sorted(r.metrics.items())}
        rows.append(row)
    return json.dumps({"records": rows}, sort_keys=True, separators=(",", ":"))


def reports_to_json(reports: Sequence[DoIReport]) -> str:
    rows = [
        {
            "strategy": r.strategy,
            "doi": r.doi,
            "alpha": r.alpha,
            "beta_frac": r.beta_frac,
            "e_true": r.e_true.tolist(),
            "e_err": r.e_err.tolist(),
            "e_strategy": r.e_strategy.tolist(),
        }
        for r in reports
    ]
    payload = {"interpretation": SURROGATE_SOURCE_NOTE, "reports": rows}
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


LOG_FLOOR = 1e-300


def emit_scatter(records: Sequence[InfluenceRecord], by: str) -> str:
    """(log10 influence, surrogate) pairs for rank-agreement scatter plots.

    ``by`` is one of ``pt``/``re`` or a region-metric key like ``sum_pt``.
    Zero influence has no log, so it is floored at ``LOG_FLOOR`` and the
    row's ``clamped`` flag is set; the output never contains NaN and
    keeps one row per record.
    """
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["log10_influence", by, "clamped"])
    for r in records:
        if r.exact is None:
            raise ValueError(f"record {r.unit_id} has no exact influence")
        clamped = r.exact < LOG_FLOOR
        writer.writerow(
            [
                repr(float(np.log10(max(r.exact, LOG_FLOOR)))),
                repr(_score(r, by)),
                int(clamped),
            ]
        )
    return buf.getvalue()
