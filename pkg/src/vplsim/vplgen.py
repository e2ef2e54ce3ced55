"""Random virtual-prototype-lens (VPL) sample generation.

Eight degradation levels are defined by tabulated ranges: four for
continuously-spatial lenses (C1..C4, blur grows from center to edge) and
four for high-uniformity lenses (H1..H4, near-constant blur).  A sample is
a 37 x 128 x 3 Zernike coefficient field (order x field-of-view x channel,
micrometres OPD) plus a 128-point target curve of geometric spot radii.

Reproducibility: every sample is a pure function of (level id, behavior,
seed).  All randomness comes from numpy's PCG64 generator; each draw is a
unit uniform u = (next_uint64 >> 11) * 2**-53 consumed in a fixed order
per order j = 1..37: (1) trend selection, (2) sign, (3) peak fraction,
(4) three chromatic jitter factors; then the radius curve draws its center
and edge values.  The sequence is frozen so serialized samples can be
regenerated bit-exactly.
"""

import json
from dataclasses import dataclass
from enum import Enum

import numpy as np

N_FOV = 128
N_ORDERS = 37
N_CHANNELS = 3

HIGH_IMPACT_ORDERS = (1, 3, 4, 6, 7, 9)
DEFAULT_FRACTION_RANGE = (0.05, 0.3)   # orders without a tabulated range
CHROMATIC_JITTER = 0.1                  # +-10% per channel
SHALLOW_DAMPING = 0.5                   # hrdl "increasing-shallow" peak factor


class TrendId(str, Enum):
    CONSTANT = "constant"
    INCREASING = "increasing"
    DECREASING = "decreasing"
    UNIMODAL_MID = "unimodal_mid"
    UNIMODAL_EDGE = "unimodal_edge"


# trend libraries: (trend, weight, peak damping)
_TREND_LIBRARY = {
    "csl": ((TrendId.INCREASING, 0.5, 1.0),
            (TrendId.UNIMODAL_MID, 0.25, 1.0),
            (TrendId.UNIMODAL_EDGE, 0.25, 1.0)),
    "hrdl": ((TrendId.CONSTANT, 0.5, 1.0),
             (TrendId.INCREASING, 0.25, SHALLOW_DAMPING),
             (TrendId.UNIMODAL_MID, 0.25, 1.0)),
}


@dataclass(frozen=True)
class LevelSpec:
    """One tabulated degradation level.

    radius_range is (min um at center FoV, max um at edge FoV).
    overall_range is (neg_bound, pos_bound) for every coefficient.
    per_order maps a Noll index to ((x-, y-), (x+, y+)): the peak-fraction
    range used for negative-signed and positive-signed draws respectively.
    """

    id: str
    radius_range: tuple
    overall_range: tuple
    per_order: dict

    def __post_init__(self):
        rmin, rmax = self.radius_range
        neg, pos = self.overall_range
        if not 0 < rmin <= rmax:
            raise ValueError(f"{self.id}: bad radius range {self.radius_range}")
        if not neg < 0 < pos:
            raise ValueError(f"{self.id}: overall range must straddle 0, got {self.overall_range}")
        for j, (nrange, prange) in self.per_order.items():
            for lo, hi in (nrange, prange):
                if not (0 <= lo <= hi <= 1):
                    raise ValueError(f"{self.id}: bad fraction range for order {j}: {(lo, hi)}")


def _spec(id_, radius, overall, *orders):
    per = {j: rng for j, rng in zip(HIGH_IMPACT_ORDERS, orders)}
    return LevelSpec(id=id_, radius_range=radius, overall_range=overall, per_order=per)


# tabulated level definitions; per order: ((x-, y-), (x+, y+))
_LEVELS = {s.id: s for s in (
    _spec("C1", (5.0, 35.0), (-0.4, 0.3),
          ((0.45, 1.0), (0.8, 1.0)), ((0.45, 1.0), (0.45, 1.0)),
          ((0.2, 0.5), (0.3, 0.5)), ((0.1, 0.5), (0.2, 0.7)),
          ((0.1, 0.35), (0.0, 0.1)), ((0.1, 0.15), (0.1, 0.15))),
    _spec("C2", (5.0, 75.0), (-0.7, 0.95),
          ((0.45, 1.0), (0.8, 1.0)), ((0.45, 1.0), (0.45, 1.0)),
          ((0.2, 0.5), (0.3, 0.5)), ((0.1, 0.5), (0.2, 0.7)),
          ((0.1, 0.35), (0.0, 0.1)), ((0.1, 0.15), (0.1, 0.15))),
    _spec("C3", (5.0, 150.0), (-3.0, 1.5),
          ((0.6, 1.0), (0.8, 1.0)), ((0.45, 1.0), (0.45, 1.0)),
          ((0.2, 0.5), (0.3, 0.5)), ((0.1, 0.25), (0.1, 0.5)),
          ((0.1, 0.2), (0.0, 0.2)), ((0.45, 0.6), (0.45, 0.6))),
    _spec("C4", (5.0, 300.0), (-6.0, 5.0),
          ((0.8, 1.0), (0.8, 1.0)), ((0.9, 1.0), (0.9, 1.0)),
          ((0.25, 0.7), (0.4, 0.7)), ((0.1, 0.15), (0.1, 0.3)),
          ((0.1, 0.15), (0.2, 0.4)), ((0.45, 0.8), (0.45, 0.8))),
    _spec("H1", (15.0, 25.0), (-0.3, 0.3),
          ((0.3, 0.8), (0.75, 0.9)), ((0.3, 0.8), (0.6, 0.8)),
          ((0.3, 0.4), (0.35, 0.55)), ((0.1, 0.3), (0.4, 0.7)),
          ((0.1, 0.2), (0.0, 0.15)), ((0.1, 0.15), (0.1, 0.15))),
    _spec("H2", (15.0, 25.0), (-0.6, 0.7),
          ((0.3, 0.8), (0.75, 0.9)), ((0.3, 0.8), (0.6, 0.8)),
          ((0.3, 0.4), (0.35, 0.55)), ((0.1, 0.3), (0.4, 0.7)),
          ((0.1, 0.2), (0.0, 0.15)), ((0.1, 0.15), (0.1, 0.15))),
    _spec("H3", (70.0, 100.0), (-2.5, 2.0),
          ((0.6, 0.8), (0.75, 0.9)), ((0.3, 0.8), (0.6, 0.8)),
          ((0.4, 0.6), (0.45, 0.65)), ((0.1, 0.25), (0.3, 0.5)),
          ((0.1, 0.15), (0.1, 0.2)), ((0.45, 0.65), (0.45, 0.6))),
    _spec("H4", (160.0, 200.0), (-6.0, 5.0),
          ((0.75, 0.8), (0.75, 0.9)), ((0.9, 1.0), (0.8, 0.9)),
          ((0.25, 0.6), (0.4, 0.75)), ((0.1, 0.25), (0.2, 0.4)),
          ((0.1, 0.15), (0.3, 0.4)), ((0.65, 0.8), (0.45, 0.6))),
)}

LEVEL_IDS = tuple(_LEVELS)


def level_spec(id_: str) -> LevelSpec:
    """Look up a tabulated level by id (C1..C4, H1..H4)."""
    try:
        return _LEVELS[id_]
    except KeyError:
        raise KeyError(f"unknown level id {id_!r}; valid ids: {', '.join(LEVEL_IDS)}") from None


def behavior_of(level_id: str) -> str:
    return "csl" if level_id.startswith("C") else "hrdl"


def level_id_for(behavior: str, level: int) -> str:
    if behavior not in ("csl", "hrdl"):
        raise ValueError(f"behavior must be 'csl' or 'hrdl', got {behavior!r}")
    if not 1 <= level <= 4:
        raise ValueError(f"base level must be 1..4, got {level}")
    return ("C" if behavior == "csl" else "H") + str(level)


@dataclass(frozen=True)
class VplSample:
    """One generated lens sample."""

    sample_id: str
    behavior: str
    level: int
    level_id: str
    seed: int
    trend_log: tuple
    radius_targets: np.ndarray      # (128,) um, shared across channels
    coefficients: np.ndarray        # (37, 128, 3) um OPD

    def __post_init__(self):
        if self.behavior not in ("csl", "hrdl"):
            raise ValueError(f"behavior must be 'csl' or 'hrdl', got {self.behavior!r}")
        if not 1 <= self.level <= 5:
            raise ValueError(f"level must be 1..5, got {self.level}")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must fit in 64 bits")
        if len(self.trend_log) != N_ORDERS:
            raise ValueError(f"trend_log must have {N_ORDERS} entries")
        c = np.asarray(self.coefficients, dtype=float)
        r = np.asarray(self.radius_targets, dtype=float)
        if c.shape != (N_ORDERS, N_FOV, N_CHANNELS):
            raise ValueError(f"coefficient field must be (37, 128, 3), got {c.shape}")
        if r.shape != (N_FOV,):
            raise ValueError(f"radius targets must be (128,), got {r.shape}")
        if not (np.all(np.isfinite(c)) and np.all(np.isfinite(r))):
            raise ValueError("sample contains non-finite values")
        object.__setattr__(self, "coefficients", c)
        object.__setattr__(self, "radius_targets", r)


def validate_sample(sample: VplSample) -> None:
    """Exhaustively check a sample against its level's tabulated ranges."""
    spec = level_spec(sample.level_id)
    neg, pos = spec.overall_range
    c = sample.coefficients
    if c.min() < neg or c.max() > pos:
        raise ValueError(
            f"{sample.sample_id}: coefficients [{c.min()}, {c.max()}] "
            f"escape overall range [{neg}, {pos}]")
    rmin, rmax = spec.radius_range
    r = sample.radius_targets
    if r.min() < rmin - 1e-12 or r.max() > rmax + 1e-12:
        raise ValueError(f"{sample.sample_id}: radius targets escape [{rmin}, {rmax}]")
    if sample.behavior == "csl":
        if np.any(np.diff(r) < -1e-12):
            raise ValueError(f"{sample.sample_id}: csl radius targets must be non-decreasing")
    else:
        if r.max() / r.min() > rmax / rmin + 1e-12:
            raise ValueError(f"{sample.sample_id}: hrdl radius ratio exceeds level ratio")


def peak_from_draws(spec: LevelSpec, j: int, positive: bool, r: float) -> float:
    """Peak value forced by explicit (sign, fraction) draws.

    r is the peak fraction; the matching overall bound scales it:
    peak = r * pos_bound for positive draws, r * neg_bound for negative.
    """
    if not 1 <= j <= N_ORDERS:
        raise ValueError(f"order out of range 1..{N_ORDERS}: {j}")
    nrange, prange = spec.per_order.get(j, (DEFAULT_FRACTION_RANGE, DEFAULT_FRACTION_RANGE))
    lo, hi = prange if positive else nrange
    if not lo <= r <= hi:
        raise ValueError(f"fraction {r} outside range {(lo, hi)} for order {j}")
    neg, pos = spec.overall_range
    return r * pos if positive else r * neg


def sample_curve_peak(spec: LevelSpec, j: int, rng) -> float:
    """Draw sign then fraction, return the signed peak for order j."""
    positive = rng.random() < 0.5
    nrange, prange = spec.per_order.get(j, (DEFAULT_FRACTION_RANGE, DEFAULT_FRACTION_RANGE))
    lo, hi = prange if positive else nrange
    r = lo + (hi - lo) * rng.random()
    return peak_from_draws(spec, j, positive, r)


def fit_fov_curve(trend: TrendId, peak: float, n: int = N_FOV) -> np.ndarray:
    """Parametric coefficient-versus-FoV curve attaining extreme value peak.

    Curves are low-order polynomials in t = i/(n-1); max |curve| = |peak|
    exactly, attained at the index the trend prescribes.
    """
    if n < 2:
        raise ValueError(f"curve needs n >= 2 points, got {n}")
    i = np.arange(n, dtype=float)
    t = i / (n - 1)
    trend = TrendId(trend)
    if trend is TrendId.CONSTANT:
        return np.full(n, float(peak))
    if trend is TrendId.INCREASING:
        return peak * t
    if trend is TrendId.DECREASING:
        return peak * (1.0 - t)
    if trend is TrendId.UNIMODAL_MID:
        prod = i * (n - 1 - i)
        return peak * prod / prod.max()
    # unimodal_edge: quadratic ramp, peak at the edge FoV
    return peak * t * t


def radius_targets(spec: LevelSpec, behavior: str, rng) -> np.ndarray:
    """Draw the 128-point geometric-radius target curve for one sample.

    Center value ~ U[min, 1.2*min], edge value ~ U[0.8*max, max], both
    clipped to the level range; csl interpolates quadratically (blur grows
    toward the edge), hrdl linearly (near-flat for the tabulated ranges).
    """
    if behavior not in ("csl", "hrdl"):
        raise ValueError(f"behavior must be 'csl' or 'hrdl', got {behavior!r}")
    rmin, rmax = spec.radius_range
    center = np.clip(rmin + (rmin * 1.2 - rmin) * rng.random(), rmin, rmax)
    edge = np.clip(rmax * 0.8 + (rmax - rmax * 0.8) * rng.random(), rmin, rmax)
    t = np.arange(N_FOV) / (N_FOV - 1)
    shape = t * t if behavior == "csl" else t
    return center + (edge - center) * shape


def _choose_trend(library, rng):
    u = rng.random()
    acc = 0.0
    for trend, weight, damping in library:
        acc += weight
        if u < acc:
            return trend, damping
    return library[-1][0], library[-1][2]


def sample_vpl(spec: LevelSpec, behavior: str, seed: int) -> VplSample:
    """Generate one sample for a level spec (pure function of its inputs)."""
    if behavior != behavior_of(spec.id):
        raise ValueError(f"behavior {behavior!r} inconsistent with level {spec.id}")
    if not 0 <= seed < 2 ** 64:
        raise ValueError("seed must fit in 64 bits")
    rng = np.random.Generator(np.random.PCG64(seed))
    library = _TREND_LIBRARY[behavior]
    coeffs = np.empty((N_ORDERS, N_FOV, N_CHANNELS))
    trends = []
    for j in range(1, N_ORDERS + 1):
        trend, damping = _choose_trend(library, rng)
        peak = sample_curve_peak(spec, j, rng) * damping
        curve = fit_fov_curve(trend, peak)
        jitter = 1.0 - CHROMATIC_JITTER + 2.0 * CHROMATIC_JITTER * rng.random(N_CHANNELS)
        coeffs[j - 1] = curve[:, None] * jitter[None, :]
        trends.append(trend.value)
    neg, pos = spec.overall_range
    np.clip(coeffs, neg, pos, out=coeffs)     # jitter may overshoot the bound
    radii = radius_targets(spec, behavior, rng)
    level = int(spec.id[1])
    return VplSample(
        sample_id=f"{spec.id}-{seed:016x}",
        behavior=behavior,
        level=level,
        level_id=spec.id,
        seed=int(seed),
        trend_log=tuple(trends),
        radius_targets=radii,
        coefficients=coeffs,
    )


def sample_level5(behavior: str, count: int, seeds) -> list:
    """Hybrid level-5 pool: samples round-robin across levels 1..4.

    Each sample records its constituent level; seeds must be unique, one
    per sample.
    """
    if count < 4:
        raise ValueError(f"level-5 pool needs count >= 4, got {count}")
    seeds = list(seeds)
    if len(seeds) != count:
        raise ValueError(f"need {count} seeds, got {len(seeds)}")
    if len(set(seeds)) != len(seeds):
        raise ValueError("duplicate seeds in level-5 pool")
    out = []
    for i, seed in enumerate(seeds):
        lid = level_id_for(behavior, (i % 4) + 1)
        out.append(sample_vpl(level_spec(lid), behavior, seed))
    return out


# ---------------------------------------------------------------------------
# serialization: JSON document, floats at 17 significant digits (bit-exact)
# ---------------------------------------------------------------------------

SCHEMA = "vpl-sample/1"


def _emit(value, indent=0):
    if isinstance(value, float):
        text = format(value, ".17g")
        # keep float typing (and the sign of -0.0) through a JSON parse
        if not any(c in text for c in ".e"):
            text += ".0"
        return text
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple, np.ndarray)):
        items = [_emit(v, indent) for v in value]
        return "[" + ", ".join(items) + "]"
    raise TypeError(f"cannot serialize {type(value)}")


def sample_to_text(sample: VplSample) -> str:
    """Serialize to the sample file format (parseable as JSON)."""
    lines = ["{"]
    fields = [
        ("schema", SCHEMA),
        ("sample_id", sample.sample_id),
        ("behavior", sample.behavior),
        ("level", sample.level),
        ("level_id", sample.level_id),
        ("seed", sample.seed),
        ("trend_log", list(sample.trend_log)),
        ("radius_targets_um", [float(v) for v in sample.radius_targets]),
    ]
    for key, val in fields:
        lines.append(f'  "{key}": {_emit(val)},')
    lines.append('  "coefficients_um": [')
    for j in range(N_ORDERS):
        rows = _emit([[float(v) for v in row] for row in sample.coefficients[j]])
        comma = "," if j < N_ORDERS - 1 else ""
        lines.append(f"    {rows}{comma}")
    lines.append("  ]")
    lines.append("}")
    return "\n".join(lines) + "\n"


def sample_from_text(text: str) -> VplSample:
    doc = json.loads(text)
    if doc.get("schema") != SCHEMA:
        raise ValueError(f"unsupported sample schema {doc.get('schema')!r}")
    return VplSample(
        sample_id=doc["sample_id"],
        behavior=doc["behavior"],
        level=int(doc["level"]),
        level_id=doc["level_id"],
        seed=int(doc["seed"]),
        trend_log=tuple(doc["trend_log"]),
        radius_targets=np.array(doc["radius_targets_um"], dtype=float),
        coefficients=np.array(doc["coefficients_um"], dtype=float),
    )


def save_sample(sample: VplSample, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(sample_to_text(sample))


def load_sample(path) -> VplSample:
    with open(path, "r", encoding="utf-8") as fh:
        return sample_from_text(fh.read())
