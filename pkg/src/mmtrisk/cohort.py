"""Exams, sequences, outcome labels, JSONL I/O and the synthetic cohort.

Times are integer days; exam times count from 2000-01-01, outcome times from
the index exam. A year is exactly 365 days.
"""

import json
import zlib
from dataclasses import dataclass

import numpy as np

MODALITIES = ("FFDM", "DBT", "US")
MAMMO_MODALITIES = ("FFDM", "DBT")
LATERALITIES = ("L", "R", "BOTH")
VIEWS = ("CC", "MLO", "US_VIEW", "OTHER")
AGE_BUCKETS = ("<40", "40-49", "50-59", "60-69", ">=70", "unknown")
DENSITIES = ("A", "B", "C", "D")

HORIZON_DAYS = (120, 365, 730, 1095, 1460, 1825)
N_HORIZONS = len(HORIZON_DAYS)
YEAR_DAYS = 365


class DataError(ValueError):
    """Input records violate the data model."""


def _rng(seed, stream):
    """Independent generator for a named sub-stream of ``seed``."""
    return np.random.default_rng([int(seed) & (2**63 - 1), zlib.crc32(stream.encode())])


# ---------------------------------------------------------------------------
# data model
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RoiFeature:
    features: np.ndarray
    score: float
    image_index: int

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float64)
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)
        if feats.ndim != 1 or not np.all(np.isfinite(feats)):
            raise DataError("roi features must be a finite 1-D vector")
        if not 0.0 <= self.score <= 1.0:
            raise DataError(f"roi score {self.score} outside [0, 1]")

    def __eq__(self, other):
        return (
            isinstance(other, RoiFeature)
            and self.score == other.score
            and self.image_index == other.image_index
            and np.array_equal(self.features, other.features)
        )

    __hash__ = None


@dataclass(frozen=True)
class ExamRecord:
    exam_id: str
    patient_id: str
    modality: str
    exam_time_days: int
    laterality: str
    view: str
    age_bucket: str
    rois: tuple
    density: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "rois", tuple(self.rois))
        checks = (
            (self.modality in MODALITIES, "modality", self.modality),
            (self.laterality in LATERALITIES, "laterality", self.laterality),
            (self.view in VIEWS, "view", self.view),
            (self.age_bucket in AGE_BUCKETS, "age_bucket", self.age_bucket),
            (self.density is None or self.density in DENSITIES, "density", self.density),
        )
        for ok, name, value in checks:
            if not ok:
                raise DataError(f"exam {self.exam_id}: unknown {name} {value!r}")
        if self.exam_time_days < 0:
            raise DataError(f"exam {self.exam_id}: negative exam_time_days")
        if not self.rois:
            raise DataError(f"exam {self.exam_id}: no rois")
        widths = {r.features.shape[0] for r in self.rois}
        if len(widths) != 1:
            raise DataError(f"exam {self.exam_id}: mixed roi feature widths {sorted(widths)}")

    @property
    def feature_width(self):
        return self.rois[0].features.shape[0]


@dataclass(frozen=True)
class SequenceInput:
    """An index exam plus earlier (or same-day) exams of the same patient."""

    index_exam: ExamRecord
    priors: tuple = ()

    def __post_init__(self):
        priors = tuple(sorted(self.priors, key=lambda e: e.exam_time_days))
        object.__setattr__(self, "priors", priors)
        for p in priors:
            if p.patient_id != self.index_exam.patient_id:
                raise DataError(
                    f"prior {p.exam_id} belongs to {p.patient_id}, "
                    f"not {self.index_exam.patient_id}"
                )
            if p.exam_time_days > self.index_exam.exam_time_days:
                raise DataError(f"prior {p.exam_id} is after the index exam")

    @property
    def patient_id(self):
        return self.index_exam.patient_id

    @property
    def exams(self):
        """Priors in time order, then the index exam."""
        return self.priors + (self.index_exam,)


@dataclass(frozen=True)
class OutcomeLabel:
    event_days: int | None
    followup_days: int
    targets: tuple
    mask: tuple

    @classmethod
    def from_times(cls, event_days, followup_days):
        targets, mask = build_targets(event_days, followup_days)
        return cls(event_days, followup_days, targets, mask)


def build_targets(event_days, followup_days):
    """Cumulative per-horizon targets and censoring mask.

    Target j is 1 when the event falls on or before cut point j. A horizon is
    masked out when no event was seen and follow-up stops short of it.
    """
    if followup_days < 0:
        raise DataError("followup_days must be non-negative")
    if event_days is not None:
        if event_days < 0:
            raise DataError("event_days must be non-negative")
        if event_days > followup_days:
            raise DataError(
                f"event_days={event_days} exceeds followup_days={followup_days}"
            )
        targets = tuple(int(event_days <= cut) for cut in HORIZON_DAYS)
        return targets, (1,) * N_HORIZONS
    mask = tuple(int(followup_days >= cut) for cut in HORIZON_DAYS)
    return (0,) * N_HORIZONS, mask


@dataclass
class Dataset:
    sequences: list
    labels: list
    oracle: np.ndarray | None = None  # (n, 6) true event probabilities, synthetic data only

    def __len__(self):
        return len(self.sequences)

    def subset(self, idx):
        idx = list(idx)
        oracle = None if self.oracle is None else self.oracle[idx]
        return Dataset([self.sequences[i] for i in idx], [self.labels[i] for i in idx], oracle)


# ---------------------------------------------------------------------------
# synthetic cohort
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    n_patients: int = 2000
    seed: int = 0
    d_ffdm: int = 32
    d_dbt: int = 32
    d_us: int = 48
    signal_strength: float = 1.0
    ultrasound_fraction: float = 0.85
    prior_exam_rate: float = 0.85
    dbt_fraction: float = 0.5
    prior_us_rate: float = 0.3
    # relative weight of each latent component in the risk score
    mammo_weight: float = 1.0
    us_weight: float = 0.7
    prior_weight: float = 0.7
    feature_gain: float = 2.0
    noise_scale: float = 1.0
    baseline_spread: float = 3.0
    hazard_slope: float = 1.3
    base_hazard: float = 0.1
    global_roi: bool = False
    rois_per_image: tuple = (4, 14)

    def __post_init__(self):
        if self.n_patients <= 0:
            raise ValueError("n_patients must be positive")
        if self.signal_strength < 0:
            raise ValueError("signal_strength must be non-negative")
        for name in ("ultrasound_fraction", "prior_exam_rate", "dbt_fraction", "prior_us_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if min(self.d_ffdm, self.d_dbt, self.d_us) < 1:
            raise ValueError("feature widths must be positive")
        self.rois_per_image = tuple(self.rois_per_image)

    def widths(self):
        return {"FFDM": self.d_ffdm, "DBT": self.d_dbt, "US": self.d_us}

    def component_weights(self):
        w = np.array([self.mammo_weight, self.us_weight, self.prior_weight], dtype=float)
        return w / np.linalg.norm(w)


# cumulative baseline hazard at each horizon cut, plus one extra 7-year cut
_CUM_HAZARD = np.array([1.0, 1.3, 1.7, 2.1, 2.5, 2.9, 3.6])
_EVENT_CUTS = HORIZON_DAYS + (2555,)


def event_probabilities(risk, cfg):
    """P(event by each horizon cut | latent risk) for an array of risks."""
    rate = np.exp(cfg.hazard_slope * cfg.signal_strength * np.asarray(risk, dtype=float))
    cum = cfg.base_hazard * _CUM_HAZARD[None, :] * rate[:, None]
    return -np.expm1(-cum)


def _unit(rng, d):
    v = rng.normal(size=d)
    return v / np.linalg.norm(v)


def _age_bucket(age):
    if age is None:
        return "unknown"
    for upper, name in ((40, "<40"), (50, "40-49"), (60, "50-59"), (70, "60-69")):
        if age < upper:
            return name
    return ">=70"


def generate_cohort(cfg):
    """Synthetic patients with a known event-probability oracle.

    Each patient has three independent standard-normal components: one
    visible in mammography ROI features, one only in ultrasound ROI
    features, and one only as the change between prior and index-day
    mammograms. Their weighted sum is the latent risk (standard normal),
    which drives a discrete-time proportional hazard.

    Returns ``(sequences, labels, oracle)``; ``oracle[i, j]`` is the exact
    probability that patient ``i`` has an event by horizon ``j``.
    """
    widths = cfg.widths()
    drng = _rng(cfg.seed, "directions")
    dir_mammo = {m: _unit(drng, widths[m]) for m in MAMMO_MODALITIES}
    dir_delta = {m: _unit(drng, widths[m]) for m in MAMMO_MODALITIES}
    dir_us = _unit(drng, widths["US"])
    weights = cfg.component_weights()
    gain = cfg.feature_gain * cfg.signal_strength

    rng = _rng(cfg.seed, "data")
    sequences, labels, risks = [], [], []
    for i in range(cfg.n_patients):
        pid = f"P{i:06d}"
        comps = rng.normal(size=3)
        risk = float(weights @ comps)
        baseline = rng.normal() * cfg.baseline_spread * cfg.feature_gain
        age = rng.normal(58.0, 12.0)
        age = None if rng.random() < 0.05 else float(np.clip(age, 30.0, 95.0))
        density = DENSITIES[rng.choice(4, p=[0.08, 0.38, 0.45, 0.09])]
        index_time = int(rng.integers(3650, 7300))

        visits = [(index_time, True)]
        if rng.random() < cfg.prior_exam_rate:
            for v in range(1, int(rng.integers(1, 4)) + 1):
                visits.append((index_time - YEAR_DAYS * v + int(rng.integers(-45, 46)), False))

        exams = []
        for t, is_index in visits:
            years_before = (index_time - t) / YEAR_DAYS
            exam_age = None if age is None else age - years_before
            mods = ["FFDM"]
            if is_index:
                if rng.random() < cfg.dbt_fraction:
                    mods.append("DBT")
                if rng.random() < cfg.ultrasound_fraction:
                    mods.append("US")
            elif rng.random() < cfg.prior_us_rate:
                mods.append("US")
            for mod in mods:
                shift = np.zeros(widths[mod])
                if mod == "US":
                    shift += gain * comps[1] * dir_us
                else:
                    shift += gain * comps[0] * dir_mammo[mod]
                    delta = baseline + (gain * comps[2] if is_index else 0.0)
                    shift += delta * dir_delta[mod]
                exams.append(
                    _synth_exam(rng, cfg, pid, len(exams), mod, t, exam_age, density, shift)
                )

        index_exam = exams[0]
        sequences.append(SequenceInput(index_exam, tuple(exams[1:])))
        labels.append(_synth_outcome(rng, cfg, risk))
        risks.append(risk)

    oracle = event_probabilities(np.array(risks), cfg)[:, :N_HORIZONS]
    return sequences, labels, oracle


def _synth_exam(rng, cfg, pid, k, modality, t, age, density, shift):
    if modality == "US":
        laterality, view = ("L", "R")[int(rng.integers(2))], "US_VIEW"
    else:
        laterality = ("L", "R", "BOTH")[int(rng.choice(3, p=[0.2, 0.2, 0.6]))]
        view = ("CC", "MLO")[int(rng.integers(2))]
    lo, hi = cfg.rois_per_image
    rois = []
    for image in range(int(rng.integers(1, 3))):
        n = int(rng.integers(lo, hi + 1))
        feats = rng.normal(size=(n, shift.shape[0])) * cfg.noise_scale + shift
        scores = 1.0 / (1.0 + np.exp(-1.5 * rng.normal(size=n)))
        rois.extend(RoiFeature(f, float(s), image) for f, s in zip(feats, scores))
    if cfg.global_roi:
        g = rng.normal(size=shift.shape[0]) * cfg.noise_scale / 2.0 + shift
        rois.append(RoiFeature(g, 1.0, -1))
    return ExamRecord(
        exam_id=f"{pid}-e{k}",
        patient_id=pid,
        modality=modality,
        exam_time_days=int(t),
        laterality=laterality,
        view=view,
        age_bucket=_age_bucket(age),
        rois=tuple(rois),
        density=density,
    )


def _synth_outcome(rng, cfg, risk):
    cum = event_probabilities(np.array([risk]), cfg)[0]
    u = rng.random()
    event = None
    for j, p in enumerate(cum):
        if u < p:
            lo = 0 if j == 0 else _EVENT_CUTS[j - 1] + 1
            event = int(rng.integers(lo, _EVENT_CUTS[j] + 1))
            break
    if rng.random() < 0.7:
        censor = int(rng.integers(1825, 2921))
    else:
        censor = int(rng.integers(30, 1825))
    if event is not None and event <= censor:
        return OutcomeLabel.from_times(event, event)
    return OutcomeLabel.from_times(None, censor)


def oracle_report(dataset):
    """Oracle AUROC/AUPRC per evaluation task on the realised labels."""
    from .evalkit import TASKS, task_labels
    from .evalkit.metrics import auprc, auroc

    report = {}
    for name, task in TASKS.items():
        idx, y = task_labels(dataset.labels, task)
        scores = dataset.oracle[idx, task.horizon_index]
        entry = {"n": int(len(y)), "n_pos": int(np.sum(y))}
        if 0 < entry["n_pos"] < entry["n"]:
            entry["auroc"] = auroc(scores, y)
            entry["auprc"] = auprc(scores, y)
        else:
            entry["auroc"] = entry["auprc"] = None
        report[name] = entry
    return report


SPLIT_NAMES = ("train", "val", "test")
DEFAULT_SPLIT = (0.871, 0.039, 0.089)


def split_by_patient(dataset, fractions=DEFAULT_SPLIT, seed=0):
    """Partition into train/val/test with each patient in exactly one part.

    Fractions are renormalised to sum to one (the defaults sum to 0.999).
    """
    fractions = np.asarray(fractions, dtype=float)
    if fractions.shape != (3,) or np.any(fractions < 0) or abs(fractions.sum() - 1.0) > 0.01:
        raise ValueError(f"split fractions must be three non-negative numbers summing to 1, got {fractions.tolist()}")
    fractions = fractions / fractions.sum()
    patients = sorted({s.patient_id for s in dataset.sequences})
    order = _rng(seed, "split").permutation(len(patients))
    bounds = np.round(np.cumsum(fractions) * len(patients)).astype(int)
    part_of = {}
    for rank, pi in enumerate(order):
        part_of[patients[pi]] = int(np.searchsorted(bounds, rank, side="right"))
    parts = {name: [] for name in SPLIT_NAMES}
    for i, s in enumerate(dataset.sequences):
        parts[SPLIT_NAMES[min(part_of[s.patient_id], 2)]].append(i)
    return {name: dataset.subset(idx) for name, idx in parts.items()}


# ---------------------------------------------------------------------------
# JSONL
# ---------------------------------------------------------------------------


def _exam_to_json(exam):
    out = {
        "exam_id": exam.exam_id,
        "patient_id": exam.patient_id,
        "modality": exam.modality,
        "exam_time_days": exam.exam_time_days,
        "laterality": exam.laterality,
        "view": exam.view,
        "age_bucket": exam.age_bucket,
        "rois": [
            {"features": r.features.tolist(), "score": r.score, "image_index": r.image_index}
            for r in exam.rois
        ],
    }
    if exam.density is not None:
        out["density"] = exam.density
    return out


def record_to_json(seq, label, oracle=None):
    rec = {
        "patient_id": seq.patient_id,
        "index_exam": _exam_to_json(seq.index_exam),
        "priors": [_exam_to_json(p) for p in seq.priors],
        "outcome": {"event_days": label.event_days, "followup_days": label.followup_days},
    }
    if oracle is not None:
        rec["oracle"] = [float(x) for x in oracle]
    return rec


def save_jsonl(dataset, path):
    with open(path, "w", encoding="utf-8") as fh:
        for i, (seq, label) in enumerate(zip(dataset.sequences, dataset.labels)):
            oracle = None if dataset.oracle is None else dataset.oracle[i]
            # repr-based float formatting round-trips float64 exactly
            fh.write(json.dumps(record_to_json(seq, label, oracle), separators=(",", ":")))
            fh.write("\n")


def _need(obj, key, where):
    if not isinstance(obj, dict) or key not in obj:
        raise DataError(f"{where}: missing field {key!r}")
    return obj[key]


def _int_field(obj, key, where, optional=False):
    v = _need(obj, key, where)
    if v is None and optional:
        return None
    if isinstance(v, bool) or not isinstance(v, int):
        raise DataError(f"{where}: field {key!r} must be an integer")
    return v


def _exam_from_json(obj, where):
    rois = []
    for j, r in enumerate(_need(obj, "rois", where)):
        rw = f"{where}.rois[{j}]"
        feats = _need(r, "features", rw)
        if not isinstance(feats, list) or not all(
            isinstance(x, (int, float)) and not isinstance(x, bool) for x in feats
        ):
            raise DataError(f"{rw}: field 'features' must be a list of numbers")
        score = _need(r, "score", rw)
        if isinstance(score, bool) or not isinstance(score, (int, float)):
            raise DataError(f"{rw}: field 'score' must be a number")
        try:
            rois.append(RoiFeature(feats, float(score), _int_field(r, "image_index", rw)))
        except DataError as exc:
            raise DataError(f"{rw}: {exc}") from None
    try:
        return ExamRecord(
            exam_id=str(_need(obj, "exam_id", where)),
            patient_id=str(_need(obj, "patient_id", where)),
            modality=_need(obj, "modality", where),
            exam_time_days=_int_field(obj, "exam_time_days", where),
            laterality=_need(obj, "laterality", where),
            view=_need(obj, "view", where),
            age_bucket=_need(obj, "age_bucket", where),
            rois=tuple(rois),
            density=obj.get("density"),
        )
    except DataError as exc:
        raise DataError(f"{where}: {exc}") from None


def load_jsonl(path):
    """Read a dataset; every record is validated and priors are time-sorted."""
    sequences, labels, oracles = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"line {lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{where}: invalid JSON ({exc.msg})") from None
            index = _exam_from_json(_need(rec, "index_exam", where), f"{where}: index_exam")
            priors_raw = _need(rec, "priors", where)
            if not isinstance(priors_raw, list):
                raise DataError(f"{where}: field 'priors' must be a list")
            priors = [_exam_from_json(p, f"{where}: priors[{k}]") for k, p in enumerate(priors_raw)]
            if str(_need(rec, "patient_id", where)) != index.patient_id:
                raise DataError(f"{where}: field 'patient_id' disagrees with index_exam")
            try:
                seq = SequenceInput(index, tuple(priors))
            except DataError as exc:
                raise DataError(f"{where}: priors: {exc}") from None
            outcome = _need(rec, "outcome", where)
            try:
                label = OutcomeLabel.from_times(
                    _int_field(outcome, "event_days", f"{where}: outcome", optional=True),
                    _int_field(outcome, "followup_days", f"{where}: outcome"),
                )
            except DataError as exc:
                msg = str(exc)
                raise DataError(msg if msg.startswith(where) else f"{where}: outcome: {msg}") from None
            sequences.append(seq)
            labels.append(label)
            oracles.append(rec.get("oracle"))
    oracle = None
    if oracles and all(o is not None for o in oracles):
        oracle = np.array(oracles, dtype=np.float64)
    return Dataset(sequences, labels, oracle)
