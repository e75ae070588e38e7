"""Paired constraint on/off studies on synthetic scenes.

A study fits the same scenes under several constraint sets ("arms") and reports
per-cell errors plus paired win rates of every arm against the first one. Each
scene is drawn from its seed alone, so arms see identical data.

When any arm uses SPC, scenes are image pairs of one face: image ``i`` is a
near-frontal view with its full landmark set, image ``j`` the evaluated view.
Otherwise only image ``j`` is generated.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from defa.camera import Pose, angle_error, compose_m
from defa.energy import TAGS, Observations, Weights
from defa.errors import DefaError, ValidationError
from defa.fileio import atomic_write_text
from defa.metrics import nme_lp
from defa.model import MorphableModel, load_model, synth_model
from defa.solver import SolveOptions, fit_pair, fit_single
from defa.synth import generate_pair, generate_scene, profile_mask, random_shape_params

logger = logging.getLogger(__name__)

METRICS = ("yaw_error_deg", "nme_lp")


@dataclass(frozen=True)
class Criterion:
    """Pass rule for one comparison: ``arm`` beats the baseline on ``metric`` in at least ``min_rate`` of seeds."""

    arm: str
    metric: str
    min_rate: float


@dataclass(frozen=True)
class StudySpec:
    """Configuration of one study.

    Angles are in degrees. ``constraint_toggles`` lists the arms; the first is
    the baseline every other arm is compared with. Yaw magnitudes are drawn from
    ``yaw_range`` with a random sign.
    """

    study_name: str
    seeds: tuple[int, ...]
    constraint_toggles: tuple[frozenset, ...]
    yaw_range: tuple[float, float] = (25.0, 60.0)
    pitch_range: tuple[float, float] = (-5.0, 5.0)
    roll_range: tuple[float, float] = (-5.0, 5.0)
    noise_levels: tuple[float, ...] = (1.0,)
    markup: str = "pts21"
    profile_masked: bool = True
    init_yaw_offset: float = 25.0
    init_shift_px: float = 8.0
    n_matches: int = 30
    pair_yaw_range: tuple[float, float] = (-20.0, 20.0)
    shape_spread: float = 0.08
    model_path: str | None = None
    model_seed: int = 0
    model_vertices: int = 2562
    model_n_id: int = 4
    model_n_exp: int = 2
    scale: float = 100.0
    weights: Weights = field(default_factory=Weights)
    pc_weight: float = 1.0
    criteria: tuple[Criterion, ...] = ()

    def __post_init__(self):
        if not self.study_name or "/" in self.study_name or self.study_name.startswith("."):
            raise ValidationError(f"invalid study name {self.study_name!r}", "study_name")
        if len(self.seeds) == 0:
            raise ValidationError("at least one seed is required", "seeds")
        if len(self.constraint_toggles) == 0:
            raise ValidationError("at least one constraint set is required", "constraint_toggles")
        for k, arm in enumerate(self.constraint_toggles):
            unknown = set(arm) - set(TAGS)
            if unknown:
                raise ValidationError(f"unknown constraints {sorted(unknown)}", f"constraint_toggles[{k}]")
            if "LFC" not in arm:
                raise ValidationError("every arm needs LFC", f"constraint_toggles[{k}]")
        if len(set(self.arm_names)) != len(self.arm_names):
            raise ValidationError("duplicate constraint sets", "constraint_toggles")
        if not self.noise_levels or any(not (math.isfinite(s) and s >= 0) for s in self.noise_levels):
            raise ValidationError("noise levels must be finite and >= 0", "noise_levels")
        for name in ("yaw_range", "pitch_range", "roll_range", "pair_yaw_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValidationError(f"empty range [{lo}, {hi}]", name)
        for k, c in enumerate(self.criteria):
            if c.arm not in self.arm_names:
                raise ValidationError(f"unknown arm {c.arm!r}", f"criteria[{k}].arm")
            if c.metric not in METRICS:
                raise ValidationError(f"metric must be one of {METRICS}", f"criteria[{k}].metric")

    @property
    def arm_names(self) -> list[str]:
        return [arm_name(a) for a in self.constraint_toggles]

    @property
    def paired(self) -> bool:
        return any("SPC" in a for a in self.constraint_toggles)

    @classmethod
    def from_dict(cls, d: dict) -> StudySpec:
        d = dict(d)
        try:
            d["seeds"] = tuple(int(s) for s in d["seeds"])
            d["constraint_toggles"] = tuple(frozenset(a) for a in d["constraint_toggles"])
        except KeyError as exc:
            raise ValidationError("required field missing", exc.args[0]) from None
        for name in ("yaw_range", "pitch_range", "roll_range", "pair_yaw_range", "noise_levels"):
            if name in d:
                d[name] = tuple(float(v) for v in d[name])
        if "weights" in d:
            d["weights"] = Weights(**d["weights"])
        if "criteria" in d:
            d["criteria"] = tuple(Criterion(**c) for c in d["criteria"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown fields {sorted(unknown)}", "spec")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> StudySpec:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def arm_name(toggles) -> str:
    return "+".join(t for t in TAGS if t in toggles)


@dataclass(frozen=True)
class CellResult:
    seed: int
    noise: float
    arm: str
    yaw_error_deg: float
    nme_lp: float
    converged: bool
    error: str = ""


@dataclass(frozen=True)
class Comparison:
    arm: str
    baseline: str
    noise: float
    metric: str
    wins: int
    total: int

    @property
    def rate(self) -> float:
        return self.wins / self.total if self.total else 0.0


@dataclass
class StudyReport:
    spec: StudySpec
    cells: list[CellResult]
    comparisons: list[Comparison]
    criteria_passed: dict[str, bool]
    csv_path: Path | None = None
    summary_path: Path | None = None

    def comparison(self, arm: str, metric: str, noise: float | None = None) -> Comparison:
        for c in self.comparisons:
            if c.arm == arm and c.metric == metric and (noise is None or c.noise == noise):
                return c
        raise KeyError((arm, metric, noise))


def _weights_for(spec: StudySpec, toggles) -> Weights:
    w = spec.weights
    return Weights(
        lambda_pr=spec.pc_weight if "PC" in toggles else 0.0,
        lambda_lm=w.lambda_lm,
        lambda_c=w.lambda_c if "CFC" in toggles else 0.0,
        lambda_s=w.lambda_s if "SPC" in toggles else 0.0,
    )


@dataclass(frozen=True, eq=False)
class _Scene:
    obs_j: Observations
    truth_j: np.ndarray
    yaw_j: float
    init_j: tuple
    obs_i: Observations | None = None
    init_i: tuple | None = None
    pair: object = None


def _uniform_deg(rng, lo_hi) -> float:
    return math.radians(rng.uniform(*lo_hi))


def _init(pose: Pose, yaw_offset: float, shift: float, rng, n: int):
    m = compose_m(
        Pose(
            pose.scale,
            pose.pitch,
            pose.yaw - yaw_offset,
            pose.roll,
            pose.tx + rng.uniform(-shift, shift),
            pose.ty + rng.uniform(-shift, shift),
        )
    )
    return m, np.zeros(n)


def build_scene(spec: StudySpec, model: MorphableModel, seed: int, noise: float) -> _Scene:
    """The evaluated scene for one seed; arms and noise levels share poses and shape."""
    rng = np.random.default_rng(seed)
    c = 128.0
    yaw_j = _uniform_deg(rng, spec.yaw_range) * rng.choice([-1.0, 1.0])
    pose_j = Pose(spec.scale, _uniform_deg(rng, spec.pitch_range), yaw_j, _uniform_deg(rng, spec.roll_range), c, c)
    pose_i = Pose(
        spec.scale,
        _uniform_deg(rng, spec.pitch_range),
        _uniform_deg(rng, spec.pair_yaw_range),
        _uniform_deg(rng, spec.roll_range),
        c,
        c,
    )
    p = random_shape_params(model, rng, spec.shape_spread)
    offset_i = _uniform_deg(rng, (-10.0, 10.0))
    init_rng = np.random.default_rng([seed, 1])
    n = model.n_params

    noise_rng = np.random.default_rng([seed, 2, int(round(noise * 1e6))])
    if spec.paired:
        si, sj, pair = generate_pair(model, pose_i, pose_j, p, spec.n_matches, noise, seed, spec.markup)
    else:
        sj = generate_scene(model, pose_j, p, noise, seed, spec.markup, rng=noise_rng)
        si, pair = None, None
    o = sj.observations
    mask = o.mask & profile_mask(model, spec.markup, yaw_j) if spec.profile_masked else o.mask
    obs_j = Observations(o.markup_name, o.landmarks, mask, o.contour_points, o.bbox)
    offset_j = math.copysign(math.radians(spec.init_yaw_offset), yaw_j)
    init_j = _init(pose_j, offset_j, spec.init_shift_px, init_rng, n)
    if si is None:
        return _Scene(obs_j, sj.truth_landmarks, yaw_j, init_j)
    init_i = _init(pose_i, offset_i, spec.init_shift_px, init_rng, n)
    return _Scene(obs_j, sj.truth_landmarks, yaw_j, init_j, si.observations, init_i, pair)


def _run_cell(spec: StudySpec, model, scene: _Scene, seed: int, noise: float, toggles) -> CellResult:
    name = arm_name(toggles)
    opts = SolveOptions(weights=_weights_for(spec, toggles))
    try:
        if "SPC" in toggles:
            res = fit_pair(model, scene.obs_i, scene.obs_j, scene.pair, (scene.init_i, scene.init_j), opts)[1]
        else:
            res = fit_single(model, scene.obs_j, scene.init_j, opts)
        yaw_err = math.degrees(angle_error(res.pose.yaw, scene.yaw_j))
        err = nme_lp(res.landmarks, scene.truth_j, None, scene.obs_j.bbox)
        return CellResult(seed, noise, name, yaw_err, err, res.converged)
    except (DefaError, ValueError, np.linalg.LinAlgError) as exc:
        logger.warning("seed %d, noise %g, arm %s failed: %s", seed, noise, name, exc)
        return CellResult(seed, noise, name, math.nan, math.nan, False, f"{type(exc).__name__}: {exc}")


def _compare(spec: StudySpec, cells: list[CellResult]) -> list[Comparison]:
    """Paired win counts: yaw wins on ``<=``, NME wins on strict ``<``; failed cells never win."""
    base = spec.arm_names[0]
    table = {(c.seed, c.noise, c.arm): c for c in cells}
    out = []
    for arm in spec.arm_names[1:]:
        for noise in spec.noise_levels:
            for metric in METRICS:
                wins = 0
                for seed in spec.seeds:
                    a = getattr(table[(seed, noise, arm)], metric)
                    b = getattr(table[(seed, noise, base)], metric)
                    if math.isnan(a) or math.isnan(b):
                        continue
                    wins += a <= b if metric == "yaw_error_deg" else a < b
                out.append(Comparison(arm, base, noise, metric, wins, len(spec.seeds)))
    return out


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else repr(float(v))


def _cells_csv(cells: list[CellResult]) -> str:
    lines = ["seed,noise,arm,yaw_error_deg,nme_lp,converged,error"]
    for c in cells:
        err = c.error.replace(",", ";").replace("\n", " ")
        lines.append(
            f"{c.seed},{_fmt(c.noise)},{c.arm},{_fmt(c.yaw_error_deg)},{_fmt(c.nme_lp)},{int(c.converged)},{err}"
        )
    return "\n".join(lines) + "\n"


def _summary_md(spec: StudySpec, cells, comparisons, verdicts) -> str:
    out = [f"# Study: {spec.study_name}", ""]
    out.append(
        f"{len(spec.seeds)} seeds; yaw {spec.yaw_range[0]:g} to {spec.yaw_range[1]:g} deg (either sign); "
        f"markup {spec.markup}{', profile-masked' if spec.profile_masked else ''}; "
        f"noise {', '.join(f'{s:g}' for s in spec.noise_levels)} px."
    )
    out += ["", "## Mean errors", "", "| arm | noise | mean yaw error (deg) | mean NME-lp | failures |", "|---|---|---|---|---|"]
    for arm in spec.arm_names:
        for noise in spec.noise_levels:
            sel = [c for c in cells if c.arm == arm and c.noise == noise]
            ok = [c for c in sel if not c.error]
            yaw = np.mean([c.yaw_error_deg for c in ok]) if ok else math.nan
            nme = np.mean([c.nme_lp for c in ok]) if ok else math.nan
            out.append(f"| {arm} | {noise:g} | {yaw:.4f} | {nme:.6f} | {len(sel) - len(ok)} |")
    if comparisons:
        out += ["", "## Paired win rates", "", "| arm | baseline | noise | metric | wins | rate |", "|---|---|---|---|---|---|"]
        for c in comparisons:
            out.append(f"| {c.arm} | {c.baseline} | {c.noise:g} | {c.metric} | {c.wins}/{c.total} | {c.rate:.2f} |")
    if verdicts:
        out += ["", "## Criteria", ""]
        for key, ok in verdicts.items():
            out.append(f"- {key}: {'PASS' if ok else 'FAIL'}")
    return "\n".join(out) + "\n"


def run_study(
    spec: StudySpec,
    out_dir=None,
    model: MorphableModel | None = None,
    workers: int = 1,
) -> StudyReport:
    """Run every (seed, noise, arm) cell and write ``cells.csv`` and ``summary.md``.

    Outputs go to ``out_dir/<study_name>/`` when ``out_dir`` is given. Results do
    not depend on ``workers``.
    """
    if model is None:
        if spec.model_path:
            model = load_model(spec.model_path)
        else:
            model = synth_model(spec.model_seed, spec.model_vertices, spec.model_n_id, spec.model_n_exp)

    jobs = [(seed, noise) for noise in spec.noise_levels for seed in spec.seeds]

    def run(job):
        seed, noise = job
        try:
            scene = build_scene(spec, model, seed, noise)
        except (DefaError, ValueError) as exc:
            msg = f"{type(exc).__name__}: {exc}"
            return [CellResult(seed, noise, a, math.nan, math.nan, False, msg) for a in spec.arm_names]
        return [_run_cell(spec, model, scene, seed, noise, t) for t in spec.constraint_toggles]

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            nested = list(pool.map(run, jobs))
    else:
        nested = [run(j) for j in jobs]
    cells = [c for group in nested for c in group]

    comparisons = _compare(spec, cells)
    verdicts = {}
    for c in spec.criteria:
        for noise in spec.noise_levels:
            cmp = next(x for x in comparisons if x.arm == c.arm and x.metric == c.metric and x.noise == noise)
            verdicts[f"{c.arm} {c.metric} noise={noise:g} rate>={c.min_rate:g}"] = cmp.rate >= c.min_rate

    report = StudyReport(spec, cells, comparisons, verdicts)
    if out_dir is not None:
        folder = Path(out_dir) / spec.study_name
        report.csv_path = folder / "cells.csv"
        report.summary_path = folder / "summary.md"
        atomic_write_text(report.csv_path, _cells_csv(cells))
        atomic_write_text(report.summary_path, _summary_md(spec, cells, comparisons, verdicts))
    return report
