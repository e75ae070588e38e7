"""Command-line interface.

Exit codes: 0 success, 1 a fit or validation failure, 2 usage error. Batch
commands run items on a bounded thread pool whose size comes from
``--threads`` or the ``DEFA_THREADS`` environment variable (which wins).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from defa import fileio
from defa.camera import Pose, transform
from defa.energy import Observations, Weights
from defa.errors import DefaError, ValidationError
from defa.gradcheck import GRAD_TOL, check_terms
from defa.mesh import silhouette_vertices
from defa.metrics import ErrorRecord, ced_curve, nme_lp, nme_nf
from defa.model import assemble_shape, load_model, save_model, synth_model
from defa.solver import SolveOptions, fit_pair, fit_single
from defa.study import StudySpec, run_study
from defa.synth import generate_pair, generate_scene, profile_mask, random_shape_params, tight_bbox

logger = logging.getLogger("defa")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


@dataclass(frozen=True)
class RunConfig:
    """Settings shared by the fitting commands."""

    model_path: str | None = None
    weights: Weights = field(default_factory=Weights)
    solver: SolveOptions = field(default_factory=SolveOptions)
    markup: str = "pts68"
    out_dir: str | None = None
    threads: int = 1
    seed: int = 0

    def validate(self) -> RunConfig:
        if self.model_path is None or not Path(self.model_path).is_file():
            raise ValidationError(f"model file not found: {self.model_path}", "model_path")
        if self.threads < 1:
            raise ValidationError("must be >= 1", "threads")
        return self

    @property
    def solve_options(self) -> SolveOptions:
        return replace(self.solver, weights=self.weights)


def thread_count(requested: int) -> int:
    env = os.environ.get("DEFA_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ValidationError(f"not an integer: {env!r}", "DEFA_THREADS") from None
        if n < 1:
            raise ValidationError("must be >= 1", "DEFA_THREADS")
        return n
    return max(1, requested)


def _pool_map(fn, items, threads: int):
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _stem(path) -> str:
    name = Path(path).name
    for suffix in (".csv", ".json"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return Path(path).stem


def _load_obs(markup: str, landmarks_path, contour_path=None) -> Observations:
    pts, valid, bbox = fileio.read_landmarks(landmarks_path)
    if bbox is None:
        if not valid.any():
            raise ValidationError("no valid landmarks and no bbox header", str(landmarks_path))
        bbox = tight_bbox(pts[:, valid])
    contour = fileio.read_points(contour_path) if contour_path else None
    return Observations(markup, pts, valid, contour, bbox)


def _read_truth_landmarks(path) -> np.ndarray:
    path = str(path)
    if path.endswith(".json"):
        with open(path) as fh:
            return np.asarray(json.load(fh)["landmarks"], dtype=np.float64).T
    return fileio.read_landmarks(path)[0]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth_model(args) -> int:
    model = synth_model(args.seed, args.vertices, args.n_id, args.n_exp)
    save_model(model, args.out, binary=args.binary)
    print(f"wrote {args.out}: Q={model.n_vertices}, N_id={model.n_id}, N_exp={model.n_exp}")
    return EXIT_OK


def _scene_files(out: Path, name: str, scene) -> None:
    obs = scene.observations
    fileio.write_landmarks(out / f"{name}.csv", obs.landmarks, obs.mask, obs.bbox)
    fileio.write_points(out / f"{name}.edges.csv", obs.contour_points)
    truth = {
        "m": scene.truth_m.tolist(),
        "p": scene.truth_p.tolist(),
        "pose": scene.pose.to_json(),
        "landmarks": scene.truth_landmarks.T.tolist(),
        "contour_vertex_ids": scene.contour_vertex_ids.tolist(),
        "bbox": list(obs.bbox),
        "markup": obs.markup_name,
        "noise_sigma": scene.noise_sigma,
        "seed": scene.seed,
    }
    if scene.sift_vertex_ids is not None:
        truth["sift_vertex_ids"] = scene.sift_vertex_ids.tolist()
    fileio.write_json(out / f"{name}.truth.json", truth)


def _masked(model, scene, markup: str, yaw: float, apply: bool):
    if not apply:
        return scene
    o = scene.observations
    obs = Observations(o.markup_name, o.landmarks, o.mask & profile_mask(model, markup, yaw), o.contour_points, o.bbox)
    return replace(scene, observations=obs)


def cmd_synth_scene(args) -> int:
    model = load_model(args.model)
    rng = np.random.default_rng(args.seed)
    p = random_shape_params(model, rng, args.shape_spread) if args.shape_spread > 0 else np.zeros(model.n_params)
    pose = Pose(args.scale, math.radians(args.pitch), math.radians(args.yaw), math.radians(args.roll), args.tx, args.ty)
    out = Path(args.out_dir)
    if args.pair_yaw is None:
        scene = generate_scene(model, pose, p, args.noise, args.seed, args.markup)
        _scene_files(out, args.name, _masked(model, scene, args.markup, pose.yaw, args.profile_mask))
        print(f"wrote {out / args.name}.csv")
        return EXIT_OK
    pose_i = replace(pose, yaw=math.radians(args.pair_yaw))
    si, sj, pair = generate_pair(model, pose_i, pose, p, args.n_sift, args.noise, args.seed, args.markup)
    _scene_files(out, f"{args.name}_i", si)
    _scene_files(out, f"{args.name}_j", _masked(model, sj, args.markup, pose.yaw, args.profile_mask))
    fileio.write_matches(out / f"{args.name}.matches.csv", pair)
    print(f"wrote {out / args.name}_i.csv, {out / args.name}_j.csv, {out / args.name}.matches.csv")
    return EXIT_OK


def cmd_silhouette(args) -> int:
    model = load_model(args.model)
    with open(args.params) as fh:
        params = json.load(fh)
    A = transform(np.asarray(params["m"], float), assemble_shape(model, np.asarray(params["p"], float)))
    ids = silhouette_vertices(A, model.topology).vertex_indices
    lines = ["vertex_index,x,y"] + [f"{k},{float(A[0, k])!r},{float(A[1, k])!r}" for k in ids]
    fileio.atomic_write_text(args.out, "\n".join(lines) + "\n")
    print(f"wrote {args.out}: {len(ids)} silhouette vertices")
    return EXIT_OK


def _config_from_args(args) -> RunConfig:
    weights = Weights(
        lambda_pr=args.lambda_pr, lambda_lm=args.lambda_lm, lambda_c=args.lambda_c, lambda_s=args.lambda_s
    )
    solver = SolveOptions(max_outer=args.max_outer, max_inner=args.max_inner)
    return RunConfig(
        model_path=args.model,
        weights=weights,
        solver=solver,
        markup=args.markup,
        out_dir=args.out_dir,
        threads=thread_count(args.threads),
    ).validate()


def _out_path(config: RunConfig, source, suffix: str) -> Path:
    folder = Path(config.out_dir) if config.out_dir else Path(source).parent
    return folder / f"{_stem(source)}{suffix}"


def _optional_list(values, n: int, flag: str):
    if not values:
        return [None] * n
    if len(values) != n:
        raise ValidationError(f"expected {n} files, got {len(values)}", flag)
    return values


def cmd_fit(config: RunConfig, image_obs_paths, contour_paths=None, truth_paths=None) -> int:
    """Fit every landmark file; one ``<stem>.fit.json`` per input, failures reported per file."""
    model = load_model(config.model_path)
    contour_paths = _optional_list(contour_paths, len(image_obs_paths), "--contours")
    truth_paths = _optional_list(truth_paths, len(image_obs_paths), "--truth")
    opts = config.solve_options

    def run(item):
        lm_path, c_path, t_path = item
        try:
            obs = _load_obs(config.markup, lm_path, c_path)
            res = fit_single(model, obs, None, opts)
            fileio.write_json(_out_path(config, lm_path, ".fit.json"), res.to_json())
            err = None
            if t_path:
                err = nme_lp(res.landmarks, _read_truth_landmarks(t_path), None, obs.bbox)
            return lm_path, None, err
        except (DefaError, ValueError, OSError, KeyError, np.linalg.LinAlgError) as exc:
            return lm_path, f"{type(exc).__name__}: {exc}", None

    results = _pool_map(run, list(zip(image_obs_paths, contour_paths, truth_paths)), config.threads)
    failed = 0
    errors = []
    for path, msg, err in results:
        if msg:
            failed += 1
            print(f"error: {path}: {msg}", file=sys.stderr)
        else:
            print(f"ok: {path}" + (f" nme_lp={err:.6g}" if err is not None else ""))
            if err is not None:
                errors.append(err)
    if errors:
        print(f"mean NME-lp over {len(errors)} images: {np.mean(errors):.6g}")
    print(f"{len(results) - failed}/{len(results)} fits succeeded")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_fit_pair(args) -> int:
    config = _config_from_args(args)
    model = load_model(config.model_path)
    obs_i = _load_obs(config.markup, args.landmarks_i, args.contours_i)
    obs_j = _load_obs(config.markup, args.landmarks_j, args.contours_j)
    pair = fileio.read_matches(args.matches)
    res_i, res_j = fit_pair(model, obs_i, obs_j, pair, None, config.solve_options)
    for res, src in ((res_i, args.landmarks_i), (res_j, args.landmarks_j)):
        path = _out_path(config, src, ".fit.json")
        fileio.write_json(path, res.to_json())
        print(f"wrote {path}")
    return EXIT_OK


def cmd_check_grad(config: RunConfig, seed: int, trials: int, corrupt: str | None = None) -> int:
    """Finite-difference audit of all residual Jacobians on a synthetic model."""
    if config.model_path:
        model = load_model(config.model_path)
    else:
        model = synth_model(seed, 642, 6, 3)
    worst = check_terms(model, np.random.default_rng(seed), trials, config.markup, corrupt)
    ok = True
    for tag, err in worst.items():
        passed = err <= GRAD_TOL
        ok &= passed
        print(f"{tag}: max relative error {err:.3e} {'PASS' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


def _load_pred(path) -> np.ndarray:
    path = str(path)
    if path.endswith(".json"):
        with open(path) as fh:
            return np.asarray(json.load(fh)["landmarks"], dtype=np.float64).T
    return fileio.read_landmarks(path)[0]


def cmd_eval(args) -> int:
    if len(args.pred) != len(args.gt):
        raise ValidationError(f"{len(args.pred)} predictions for {len(args.gt)} ground-truth files", "--pred")
    records = []
    for pred_path, gt_path in zip(args.pred, args.gt):
        gt, valid, bbox = fileio.read_landmarks(gt_path)
        pred = _load_pred(pred_path)
        if args.metric == "lp":
            if bbox is None:
                raise ValidationError("ground truth needs a '# bbox' header for NME-lp", str(gt_path))
            err = nme_lp(pred, gt, valid, bbox)
        else:
            err = nme_nf(pred, gt, valid)
        records.append(ErrorRecord(_stem(gt_path), err, f"nme_{args.metric}", int(valid.sum())))
    fileio.write_error_records(args.out, records)
    print(f"wrote {args.out}: mean NME-{args.metric} {np.mean([r.nme for r in records]):.6g} over {len(records)} images")
    if args.ced:
        curve = ced_curve([r.nme for r in records], _thresholds(args))
        fileio.write_ced(args.ced, curve)
        print(f"wrote {args.ced}")
    return EXIT_OK


def _thresholds(args) -> np.ndarray:
    return np.linspace(0.0, args.max_threshold, args.steps)


def cmd_ced(args) -> int:
    records = fileio.read_error_records(args.errors)
    curve = ced_curve([r.nme for r in records], _thresholds(args))
    fileio.write_ced(args.out, curve)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_study(args) -> int:
    spec = StudySpec.from_json(args.spec)
    report = run_study(spec, args.out_dir, workers=thread_count(args.threads))
    print(f"wrote {report.csv_path} and {report.summary_path}")
    for c in report.comparisons:
        print(f"{c.arm} vs {c.baseline} noise={c.noise:g} {c.metric}: {c.wins}/{c.total} = {c.rate:.2f}")
    for key, ok in report.criteria_passed.items():
        print(f"{key}: {'PASS' if ok else 'FAIL'}")
    failures = sum(1 for c in report.cells if c.error)
    if failures:
        print(f"{failures} cells failed; see {report.csv_path}", file=sys.stderr)
    return EXIT_OK if all(report.criteria_passed.values()) else EXIT_FAIL


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _fit_flags(p: argparse.ArgumentParser) -> None:
    w = Weights()
    s = SolveOptions()
    p.add_argument("--model", required=True)
    p.add_argument("--markup", default="pts68")
    p.add_argument("--lambda-pr", type=float, default=w.lambda_pr)
    p.add_argument("--lambda-lm", type=float, default=w.lambda_lm)
    p.add_argument("--lambda-c", type=float, default=w.lambda_c)
    p.add_argument("--lambda-s", type=float, default=w.lambda_s)
    p.add_argument("--max-outer", type=_positive_int, default=s.max_outer)
    p.add_argument("--max-inner", type=_positive_int, default=s.max_inner)
    p.add_argument("--out-dir", help="output folder (default: next to each input)")
    p.add_argument("--threads", type=_positive_int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="defa", description="Landmark and contour driven 3D face model fitting.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-model", help="write a synthetic morphable model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vertices", type=int, default=642)
    p.add_argument("--n-id", type=int, default=6)
    p.add_argument("--n-exp", type=int, default=3)
    p.add_argument("--binary", action="store_true", help="base64 float blocks instead of number lists")
    p.add_argument("--out", required=True)

    p = sub.add_parser("synth-scene", help="project a random face and write its observations")
    p.add_argument("--model", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--yaw", type=float, default=0.0, help="degrees")
    p.add_argument("--pitch", type=float, default=0.0, help="degrees")
    p.add_argument("--roll", type=float, default=0.0, help="degrees")
    p.add_argument("--scale", type=float, default=100.0)
    p.add_argument("--tx", type=float, default=128.0)
    p.add_argument("--ty", type=float, default=128.0)
    p.add_argument("--noise", type=float, default=0.0, help="pixel std of landmark and contour noise")
    p.add_argument("--shape-spread", type=float, default=0.08)
    p.add_argument("--markup", default="pts68")
    p.add_argument("--profile-mask", action="store_true", help="keep only near-side landmarks")
    p.add_argument("--pair-yaw", type=float, help="also render a second view at this yaw (degrees)")
    p.add_argument("--n-sift", type=int, default=30)
    p.add_argument("--out-dir", default=".")
    p.add_argument("--name", default="scene")

    p = sub.add_parser("silhouette", help="silhouette vertices of a posed model")
    p.add_argument("--model", required=True)
    p.add_argument("--params", required=True, help="JSON with 'm' and 'p' (fit or truth file)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("fit", help="fit the model to landmark files")
    _fit_flags(p)
    p.add_argument("--landmarks", nargs="+", required=True)
    p.add_argument("--contours", nargs="+")
    p.add_argument("--truth", nargs="+", help="truth JSON or landmark CSV per input, for NME")

    p = sub.add_parser("fit-pair", help="jointly fit two views coupled by keypoint matches")
    _fit_flags(p)
    p.add_argument("--landmarks-i", required=True)
    p.add_argument("--landmarks-j", required=True)
    p.add_argument("--matches", required=True)
    p.add_argument("--contours-i")
    p.add_argument("--contours-j")

    p = sub.add_parser("check-grad", help="finite-difference check of the analytic Jacobians")
    p.add_argument("--model")
    p.add_argument("--markup", default="pts68")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", choices=["PC", "LFC", "CFC", "SPC"], help=argparse.SUPPRESS)

    for name, help_text in (("eval", "per-image NME from predictions"), ("ced", "CED curve from an errors CSV")):
        p = sub.add_parser(name, help=help_text)
        if name == "eval":
            p.add_argument("--pred", nargs="+", required=True, help="landmark CSVs or fit JSONs")
            p.add_argument("--gt", nargs="+", required=True, help="ground-truth landmark CSVs")
            p.add_argument("--metric", choices=["lp", "nf"], default="lp")
            p.add_argument("--out", required=True)
            p.add_argument("--ced", help="also write a CED CSV here")
        else:
            p.add_argument("--errors", required=True)
            p.add_argument("--out", required=True)
        p.add_argument("--max-threshold", type=float, default=0.1)
        p.add_argument("--steps", type=_positive_int, default=101)

    p = sub.add_parser("study", help="run a constraint on/off study from a JSON spec")
    p.add_argument("--spec", required=True)
    p.add_argument("--out-dir", default="studies")
    p.add_argument("--threads", type=_positive_int, default=1)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "check-grad":
            if args.trials < 1:
                parser.error("--trials must be >= 1")
            config = RunConfig(model_path=args.model, markup=args.markup, seed=args.seed)
            if args.model:
                config.validate()
            return cmd_check_grad(config, args.seed, args.trials, args.corrupt)
        if args.command == "fit":
            return cmd_fit(_config_from_args(args), args.landmarks, args.contours, args.truth)
        handlers = {
            "synth-model": cmd_synth_model,
            "synth-scene": cmd_synth_scene,
            "silhouette": cmd_silhouette,
            "fit-pair": cmd_fit_pair,
            "eval": cmd_eval,
            "ced": cmd_ced,
            "study": cmd_study,
        }
        return handlers[args.command](args)
    except (DefaError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
