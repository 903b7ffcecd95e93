"""Command-line pipeline driver.

Subcommands: transform (volumes -> embeddings), model (embeddings -> fitted
direction / components), synthesize (model -> image series), validate (oracle
acceptance suite), phantom (synthetic cohorts). Configuration comes from a
strict JSON file; the flags --seed/--jobs/--out override config keys. Every
output file is listed with its content hash in a manifest, and identical
config + seed reproduce artifacts byte for byte.

Exit codes: 0 success, 1 model/statistical failure, 2 IO or config error,
3 solver non-convergence.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import lot, validation
from . import oracles as orc
from . import solver as sol
from . import stats as st
from .errors import ConfigError, GridMismatch, NonDiffeomorphicMap, TbmError
from .volume import (
    DEFAULT_FLOOR,
    DEFAULT_TARGET_MASS,
    MAGIC,
    DensityVolume,
    normalize_density,
    read_nifti1,
    read_volume,
    write_volume,
)

EXIT_OK = 0
EXIT_STATISTICAL = 1
EXIT_CONFIG = 2
EXIT_SOLVER = 3


# ---------------------------------------------------------------- config ---

_SOLVER_KEYS = {
    "lam": float, "gamma": float, "gamma_activation_fraction": float,
    "scales": int, "max_step_voxels": float, "mse_termination": float,
    "max_iters": int, "diffeo_min_det": float, "stagnation_window": int,
    "stagnation_tol": float,
}

_SCHEMA = {
    "seed": int,
    "jobs": int,
    "out": str,
    "normalize": {"target_mass": float, "floor": float},
    "solver": _SOLVER_KEYS,
    "transform": {"inputs": list, "template": (str, type(None))},
    "model": {
        "kind": str, "embeddings": list, "embeddings_dir": str,
        "covariates": str, "rank": (int, type(None)), "alpha": float,
        "trials": int,
    },
    "synthesize": {
        "template": str, "mean": str, "direction": str, "nus": list,
        "slices": list, "scale": float,
    },
    "phantom": {
        "family": str, "count": int, "dims": list, "axis": int,
        "shift_step": float, "sigma": float, "noise": float,
        "class_offset": float, "jitter": float,
    },
}


def _check_keys(data, schema, path="config"):
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must be an object")
    for key, value in data.items():
        if key not in schema:
            raise ConfigError(f"unknown key {path}.{key}")
        expected = schema[key]
        if isinstance(expected, dict):
            _check_keys(value, expected, f"{path}.{key}")
        elif expected is float:
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"{path}.{key} must be a number")
        elif expected is int:
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"{path}.{key} must be an integer")
        elif isinstance(expected, tuple):
            if not isinstance(value, expected):
                raise ConfigError(f"{path}.{key} has the wrong type")
        elif not isinstance(value, expected):
            raise ConfigError(f"{path}.{key} must be {expected.__name__}")


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    _check_keys(data, _SCHEMA)
    return data


def solver_config(cfg: dict) -> sol.SolverConfig:
    kwargs = cfg.get("solver", {})
    try:
        return sol.SolverConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad solver settings: {exc}") from exc


# -------------------------------------------------------------- manifest ---

class Manifest:
    """Single writer for every artifact a command produces."""

    def __init__(self, out_dir: Path):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self._entries = {}

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def add(self, path: Path):
        path = Path(path)
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        rel = str(path.relative_to(self.out_dir))
        self._entries[rel] = {"sha256": digest, "bytes": path.stat().st_size}

    def write(self):
        out = self.path("manifest.json")
        body = {"files": [
            {"path": k, **self._entries[k]} for k in sorted(self._entries)
        ]}
        out.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------------- IO ---

def _read_any_volume(path) -> DensityVolume:
    with open(path, "rb") as fh:
        head = fh.read(len(MAGIC))
    if head == MAGIC:
        return read_volume(path)
    return read_nifti1(path)


def _write_pgm(path: Path, plane: np.ndarray, lo: float, hi: float):
    span = hi - lo
    if span <= 0:
        span = 1.0
    scaled = np.clip((plane - lo) / span, 0.0, 1.0)
    data = np.round(scaled * 255.0).astype(np.uint8)
    header = f"P5\n{plane.shape[1]} {plane.shape[0]}\n255\n".encode()
    path.write_bytes(header + data.tobytes())


def _slice_plane(vol: DensityVolume, axis: int, index: int) -> np.ndarray:
    if vol.grid.ndim == 2:
        return vol.values
    return np.take(vol.values, index, axis=axis)


# --------------------------------------------------------------- commands ---

def _solve_one(args):
    template, subject, cfg = args
    return sol.solve(template.density, subject, cfg)


def cmd_transform(cfg: dict, manifest: Manifest, seed: int, jobs: int) -> int:
    section = cfg.get("transform", {})
    inputs = section.get("inputs", [])
    if not inputs:
        raise ConfigError("transform.inputs is empty")
    norm = cfg.get("normalize", {})
    target = norm.get("target_mass", DEFAULT_TARGET_MASS)
    floor = norm.get("floor", DEFAULT_FLOOR)
    subjects, names = [], []
    for p in inputs:
        subjects.append(normalize_density(_read_any_volume(p), target, floor))
        names.append(Path(p).stem)
    template_path = section.get("template")
    if template_path:
        template = lot.Template(
            normalize_density(_read_any_volume(template_path), target, 0.0),
            provenance=(Path(template_path).stem,))
    else:
        template = lot.build_template(subjects, target_mass=target,
                                      provenance=names)
    scfg = solver_config(cfg)

    work = [(template, s, scfg) for s in subjects]
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_solve_one, work))
    else:
        results = [_solve_one(w) for w in work]

    tpath = manifest.path("template.tbmv")
    write_volume(template.density, tpath)
    manifest.add(tpath)
    failures = []
    for name, res in zip(names, results):
        emb = lot.embedding_from_map(template, res.map)
        epath = manifest.path(f"emb_{name}.tbmv")
        lot.write_embedding(emb, epath)
        manifest.add(epath)
        cpath = manifest.path(f"trace_{name}.csv")
        res.trace.write_csv(cpath)
        manifest.add(cpath)
        if not res.converged:
            failures.append(name)
    summary = manifest.path("transform_summary.csv")
    with open(summary, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "converged", "rel_mse", "mean_curl",
                    "cost", "cost_normalized", "min_det"])
        for name, res in zip(names, results):
            w.writerow([name, int(res.converged), repr(res.rel_mse),
                        repr(res.mean_curl), repr(res.cost),
                        repr(res.cost_normalized), repr(res.min_det)])
    manifest.add(summary)
    manifest.write()
    if failures:
        print(f"transform: {len(failures)} subject(s) did not converge: "
              f"{', '.join(failures)}", file=sys.stderr)
        return EXIT_SOLVER
    print(f"transform: {len(names)} embeddings written to {manifest.out_dir}")
    return EXIT_OK


def _load_embeddings(section):
    paths = section.get("embeddings")
    if not paths:
        directory = section.get("embeddings_dir")
        if not directory:
            raise ConfigError("model needs embeddings or embeddings_dir")
        paths = sorted(str(p) for p in Path(directory).glob("emb_*.tbmv"))
    if not paths:
        raise ConfigError("no embedding files found")
    names = [Path(p).stem.removeprefix("emb_") for p in paths]
    return names, [lot.read_embedding(p) for p in paths]


def cmd_model(cfg: dict, manifest: Manifest, seed: int) -> int:
    section = cfg.get("model", {})
    kind = section.get("kind")
    if kind not in ("pca", "regress", "plda"):
        raise ConfigError("model.kind must be pca, regress, or plda")
    names, embeddings = _load_embeddings(section)
    trials = section.get("trials", 1000)
    rank = section.get("rank")

    covariate = labels = None
    if kind in ("regress", "plda"):
        cov_path = section.get("covariates")
        if not cov_path:
            raise ConfigError(f"model.kind={kind} needs model.covariates")
        ids, values, lab = st.read_covariates_csv(cov_path)
        table = dict(zip(ids, values))
        missing = [n for n in names if n not in table]
        if missing:
            raise ConfigError(f"covariates missing for: {', '.join(missing)}")
        covariate = np.array([table[n] for n in names])
        if lab is not None:
            ltable = dict(zip(ids, lab))
            labels = np.array([ltable[n] for n in names])
        if kind == "plda" and labels is None:
            raise ConfigError("plda needs a label column in the covariate CSV")

    cohort = st.cohort_from_embeddings(embeddings, covariate=covariate,
                                       labels=labels, subject_ids=names)
    grid = cohort.grid
    mean_emb = lot.LotEmbedding(grid, np.mean(
        [e.payload for e in embeddings], axis=0))
    mpath = manifest.path("mean.tbmv")
    lot.write_embedding(mean_emb, mpath)
    manifest.add(mpath)

    rows = []
    if kind == "pca":
        model = st.pca(cohort, rank)
        shares = model.variances / max(model.variances.sum(), 1e-300)
        for i in range(min(model.rank, 3)):
            comp = lot.LotEmbedding.from_vector(grid, model.components[:, i])
            cpath = manifest.path(f"pc_{i:02d}.tbmv")
            lot.write_embedding(comp, cpath)
            manifest.add(cpath)
        scores = model.components[:, 0] @ (cohort.matrix - model.mean[:, None])
        st.write_scores_csv(names, scores, manifest.path("scores.csv"))
        rows.append(("pc1_variance_share", shares[0], ""))
        summary = [f"pca: rank {model.rank}",
                   f"pc1 variance share {shares[0]:.6g}"]
    elif kind == "regress":
        res = st.correlation_direction(cohort, rank)
        p = st.permutation_test(
            cohort, lambda c: st.correlation_direction(c, rank).statistic,
            trials=trials, seed=seed)
        dpath = manifest.path("direction.tbmv")
        lot.write_embedding(lot.LotEmbedding.from_vector(grid, res.direction),
                            dpath)
        manifest.add(dpath)
        st.write_scores_csv(names, res.scores, manifest.path("scores.csv"))
        rows.append(("pearson_r", res.statistic, p))
        summary = [f"regression: pearson r {res.statistic:.6g}",
                   f"permutation p {p:.6g} ({trials} trials)"]
    else:
        alpha = section.get("alpha", 1.0)
        res = st.plda(cohort, alpha, rank)
        p = st.permutation_test(
            cohort, lambda c: st.plda(c, alpha, rank).statistic,
            trials=trials, seed=seed, permute="labels")
        dpath = manifest.path("direction.tbmv")
        lot.write_embedding(lot.LotEmbedding.from_vector(grid, res.direction),
                            dpath)
        manifest.add(dpath)
        st.write_scores_csv(names, res.scores, manifest.path("scores.csv"))
        rows.append(("class_separation", res.statistic, p))
        summary = [f"plda: separation {res.statistic:.6g} (alpha {alpha:.6g})",
                   f"label-permutation p {p:.6g} ({trials} trials)"]

    manifest.add(manifest.path("scores.csv"))
    rpath = manifest.path("results.csv")
    with open(rpath, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["statistic", "value", "p_value"])
        for name_, value, p_ in rows:
            w.writerow([name_, repr(float(value)),
                        repr(float(p_)) if p_ != "" else ""])
    manifest.add(rpath)
    spath = manifest.path("summary.txt")
    spath.write_text("\n".join(summary) + "\n")
    manifest.add(spath)
    manifest.write()
    print("\n".join(summary))
    return EXIT_OK


def cmd_synthesize(cfg: dict, manifest: Manifest) -> int:
    section = cfg.get("synthesize", {})
    for key in ("template", "mean", "direction"):
        if not section.get(key):
            raise ConfigError(f"synthesize.{key} is required")
    template = lot.Template(read_volume(section["template"]))
    mean_emb = lot.read_embedding(section["mean"])
    direction = lot.read_embedding(section["direction"])
    scale = section.get("scale", 1.0)
    nus = section.get("nus", [0.0])
    slices = section.get("slices", [])
    if template.density.grid.ndim == 3 and not slices:
        raise ConfigError("synthesize.slices is required for 3D volumes")

    volumes = {}
    failed = []
    for idx, nu in enumerate(nus):
        try:
            vol = lot.synthesize(template,
                                 mean_emb + float(nu) * scale * direction)
        except NonDiffeomorphicMap as exc:
            failed.append((nu, str(exc)))
            continue
        vpath = manifest.path(f"nu_{idx:02d}.tbmv")
        write_volume(vol, vpath)
        manifest.add(vpath)
        volumes[idx] = vol

    sidecar = {"nus": [float(n) for n in nus], "scale": float(scale),
               "failed": [{"nu": float(n), "error": e} for n, e in failed],
               "slices": []}
    specs = slices if slices else [{"axis": 0, "index": 0}]
    for spec in specs:
        axis = int(spec.get("axis", 0))
        index = int(spec.get("index", 0))
        planes = {idx: _slice_plane(v, axis, index)
                  for idx, v in volumes.items()}
        if not planes:
            continue
        lo = min(float(p.min()) for p in planes.values())
        hi = max(float(p.max()) for p in planes.values())
        for idx, plane in planes.items():
            ppath = manifest.path(f"slice_a{axis}_i{index:03d}_nu_{idx:02d}.pgm")
            _write_pgm(ppath, plane, lo, hi)
            manifest.add(ppath)
        sidecar["slices"].append({"axis": axis, "index": index,
                                  "min": lo, "max": hi})
    scpath = manifest.path("scaling.json")
    scpath.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    manifest.add(scpath)
    manifest.write()
    if failed:
        print(f"synthesize: {len(failed)} of {len(nus)} points could not be "
              f"inverted", file=sys.stderr)
        return EXIT_STATISTICAL
    print(f"synthesize: {len(volumes)} volumes written to {manifest.out_dir}")
    return EXIT_OK


def cmd_phantom(cfg: dict, manifest: Manifest, seed: int) -> int:
    section = cfg.get("phantom", {})
    family = section.get("family", "translation")
    spec = orc.Phantom(
        family=family,
        count=section.get("count", 10),
        dims=tuple(section.get("dims", [64, 64])),
        seed=seed,
        axis=section.get("axis", 0),
        shift_step=section.get("shift_step", 1.0),
        sigma=section.get("sigma", 5.0),
        noise=section.get("noise", 0.02),
        class_offset=section.get("class_offset", 4.0),
        jitter=section.get("jitter", 0.75),
    )
    vols, covs, labels = orc.make_phantom_cohort(spec)
    cpath = manifest.path("covariates.csv")
    with open(cpath, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "value", "label"] if labels is not None
                   else ["subject_id", "value"])
        for i, v in enumerate(vols):
            name = f"s{i:03d}"
            vpath = manifest.path(f"{name}.tbmv")
            write_volume(v, vpath)
            manifest.add(vpath)
            row = [name, repr(float(covs[i]))]
            if labels is not None:
                row.append(int(labels[i]))
            w.writerow(row)
    manifest.add(cpath)
    manifest.write()
    print(f"phantom: {len(vols)} {family} volumes written to {manifest.out_dir}")
    return EXIT_OK


def cmd_validate(manifest: Manifest, seed: int, criteria=None,
                 tamper_gradient: bool = False) -> int:
    results = validation.run_criteria(criteria, seed=seed,
                                      tamper_gradient=tamper_gradient)
    report = validation.format_report(results, seed)
    rpath = manifest.path("report.txt")
    rpath.write_text(report)
    manifest.add(rpath)
    manifest.write()
    print(report, end="")
    return EXIT_OK if all(r.passed for r in results) else EXIT_STATISTICAL


# ------------------------------------------------------------------ main ---

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tbmorph",
        description="Transport-based morphometry pipeline")
    parser.add_argument("--config", type=str, default=None,
                        help="JSON configuration file")
    parser.add_argument("--jobs", type=int, default=None,
                        help="parallel workers for subject-level work")
    parser.add_argument("--seed", type=int, default=None,
                        help="master random seed")
    parser.add_argument("--out", type=str, default=None,
                        help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("transform", help="compute template and embeddings")
    sub.add_parser("model", help="fit pca/regression/plda on embeddings")
    sub.add_parser("synthesize", help="invert a model direction to images")
    pv = sub.add_parser("validate", help="run the oracle validation suite")
    pv.add_argument("--criteria", type=str, default=None,
                    help="comma-separated criterion ids (default: all)")
    pv.add_argument("--tamper-gradient", action="store_true",
                    help=argparse.SUPPRESS)  # negative-control hook for tests
    sub.add_parser("phantom", help="generate a synthetic cohort")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else {}
        seed = args.seed if args.seed is not None else cfg.get("seed", 0)
        jobs = args.jobs if args.jobs is not None else cfg.get("jobs", 1)
        out = args.out if args.out is not None else cfg.get("out", "out")
        manifest = Manifest(Path(out))
        if args.command == "transform":
            return cmd_transform(cfg, manifest, seed, jobs)
        if args.command == "model":
            return cmd_model(cfg, manifest, seed)
        if args.command == "synthesize":
            return cmd_synthesize(cfg, manifest)
        if args.command == "phantom":
            return cmd_phantom(cfg, manifest, seed)
        if args.command == "validate":
            criteria = args.criteria.split(",") if args.criteria else None
            return cmd_validate(manifest, seed, criteria,
                                args.tamper_gradient)
        raise ConfigError(f"unknown command {args.command}")
    except (ConfigError, GridMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, TbmError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
