"""Command-line front end: ``shapefuse <command> [options]``.

Exit status is 0 on success, 1 for user errors (bad arguments or files)
and 2 for numerical failures. Every command writes a JSON run report with
its inputs, seed, resolved settings (and where each came from) and the
hashes of everything it wrote.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .errors import NumericalError, ShapeFuseError, UserInputError
from .gpr import FaceAlignConfig, default_face_align_config, refine_model
from .io import load_mesh, load_mesh_dir, save_mesh
from .kernel import UniversalCovariance, build_universal_covariance, classify_vertices, sample_gpmm
from .mesh import TriMesh
from .nicp import NicpConfig, crop_to_face, merge_face_into_head, nicp_register, shared_landmark_pairs
from .pdm import ShapeModel, fit_pdm, random_params, sample_shape
from .registry import ModelRegistry
from .regression import build_regression_fused_model, predict_full_shape, solve_regression, synthesize_param_pairs
from .store import artifact_hash, sha256_file
from .synthetic import WorldConfig, generate_world, make_scan, sample_population

log = logging.getLogger("shapefuse")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# built-in defaults per command; flags and config-file keys use the same names
DEFAULTS = {
    "synth": {"n_heads": 40, "n_faces": 100, "n_scans": 20, "n_test": 10, "head_face_detail": 1.0,
              "scan_noise": 0.0, "n_vertices": 800},
    "build-pdm": {"n_components": None},
    "register": {"stiffness": None, "max_inner_iterations": 10, "max_distance": None},
    "combine-reg": {"n_r": None, "ridge": 0.0, "n_components": None, "stiffness": None,
                    "max_inner_iterations": 10},
    "combine-gp": {"face_cap": None, "embedding_cap": None},
    "refine": {"truncation_k": None, "rounds": 1, "iterations": 10, "max_distance": None,
               "noise_sigma2": None, "face_radius": None, "face_align": True, "n_components": None},
    "predict-head": {"merge": False},
    "sample": {"n": 10, "rank": None, "truncate": None},
    "evaluate": {"components": None, "max_components": None, "n_samples": ev.DEFAULT_SPECIFICITY_SAMPLES,
                 "threshold": 0.1, "use_index": False},
}


def _ints(text):
    return [int(t) for t in str(text).split(",") if t.strip()]


def _floats(text):
    return [float(t) for t in str(text).split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="shapefuse", description="Build, fuse, refine and evaluate 3D shape models.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def cmd(name, help_text, registry=True):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--seed", type=int, default=0, help="seed of the run's random generator (default 0)")
        sp.add_argument("--jobs", type=int, default=1, help="parallel workers; results do not depend on it")
        sp.add_argument("--config", help="JSON file with option values (flags take precedence)")
        sp.add_argument("--report", help="where to write the JSON run report")
        if registry:
            sp.add_argument("--registry", required=True, help="model registry directory")
        return sp

    s = cmd("synth", "generate a synthetic head/face population", registry=False)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--n-heads", type=int)
    s.add_argument("--n-faces", type=int)
    s.add_argument("--n-scans", type=int)
    s.add_argument("--n-test", type=int)
    s.add_argument("--n-vertices", type=int)
    s.add_argument("--head-face-detail", type=float, help="scale of face-only detail in the head set")
    s.add_argument("--scan-noise", type=float, help="vertex noise std of the scans")

    s = cmd("build-pdm", "fit a PCA model to meshes in correspondence")
    s.add_argument("--meshes", required=True, help="directory of .ply/.obj meshes")
    s.add_argument("--id", required=True, help="registry id of the new model")
    s.add_argument("--n-components", type=int)

    s = cmd("register", "non-rigidly register a template mesh to a target mesh", registry=False)
    s.add_argument("--template", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--out", required=True, help="registered mesh (.ply/.obj)")
    s.add_argument("--stiffness", type=_floats, help="comma-separated decreasing stiffness values")
    s.add_argument("--max-inner-iterations", type=int)
    s.add_argument("--max-distance", type=float)

    s = cmd("combine-reg", "fuse a face model into a head model by latent regression")
    s.add_argument("--head-model", required=True)
    s.add_argument("--face-model", required=True)
    s.add_argument("--corpus", required=True, help="directory of face meshes to complete")
    s.add_argument("--template", help="head template mesh (default: head model mean)")
    s.add_argument("--id", required=True)
    s.add_argument("--map-id", help="registry id of the regression map (default: <id>-map)")
    s.add_argument("--n-r", type=int, help="number of synthetic pairs (default 10 x face components)")
    s.add_argument("--ridge", type=float)
    s.add_argument("--n-components", type=int)
    s.add_argument("--stiffness", type=_floats)
    s.add_argument("--max-inner-iterations", type=int)

    s = cmd("combine-gp", "fuse a face model into a head model by covariance blending")
    s.add_argument("--head-model", required=True)
    s.add_argument("--face-model", required=True)
    s.add_argument("--template", help="head template mesh (default: head model mean)")
    s.add_argument("--id", required=True)
    s.add_argument("--face-cap", type=float, help="max distance to the registered face mean for face vertices")
    s.add_argument("--embedding-cap", type=float)

    s = cmd("refine", "refine a fused covariance on raw scans and fit a PCA model")
    s.add_argument("--covariance", required=True)
    s.add_argument("--scans", required=True, help="directory of scans with landmark sidecars")
    s.add_argument("--id", required=True)
    s.add_argument("--truncation-k", type=int)
    s.add_argument("--rounds", type=int)
    s.add_argument("--iterations", type=int)
    s.add_argument("--max-distance", type=float)
    s.add_argument("--noise-sigma2", type=float)
    s.add_argument("--face-radius", type=float)
    s.add_argument("--no-face-align", dest="face_align", action="store_const", const=False)
    s.add_argument("--n-components", type=int)
    s.add_argument("--audit-log", help="JSON-lines reconstruction log")

    s = cmd("predict-head", "predict a full head from a face")
    s.add_argument("--head-model", required=True)
    s.add_argument("--face-model", required=True)
    s.add_argument("--map", required=True, help="registry id of the regression map")
    s.add_argument("--face", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--merge", action="store_const", const=True, help="blend the input face into the prediction")

    s = cmd("sample", "draw random shapes from a model")
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--n", type=int)
    s.add_argument("--rank", type=int, help="components used for covariance models")
    s.add_argument("--truncate", type=float, help="clamp coefficients to +-truncate std")

    s = cmd("evaluate", "compute a model metric and write it as CSV")
    s.add_argument("--metric", required=True, choices=["compactness", "generalization", "specificity", "ced"])
    s.add_argument("--model", help="registry id (not needed for ced)")
    s.add_argument("--out", required=True, help="output CSV")
    s.add_argument("--test", help="held-out meshes (generalization) or reference meshes (specificity)")
    s.add_argument("--components", type=_ints, help="comma-separated component counts")
    s.add_argument("--max-components", type=int)
    s.add_argument("--n-samples", type=int)
    s.add_argument("--cohorts", help="JSON file mapping test file names to cohort labels")
    s.add_argument("--sub-model", action="append", default=[], metavar="COHORT=ID",
                   help="bespoke model for a cohort (repeatable)")
    s.add_argument("--use-index", action="store_const", const=True)
    s.add_argument("--predictions", help="ced: predicted meshes")
    s.add_argument("--truth", help="ced: ground-truth meshes (same file names)")
    s.add_argument("--errors", help="ced: CSV with columns error,normalizer")
    s.add_argument("--threshold", type=float)
    return p


class Run:
    """Settings resolution and report bookkeeping for one command."""

    def __init__(self, args):
        self.args = args
        self.command = args.command
        file_cfg = {}
        if args.config:
            with open(args.config) as fh:
                file_cfg = json.load(fh)
            if not isinstance(file_cfg, dict):
                raise UserInputError(f"{args.config}: config must be a JSON object")
        self.file_cfg = file_cfg
        known = set(DEFAULTS[self.command]) | {"nicp", "face_align_nicp"}
        unknown = sorted(set(file_cfg) - known)
        if unknown:
            raise UserInputError(f"{args.config}: unknown keys for {self.command}: {unknown}")
        self.settings = {}
        for key, default in DEFAULTS[self.command].items():
            flag = getattr(args, key, None)
            if flag is not None:
                self.settings[key] = {"value": flag, "source": "flag"}
            elif key in file_cfg:
                self.settings[key] = {"value": file_cfg[key], "source": "file"}
            else:
                self.settings[key] = {"value": default, "source": "default"}
        self.inputs = {}
        self.outputs = {}

    def __getitem__(self, key):
        return self.settings[key]["value"]

    def nicp(self, base: NicpConfig | None = None, key: str = "nicp") -> NicpConfig:
        cfg = base or NicpConfig()
        section = self.file_cfg.get(key)
        if section:
            d = cfg.to_dict()
            if "stiffness_schedule" in section:
                d["landmark_weight_schedule"] = None
            cfg = NicpConfig.from_dict({**d, **section})
        over = {}
        if self.settings.get("stiffness", {}).get("value"):
            over["stiffness_schedule"] = tuple(self["stiffness"])
            over["landmark_weight_schedule"] = None
        if "max_inner_iterations" in self.settings and self.settings["max_inner_iterations"]["source"] != "default":
            over["max_inner_iterations"] = self["max_inner_iterations"]
        if self.settings.get("max_distance", {}).get("value") is not None and key == "nicp":
            over["max_distance"] = self["max_distance"]
        if over:
            d = cfg.to_dict()
            d.update(over)
            cfg = NicpConfig.from_dict(d)
        return cfg

    def add_input(self, path):
        path = Path(path)
        files = sorted(q for q in path.iterdir() if q.is_file()) if path.is_dir() else [path]
        for f in files:
            self.inputs[str(f)] = sha256_file(f)

    def add_output(self, name, path):
        path = Path(path)
        self.outputs[name] = artifact_hash(path) if path.is_dir() else sha256_file(path)

    def report(self, default_path) -> dict:
        rep = {
            "command": self.command,
            "seed": self.args.seed,
            "jobs": self.args.jobs,
            "settings": self.settings,
            "config_file": self.args.config,
            "config_precedence": "flag > file > default",
            "inputs": self.inputs,
            "outputs": self.outputs,
        }
        if "nicp" in self.file_cfg or "face_align_nicp" in self.file_cfg:
            rep["nicp_sections"] = {k: self.file_cfg[k] for k in ("nicp", "face_align_nicp") if k in self.file_cfg}
        path = Path(self.args.report or default_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(rep, fh, indent=1, sort_keys=True, default=_jsonable)
            fh.write("\n")
        return rep


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(f"not JSON serialisable: {type(x).__name__}")


def _registry_report(run, reg, model_id):
    return Path(run.args.registry) / "reports" / f"{run.command}-{model_id}.json"


def _mesh_paths(directory):
    d = Path(directory)
    if not d.is_dir():
        raise UserInputError(f"{d}: not a directory")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in (".ply", ".obj"))


def _as_shape_model(reg, model_id, rank=None) -> ShapeModel:
    obj = reg.get(model_id)
    if isinstance(obj, UniversalCovariance):
        return obj.to_shape_model(rank, name=model_id)
    if isinstance(obj, ShapeModel):
        return obj
    raise UserInputError(f"{model_id!r} is not a shape model or covariance")


def _child_seeds(seed, n):
    return np.random.SeedSequence(seed).spawn(n)


# commands


def cmd_synth(run):
    a = run.args
    out = Path(a.out)
    cfg = WorldConfig(n_vertices=run["n_vertices"])
    s_world, s_heads, s_faces, s_scans, s_test = _child_seeds(a.seed, 5)
    world = generate_world(cfg, np.random.default_rng(s_world))
    heads = sample_population(world, run["n_heads"], np.random.default_rng(s_heads), face_detail=run["head_face_detail"])
    faces = sample_population(world, run["n_faces"], np.random.default_rng(s_faces))
    scans = sample_population(world, run["n_scans"], np.random.default_rng(s_scans))
    test = sample_population(world, run["n_test"], np.random.default_rng(s_test))
    out.mkdir(parents=True, exist_ok=True)
    save_mesh(out / "template_head.ply", world.head_template)
    save_mesh(out / "template_face.ply", world.face_template)
    noise_seeds = _child_seeds(a.seed + 1, run["n_scans"])
    sets = {
        "heads": [(f"head_{i:04d}.ply", m) for i, m in enumerate(heads.heads)],
        "faces": [(f"face_{i:04d}.ply", m) for i, m in enumerate(faces.faces)],
        "scans": [(f"scan_{i:04d}.ply", TriMesh(make_scan(m, np.random.default_rng(noise_seeds[i]),
                                                         run["scan_noise"]).vertices, m.faces, m.landmarks))
                  for i, m in enumerate(scans.heads)],
        "test": [(f"head_{i:04d}.ply", m) for i, m in enumerate(test.heads)],
        "test_faces": [(f"face_{i:04d}.ply", m) for i, m in enumerate(test.faces)],
    }
    for sub, items in sets.items():
        (out / sub).mkdir(exist_ok=True)
        for name, mesh in items:
            save_mesh(out / sub / name, mesh)
    truth = {
        "world_config": {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.__dict__.items()},
        "face_vertex_indices": world.face_vertex_indices,
        "coupling_map": world.coupling_map,
        "true_eigenvalues": world.true_eigenvalues,
        "mode_groups": {k: v for k, v in world.groups.items()},
        "head_face_detail": run["head_face_detail"],
        "cohorts": {
            "heads": dict(zip([n for n, _ in sets["heads"]], heads.cohorts)),
            "faces": dict(zip([n for n, _ in sets["faces"]], faces.cohorts)),
            "scans": dict(zip([n for n, _ in sets["scans"]], scans.cohorts)),
            "test": dict(zip([n for n, _ in sets["test"]], test.cohorts)),
        },
        "face_coefficients": {"heads": heads.face_coeffs, "faces": faces.face_coeffs,
                              "scans": scans.face_coeffs, "test": test.face_coeffs},
    }
    with open(out / "ground_truth.json", "w") as fh:
        json.dump(truth, fh, indent=1, sort_keys=True, default=_jsonable)
        fh.write("\n")
    for name in ("template_head.ply", "template_face.ply", "ground_truth.json"):
        run.add_output(name, out / name)
    for sub in sets:
        run.add_output(sub, out / sub)
    run.report(out / "report.json")


def cmd_build_pdm(run):
    a = run.args
    reg = ModelRegistry(a.registry)
    run.add_input(a.meshes)
    model = fit_pdm(load_mesh_dir(a.meshes), run["n_components"], name=a.id)
    entry = reg.put(a.id, model)
    run.outputs[a.id] = entry["sha256"]
    run.report(_registry_report(run, reg, a.id))


def cmd_register(run):
    a = run.args
    template, target = load_mesh(a.template), load_mesh(a.target)
    run.add_input(a.template)
    run.add_input(a.target)
    cfg = run.nicp()
    if not cfg.landmark_pairs:
        pairs = shared_landmark_pairs(template, target)
        if pairs:
            cfg = NicpConfig.from_dict({**cfg.to_dict(), "landmark_pairs": [[i, list(p)] for i, p in pairs]})
    res = nicp_register(template, target, cfg)
    save_mesh(a.out, res.deformed)
    run.add_output("registered", a.out)
    run.report(Path(str(a.out) + ".report.json"))


def _template(a, head_model: ShapeModel) -> TriMesh:
    if a.template:
        t = load_mesh(a.template)
        head_model.check_topology(t)
        return t
    return head_model.mean_mesh


def cmd_combine_reg(run):
    a = run.args
    reg = ModelRegistry(a.registry)
    head, face = reg.get(a.head_model, "pdm"), reg.get(a.face_model, "pdm")
    run.inputs[a.head_model] = reg.hash_of(a.head_model)
    run.inputs[a.face_model] = reg.hash_of(a.face_model)
    run.add_input(a.corpus)
    if a.template:
        run.add_input(a.template)
    template = _template(a, head)
    nicp_cfg = run.nicp()
    s_pairs, = _child_seeds(a.seed, 1)
    pairs = synthesize_param_pairs(head, face, nicp_cfg, run["n_r"], s_pairs, jobs=a.jobs)
    rmap = solve_regression(pairs, run["ridge"], a.head_model, a.face_model)
    map_id = a.map_id or f"{a.id}-map"
    run.outputs[map_id] = reg.put(map_id, rmap)["sha256"]
    corpus = load_mesh_dir(a.corpus)
    model = build_regression_fused_model(head, face, rmap, corpus, template, run["n_components"],
                                         merge_cfg=nicp_cfg, register_cfg=nicp_cfg, jobs=a.jobs, name=a.id)
    run.outputs[a.id] = reg.put(a.id, model)["sha256"]
    run.report(_registry_report(run, reg, a.id))


def cmd_combine_gp(run):
    a = run.args
    reg = ModelRegistry(a.registry)
    head, face = reg.get(a.head_model, "pdm"), reg.get(a.face_model, "pdm")
    run.inputs[a.head_model] = reg.hash_of(a.head_model)
    run.inputs[a.face_model] = reg.hash_of(a.face_model)
    if a.template:
        run.add_input(a.template)
    template = _template(a, head)
    face_reg = crop_to_face(template, face.mean_mesh, run.nicp())
    cap = run["face_cap"] if run["face_cap"] is not None else 0.01 * template.bbox_diagonal
    labels = classify_vertices(template, face_reg, cap)
    if labels.n_face == 0:
        raise NumericalError("no template vertex lies on the registered face mean; raise --face-cap")
    cov = build_universal_covariance(head, face, face_reg, template, labels, head.mean_mesh,
                                     run["embedding_cap"], {"face_cap": cap})
    run.outputs[a.id] = reg.put(a.id, cov)["sha256"]
    run.report(_registry_report(run, reg, a.id))


def _scan_landmarks(mesh: TriMesh) -> dict:
    return {k: mesh.vertices[i] for k, i in mesh.landmarks.items()}


def cmd_refine(run):
    a = run.args
    reg = ModelRegistry(a.registry)
    cov = reg.get(a.covariance, "covariance")
    run.inputs[a.covariance] = reg.hash_of(a.covariance)
    run.add_input(a.scans)
    scans = [(TriMesh(m.vertices, m.faces), _scan_landmarks(m)) for m in load_mesh_dir(a.scans)]
    k = run["truncation_k"] or cov.rank
    face_cfg = FaceAlignConfig(nicp=run.nicp(default_face_align_config(), key="face_align_nicp"),
                               radius=run["face_radius"], enabled=bool(run["face_align"]))
    audit = []
    model = refine_model(cov, k, scans, face_cfg, run["n_components"], rounds=run["rounds"],
                         iterations=run["iterations"], max_distance=run["max_distance"],
                         noise_sigma2=run["noise_sigma2"], jobs=a.jobs, name=a.id, audit=audit)
    run.outputs[a.id] = reg.put(a.id, model)["sha256"]
    if a.audit_log:
        with open(a.audit_log, "w") as fh:
            for rec in audit:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        run.add_output("audit_log", a.audit_log)
    run.report(_registry_report(run, reg, a.id))


def cmd_predict_head(run):
    a = run.args
    reg = ModelRegistry(a.registry)
    head, face = reg.get(a.head_model, "pdm"), reg.get(a.face_model, "pdm")
    rmap = reg.get(a.map, "regression-map")
    for i in (a.head_model, a.face_model, a.map):
        run.inputs[i] = reg.hash_of(i)
    run.add_input(a.face)
    f = load_mesh(a.face)
    out = predict_full_shape(head, face, rmap, f)
    if run["merge"]:
        out = TriMesh(merge_face_into_head(out, f).vertices, out.faces, out.landmarks)
    save_mesh(a.out, out)
    run.add_output("prediction", a.out)
    run.report(Path(str(a.out) + ".report.json"))


def cmd_sample(run):
    a = run.args
    reg = ModelRegistry(a.registry)
    obj = reg.get(a.model)
    run.inputs[a.model] = reg.hash_of(a.model)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(a.seed)
    for i in range(run["n"]):
        if isinstance(obj, UniversalCovariance):
            rank = run["rank"] or obj.rank
            z = rng.standard_normal(rank)
            if run["truncate"] is not None:
                z = np.clip(z, -run["truncate"], run["truncate"])
            mesh = sample_gpmm(obj.template, obj, rank, z=z)
        elif isinstance(obj, ShapeModel):
            mesh = sample_shape(obj, random_params(obj, rng, truncate=run["truncate"]))
        else:
            raise UserInputError(f"{a.model!r} cannot be sampled")
        save_mesh(out / f"sample_{i:04d}.ply", mesh)
    run.add_output("samples", out)
    run.report(out / "report.json")


def cmd_evaluate(run):
    a = run.args
    metric = a.metric
    if metric == "ced":
        curve = _ced(run)
    else:
        if not a.model:
            raise UserInputError(f"--model is required for {metric}")
        reg = ModelRegistry(a.registry)
        model = _as_shape_model(reg, a.model)
        run.inputs[a.model] = reg.hash_of(a.model)
        grid = run["components"] or list(range(1, model.n_components + 1))
        if metric == "compactness":
            curve = ev.compactness(model, run["max_components"])
        else:
            if not a.test:
                raise UserInputError(f"--test is required for {metric}")
            run.add_input(a.test)
            paths = _mesh_paths(a.test)
            shapes = [load_mesh(p) for p in paths]
            if metric == "generalization":
                cohorts = sub_models = None
                if a.sub_model:
                    if not a.cohorts:
                        raise UserInputError("--sub-model needs --cohorts")
                    run.add_input(a.cohorts)
                    with open(a.cohorts) as fh:
                        labels = json.load(fh)
                    cohorts = [labels[p.name] for p in paths]
                    sub_models = {}
                    for item in a.sub_model:
                        c, _, mid = item.partition("=")
                        sub_models[c] = _as_shape_model(reg, mid)
                        run.inputs[mid] = reg.hash_of(mid)
                curve = ev.generalization(model, shapes, grid, cohorts, sub_models)
            else:
                curve = ev.specificity(model, shapes, grid, run["n_samples"], a.seed, bool(run["use_index"]))
    curve.to_csv(a.out)
    run.add_output("csv", a.out)
    run.report(Path(str(a.out) + ".report.json"))


def _ced(run):
    a = run.args
    if a.errors:
        run.add_input(a.errors)
        data = np.atleast_2d(np.loadtxt(a.errors, delimiter=",", skiprows=1, ndmin=2))
        errors, norms = data[:, 0], data[:, 1]
    elif a.predictions and a.truth:
        run.add_input(a.predictions)
        run.add_input(a.truth)
        errors, norms = [], []
        for p in _mesh_paths(a.predictions):
            pred, truth = load_mesh(p), load_mesh(Path(a.truth) / p.name)
            errors.append(ev.mean_vertex_distance(pred, truth))
            norms.append(ev.inter_ocular_distance(pred))
    else:
        raise UserInputError("ced needs --errors or both --predictions and --truth")
    curve, auc, failure = ev.ced_auc(errors, norms, run["threshold"])
    return curve


COMMANDS = {
    "synth": cmd_synth,
    "build-pdm": cmd_build_pdm,
    "register": cmd_register,
    "combine-reg": cmd_combine_reg,
    "combine-gp": cmd_combine_gp,
    "refine": cmd_refine,
    "predict-head": cmd_predict_head,
    "sample": cmd_sample,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise UserInputError("--jobs must be >= 1")
        COMMANDS[args.command](Run(args))
    except NumericalError as exc:
        print(f"shapefuse {args.command}: numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ShapeFuseError, ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"shapefuse {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
