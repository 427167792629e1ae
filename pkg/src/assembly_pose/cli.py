"""Command-line entry point: gen, estimate, eval, assemble, lattice, render."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .assembly import (
    InsertionSpec, build_lattice, gaussian_error, run_assembly_campaign, uniform_disk_error, zero_error,
)
from .config import ConfigError, RunConfig
from .dataset import (
    camera_from_dict, gen_stage1_scenes, gen_stage2_samples, make_stage1_sample, scene_from_dict,
    write_sample,
)
from .evaluation import build_report, evaluate_scene
from .parts import PartClass, catalog_by_class, part_class
from .pipeline import (
    Detection, LostPartError, PipelineResult, SimulatedRobot, TemplateEstimator, compose_refined,
    estimate_all, result_from_dict, result_to_dict,
)
from .render import read_pgm, render_camera, write_depth_pgm, write_gray_pgm
from .sensor import NormalizedImage, degrade

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATASET = 4

MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


class DatasetError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _manifest(command: str, cfg: RunConfig, **extra) -> dict:
    return {"command": command, "seed": cfg.seed, "config_hash": cfg.digest(), "version": __version__,
            "config": cfg.data, **extra}


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _write_with_manifest(out: Path, text: str, manifest: dict):
    _write(out, text)
    _write(out.with_name(out.name + ".manifest.json"), _dump(manifest))


def _out_path(args, cfg: RunConfig, default_name: str) -> Path:
    return Path(args.out) if args.out else Path(cfg.data["output_dir"]) / default_name


# --------------------------------------------------------------------------
# datasets on disk


def _load_dataset(directory) -> tuple[dict, list[dict]]:
    d = Path(directory)
    if not d.is_dir():
        raise DatasetError(f"dataset directory '{d}' does not exist")
    mpath = d / MANIFEST
    if not mpath.is_file():
        raise DatasetError(f"'{d}' has no {MANIFEST}; generate it with the gen subcommand")
    manifest = json.loads(mpath.read_text())
    records = []
    for name in manifest["samples"]:
        p = d / name
        if not p.is_file():
            raise DatasetError(f"dataset file '{p}' is missing")
        records.append(json.loads(p.read_text()))
    return manifest, records


def _dataset_config(manifest: dict, args) -> RunConfig:
    if args.config:
        return RunConfig.load(args.config, args.seed)
    cfg = RunConfig.from_dict(manifest["config"])
    if args.seed is not None:
        cfg = RunConfig.from_dict({**cfg.data, "seed": int(args.seed)})
    return cfg


def _robot_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, 0xE57, index]).generate_state(1, np.uint64)[0])


# --------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    cfg = RunConfig.load(args.config, args.seed)
    gen = cfg.gen_config()
    if args.scenes is not None:
        gen = replace(gen, scene_count=int(args.scenes))
    noise, catalog = cfg.noise_config(), cfg.catalog()
    out = Path(args.out) if args.out else Path(cfg.data["output_dir"]) / "dataset"
    out.mkdir(parents=True, exist_ok=True)
    if cfg.stage == 1:
        samples = gen_stage1_scenes(gen, catalog, noise)
    else:
        g = cfg.data["generation"]
        part = catalog_by_class(catalog)[part_class(g["stage2_class"])]
        samples = gen_stage2_samples(part, int(g["stage2_subclass"]), gen, noise)
    names = []
    for s in samples:
        write_sample(out, s)
        names.append(f"{s.index:06d}.json")
    _write(out / MANIFEST, _dump(_manifest("gen", cfg, stage=cfg.stage, scene_count=gen.scene_count,
                                           samples=names)))
    print(json.dumps({"dataset": str(out), "samples": len(names)}, sort_keys=True))
    return EXIT_OK


def _stage2_prior(record: dict, part) -> Detection:
    lb = record["labels"][0]
    prior = lb["prior_pose"]
    return Detection(part.class_id, tuple(lb["perturbed_bbox"]), 1.0, prior["theta"] % part.angular_domain, 0,
                     (prior["x"], prior["y"]), part.angular_domain)


def cmd_estimate(args) -> int:
    manifest, records = _load_dataset(args.dataset)
    cfg = _dataset_config(manifest, args)
    noise, catalog = cfg.noise_config(), cfg.catalog()
    by_class = catalog_by_class(catalog)
    est = TemplateEstimator(catalog, sensor=noise, stage1_height=cfg.data["generation"]["stage1_height"],
                            stage2_height=cfg.data["generation"]["stage2_height"])
    results = {}
    for rec in records:
        img = NormalizedImage(read_pgm(Path(args.dataset) / rec["image"]))
        cam = camera_from_dict(rec["camera"])
        if manifest.get("stage", 1) == 1:
            scene = scene_from_dict(rec["scene"], catalog)
            robot = SimulatedRobot(scene, noise, _robot_seed(cfg.seed, rec["index"]))
            res = estimate_all([img], [cam], est, catalog, robot.capture, est.stage2_height)
        else:
            part = by_class[part_class(rec["labels"][0]["class_id"])]
            prior = _stage2_prior(rec, part)
            try:
                refined = compose_refined(prior, part, est.stage2(img, cam, prior, part))
                res = PipelineResult([prior], [refined], [])
            except LostPartError:
                res = PipelineResult([prior], [], [prior])
        results[f"{rec['index']:06d}"] = result_to_dict(res)
    out = _out_path(args, cfg, "poses.json")
    meta = _manifest("estimate", cfg, dataset=str(args.dataset))
    _write_with_manifest(out, _dump({"seed": cfg.seed, "config_hash": cfg.digest(), "version": __version__,
                                     "results": results}), meta)
    print(json.dumps({"poses": str(out), "scenes": len(results)}, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    manifest, records = _load_dataset(args.dataset)
    cfg = _dataset_config(manifest, args)
    catalog = cfg.catalog()
    ppath = Path(args.poses)
    if not ppath.is_file():
        raise DatasetError(f"pose file '{ppath}' does not exist")
    poses = json.loads(ppath.read_text())["results"]
    s1, s2 = [], []
    counts = {"located": 0, "correct_class": 0, "false_positives": 0}
    for rec in records:
        key = f"{rec['index']:06d}"
        if key not in poses:
            raise DatasetError(f"pose file has no result for sample {key}")
        a, b, c = evaluate_scene(scene_from_dict(rec["scene"], catalog), result_from_dict(poses[key]))
        s1 += a
        s2 += b
        for k in counts:
            counts[k] += c[k]
    report = build_report(s1, s2, counts, seed=cfg.seed, config_hash=cfg.digest(), version=__version__)
    out = _out_path(args, cfg, "report.json")
    _write_with_manifest(out, report.to_json(), _manifest("eval", cfg, dataset=str(args.dataset),
                                                           poses=str(args.poses)))
    text = report.to_text()
    if args.text:
        _write(Path(args.text), text)
    sys.stdout.write(text)
    return EXIT_OK


def _error_model(a: dict):
    kind = a["error_model"]
    if kind == "zero":
        return zero_error()
    if kind == "uniform_disk":
        return uniform_disk_error(float(a["error_radius"]))
    if kind == "gaussian":
        return gaussian_error(float(a["error_sigma"]))
    raise ConfigError(f"unknown assembly.error_model '{kind}'")


def cmd_assemble(args) -> int:
    cfg = RunConfig.load(args.config, args.seed)
    a = cfg.data["assembly"]
    model = _error_model(a)
    spacing = float(a["spacing"]) or None
    parts = {}
    for i, part in enumerate(cfg.catalog()):
        if part.class_id == PartClass.BASE_PLATE:
            continue
        lattice = build_lattice(part.insertion, spacing)
        parts[part.name] = run_assembly_campaign(model, part.insertion, int(a["trials"]), cfg.seed * 16 + i,
                                                 lattice)
    out = _out_path(args, cfg, "assembly.json")
    _write_with_manifest(out, _dump({"seed": cfg.seed, "config_hash": cfg.digest(), "version": __version__,
                                     "parts": parts}), _manifest("assemble", cfg))
    sys.stdout.write(_dump(parts))
    return EXIT_OK


def cmd_lattice(args) -> int:
    cfg = RunConfig.load(args.config, args.seed)
    lt = cfg.data["lattice"]
    R = args.R if args.R is not None else float(lt["R"])
    r = args.r if args.r is not None else float(lt["r"])
    spacing = args.spacing if args.spacing is not None else float(lt["spacing"])
    try:
        spec = InsertionSpec(R=R, r=r, search_area=tuple(float(x) for x in lt["search_area"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    lattice = build_lattice(spec, spacing or None)
    out = _out_path(args, cfg, "lattice.csv")
    meta = _manifest("lattice", cfg, R=R, r=r, points=len(lattice), unit="mm")
    _write_with_manifest(out, lattice.to_csv(), meta)
    print(json.dumps({"lattice": str(out), "points": len(lattice)}, sort_keys=True))
    return EXIT_OK


def cmd_render(args) -> int:
    if args.dataset:
        manifest, records = _load_dataset(args.dataset)
        cfg = _dataset_config(manifest, args)
        match = [r for r in records if r["index"] == args.index]
        if not match:
            raise DatasetError(f"dataset has no sample {args.index}")
        scene = scene_from_dict(match[0]["scene"], cfg.catalog())
        camera = camera_from_dict(match[0]["camera"])
    else:
        cfg = RunConfig.load(args.config, args.seed)
        sample = make_stage1_sample(args.index, cfg.gen_config(), cfg.catalog(), cfg.noise_config())
        scene, camera = sample.scene, sample.camera
    depth = render_camera(scene, camera)
    out = _out_path(args, cfg, f"render_{args.index:06d}.pgm")
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.raw:
        write_depth_pgm(out, depth)
    else:
        write_gray_pgm(out, degrade(depth, cfg.noise_config(), _robot_seed(cfg.seed, args.index)).data)
    _write(out.with_name(out.name + ".manifest.json"),
           _dump(_manifest("render", cfg, index=args.index, raw=bool(args.raw))))
    print(json.dumps({"image": str(out)}, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="assembly-pose", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def add(name, func, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="TOML configuration file")
        sp.add_argument("--seed", type=int, help="override the configured seed")
        sp.add_argument("--out", help="output path")
        sp.set_defaults(func=func)
        return sp

    g = add("gen", cmd_gen, "generate a labelled dataset")
    g.add_argument("--scenes", type=int, help="override generation.scene_count")
    e = add("estimate", cmd_estimate, "run the pose pipeline on a dataset")
    e.add_argument("--dataset", required=True)
    v = add("eval", cmd_eval, "score estimated poses against dataset labels")
    v.add_argument("--dataset", required=True)
    v.add_argument("--poses", required=True)
    v.add_argument("--text", help="also write the aligned text table here")
    add("assemble", cmd_assemble, "simulate insertion campaigns")
    lt = add("lattice", cmd_lattice, "write a search lattice as CSV")
    lt.add_argument("--R", type=float, help="hole radius (m)")
    lt.add_argument("--r", type=float, help="peg radius (m)")
    lt.add_argument("--spacing", type=float, help="lattice spacing (m)")
    r = add("render", cmd_render, "render one scene to PGM")
    r.add_argument("--index", type=int, default=0)
    r.add_argument("--dataset", help="render a sample of this dataset instead of a generated scene")
    r.add_argument("--raw", action="store_true", help="write 16-bit depth instead of the normalized image")
    return p


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        return _fail("usage", str(exc), EXIT_USAGE)
    except ConfigError as exc:
        return _fail("config", str(exc), EXIT_CONFIG)
    except DatasetError as exc:
        return _fail("dataset", str(exc), EXIT_DATASET)
    except Exception as exc:  # noqa: BLE001 - every failure gets a machine-readable record
        return _fail(type(exc).__name__, str(exc), EXIT_FAILURE)


if __name__ == "__main__":
    sys.exit(main())
