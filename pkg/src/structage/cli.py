"""Command line entry point: ``structage <subcommand> [--config PATH] [--seed N] [--out DIR]``.

Exit codes: 0 success, 2 configuration error, 3 missing upstream artifact.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline as P
from .pipeline import COHORTS, FEATURE_KINDS, ConfigError, MissingArtifact, PipelineConfig

EXIT_OK, EXIT_CONFIG, EXIT_MISSING = 0, 2, 3


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI file overriding the built-in defaults")
    p.add_argument("--seed", type=int, help="master seed (overrides [run] seed)")
    p.add_argument("--out", type=Path, default=Path("run"), help="output root directory (default ./run)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="structage", description="Brain structure age pipeline on phantoms")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        _common(p)
        return p

    p = add("phantom-gen", "generate phantom cohorts")
    p.add_argument("--cohort", choices=COHORTS, action="append", help="cohort to generate (repeatable; default all)")
    add("train-voxel", "train the U-Net ensemble along the transfer chain")
    p = add("predict-map", "write the voxel-wise age map of one volume")
    p.add_argument("--input", type=Path, required=True, help="native-resolution .vol3 volume")
    p.add_argument("--output", type=Path, required=True, help="destination .vol3 age map")
    p = add("features", "structure ages, gaps and volumes of a cohort")
    p.add_argument("--cohort", choices=COHORTS, required=True)
    add("fit-correction", "fit the per-structure bias correction on healthy subjects")
    add("train-mlp", "train the chronological-age MLP ensemble")
    p = add("predict-age", "predict chronological age of a cohort")
    p.add_argument("--cohort", choices=COHORTS, required=True)
    for name, text in (("train-svm", "grid-search and train the disease classifier"),
                       ("classify", "classify the held-out disease subjects")):
        p = add(name, text)
        p.add_argument("--features", choices=FEATURE_KINDS, default="bsage+vol")
    add("evaluate", "regression and classification metrics of available predictions")
    p = add("population-summary", "per-class BrainAGE and mean structure age gaps")
    p.add_argument("--cohort", choices=COHORTS, default="disease")
    p.add_argument("--classes", help="comma-separated class subset (default all present)")
    p = add("export-slices", "PPM slice of class-mean structure age gaps")
    p.add_argument("--cohort", choices=COHORTS, default="disease")
    p.add_argument("--class", dest="klass", required=True)
    p.add_argument("--axis", type=int, choices=(0, 1, 2), default=2)
    p.add_argument("--index", type=int, help="slice index (default middle)")
    p.add_argument("--labels", type=Path, help="label volume (default phantom template geometry)")
    p.add_argument("--output", type=Path)
    add("config-dump", "print the effective configuration")
    p = add("run-all", "run every step in order")
    p.add_argument("--features", choices=FEATURE_KINDS, action="append",
                   help="classification feature set (repeatable; default all)")
    p = sub.add_parser("replay", help="re-run a step from its run manifest")
    p.add_argument("manifest", type=Path)
    p.add_argument("--out", type=Path, help="output root (default: the manifest's root)")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _step_args(ns: argparse.Namespace) -> dict:
    skip = {"command", "config", "seed", "out", "verbose"}
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(ns).items()) if k not in skip}


def _dispatch(cmd: str, cfg: PipelineConfig, out: Path, a: dict):
    if cmd == "phantom-gen":
        return P.phantom_gen(cfg, out, a.get("cohort") or COHORTS)
    if cmd == "train-voxel":
        return P.train_voxel(cfg, out)
    if cmd == "predict-map":
        return P.predict_map(cfg, out, a["input"], a["output"])
    if cmd == "features":
        return P.features(cfg, out, a["cohort"])
    if cmd == "fit-correction":
        return P.fit_correction(cfg, out)
    if cmd == "train-mlp":
        return P.train_mlp(cfg, out)
    if cmd == "predict-age":
        return P.predict_age(cfg, out, a["cohort"])
    if cmd == "train-svm":
        return P.train_svm(cfg, out, a["features"])
    if cmd == "classify":
        return P.classify(cfg, out, a["features"])
    if cmd == "evaluate":
        result = P.evaluate(cfg, out)
        print(json.dumps(result, indent=1, sort_keys=True))
        return result
    if cmd == "population-summary":
        classes = a["classes"].split(",") if a.get("classes") else None
        rows = P.population_summary(cfg, out, a["cohort"], classes)
        for r in rows:
            print(f"{r.klass:>3} n={r.n:4d} BrainAGE mean {r.mean_brainage:+.2f} median {r.median_brainage:+.2f}")
        return rows
    if cmd == "export-slices":
        path = P.export_slices(cfg, out, a["klass"], a["axis"], a.get("index"), a["cohort"], a.get("labels"),
                               a.get("output"))
        print(path)
        return path
    if cmd == "run-all":
        return P.run_all(cfg, out, a.get("features") or FEATURE_KINDS)
    raise ConfigError(f"unknown command {cmd!r}")


def _replay(ns) -> int:
    if not ns.manifest.is_file():
        raise MissingArtifact(f"manifest {ns.manifest} not found")
    body = json.loads(ns.manifest.read_text(encoding="utf-8"))
    cfg = PipelineConfig.from_text(body["config"])
    if cfg.hash != body["config_sha256"]:
        raise ConfigError("manifest config does not match its recorded hash")
    out = ns.out or ns.manifest.resolve().parent.parent
    _dispatch(body["step"], cfg, out, body["args"])
    P.write_run_manifest(out, cfg, body["step"], body["args"])
    return EXIT_OK


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if ns.command == "replay":
            return _replay(ns)
        cfg = PipelineConfig.load(ns.config, ns.seed) if ns.config else PipelineConfig.from_text(None, ns.seed)
        if ns.command == "config-dump":
            sys.stdout.write(cfg.text)
            return EXIT_OK
        args = _step_args(ns)
        _dispatch(ns.command, cfg, ns.out, args)
        P.write_run_manifest(ns.out, cfg, ns.command, args)
        return EXIT_OK
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
