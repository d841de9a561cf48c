"""
Command-line entry point.

    dtgap gen        populate the repository with design-phase simulations
    dtgap run        LoI A/B/C over the epoch grid and split seeds
    dtgap instance   per-sensor physical vs. simulated table for one test instance
    dtgap secondgen  pre-train on original vs. augmented repository, score on fresh assets
    dtgap report     aggregate a run's report into the mean-over-splits table

All randomness derives from ``--seed``. Output goes to ``--out``, or to
``$DTGAP_OUT`` when set, and existing outputs are only replaced with
``--force``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import orchestrator as orch
from . import regressor
from .gapworld import GapInjectionSpec
from .repository import MANIFEST_FILE, RECORDS_FILE, Repository
from .seeds import derive_seed
from .truss import default_config_path, load_structure

log = logging.getLogger("dtgap")

DEFAULT_SEED = 20240101
REPORT_FILE = "report.csv"
RUN_MANIFEST = "run_manifest.json"
RUN_DIR = "run"
AUGMENTED_DIR = "augmented"
SECONDGEN_FILE = "secondgen.csv"
TABLE_FILE = "table.csv"
TIMING_COLUMNS = ("train_s", "finetune_s")


class CLIError(RuntimeError):
    pass


@dataclass
class RunConfig:
    structure: Path
    gap_spec: Path
    repo: Path
    out: Path
    seed: int = DEFAULT_SEED
    dataset_size: int = 2000
    splits: int = 10
    epochs: tuple[int, ...] = orch.EPOCH_GRID
    force: bool = False
    jobs: int = 1


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _refuse_overwrite(cfg: RunConfig, *paths: Path) -> None:
    existing = [str(p) for p in paths if p.exists()]
    if existing and not cfg.force:
        raise CLIError(f"refusing to overwrite {', '.join(existing)} (use --force)")


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _load_spec(cfg: RunConfig) -> GapInjectionSpec:
    if not cfg.gap_spec.exists():
        raise CLIError(f"gap spec {cfg.gap_spec} not found (run `dtgap gen` first)")
    return GapInjectionSpec.load(cfg.gap_spec)


def _open_repo(cfg: RunConfig) -> Repository:
    if not (cfg.repo / MANIFEST_FILE).exists():
        raise CLIError(f"no repository at {cfg.repo} (run `dtgap gen` first)")
    return Repository(cfg.repo)


def _inputs(cfg: RunConfig) -> dict:
    return {
        "master_seed": cfg.seed,
        "structure_sha256": sha256_file(cfg.structure),
        "gap_spec_sha256": sha256_file(cfg.gap_spec),
    }


# --- gen --------------------------------------------------------------------


def cmd_gen(cfg: RunConfig) -> Repository:
    """Create the gap spec (if absent) and a repository of design-phase simulations."""
    truss = load_structure(cfg.structure)
    repo_files = [cfg.repo / RECORDS_FILE, cfg.repo / MANIFEST_FILE]
    _refuse_overwrite(cfg, *repo_files)
    for f in repo_files:
        f.unlink(missing_ok=True)
    cfg.out.mkdir(parents=True, exist_ok=True)
    if not cfg.gap_spec.exists() or cfg.force:
        cfg.gap_spec.parent.mkdir(parents=True, exist_ok=True)
        GapInjectionSpec.random(derive_seed(cfg.seed, "gap_spec")).save(cfg.gap_spec)
    repo = Repository(cfg.repo)
    design_seed = derive_seed(cfg.seed, "design_sim")
    repo.ingest(orch.design_records(truss, cfg.dataset_size, design_seed))
    _write_json(cfg.out / "gen_manifest.json", {
        **_inputs(cfg),
        "design_seed": design_seed,
        "dataset_size": cfg.dataset_size,
        "ranges": asdict(orch.DesignRanges()),
        "records_sha256": sha256_file(cfg.repo / RECORDS_FILE),
    })
    log.info("wrote %d design-sim records to %s", len(repo), cfg.repo)
    return repo


# --- run --------------------------------------------------------------------


def _dump_instances(path: Path, physical: np.ndarray) -> None:
    path.write_text(json.dumps({"physical": physical.tolist()}) + "\n")


def _load_instances(path: Path) -> np.ndarray:
    return np.array(json.loads(path.read_text())["physical"], dtype=float)


def cmd_run(cfg: RunConfig, lois=orch.LOIS) -> orch.ExperimentResult:
    truss = load_structure(cfg.structure)
    spec = _load_spec(cfg)
    repo = _open_repo(cfg)
    report = cfg.out / REPORT_FILE
    run_dir = cfg.out / RUN_DIR
    _refuse_overwrite(cfg, report, cfg.out / RUN_MANIFEST)
    if "C" in lois:
        _refuse_overwrite(cfg, cfg.out / AUGMENTED_DIR)

    result = orch.run_experiment(repo, truss, spec, cfg.seed, n_splits=cfg.splits, epoch_grid=cfg.epochs,
                                 lois=tuple(lois), dataset_size=cfg.dataset_size, jobs=cfg.jobs)

    cfg.out.mkdir(parents=True, exist_ok=True)
    run_dir.mkdir(exist_ok=True)
    with open(report, "w", newline="") as fh:
        fh.write(f"# dtgap report master_seed={cfg.seed}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(orch.LoIRow.CSV_COLUMNS)
        w.writerows(r.csv_values() for r in result.rows)

    files = {}
    first = next(iter(result.canonical.values()))
    _dump_instances(run_dir / "test_instances.json", first.test_physical)
    files["run/test_instances.json"] = sha256_file(run_dir / "test_instances.json")
    for (loi, epochs), cell in sorted(result.canonical.items()):
        name = f"model_{loi}_{epochs}.json"
        regressor.save_checkpoint(cell.model, run_dir / name)
        files[f"run/{name}"] = sha256_file(run_dir / name)
        if cell.gaps is not None:
            gname = f"gaps_{loi}_{epochs}.json"
            (run_dir / gname).write_text(cell.gaps.to_json() + "\n")
            files[f"run/{gname}"] = sha256_file(run_dir / gname)
    if result.augmented is not None:
        aug_dir = cfg.out / AUGMENTED_DIR
        for f in (aug_dir / RECORDS_FILE, aug_dir / MANIFEST_FILE):
            f.unlink(missing_ok=True)
        result.augmented.save_as(aug_dir)
        files[f"{AUGMENTED_DIR}/{RECORDS_FILE}"] = sha256_file(aug_dir / RECORDS_FILE)

    canonical_epochs = max(cfg.epochs)
    _write_json(cfg.out / RUN_MANIFEST, {
        **_inputs(cfg),
        "dataset_size": cfg.dataset_size,
        "splits": cfg.splits,
        "epochs": list(cfg.epochs),
        "lois": list(lois),
        "design_seed": derive_seed(cfg.seed, "design_sim"),
        "split_seeds": [derive_seed(cfg.seed, "split", i) for i in range(cfg.splits)],
        "repository_records_sha256": sha256_file(cfg.repo / RECORDS_FILE),
        "settings": json.loads(json.dumps(asdict(orch.RGASettings()))),
        "canonical_split": 0,
        "canonical_epochs": canonical_epochs,
        "gap_digests": {f"{r.loi}/{r.epochs}/{r.split_seed}": r.gap_digest for r in result.rows if r.gap_digest},
        "report_sha256_without_timing": report_digest(report),
        "files": files,
    })
    log.info("wrote %d report rows to %s", len(result.rows), report)
    return result


def read_report(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = csv.DictReader(line for line in fh if not line.startswith("#"))
        return list(rows)


def report_digest(path: Path) -> str:
    """Digest of the report with the wall-clock columns removed."""
    rows = read_report(path)
    kept = [[v for k, v in row.items() if k not in TIMING_COLUMNS] for row in rows]
    return hashlib.sha256(json.dumps(kept).encode()).hexdigest()


# --- instance ---------------------------------------------------------------


def cmd_instance(cfg: RunConfig, timestep: int, loi: str, epochs: int | None = None) -> orch.InstanceReport:
    truss = load_structure(cfg.structure)
    run_dir = cfg.out / RUN_DIR
    manifest = cfg.out / RUN_MANIFEST
    if not manifest.exists():
        raise CLIError(f"no completed run in {cfg.out} (run `dtgap run` first)")
    epochs = epochs or json.loads(manifest.read_text())["canonical_epochs"]
    ckpt = run_dir / f"model_{loi}_{epochs}.json"
    if not ckpt.exists():
        raise CLIError(f"missing run artifact {ckpt}")
    physical = _load_instances(run_dir / "test_instances.json")
    report = orch.instance_report(timestep, physical, regressor.load_checkpoint(ckpt), truss)
    target = cfg.out / f"instance_{loi}_{epochs}_{timestep}.csv"
    _refuse_overwrite(cfg, target)
    with open(target, "w", newline="") as fh:
        fh.write(f"# dtgap instance master_seed={cfg.seed} loi={loi} epochs={epochs} "
                 f"timestep={timestep} mse_m2={report.mse!r}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(orch.InstanceReport.CSV_COLUMNS)
        w.writerows((j, repr(p), repr(v)) for j, p, v in report.rows())
    log.info("instance %d, LoI %s: mse %.4e m^2 -> %s", timestep, loi, report.mse, target)
    return report


# --- secondgen --------------------------------------------------------------


SECONDGEN_COLUMNS = ("fresh_seed", "n_original", "n_augmented", "mse_original", "mse_augmented",
                     "augmented_wins", "win_rate")


def cmd_secondgen(cfg: RunConfig, n_seeds: int = 10) -> list[orch.SecondGenResult]:
    truss = load_structure(cfg.structure)
    original = _open_repo(cfg)
    aug_dir = cfg.out / AUGMENTED_DIR
    if not (aug_dir / MANIFEST_FILE).exists():
        raise CLIError(f"no augmented repository at {aug_dir} (run `dtgap run` with LoI C first)")
    augmented = Repository(aug_dir)
    target = cfg.out / SECONDGEN_FILE
    _refuse_overwrite(cfg, target)
    results = [orch.second_generation_pretrain(original, augmented, truss,
                                               derive_seed(cfg.seed, "fresh_asset", i))
               for i in range(n_seeds)]
    win_rate = sum(r.augmented_wins for r in results) / len(results)
    with open(target, "w", newline="") as fh:
        fh.write(f"# dtgap secondgen master_seed={cfg.seed}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SECONDGEN_COLUMNS)
        for r in results:
            w.writerow([r.fresh_seed, r.n_original, r.n_augmented, repr(r.mse_original), repr(r.mse_augmented),
                        int(r.augmented_wins), repr(win_rate)])
    log.info("augmented repository wins %d of %d fresh assets", round(win_rate * len(results)), len(results))
    return results


# --- report -----------------------------------------------------------------


def cmd_report(cfg: RunConfig) -> list[dict]:
    """Mean MSE and training time per (LoI, epochs); relative change vs. LoI A."""
    source = cfg.out / REPORT_FILE
    if not source.exists():
        raise CLIError(f"no report at {source} (run `dtgap run` first)")
    rows = read_report(source)
    cells: dict[tuple[str, int], list[dict]] = {}
    for r in rows:
        cells.setdefault((r["loi"], int(r["epochs"])), []).append(r)
    table = []
    for (loi, epochs), group in sorted(cells.items()):
        mse = float(np.mean([float(r["mse_m2"]) for r in group]))
        secs = float(np.mean([float(r["train_s"]) for r in group]))
        base = cells.get(("A", epochs))
        base_mse = float(np.mean([float(r["mse_m2"]) for r in base])) if base else float("nan")
        table.append({"loi": loi, "epochs": epochs, "splits": len(group), "mean_mse_m2": mse,
                      "mean_train_s": secs, "rel_to_A": mse / base_mse - 1.0})
    target = cfg.out / TABLE_FILE
    _refuse_overwrite(cfg, target)
    with open(target, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(table[0]) if table else ["loi"], lineterminator="\n")
        w.writeheader()
        w.writerows(table)
    for t in table:
        print(f"{t['loi']}  {t['epochs']:>3} epochs  mse {t['mean_mse_m2']:.4e} m^2  "
              f"train {t['mean_train_s']:.4f} s  vs A {t['rel_to_A']:+.1%}")
    return table


# --- argument parsing -------------------------------------------------------


def _epoch_list(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of integers: {text!r}")
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("epochs must be positive")
    return values


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", type=Path, help="output directory (default $DTGAP_OUT or ./dtgap-out)")
    common.add_argument("--repo", type=Path, help="repository directory (default OUT/repo)")
    common.add_argument("--gap-spec", type=Path, help="gap spec JSON (default OUT/gap_spec.json)")
    common.add_argument("--structure", type=Path, default=None, help="truss structure config")
    common.add_argument("--seed", type=int, default=DEFAULT_SEED, help="master seed")
    common.add_argument("--size", type=int, default=2000, help="design dataset size")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dtgap", description="Reality-gap experiments for a truss-bridge digital twin.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="simulate design-phase data into the repository")
    run = sub.add_parser("run", parents=[common], help="run the LoI grid")
    run.add_argument("--loi", choices=["A", "B", "C", "all"], default="all")
    run.add_argument("--splits", type=int, default=10)
    run.add_argument("--epochs", type=_epoch_list, default=orch.EPOCH_GRID, help="comma-separated epoch grid")
    run.add_argument("--jobs", type=int, default=1, help="worker processes (timings get noisier above 1)")
    inst = sub.add_parser("instance", parents=[common], help="per-sensor table for one test instance")
    inst.add_argument("--timestep", type=int, required=True)
    inst.add_argument("--loi", choices=list(orch.LOIS), required=True)
    inst.add_argument("--epochs", dest="instance_epochs", type=int, default=None, help="epoch budget (default: largest in the run)")
    sg = sub.add_parser("secondgen", parents=[common], help="original vs. augmented repository pre-training")
    sg.add_argument("--fresh-seeds", type=int, default=10)
    sub.add_parser("report", parents=[common], help="aggregate report.csv into a mean-over-splits table")
    return p


def config_from_args(args) -> RunConfig:
    out = args.out or Path(os.environ.get("DTGAP_OUT") or "dtgap-out")
    return RunConfig(
        structure=args.structure or default_config_path(),
        gap_spec=args.gap_spec or out / "gap_spec.json",
        repo=args.repo or out / "repo",
        out=out,
        seed=args.seed,
        dataset_size=args.size,
        splits=getattr(args, "splits", 10),
        epochs=tuple(getattr(args, "epochs", None) or orch.EPOCH_GRID),
        force=args.force,
        jobs=getattr(args, "jobs", 1),
    )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = config_from_args(args)
    try:
        if args.command == "gen":
            cmd_gen(cfg)
        elif args.command == "run":
            cmd_run(cfg, orch.LOIS if args.loi == "all" else (args.loi,))
        elif args.command == "instance":
            report = cmd_instance(cfg, args.timestep, args.loi, args.instance_epochs)
            print(f"mse_m2={report.mse!r}")
        elif args.command == "secondgen":
            cmd_secondgen(cfg, args.fresh_seeds)
        elif args.command == "report":
            cmd_report(cfg)
    except Exception as exc:
        print(f"dtgap {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0
