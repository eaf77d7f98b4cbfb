"""Run orchestration: one experiment = train + evaluate + artifacts + manifest.

Each run owns ``<output_dir>/<name>/`` exclusively (lockfile-enforced) and
leaves behind: config.yaml, manifest.json, history.csv, checkpoints
(last/best_clean/best_robust + trainer_state sidecar), eval.json and eval.csv.
"""

from __future__ import annotations

import os
from pathlib import Path

from ..analysis import (EvalReport, default_attack_suite, evaluate,
                        tradeoff_sweep, write_reports_csv)
from ..augment import AugmentSampler, default_corruption_suite
from ..nfcore.models import Interpolate, NormStrategy
from ..objectives import MethodKind, train
from .config import (ExperimentConfig, RunManifest, config_hash, save_manifest,
                     to_yaml, utc_now)
from .data import load_dataset

_AUGMENTED = (MethodKind.NOFROST_STAR, MethodKind.COMBINE)


class LockError(RuntimeError):
    """Another run holds this output directory."""


class RunLock:
    """Exclusive-create lockfile guarding one run directory."""

    def __init__(self, run_dir: Path):
        self.path = Path(run_dir) / ".lock"
        self.fd = None

    def __enter__(self):
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockError(
                f"{self.path} exists: another run owns this directory "
                f"(remove the lockfile if that run is dead)") from None
        os.write(self.fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc):
        if self.fd is not None:
            os.close(self.fd)
            self.path.unlink(missing_ok=True)
        return False


def build_augmenter(cfg: ExperimentConfig, in_channels: int):
    if cfg.train.method not in _AUGMENTED:
        return None
    return AugmentSampler(in_channels=in_channels)


def eval_routing(cfg: ExperimentConfig):
    if cfg.model.norm != NormStrategy.MBN:
        return None
    return Interpolate(cfg.eval.mbn_gamma, frozenset(cfg.eval.mbn_mix_set))


def run(cfg: ExperimentConfig, *, dry_run=False, resume=False, log_fn=None) -> RunManifest:
    """Execute one experiment end to end; returns the final manifest."""
    run_dir = Path(cfg.output_dir) / cfg.name
    run_dir.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)
    with RunLock(run_dir):
        (run_dir / "config.yaml").write_text(to_yaml(cfg))
        manifest = RunManifest(config_hash=chash, seed=cfg.train.seed,
                               started_at=utc_now(),
                               artifacts={"config": "config.yaml"})
        save_manifest(manifest, run_dir)
        if dry_run:
            manifest.status = "dry-run"
            manifest.finished_at = utc_now()
            save_manifest(manifest, run_dir)
            return manifest
        try:
            bundle = load_dataset(cfg.dataset, subset_fraction=cfg.subset_fraction,
                                  seed=cfg.data_seed, params=cfg.dataset_params)
            augmenter = build_augmenter(cfg, bundle.in_channels)
            result = train(bundle.train, bundle.test, cfg.model, cfg.train,
                           out_dir=run_dir, augmenter=augmenter, resume=resume,
                           config_hash=chash, log_fn=log_fn)
            suite = default_attack_suite(eps=cfg.eval.attack_eps,
                                         steps=cfg.eval.attack_steps,
                                         seed=cfg.eval.attack_seed)
            corruptions = (default_corruption_suite(cfg.eval.corruption_severities)
                           if cfg.eval.corruptions else [])
            report = evaluate(result.model, bundle.test, suite, corruptions,
                              cfg.eval.metrics, routing=eval_routing(cfg))
            (run_dir / "eval.json").write_text(report.to_json())
            write_reports_csv([(cfg.name, report)], run_dir / "eval.csv")
            manifest.artifacts.update({
                "history": "history.csv", "eval_json": "eval.json",
                "eval_csv": "eval.csv",
                **{f"checkpoint_{k}": str(Path(v).name) for k, v in result.checkpoints.items()},
            })
            manifest.status = "complete"
        except Exception:
            manifest.status = "failed"
            manifest.finished_at = utc_now()
            save_manifest(manifest, run_dir)
            raise
        manifest.finished_at = utc_now()
        save_manifest(manifest, run_dir)
    return manifest


def run_matrix(configs, out_csv, **kwargs):
    """Run several experiments and collect their reports into one CSV."""
    reports = []
    for cfg in configs:
        run(cfg, **kwargs)
        run_dir = Path(cfg.output_dir) / cfg.name
        report = EvalReport.from_json((run_dir / "eval.json").read_text())
        reports.append((cfg.name, report))
    return write_reports_csv(reports, out_csv)


def sweep_to_csv(model, split, gammas, attack_suite, out_path, mix_set=frozenset()):
    """Gamma sweep of a mixture-BN model written as a CSV (one row per gamma)."""
    rows = tradeoff_sweep(model, split, gammas, attack_suite, mix_set=mix_set)
    cols = list(rows[0].keys())
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join(f"{row[c]:.6f}" for c in cols) + "\n")
    return rows
