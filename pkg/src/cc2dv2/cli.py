"""Command-line entry point and stage orchestration.

Every command reads one :class:`RunConfig` and writes into a fixed
subdirectory of ``--out``::

    data/       gen-data      synthetic dataset (images/, annotations/, meta.json)
    ssl/        train-ssl     encoders.pt, loss.csv
    pseudo/     pseudo-label  pseudo_labels/*.txt, confidence.csv
    tpl/        train-tpl     detector.pt, loss.csv
    eval/       eval          report.json, predictions/
    viz/        viz           per-level and fused similarity heat maps
    sweep/      sweep         sweep.csv, one report per cell

Each directory also gets a ``manifest.json`` with the command, the full
config, its digest, the seed and SHA-256 digests of every file written.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import cv2
import numpy as np
import torch

from . import seeding
from .config import ConfigError, RunConfig, dump_config, load_config
from .data import (
    DatasetError,
    DatasetSplit,
    generate_synthetic,
    load_dataset,
    read_label_set,
    save_dataset,
    write_label_set,
)
from .decode import (
    PSEUDO_LABEL_DIR,
    fused_map,
    generate_pseudo_labels,
    heat_png,
    predict_image,
    similarity_cascade,
    template_anchors,
    write_pseudo_labels,
)
from .encoder import CheckpointError, embed, load_encoders, save_encoders
from .metrics import MetricsReport, evaluate, write_reports_csv
from .ssl import TrainingDiverged, train_ssl, write_loss_csv
from .tpl import load_detector, save_detector, train_tpl

log = logging.getLogger("cc2dv2")

MANIFEST = "manifest.json"


class MissingArtifact(RuntimeError):
    """An upstream artifact is absent; the message names the command that makes it."""


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(directory: Path, command: str, cfg: RunConfig, inputs: dict | None = None) -> Path:
    directory = Path(directory)
    outputs = {
        str(p.relative_to(directory)): _sha256(p)
        for p in sorted(directory.rglob("*"))
        if p.is_file() and p.name != MANIFEST
    }
    manifest = {
        "command": command,
        "seed": cfg.seed,
        "config_sha256": cfg.digest(),
        "config": cfg.to_dict(),
        "inputs": inputs or {},
        "outputs": outputs,
    }
    path = directory / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _fresh_dir(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


def _dataset_dir(cfg: RunConfig, out: Path) -> Path:
    return Path(cfg.dataset) if cfg.dataset else out / "data"


def _with_template(split: DatasetSplit, template_id: str) -> DatasetSplit:
    if not template_id or template_id == split.template.id:
        return split
    pool = [split.template, *split.unlabeled]
    chosen = [s for s in pool if s.id == template_id]
    if not chosen:
        raise ConfigError(f"template_id {template_id!r} is not a training image")
    rest = [s for s in pool if s.id != template_id]
    return DatasetSplit(chosen[0], rest, split.test)


def load_split(cfg: RunConfig, out: Path) -> DatasetSplit:
    root = _dataset_dir(cfg, out)
    if not (root / "meta.json").exists():
        raise MissingArtifact(f"no dataset at {root}; run `gen-data` first or set dataset=<dir>")
    return _with_template(load_dataset(root, cfg.image_size), cfg.template_id)


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{path} not found; run `{producer}` first")
    return path


def _eval_samples(split: DatasetSplit, cfg: RunConfig):
    samples = split.test if cfg.eval_split == "test" else split.unlabeled
    if not samples:
        raise ConfigError(f"the {cfg.eval_split!r} split is empty")
    return samples


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, out: Path) -> Path:
    target = _fresh_dir(_dataset_dir(cfg, out))
    split = generate_synthetic(
        seeding.int_seed(cfg.seed, "data"),
        cfg.synthetic_count,
        cfg.synthetic_landmarks,
        cfg.image_size,
        n_test=cfg.synthetic_test,
        margin=min(cfg.patch_size) / 2.0,
        max_displacement=cfg.synthetic_max_displacement,
    )
    save_dataset(split, target)
    write_manifest(target, "gen-data", cfg)
    return target


def run_ssl(cfg: RunConfig, split: DatasetSplit, target: Path, progress=None) -> Path:
    result = train_ssl(split, cfg.ssl_config(), cfg.seed, dump_dir=target / "diagnostics", progress=progress)
    save_encoders(target / "encoders.pt", result.encoders)
    write_loss_csv(target / "loss.csv", result.history, cfg.levels)
    return target / "encoders.pt"


def cmd_train_ssl(cfg: RunConfig, out: Path) -> Path:
    split = load_split(cfg, out)
    target = _fresh_dir(out / "ssl")

    def progress(rec):
        log.info("ssl epoch %d/%d loss %.4f", rec["epoch"] + 1, cfg.ssl_epochs, rec["loss_total"])

    run_ssl(cfg, split, target, progress)
    write_manifest(target, "train-ssl", cfg, _dataset_inputs(cfg, out))
    return target


def _dataset_inputs(cfg: RunConfig, out: Path) -> dict:
    manifest = _dataset_dir(cfg, out) / MANIFEST
    return {"dataset_manifest": _sha256(manifest)} if manifest.exists() else {}


def cmd_pseudo_label(cfg: RunConfig, out: Path) -> Path:
    split = load_split(cfg, out)
    ckpt = _require(out / "ssl" / "encoders.pt", "train-ssl")
    encoders = load_encoders(ckpt)
    labels = generate_pseudo_labels(encoders, split.template, split.unlabeled, cfg.patch_size,
                                    cfg.decode_mode, cfg.decode_radius, cfg.epsilon)
    target = _fresh_dir(out / "pseudo")
    write_pseudo_labels(target, labels, split)
    write_manifest(target, "pseudo-label", cfg, {"encoders": _sha256(ckpt)})
    return target


def cmd_train_tpl(cfg: RunConfig, out: Path) -> Path:
    split = load_split(cfg, out)
    label_dir = _require(out / "pseudo" / PSEUDO_LABEL_DIR, "pseudo-label")
    labels = read_label_set(label_dir, split, [s.id for s in split.unlabeled])
    labels[split.template.id] = split.template.landmarks
    target = _fresh_dir(out / "tpl")

    def progress(rec):
        log.info("tpl epoch %d/%d loss %.4f", rec["epoch"] + 1, cfg.tpl_epochs, rec["loss"])

    det = train_tpl(split.train, labels, cfg.tpl_config(), cfg.seed, progress)
    save_detector(target / "detector.pt", det)
    with open(target / "loss.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "loss"])
        for rec in det.history:
            w.writerow([rec["epoch"], repr(float(rec["loss"]))])
    write_manifest(target, "train-tpl", cfg, {"pseudo_manifest": _sha256(out / "pseudo" / MANIFEST)}
                   if (out / "pseudo" / MANIFEST).exists() else {})
    return target


def predict_split(cfg: RunConfig, out: Path, split: DatasetSplit, samples) -> dict[str, np.ndarray]:
    if cfg.eval_source == "tpl":
        det = load_detector(_require(out / "tpl" / "detector.pt", "train-tpl"))
        return {s.id: det.predict(s.pixels) for s in samples}
    if cfg.eval_source == "ssl":
        encoders = load_encoders(_require(out / "ssl" / "encoders.pt", "train-ssl"))
        anchors = template_anchors(encoders, split.template, cfg.patch_size)
        return {s.id: predict_image(encoders, anchors, s, cfg.decode_mode, cfg.decode_radius, cfg.epsilon)[0]
                for s in samples}
    if not cfg.eval_predictions:
        raise ConfigError("eval_source=labels needs eval_predictions=<directory of annotation files>")
    directory = Path(cfg.eval_predictions)
    if not directory.is_dir():
        raise MissingArtifact(f"prediction directory {directory} not found")
    return read_label_set(directory, split, [s.id for s in samples])


def cmd_eval(cfg: RunConfig, out: Path) -> MetricsReport:
    split = load_split(cfg, out)
    samples = _eval_samples(split, cfg)
    preds = predict_split(cfg, out, split, samples)
    report = evaluate(preds, samples, cfg.radii_mm)
    target = _fresh_dir(out / "eval")
    report.save(target / "report.json")
    write_label_set(target, preds, split, "predictions")
    write_manifest(target, "eval", cfg)
    return report


def cmd_viz(cfg: RunConfig, out: Path) -> Path:
    split = load_split(cfg, out)
    encoders = load_encoders(_require(out / "ssl" / "encoders.pt", "train-ssl"))
    samples = _eval_samples(split, cfg)
    image = split.find(cfg.viz_image) if cfg.viz_image else samples[0]
    anchors = template_anchors(encoders, split.template, cfg.patch_size)
    query = embed(encoders.image, image.pixels)
    target = _fresh_dir(out / "viz")
    for k, anchor in enumerate(anchors):
        cascade = similarity_cascade(anchor, query, cfg.epsilon, k, image.id)
        for i, lv in enumerate(cascade.levels):
            png = heat_png(np.clip(lv, 0, 1))
            png = cv2.resize(png, (image.size[1], image.size[0]), interpolation=cv2.INTER_NEAREST)
            cv2.imwrite(str(target / f"{image.id}_lm{k:02d}_level{i}.png"), png)
        fused = fused_map(cascade)
        cv2.imwrite(str(target / f"{image.id}_lm{k:02d}_fused.png"), heat_png(fused / max(fused.max(), 1e-12)))
    write_manifest(target, "viz", cfg)
    return target


def sweep_cells(cfg: RunConfig) -> list[tuple[str, float, float]]:
    """(varied parameter, alpha, beta) per cell."""
    if cfg.sweep_mode == "grid":
        return [("grid", a, b) for a in cfg.sweep_alphas for b in cfg.sweep_betas]
    return ([("beta", cfg.sweep_base_alpha, b) for b in cfg.sweep_betas]
            + [("alpha", a, cfg.sweep_base_beta) for a in cfg.sweep_alphas])


def cmd_sweep(cfg: RunConfig, out: Path) -> Path:
    """One SSL run + evaluation per (alpha, beta) cell; failures are recorded, not fatal."""
    cells = sweep_cells(cfg)
    if not cells:
        raise ConfigError("sweep grid is empty (sweep_alphas / sweep_betas)")
    split = load_split(cfg, out)
    samples = _eval_samples(split, cfg)
    target = _fresh_dir(out / "sweep")
    rows = []
    for param, alpha, beta in cells:
        name = f"alpha{alpha!r}_beta{beta!r}"
        row = {"param": param, "alpha": repr(alpha), "beta": repr(beta), "status": "ok", "error": ""}
        try:
            cell_cfg = cfg.replace(alpha=alpha, beta=beta).validate()
            cell_dir = _fresh_dir(target / name)
            ckpt = run_ssl(cell_cfg, split, cell_dir)
            encoders = load_encoders(ckpt)
            anchors = template_anchors(encoders, split.template, cell_cfg.patch_size)
            preds = {s.id: predict_image(encoders, anchors, s, cell_cfg.decode_mode,
                                         cell_cfg.decode_radius, cell_cfg.epsilon)[0] for s in samples}
            report = evaluate(preds, samples, cfg.radii_mm)
            report.save(cell_dir / "report.json")
            row["report"] = report
        except Exception as e:  # a failed cell must not stop the sweep
            log.warning("sweep cell %s failed: %s", name, e)
            row.update(status="failed", error=f"{type(e).__name__}: {e}".replace("\n", " "), report=None)
        rows.append(row)
    write_reports_csv(target / "sweep.csv", rows, cfg.radii_mm)
    write_manifest(target, "sweep", cfg)
    return target / "sweep.csv"


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-ssl": cmd_train_ssl,
    "pseudo-label": cmd_pseudo_label,
    "train-tpl": cmd_train_tpl,
    "eval": cmd_eval,
    "viz": cmd_viz,
    "sweep": cmd_sweep,
}

_HELP = {
    "gen-data": "write the synthetic dataset to OUT/data",
    "train-ssl": "train the two encoders on OUT/data, write OUT/ssl",
    "pseudo-label": "label the unlabeled split from the template, write OUT/pseudo",
    "train-tpl": "train the detector on pseudo-labels, write OUT/tpl",
    "eval": "score predictions on a split (eval_source, eval_split), write OUT/eval",
    "viz": "render similarity maps for one image, write OUT/viz",
    "sweep": "train and score every (alpha, beta) cell, write OUT/sweep/sweep.csv",
}

# exit status and machine-readable category per failure type
_ERRORS = [
    (ConfigError, 2, "config"),
    (MissingArtifact, 3, "missing-artifact"),
    (DatasetError, 4, "dataset"),
    (CheckpointError, 5, "checkpoint"),
    (TrainingDiverged, 6, "diverged"),
]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat YAML key/value config file")
    common.add_argument("--set", dest="overrides", metavar="K=V", action="append", default=[],
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--out", metavar="DIR", default="runs", help="artifact root (default: runs)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="cc2dv2", description="One-shot landmark detection pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=_HELP[name])
    sub.add_parser("show-config", parents=[common], help="print the resolved config")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.overrides, args.seed)
        if args.command == "show-config":
            sys.stdout.write(dump_config(cfg))
            return 0
        torch.use_deterministic_algorithms(True)
        out = Path(args.out)
        t0 = time.perf_counter()
        result = COMMANDS[args.command](cfg, out)
        if isinstance(result, MetricsReport):
            sys.stdout.write(result.to_json() + "\n")
        else:
            print(result)
        log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
        return 0
    except Exception as e:
        for kind, code, category in _ERRORS:
            if isinstance(e, kind):
                break
        else:
            code, category = 1, "internal"
        if category == "internal" or args.verbose:
            log.exception("command failed")
        message = str(e).replace("\n", " ")
        print(f"error: {category}: {message}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
