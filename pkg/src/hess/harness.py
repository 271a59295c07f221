"""Evaluation, the module-toggle ablation grid and the timestep sweep."""

from __future__ import annotations

import dataclasses
import json
import os

import numpy as np

from .energy import profile
from .imgio import colorize_labels, write_pgm, write_ppm
from .metrics import ConfusionMatrix, confusion, metrics
from .network import NetworkConfig, build, forward, predict
from .optim import TrainConfig, prepare_batches, train

# the 8 module-toggle rows of the ablation grid: frame+event baseline,
# each injector/fusion block alone, the pairs, then everything on
ABLATION_ROWS = (
    ("F-E", dict(atw_on=False, eds_on=False, csf_on=False)),
    ("F-E+ATW", dict(atw_on=True, eds_on=False, csf_on=False)),
    ("F-E+EDS", dict(atw_on=False, eds_on=True, csf_on=False)),
    ("F-E+CSF", dict(atw_on=False, eds_on=False, csf_on=True)),
    ("F-E+ATW+EDS", dict(atw_on=True, eds_on=True, csf_on=False)),
    ("F-E+ATW+CSF", dict(atw_on=True, eds_on=False, csf_on=True)),
    ("F-E+EDS+CSF", dict(atw_on=False, eds_on=True, csf_on=True)),
    ("F-E+ATW+EDS+CSF", dict(atw_on=True, eds_on=True, csf_on=True)),
)


def run_eval(net, samples, out_dir=None, report_path=None, batch_size=8,
             with_energy=False, ignore_index=255):
    """Aggregate one confusion matrix over the dataset.

    Optionally writes predicted label maps (PGM), palette renderings
    (PPM) and the JSON report. Returns the report dict.
    """
    if not samples:
        raise ValueError("empty evaluation dataset")
    num_classes = net.config.num_classes
    frames, voxels, labels = prepare_batches(samples, net.config.bins)
    cm = ConfusionMatrix(num_classes)
    preds = []
    for lo in range(0, len(samples), batch_size):
        hi = min(lo + batch_size, len(samples))
        p = predict(net, frames[lo:hi], voxels[lo:hi])
        preds.append(p)
        cm.add(confusion(p, labels[lo:hi], num_classes, ignore_index))
    preds = np.concatenate(preds)

    accuracy, iou, miou = metrics(cm)
    report = {
        "samples": len(samples),
        "accuracy": accuracy,
        "per_class_iou": [None if np.isnan(v) else float(v) for v in iou],
        "miou": miou,
    }
    if with_energy:
        report["energy"] = profile(net, samples).to_dict()
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        for i, p in enumerate(preds):
            write_pgm(p.astype(np.uint8), os.path.join(out_dir, f"pred_{i:04d}.pgm"))
            write_ppm(colorize_labels(p), os.path.join(out_dir, f"pred_{i:04d}.ppm"))
    if report_path is not None:
        with open(report_path, "w") as f:
            json.dump(report, f, indent=1)
    return report


def ablation(base_net_cfg: NetworkConfig, train_cfg: TrainConfig,
             train_samples, test_samples, rows=ABLATION_ROWS, verbose=False):
    """Train and evaluate one model per module-toggle combination.

    Returns a list of dicts (name, toggles, accuracy, miou, params).
    Seeds are shared across rows, so reruns are deterministic.
    """
    results = []
    for name, toggles in rows:
        cfg = dataclasses.replace(base_net_cfg, **toggles)
        net = build(cfg)
        train(net, train_samples, train_cfg)
        report = run_eval(net, test_samples)
        results.append({"name": name, **toggles,
                        "accuracy": report["accuracy"], "miou": report["miou"],
                        "params": net.param_count()})
        if verbose:
            print(format_table(results))
    return results


def timestep_sweep(base_net_cfg: NetworkConfig, train_cfg: TrainConfig,
                   train_samples, test_samples, t_list=(1, 3, 5, 7),
                   verbose=False):
    """Train and evaluate one model per timestep count.

    The voxel is re-binned so B = T for every entry. Returns a list of
    dicts (timesteps, accuracy, miou, energy_mj).
    """
    results = []
    for t in t_list:
        if t < 1:
            raise ValueError("timesteps must be >= 1")
        cfg = dataclasses.replace(base_net_cfg, bins=t, timesteps=t)
        net = build(cfg)
        train(net, train_samples, train_cfg)
        report = run_eval(net, test_samples)
        energy = profile(net, test_samples)
        results.append({"timesteps": t,
                        "accuracy": report["accuracy"], "miou": report["miou"],
                        "energy_mj": energy.e_total_mj})
        if verbose:
            print(format_table(results))
    return results


def format_table(rows):
    """Aligned plain-text rendering of a list of uniform dicts."""
    if not rows:
        return "(empty)"
    cols = list(rows[0])
    rendered = [[_fmt(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in rendered))
              for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    for row in rendered:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)))
    return "\n".join(lines)


def _fmt(v):
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)
