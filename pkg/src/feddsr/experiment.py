"""Experiment orchestration: data, fleet, federation, evaluation and logs.

A run directory holds::

    config.json          resolved configuration
    rounds.csv           one row per round (fixed columns)
    rounds.jsonl         schema header, then one record per round
    traces.jsonl         per (round, vehicle, epoch, batch) loss breakdowns
    final_model.ckpt     network parameters after the last round
    final_adapters.ckpt  adapter parameters (only when taps are configured)
    checkpoints/         periodic checkpoints (evaluation.checkpoint_every)
    predictions/         PGM argmax dumps of the evaluation panel

Given the same config and seed, every file is byte-identical across runs
and thread counts (wall times are logged only with evaluation.timing).
"""
import csv
import hashlib
import io
import json
import logging
import os
import statistics
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import save_checkpoint
from .config import ExperimentConfig
from .data import dirichlet_partition, generate_dataset
from .diagnostics import measure_heterogeneity
from .errors import ConfigError, FormatError
from .federation import VehicleState, instantiate, run_federation
from .metrics import compute_metrics, evaluate
from .model import forward
from .objectives import LossWeights
from .tensor import RngStream, Tensor, precision

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CSV_COLUMNS = ("t", "mIoU", "mF1", "mPre", "mRec", "H", "grad_norm_sq", "mean_ce", "mean_mi", "mean_ne", "wall_ms")

# stream keys
_TRAIN_STREAM = 21
_TEST_STREAM = 22
_PARTITION_STREAM = 23


@dataclass
class Workload:
    train: object
    test: object
    fleet: list


def build_workload(cfg):
    seed = cfg.seed
    d = cfg.data
    train = generate_dataset(cfg.scene, d["train_samples"], RngStream(seed, _TRAIN_STREAM))
    test = generate_dataset(cfg.scene, d["test_samples"], RngStream(seed, _TEST_STREAM))
    parts = dirichlet_partition(train, cfg.partition, RngStream(seed, _PARTITION_STREAM))
    return Workload(train, test, [VehicleState(i, p) for i, p in enumerate(parts)])


def _theta_digest(theta):
    h = hashlib.sha256()
    for k in sorted(theta):
        h.update(k.encode())
        h.update(np.ascontiguousarray(theta[k]).tobytes())
    return h.hexdigest()


def _weighted_mean(values, weights):
    return float(sum(w * v for w, v in zip(weights, values)))


class _Recorder:
    """Hook that evaluates, probes and logs each round."""

    def __init__(self, cfg, work, out):
        self.cfg = cfg
        self.work = work
        self.out = out
        self.ev = cfg.evaluation
        self.records = []
        self._pending = {}
        size = {v.id: v.size for v in work.fleet}
        total = sum(size.values())
        self._fleet_weights = [size[v.id] / total for v in sorted(work.fleet, key=lambda v: v.id)]

    def before_round(self, t, server):
        every = self.ev["diagnostics_every"]
        if not every or t % every:
            return
        arch = self.cfg.arch
        net, adapters = instantiate(arch, server.theta, server.phi)
        weights = self.cfg.round_cfg.weights or LossWeights.uniform(len(arch.taps), 0.0, 0.0)
        fleet = sorted(self.work.fleet, key=lambda v: v.id)
        rep = measure_heterogeneity(net, adapters, arch.taps, [v.dataset for v in fleet],
                                    self._fleet_weights, weights, arch.ne_channels)
        self._pending[t + 1] = rep

    def after_round(self, t, server, rl):
        arch = self.cfg.arch
        m = len(arch.taps)
        rec = {"kind": "round", "t": t, "participants": rl.participants,
               "weights": {str(k): v for k, v in rl.weights.items()},
               "vehicles": {str(k): v for k, v in rl.vehicles.items()}}
        ws = [rl.weights[v] for v in rl.participants]
        summaries = [rl.vehicles[v] for v in rl.participants]
        rec["mean_ce"] = _weighted_mean([s["ce"] for s in summaries], ws)
        rec["mean_mi"] = _weighted_mean([sum(s["mi"]) / m for s in summaries], ws) if m else None
        rec["mean_ne"] = _weighted_mean([sum(s["ne"]) / m for s in summaries], ws) if m else None
        if t % self.ev["every"] == 0 or t == self.cfg.round_cfg.rounds:
            net, _ = instantiate(arch, server.theta, server.phi)
            cm, ent = evaluate(net, self.work.test, arch.taps, self.ev["batch_size"])
            rec["metrics"] = compute_metrics(cm).as_dict()
            rec["tap_entropy"] = ent
        else:
            rec["metrics"] = None
            rec["tap_entropy"] = None
        rep = self._pending.pop(t, None)
        rec["H"] = rep.H if rep else None
        rec["grad_norm_sq"] = rep.grad_norm_sq if rep else None
        rec["theta_sha256"] = _theta_digest(server.theta)
        rec["wall_ms"] = rl.wall_ms if self.ev["timing"] else 0.0
        self.records.append(rec)
        self.out.write_round(rec, rl)
        k = self.ev["checkpoint_every"]
        if k and t % k == 0:
            self.out.checkpoint(server, f"checkpoints/round_{t:04d}")


def _cell(v):
    return "" if v is None else repr(float(v))


def csv_row(rec):
    met = rec["metrics"] or {}
    return [str(rec["t"]), _cell(met.get("mIoU")), _cell(met.get("mF1")), _cell(met.get("mPre")),
            _cell(met.get("mRec")), _cell(rec["H"]), _cell(rec["grad_norm_sq"]), _cell(rec["mean_ce"]),
            _cell(rec["mean_mi"]), _cell(rec["mean_ne"]), _cell(rec["wall_ms"])]


class RunOutput:
    """Incremental writer for a run directory; every round is flushed so a
    failed run keeps its partial log."""

    def __init__(self, root, cfg):
        self.root = root
        os.makedirs(root, exist_ok=True)
        with open(os.path.join(root, "config.json"), "w", encoding="utf-8") as fh:
            fh.write(cfg.to_json())
        self._csv = open(os.path.join(root, "rounds.csv"), "w", encoding="utf-8", newline="")
        self._csv_writer = csv.writer(self._csv, lineterminator="\n")
        self._csv_writer.writerow(CSV_COLUMNS)
        self._jsonl = open(os.path.join(root, "rounds.jsonl"), "w", encoding="utf-8")
        self._jsonl.write(_dumps({"kind": "header", "schema": SCHEMA_VERSION, "config": cfg.experiment_tree()}) + "\n")
        self._traces = open(os.path.join(root, "traces.jsonl"), "w", encoding="utf-8")
        self.hashes = {}

    def write_round(self, rec, rl):
        self._csv_writer.writerow(csv_row(rec))
        self._jsonl.write(_dumps(rec) + "\n")
        for vid in rl.participants:
            for row in rl.traces.get(vid, ()):
                self._traces.write(_dumps({"t": rec["t"], "vehicle": vid, **row}) + "\n")
        for fh in (self._csv, self._jsonl, self._traces):
            fh.flush()

    def checkpoint(self, server, stem):
        path = os.path.join(self.root, stem)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        self.hashes[f"{stem}_model.ckpt"] = save_checkpoint(
            f"{path}_model.ckpt", dict(server.theta), {"part": "model", "round": server.t})
        if server.phi:
            self.hashes[f"{stem}_adapters.ckpt"] = save_checkpoint(
                f"{path}_adapters.ckpt", dict(server.phi), {"part": "adapters", "round": server.t})

    def close(self):
        for fh in (self._csv, self._jsonl, self._traces):
            fh.close()


def _dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_pgm(path, labels, classes):
    """Binary PGM (P5) with each class id scaled to spread over 0..255."""
    h, w = labels.shape
    scale = 255 // (classes - 1)
    body = (labels.astype(np.uint16) * scale).astype(np.uint8).tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii") + body)


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM", offset=0)
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


@dataclass
class RunResult:
    out_dir: str
    records: list
    server: object
    hashes: dict = field(default_factory=dict)

    def final_metrics(self):
        return self.records[-1]["metrics"]


def run_experiment(cfg, out_dir=None, threads=1):
    """Run one configured experiment and write its artifacts to ``out_dir``
    (default: the config's output path)."""
    if not isinstance(cfg, ExperimentConfig):
        raise ConfigError("run_experiment expects a parsed ExperimentConfig")
    out_dir = out_dir or cfg.tree["output"]
    with precision(cfg.tree["precision"]):
        work = build_workload(cfg)
        out = RunOutput(out_dir, cfg)
        rec = _Recorder(cfg, work, out)
        try:
            server, _ = run_federation(work.fleet, cfg.arch, cfg.round_cfg, cfg.seed, hooks=[rec], threads=threads)
            out.checkpoint(server, "final")
            panel = cfg.evaluation["panel"]
            if panel:
                _dump_panel(cfg, server, work.test, panel, out_dir)
        finally:
            out.close()
    return RunResult(out_dir, rec.records, server, dict(out.hashes))


def _dump_panel(cfg, server, test, panel, out_dir):
    net, _ = instantiate(cfg.arch, server.theta, server.phi)
    n = min(panel, len(test))
    pred = forward(net, Tensor(test.images[:n], dtype=net.params["enc1.w"].dtype)).data.argmax(axis=1)
    os.makedirs(os.path.join(out_dir, "predictions"), exist_ok=True)
    for i in range(n):
        write_pgm(os.path.join(out_dir, "predictions", f"panel_{i:03d}.pgm"), pred[i], cfg.arch.classes)


# --------------------------------------------------------------------------
# logs
# --------------------------------------------------------------------------

def read_log(run_dir):
    """Round records of a run directory; rejects other schema versions."""
    path = os.path.join(run_dir, "rounds.jsonl")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no round log at {path}")
    with open(path, encoding="utf-8") as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or lines[0].get("kind") != "header":
        raise FormatError(f"{path}: missing log header", offset=0)
    if lines[0].get("schema") != SCHEMA_VERSION:
        raise FormatError(f"{path}: log schema {lines[0].get('schema')} is not supported "
                          f"(expected {SCHEMA_VERSION})", offset=0)
    return lines[0], lines[1:]


def rounds_to_target(records, target):
    """First round whose held-out mIoU meets ``target``; None if never."""
    for r in records:
        if r["metrics"] is not None and r["metrics"]["mIoU"] >= target:
            return r["t"]
    return None


def metric_at(records, t, key="mIoU"):
    for r in records:
        if r["t"] == t:
            if r["metrics"] is None:
                raise ConfigError(f"round {t} was not evaluated")
            return r["metrics"][key]
    raise ConfigError(f"log has no round {t}")


def report(run_dirs, target=None, target_round=None):
    """Rounds-to-target per log and percentage reduction against the first.

    With ``target_round`` the target is the first log's mIoU at that round.
    """
    if (target is None) == (target_round is None):
        raise ConfigError("report needs exactly one of target or target_round")
    logs = [read_log(d)[1] for d in run_dirs]
    if target is None:
        target = metric_at(logs[0], target_round)
    rows = []
    base = None
    for d, recs in zip(run_dirs, logs):
        r = rounds_to_target(recs, target)
        if base is None:
            base = r
        red = None
        if r is not None and base:
            red = 100.0 * (base - r) / base
        rows.append({"log": d, "target": target, "rounds": r, "reduction_pct": red})
    return rows


def format_report(rows):
    buf = io.StringIO()
    buf.write(f"target mIoU: {rows[0]['target']:.4f}\n")
    for row in rows:
        r = "not reached" if row["rounds"] is None else str(row["rounds"])
        red = "" if row["reduction_pct"] is None else f"  reduction {row['reduction_pct']:.2f}%"
        buf.write(f"{row['log']}: rounds-to-target {r}{red}\n")
    return buf.getvalue()


# --------------------------------------------------------------------------
# ablations
# --------------------------------------------------------------------------

AXES = {
    "count": (1, 2, 3, 4, 5),
    "distance": (1, 2, 3),
    "position": ("input", "central", "output"),
}


def _scalar(value, name):
    if isinstance(value, list):
        if len(set(value)) != 1:
            raise ConfigError(f"training.{name} must be a single value for ablations, got {value}")
        return value[0]
    return value


def derive_variant(base, axis, value):
    """Config for one ablation row.  Sweeps run on the between-blocks sites."""
    tr = base.tree["training"]
    taps = base.tree["model"]["taps"]
    over = {"model.taps.rule": "between-blocks", "model.taps.indices": None,
            "training.alpha": _scalar(tr["alpha"], "alpha"), "training.lambda": _scalar(tr["lambda"], "lambda")}
    if axis == "count":
        over.update({"model.taps.count": int(value), "model.taps.spacing": 1})
    elif axis == "distance":
        over.update({"model.taps.count": 2, "model.taps.spacing": int(value)})
    elif axis == "position":
        over.update({"model.taps.count": 2, "model.taps.spacing": taps["spacing"], "model.taps.position": value})
    else:
        raise ConfigError(f"ablation axis must be one of {sorted(AXES)}, got {axis!r}")
    return base.derive(**over)


def ablate(axis, base, seeds, out_dir, values=None, threads=1, runner=None):
    """Sweep one tap axis over ``seeds``; returns table rows.

    Infeasible variants are recorded with status "skipped".  ``runner``
    (cfg, out_dir) -> RunResult can replace run_experiment, e.g. for caching.
    """
    if axis not in AXES:
        raise ConfigError(f"ablation axis must be one of {sorted(AXES)}, got {axis!r}")
    runner = runner or (lambda c, d: run_experiment(c, d, threads))
    rows = []
    for value in values or AXES[axis]:
        try:
            variant = derive_variant(base, axis, value)
        except ConfigError as exc:
            rows.append({"value": value, "taps": None, "status": "skipped", "reason": str(exc)})
            log.info("ablation %s=%s skipped: %s", axis, value, exc)
            continue
        per_seed = {}
        for s in seeds:
            cfg = variant.derive(seed=int(s))
            res = runner(cfg, os.path.join(out_dir, f"{axis}_{value}", f"seed{s}"))
            per_seed[int(s)] = res.final_metrics()
        row = {"value": value, "taps": list(variant.arch.taps), "status": "ok", "per_seed": per_seed}
        for key in ("mIoU", "mF1", "mPre", "mRec"):
            row[key] = statistics.median(m[key] for m in per_seed.values())
        rows.append(row)
    return rows


def write_ablation_table(rows, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["value", "taps", "status", "mIoU", "mF1", "mPre", "mRec", "mIoU_per_seed"])
        for r in rows:
            if r["status"] != "ok":
                w.writerow([r["value"], "", r["status"], "", "", "", "", ""])
                continue
            seeds = " ".join(f"{s}:{m['mIoU']:.4f}" for s, m in sorted(r["per_seed"].items()))
            w.writerow([r["value"], " ".join(map(str, r["taps"])), "ok", _cell(r["mIoU"]), _cell(r["mF1"]),
                        _cell(r["mPre"]), _cell(r["mRec"]), seeds])


def format_ablation(axis, rows):
    lines = [f"{axis:>9} {'taps':>12} {'mIoU':>8} {'mF1':>8} {'mPre':>8} {'mRec':>8}"]
    for r in rows:
        if r["status"] != "ok":
            lines.append(f"{r['value']!s:>9} {'skipped':>12}  {r['reason']}")
            continue
        taps = ",".join(map(str, r["taps"]))
        lines.append(f"{r['value']!s:>9} {taps:>12} {r['mIoU']:8.2f} {r['mF1']:8.2f} {r['mPre']:8.2f} {r['mRec']:8.2f}")
    return "\n".join(lines) + "\n"


def seed_list(spec):
    """Parse "0,1,2" or "0-4" into a list of seeds."""
    out = []
    for part in str(spec).split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-")
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise ConfigError(f"no seeds in {spec!r}")
    return out

