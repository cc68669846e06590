"""File formats and run bookkeeping.

CSV files use '.' decimals, '\n' line endings, and a header row.  Binary
files carry the magic bytes "DNCE", a little-endian u32 format version, a
JSON metadata block, and named float64 arrays with explicit dimension
headers.  Each run directory holds a manifest listing every produced file
with its SHA-256 content hash, the configuration snapshot, and per-stage
wall-clock times; partial outputs are flushed and marked incomplete.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
import time
from pathlib import Path

import numpy as np

from . import agents, network
from .config import ExperimentConfig

MAGIC = b"DNCE"
FORMAT_VERSION = 1


class StorageError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# binary container


def write_binary(path, meta: dict, arrays: dict[str, np.ndarray]):
    path = Path(path)
    meta_blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(meta_blob)))
        fh.write(meta_blob)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.tobytes())


def read_binary(path):
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as err:
        raise StorageError(f"cannot read {path}: {err}") from err
    if blob[:4] != MAGIC:
        raise StorageError(f"{path}: bad magic bytes")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise StorageError(f"{path}: unsupported format version {version}")
    (meta_len,) = struct.unpack_from("<I", blob, 8)
    offset = 12
    meta = json.loads(blob[offset : offset + meta_len].decode("utf-8"))
    offset += meta_len
    (n_arrays,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    arrays = {}
    for _ in range(n_arrays):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        offset += 8 * count
        arrays[name] = arr.reshape(shape).copy()
    return meta, arrays


# ---------------------------------------------------------------------------
# CSV schemas


def write_csv(path, header: list[str], rows):
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def read_csv(path, expected_header: list[str] | None = None):
    try:
        with open(path, "r", newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            rows = [row for row in reader if row]
    except OSError as err:
        raise StorageError(f"cannot read {path}: {err}") from err
    if expected_header is not None and header != expected_header:
        raise StorageError(
            f"{path}: expected columns {expected_header}, found {header}"
        )
    return header, rows


TRUTH_HEADER = ["time", "grid_index", "K", "R", "Q", "A"]
OBS_HEADER = ["time", "grid_index", "value"]
MEAN_HEADER = ["time", "grid_index", "variable", "mean", "spread"]
ENERGY_HEADER = ["time", "member", "energy"]
TRAJECTORY_HEADER = ["time", "grid_index", "variable", "mean", "lo", "hi"]
SKILL_HEADER = ["time", "rmse", "corr"]
LAMBDA_HEADER = ["agent", "epoch", "lambda"]
LOSS_HEADER = ["agent", "epoch", "loss"]


def write_state_series(path, times: np.ndarray, states: np.ndarray, n_grid: int):
    """Truth-style CSV: one row per (time, grid point) with the four fields."""
    rows = []
    for t, vec in zip(times, states):
        for j in range(n_grid):
            rows.append([
                f"{t:.17g}", j,
                f"{vec[j]:.17g}", f"{vec[n_grid + j]:.17g}",
                f"{vec[2 * n_grid + j]:.17g}", f"{vec[3 * n_grid + j]:.17g}",
            ])
    write_csv(path, TRUTH_HEADER, rows)


def read_state_series(path, n_grid: int):
    _, rows = read_csv(path, TRUTH_HEADER)
    by_time: dict[float, np.ndarray] = {}
    order: list[float] = []
    for row in rows:
        t = float(row[0])
        if t not in by_time:
            by_time[t] = np.zeros(4 * n_grid)
            order.append(t)
        j = int(row[1])
        for b in range(4):
            by_time[t][b * n_grid + j] = float(row[2 + b])
    times = np.array(order)
    states = np.array([by_time[t] for t in order])
    return times, states


def write_observation_series(path, times, values):
    rows = []
    for t, vals in zip(times, values):
        for j, v in enumerate(vals):
            rows.append([f"{t:.17g}", j, f"{v:.17g}"])
    write_csv(path, OBS_HEADER, rows)


def read_observation_series(path, n_grid: int):
    _, rows = read_csv(path, OBS_HEADER)
    by_time: dict[float, np.ndarray] = {}
    order: list[float] = []
    for row in rows:
        t = float(row[0])
        if t not in by_time:
            by_time[t] = np.zeros(n_grid)
            order.append(t)
        by_time[t][int(row[1])] = float(row[2])
    return np.array(order), np.array([by_time[t] for t in order])


def write_dataset(path, datasets: list[agents.MemberDataset]):
    """Training records: member, target time, grid index, raw feature
    columns, raw (K, R, Z, A) target columns."""
    if not datasets:
        raise StorageError("no member datasets to write")
    d_f = datasets[0].features.shape[-1]
    header = (
        ["member", "time", "grid_index"]
        + [f"f{i}" for i in range(d_f)]
        + ["tK", "tR", "tZ", "tA"]
    )
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for ds in datasets:
            n_grid = ds.features.shape[1]
            for k, t in enumerate(ds.times):
                for j in range(n_grid):
                    writer.writerow(
                        [ds.member, f"{t:.17g}", j]
                        + [f"{v:.17g}" for v in ds.features[k, j]]
                        + [f"{v:.17g}" for v in ds.targets[k, j]]
                    )


def read_dataset(path) -> list[agents.MemberDataset]:
    header, rows = read_csv(path)
    if header is None or header[:3] != ["member", "time", "grid_index"]:
        raise StorageError(f"{path}: not a training dataset (header {header})")
    d_f = len(header) - 7
    grouped: dict[int, dict[float, dict[int, tuple]]] = {}
    for row in rows:
        member = int(row[0])
        t = float(row[1])
        j = int(row[2])
        feats = np.array([float(v) for v in row[3 : 3 + d_f]])
        targs = np.array([float(v) for v in row[3 + d_f :]])
        grouped.setdefault(member, {}).setdefault(t, {})[j] = (feats, targs)
    out = []
    for member in sorted(grouped):
        times = sorted(grouped[member])
        n_grid = len(grouped[member][times[0]])
        feats = np.zeros((len(times), n_grid, d_f))
        targs = np.zeros((len(times), n_grid, 4))
        for k, t in enumerate(times):
            for j, (f, g) in grouped[member][t].items():
                feats[k, j] = f
                targs[k, j] = g
        out.append(
            agents.MemberDataset(
                member=member, times=np.array(times), features=feats, targets=targs
            )
        )
    return out


# ---------------------------------------------------------------------------
# agent checkpoints


def save_checkpoint(
    path,
    agent: agents.TrainedAgent,
    normalizer: agents.Normalizer,
    bounds: agents.ActionBounds,
    feature_spec: agents.FeatureSpec,
    config_hash: str,
):
    arrays = {}
    for i, (w, b) in enumerate(zip(agent.params.weights, agent.params.biases)):
        arrays[f"weight_{i}"] = w
        arrays[f"bias_{i}"] = b
    arrays["log_spread"] = agent.params.log_spread
    arrays["dual"] = np.array([
        agent.dual.lam, agent.dual.alpha_lam, agent.dual.beta,
        agent.dual.epsilon_band[0], agent.dual.epsilon_band[1],
    ])
    arrays["feat_min"] = normalizer.feat_min
    arrays["feat_max"] = normalizer.feat_max
    arrays["target_min"] = normalizer.target_min
    arrays["target_max"] = normalizer.target_max
    arrays["bounds_lower"] = bounds.lower
    arrays["bounds_upper"] = bounds.upper
    arrays["bounds_floor"] = np.array([bounds.a_floor, bounds.a_bar])
    arrays["neighborhood_offsets"] = np.array(feature_spec.neighborhood_offsets, dtype=float)
    arrays["neighborhood_weights"] = np.array(feature_spec.neighborhood_weights)
    arrays["lambda_trace"] = np.array(agent.lambda_trace)
    arrays["loss_trace"] = np.array(agent.loss_trace)
    meta = {
        "kind": "agent_checkpoint",
        "member": agent.member,
        "n_layers": len(agent.params.weights),
        "predict_increment": agent.predict_increment,
        "config_hash": config_hash,
    }
    write_binary(path, meta, arrays)


def load_checkpoint(path, expect_config_hash: str | None = None):
    meta, arrays = read_binary(path)
    if meta.get("kind") != "agent_checkpoint":
        raise StorageError(f"{path}: not an agent checkpoint")
    if expect_config_hash is not None and meta["config_hash"] != expect_config_hash:
        raise StorageError(
            f"{path}: checkpoint was produced under a different configuration "
            f"({meta['config_hash']} != {expect_config_hash})"
        )
    n_layers = meta["n_layers"]
    params = network.PolicyParams(
        weights=[arrays[f"weight_{i}"] for i in range(n_layers)],
        biases=[arrays[f"bias_{i}"] for i in range(n_layers)],
        log_spread=arrays["log_spread"],
    )
    dual_arr = arrays["dual"]
    dual = agents.DualState(
        lam=float(dual_arr[0]),
        alpha_lam=float(dual_arr[1]),
        beta=float(dual_arr[2]),
        epsilon_band=(float(dual_arr[3]), float(dual_arr[4])),
    )
    agent = agents.TrainedAgent(
        member=int(meta["member"]),
        params=params,
        dual=dual,
        predict_increment=bool(meta.get("predict_increment", False)),
        lambda_trace=list(arrays["lambda_trace"]),
        loss_trace=list(arrays["loss_trace"]),
    )
    normalizer = agents.Normalizer(
        feat_min=arrays["feat_min"],
        feat_max=arrays["feat_max"],
        target_min=arrays["target_min"],
        target_max=arrays["target_max"],
    )
    bounds = agents.ActionBounds(
        lower=arrays["bounds_lower"],
        upper=arrays["bounds_upper"],
        a_floor=float(arrays["bounds_floor"][0]),
        a_bar=float(arrays["bounds_floor"][1]),
    )
    spec = agents.FeatureSpec(
        neighborhood_offsets=tuple(int(o) for o in arrays["neighborhood_offsets"]),
        neighborhood_weights=tuple(arrays["neighborhood_weights"]),
    )
    return agent, normalizer, bounds, spec


# ---------------------------------------------------------------------------
# manifest


def sha256_of(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_of_bytes(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(
        json.dumps(config.as_dict(), sort_keys=True).encode("utf-8")
    ).hexdigest()


class RunManifest:
    """Per-run bookkeeping: config snapshot, per-stage outputs with hashes,
    wall-clock seconds, and completion status."""

    def __init__(self, out_dir, config: ExperimentConfig):
        self.out_dir = Path(out_dir)
        self.path = self.out_dir / "manifest.json"
        if self.path.exists():
            self.data = json.loads(self.path.read_text(encoding="utf-8"))
        else:
            self.data = {
                "config": config.as_dict(),
                "config_hash": config_hash(config),
                "seed_expansion": "SeedSequence(seed, spawn_key=(stage_code, index))",
                "stages": {},
            }

    def _flush(self):
        self.path.write_text(
            json.dumps(self.data, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    def stage(self, name: str):
        return _StageRecorder(self, name)

    def record_metric(self, stage: str, key: str, value):
        self.data["stages"].setdefault(stage, {}).setdefault("metrics", {})[key] = value
        self._flush()

    def mark_stage(self, stage: str, status: str):
        self.data["stages"].setdefault(stage, {})["status"] = status
        self._flush()


class _StageRecorder:
    def __init__(self, manifest: RunManifest, name: str):
        self.manifest = manifest
        self.name = name
        self.outputs: list[Path] = []

    def __enter__(self):
        self.start = time.perf_counter()
        self.manifest.data["stages"][self.name] = {"status": "incomplete"}
        self.manifest._flush()
        return self

    def add_output(self, path):
        self.outputs.append(Path(path))

    def __exit__(self, exc_type, exc, tb):
        entry = self.manifest.data["stages"][self.name]
        entry["wall_seconds"] = time.perf_counter() - self.start
        entry["outputs"] = {
            str(p.relative_to(self.manifest.out_dir)): sha256_of(p)
            for p in self.outputs
            if p.exists()
        }
        entry["status"] = "complete" if exc_type is None else f"failed: {exc}"
        self.manifest._flush()
        return False
