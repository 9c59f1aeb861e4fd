"""On-disk formats: phantom datasets, MBF maps, network weights, evaluation
reports and PPM renderings.

Every float written as text uses ``repr``, which round-trips float64 exactly.

Dataset directory layout::

    manifest            JSON: format, version, grid, patients (id, size, spec echo)
    <id>.curves         b"PKC1" + little-endian float64: AIF, then masked tissue
                        curves in row-major mask order
    <id>.mask           text grid of 0/1, one row per line
    <id>.truth.csv      x,y,fp,ps,vp,ve,delay per masked voxel, mask order
"""
from __future__ import annotations

import dataclasses
import json
import math
import re
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .cnn import NetworkConfig, NetworkWeights, weight_shapes
from .errors import (
    CountMismatchError,
    FormatError,
    MagicMismatchError,
    NonFiniteValueError,
    UnsupportedVersionError,
)
from .kinetics import Curve, KineticParams, TimeGrid
from .phantom import AifSpec, Defect, Patient, PhantomDataset, PhantomSpec
from .pipeline import EvalReport, SplitMetrics, Timing

DATASET_VERSION = 1
WEIGHTS_VERSION = 1
REPORT_VERSION = 1
CURVE_MAGIC = b"PKC1"
MANIFEST = "manifest"
MBF_UNITS = "mL/min/mL"


def _check_version(found, expected: int, where) -> None:
    if found != expected:
        raise UnsupportedVersionError(f"{where}: unsupported version {found!r} (expected {expected})")


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def _spec_to_dict(spec: PhantomSpec | None):
    return None if spec is None else dataclasses.asdict(spec)


def _spec_from_dict(d) -> PhantomSpec | None:
    if d is None:
        return None
    d = dict(d)
    d["grid"] = TimeGrid(**d["grid"])
    d["aif"] = AifSpec(**d["aif"])
    d["defect"] = None if d["defect"] is None else Defect(**d["defect"])
    for key in ("ps_range", "vp_range", "ve_range", "delay_jitter"):
        d[key] = tuple(d[key])
    return PhantomSpec(**d)


def write_dataset(dataset: PhantomDataset, directory) -> Path:
    """Write ``dataset`` into ``directory`` (created if needed)."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    grids = {p.grid for p in dataset.patients}
    if len(grids) > 1:
        raise FormatError("all patients in a dataset file must share one time grid")
    grid = next(iter(grids)) if grids else None
    manifest = {
        "format": "mbf-phantom-dataset",
        "version": DATASET_VERSION,
        "grid": None if grid is None else dataclasses.asdict(grid),
        "patients": [
            {"id": p.id, "width": p.shape[1], "height": p.shape[0], "spec": _spec_to_dict(p.spec)}
            for p in dataset.patients
        ],
    }
    for p in dataset.patients:
        ys, xs = np.nonzero(p.mask)
        payload = np.concatenate([p.aif.values, p.tissue[ys, xs].ravel()])
        if not np.all(np.isfinite(payload)):
            raise NonFiniteValueError(f"patient {p.id}: non-finite curve values")
        (out / f"{p.id}.curves").write_bytes(CURVE_MAGIC + payload.astype("<f8").tobytes())
        rows = "\n".join(" ".join("1" if v else "0" for v in row) for row in p.mask)
        (out / f"{p.id}.mask").write_text(rows + "\n")
        lines = ["x,y," + ",".join(KineticParams.NAMES)]
        for y, x in zip(ys, xs):
            lines.append(f"{x},{y}," + ",".join(repr(float(v)) for v in p.truth[y, x]))
        (out / f"{p.id}.truth.csv").write_text("\n".join(lines) + "\n")
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    return out


def _read_mask(path: Path, width: int, height: int) -> np.ndarray:
    rows = [line.split() for line in path.read_text().splitlines() if line.strip()]
    if len(rows) != height or any(len(r) != width for r in rows):
        raise CountMismatchError(f"{path}: mask is not {height} rows of {width} cells")
    for i, row in enumerate(rows):
        for j, cell in enumerate(row):
            if cell not in ("0", "1"):
                raise FormatError(f"{path}: line {i + 1}, column {j + 1}: expected 0 or 1, got {cell!r}")
    return np.array([[c == "1" for c in r] for r in rows], dtype=bool)


def _read_curves(path: Path, pid: str, n_t: int, n_vox: int) -> np.ndarray:
    raw = path.read_bytes()
    if raw[:4] != CURVE_MAGIC:
        raise MagicMismatchError(f"{path}: offset 0: bad magic {raw[:4]!r}, expected {CURVE_MAGIC!r}")
    body = raw[4:]
    expected = n_t * (1 + n_vox)
    if len(body) % 8 or len(body) // 8 != expected:
        raise CountMismatchError(
            f"curve count mismatch for patient {pid} in {path}: expected {expected} values "
            f"(AIF + {n_vox} curves of {n_t}), found {len(body) / 8:g}"
        )
    values = np.frombuffer(body, dtype="<f8").astype(np.float64)
    bad = np.nonzero(~np.isfinite(values))[0]
    if bad.size:
        raise NonFiniteValueError(f"{path}: offset {4 + 8 * int(bad[0])}: non-finite value")
    return values


def _read_truth(path: Path, voxels) -> np.ndarray:
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    header = "x,y," + ",".join(KineticParams.NAMES)
    if not lines or lines[0] != header:
        raise FormatError(f"{path}: line 1: expected header {header!r}")
    rows = lines[1:]
    if len(rows) != len(voxels):
        raise CountMismatchError(f"{path}: {len(rows)} truth rows for {len(voxels)} masked voxels")
    out = np.empty((len(rows), 5))
    for k, (line, (x, y)) in enumerate(zip(rows, voxels)):
        cells = line.split(",")
        where = f"{path}: line {k + 2}"
        if len(cells) != 7:
            raise FormatError(f"{where}: expected 7 fields, got {len(cells)}")
        if (int(cells[0]), int(cells[1])) != (x, y):
            raise FormatError(f"{where}: voxel ({cells[0]}, {cells[1]}) out of mask order, expected ({x}, {y})")
        vals = [float(c) for c in cells[2:]]
        if not all(math.isfinite(v) for v in vals):
            raise NonFiniteValueError(f"{where}: non-finite parameter")
        out[k] = vals
    return out


def read_dataset(directory) -> PhantomDataset:
    """Load and validate a dataset directory; the first violation raises."""
    root = Path(directory)
    mpath = root / MANIFEST
    if not mpath.is_file():
        raise FormatError(f"{mpath}: manifest not found")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{mpath}: line {exc.lineno}: {exc.msg}") from exc
    if "version" not in manifest:
        raise FormatError(f"{mpath}: missing version field")
    _check_version(manifest["version"], DATASET_VERSION, mpath)
    patients = []
    if manifest["patients"]:
        grid = TimeGrid(**manifest["grid"])
    for entry in manifest["patients"]:
        pid = entry["id"]
        mask = _read_mask(root / f"{pid}.mask", entry["width"], entry["height"])
        ys, xs = np.nonzero(mask)
        voxels = [(int(x), int(y)) for y, x in zip(ys, xs)]
        values = _read_curves(root / f"{pid}.curves", pid, grid.n, len(voxels))
        params = _read_truth(root / f"{pid}.truth.csv", voxels)
        tissue = np.full(mask.shape + (grid.n,), np.nan)
        tissue[ys, xs] = values[grid.n:].reshape(len(voxels), grid.n)
        truth = np.full(mask.shape + (5,), np.nan)
        truth[ys, xs] = params
        patients.append(Patient(pid, Curve(grid, values[:grid.n]), mask, tissue, truth,
                                _spec_from_dict(entry.get("spec"))))
    return PhantomDataset(patients)


# ---------------------------------------------------------------------------
# maps
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return repr(float(v)) if math.isfinite(v) else "nan"


def write_map(path, values: np.ndarray, patient_id: str, units: str = MBF_UNITS) -> Path:
    """Comma-delimited grid; NaN (masked-out) cells are written as ``nan``."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise FormatError("a map must be two-dimensional")
    path = Path(path)
    h, w = values.shape
    lines = [f"# patient={patient_id} units={units} rows={h} cols={w}"]
    lines += [",".join(_fmt(v) for v in row) for row in values]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_map(path, mask: np.ndarray | None = None) -> tuple[str, str, np.ndarray]:
    """Return ``(patient_id, units, values)``; checks dimensions against ``mask`` if given."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("# "):
        raise FormatError(f"{path}: line 1: missing map header")
    header = dict(kv.split("=", 1) for kv in lines[0][2:].split())
    try:
        h, w = int(header["rows"]), int(header["cols"])
        pid, units = header["patient"], header["units"]
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: line 1: incomplete map header") from exc
    rows = lines[1:]
    if len(rows) != h:
        raise CountMismatchError(f"{path}: header declares {h} rows, found {len(rows)}")
    values = np.empty((h, w))
    for i, line in enumerate(rows):
        cells = line.split(",")
        if len(cells) != w:
            raise CountMismatchError(f"{path}: line {i + 2}: expected {w} cells, found {len(cells)}")
        values[i] = [float(c) for c in cells]
    if mask is not None:
        if mask.shape != values.shape:
            raise CountMismatchError(f"{path}: map shape {values.shape} does not match mask {mask.shape}")
        if np.any(np.isnan(values[mask])):
            raise NonFiniteValueError(f"{path}: masked voxel without a value")
    return pid, units, values


def write_maps(directory, maps: dict[str, np.ndarray]) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for pid, m in maps.items():
        write_map(out / f"{pid}.map", m, pid)
    return out


def read_maps(directory, ids) -> dict[str, np.ndarray]:
    root = Path(directory)
    out = {}
    for pid in ids:
        path = root / f"{pid}.map"
        if not path.is_file():
            raise FormatError(f"missing map file {path}")
        found, _, values = read_map(path)
        if found != pid:
            raise FormatError(f"{path}: map is for patient {found}, expected {pid}")
        out[pid] = values
    return out


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------


def write_weights(path, weights: NetworkWeights) -> Path:
    weights.validate()
    cfg = dataclasses.asdict(weights.config)
    lines = [f"mbf-weights {WEIGHTS_VERSION}", "config " + json.dumps(cfg)]
    for name, t in weights.tensors.items():
        lines.append(f"tensor {name} " + " ".join(str(s) for s in t.shape))
        lines.append(" ".join(repr(float(v)) for v in t.ravel()))
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path


def read_weights(path) -> NetworkWeights:
    path = Path(path)
    lines = path.read_text().splitlines()
    head = lines[0].split() if lines else []
    if len(head) != 2 or head[0] != "mbf-weights":
        raise MagicMismatchError(f"{path}: line 1: not a weights file")
    _check_version(int(head[1]), WEIGHTS_VERSION, path)
    if len(lines) < 2 or not lines[1].startswith("config "):
        raise FormatError(f"{path}: line 2: missing config")
    config = NetworkConfig(**json.loads(lines[1][len("config "):]))
    expected = weight_shapes(config)
    tensors = OrderedDict()
    body = lines[2:]
    if len(body) != 2 * len(expected):
        raise CountMismatchError(f"{path}: expected {len(expected)} tensors, found {len(body) / 2:g}")
    for k, (name, shape) in enumerate(expected.items()):
        lineno = 3 + 2 * k
        parts = body[2 * k].split()
        if parts[:2] != ["tensor", name]:
            raise FormatError(f"{path}: line {lineno}: expected tensor {name}")
        if tuple(int(s) for s in parts[2:]) != shape:
            raise CountMismatchError(f"{path}: line {lineno}: {name} shape {parts[2:]}, expected {shape}")
        values = np.array([float(v) for v in body[2 * k + 1].split()])
        if values.size != int(np.prod(shape)):
            raise CountMismatchError(f"{path}: line {lineno + 1}: {name} has {values.size} values")
        if not np.all(np.isfinite(values)):
            raise NonFiniteValueError(f"{path}: line {lineno + 1}: non-finite value in {name}")
        tensors[name] = values.reshape(shape)
    return NetworkWeights(config, tensors)


# ---------------------------------------------------------------------------
# evaluation reports
# ---------------------------------------------------------------------------

_SPLIT_FLOATS = ("mse", "rel_error", "pred_median", "pred_p25", "pred_p75")
_TIMING_FIELDS = [f.name for f in dataclasses.fields(Timing)]


def _parse_typed(value: str, kind, path, lineno):
    if kind in ("bool", bool):
        if value not in ("True", "False"):
            raise FormatError(f"{path}: line {lineno}: expected True or False, got {value!r}")
        return value == "True"
    return int(value) if kind in ("int", int) else float(value)


def format_report(report: EvalReport) -> str:
    lines = [f"mbf-eval-report {REPORT_VERSION}"]
    for s in report.splits:
        parts = [f"split {s.index}", "train=" + ",".join(s.train), "val=" + ",".join(s.val),
                 "test=" + ",".join(s.test)]
        parts += [f"{k}={getattr(s, k)!r}" for k in _SPLIT_FLOATS]
        parts += [f"best_epoch={s.best_epoch}", f"stopped_epoch={s.stopped_epoch}"]
        lines.append(" ".join(parts))
    if report.splits:
        lines.append(f"aggregate mse_mean={report.mean_mse!r} mse_std={report.std_mse!r} "
                     f"rel_error_mean={report.mean_rel_error!r}")
        lines.append(f"MSE mean (std): {report.mse_line()}")
    if report.timing is not None:
        t = report.timing
        lines.append("timing " + " ".join(f"{k}={getattr(t, k)!r}" for k in _TIMING_FIELDS))
    return "\n".join(lines) + "\n"


def write_report(path, report: EvalReport) -> Path:
    path = Path(path)
    path.write_text(format_report(report))
    return path


def _fields(tokens, path, lineno) -> dict[str, str]:
    try:
        return dict(t.split("=", 1) for t in tokens)
    except ValueError as exc:
        raise FormatError(f"{path}: line {lineno}: expected key=value fields") from exc


def read_report(path) -> EvalReport:
    path = Path(path)
    lines = path.read_text().splitlines()
    head = lines[0].split() if lines else []
    if len(head) != 2 or head[0] != "mbf-eval-report":
        raise MagicMismatchError(f"{path}: line 1: not an evaluation report")
    _check_version(int(head[1]), REPORT_VERSION, path)
    splits, timing = [], None
    for lineno, line in enumerate(lines[1:], start=2):
        tokens = line.split()
        if tokens[:1] == ["split"]:
            f = _fields(tokens[2:], path, lineno)
            ids = {k: tuple(v for v in f[k].split(",") if v) for k in ("train", "val", "test")}
            splits.append(SplitMetrics(
                index=int(tokens[1]), **ids, **{k: float(f[k]) for k in _SPLIT_FLOATS},
                best_epoch=int(f["best_epoch"]), stopped_epoch=int(f["stopped_epoch"]),
            ))
        elif tokens[:1] == ["timing"]:
            f = _fields(tokens[1:], path, lineno)
            kinds = {fl.name: fl.type for fl in dataclasses.fields(Timing)}
            timing = Timing(**{k: _parse_typed(v, kinds[k], path, lineno) for k, v in f.items()})
    return EvalReport(splits, timing)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

# dark blue, cyan, green, yellow, red
COLOUR_ANCHORS = np.array([
    [0, 0, 139], [0, 255, 255], [0, 255, 0], [255, 255, 0], [255, 0, 0],
], dtype=np.float64)
DIVIDER = (255, 255, 255)
DEFAULT_BOUNDS = (0.0, 4.0)


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5).astype(np.int64)


def colour_lut() -> np.ndarray:
    """256x3 uint8 table interpolated piecewise-linearly through the anchors."""
    pos = np.linspace(0.0, 1.0, len(COLOUR_ANCHORS))
    s = np.arange(256) / 255.0
    lut = np.stack([np.interp(s, pos, COLOUR_ANCHORS[:, c]) for c in range(3)], axis=1)
    return _round_half_up(lut).astype(np.uint8)


def map_to_rgb(values: np.ndarray, lo: float = DEFAULT_BOUNDS[0], hi: float = DEFAULT_BOUNDS[1],
               style: str = "colour") -> np.ndarray:
    """``(H, W, 3)`` uint8 image; NaN cells are black, others clamped to ``[lo, hi]``."""
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise ValueError(f"render bounds must be finite, got ({lo}, {hi})")
    if not lo < hi:
        raise ValueError(f"render bounds need lo < hi, got ({lo}, {hi})")
    values = np.asarray(values, dtype=np.float64)
    valid = np.isfinite(values)
    frac = np.clip((np.where(valid, values, lo) - lo) / (hi - lo), 0.0, 1.0)
    level = _round_half_up(frac * 255.0)
    if style == "gray":
        rgb = np.repeat(level[..., None], 3, axis=2).astype(np.uint8)
    elif style == "colour":
        rgb = colour_lut()[level]
    else:
        raise ValueError(f"unknown render style {style!r}")
    rgb[~valid] = 0
    return rgb


def side_by_side(left: np.ndarray, right: np.ndarray, divider: int = 2) -> np.ndarray:
    """Concatenate two RGB images with a ``divider``-pixel white bar between them."""
    if left.shape[0] != right.shape[0]:
        raise ValueError("side-by-side images need equal heights")
    bar = np.empty((left.shape[0], divider, 3), dtype=np.uint8)
    bar[:] = DIVIDER
    return np.concatenate([left, bar, right], axis=1)


def ppm_bytes(rgb: np.ndarray, scale: int = 1) -> bytes:
    if scale > 1:
        rgb = np.repeat(np.repeat(rgb, scale, axis=0), scale, axis=1)
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes()


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    # the header ends with exactly one whitespace byte; pixel bytes may look like whitespace
    head = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if head is None:
        raise MagicMismatchError(f"{path}: offset 0: not a binary PPM")
    w, h, maxval = (int(g) for g in head.groups())
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported")
    data = np.frombuffer(raw[head.end():], dtype=np.uint8)
    if data.size != w * h * 3:
        raise CountMismatchError(f"{path}: expected {w * h * 3} bytes of pixels, found {data.size}")
    return data.reshape(h, w, 3)


def render_map(path, values: np.ndarray, lo: float = DEFAULT_BOUNDS[0],
               hi: float = DEFAULT_BOUNDS[1], style: str = "colour",
               right: np.ndarray | None = None, scale: int = 1) -> Path:
    """Write ``values`` as a PPM; with ``right``, the two maps side by side."""
    rgb = map_to_rgb(values, lo, hi, style)
    if right is not None:
        rgb = side_by_side(rgb, map_to_rgb(right, lo, hi, style))
    path = Path(path)
    path.write_bytes(ppm_bytes(rgb, scale))
    return path
