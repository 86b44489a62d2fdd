"""
File persistence for bundles, trajectories, reports and checkpoints.
All reading and writing lives here, separate from the command logic.
"""
import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel

from .dynamics import Trajectory
from .errors import DataError, ParseError
from .graph import DatasetBundle, SplitMasks, build_graph
from .models import OscillatorGNN
from .schemas import ModelConfig
from .tensor import RealTensor

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
CHECKPOINT_DTYPE = "<f8"


def _fmt(value: float) -> str:
    return repr(float(value))


def read_rows(path: Path, header: Optional[Sequence[str]] = None) -> List[tuple]:
    """Rows of a CSV file as (line number, fields); the header, if expected, is checked and skipped."""
    if not path.exists():
        raise DataError(f"missing file {path}", path=str(path))
    rows = []
    with path.open(newline="") as handle:
        for line_no, fields in enumerate(csv.reader(handle), start=1):
            if not fields or all(not f.strip() for f in fields):
                continue
            if header is not None and line_no == 1:
                if [f.strip() for f in fields] != list(header):
                    raise ParseError(f"expected header {','.join(header)}", path, line_no)
                continue
            rows.append((line_no, [f.strip() for f in fields]))
    return rows


def parse_number(text: str, kind, path: Path, line: int):
    try:
        return kind(text)
    except ValueError:
        raise ParseError(f"cannot parse {text!r} as {kind.__name__}", path, line) from None


# ---------------------------------------------------------------------------
# dataset bundles

def load_bundle(directory: PathLike) -> DatasetBundle:
    """
    Read a dataset bundle directory.

    Args:
        directory: folder holding manifest.json, edges.csv, features.csv,
            labels.csv and optionally graphs.csv and masks.csv

    Returns:
        The validated bundle; masks are attached when masks.csv exists
    """
    root = Path(directory)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"missing file {manifest_path}", path=str(manifest_path))
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", manifest_path, exc.lineno) from None
    for key in ("n", "d", "task"):
        if key not in manifest:
            raise ParseError(f"manifest is missing key {key!r}", manifest_path, None)
    n, d, task = int(manifest["n"]), int(manifest["d"]), manifest["task"]

    edges_path = root / "edges.csv"
    edges = []
    for line, fields in read_rows(edges_path, header=("src", "dst")):
        if len(fields) != 2:
            raise ParseError(f"expected 2 fields, got {len(fields)}", edges_path, line)
        i, j = (parse_number(f, int, edges_path, line) for f in fields)
        if not (0 <= i < n and 0 <= j < n):
            raise ParseError(f"edge endpoint out of range [0, {n})", edges_path, line)
        edges.append((i, j))

    features_path = root / "features.csv"
    rows = read_rows(features_path)
    if len(rows) != n:
        raise ParseError(f"expected {n} feature rows, got {len(rows)}", features_path, None)
    features = np.zeros((n, d))
    for k, (line, fields) in enumerate(rows):
        if len(fields) != d:
            raise ParseError(f"expected {d} features, got {len(fields)}", features_path, line)
        features[k] = [parse_number(f, float, features_path, line) for f in fields]

    graph_ids = None
    graphs_path = root / "graphs.csv"
    if graphs_path.exists():
        graph_ids = np.array([parse_number(f[0], int, graphs_path, line) for line, f in read_rows(graphs_path)], dtype=np.int64)
        if graph_ids.shape[0] != n:
            raise ParseError(f"expected {n} graph ids, got {graph_ids.shape[0]}", graphs_path, None)

    labels_path = root / "labels.csv"
    kind = float if task == "graph-reg" else int
    label_rows = read_rows(labels_path)
    if task == "node-class":
        expected = n
    else:
        expected = int(graph_ids.max()) + 1 if graph_ids is not None and n else 0
    if graph_ids is not None or task == "node-class":
        if len(label_rows) != expected:
            extra = label_rows[expected][0] if len(label_rows) > expected else None
            raise ParseError(f"expected {expected} label rows, got {len(label_rows)}", labels_path, extra)
    labels = np.array([parse_number(f[0], kind, labels_path, line) for line, f in label_rows])

    masks = None
    masks_path = root / "masks.csv"
    if masks_path.exists():
        flags = np.array([[parse_number(v, int, masks_path, line) for v in f] for line, f in read_rows(masks_path, header=("train", "val", "test"))], dtype=bool)
        masks = SplitMasks(flags[:, 0], flags[:, 1], flags[:, 2])

    try:
        bundle = DatasetBundle(
            graph=build_graph(edges, n),
            features=RealTensor(features),
            labels=labels,
            task=task,
            num_classes=int(manifest.get("num_classes", 0)),
            graph_ids=graph_ids,
            masks=masks,
        )
    except DataError:
        raise
    except Exception as exc:
        raise DataError(f"inconsistent bundle {root}: {exc}", path=str(root)) from exc
    logger.info("Loaded %s bundle from %s: %d nodes, %d edges", task, root, n, bundle.graph.num_edges)
    return bundle


def write_bundle(bundle: DatasetBundle, directory: PathLike) -> Path:
    """Write ``bundle`` in the layout ``load_bundle`` reads."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    write_json(root / "manifest.json", {
        "n": bundle.graph.n,
        "d": bundle.features.cols,
        "task": bundle.task,
        "num_classes": bundle.num_classes,
    })
    write_csv(root / "edges.csv", ("src", "dst"), bundle.graph.edge_pairs().tolist())
    with (root / "features.csv").open("w", newline="") as handle:
        writer = csv.writer(handle)
        for row in bundle.features.data:
            writer.writerow([_fmt(v) for v in row])
    with (root / "labels.csv").open("w", newline="") as handle:
        writer = csv.writer(handle)
        for value in bundle.labels:
            writer.writerow([_fmt(value) if bundle.task == "graph-reg" else int(value)])
    if bundle.graph_ids is not None:
        with (root / "graphs.csv").open("w", newline="") as handle:
            csv.writer(handle).writerows([[int(g)] for g in bundle.graph_ids])
    if bundle.masks is not None:
        m = bundle.masks
        write_csv(root / "masks.csv", ("train", "val", "test"), np.stack([m.train, m.val, m.test], axis=1).astype(int).tolist())
    return root


# ---------------------------------------------------------------------------
# generic outputs

def write_json(path: PathLike, payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(payload, BaseModel):
        payload = payload.model_dump()
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=float) + "\n")
    return path


def read_json(path: PathLike) -> Any:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file {path}", path=str(path))
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", path, exc.lineno) from None


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def write_models_csv(path: PathLike, records: Sequence[BaseModel]) -> Path:
    """One CSV row per pydantic record, columns in field order."""
    if not records:
        raise DataError("no rows to write", path=str(path))
    header = list(type(records[0]).model_fields)
    return write_csv(path, header, ([getattr(r, k) for k in header] for r in records))


def write_trajectory(path: PathLike, traj: Trajectory, system: str) -> Path:
    """Long-format trajectory: one row per (time, node).

    Columns are ``t,node,re,im`` for Stuart-Landau states, ``t,node,x,v`` for
    harmonic states stacked as [x; v] and ``t,node,phi`` for Kuramoto phases.
    """
    states = np.asarray(traj.states)
    if system == "sl":
        header = ("t", "node", "re", "im")
        rows = ((t, k, z.real, z.imag) for t, s in zip(traj.times, states) for k, z in enumerate(s))
    elif system == "harmonic":
        n = states.shape[1] // 2
        header = ("t", "node", "x", "v")
        rows = ((t, k, s[k].real, s[n + k].real) for t, s in zip(traj.times, states) for k in range(n))
    else:
        header = ("t", "node", "phi")
        rows = ((t, k, p.real) for t, s in zip(traj.times, states) for k, p in enumerate(s))
    return write_csv(path, header, ([float(r[0]), int(r[1]), *map(float, r[2:])] for r in rows))


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(model: OscillatorGNN, directory: PathLike) -> Path:
    """
    Save model parameters as a JSON manifest plus one flat binary file.

    The binary holds every parameter, little-endian float64, in manifest
    order; the manifest maps each name to its element offset and shape.
    """
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    index: Dict[str, Dict[str, Any]] = {}
    offset = 0
    chunks = []
    for name, values in model.state_dict().items():
        index[name] = {"offset": offset, "shape": list(values.shape)}
        chunks.append(values.astype(CHECKPOINT_DTYPE).ravel())
        offset += values.size
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype=CHECKPOINT_DTYPE)
    (root / "params.bin").write_bytes(blob.astype(CHECKPOINT_DTYPE).tobytes())
    write_json(root / "checkpoint.json", {
        "model": model.cfg.model_dump(),
        "in_dim": model.in_dim,
        "out_dim": model.out_dim,
        "seed": model.seed,
        "dtype": CHECKPOINT_DTYPE,
        "index": index,
    })
    return root


def load_checkpoint(directory: PathLike) -> OscillatorGNN:
    root = Path(directory)
    manifest = read_json(root / "checkpoint.json")
    bin_path = root / "params.bin"
    if not bin_path.exists():
        raise DataError(f"missing file {bin_path}", path=str(bin_path))
    blob = np.frombuffer(bin_path.read_bytes(), dtype=manifest.get("dtype", CHECKPOINT_DTYPE))
    model = OscillatorGNN(ModelConfig(**manifest["model"]), manifest["in_dim"], manifest["out_dim"], seed=manifest["seed"])
    state = {}
    for name, entry in manifest["index"].items():
        size = int(np.prod(entry["shape"]))
        start = int(entry["offset"])
        if start + size > blob.shape[0]:
            raise DataError(f"checkpoint truncated at parameter {name}", path=str(bin_path))
        state[name] = blob[start:start + size].reshape(entry["shape"]).astype(np.float64)
    model.load_state_dict(state)
    return model
