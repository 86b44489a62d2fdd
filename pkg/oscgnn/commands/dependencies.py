"""
Shared helpers for the command handlers.
Argument parsing that more than one command needs: graph specs, parameter
lists, configuration loading with overrides, and output directories.
"""
import json
import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from ..errors import ConfigError, UsageError
from ..graph import DatasetBundle, SparseGraph, SplitMasks, build_graph, complete_graph, make_graph_task, make_sbm, make_splits, ring_graph
from ..schemas import ExperimentConfig
from .. import storage

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def validation_errors(exc: ValidationError) -> List[Dict[str, str]]:
    """Flatten a pydantic error into field / message / type records."""
    return [
        {"field": " -> ".join(str(loc) for loc in error["loc"]) or "<root>", "message": error["msg"], "type": error["type"]}
        for error in exc.errors()
    ]


def config_error(exc: ValidationError, what: str = "configuration") -> ConfigError:
    errors = validation_errors(exc)
    keys = sorted({e["field"] for e in errors})
    return ConfigError(f"invalid {what}: {', '.join(keys)}", keys=keys, errors=errors)


def parse_graph_spec(spec: str) -> Optional[SparseGraph]:
    """
    Resolve a --graph argument.

    Accepted forms are ``none``, ``ring:N``, ``complete:N`` and ``file:PATH``
    where PATH is a bundle directory or an edges CSV with a ``src,dst`` header.
    """
    if spec == "none":
        return None
    kind, _, value = spec.partition(":")
    if kind in ("ring", "complete"):
        try:
            n = int(value)
        except ValueError:
            raise UsageError(f"graph size must be an integer, got {value!r}") from None
        if n < 2:
            raise UsageError("graph needs at least 2 nodes")
        return ring_graph(n) if kind == "ring" else complete_graph(n)
    if kind == "file":
        path = Path(value)
        if path.is_dir():
            return storage.load_bundle(path).graph
        rows = storage.read_rows(path, header=("src", "dst"))
        edges = [(storage.parse_number(f[0], int, path, line), storage.parse_number(f[1], int, path, line)) for line, f in rows]
        n = max((max(e) for e in edges), default=-1) + 1
        return build_graph(edges, n)
    raise UsageError(f"unknown graph spec {spec!r}; use none, ring:N, complete:N or file:PATH")


def parse_floats(text: str, allowed_counts: Sequence[int], name: str = "--params") -> List[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{name} must be comma-separated numbers, got {text!r}") from None
    if len(values) not in allowed_counts:
        raise UsageError(f"{name} expects {' or '.join(map(str, allowed_counts))} values, got {len(values)}")
    return values


def parse_ints(text: str, name: str) -> List[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{name} must be comma-separated integers, got {text!r}") from None
    if not values:
        raise UsageError(f"{name} needs at least one value")
    return values


def parse_override(item: str) -> Tuple[str, Any]:
    """``key=value`` with the value read as a JSON literal, falling back to a string."""
    key, sep, raw = item.partition("=")
    if not sep or not key.strip():
        raise UsageError(f"override must look like key=value, got {item!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_experiment_config(path: Optional[str], overrides: Sequence[str] = ()) -> ExperimentConfig:
    payload: Dict[str, Any] = {}
    if path:
        payload = storage.read_json(path)
        if not isinstance(payload, dict):
            raise ConfigError("configuration file must hold a JSON object", path=path)
    for item in overrides:
        key, value = parse_override(item)
        payload[key] = value
    try:
        return ExperimentConfig(**payload)
    except ValidationError as exc:
        raise config_error(exc) from None


def resolve_bundle(exp: ExperimentConfig) -> Tuple[DatasetBundle, SplitMasks]:
    """Dataset and split for an experiment: synthetic by name, otherwise a bundle directory."""
    if exp.data == "sbm":
        bundle = make_sbm(exp.sbm_blocks, exp.sbm_nodes_per_block, exp.sbm_p_in, exp.sbm_p_out, exp.sbm_noise, seed=exp.seed)
    elif exp.data in ("graph-class", "graph-reg"):
        bundle = make_graph_task(task=exp.data, seed=exp.seed)
    else:
        bundle = storage.load_bundle(exp.data)
    masks = bundle.masks or make_splits(bundle, exp.train_per_class, exp.val_count, exp.seed)
    return bundle, masks


@contextmanager
def run_directory(out: str, effective: Dict[str, Any]) -> Iterator[Path]:
    """Create the output directory, echo the effective config, and log to run.log for the duration."""
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    storage.write_json(root / "effective_config.json", effective)
    handler = logging.FileHandler(root / "run.log", mode="w")
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    package_logger = logging.getLogger("oscgnn")
    package_logger.addHandler(handler)
    try:
        yield root
    finally:
        package_logger.removeHandler(handler)
        handler.close()


def random_graph(n: int, p: float, rng: np.random.Generator) -> SparseGraph:
    """Erdos-Renyi graph with a ring added so no node is isolated."""
    iu, ju = np.triu_indices(n, k=1)
    hit = rng.random(iu.shape[0]) < p
    edges = list(zip(iu[hit], ju[hit])) + [(i, (i + 1) % n) for i in range(n)]
    return build_graph(edges, n)
