"""Case files, stratified splitting, and a synthetic generator with planted signal.

On disk a dataset is JSON-lines: a header line
``{"partition_names": [...], "class_names": [...]}`` followed by one case per
line, ``{"id", "partitions": {name: payload}, "global"?, "labels"}``. A payload
is either a string (text mode) or a list of floats (vector mode).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import ConfigurationError, InputError

GLOBAL_SEPARATOR = "\n\n"
SPLIT_STREAM = 1    # sub-stream id of the run seed used for the split shuffle

Payload = Union[str, tuple[float, ...]]


@dataclass(frozen=True)
class Case:
    id: str
    partitions: tuple[Payload, ...]
    global_payload: Payload | None
    labels: tuple[int, ...]

    @property
    def is_text(self) -> bool:
        return isinstance(self.partitions[0], str) if self.partitions else isinstance(
            self.global_payload, str)


@dataclass(frozen=True)
class Dataset:
    cases: tuple[Case, ...]
    partition_names: tuple[str, ...]
    class_names: tuple[str, ...]

    def __post_init__(self):
        if not self.cases:
            raise InputError("dataset is empty")
        n, c = len(self.partition_names), len(self.class_names)
        modes, dims = set(), set()
        for case in self.cases:
            if len(case.partitions) != n or len(case.labels) != c:
                raise InputError(f"case {case.id!r} does not match N={n}, C={c}")
            for p in (*case.partitions, case.global_payload):
                if p is None:
                    continue
                modes.add(isinstance(p, str))
                if not isinstance(p, str):
                    dims.add(len(p))
        if len(modes) > 1:
            raise InputError("dataset mixes text and vector payloads")
        if len(dims) > 1:
            raise InputError(f"vector payloads have inconsistent dimensions {sorted(dims)}")

    @property
    def n_agents(self) -> int:
        return len(self.partition_names)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def mode(self) -> str:
        return "text" if self.cases[0].is_text else "vector"

    @property
    def dim(self) -> int | None:
        if self.mode == "text":
            return None
        first = self.cases[0]
        return len(first.partitions[0] if first.partitions else first.global_payload)

    @property
    def ids(self) -> list[str]:
        return [c.id for c in self.cases]

    def labels(self) -> np.ndarray:
        return np.array([c.labels for c in self.cases], dtype=np.float64)

    def subset(self, ids: Sequence[str]) -> "Dataset":
        by_id = {c.id: c for c in self.cases}
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise KeyError(f"unknown case ids: {missing[:5]}")
        return Dataset(tuple(by_id[i] for i in ids), self.partition_names, self.class_names)


def _payload(value, lineno: int, what: str) -> Payload:
    if isinstance(value, str):
        return value
    if isinstance(value, list) and all(isinstance(v, (int, float)) and not isinstance(v, bool)
                                       for v in value):
        return tuple(float(v) for v in value)
    raise InputError(f"line {lineno}: {what} must be a string or a list of numbers")


def _parse_case(obj: dict, lineno: int, names: Sequence[str], n_classes: int) -> Case:
    try:
        cid, parts, labels = obj["id"], obj["partitions"], obj["labels"]
    except (KeyError, TypeError) as exc:
        raise InputError(f"line {lineno}: missing field {exc}") from None
    if not isinstance(parts, dict) or len(parts) != len(names) or set(parts) != set(names):
        got = len(parts) if isinstance(parts, dict) else "non-object"
        raise InputError(
            f"line {lineno}: expected {len(names)} partitions {list(names)}, got {got}")
    if not isinstance(labels, list) or len(labels) != n_classes:
        raise InputError(f"line {lineno}: expected {n_classes} labels, got "
                         f"{len(labels) if isinstance(labels, list) else labels!r}")
    if any(lab not in (0, 1) or isinstance(lab, bool) for lab in labels):
        raise InputError(f"line {lineno}: labels must be 0 or 1")
    payloads = tuple(_payload(parts[name], lineno, f"partition {name!r}") for name in names)
    kinds = {isinstance(p, str) for p in payloads}
    glob = obj.get("global")
    glob = None if glob is None else _payload(glob, lineno, "global")
    if glob is not None:
        kinds.add(isinstance(glob, str))
    if len(kinds) > 1:
        raise InputError(f"line {lineno}: mixed text and vector payloads")
    if any(not isinstance(p, str) for p in payloads):
        dims = {len(p) for p in payloads} | ({len(glob)} if glob is not None else set())
        if len(dims) > 1:
            raise InputError(f"line {lineno}: vector payloads have dimensions {sorted(dims)}")
    if glob is None:
        if not payloads:
            raise InputError(f"line {lineno}: no partitions and no global payload")
        if isinstance(payloads[0], str):
            glob = GLOBAL_SEPARATOR.join(payloads)
        else:
            glob = tuple(float(v) for v in np.mean(np.array(payloads), axis=0))
    return Case(str(cid), payloads, glob, tuple(int(v) for v in labels))


def load_dataset(path: str | Path, n_agents: int | None = None,
                 n_classes: int | None = None) -> Dataset:
    """Read and validate a JSON-lines dataset; errors cite the 1-based line number."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    cases: list[Case] = []
    names = classes = None
    modes: dict[bool, int] = {}
    dims: dict[int, int] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            if names is None:
                if not isinstance(obj, dict) or "partition_names" not in obj:
                    raise InputError(f"line {lineno}: expected header with partition_names")
                names = tuple(obj["partition_names"])
                classes = tuple(obj["class_names"])
                if n_agents is not None and len(names) != n_agents:
                    raise InputError(f"line {lineno}: header declares {len(names)} partitions, "
                                     f"expected {n_agents}")
                if n_classes is not None and len(classes) != n_classes:
                    raise InputError(f"line {lineno}: header declares {len(classes)} classes, "
                                     f"expected {n_classes}")
                continue
            case = _parse_case(obj, lineno, names, len(classes))
            text = case.is_text
            modes.setdefault(text, lineno)
            if len(modes) > 1:
                raise InputError(f"line {lineno}: mixed text/vector modes "
                                 f"(line {modes[not text]} uses the other mode)")
            if not text:
                dim = len(case.global_payload)
                dims.setdefault(dim, lineno)
                if len(dims) > 1:
                    raise InputError(f"line {lineno}: vector dimension {dim} differs from "
                                     f"line {min(dims.values())}")
            cases.append(case)
    if names is None or not cases:
        raise InputError(f"{path}: no cases")
    return Dataset(tuple(cases), names, classes)


def _payload_json(p: Payload):
    return p if isinstance(p, str) else list(p)


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"partition_names": list(dataset.partition_names),
                             "class_names": list(dataset.class_names)}) + "\n")
        for case in dataset.cases:
            rec = {"id": case.id,
                   "partitions": {n: _payload_json(p)
                                  for n, p in zip(dataset.partition_names, case.partitions)},
                   "labels": list(case.labels)}
            if case.global_payload is not None:
                rec["global"] = _payload_json(case.global_payload)
            fh.write(json.dumps(rec) + "\n")


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.75
    seed: int = 0


def stratified_split(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Greedy multi-label stratification.

    Cases are visited rarest-positive-label first (seeded shuffle breaks ties).
    Each goes to the side that leaves the smallest summed per-class gap between
    train and test positive rates, where rates use the target side sizes. Ties
    go to the side with more relative room left.
    """
    n = len(dataset.cases)
    n_train = int(round(spec.train_fraction * n))
    if not 0.0 < spec.train_fraction < 1.0 or n_train == 0 or n_train == n:
        raise ConfigurationError(
            f"train_fraction={spec.train_fraction} on {n} cases leaves a side empty")
    n_test = n - n_train
    y = dataset.labels()
    pos_count = y.sum(axis=0)
    order = np.random.default_rng([spec.seed, SPLIT_STREAM]).permutation(n)

    def rarity(i: int) -> float:
        present = pos_count[y[i] > 0]
        return float(present.min()) if present.size else np.inf

    order = sorted(order, key=rarity)  # stable: shuffle order survives among equals
    counts = {"train": np.zeros(y.shape[1]), "test": np.zeros(y.shape[1])}
    sizes = {"train": 0, "test": 0}
    target = {"train": n_train, "test": n_test}
    assign = {}
    for i in order:
        open_sides = [s for s in ("train", "test") if sizes[s] < target[s]]
        if len(open_sides) == 1:
            side = open_sides[0]
        else:
            def cost(side: str) -> tuple[float, float]:
                tr = counts["train"] + (y[i] if side == "train" else 0)
                te = counts["test"] + (y[i] if side == "test" else 0)
                gap = np.abs(tr / n_train - te / n_test).sum()
                room = (target[side] - sizes[side]) / target[side]
                return round(float(gap), 12), -room
            side = min(open_sides, key=cost)
        counts[side] += y[i]
        sizes[side] += 1
        assign[int(i)] = side
    train_ids = [c.id for j, c in enumerate(dataset.cases) if assign[j] == "train"]
    test_ids = [c.id for j, c in enumerate(dataset.cases) if assign[j] == "test"]
    return dataset.subset(train_ids), dataset.subset(test_ids)


def split_manifest(train: Dataset, test: Dataset, seed: int) -> dict:
    return {"seed": seed, "train_ids": train.ids, "test_ids": test.ids}


@dataclass(frozen=True)
class SynthSpec:
    """``alpha[i, k]`` is agent i's signal strength for class k; zero rows are pure noise."""

    n_cases: int
    n_agents: int
    n_classes: int
    dim: int
    alpha: np.ndarray
    noise_std: float = 0.5
    seed: int = 0

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=np.float64)
        object.__setattr__(self, "alpha", alpha)
        if min(self.n_cases, self.n_agents, self.n_classes, self.dim) < 1:
            raise ConfigurationError("n_cases, n_agents, n_classes, dim must be positive")
        if self.dim < self.n_classes:
            raise ConfigurationError(
                f"dim={self.dim} < classes={self.n_classes}: no orthonormal class directions")
        if alpha.shape != (self.n_agents, self.n_classes):
            raise ConfigurationError(
                f"alpha shape {alpha.shape} != ({self.n_agents}, {self.n_classes})")
        if not np.all(np.isfinite(alpha)) or np.any(alpha < 0):
            raise ConfigurationError("alpha must be finite and nonnegative")
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be nonnegative")


def planted_alpha(n_agents: int, n_classes: int, strength: float = 2.0) -> np.ndarray:
    """One informative agent per class: class k is carried by agent ``k % n_agents``."""
    alpha = np.zeros((n_agents, n_classes))
    for k in range(n_classes):
        alpha[k % n_agents, k] = strength
    return alpha


def class_directions(dim: int, n_classes: int, seed: int) -> np.ndarray:
    """Orthonormal columns ``(dim, n_classes)`` from a seeded Gaussian QR."""
    rng = np.random.default_rng([seed, 1])
    q, _ = np.linalg.qr(rng.standard_normal((dim, n_classes)))
    return q


def synth_generate(spec: SynthSpec) -> tuple[Dataset, np.ndarray]:
    """Vector-mode dataset plus the planted ``alpha`` matrix."""
    rng = np.random.default_rng([spec.seed, 0])
    u = class_directions(spec.dim, spec.n_classes, spec.seed)
    y = rng.integers(0, 2, size=(spec.n_cases, spec.n_classes))
    sign = 2.0 * y - 1.0
    vecs = np.empty((spec.n_cases, spec.n_agents, spec.dim))
    for i in range(spec.n_agents):
        vecs[:, i, :] = (sign * spec.alpha[i]) @ u.T
        if spec.noise_std > 0:
            vecs[:, i, :] += rng.normal(0.0, spec.noise_std, size=(spec.n_cases, spec.dim))
    glob = vecs.mean(axis=1)
    width = len(str(spec.n_cases - 1))
    cases = tuple(
        Case(f"case{j:0{width}d}",
             tuple(tuple(float(v) for v in vecs[j, i]) for i in range(spec.n_agents)),
             tuple(float(v) for v in glob[j]),
             tuple(int(v) for v in y[j]))
        for j in range(spec.n_cases))
    ds = Dataset(cases, tuple(f"agent{i}" for i in range(spec.n_agents)),
                 tuple(f"class{k}" for k in range(spec.n_classes)))
    return ds, spec.alpha.copy()


def ground_truth_record(alpha: np.ndarray, class_names: Sequence[str],
                        partition_names: Sequence[str]) -> dict:
    return {
        "alpha": alpha.tolist(),
        "informative": {c: [partition_names[i] for i in np.flatnonzero(alpha[:, k] > 0)]
                        for k, c in enumerate(class_names)},
    }
