"""Datasets, model structure, regressor matrices and synthetic scenarios.

One working condition contributes one multi-channel input series and one
output series.  A fixed tap count per channel turns each dataset into a
linear regression problem with channel-major parameter blocks.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

NAME_RE = re.compile(r"^(?P<cond>[A-Za-z]+\d+)-(?P<idx>\d+)$")

VALID_ROLES = ("estimation", "validation", "evaluation")


class IngestionError(ValueError):
    """Raised when a dataset file or manifest cannot be parsed."""


def parse_dataset_name(name: str) -> tuple[str, int] | None:
    """Split a name like ``BR30-1`` into (condition, replicate index).

    Returns None when the name does not follow the convention.
    """
    m = NAME_RE.match(name)
    if m is None:
        return None
    return m.group("cond"), int(m.group("idx"))


def condition_of(name: str) -> str:
    """Condition label of a dataset name; the name itself when nonconforming."""
    parsed = parse_dataset_name(name)
    return name if parsed is None else parsed[0]


@dataclass(frozen=True)
class ModelStructure:
    """Tap count per channel and channel count; parameters are channel-major.

    Block j (1-based) of a conforming parameter vector occupies indices
    [(j-1)*taps, j*taps), holding the lag-0..lag-(taps-1) coefficients of
    channel j.
    """

    taps: int
    channels: int

    def __post_init__(self) -> None:
        if self.taps < 1:
            raise ValueError(f"taps must be >= 1, got {self.taps}")
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")

    @property
    def n_theta(self) -> int:
        return self.taps * self.channels

    def block_slice(self, j: int) -> slice:
        """Index slice of channel j's block, j in 1..channels."""
        if not 1 <= j <= self.channels:
            raise IndexError(f"channel index {j} out of range 1..{self.channels}")
        return slice((j - 1) * self.taps, j * self.taps)


@dataclass(frozen=True)
class ParameterVector:
    """Flat coefficient vector with its block layout."""

    values: np.ndarray
    structure: ModelStructure

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", values)
        if values.ndim != 1 or values.size != self.structure.n_theta:
            raise ValueError(
                f"parameter vector has length {values.size}, "
                f"structure requires {self.structure.n_theta}"
            )

    def block(self, j: int) -> np.ndarray:
        """Coefficients of channel j (1-based)."""
        return self.values[self.structure.block_slice(j)]


@dataclass(frozen=True)
class ConditionDataset:
    """Input/output series recorded under one working condition.

    ``inputs`` is L x J (time by channel), ``output`` has length L.  Names
    normally follow ``<COND><speed>-<idx>`` (e.g. ``BR30-1``); other names
    are accepted but flagged.
    """

    name: str
    inputs: np.ndarray
    output: np.ndarray
    channel_names: tuple[str, ...] = ()
    name_nonconforming: bool = field(default=False)

    def __post_init__(self) -> None:
        inputs = np.asarray(self.inputs, dtype=float)
        output = np.asarray(self.output, dtype=float)
        if inputs.ndim != 2:
            raise ValueError("inputs must be a 2-D array (time x channels)")
        if output.ndim != 1:
            raise ValueError("output must be a 1-D array")
        if inputs.shape[0] != output.size:
            raise ValueError(
                f"inputs have {inputs.shape[0]} rows but output has "
                f"{output.size} samples"
            )
        if inputs.shape[0] < 1 or inputs.shape[1] < 1:
            raise ValueError("dataset must have at least one sample and one channel")
        if not np.all(np.isfinite(inputs)) or not np.all(np.isfinite(output)):
            raise ValueError("dataset contains non-finite values")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "output", output)
        object.__setattr__(
            self, "name_nonconforming", parse_dataset_name(self.name) is None
        )

    @property
    def sample_count(self) -> int:
        return self.output.size

    @property
    def n_channels(self) -> int:
        return self.inputs.shape[1]


@dataclass(frozen=True)
class RegressionProblem:
    """Stacked lag-window system Y = Phi @ theta + noise for one condition."""

    Y: np.ndarray
    Phi: np.ndarray
    structure: ModelStructure
    condition_name: str

    def __post_init__(self) -> None:
        Y = np.asarray(self.Y, dtype=float)
        Phi = np.asarray(self.Phi, dtype=float)
        if Phi.ndim != 2 or Y.ndim != 1 or Phi.shape[0] != Y.size:
            raise ValueError("Phi must be M x n_theta with Y of length M")
        if Phi.shape[1] != self.structure.n_theta:
            raise ValueError(
                f"Phi has {Phi.shape[1]} columns, structure requires "
                f"{self.structure.n_theta}"
            )
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "Phi", Phi)

    @property
    def n_rows(self) -> int:
        return self.Y.size


def build_regressor(ds: ConditionDataset, structure: ModelStructure) -> RegressionProblem:
    """Build the lag-window regression problem for one dataset.

    Row for time t (1-based, t = taps..L) holds, per channel j, the window
    [x_j(t), x_j(t-1), ..., x_j(t-taps+1)]; the target row is y(t).  This
    keeps every fully populated window, giving M = L - taps + 1 rows.
    """
    n = structure.taps
    if ds.n_channels != structure.channels:
        raise ValueError(
            f"dataset has {ds.n_channels} channels, structure requires "
            f"{structure.channels}"
        )
    if ds.sample_count < n:
        raise ValueError(
            f"series shorter than tap count: L={ds.sample_count} < n={n}"
        )
    # sliding_window_view yields ascending-lag windows; flip to put lag 0 first.
    blocks = [
        np.lib.stride_tricks.sliding_window_view(ds.inputs[:, j], n)[:, ::-1]
        for j in range(structure.channels)
    ]
    Phi = np.ascontiguousarray(np.hstack(blocks))
    Y = ds.output[n - 1 :].copy()
    return RegressionProblem(Y=Y, Phi=Phi, structure=structure, condition_name=ds.name)


# ---------------------------------------------------------------------------
# Manifest + CSV ingestion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    name: str
    file: str
    role: str
    channels: tuple[str, ...]
    output: str


def load_manifest(path: str | Path) -> list[ManifestEntry]:
    """Read a manifest JSON array of {name, file, role, channels, output}."""
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise IngestionError(f"manifest {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, list) or not raw:
        raise IngestionError(f"manifest {path} must be a non-empty JSON array")
    entries = []
    for i, item in enumerate(raw):
        try:
            role = item["role"]
            if role not in VALID_ROLES:
                raise IngestionError(
                    f"manifest entry {i}: role {role!r} not in {VALID_ROLES}"
                )
            entries.append(
                ManifestEntry(
                    name=item["name"],
                    file=item["file"],
                    role=role,
                    channels=tuple(item["channels"]),
                    output=item["output"],
                )
            )
        except KeyError as exc:
            raise IngestionError(f"manifest entry {i} is missing field {exc}") from exc
    return entries


def load_dataset(path: str | Path, entry: ManifestEntry) -> ConditionDataset:
    """Load one dataset CSV, mapping columns by header name.

    Expected layout: ordinal column ``t`` first, named input channels,
    output column last; extra columns are ignored.  Cell-level problems
    (non-numeric, non-finite, ragged rows) raise IngestionError naming the
    offending row and column.
    """
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"dataset file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        seen: set[str] = set()
        for h in header:
            if h in seen:
                raise IngestionError(f"{path}: duplicate header column {h!r}")
            seen.add(h)
        col_index = {h: i for i, h in enumerate(header)}
        wanted = list(entry.channels) + [entry.output]
        for name in wanted:
            if name not in col_index:
                raise IngestionError(f"{path}: header is missing column {name!r}")
        take = [col_index[name] for name in wanted]

        rows: list[list[float]] = []
        for rownum, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise IngestionError(
                    f"{path}: row {rownum} has {len(row)} cells, header has "
                    f"{len(header)}"
                )
            vals = []
            for idx, colname in zip(take, wanted):
                cell = row[idx].strip()
                try:
                    v = float(cell)
                except ValueError:
                    raise IngestionError(
                        f"{path}: row {rownum}, column {colname!r}: "
                        f"non-numeric cell {cell!r}"
                    ) from None
                if not np.isfinite(v):
                    raise IngestionError(
                        f"{path}: row {rownum}, column {colname!r}: "
                        f"non-finite value {cell!r}"
                    )
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise IngestionError(f"{path}: no data rows")
    data = np.asarray(rows, dtype=float)
    return ConditionDataset(
        name=entry.name,
        inputs=data[:, : len(entry.channels)],
        output=data[:, -1],
        channel_names=entry.channels,
    )


def write_dataset_csv(ds: ConditionDataset, path: str | Path) -> None:
    """Write a dataset in the manifest CSV layout (t, channels..., output)."""
    path = Path(path)
    names = ds.channel_names or tuple(f"s{j+1}" for j in range(ds.n_channels))
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", *names, "y"])
        for t in range(ds.sample_count):
            writer.writerow(
                [t + 1]
                + [f"{v:.17g}" for v in ds.inputs[t]]
                + [f"{ds.output[t]:.17g}"]
            )


# ---------------------------------------------------------------------------
# Synthetic scenarios
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticScenario:
    """Recipe for a benchmark with known group structure.

    Each condition is assigned one of the ground-truth models; irrelevant
    channels must carry exactly-zero blocks in every ground truth.  Inputs
    are unit-variance white noise unless ``ar_coefficient`` is nonzero, in
    which case a first-order autoregression with the same marginal variance
    colors them.
    """

    group_truths: tuple[ParameterVector, ...]
    assignment: dict[str, int]
    noise_sigma: float
    irrelevant_channels: frozenset[int]
    samples_per_condition: int
    seed: int
    ar_coefficient: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "group_truths", tuple(self.group_truths))
        object.__setattr__(
            self, "irrelevant_channels", frozenset(self.irrelevant_channels)
        )
        if not self.group_truths:
            raise ValueError("scenario needs at least one ground-truth model")
        structure = self.group_truths[0].structure
        for g in self.group_truths:
            if g.structure != structure:
                raise ValueError("ground-truth models must share one structure")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.samples_per_condition < structure.taps:
            raise ValueError("samples_per_condition must cover at least one window")
        if not self.assignment:
            raise ValueError("assignment must cover at least one condition")
        for cond, gi in self.assignment.items():
            if not 0 <= gi < len(self.group_truths):
                raise ValueError(f"condition {cond!r} maps to invalid group {gi}")
        for j in self.irrelevant_channels:
            if not 1 <= j <= structure.channels:
                raise ValueError(f"irrelevant channel {j} out of range")
            for g in self.group_truths:
                if np.any(g.block(j) != 0.0):
                    raise ValueError(
                        f"irrelevant channel {j} has nonzero coefficients in a "
                        "ground truth"
                    )
        if not -1.0 < self.ar_coefficient < 1.0:
            raise ValueError("ar_coefficient must lie in (-1, 1)")

    @property
    def structure(self) -> ModelStructure:
        return self.group_truths[0].structure


def _simulate_output(
    inputs: np.ndarray, theta: ParameterVector, noise: np.ndarray
) -> np.ndarray:
    """FIR response with zero initial conditions plus additive noise."""
    structure = theta.structure
    y = np.zeros(inputs.shape[0])
    for j in range(1, structure.channels + 1):
        y += lfilter(theta.block(j), [1.0], inputs[:, j - 1])
    return y + noise


def generate_synthetic(scn: SyntheticScenario) -> list[ConditionDataset]:
    """Draw the scenario's datasets: two per condition, "-1" and "-2".

    The "-1" replicate is meant for estimation and "-2" for validation.
    Output is the exact FIR response of the condition's group model, so on
    every fully populated window Y - Phi @ theta equals the injected noise.
    Deterministic for a fixed seed.
    """
    rng = np.random.default_rng(scn.seed)
    structure = scn.structure
    L = scn.samples_per_condition
    channel_names = tuple(f"s{j+1}" for j in range(structure.channels))
    datasets = []
    for cond, gi in scn.assignment.items():
        theta = scn.group_truths[gi]
        for replicate in (1, 2):
            white = rng.standard_normal((L, structure.channels))
            if scn.ar_coefficient != 0.0:
                phi = scn.ar_coefficient
                inputs = lfilter(
                    [np.sqrt(1.0 - phi * phi)], [1.0, -phi], white, axis=0
                )
            else:
                inputs = white
            noise = scn.noise_sigma * rng.standard_normal(L)
            datasets.append(
                ConditionDataset(
                    name=f"{cond}-{replicate}",
                    inputs=inputs,
                    output=_simulate_output(inputs, theta, noise),
                    channel_names=channel_names,
                )
            )
    return datasets


def scenario_from_config(config: dict) -> SyntheticScenario:
    """Build a scenario from its JSON dict form (see the synth CLI command)."""
    try:
        structure = ModelStructure(
            taps=int(config["taps"]), channels=int(config["channels"])
        )
        truths = tuple(
            ParameterVector(np.asarray(v, dtype=float), structure)
            for v in config["group_truths"]
        )
        return SyntheticScenario(
            group_truths=truths,
            assignment={str(k): int(v) for k, v in config["assignment"].items()},
            noise_sigma=float(config["noise_sigma"]),
            irrelevant_channels=frozenset(
                int(j) for j in config.get("irrelevant_channels", ())
            ),
            samples_per_condition=int(config["samples_per_condition"]),
            seed=int(config["seed"]),
            ar_coefficient=float(config.get("ar_coefficient", 0.0)),
        )
    except KeyError as exc:
        raise IngestionError(f"scenario config is missing field {exc}") from exc
