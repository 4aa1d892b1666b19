import json
import os
from pathlib import Path

import pandas as pd
from pydantic import ValidationError

from .errors import ArtifactError
from .models import McEstimate, RunManifest
from .problem import BUNDLED_MODELS, SwitchingModel, bundled_config_path
from .simkit import SamplePath

DEFAULT_THREADS = 1
DEFAULT_NODE_CAP = 250_000


def validate_file_path(file_path: Path) -> Path:
    """Validate that the config path points at a readable regular file."""
    resolved_path = file_path.resolve()

    if not resolved_path.exists():
        raise FileNotFoundError(f"File not found: {file_path}")

    if not resolved_path.is_file():
        raise ValueError(f"Path is not a regular file: {file_path}")

    if resolved_path.suffix.lower() != ".json":
        raise ValueError(f"Model configurations are JSON files: {file_path}")

    return resolved_path


def resolve_config(name_or_path: str) -> Path:
    """Bundled example name (onoff, fed, callcenter) or a path to a JSON config."""
    if name_or_path in BUNDLED_MODELS:
        return bundled_config_path(name_or_path)
    return validate_file_path(Path(name_or_path))


def validate_output_directory(dir_path: Path) -> Path:
    """Validate and create output directory if needed."""
    resolved_path = dir_path.resolve()

    # Ensure it's within the project directory
    cwd = Path.cwd().resolve()
    if not resolved_path.is_relative_to(cwd):
        raise ValueError("Output directory must be within project directory")

    resolved_path.mkdir(parents=True, exist_ok=True)

    return resolved_path


def validate_positive_int(value: str, name: str) -> int:
    """Parse a strictly positive integer setting."""
    try:
        number = int(value)
    except ValueError:
        raise ValueError(f"Invalid {name} value: {value}. Must be an integer.") from None

    if number < 1:
        raise ValueError(f"Invalid {name}: {number}. Must be at least 1.")

    return number


def validate_environment_variables() -> dict[str, int]:
    """Read the optional TRACKSWITCH_* settings, falling back to defaults."""
    env_vars = {
        "TRACKSWITCH_THREADS": DEFAULT_THREADS,
        "TRACKSWITCH_NODE_CAP": DEFAULT_NODE_CAP,
    }

    invalid = []
    for var in env_vars:
        value = os.getenv(var)
        if not value:
            continue
        try:
            env_vars[var] = validate_positive_int(value, var)
        except ValueError as e:
            invalid.append(str(e))

    if invalid:
        raise ValueError(
            "Invalid environment variables:\n"
            + "\n".join(invalid)
            + "\nPlease fix these in your .env file"
        )

    return env_vars


def save_manifest(manifest: RunManifest, out_dir: Path) -> Path:
    path = out_dir / "manifest.json"
    path.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path


def load_manifest(out_dir: Path) -> RunManifest:
    """Load the manifest of a previous run."""
    path = out_dir / "manifest.json"
    if not path.exists():
        raise ArtifactError(f"Missing manifest: {path}")
    try:
        return RunManifest.model_validate(json.loads(path.read_text(encoding="utf-8")))
    except json.JSONDecodeError as e:
        raise ArtifactError(f"Invalid JSON on line {e.lineno} in {path}: {e.msg}") from e
    except ValidationError as e:
        raise ArtifactError(f"Error parsing manifest {path}: {e}") from e


def save_estimate(estimate: McEstimate, path: Path, solved: float | None = None) -> None:
    """Write mc_estimate.csv; `solved` is the solver value at the initial belief when known."""
    row: dict[str, float | int | None] = dict(estimate.model_dump())
    row["solved"] = solved
    pd.DataFrame([row], columns=["mean", "stderr", "count", "seed", "solved"]).to_csv(
        path, index=False, float_format="%.17g"
    )


def save_paths(paths: list[SamplePath], model: SwitchingModel, path: Path) -> None:
    """Write sample paths one after another, separated by blank lines."""
    with path.open("w", encoding="utf-8") as f:
        for k, sample in enumerate(paths):
            if k:
                f.write("\n")
            f.write(sample.to_text(model))


def parse_arrivals(items: list[str], model: SwitchingModel) -> list[tuple[float, int]]:
    """Parse TIME:MARK items; MARK is the 1-based mark index."""
    arrivals = []
    for item in items:
        try:
            time_text, mark_text = item.split(":")
            arrivals.append((float(time_text), int(mark_text) - 1))
        except ValueError:
            raise ValueError(f"Invalid arrival {item!r}. Expected TIME:MARK, e.g. 0.51:2") from None
    for _, j in arrivals:
        if not 0 <= j < model.d:
            raise ValueError(f"Mark index {j + 1} out of range 1..{model.d}")
    return arrivals


def load_schedule(path: Path, model: SwitchingModel) -> list[tuple[float, int]]:
    """Read a switching schedule: CSV with columns time and policy (a policy label)."""
    if not path.is_file():
        raise ValueError(f"Schedule file not found: {path}")
    frame = pd.read_csv(path, dtype={"policy": str})
    missing = {"time", "policy"} - set(frame.columns)
    if missing:
        raise ValueError(f"Schedule {path} lacks columns: {', '.join(sorted(missing))}")
    return [
        (float(t), model.policy_index(label))
        for t, label in zip(frame["time"], frame["policy"].str.strip())
    ]
