#!/usr/bin/env python3
"""
Key-value config files for the AnimaRL simulator
Reads and writes dotenv-style KEY=value files for pydantic config models
"""

from pathlib import Path
from typing import Dict, Optional, Type, TypeVar, Union

from dotenv import dotenv_values
from pydantic import BaseModel

ModelT = TypeVar("ModelT", bound=BaseModel)


def _format_value(value) -> str:
    """Render a value so it parses back to the same thing"""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        # repr() is the shortest string that round-trips the double exactly
        return repr(value)
    return str(value)


def write_key_values(
    path: Union[str, Path],
    values: Dict[str, object],
    header: Optional[str] = None
) -> Path:
    """
    Write a flat mapping as KEY=value lines

    Args:
        path: Output file
        values: Mapping of field name to scalar value (keys are upper-cased)
        header: Optional comment placed on the first lines

    Returns:
        Path that was written
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    lines = []
    if header:
        for line in header.splitlines():
            lines.append(f"# {line}")
    for key, value in values.items():
        lines.append(f"{key.upper()}={_format_value(value)}")

    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    return path


def read_key_values(path: Union[str, Path]) -> Dict[str, str]:
    """Read a KEY=value file into a lower-cased mapping of raw strings"""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    raw = dotenv_values(path)
    return {key.lower(): value for key, value in raw.items() if value is not None}


def save_model(model: BaseModel, path: Union[str, Path], header: Optional[str] = None) -> Path:
    """Write every field of a pydantic model to a key-value file"""
    return write_key_values(path, model.model_dump(), header=header)


def load_model(model_cls: Type[ModelT], path: Union[str, Path]) -> ModelT:
    """
    Load a pydantic model from a key-value file

    Missing keys take the model defaults; unknown keys are rejected by
    models declared with extra="forbid".
    """
    return model_cls.model_validate(read_key_values(path))
