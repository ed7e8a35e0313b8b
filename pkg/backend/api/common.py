from typing import Any, Dict, List, Optional

from fastapi import HTTPException, Request
from pydantic import BaseModel, Field, ValidationError

from ..config import RunConfig, load_run_config


class RunOptions(BaseModel):
    """Run configuration as the CLI takes it: a config file plus dotted overrides."""

    config: Optional[str] = None
    overrides: List[str] = Field(default_factory=list)
    seed: Optional[int] = None


def build_config(options: RunOptions, storage) -> RunConfig:
    path = str(storage.resolve(options.config)) if options.config else None
    overrides = list(options.overrides)
    if options.seed is not None:
        overrides.append(f"seed={options.seed}")
    # requests run without a terminal
    overrides.extend(["train.progress=false", "fit.progress=false"])
    return load_run_config(path, overrides)


def http_error(action: str, e: Exception) -> HTTPException:
    """Map service exceptions onto status codes: 400 bad input, 404 missing file, 500 otherwise."""
    if isinstance(e, HTTPException):
        return e
    if isinstance(e, FileNotFoundError):
        return HTTPException(status_code=404, detail=f"Error {action}: {str(e)}")
    if isinstance(e, (ValueError, ValidationError, KeyError)):
        return HTTPException(status_code=400, detail=f"Error {action}: {str(e)}")
    return HTTPException(status_code=500, detail=f"Error {action}: {str(e)}")


async def get_storage_service(request: Request):
    """Dependency to get storage service instance"""
    return request.app.state.storage_service


def relative_summary(summary: Dict[str, Any], storage) -> Dict[str, Any]:
    """Report paths relative to the data directory."""
    root = str(storage.data_dir)
    out = {}
    for key, value in summary.items():
        if isinstance(value, str) and value.startswith(root):
            value = value[len(root):].lstrip("/\\")
        out[key] = value
    return out
