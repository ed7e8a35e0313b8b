import asyncio
from typing import Any, Dict, List

from fastapi import APIRouter, Depends, Request
from pydantic import BaseModel

from ..core.kinematics import available_skeletons
from .common import RunOptions, build_config, get_storage_service, http_error

router = APIRouter()


class GenerateRequest(RunOptions):
    out: str = "datasets/synthetic"


class GenerateResponse(BaseModel):
    dataset: str
    subjects: List[str]
    cameras: List[str]
    frame_count: int
    scan_count: int


class DatasetInfo(BaseModel):
    name: str
    path: str
    is_directory: bool


async def get_synthetic_service(request: Request):
    """Dependency to get synthetic service instance"""
    return request.app.state.synthetic_service


@router.get("/skeletons", response_model=List[str])
async def list_skeletons():
    """List bundled skeleton definitions"""
    try:
        return available_skeletons()
    except Exception as e:
        raise http_error("listing skeletons", e)


@router.get("/datasets", response_model=List[DatasetInfo])
async def list_datasets(storage=Depends(get_storage_service)):
    """List datasets under the data directory"""
    try:
        return storage.list_entries("datasets")
    except Exception as e:
        raise http_error("listing datasets", e)


@router.post("/generate", response_model=GenerateResponse)
async def generate_dataset(
    request: GenerateRequest,
    storage=Depends(get_storage_service),
    synthetic_service=Depends(get_synthetic_service)
):
    """Emit a synthetic capsule-rig dataset"""
    try:
        config = build_config(request, storage)
        out_dir = storage.resolve(request.out)
        manifest: Dict[str, Any] = await asyncio.to_thread(
            synthetic_service.emit_dataset, str(out_dir), config.synthetic, config.seed, False
        )
        return GenerateResponse(
            dataset=request.out,
            subjects=sorted(manifest["subjects"]),
            cameras=sorted(manifest["cameras"]),
            frame_count=manifest["frame_count"],
            scan_count=manifest["scan_count"],
        )
    except Exception as e:
        raise http_error("generating dataset", e)
