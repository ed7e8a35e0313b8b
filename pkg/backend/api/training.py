import asyncio
from typing import Dict, List, Optional

from fastapi import APIRouter, Depends, Request
from pydantic import BaseModel

from ..services.storage_service import load_dataset
from .common import RunOptions, build_config, get_storage_service, http_error, relative_summary

router = APIRouter()


class TrainRequest(RunOptions):
    dataset: str
    out: str
    init_checkpoint: Optional[str] = None


class TrainResponse(BaseModel):
    checkpoint: str
    log: str
    steps: int
    final_terms: Dict[str, float]
    wall_time_s: float


async def get_training_service(request: Request):
    """Dependency to get training service instance"""
    return request.app.state.training_service


async def _run(kind: str, request: TrainRequest, storage, training_service) -> TrainResponse:
    config = build_config(request, storage)
    dataset = load_dataset(storage.resolve(request.dataset))
    init = str(storage.resolve(request.init_checkpoint)) if request.init_checkpoint else None
    method = training_service.train_prior if kind == "prior" else training_service.train_full
    result = await asyncio.to_thread(method, dataset, config, str(storage.resolve(request.out)), init)
    return TrainResponse(**relative_summary(result.to_dict(), storage))


@router.post("/prior", response_model=TrainResponse)
async def train_prior(
    request: TrainRequest,
    storage=Depends(get_storage_service),
    training_service=Depends(get_training_service)
):
    """Pre-train geometry on the scans of a dataset"""
    try:
        return await _run("prior", request, storage, training_service)
    except Exception as e:
        raise http_error("training prior", e)


@router.post("/full", response_model=TrainResponse)
async def train_full(
    request: TrainRequest,
    storage=Depends(get_storage_service),
    training_service=Depends(get_training_service)
):
    """Train all parameters on the images of a dataset"""
    try:
        return await _run("full", request, storage, training_service)
    except Exception as e:
        raise http_error("training model", e)


@router.get("/runs")
async def list_runs(storage=Depends(get_storage_service)) -> List[Dict]:
    """List training runs under the data directory"""
    try:
        return storage.list_entries("runs")
    except Exception as e:
        raise http_error("listing runs", e)
