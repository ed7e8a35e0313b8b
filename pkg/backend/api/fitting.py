import asyncio
import json
from typing import Any, Dict, List, Optional

from fastapi import APIRouter, Depends, File, Form, Request, UploadFile
from pydantic import BaseModel, Field

from ..services.storage_service import load_dataset
from .common import RunOptions, build_config, get_storage_service, http_error

router = APIRouter()


class ImageFitRequest(RunOptions):
    checkpoint: str
    dataset: str
    frame: str
    cameras: List[str] = Field(default_factory=list)
    out: str
    subject: Optional[str] = None
    init_pose: Optional[str] = None


class FitResponse(BaseModel):
    report: str
    mode: str
    iterations: int
    final_terms: Dict[str, float]
    pose: List[List[float]]
    skipped_joints: int = 0
    runtime_s: float


async def get_fitting_service(request: Request):
    """Dependency to get fitting service instance"""
    return request.app.state.fitting_service


def _response(report, out: str) -> FitResponse:
    data = report.to_dict()
    return FitResponse(report=f"{out}/fit_report.json", mode=data["mode"], iterations=data["iterations"],
                       final_terms=data["final_terms"], pose=data["pose"],
                       skipped_joints=data["skipped_joints"], runtime_s=data["runtime_s"])


@router.post("/cloud", response_model=FitResponse)
async def fit_cloud(
    checkpoint: str = Form(...),
    out: str = Form(...),
    cloud: UploadFile = File(...),
    subject: Optional[str] = Form(None),
    overrides: Optional[str] = Form(None),
    seed: Optional[int] = Form(None),
    storage=Depends(get_storage_service),
    fitting_service=Depends(get_fitting_service)
):
    """Fit pose and shape to an uploaded PLY point cloud"""
    try:
        options = RunOptions(overrides=json.loads(overrides) if overrides else [], seed=seed)
        config = build_config(options, storage)
        content = await cloud.read()
        cloud_path = await storage.save_upload(content, f"{out}/input_{cloud.filename or 'cloud.ply'}")
        report = await asyncio.to_thread(
            fitting_service.run_cloud_fit, str(storage.resolve(checkpoint)), str(cloud_path),
            str(storage.resolve(out)), config.fit, subject, None, config.seed
        )
        return _response(report, out)
    except Exception as e:
        raise http_error("fitting point cloud", e)


@router.post("/images", response_model=FitResponse)
async def fit_images(
    request: ImageFitRequest,
    storage=Depends(get_storage_service),
    fitting_service=Depends(get_fitting_service)
):
    """Fit pose, shape and appearance to views of a dataset frame"""
    try:
        config = build_config(request, storage)
        dataset = load_dataset(storage.resolve(request.dataset))
        init_pose = str(storage.resolve(request.init_pose)) if request.init_pose else None
        report = await asyncio.to_thread(
            fitting_service.run_image_fit, str(storage.resolve(request.checkpoint)), dataset, request.frame,
            request.cameras, str(storage.resolve(request.out)), config.fit, request.subject, init_pose, config.seed
        )
        return _response(report, request.out)
    except Exception as e:
        raise http_error("fitting images", e)


@router.get("/reports/{path:path}")
async def read_report(path: str, storage=Depends(get_storage_service)) -> Dict[str, Any]:
    """Return a stored fit report"""
    try:
        return json.loads(await storage.read_text(f"{path}/fit_report.json"))
    except Exception as e:
        raise http_error("reading fit report", e)
