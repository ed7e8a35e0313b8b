import asyncio
from typing import Any, Dict, Optional

from fastapi import APIRouter, Depends, Request
from pydantic import BaseModel, Field

from ..core.rendering import Camera
from ..services.mesh_service import CodeRequest
from ..services.storage_service import load_dataset
from .common import RunOptions, get_storage_service, http_error, relative_summary

router = APIRouter()


class CodeOptions(BaseModel):
    subject: Optional[str] = None
    shape_subject: Optional[str] = None
    color_subject: Optional[str] = None
    mix: Optional[float] = Field(None, ge=0.0, le=1.0)
    mix_subject: Optional[str] = None
    report: Optional[str] = None
    pose: Optional[str] = None


class ExtractRequest(CodeOptions, RunOptions):
    checkpoint: str
    out: str
    resolution: int = Field(128, ge=16)


class RenderRequest(CodeOptions, RunOptions):
    checkpoint: str
    camera: str
    out: str
    mode: str = "color"


class EvalRequest(BaseModel):
    mesh: Optional[str] = None
    reference_mesh: Optional[str] = None
    dataset: Optional[str] = None
    frame: Optional[str] = None
    image: Optional[str] = None
    reference_image: Optional[str] = None
    mask: Optional[str] = None
    resolution: int = Field(128, ge=16)
    out: Optional[str] = None


async def get_mesh_service(request: Request):
    """Dependency to get mesh service instance"""
    return request.app.state.mesh_service


def _code_request(options: CodeOptions, storage) -> CodeRequest:
    resolve = lambda p: str(storage.resolve(p)) if p else None
    return CodeRequest(options.subject, options.shape_subject, options.color_subject, options.mix,
                       options.mix_subject, resolve(options.report), resolve(options.pose))


def _render_config(mesh_service, checkpoint: str, options: RunOptions, storage):
    """Checkpoint render settings, replaced by the request config file and overridden by its overrides."""
    config_path = str(storage.resolve(options.config)) if options.config else None
    return mesh_service.render_config(checkpoint, config_path, options.overrides)


@router.post("/extract")
async def extract_mesh(
    request: ExtractRequest,
    storage=Depends(get_storage_service),
    mesh_service=Depends(get_mesh_service)
) -> Dict[str, Any]:
    """Extract the zero level set of a trained model to OBJ"""
    try:
        checkpoint = str(storage.resolve(request.checkpoint))
        config = _render_config(mesh_service, checkpoint, request, storage)
        summary = await asyncio.to_thread(
            mesh_service.extract, checkpoint, str(storage.resolve(request.out)),
            _code_request(request, storage), request.resolution, None, config
        )
        return relative_summary(summary, storage)
    except Exception as e:
        raise http_error("extracting mesh", e)


@router.post("/render")
async def render_view(
    request: RenderRequest,
    storage=Depends(get_storage_service),
    mesh_service=Depends(get_mesh_service)
) -> Dict[str, Any]:
    """Render a trained model from a stored camera"""
    try:
        camera = Camera.load(storage.resolve(request.camera))
        checkpoint = str(storage.resolve(request.checkpoint))
        config = _render_config(mesh_service, checkpoint, request, storage)
        summary = await asyncio.to_thread(
            mesh_service.render, checkpoint, camera, str(storage.resolve(request.out)),
            _code_request(request, storage), request.mode, config, None, request.seed
        )
        return relative_summary(summary, storage)
    except Exception as e:
        raise http_error("rendering view", e)


@router.post("/eval")
async def evaluate(
    request: EvalRequest,
    storage=Depends(get_storage_service),
    mesh_service=Depends(get_mesh_service)
) -> Dict[str, Any]:
    """Mesh distances and/or masked PSNR"""
    try:
        resolve = lambda p: str(storage.resolve(p)) if p else None
        dataset = load_dataset(storage.resolve(request.dataset)) if request.dataset else None
        result = await asyncio.to_thread(
            mesh_service.evaluate, resolve(request.mesh), resolve(request.reference_mesh), dataset,
            request.frame, resolve(request.image), resolve(request.reference_image), resolve(request.mask),
            request.resolution, resolve(request.out)
        )
        return result.to_dict()
    except Exception as e:
        raise http_error("evaluating", e)
