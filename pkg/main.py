#!/usr/bin/env python3
"""
ArtiField - Main Application Entry Point
HTTP backend for training, fitting and meshing articulated implicit hand models.
"""

import os
import sys
from contextlib import asynccontextmanager

import uvicorn
from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

# Add the current directory to Python path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from backend.api import router as api_router
from backend.config import configure_logging, get_settings
from backend.core.kinematics import available_skeletons
from backend.services.fitting_service import FittingService
from backend.services.mesh_service import MeshService
from backend.services.storage_service import StorageService
from backend.services.synthetic_service import SyntheticService
from backend.services.training_service import TrainingService

VERSION = "1.0.0"


@asynccontextmanager
async def lifespan(app: FastAPI):
    """Application lifespan manager"""
    # Startup
    print("🚀 Starting ArtiField...")
    settings = get_settings()
    configure_logging(settings.log_level)

    try:
        app.state.storage_service = StorageService(settings.data_dir)
        print(f"✅ Data directory: {app.state.storage_service.data_dir}")
    except OSError as e:
        print(f"❌ Cannot use data directory {settings.data_dir}: {e}")
        raise

    app.state.synthetic_service = SyntheticService(settings.workers)
    app.state.training_service = TrainingService()
    app.state.fitting_service = FittingService()
    app.state.mesh_service = MeshService()

    skeletons = available_skeletons()
    if skeletons:
        print(f"✅ Bundled skeletons: {', '.join(skeletons)}")
    else:
        print("⚠️  Warning: no bundled skeletons found; only skeleton files given by path will work")
    if settings.workers > 1:
        print(f"ℹ️  Dataset generation uses {settings.workers} worker threads")

    print("✅ ArtiField is ready!")
    yield

    # Shutdown
    print("🛑 Shutting down ArtiField...")


def create_app() -> FastAPI:
    """Create and configure the FastAPI application"""
    app = FastAPI(
        title="ArtiField",
        description="Articulated implicit shape and appearance models of hands",
        version=VERSION,
        lifespan=lifespan
    )

    # Configure CORS for browser clients listed in ARTIFIELD_CORS_ORIGINS
    origins = get_settings().cors_origins
    if origins:
        app.add_middleware(
            CORSMiddleware,
            allow_origins=origins,
            allow_credentials=True,
            allow_methods=["GET", "POST", "OPTIONS"],
            allow_headers=["*"],
        )

    # Include API routes
    app.include_router(api_router, prefix="/api")

    @app.get("/")
    async def root():
        return {
            "message": "ArtiField is running!",
            "status": "online",
            "version": VERSION
        }

    @app.get("/health")
    async def health_check():
        return {"status": "healthy", "service": "artifield"}

    return app


if __name__ == "__main__":
    settings = get_settings()
    uvicorn.run(
        "main:create_app",
        factory=True,
        host=settings.api_host,
        port=settings.api_port,
        reload=False,
        log_level=settings.log_level
    )
