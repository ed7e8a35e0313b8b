from fastapi import APIRouter
from .synthetic import router as synthetic_router
from .training import router as training_router
from .fitting import router as fitting_router
from .meshing import router as meshing_router

router = APIRouter()

# Include all sub-routers
router.include_router(synthetic_router, prefix="/synthetic", tags=["synthetic"])
router.include_router(training_router, prefix="/training", tags=["training"])
router.include_router(fitting_router, prefix="/fitting", tags=["fitting"])
router.include_router(meshing_router, prefix="/meshing", tags=["meshing"])
