import logging
import os
from contextlib import asynccontextmanager

from dotenv import load_dotenv
from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from . import __version__
from .api import routes
from .config import load_config

# Load environment variables
load_dotenv()

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


@asynccontextmanager
async def lifespan(app: FastAPI):
    """Load the pipeline configuration on startup"""
    logger.info("Starting colored map fusion service...")
    config = load_config(os.getenv("FUSION_CONFIG_PATH"))
    routes.set_config(config)
    logger.info(f"Service ready (seed {config.seed}, {config.workers} workers)")

    yield

    logger.info("Shutting down...")


app = FastAPI(
    title="Colored Map Fusion",
    description="Fuses VGGT session reconstructions into a metric LiDAR map and scores colored maps",
    version=__version__,
    lifespan=lifespan
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

app.include_router(routes.router, prefix="/api", tags=["fusion"])


@app.get("/")
async def root():
    """Root endpoint"""
    return {
        "message": "Colored Map Fusion API",
        "version": __version__,
        "docs": "/docs"
    }


if __name__ == "__main__":
    import uvicorn

    port = int(os.getenv("BACKEND_PORT", 8000))
    uvicorn.run(app, host="0.0.0.0", port=port)
