"""
HTTP entry point for the population-gradient experiment service.

This module initializes the FastAPI app, configures request logging and
the error envelope, and includes the experiment router under ``/api``.
Environment variables are read from a ``.env`` file when present:
``POPGRAD_OUTPUT_DIR`` sets the default artifact directory and
``POPGRAD_THREADS`` the default worker count.

Run the service with ``uvicorn main:app``; the command-line harness lives in
``cli.py``.
"""

from __future__ import annotations

import logging

from dotenv import load_dotenv
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse

from Routes import experiments_router

load_dotenv()  # Load environment variables from .env file

logger = logging.getLogger("popgrad")
logging.basicConfig(level=logging.INFO)


app = FastAPI(
    title="Popgrad Experiments",
    version="1.0",
    docs_url="/api/docs",
    openapi_url="/api/openapi.json",
)


@app.middleware("http")
async def log_requests(request: Request, call_next):
    logger.info(f"{request.method} {request.url}")
    response = await call_next(request)
    logger.info(f"Completed with status {response.status_code}")
    return response


@app.exception_handler(HTTPException)
async def http_exception_handler(request: Request, exc: HTTPException):
    """Return errors in a standardized envelope.

    The error code maps the status code into a descriptive string. Field
    errors and artifact paths are included when available.
    """
    code_map = {
        400: "VALIDATION_FAILED",
        404: "NOT_FOUND",
        422: "DOMAIN_ERROR",
        500: "ARTIFACT_WRITE_FAILED",
    }
    code = code_map.get(exc.status_code, "ERROR")
    error = {"code": code}
    if isinstance(exc.detail, dict):
        error.update(exc.detail)
    else:
        error["message"] = exc.detail
    return JSONResponse(status_code=exc.status_code, content={"error": error})


@app.exception_handler(Exception)
async def unhandled_exception_handler(request: Request, exc: Exception):
    logger.error(f"Unhandled exception: {exc}", exc_info=True)
    return JSONResponse(
        status_code=500,
        content={
            "error": {
                "code": "INTERNAL_SERVER_ERROR",
                "message": "An unexpected error occurred",
            }
        },
    )


@app.get("/")
async def index() -> dict:
    return {"service": "popgrad", "docs": "/api/docs"}


# Include API routers under /api prefix
app.include_router(experiments_router.router, prefix="/api")
