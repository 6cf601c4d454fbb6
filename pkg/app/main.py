import logging

from fastapi import FastAPI, Request
from fastapi.encoders import jsonable_encoder
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from app.api import metrics, runs, translate
from app.errors import (
    ChannelMismatchError,
    CheckpointError,
    ConfigError,
    CropError,
    DatasetError,
    DegenerateComparisonError,
    LocalInrError,
    ShapeError,
)

logger = logging.getLogger("app")

app = FastAPI(
    title="LocalINR",
    description="Перевод совмещенных изображений локальными MLP, веса которых предсказывает гиперсеть",
    docs_url="/docs",
    redoc_url="/redoc"
)

UNPROCESSABLE = (ConfigError, ShapeError, ChannelMismatchError, DegenerateComparisonError, CropError)
NOT_FOUND = (CheckpointError, DatasetError)


def status_for(exc: LocalInrError) -> int:
    if isinstance(exc, UNPROCESSABLE):
        return 422
    if isinstance(exc, NOT_FOUND):
        return 404
    return 400


@app.exception_handler(LocalInrError)
async def localinr_exception_handler(request: Request, exc: LocalInrError):
    """
    Любая ошибка пакета превращается в JSON, класс ошибки передается в X-Error-Type
    """
    status_code = status_for(exc)
    logger.warning("%s %s -> %d %s: %s", request.method, request.url.path, status_code, exc.error_type, exc)
    return JSONResponse(
        status_code=status_code,
        content={"detail": str(exc), "error_type": exc.error_type},
        headers={"X-Error-Type": exc.error_type},
    )


@app.exception_handler(RequestValidationError)
async def validation_exception_handler(request: Request, exc: RequestValidationError):
    return JSONResponse(
        status_code=422,
        content={"detail": jsonable_encoder(exc.errors()), "error_type": "request_validation"},
        headers={"X-Error-Type": "request_validation"},
    )


app.include_router(translate.router)
app.include_router(metrics.router, prefix="/metrics")
app.include_router(runs.router, prefix="/runs")
