import math

import numpy as np
from fastapi import APIRouter, Depends

from app.data import prepare_raw_image
from app.errors import ShapeError
from app.generator import Generator
from app.schemas import HealthOut, TranslateRequest, TranslateResponse
from app.service import checkpoint_path, get_model, loaded_model

router = APIRouter(
    tags=["🧠 Inference"]
)


@router.get("/health",
    response_model=HealthOut,
    summary="Состояние сервиса",
    description="""
    Показывает, работает ли сервис и какую модель он обслуживает.

    **Поля:**
    - `model_loaded`: чекпоинт загружен (загрузка происходит при первом вызове `/translate`)
    - `grid`, `parameters`: сетка патчей и число параметров гиперсети загруженной модели
    """
)
def health():
    model = loaded_model()
    if model is None:
        return HealthOut(status="ok" if checkpoint_path() else "no-model", model_loaded=False)
    return HealthOut(status="ok", model_loaded=True, grid=model.grid.label, parameters=model.parameter_count)


@router.post("/translate",
    response_model=TranslateResponse,
    summary="Перевести одно исходное изображение",
    description="""
    Прогоняет обслуживаемый генератор на одном совмещенном исходном изображении.

    **Тело запроса:**
    - `source`: каналы x строки x столбцы, интенсивности в [-1, 1]
    - `raw`: если true, изображение сначала обрезается по ненулевой области,
      нормируется min-max по каналам и дополняется по центру до размера модели

    **Возможные ошибки:**
    - `404`: чекпоинт не задан (`LOCALINR_CHECKPOINT`) или не читается
    - `422`: неверное число каналов или размер, отличный от размера модели, без `raw`
    """
)
def translate(body: TranslateRequest, model: Generator = Depends(get_model)):
    try:
        source = np.asarray(body.source, dtype=np.float64)
    except ValueError:
        raise ShapeError("translate", "строки изображения должны быть одной длины") from None
    if source.ndim != 3:
        raise ShapeError("translate", f"ожидается каналы x строки x столбцы, получено измерений: {source.ndim}")
    if source.shape[0] != model.in_channels:
        raise ShapeError("translate", f"модель ожидает каналов: {model.in_channels}, получено: {source.shape[0]}")
    if not np.all(np.isfinite(source)):
        raise ShapeError("translate", "изображение содержит нечисловые значения")
    h, w = model.extent
    if body.raw:
        source = prepare_raw_image(source, h, w, model.grid)
    elif source.shape[1:] != (h, w):
        raise ShapeError("translate", f"размер {source.shape[1:]} отличается от размера модели {(h, w)}")
    image = model.translate(source[None])[0, 0]
    return TranslateResponse(
        image=[[float(v) if math.isfinite(v) else 0.0 for v in row] for row in image.tolist()],
        height=h,
        width=w,
        grid=model.grid.label,
    )
