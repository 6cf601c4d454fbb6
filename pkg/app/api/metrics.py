import math

import numpy as np
from fastapi import APIRouter

from app.errors import ShapeError
from app.metrics import compare, wilcoxon_signed_rank
from app.schemas import CompareRequest, CompareResponse, WilcoxonRequest, WilcoxonResult

router = APIRouter(
    tags=["📏 Metrics"]
)


@router.post("/compare",
    response_model=CompareResponse,
    summary="Сравнить два изображения",
    description="""
    MSE, SSIM и PSNR предсказания относительно целевого изображения.

    Оба изображения: каналы x строки x столбцы в [-1, 1]; перед оценкой они
    переводятся в [0, 1]. Для одинаковых изображений `psnr` равен `null`.

    **Возможные ошибки:**
    - `422`: размеры не совпадают или изображения меньше окна SSIM 11x11
    """
)
def compare_images(body: CompareRequest):
    try:
        prediction = np.asarray(body.prediction, dtype=np.float64)
        target = np.asarray(body.target, dtype=np.float64)
    except ValueError:
        raise ShapeError("compare", "строки изображения должны быть одной длины") from None
    values = compare(prediction, target)
    psnr = values["psnr"]
    return CompareResponse(
        mse=values["mse"],
        ssim=values["ssim"],
        psnr=psnr if math.isfinite(psnr) else None,
    )


@router.post("/wilcoxon",
    response_model=WilcoxonResult,
    summary="Парный критерий Уилкоксона",
    description="""
    Двусторонний критерий для парных выборок `x` и `y`.

    До 25 ненулевых разностей нулевое распределение считается точно, выше
    используется нормальное приближение с поправками на связи и непрерывность.

    **Возможные ошибки:**
    - `422`: длины различаются или ненулевых разностей меньше 5
    """
)
def wilcoxon(body: WilcoxonRequest):
    if len(body.x) != len(body.y):
        raise ShapeError("wilcoxon", f"длины выборок различаются: {len(body.x)} и {len(body.y)}")
    return wilcoxon_signed_rank(body.x, body.y)
