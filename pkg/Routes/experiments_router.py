"""Routes exposing experiment runs."""

from __future__ import annotations

from typing import Any, Callable, Dict, List, TypeVar

from fastapi import APIRouter, Body, HTTPException, Query, status

from Controllers import experiments_controller
from DAL.schemas import ExperimentReport, VectorFieldRow
from Services.errors import ArtifactWriteError, ConfigValidationError, PopgradError

router = APIRouter(prefix="/experiments", tags=["experiments"])

T = TypeVar("T")


def _call(operation: Callable[[], T]) -> T:
    try:
        return operation()
    except ConfigValidationError as exc:
        raise HTTPException(
            status_code=status.HTTP_400_BAD_REQUEST,
            detail={"message": str(exc), "fields": exc.fields},
        ) from exc
    except ArtifactWriteError as exc:
        raise HTTPException(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            detail={"message": str(exc), "path": str(exc.path)},
        ) from exc
    except PopgradError as exc:
        raise HTTPException(
            status_code=status.HTTP_422_UNPROCESSABLE_ENTITY,
            detail=str(exc),
        ) from exc


@router.get("")
async def list_experiments() -> Dict[str, Dict[str, Any]]:
    """List experiment names with their default configs."""

    return experiments_controller.list_experiments_controller()


@router.post("/run", response_model=ExperimentReport)
def run_experiment(
    payload: Dict[str, Any] = Body(..., description="Experiment config, discriminated by 'experiment'"),
    persist: bool = Query(True, description="Write CSV/JSON artifacts to the output directory"),
) -> ExperimentReport:
    """Run one experiment synchronously and return its report."""

    return _call(lambda: experiments_controller.run_experiment_controller(payload, persist=persist))


@router.get("/vector-field", response_model=List[VectorFieldRow])
def get_vector_field(
    K: int = Query(2, ge=2, description="Number of hidden nodes"),  # noqa: N803
    grid: int = Query(41, description="Lattice points per axis"),
    lo: float = Query(0.0, description="Lower bound on both axes"),
    hi: float = Query(1.0, description="Upper bound on both axes"),
) -> List[VectorFieldRow]:
    """Symmetric two-dimensional vector field as JSON rows."""

    _, rows = _call(lambda: experiments_controller.vector_field_controller(K, grid, lo, hi))
    return [VectorFieldRow(x=x, y=y, gx=gx, gy=gy) for x, y, gx, gy in rows]
