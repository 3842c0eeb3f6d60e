from fastapi import APIRouter, HTTPException, Depends, Query, status
from app.auth import verify_api_key
from app.deps import get_job_executor
from app.models import APIResponse, BatchJobCreate, JobStatus, JobType
from app.services.job_executor import JobExecutor
from typing import Optional
import logging

logger = logging.getLogger(__name__)
router = APIRouter(prefix="/api/jobs", tags=["jobs"])


@router.post("", response_model=APIResponse)
async def create_job(
    request: BatchJobCreate,
    executor: JobExecutor = Depends(get_job_executor),
    auth: bool = Depends(verify_api_key)
):
    """Create a pipeline job and start it in the background."""
    job = executor.create_job(request.job_type, request.args)
    await executor.start_job(job.id)
    logger.info(f"Queued {request.job_type.value} job {job.id}")

    return APIResponse(
        success=True,
        message=f"Job {job.id} created",
        data=job.model_dump(mode="json")
    )


@router.get("", response_model=APIResponse)
async def list_jobs(
    status_filter: Optional[JobStatus] = Query(None, alias="status"),
    job_type: Optional[JobType] = Query(None),
    limit: int = Query(50, le=1000),
    offset: int = Query(0, ge=0),
    executor: JobExecutor = Depends(get_job_executor)
):
    """List jobs with optional filters."""
    jobs = executor.list_jobs(status_filter, job_type)[offset:offset + limit]

    return APIResponse(
        success=True,
        message=f"Retrieved {len(jobs)} jobs",
        data={
            "jobs": [job.model_dump(mode="json") for job in jobs],
            "limit": limit,
            "offset": offset,
            "filters": {
                "status": status_filter.value if status_filter else None,
                "job_type": job_type.value if job_type else None
            }
        }
    )


@router.get("/{job_id}", response_model=APIResponse)
async def get_job(
    job_id: str,
    executor: JobExecutor = Depends(get_job_executor)
):
    """Get details of a specific job."""
    job = executor.get_job(job_id)
    if job is None:
        raise HTTPException(
            status_code=status.HTTP_404_NOT_FOUND,
            detail=f"Job {job_id} not found"
        )

    return APIResponse(
        success=True,
        message=f"Job {job_id} retrieved successfully",
        data=job.model_dump(mode="json")
    )


@router.post("/{job_id}/cancel", response_model=APIResponse)
async def cancel_job(
    job_id: str,
    executor: JobExecutor = Depends(get_job_executor),
    auth: bool = Depends(verify_api_key)
):
    """Cancel a pending or running job."""
    job = executor.get_job(job_id)
    if job is None:
        raise HTTPException(
            status_code=status.HTTP_404_NOT_FOUND,
            detail=f"Job {job_id} not found"
        )

    if job.status in (JobStatus.completed, JobStatus.failed, JobStatus.cancelled):
        raise HTTPException(
            status_code=status.HTTP_409_CONFLICT,
            detail=f"Job {job_id} is already {job.status.value} and cannot be cancelled"
        )

    cancelled = await executor.cancel_job(job_id)

    return APIResponse(
        success=True,
        message=f"Job {job_id} {'cancelled' if cancelled else 'cancellation requested'}",
        data={"job_id": job_id, "cancelled": cancelled}
    )
