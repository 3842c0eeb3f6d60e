import asyncio
import json
import logging
import os
import threading
import uuid
from datetime import datetime
from pathlib import Path
from typing import Dict, Any, Optional, List

from app.config import settings
from app.models import BatchJob, JobStatus, JobType, PipelineConfig, SynthSpec
from app.services.pipeline import evaluate_paths, run_segmentation, sweep_k, write_sweep_csv
from app.services.synth import generate_synth, write_synth

logger = logging.getLogger(__name__)

FINISHED_STATUSES = (JobStatus.completed, JobStatus.failed, JobStatus.cancelled)


class JobExecutor:
    """Runs pipeline jobs in the background and keeps their status in memory (mirrored to jobs_dir)."""

    def __init__(self, jobs_dir: Optional[str] = None):
        self.jobs_dir = Path(jobs_dir or settings.jobs_dir)
        self.jobs: Dict[str, BatchJob] = {}
        self.running_jobs: Dict[str, asyncio.Task] = {}
        self._cancel_events: Dict[str, threading.Event] = {}
        self._slots = asyncio.Semaphore(settings.max_concurrent_jobs)

    def create_job(self, job_type: JobType, args: Optional[Dict[str, Any]] = None) -> BatchJob:
        job = BatchJob(id=uuid.uuid4().hex, job_type=job_type, args=args or {})
        self.jobs[job.id] = job
        self._persist(job)
        self._evict_finished()
        return job

    def get_job(self, job_id: str) -> Optional[BatchJob]:
        job = self.jobs.get(job_id)
        if job is None:
            job = self._load_persisted(job_id)
        return job

    def _evict_finished(self) -> None:
        """Drop the oldest finished jobs from memory once over max_jobs_in_memory."""
        excess = len(self.jobs) - settings.max_jobs_in_memory
        if excess <= 0:
            return
        finished = sorted(
            (job for job in self.jobs.values() if job.status in FINISHED_STATUSES),
            key=lambda job: job.completed_at or job.created_at,
        )
        for job in finished[:excess]:
            del self.jobs[job.id]
        logger.info(f"🧹 Evicted {min(excess, len(finished))} finished jobs from memory")

    def _load_persisted(self, job_id: str) -> Optional[BatchJob]:
        path = self.jobs_dir / f"{job_id}.json"
        if not path.is_file():
            return None
        try:
            return BatchJob.model_validate_json(path.read_text(encoding="utf-8"))
        except ValueError as e:
            logger.warning(f"Ignoring unreadable job record {path}: {str(e)}")
            return None

    def list_jobs(self, status: Optional[JobStatus] = None, job_type: Optional[JobType] = None) -> List[BatchJob]:
        jobs = sorted(self.jobs.values(), key=lambda job: job.created_at, reverse=True)
        if status:
            jobs = [job for job in jobs if job.status == status]
        if job_type:
            jobs = [job for job in jobs if job.job_type == job_type]
        return jobs

    async def execute_job(self, job_id: str) -> None:
        """Execute a job and update its status."""
        job = self.jobs.get(job_id)
        if job is None:
            logger.error(f"Job {job_id} not found")
            return

        cancel = threading.Event()
        self._cancel_events[job_id] = cancel
        try:
            async with self._slots:
                self._update_job_status(job, JobStatus.running, started_at=datetime.utcnow())
                worker = asyncio.ensure_future(asyncio.to_thread(self._run, job.job_type, job.args, cancel))
                try:
                    results = await asyncio.wait_for(asyncio.shield(worker), timeout=settings.job_timeout_seconds)
                finally:
                    # the thread cannot be interrupted: keep the slot until it returns
                    if not worker.done():
                        cancel.set()
                        logger.warning(f"⏳ Job {job_id} stopped; waiting for its worker thread to exit")
                        await asyncio.wait({worker})
                        if not worker.cancelled() and worker.exception() is not None:
                            logger.info(f"Job {job_id} worker exited with: {str(worker.exception())}")
            self._update_job_status(job, JobStatus.completed, results=results, completed_at=datetime.utcnow())
            logger.info(f"Job {job_id} completed successfully")

        except asyncio.CancelledError:
            self._update_job_status(job, JobStatus.cancelled, completed_at=datetime.utcnow())
            raise
        except asyncio.TimeoutError:
            error_msg = f"Job timed out after {settings.job_timeout_seconds} seconds"
            logger.error(f"Job {job_id} failed: {error_msg}")
            self._update_job_status(job, JobStatus.failed, error_log=error_msg, completed_at=datetime.utcnow())
        except Exception as e:
            error_msg = str(e)
            logger.error(f"Job {job_id} failed: {error_msg}")
            self._update_job_status(job, JobStatus.failed, error_log=error_msg, completed_at=datetime.utcnow())
        finally:
            self.running_jobs.pop(job_id, None)
            self._cancel_events.pop(job_id, None)

    def _update_job_status(
        self,
        job: BatchJob,
        status: JobStatus,
        started_at: Optional[datetime] = None,
        completed_at: Optional[datetime] = None,
        results: Optional[Dict[str, Any]] = None,
        error_log: Optional[str] = None,
    ) -> None:
        job.status = status
        if started_at:
            job.started_at = started_at
        if completed_at:
            job.completed_at = completed_at
        if results:
            job.results = results
        if error_log:
            job.error_log = error_log
        self._persist(job)

    def _persist(self, job: BatchJob) -> None:
        os.makedirs(self.jobs_dir, exist_ok=True)
        with open(self.jobs_dir / f"{job.id}.json", "w", encoding="utf-8") as f:
            f.write(job.model_dump_json(indent=2))

    def _run(self, job_type: JobType, args: Dict[str, Any], cancel: Optional[threading.Event] = None) -> Dict[str, Any]:
        """Dispatch a job to the pipeline services (runs in a worker thread)."""
        if job_type == JobType.segment:
            return self._run_segment(args, cancel)
        elif job_type == JobType.evaluate:
            return self._run_evaluate(args)
        elif job_type == JobType.gen_synth:
            return self._run_gen_synth(args)
        elif job_type == JobType.sweep_k:
            return self._run_sweep_k(args, cancel)
        else:
            raise ValueError(f"Unknown job type: {job_type}")

    def _run_segment(self, args: Dict[str, Any], cancel: Optional[threading.Event] = None) -> Dict[str, Any]:
        config = PipelineConfig.from_flat(args)
        run = run_segmentation(config, cancel=cancel)
        return {
            "outputs": run.outputs,
            "energy": run.fusion.energy,
            "sweeps": run.fusion.sweeps,
            "metrics": run.report.model_dump() if run.report else None,
        }

    def _run_evaluate(self, args: Dict[str, Any]) -> Dict[str, Any]:
        if not args.get("pred") or not args.get("gt"):
            raise ValueError("Both pred and gt must be provided")
        rows = evaluate_paths(args["pred"], args["gt"])
        return {"rows": [row.model_dump() for row in rows]}

    def _run_gen_synth(self, args: Dict[str, Any]) -> Dict[str, Any]:
        args = dict(args)
        output_dir = args.pop("output_dir", None)
        if not output_dir:
            raise ValueError("output_dir must be provided")
        spec = SynthSpec.model_validate(args)
        result = generate_synth(spec)
        return {"files": write_synth(result, spec, output_dir), "degenerate": result.degenerate}

    def _run_sweep_k(self, args: Dict[str, Any], cancel: Optional[threading.Event] = None) -> Dict[str, Any]:
        args = dict(args)
        k_values = [int(k) for k in args.pop("k_values", [])]
        inputs = [(item["cube"], item["ground_truth"]) for item in args.pop("inputs", [])]
        csv_path = args.pop("csv", None)
        rows = sweep_k(PipelineConfig.from_flat(args), k_values, inputs, cancel=cancel)
        if csv_path:
            write_sweep_csv(rows, csv_path)
        return {"rows": [{"k": row.k, "avg_pr": row.avg_pr, "seconds": row.seconds} for row in rows], "csv": csv_path}

    async def start_job(self, job_id: str) -> None:
        """Start a job execution in the background."""
        if job_id in self.running_jobs:
            logger.warning(f"Job {job_id} is already running")
            return

        task = asyncio.create_task(self.execute_job(job_id))
        self.running_jobs[job_id] = task

    def get_running_jobs(self) -> List[str]:
        """Get list of currently running job IDs."""
        return list(self.running_jobs.keys())

    async def cancel_job(self, job_id: str) -> bool:
        """Cancel a pending or running job; a running pipeline stops at its next stage boundary."""
        job = self.jobs.get(job_id)
        if job is None or job.status in FINISHED_STATUSES:
            return False

        event = self._cancel_events.get(job_id)
        if event is not None:
            event.set()
        task = self.running_jobs.pop(job_id, None)
        if task is not None:
            task.cancel()
        self._update_job_status(job, JobStatus.cancelled, completed_at=datetime.utcnow())
        return True
