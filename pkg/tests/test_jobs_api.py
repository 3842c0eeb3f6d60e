import time

import pytest
from fastapi.testclient import TestClient
from unittest.mock import patch

from app.config import settings
from app.deps import get_job_executor_instance
from app.main import app


@pytest.fixture
def client():
    """Client with a fresh executor; the context keeps the event loop alive for background jobs."""
    get_job_executor_instance.cache_clear()
    with TestClient(app) as test_client:
        yield test_client
    get_job_executor_instance.cache_clear()


def wait_for(client, job_id, timeout=30.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        job = client.get(f"/api/jobs/{job_id}").json()["data"]
        if job["status"] in ("completed", "failed", "cancelled"):
            return job
        time.sleep(0.05)
    raise AssertionError(f"job {job_id} did not finish")


def test_root(client):
    response = client.get("/")
    assert response.status_code == 200
    assert response.json()["health"] == "/health"


def test_health(client):
    response = client.get("/health")
    assert response.status_code == 200
    assert response.json() == {"status": "healthy", "environment": "test"}


def test_gen_synth_job_completes(client, tmp_path):
    response = client.post("/api/jobs", json={
        "job_type": "gen-synth",
        "args": {"output_dir": str(tmp_path / "fixture"), "height": 16, "width": 16, "frames": 9},
    })

    assert response.status_code == 200
    body = response.json()
    assert body["success"] is True
    job = wait_for(client, body["data"]["id"])
    assert job["status"] == "completed"
    assert (tmp_path / "fixture" / "cube.raw").exists()
    assert job["results"]["degenerate"] is False


def test_failed_job_keeps_error(client):
    response = client.post("/api/jobs", json={"job_type": "evaluate", "args": {}})
    job = wait_for(client, response.json()["data"]["id"])
    assert job["status"] == "failed"
    assert "pred and gt" in job["error_log"]


def test_list_jobs_filters(client, tmp_path):
    client.post("/api/jobs", json={"job_type": "evaluate", "args": {}})
    client.post("/api/jobs", json={"job_type": "gen-synth", "args": {"output_dir": str(tmp_path / "f")}})

    response = client.get("/api/jobs", params={"job_type": "evaluate"})
    assert response.status_code == 200
    jobs = response.json()["data"]["jobs"]
    assert len(jobs) == 1
    assert jobs[0]["job_type"] == "evaluate"


def test_unknown_job(client):
    response = client.get("/api/jobs/does-not-exist")
    assert response.status_code == 404
    assert response.json()["success"] is False
    assert "not found" in response.json()["message"]


def test_cancel_finished_job_conflicts(client):
    response = client.post("/api/jobs", json={"job_type": "evaluate", "args": {}})
    job_id = response.json()["data"]["id"]
    wait_for(client, job_id)

    response = client.post(f"/api/jobs/{job_id}/cancel")
    assert response.status_code == 409


def test_invalid_job_type(client):
    response = client.post("/api/jobs", json={"job_type": "train", "args": {}})
    assert response.status_code == 422
    assert response.json()["success"] is False


def test_api_key_required_when_configured(client, tmp_path):
    payload = {"job_type": "gen-synth", "args": {"output_dir": str(tmp_path / "f")}}
    with patch.object(settings, "api_key", "secret"):
        assert client.post("/api/jobs", json=payload).status_code == 401
        wrong = client.post("/api/jobs", json=payload, headers={"Authorization": "Bearer nope"})
        assert wrong.status_code == 401
        ok = client.post("/api/jobs", json=payload, headers={"Authorization": "Bearer secret"})
        assert ok.status_code == 200
