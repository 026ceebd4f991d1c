"""HTTP surface"""
import pytest

from app import create_app


@pytest.fixture
def client():
    app = create_app({"TESTING": True})
    return app.test_client()


def test_health(client):
    response = client.get("/health")
    assert response.status_code == 200
    assert response.get_json()["status"] == "healthy"


def test_labels(client):
    labels = client.get("/api/labels").get_json()["labels"]
    assert len(labels) == 10
    assert labels[0] == {"id": 1, "name": "car", "length": 4.6}


def test_synth_summary(client):
    response = client.post("/api/synth", json={"seed": 1, "synth": {"boxes": 2, "ground_points": 500,
                                                                  "label_mix": ["car"]}})
    assert response.status_code == 200
    body = response.get_json()
    assert body["boxes"] == 2
    assert len(body["instances_per_camera"]) == 6
    assert body["foreground_points"] > 0


def test_synth_rejects_bad_noise(client):
    response = client.post("/api/synth", json={"synth": {"rotation_deg": -1}})
    assert response.status_code == 400


def test_pipeline_run(client, small_config):
    response = client.post("/api/pipeline", json={"config": small_config,
                                                  "output_dir": small_config["io"]["output_dir"]})
    assert response.status_code == 200
    body = response.get_json()
    assert body["metrics"]["extras"]["visible_accuracy"] == 1.0
    assert set(body["artifacts"]) == {"augmented", "priors", "metrics"}


def test_pipeline_unknown_section(client, tmp_path):
    response = client.post("/api/pipeline", json={"config": {"painting": {}}, "output_dir": str(tmp_path)})
    assert response.status_code == 400
    assert response.get_json()["stage"] == "config"


def test_pipeline_overrides_must_be_a_list(client):
    response = client.post("/api/pipeline", json={"overrides": "painter.z_min=1"})
    assert response.status_code == 400
