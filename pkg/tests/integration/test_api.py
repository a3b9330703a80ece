"""
Integration tests for the query and grasp-filter API.
"""
import numpy as np
import pytest
from fastapi.testclient import TestClient

from gsgrasp.config import Settings
from gsgrasp.core.exceptions import NotFoundError
from gsgrasp.models.schemas import GraspFilterRequest, GraspProposal, QueryRequest
from gsgrasp.repositories.checkpoint import save_decoder, save_field
from gsgrasp.repositories.memory import InMemoryArtifactStore
from gsgrasp.repositories.scene import write_scene
from gsgrasp.services.pipeline import SceneQueryService


def _proposal(a, b, score, width=0.06):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    pose = np.eye(4)
    pose[:3, 3] = (a + b) / 2
    return {
        "pose": pose.reshape(-1).tolist(),
        "width": width,
        "score": score,
        "contacts": [a.tolist(), b.tolist()],
    }


class TestHealth:
    def test_health(self, test_client: TestClient):
        response = test_client.get("/health")
        assert response.status_code == 200
        assert response.json() == {"status": "healthy"}

    def test_ready_with_artifacts(self, test_client: TestClient):
        response = test_client.get("/health/ready")

        assert response.status_code == 200
        data = response.json()
        assert data["status"] == "ready"
        assert data["artifacts"]["loaded"] == {"scene": True, "field": True, "decoder": True}


class TestQueryAPI:
    def test_localizes_object(self, test_client: TestClient, synthetic):
        response = test_client.post("/v1/query", json={"query": "object_0"})

        assert response.status_code == 200
        data = response.json()
        center = np.asarray(synthetic.spec.objects[0].center)
        assert np.all(np.asarray(data["bbox_min"]) <= center + 0.01)
        assert np.all(np.asarray(data["bbox_max"]) >= center - 0.01)
        assert len(data["hull_vertices"]) >= 4
        assert sum(data["mask_pixels"].values()) > 0
        assert response.headers["Cache-Control"] == "no-store"
        assert float(response.headers["X-Render-Latency-Ms"]) >= 0

    def test_view_subset(self, test_client: TestClient):
        response = test_client.post("/v1/query", json={"query": "object_1", "view_ids": ["view_004"]})

        assert response.status_code == 200
        assert set(response.json()["mask_pixels"]) == {"view_004"}

    def test_unknown_query(self, test_client: TestClient):
        response = test_client.post("/v1/query", json={"query": "teapot"})

        assert response.status_code == 404
        assert response.json()["error"]["code"] == "NOT_FOUND"

    def test_nothing_passes_threshold(self, test_client: TestClient):
        response = test_client.post("/v1/query", json={"query": "object_0", "threshold": 1.5})

        assert response.status_code == 404
        assert response.json()["error"]["code"] == "EMPTY_QUERY_RESULT"

    def test_unknown_view(self, test_client: TestClient):
        response = test_client.post("/v1/query", json={"query": "object_0", "view_ids": ["view_999"]})

        assert response.status_code == 400
        assert response.json()["error"]["code"] == "VALIDATION_ERROR"

    def test_empty_query_rejected(self, test_client: TestClient):
        response = test_client.post("/v1/query", json={"query": ""})
        assert response.status_code == 422


class TestGraspFilterAPI:
    def test_selects_antipodal_proposal(self, test_client: TestClient, labeled_field):
        # Identity rotations with isotropic scales give x-axis normals
        p = labeled_field.means.detach().double().numpy()[0]
        proposals = [
            _proposal(p, p + [0.04, 0.0, 0.0], score=0.4),
            _proposal(p, p + [0.0, 0.0, 0.04], score=0.9),
        ]

        response = test_client.post(
            "/v1/grasp-filter",
            json={"proposals": proposals, "config": {"normal_lookup_radius": 0.05}},
        )

        assert response.status_code == 200
        data = response.json()
        assert data["selected"] == 0
        assert [d["feasible"] for d in data["proposals"]] == [True, False]
        assert data["proposals"][1]["reason"] == "angle"

    def test_no_feasible_grasp(self, test_client: TestClient, labeled_field):
        p = labeled_field.means.detach().double().numpy()[0]
        proposals = [_proposal(p, p + [0.0, 0.04, 0.0], score=1.0)]

        response = test_client.post(
            "/v1/grasp-filter",
            json={"proposals": proposals, "config": {"normal_lookup_radius": 0.05}},
        )

        assert response.status_code == 404
        assert response.json()["error"]["code"] == "NO_FEASIBLE_GRASP"

    def test_empty_proposals_rejected(self, test_client: TestClient):
        response = test_client.post("/v1/grasp-filter", json={"proposals": []})
        assert response.status_code == 422


class TestSceneQueryService:
    @pytest.mark.asyncio
    async def test_query(self, artifact_store):
        service = SceneQueryService(store=artifact_store)

        result = await service.query(QueryRequest(query="object_2"))

        assert result.query == "object_2"
        assert all(lo <= hi for lo, hi in zip(result.bbox_min, result.bbox_max))
        assert result.latency_ms > 0

    @pytest.mark.asyncio
    async def test_filter_without_query_uses_field(self, artifact_store, labeled_field):
        service = SceneQueryService(store=artifact_store)
        p = labeled_field.means.detach().double().numpy()[0]
        request = GraspFilterRequest(
            proposals=[GraspProposal(**_proposal(p, p + [0.04, 0.0, 0.0], score=0.3))],
            config={"normal_lookup_radius": 0.05},
        )

        result = await service.filter_grasps(request)

        assert result.selected == 0
        assert result.proposals[0].angle_sum_rad == pytest.approx(0.0, abs=1e-6)


class TestArtifactStore:
    @pytest.mark.asyncio
    async def test_unconfigured(self):
        store = InMemoryArtifactStore(settings=Settings())
        with pytest.raises(NotFoundError):
            await store.get_field()
        assert store.loaded() == {"scene": False, "field": False, "decoder": False}

    @pytest.mark.asyncio
    async def test_loads_from_files(self, tmp_path, labeled_scene, labeled_field, labeled_decoder):
        manifest = write_scene(labeled_scene, tmp_path / "scene")
        save_field(labeled_field, tmp_path / "field.ggf")
        save_decoder(labeled_decoder, tmp_path / "field.decoder.pt")
        store = InMemoryArtifactStore(settings=Settings(
            SCENE_MANIFEST=str(manifest),
            CHECKPOINT_PATH=str(tmp_path / "field.ggf"),
            DECODER_PATH=str(tmp_path / "field.decoder.pt"),
        ))

        scene = await store.get_scene()
        field = await store.get_field()
        decoder = await store.get_decoder()

        assert [v.view_id for v in scene.views] == [v.view_id for v in labeled_scene.views]
        assert field.count == labeled_field.count
        assert decoder.d_clip == labeled_decoder.d_clip
        assert store.loaded() == {"scene": True, "field": True, "decoder": True}

        store.clear()
        assert store.loaded() == {"scene": False, "field": False, "decoder": False}
