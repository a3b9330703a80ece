"""
Pytest configuration and fixtures.
"""
import dataclasses
from typing import Optional

import numpy as np
import pytest
import torch
from fastapi.testclient import TestClient

from gsgrasp.api.dependencies import get_artifact_store
from gsgrasp.main import app
from gsgrasp.models.domain import CameraView
from gsgrasp.models.gaussian import GaussianField, rgb_to_sh
from gsgrasp.models.schemas import CANONICAL_PHRASES, CameraRing
from gsgrasp.repositories.memory import InMemoryArtifactStore
from gsgrasp.services.efd import FeatureDecoder
from gsgrasp.services.field import initial_scales
from gsgrasp.services.geometry import backproject
from gsgrasp.services.synthetic import GROUND_NAME, default_spec, render_synthetic

LABELED_OBJECTS = 3
LABELED_D_CLIP = 16
TOP_DOWN_VIEW = "view_004"


def make_camera(
    height: int = 8,
    width: int = 8,
    f: float = 8.0,
    cx: float = 3.0,
    cy: float = 3.0,
    depth: float = 0.0,
    pose: Optional[np.ndarray] = None,
    view_id: str = "cam",
) -> CameraView:
    return CameraView(
        view_id=view_id,
        fx=f,
        fy=f,
        cx=cx,
        cy=cy,
        pose=np.eye(4) if pose is None else pose,
        rgb=np.zeros((height, width, 3), dtype=np.float32),
        depth=np.full((height, width), depth, dtype=np.float64),
    )


@pytest.fixture
def camera_factory():
    """Factory for small calibrated views with an identity pose."""
    return make_camera


@pytest.fixture(scope="session")
def synthetic():
    """Three objects seen by a close four-camera ring plus a top-down camera."""
    spec = default_spec(
        LABELED_OBJECTS,
        seed=0,
        d_clip=LABELED_D_CLIP,
        cameras=CameraRing(count=4, radius=0.35, height=0.3, top_down_height=0.45),
    )
    return render_synthetic(spec)


@pytest.fixture(scope="session")
def labeled_scene(synthetic):
    """
    The synthetic scene with basis-vector embeddings: object k maps to e_k,
    the canonical phrases to e_3 .. e_6 and the table to e_7.
    """
    basis = np.eye(LABELED_D_CLIP, dtype=np.float32)
    embeddings = {f"object_{k}": basis[k] for k in range(LABELED_OBJECTS)}
    for j, phrase in enumerate(CANONICAL_PHRASES):
        embeddings[phrase] = basis[LABELED_OBJECTS + j]
    embeddings[GROUND_NAME] = basis[7]
    return dataclasses.replace(synthetic.scene, embeddings=embeddings)


@pytest.fixture(scope="session")
def labeled_field(synthetic, labeled_scene):
    """
    Opaque primitives on every second depth pixel of every view, with a
    one-hot latent of the pixel's instance id (0 = ground).
    """
    points, colors, labels = [], [], []
    for view, annotations in zip(labeled_scene.views, labeled_scene.annotations):
        grid = np.zeros(view.depth.shape, dtype=bool)
        grid[::2, ::2] = True
        mask = grid & (view.depth > 0)
        cloud = backproject(view.depth, view, mask=mask, colors=view.rgb)
        points.append(cloud.points)
        colors.append(cloud.colors)
        labels.append(annotations.instance_map[mask])

    points = np.concatenate(points)
    colors = np.concatenate(colors)
    labels = np.concatenate(labels)
    labels[labels == synthetic.ground_id] = 0
    n = len(points)

    scales = np.repeat(initial_scales(points)[:, None], 3, axis=1)
    rotations = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    sh = rgb_to_sh(torch.as_tensor(colors, dtype=torch.float32))[:, None, :]
    latents = np.eye(LABELED_OBJECTS + 1)[labels]

    return GaussianField(
        means=torch.as_tensor(points, dtype=torch.float32),
        rotations=torch.as_tensor(rotations, dtype=torch.float32),
        scales=torch.as_tensor(scales, dtype=torch.float32),
        opacities=torch.full((n,), 0.95, dtype=torch.float32),
        sh=sh,
        latents=torch.as_tensor(latents, dtype=torch.float32),
        frame_id=labeled_scene.frame_id,
        active_sh_degree=0,
    )


@pytest.fixture(scope="session")
def labeled_decoder():
    """Identity hidden layer; latent k decodes to e_(k-1), the ground to e_7."""
    decoder = FeatureDecoder(d_latent=LABELED_OBJECTS + 1, hidden=LABELED_OBJECTS + 1, d_clip=LABELED_D_CLIP)
    out = torch.zeros(LABELED_D_CLIP, LABELED_OBJECTS + 1)
    out[7, 0] = 1.0
    for k in range(LABELED_OBJECTS):
        out[k, k + 1] = 1.0
    with torch.no_grad():
        decoder.net[0].weight.copy_(torch.eye(LABELED_OBJECTS + 1))
        decoder.net[0].bias.zero_()
        decoder.net[2].weight.copy_(out)
        decoder.net[2].bias.zero_()
    return decoder.eval()


@pytest.fixture
def artifact_store(labeled_scene, labeled_field, labeled_decoder):
    """Artifact store holding the labeled scene, field and decoder."""
    store = InMemoryArtifactStore()
    store.put_scene(labeled_scene)
    store.put_field(labeled_field)
    store.put_decoder(labeled_decoder)
    return store


@pytest.fixture
def test_client(artifact_store):
    """
    TestClient fixture with dependency overrides.
    Serves the in-memory labeled scene.
    """
    app.dependency_overrides[get_artifact_store] = lambda: artifact_store

    with TestClient(app) as client:
        yield client

    app.dependency_overrides.clear()
