import json
import logging
import time
from unittest.mock import MagicMock, patch

import numpy as np
import pytest
import torch
from fastapi import FastAPI
from scipy.spatial.transform import Rotation

from gsgrasp.config.logging import JsonFormatter, configure_logging
from gsgrasp.core.cache import ArtifactCache
from gsgrasp.core.exceptions import (
    AppException,
    EmptyQueryResultError,
    MissingFileError,
    NotFoundError,
    ParseError,
    ValidationError,
)
from gsgrasp.core.telemetry import setup_telemetry
from gsgrasp.core.transforms import invert_rigid, is_rigid, make_rigid, quat_to_rotmat, rotmat_to_quat


class TestExceptions:
    def test_payload_format(self):
        exc = NotFoundError("query", "mug")
        assert exc.to_dict() == {
            "error": {
                "code": "NOT_FOUND",
                "message": "query not found: mug",
                "details": {"resource": "query", "identifier": "mug"},
            }
        }
        assert exc.status_code == 404

    @pytest.mark.parametrize(
        "exc, exit_code",
        [
            (ValidationError("bad"), 2),
            (ParseError("scene.json", "bad json"), 2),
            (MissingFileError("field.ggf"), 1),
            (EmptyQueryResultError("mug", 0.5), 1),
            (AppException("boom"), 1),
        ],
    )
    def test_exit_codes(self, exc, exit_code):
        assert exc.exit_code == exit_code
        assert isinstance(exc, AppException)


class TestTransforms:
    def test_quaternion_matches_scipy(self):
        R = Rotation.from_rotvec([0.3, -0.7, 1.1]).as_matrix()
        q = torch.as_tensor(rotmat_to_quat(R))[None]
        np.testing.assert_allclose(quat_to_rotmat(q)[0].numpy(), R, atol=1e-12)

    def test_rigid_checks(self):
        T = make_rigid(Rotation.from_rotvec([0.1, 0.2, 0.3]).as_matrix(), np.array([1.0, 2.0, 3.0]))
        assert is_rigid(T, 1e-6)
        np.testing.assert_allclose(invert_rigid(T) @ T, np.eye(4), atol=1e-12)
        assert not is_rigid(np.diag([1.0, 1.0, -1.0, 1.0]), 1e-6)
        assert not is_rigid(np.eye(3), 1e-6)


class TestTelemetry:
    @patch("gsgrasp.core.telemetry.get_settings")
    @patch("gsgrasp.core.telemetry.Instrumentator")
    def test_setup_telemetry_prometheus_enabled(self, mock_instrumentator, mock_get_settings):
        mock_settings = MagicMock()
        mock_settings.ENABLE_PROMETHEUS = True
        mock_settings.ENABLE_OTEL = False
        mock_get_settings.return_value = mock_settings

        app = FastAPI()
        setup_telemetry(app)

        mock_instrumentator.assert_called_once()
        mock_instrumentator.return_value.instrument.assert_called_once_with(app)

    @patch("gsgrasp.core.telemetry.get_settings")
    @patch("gsgrasp.core.telemetry.trace")
    @patch("gsgrasp.core.telemetry.OTLPSpanExporter")
    @patch("gsgrasp.core.telemetry.BatchSpanProcessor")
    @patch("gsgrasp.core.telemetry.FastAPIInstrumentor")
    def test_setup_telemetry_otel_enabled(
        self, mock_fastapi_instr, mock_processor, mock_exporter, mock_trace, mock_get_settings
    ):
        mock_settings = MagicMock()
        mock_settings.ENABLE_PROMETHEUS = False
        mock_settings.ENABLE_OTEL = True
        mock_settings.APP_NAME = "test"
        mock_settings.APP_VERSION = "1.0"
        mock_settings.DEBUG = False
        mock_get_settings.return_value = mock_settings

        app = FastAPI()
        setup_telemetry(app)

        mock_fastapi_instr.instrument_app.assert_called_once()
        mock_processor.assert_called_once_with(mock_exporter.return_value)
        mock_trace.set_tracer_provider.assert_called_once()

    @patch("gsgrasp.core.telemetry.get_settings")
    @patch("gsgrasp.core.telemetry.Instrumentator")
    @patch("gsgrasp.core.telemetry.FastAPIInstrumentor")
    def test_setup_telemetry_disabled(self, mock_fastapi_instr, mock_instrumentator, mock_get_settings):
        mock_settings = MagicMock()
        mock_settings.ENABLE_PROMETHEUS = False
        mock_settings.ENABLE_OTEL = False
        mock_get_settings.return_value = mock_settings

        setup_telemetry(FastAPI())

        mock_instrumentator.assert_not_called()
        mock_fastapi_instr.instrument_app.assert_not_called()


class TestLogging:
    def test_json_record_carries_context(self):
        record = logging.LogRecord("gsgrasp.training", logging.INFO, __file__, 1, "step %d", (3,), None)
        record.iteration = 3
        record.view_id = "view_001"

        payload = json.loads(JsonFormatter().format(record))

        assert payload["message"] == "step 3"
        assert payload["level"] == "INFO"
        assert payload["logger"] == "gsgrasp.training"
        assert payload["iteration"] == 3
        assert payload["view_id"] == "view_001"
        assert "query" not in payload

    def test_configure_logging_levels(self):
        root = logging.getLogger()
        previous = (root.handlers[:], root.level)
        try:
            configure_logging(debug=False)
            assert root.level == logging.INFO
            assert isinstance(root.handlers[0].formatter, JsonFormatter)

            configure_logging(debug=True)
            assert root.level == logging.DEBUG
            assert not isinstance(root.handlers[0].formatter, JsonFormatter)
        finally:
            root.handlers, root.level = previous[0], previous[1]


class TestArtifactCache:
    def test_get_set(self):
        cache = ArtifactCache()
        cache.set("key", "value")
        assert cache.get("key") == "value"
        assert cache.get("missing") is None

    def test_expiration(self):
        cache = ArtifactCache(default_ttl_seconds=0.1)
        cache.set("key", "value")
        assert cache.get("key") == "value"

        time.sleep(0.15)

        assert cache.get("key") is None
        assert cache.size() == 0

    def test_zero_ttl_never_expires(self):
        cache = ArtifactCache(default_ttl_seconds=0.05)
        cache.set("pinned", "value", ttl_seconds=0)
        time.sleep(0.1)
        assert cache.get("pinned") == "value"

    def test_delete_clear(self):
        cache = ArtifactCache()
        cache.set("k1", "v1")
        cache.set("k2", "v2")

        assert cache.delete("k1") is True
        assert cache.get("k1") is None
        assert cache.delete("missing") is False

        cache.clear()
        assert cache.size() == 0

    def test_get_or_load(self):
        cache = ArtifactCache()
        loader = MagicMock(return_value="loaded")

        assert cache.get_or_load("key", loader) == "loaded"
        assert cache.get_or_load("key", loader) == "loaded"
        loader.assert_called_once()

    def test_file_change_invalidates_entry(self, tmp_path):
        path = tmp_path / "field.ggf"
        path.write_bytes(b"abc")
        cache = ArtifactCache()
        cache.set(str(path), "old")
        assert cache.get(str(path)) == "old"

        path.write_bytes(b"abcdef")

        assert cache.get(str(path)) is None

    def test_removed_file_invalidates_entry(self, tmp_path):
        path = tmp_path / "decoder.pt"
        path.write_bytes(b"x")
        cache = ArtifactCache()
        cache.set(str(path), "decoder")

        path.unlink()

        assert cache.get(str(path)) is None
