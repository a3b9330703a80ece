"""
Telemetry configuration (Metrics & Tracing).
Prometheus instrumentation for the serve surface and OpenTelemetry spans
around pipeline stages.
"""
from fastapi import FastAPI
from opentelemetry import trace
from opentelemetry.exporter.otlp.proto.grpc.trace_exporter import OTLPSpanExporter
from opentelemetry.instrumentation.fastapi import FastAPIInstrumentor
from opentelemetry.sdk.resources import Resource
from opentelemetry.sdk.trace import TracerProvider
from opentelemetry.sdk.trace.export import BatchSpanProcessor
from prometheus_fastapi_instrumentator import Instrumentator

from gsgrasp.config import get_settings

TRACER_NAME = "gsgrasp"


def get_tracer() -> trace.Tracer:
    """Tracer for pipeline spans; a no-op until a provider is installed."""
    return trace.get_tracer(TRACER_NAME)


def configure_tracing() -> TracerProvider | None:
    """Install the OTLP tracer provider when ENABLE_OTEL is set."""
    settings = get_settings()
    if not settings.ENABLE_OTEL:
        return None

    resource = Resource.create(attributes={
        "service.name": settings.APP_NAME,
        "service.version": settings.APP_VERSION,
        "deployment.environment": "production" if not settings.DEBUG else "development",
    })
    provider = TracerProvider(resource=resource)

    # Default endpoint is localhost:4317
    provider.add_span_processor(BatchSpanProcessor(OTLPSpanExporter()))
    trace.set_tracer_provider(provider)
    return provider


def setup_telemetry(app: FastAPI) -> None:
    """
    Setup Observability (Metrics & Tracing) for the HTTP surface.

    1. Prometheus Metrics via /metrics
    2. OpenTelemetry Tracing via OTLP
    """
    settings = get_settings()

    if settings.ENABLE_PROMETHEUS:
        instrumentator = Instrumentator(
            should_group_status_codes=False,
            should_ignore_untemplated=True,
            should_instrument_requests_inprogress=True,
            excluded_handlers=["/metrics", "/health", "/health/ready"],
            inprogress_name="inprogress",
            inprogress_labels=True,
        )
        instrumentator.instrument(app).expose(app, include_in_schema=False)

    provider = configure_tracing()
    if provider is not None:
        FastAPIInstrumentor.instrument_app(app, tracer_provider=provider)
