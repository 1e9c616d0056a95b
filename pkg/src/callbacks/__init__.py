from .metrics_stream import MetricsStream
