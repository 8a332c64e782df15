"""Metrics, experiment drivers and the command-line entry point."""

from laeids.harness.metrics import (ConfusionMatrix, LatencyModel, MetricsReport, confusion, detection_latency,
                                    metrics)

__all__ = ["ConfusionMatrix", "LatencyModel", "MetricsReport", "confusion", "detection_latency", "metrics"]
