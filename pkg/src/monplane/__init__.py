"""Monitoring-plane toolkit: name-routed messaging, a threshold/zone
monitoring DSL, statistical link monitors, and a recursive service-graph
query engine, tied together by a deterministic demo scenario."""

__version__ = "0.1.0"
