"""relspam: spam classification that refines per-message predictions with
relational structure (stacked learning and joint probabilistic inference
over groups of related messages)."""

__version__ = "0.1.0"
