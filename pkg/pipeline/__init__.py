from pipeline.artifacts import RunArtifacts
from pipeline.runner import ExperimentRunner, resolve_config

__all__ = ["ExperimentRunner", "RunArtifacts", "resolve_config"]
