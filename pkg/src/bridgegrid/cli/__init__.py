"""Command-line orchestration for bridgegrid pipelines."""

from .config import PipelineConfig, load_config
from .main import build_parser, main

__all__ = ["PipelineConfig", "build_parser", "load_config", "main"]
