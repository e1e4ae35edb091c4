"""Per-token logprob trace exporter for OpenAI-compatible endpoints."""

__version__ = "0.1.0"

from .client import CompletionBlock, EndpointSpec, LogprobsUnsupportedError, fetch_block
from .export import ExportReport, Question, export_samples, load_questions
from .prompts import COMPLETION, MULTIPLE_CHOICE, render_prompt

__all__ = [
    "COMPLETION",
    "CompletionBlock",
    "EndpointSpec",
    "ExportReport",
    "LogprobsUnsupportedError",
    "MULTIPLE_CHOICE",
    "Question",
    "export_samples",
    "fetch_block",
    "load_questions",
    "render_prompt",
]
