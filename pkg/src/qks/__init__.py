"""Query-based knowledge sharing head for open-vocabulary multi-label
classification over precomputed image features."""

from .model import ModelConfig, QksHead, init_params
from .prompt_pool import LabelEmbeddingTable, TemplateEmbeddingBank, combine_templates

__all__ = [
    "ModelConfig",
    "QksHead",
    "init_params",
    "LabelEmbeddingTable",
    "TemplateEmbeddingBank",
    "combine_templates",
]

__version__ = "0.1.0"
