from .encoders import LexiconEncoder, ModelLoadError, get_encoder
from .exporter import ExportError, VerifyReport, class_vector, export, verify
from .prompts import (DEFAULT_ENSEMBLE, SINGLE_TEMPLATE_DEFAULT, PromptError,
                      PromptSetting, load_templates)

__all__ = [
    "DEFAULT_ENSEMBLE", "ExportError", "LexiconEncoder", "ModelLoadError",
    "PromptError", "PromptSetting", "SINGLE_TEMPLATE_DEFAULT", "VerifyReport",
    "class_vector", "export", "get_encoder", "load_templates", "verify",
]
