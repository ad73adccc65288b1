"""Prompt settings: how class names become encoder inputs.

Three modes: the bare name, one template, or an ensemble of templates
whose embeddings get averaged. Templates carry a single `{object}`
placeholder for the class name.
"""

from __future__ import annotations

from dataclasses import dataclass, field

PLACEHOLDER = "{object}"
MODES = ("name_only", "single_template", "ensemble")

SINGLE_TEMPLATE_DEFAULT = "a photo of a {object}"

# Standard 80-prompt ensemble used for zero-shot image classifiers,
# with the class-name slot spelled {object}.
DEFAULT_ENSEMBLE = (
    "a bad photo of a {object}.",
    "a photo of many {object}.",
    "a sculpture of a {object}.",
    "a photo of the hard to see {object}.",
    "a low resolution photo of the {object}.",
    "a rendering of a {object}.",
    "graffiti of a {object}.",
    "a bad photo of the {object}.",
    "a cropped photo of the {object}.",
    "a tattoo of a {object}.",
    "the embroidered {object}.",
    "a photo of a hard to see {object}.",
    "a bright photo of a {object}.",
    "a photo of a clean {object}.",
    "a photo of a dirty {object}.",
    "a dark photo of the {object}.",
    "a drawing of a {object}.",
    "a photo of my {object}.",
    "the plastic {object}.",
    "a photo of the cool {object}.",
    "a close-up photo of a {object}.",
    "a black and white photo of the {object}.",
    "a painting of the {object}.",
    "a painting of a {object}.",
    "a pixelated photo of the {object}.",
    "a sculpture of the {object}.",
    "a bright photo of the {object}.",
    "a cropped photo of a {object}.",
    "a plastic {object}.",
    "a photo of the dirty {object}.",
    "a jpeg corrupted photo of a {object}.",
    "a blurry photo of the {object}.",
    "a photo of the {object}.",
    "a good photo of the {object}.",
    "a rendering of the {object}.",
    "a {object} in a video game.",
    "a photo of one {object}.",
    "a doodle of a {object}.",
    "a close-up photo of the {object}.",
    "a photo of a {object}.",
    "the origami {object}.",
    "the {object} in a video game.",
    "a sketch of a {object}.",
    "a doodle of the {object}.",
    "a origami {object}.",
    "a low resolution photo of a {object}.",
    "the toy {object}.",
    "a rendition of the {object}.",
    "a photo of the clean {object}.",
    "a photo of a large {object}.",
    "a rendition of a {object}.",
    "a photo of a nice {object}.",
    "a photo of a weird {object}.",
    "a blurry photo of a {object}.",
    "a cartoon {object}.",
    "art of a {object}.",
    "a sketch of the {object}.",
    "a embroidered {object}.",
    "a pixelated photo of a {object}.",
    "itap of the {object}.",
    "a jpeg corrupted photo of the {object}.",
    "a good photo of a {object}.",
    "a plushie {object}.",
    "a photo of the nice {object}.",
    "a photo of the small {object}.",
    "a photo of the weird {object}.",
    "the cartoon {object}.",
    "art of the {object}.",
    "a drawing of the {object}.",
    "a photo of the large {object}.",
    "a black and white photo of a {object}.",
    "the plushie {object}.",
    "a dark photo of a {object}.",
    "itap of a {object}.",
    "graffiti of the {object}.",
    "a toy {object}.",
    "itap of my {object}.",
    "a photo of a cool {object}.",
    "a photo of a small {object}.",
    "a tattoo of the {object}.",
)


class PromptError(ValueError):
    pass


def _check_template(t):
    if not isinstance(t, str):
        raise PromptError(f"template must be a string, got {type(t).__name__}")
    n = t.count(PLACEHOLDER)
    if n != 1:
        raise PromptError(
            f"template {t!r} must contain {PLACEHOLDER} exactly once, has {n}")


@dataclass(frozen=True)
class PromptSetting:
    """mode + template list; templates() yields the effective list.

    name_only takes no templates (the bare name is the prompt).
    single_template takes exactly one. ensemble takes one or more;
    a one-template ensemble is allowed and degenerates to single_template.
    """

    mode: str
    templates: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "templates", tuple(self.templates))
        if self.mode not in MODES:
            raise PromptError(f"unknown prompt mode {self.mode!r}")
        if self.mode == "name_only":
            if self.templates:
                raise PromptError("name_only takes no templates")
        elif self.mode == "single_template":
            if len(self.templates) != 1:
                raise PromptError("single_template takes exactly one template")
        elif not self.templates:
            raise PromptError("ensemble needs at least one template")
        for t in self.templates:
            _check_template(t)

    def effective_templates(self):
        if self.mode == "name_only":
            return (PLACEHOLDER,)
        return self.templates

    def prompts_for(self, name):
        return [t.replace(PLACEHOLDER, name) for t in self.effective_templates()]


def load_templates(path):
    """One template per line; blank lines and # comments skipped."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            t = line.strip()
            if not t or t.startswith("#"):
                continue
            try:
                _check_template(t)
            except PromptError as e:
                raise PromptError(f"{path}:{lineno}: {e}")
            out.append(t)
    if not out:
        raise PromptError(f"{path}: no templates found")
    return tuple(out)
