"""Prompt templates, loaded by stage name.

Templates are data, not code: plain markdown files with ``{placeholder}``
fields, bundled under ``how2kit/prompts/``. A directory override lets a
deployment swap wording without touching the package.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path


class TemplateError(Exception):
    pass


STAGE_TEMPLATES = {
    "extract": "pipeline_extract.md",
    "llm_filter": "pipeline_llm_filter.md",
    "postprocess_rewrite": "pipeline_postprocess_rewrite.md",
    "postprocess_resources": "pipeline_postprocess_extract_resources.md",
    "final_filter": "pipeline_final_filter.md",
    "generation_base": "generation_base.md",
    "generation_instruct": "generation_inst.md",
    "judge": "judge.md",
}


def load_template(stage: str, override_dir: str | Path | None = None) -> str:
    try:
        filename = STAGE_TEMPLATES[stage]
    except KeyError:
        raise TemplateError(f"no template registered for stage {stage!r}") from None
    if override_dir is not None:
        path = Path(override_dir) / filename
        if path.exists():
            return path.read_text("utf-8")
    try:
        return resources.files("how2kit.prompts").joinpath(filename).read_text("utf-8")
    except FileNotFoundError:
        raise TemplateError(f"missing template file {filename}") from None


def render(template: str, **fields: str) -> str:
    try:
        return template.format(**fields)
    except (KeyError, IndexError) as exc:
        raise TemplateError(f"template placeholder not supplied: {exc}") from exc
