"""Meta-prompt assets and the renderer used by the backward engine and optimizer."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Any, Mapping

import jinja2
from jinja2 import meta

__all__ = [
    "TemplateAsset",
    "TemplateError",
    "load",
    "render_template",
    "ASSET_IDS",
]

ASSET_IDS = (
    "feedback_engine",
    "objective_instruction_base",
    "objective_instruction_chain_generator",
    "objective_instruction_chain_component",
    "conversation_start_instruction_chain",
    "llm_conversation",
    "loss_conversation",
    "loss_conversation_start_instruction",
    "variable_and_peers_info",
    "grad_component_conversation",
    "text_grad_desc",
    "optimizer_system_prompt",
)

# Placeholders that only gate a conditional block; everything else is mandatory.
OPTIONAL = {
    "feedback_engine": {"output_format_str"},
    "objective_instruction_chain_generator": {"instruction_to_backward_engine"},
    "conversation_start_instruction_chain": {"system_variables"},
    "llm_conversation": {"gt"},
    "variable_and_peers_info": {"peers"},
    "grad_component_conversation": {"metadata"},
    "loss_conversation": {"metadata"},
    "text_grad_desc": {
        "system_variables",
        "past_history",
        "failed_proposals",
        "best_score",
        "variable_grad",
        "constraint_text",
        "in_context_examples",
        "variable_desc",
    },
    "optimizer_system_prompt": {"instruction_to_optimizer"},
}

_env = jinja2.Environment(
    trim_blocks=True,
    lstrip_blocks=True,
    keep_trailing_newline=True,
    undefined=jinja2.StrictUndefined,
    autoescape=False,
)


class TemplateError(Exception):
    pass


@dataclass(frozen=True)
class TemplateAsset:
    id: str
    body: str

    @property
    def placeholders(self) -> set[str]:
        return meta.find_undeclared_variables(_env.parse(self.body))

    @property
    def required(self) -> set[str]:
        return self.placeholders - OPTIONAL.get(self.id, set())


@lru_cache(maxsize=None)
def load(asset_id: str) -> TemplateAsset:
    if asset_id not in ASSET_IDS:
        raise TemplateError(f"unknown template asset {asset_id!r}")
    body = resources.files(__name__).joinpath(f"{asset_id}.j2").read_text(encoding="utf-8")
    return TemplateAsset(asset_id, body)


@lru_cache(maxsize=None)
def _compiled(asset_id: str, body: str) -> jinja2.Template:
    return _env.from_string(body)


def render_template(asset: TemplateAsset | str, bindings: Mapping[str, Any] | None = None, **kw: Any) -> str:
    """Render ``asset`` with ``bindings``.

    Optional placeholders may be left out (their sections disappear); a missing
    mandatory placeholder raises :class:`TemplateError` naming it.
    """
    if isinstance(asset, str):
        asset = load(asset)
    values = dict(bindings or {}, **kw)
    missing = sorted(asset.required - values.keys())
    if missing:
        raise TemplateError(f"template {asset.id!r}: unbound placeholder(s) {', '.join(missing)}")
    for name in OPTIONAL.get(asset.id, ()):
        values.setdefault(name, None)
    try:
        return _compiled(asset.id, asset.body).render(**values)
    except jinja2.UndefinedError as exc:
        raise TemplateError(f"template {asset.id!r}: {exc}") from exc
