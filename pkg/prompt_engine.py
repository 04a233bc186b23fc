"""
Prompt template loading and rendering.

Templates are plain UTF-8 resource files in templates/ (override the
directory with GSCO_TEMPLATES_DIR). Placeholders use literal "{Name}"
syntax and rendering is flat substitution: no conditionals, no loops.

Functions:
    list_templates() -> Tuple[str, ...]
    load_template(template_id) -> PromptTemplate
    template_placeholders(template_id) -> Tuple[str, ...]
    format_label_set(label_set) -> str
    render_prompt(template_id, bindings) -> str
"""

import os
import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Dict, Mapping, Tuple, Union

from domain_model import LabelSet
from exceptions import BindingError, ConfigError, MissingBindingError, UnknownTemplateError

PLACEHOLDERS = ("Modality", "Label Set", "Question", "Disease", "RAD", "MoED")

TEMPLATE_FILES: Dict[str, str] = {
    "CLS": "cls.txt",
    "MRG": "mrg.txt",
    "VQA": "vqa.txt",
    "DGB": "dgb.txt",
    "DGB-SFT": "dgb_sft.txt",
    "DES": "des.txt",
    "GSCO-0": "gsco_0.txt",
    "GSCO-1": "gsco_1.txt",
    "GSCO-2": "gsco_2.txt",
    "GSCO-3": "gsco_3.txt",
    "VQA-RAD": "vqa_rad.txt",
    "MRG-RAD": "mrg_rad.txt",
}

TEMPLATE_PLACEHOLDERS: Dict[str, Tuple[str, ...]] = {
    "CLS": ("Modality", "Label Set"),
    "MRG": (),
    "VQA": ("Question",),
    "DGB": ("Modality", "Disease"),
    "DGB-SFT": ("Modality",),
    "DES": ("Modality",),
    "GSCO-0": ("Modality", "Label Set", "RAD", "MoED"),
    "GSCO-1": ("Modality", "RAD", "MoED", "Label Set"),
    "GSCO-2": ("Modality", "RAD", "MoED", "Label Set"),
    "GSCO-3": ("Modality", "RAD", "MoED", "Label Set"),
    "VQA-RAD": ("Question", "RAD"),
    "MRG-RAD": ("RAD",),
}

GSCO_VARIANTS = ("GSCO-0", "GSCO-1", "GSCO-2", "GSCO-3")

_PLACEHOLDER = re.compile(r"\{(" + "|".join(re.escape(name) for name in PLACEHOLDERS) + r")\}")

BindingValue = Union[str, LabelSet]
PromptBindings = Mapping[str, BindingValue]


@dataclass(frozen=True)
class PromptTemplate:
    """A template body plus the placeholders it declares, in order of first use."""
    template_id: str
    body: str
    placeholders: Tuple[str, ...]


def get_templates_dir() -> Path:
    """Returns GSCO_TEMPLATES_DIR if set, else the bundled templates/ directory."""
    env = os.environ.get("GSCO_TEMPLATES_DIR")
    if env:
        return Path(env)
    return Path(__file__).resolve().parent / "templates"


def list_templates() -> Tuple[str, ...]:
    return tuple(TEMPLATE_FILES)


def _canonical(text: str) -> str:
    text = text.replace("\r\n", "\n").replace("\r", "\n")
    lines = [line.rstrip() for line in text.split("\n")]
    return "\n".join(lines).strip("\n")


@lru_cache(maxsize=None)
def _load(templates_dir: Path, template_id: str) -> PromptTemplate:
    path = templates_dir / TEMPLATE_FILES[template_id]
    try:
        body = _canonical(path.read_text(encoding="utf-8"))
    except OSError as err:
        raise ConfigError(f"Template {template_id} cannot be read from {path}: {err}") from err

    found = tuple(dict.fromkeys(_PLACEHOLDER.findall(body)))
    declared = TEMPLATE_PLACEHOLDERS[template_id]
    if set(found) != set(declared):
        raise ConfigError(
            f"Template {template_id} uses placeholders {list(found)} but declares {list(declared)}"
        )
    return PromptTemplate(template_id=template_id, body=body, placeholders=found)


def load_template(template_id: str) -> PromptTemplate:
    """
    Loads a template by id.

    Raises:
        UnknownTemplateError: if the id has no resource file.
    """
    if template_id not in TEMPLATE_FILES:
        raise UnknownTemplateError(f"Unknown template id {template_id!r}")
    return _load(get_templates_dir(), template_id)


def template_placeholders(template_id: str) -> Tuple[str, ...]:
    return load_template(template_id).placeholders


def format_label_set(label_set: LabelSet) -> str:
    """Display labels joined by ', ' with a terminal period: 'Normal, Tumor.'"""
    return ", ".join(label_set.labels) + "."


def _resolve(bindings: PromptBindings) -> Dict[str, str]:
    values: Dict[str, str] = {}
    for name, value in bindings.items():
        if name not in PLACEHOLDERS:
            raise BindingError(f"Unknown placeholder name {name!r}")
        if isinstance(value, LabelSet):
            if name != "Label Set":
                raise BindingError(f"Only {{Label Set}} accepts a label set, not {{{name}}}")
            value = format_label_set(value)
        if not isinstance(value, str):
            raise BindingError(f"Binding for {{{name}}} must be a string, got {type(value).__name__}")
        if _PLACEHOLDER.search(value):
            raise BindingError(f"Binding for {{{name}}} contains a placeholder: {value!r}")
        values[name] = value
    return values


def render_prompt(template_id: str, bindings: PromptBindings) -> str:
    """
    Renders a template with every {Name} replaced by its binding.

    {Label Set} may be bound to a LabelSet, which is formatted with
    format_label_set. A value ending in "." absorbs a "." that directly
    follows its placeholder, so "{Label Set}." never renders "..".

    Raises:
        UnknownTemplateError: for an unknown template id.
        BindingError: for an unknown key or a value holding a known placeholder.
        MissingBindingError: for a placeholder with no binding.
    """
    template = load_template(template_id)
    values = _resolve(bindings)
    for name in template.placeholders:
        if name not in values:
            raise MissingBindingError(name)

    body = template.body
    parts = []
    position = 0
    for match in _PLACEHOLDER.finditer(body):
        value = values[match.group(1)]
        parts.append(body[position:match.start()])
        parts.append(value)
        position = match.end()
        if value.endswith(".") and body.startswith(".", position):
            position += 1
    parts.append(body[position:])
    return "".join(parts)
