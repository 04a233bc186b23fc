from pathlib import Path

import pytest

import prompt_engine
from domain_model import LabelSet
from exceptions import BindingError, ConfigError, MissingBindingError, UnknownTemplateError
from prompt_engine import (
    GSCO_VARIANTS,
    TEMPLATE_PLACEHOLDERS,
    format_label_set,
    list_templates,
    load_template,
    render_prompt,
    template_placeholders,
)

GOLDEN_DIR = Path(__file__).parent / "fixtures" / "golden"

LABELS = LabelSet.from_names(["Normal", "Pneumonia"])
RAD = "Pneumonia, Normal, Pneumonia, Pneumonia, Normal"
MOED = "Pneumonia, Normal, Pneumonia"

BINDINGS = {
    "CLS": {"Modality": "chest X-ray", "Label Set": LABELS},
    "MRG": {},
    "VQA": {"Question": "which organ is abnormal"},
    "DGB": {"Modality": "endoscopy", "Disease": "ulcerative colitis"},
    "DGB-SFT": {"Modality": "endoscopy"},
    "DES": {"Modality": "chest X-ray"},
    "VQA-RAD": {"Question": "which organ is abnormal", "RAD": "liver"},
    "MRG-RAD": {"RAD": "No acute process."},
}
for _variant in GSCO_VARIANTS:
    BINDINGS[_variant] = {"Modality": "chest X-ray", "Label Set": LABELS, "RAD": RAD, "MoED": MOED}


@pytest.mark.parametrize("template_id", sorted(BINDINGS))
def test_rendering_matches_golden_file(template_id):
    rendered = render_prompt(template_id, BINDINGS[template_id])
    golden = (GOLDEN_DIR / f"{template_id}.txt").read_bytes()
    assert (rendered + "\n").encode("utf-8") == golden


def test_every_template_has_a_golden():
    assert sorted(BINDINGS) == sorted(list_templates())


def test_cls_and_dgb_sentinel_lines():
    cls = render_prompt("CLS", BINDINGS["CLS"]).split("\n")
    assert "Your task is disease diagnosis." in cls
    assert "The possible diagnoses are: Normal, Pneumonia." in cls

    dgb = render_prompt("DGB", BINDINGS["DGB"])
    assert "the diagnosis is ulcerative colitis" in dgb
    assert dgb.endswith("findings and impressions.")

    sft = render_prompt("DGB-SFT", BINDINGS["DGB-SFT"]).split("\n")
    assert sft[-1] == "Findings list the observations and impressions outlines the final diagnosis."
    assert "Disease" not in template_placeholders("DGB-SFT")


@pytest.mark.parametrize("template_id", sorted(TEMPLATE_PLACEHOLDERS))
def test_declared_placeholders_match_body(template_id):
    assert set(template_placeholders(template_id)) == set(TEMPLATE_PLACEHOLDERS[template_id])


def test_rendering_leaves_no_braces():
    for template_id, bindings in BINDINGS.items():
        rendered = render_prompt(template_id, bindings)
        assert "{" not in rendered and "}" not in rendered


def test_rendering_is_deterministic():
    assert render_prompt("GSCO-2", BINDINGS["GSCO-2"]) == render_prompt("GSCO-2", dict(BINDINGS["GSCO-2"]))


def test_label_set_as_plain_string():
    rendered = render_prompt("CLS", {"Modality": "OCT", "Label Set": "CNV, DME, Drusen, Normal"})
    assert rendered.endswith("The possible diagnoses are: CNV, DME, Drusen, Normal.")


def test_trailing_period_is_not_doubled():
    rendered = render_prompt("CLS", {"Modality": "OCT", "Label Set": "CNV, Normal."})
    assert rendered.endswith("CNV, Normal.")
    assert ".." not in rendered


def test_format_label_set():
    assert format_label_set(LabelSet(("Normal", "Tumor"))) == "Normal, Tumor."


def test_missing_binding():
    with pytest.raises(MissingBindingError) as excinfo:
        render_prompt("CLS", {"Label Set": LABELS})
    assert excinfo.value.name == "Modality"


def test_unknown_template():
    with pytest.raises(UnknownTemplateError):
        render_prompt("GSCO-4", {})


def test_unknown_binding_key():
    with pytest.raises(BindingError):
        render_prompt("DES", {"Modality": "CT", "Organ": "liver"})


def test_binding_with_placeholder_syntax():
    with pytest.raises(BindingError):
        render_prompt("DES", {"Modality": "{Question}"})


def test_braces_that_are_not_placeholders_pass_through():
    question = "is the lesion in segment {IV} or {set: a, b}"
    rendered = render_prompt("VQA", {"Question": question})
    assert f"The question is {question}." in rendered.split("\n")
    assert render_prompt("MRG-RAD", {"RAD": "Normal {}."}).endswith("Normal {}.")


def test_label_set_only_binds_label_set_placeholder():
    with pytest.raises(BindingError):
        render_prompt("DES", {"Modality": LABELS})


def test_extra_known_binding_is_ignored():
    assert render_prompt("MRG", {"Modality": "CT"}) == render_prompt("MRG", {})


def test_templates_dir_override(tmp_path, monkeypatch):
    (tmp_path / "des.txt").write_text("Describe the {Modality} image.  \r\n\r\n", encoding="utf-8")
    monkeypatch.setenv("GSCO_TEMPLATES_DIR", str(tmp_path))
    assert render_prompt("DES", {"Modality": "CT"}) == "Describe the CT image."


def test_template_with_wrong_placeholders(tmp_path, monkeypatch):
    (tmp_path / "des.txt").write_text("Describe the {Disease}.\n", encoding="utf-8")
    monkeypatch.setenv("GSCO_TEMPLATES_DIR", str(tmp_path))
    with pytest.raises(ConfigError):
        load_template("DES")


def test_bundled_templates_end_with_newline():
    for name in prompt_engine.TEMPLATE_FILES.values():
        text = (Path(prompt_engine.__file__).parent / "templates" / name).read_text(encoding="utf-8")
        assert text.endswith("\n") and not text.endswith("\n\n")
