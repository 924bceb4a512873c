import hashlib
from pathlib import Path

import pytest

from pertcot.corpus import Label, PerturbationRecord
from pertcot.errors import PromptError
from pertcot.prompts import (
    TemplateKind,
    render_critic,
    render_direction,
    render_generator,
    render_standard,
    template_text,
)

GOLDEN_DIR = Path(__file__).parent / "data" / "golden_prompts"

# Frozen digests of the committed template transcriptions. A mismatch means
# someone edited a template file; re-verify against the frozen goldens
# before accepting the change.
TEMPLATE_SHA256 = {
    "standard_system": "a64023d6840d84c9c8a33f15be27eb264a499a99f62794c36a9869b3be444df3",
    "standard_user": "ee74f04c6c753d4cdffe074846fa4e967e1e0cdf82ba59a5199414002187ae87",
    "direction_user": "8d58657893a7800640bef1aee48cc8b29d78872947a87775e2162845c56513e8",
    "generator_system": "44b9ee439b4267d7f6f0017f1b944471387713c0c0152692ba59686f4bbff729",
    "critic_system": "31221074184793ecf553ac99a8715b8a6377d1bcd5b3ad43451750627dc06593",
    "critic_user": "49ab0ec979971f2072f498d390ffb317159bfda0033f92d4840eae4095a736f3",
}

REC_STANDARD = PerturbationRecord("HepG2", "PFDN2", "VDAC3", Label.NOT_DE)
REC_DIRECTION = PerturbationRecord("RPE1", "NCBP1", "RPL28", Label.DOWN)
THINK = "PFDN2 encodes a cytosolic co-chaperone acting upstream of TRiC folding substrates."


def golden(name: str) -> str:
    return (GOLDEN_DIR / f"{name}.txt").read_text(encoding="utf-8")


class TestTemplateAssets:
    @pytest.mark.parametrize("name,digest", sorted(TEMPLATE_SHA256.items()))
    def test_template_bytes_frozen(self, name, digest):
        data = Path("src/pertcot/templates").joinpath(f"{name}.txt").read_bytes()
        assert hashlib.sha256(data).hexdigest() == digest

    def test_generator_user_is_standard_user(self):
        assert template_text(TemplateKind.GENERATOR_USER) == template_text(TemplateKind.STANDARD_USER)


class TestRenderStandard:
    def test_golden_bytes(self):
        bundle = render_standard(REC_STANDARD)
        assert bundle.system_text == golden("standard_system")
        assert bundle.user_text == golden("standard_user")

    def test_user_text_substitutions(self):
        bundle = render_standard(REC_STANDARD)
        assert ("knocking down the PFDN2 gene on the VDAC3 gene in a single-cell "
                "HepG2 cell line using CRISPR interference.") in bundle.user_text

    def test_system_text_tail(self):
        bundle = render_standard(REC_STANDARD)
        assert bundle.system_text.endswith(
            "</think><answer> [upregulated / downregulated / not differentially expressed] </answer>"
        )

    def test_bindings_cover_all_variables(self):
        bundle = render_standard(REC_STANDARD)
        assert bundle.bindings == {"gene_name": "PFDN2", "target_gene": "VDAC3", "cell_type": "HepG2"}
        for value in bundle.bindings.values():
            assert value in bundle.user_text

    def test_empty_gene_rejected(self):
        record = PerturbationRecord("HepG2", "", "VDAC3", Label.UP)
        with pytest.raises(PromptError):
            render_standard(record)

    def test_rendering_is_pure(self):
        assert render_standard(REC_STANDARD) == render_standard(REC_STANDARD)

    def test_no_residual_placeholders(self):
        bundle = render_standard(REC_STANDARD)
        assert "{{" not in bundle.user_text and "{{" not in bundle.system_text


class TestRenderDirection:
    def test_golden_bytes(self):
        bundle = render_direction(REC_DIRECTION)
        assert bundle.user_text == golden("direction_user")
        assert bundle.system_text == golden("standard_system")  # same system prompt

    def test_required_lines_present(self):
        text = render_direction(REC_DIRECTION).user_text
        assert "It is given that the gene in question is differentially expressed" in text
        assert "1. upregulated" in text
        assert "2. downregulated" in text
        assert "'not differentially expressed' is NOT an OPTION." in text

    def test_trailing_analyze_sentence(self):
        text = render_direction(REC_DIRECTION).user_text
        assert text.endswith(
            "knocking down the NCBP1 gene on the RPL28 gene in a single-cell "
            "RPE1 cell line using CRISPR interference."
        )


class TestRenderGenerator:
    def test_golden_bytes(self):
        bundle = render_generator(REC_DIRECTION)
        assert bundle.system_text == golden("generator_system")
        assert bundle.user_text == golden("standard_user").replace("PFDN2", "NCBP1") \
            .replace("VDAC3", "RPL28").replace("HepG2", "RPE1")

    def test_solution_slot_carries_label(self):
        assert "is given to you downregulated." in render_generator(REC_DIRECTION).system_text
        up = PerturbationRecord("K562", "A", "B", Label.UP)
        assert "is given to you upregulated." in render_generator(up).system_text

    def test_four_way_menu_and_example(self):
        text = render_generator(REC_DIRECTION).system_text
        assert "'upregulated', 'downregulated', 'not differentially expressed', or 'I do not know'" in text
        assert "Example of a CORRECT response:" in text

    def test_bindings_include_solution(self):
        assert render_generator(REC_DIRECTION).bindings["solution"] == "downregulated"


class TestRenderCritic:
    def test_golden_bytes(self):
        user_query = render_standard(REC_STANDARD).user_text
        bundle = render_critic(user_query, THINK)
        assert bundle.system_text == golden("critic_system")
        assert bundle.user_text == golden("critic_user")

    def test_grade_menu_present(self):
        bundle = render_critic("q", "t")
        assert "<evaluation> [excellent/good/average/bad/terrible] </evaluation>" in bundle.system_text

    def test_thinking_slot(self):
        bundle = render_critic("some query", "X")
        assert "AI's Reasoning (<think> block): X" in bundle.user_text

    def test_empty_inputs_rejected(self):
        with pytest.raises(PromptError):
            render_critic("", "t")
        with pytest.raises(PromptError):
            render_critic("q", "")
