import pytest

from semexport.prompts import (DEFAULT_ENSEMBLE, PLACEHOLDER, PromptError,
                               PromptSetting, load_templates)


class TestPromptSetting:
    def test_unknown_mode(self):
        with pytest.raises(PromptError, match="unknown prompt mode"):
            PromptSetting("zero_shot")

    def test_name_only_rejects_templates(self):
        with pytest.raises(PromptError, match="no templates"):
            PromptSetting("name_only", ("a photo of a {object}",))

    def test_name_only_prompts_are_bare_names(self):
        s = PromptSetting("name_only")
        assert s.prompts_for("couch") == ["couch"]

    def test_single_template_needs_exactly_one(self):
        with pytest.raises(PromptError, match="exactly one"):
            PromptSetting("single_template")
        with pytest.raises(PromptError, match="exactly one"):
            PromptSetting("single_template",
                          ("a {object}.", "the {object}."))

    def test_single_template_fill(self):
        s = PromptSetting("single_template", ("a photo of a {object}",))
        assert s.prompts_for("dog") == ["a photo of a dog"]

    def test_ensemble_needs_templates(self):
        with pytest.raises(PromptError, match="at least one"):
            PromptSetting("ensemble", ())

    def test_ensemble_of_one_allowed(self):
        s = PromptSetting("ensemble", ("a photo of a {object}",))
        assert s.prompts_for("dog") == ["a photo of a dog"]

    def test_placeholder_required(self):
        with pytest.raises(PromptError, match="exactly once"):
            PromptSetting("ensemble", ("a photo.", "a {object}."))

    def test_placeholder_at_most_once(self):
        with pytest.raises(PromptError, match="exactly once"):
            PromptSetting("single_template", ("{object} or {object}",))

    def test_non_string_template(self):
        with pytest.raises(PromptError, match="must be a string"):
            PromptSetting("single_template", (3,))

    def test_templates_stored_as_tuple(self):
        s = PromptSetting("ensemble", ["a {object}.", "the {object}."])
        assert isinstance(s.templates, tuple)


class TestDefaultEnsemble:
    def test_eighty_templates(self):
        assert len(DEFAULT_ENSEMBLE) == 80

    def test_all_valid_and_distinct(self):
        assert len(set(DEFAULT_ENSEMBLE)) == 80
        for t in DEFAULT_ENSEMBLE:
            assert t.count(PLACEHOLDER) == 1
        PromptSetting("ensemble", DEFAULT_ENSEMBLE)


class TestLoadTemplates:
    def test_roundtrip_with_comments(self, tmp_path):
        p = tmp_path / "templates.txt"
        p.write_text("# prompt list\n\na photo of a {object}.\n"
                     "a drawing of a {object}.\n")
        assert load_templates(p) == ("a photo of a {object}.",
                                     "a drawing of a {object}.")

    def test_bad_line_reports_lineno(self, tmp_path):
        p = tmp_path / "templates.txt"
        p.write_text("a photo of a {object}.\nno placeholder here\n")
        with pytest.raises(PromptError, match=r":2: .*exactly once"):
            load_templates(p)

    def test_empty_file(self, tmp_path):
        p = tmp_path / "templates.txt"
        p.write_text("# nothing\n")
        with pytest.raises(PromptError, match="no templates"):
            load_templates(p)
