import json

import pytest

from semexport.cli import main
from semexport.exporter import verify


class TestExportVerb:
    def test_comma_list_export(self, tmp_path, capsys):
        out = tmp_path / "targets.txt"
        rc = main(["export", "--names", "couch,dog,trumpet",
                   "--model", "lexicon", "--mode", "name_only",
                   "-o", str(out)])
        assert rc == 0
        info = json.loads(capsys.readouterr().out)
        assert info["classes"] == 3 and info["templates"] == 1
        assert verify(out).ok

    def test_names_file_export_default_ensemble(self, tmp_path, capsys):
        names = tmp_path / "names.txt"
        names.write_text("couch\ndog\n")
        out = tmp_path / "targets.txt"
        rc = main(["export", "--names", str(names), "--model", "lexicon",
                   "-o", str(out)])
        assert rc == 0
        info = json.loads(capsys.readouterr().out)
        assert info["classes"] == 2 and info["templates"] == 80

    def test_template_mode_custom(self, tmp_path, capsys):
        out = tmp_path / "targets.txt"
        rc = main(["export", "--names", "dog", "--model", "lexicon",
                   "--mode", "template",
                   "--template", "a sketch of a {object}", "-o", str(out)])
        assert rc == 0
        assert verify(out).ok

    def test_templates_file(self, tmp_path, capsys):
        tf = tmp_path / "templates.txt"
        tf.write_text("a photo of a {object}.\na drawing of a {object}.\n")
        out = tmp_path / "targets.txt"
        rc = main(["export", "--names", "dog,cat", "--model", "lexicon",
                   "--mode", "ensemble", "--templates", str(tf),
                   "-o", str(out)])
        assert rc == 0
        info = json.loads(capsys.readouterr().out)
        assert info["templates"] == 2

    def test_bad_template_errors_json(self, tmp_path, capsys):
        rc = main(["export", "--names", "dog", "--model", "lexicon",
                   "--mode", "template", "--template", "no placeholder",
                   "-o", str(tmp_path / "t.txt")])
        assert rc == 1
        err = json.loads(capsys.readouterr().err)
        assert err["error"] == "export"

    def test_template_flag_rejected_for_ensemble(self, tmp_path, capsys):
        rc = main(["export", "--names", "dog", "--model", "lexicon",
                   "--mode", "ensemble", "--template", "a {object}.",
                   "-o", str(tmp_path / "t.txt")])
        assert rc == 1
        assert json.loads(capsys.readouterr().err)["error"] == "export"

    def test_duplicate_names_error(self, tmp_path, capsys):
        rc = main(["export", "--names", "dog,dog", "--model", "lexicon",
                   "--mode", "name_only", "-o", str(tmp_path / "t.txt")])
        assert rc == 1
        assert "duplicate" in json.loads(capsys.readouterr().err)["message"]

    def test_model_load_failure(self, tmp_path, capsys, monkeypatch):
        import semexport.encoders as encoders

        def boom(model_id):
            raise encoders.ModelLoadError(f"cannot load model {model_id!r}")

        monkeypatch.setattr("semexport.exporter.get_encoder", boom)
        rc = main(["export", "--names", "dog", "--model", "missing-model",
                   "--mode", "name_only", "-o", str(tmp_path / "t.txt")])
        assert rc == 1
        assert json.loads(capsys.readouterr().err)["error"] == "model_load"


class TestVerifyVerb:
    def test_pass(self, tmp_path, capsys):
        out = tmp_path / "targets.txt"
        main(["export", "--names", "couch,dog", "--model", "lexicon",
              "--mode", "name_only", "-o", str(out)])
        capsys.readouterr()
        rc = main(["verify", str(out)])
        assert rc == 0
        assert "PASS" in capsys.readouterr().out

    def test_fail_with_line_numbers(self, tmp_path, capsys):
        p = tmp_path / "targets.txt"
        p.write_text("dim 2\na\t1.0\n")
        rc = main(["verify", str(p)])
        assert rc == 1
        out = capsys.readouterr().out
        assert "line 2" in out and "FAIL" in out

    def test_missing_file(self, tmp_path, capsys):
        rc = main(["verify", str(tmp_path / "absent.txt")])
        assert rc == 1
        assert json.loads(capsys.readouterr().err)["error"] == "not_found"
