"""Command-line interface: export and verify.

Failures exit nonzero with a JSON error object on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .encoders import ModelLoadError
from .exporter import ExportError, export, verify
from .prompts import (DEFAULT_ENSEMBLE, SINGLE_TEMPLATE_DEFAULT, PromptError,
                      PromptSetting, load_templates)


def _fail(code, message):
    print(json.dumps({"error": code, "message": message}, sort_keys=True),
          file=sys.stderr)
    return 1


def _read_names(spec):
    if os.path.exists(spec):
        with open(spec) as fh:
            names = [line.strip() for line in fh if line.strip()]
    else:
        names = [n.strip() for n in spec.split(",") if n.strip()]
    return names


def _setting(args) -> PromptSetting:
    if args.mode == "name_only":
        if args.template or args.templates:
            raise PromptError("name_only takes no templates")
        return PromptSetting("name_only")
    if args.mode == "template":
        if args.templates:
            raise PromptError("--templates is for ensemble mode")
        return PromptSetting("single_template",
                             (args.template or SINGLE_TEMPLATE_DEFAULT,))
    if args.template:
        raise PromptError("--template is for template mode")
    templates = (load_templates(args.templates) if args.templates
                 else DEFAULT_ENSEMBLE)
    return PromptSetting("ensemble", templates)


def cmd_export(args):
    names = _read_names(args.names)
    setting = _setting(args)
    n, dim = export(names, args.model, setting, args.output)
    print(json.dumps({"classes": n, "dim": dim, "mode": args.mode,
                      "templates": len(setting.effective_templates()),
                      "output": args.output}, sort_keys=True))
    return 0


def cmd_verify(args):
    report = verify(args.path)
    print(report.summary())
    return 0 if report.ok else 1


def build_parser():
    p = argparse.ArgumentParser(
        prog="semexport",
        description="Export semantic target files from a text encoder")
    sub = p.add_subparsers(dest="verb", required=True)

    q = sub.add_parser("export", help="encode class names into a targets file")
    q.add_argument("--names", required=True,
                   help="file with one name per line, or a comma list")
    q.add_argument("--model", required=True,
                   help="encoder id: `lexicon` (built-in, offline) or a "
                        "sentence-transformers model")
    q.add_argument("--mode", choices=["name_only", "template", "ensemble"],
                   default="ensemble")
    q.add_argument("--template", default=None,
                   help="template for --mode template "
                        f"(default {SINGLE_TEMPLATE_DEFAULT!r})")
    q.add_argument("--templates", default=None,
                   help="template file for --mode ensemble "
                        "(default: built-in 80-template list)")
    q.add_argument("-o", "--output", required=True)
    q.set_defaults(func=cmd_export)

    q = sub.add_parser("verify", help="check a targets file")
    q.add_argument("path")
    q.set_defaults(func=cmd_verify)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (PromptError, ExportError) as e:
        return _fail("export", str(e))
    except ModelLoadError as e:
        return _fail("model_load", str(e))
    except FileNotFoundError as e:
        return _fail("not_found", str(e))
    except (ValueError, OSError) as e:
        return _fail(type(e).__name__, str(e))


if __name__ == "__main__":
    sys.exit(main())
