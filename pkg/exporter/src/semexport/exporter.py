"""Export semantic target files and verify them.

File format (shared with the experiment framework's loader):
line 1 `dim <d>`, then one `name<TAB>v1 ... v_d` line per class,
vectors unit norm. Per class: encode every filled template, normalize
each embedding, average, renormalize.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .encoders import get_encoder
from .prompts import PromptSetting

NORM_TOL = 1e-6


class ExportError(ValueError):
    pass


def class_vector(encoder, setting: PromptSetting, name):
    """Unit-norm vector for one class: normalized template embeddings,
    averaged in a canonical row order (so template order never matters),
    then renormalized."""
    embs = np.asarray(encoder.encode(setting.prompts_for(name)),
                      dtype=np.float64)
    norms = np.linalg.norm(embs, axis=1, keepdims=True)
    if np.any(norms == 0.0) or not np.all(np.isfinite(embs)):
        raise ExportError(f"empty or degenerate encoding for class {name!r}")
    unit = embs / norms
    unit = unit[np.lexsort(unit.T[::-1])]
    avg = unit.mean(axis=0)
    n = np.linalg.norm(avg)
    if n == 0.0:
        raise ExportError(f"template embeddings cancel for class {name!r}")
    return avg / n


def export(names, model_id, setting: PromptSetting, out_path):
    """Write the targets file for `names`; returns (n_classes, dim)."""
    names = list(names)
    if not names:
        raise ExportError("no class names given")
    seen = set()
    for name in names:
        if not name:
            raise ExportError("empty class name")
        if name in seen:
            raise ExportError(f"duplicate class name {name!r}")
        seen.add(name)
    encoder = get_encoder(model_id)
    rows = [class_vector(encoder, setting, name) for name in names]
    dim = rows[0].shape[0]
    with open(out_path, "w") as fh:
        fh.write(f"dim {dim}\n")
        for name, vec in zip(names, rows):
            fh.write(name + "\t" + " ".join(repr(float(v)) for v in vec) + "\n")
    return len(names), dim


@dataclass
class VerifyReport:
    path: str
    n_classes: int = 0
    dim: int = 0
    problems: list = field(default_factory=list)  # (lineno, message)
    cosine_min: float = None
    cosine_max: float = None
    cosine_mean: float = None

    @property
    def ok(self):
        return not self.problems

    def summary(self):
        lines = [f"{self.path}: {self.n_classes} classes, dim {self.dim}"]
        if self.cosine_mean is not None:
            lines.append(
                f"pairwise cosine min {self.cosine_min:.4f} "
                f"max {self.cosine_max:.4f} mean {self.cosine_mean:.4f}")
        for lineno, msg in self.problems:
            lines.append(f"line {lineno}: {msg}")
        lines.append("PASS" if self.ok else "FAIL")
        return "\n".join(lines)


def verify(path) -> VerifyReport:
    """Check format, dim consistency, unit norms, duplicates; collect
    every problem with its line number and summarize pairwise cosines."""
    report = VerifyReport(path=str(path))
    vectors = []
    names = set()
    with open(path) as fh:
        header = fh.readline()
        parts = header.split()
        if len(parts) != 2 or parts[0] != "dim" or not parts[1].isdigit():
            report.problems.append((1, "expected `dim <d>` header"))
            return report
        report.dim = int(parts[1])
        if report.dim < 1:
            report.problems.append((1, "dim must be positive"))
            return report
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            cols = line.rstrip("\n").split("\t")
            if len(cols) != 2:
                report.problems.append((lineno, "expected name<TAB>vector"))
                continue
            name, raw = cols
            if name in names:
                report.problems.append((lineno, f"duplicate class {name!r}"))
                continue
            names.add(name)
            try:
                vals = np.array(raw.split(), dtype=np.float64)
            except ValueError:
                report.problems.append((lineno, "bad numeric value"))
                continue
            if vals.shape[0] != report.dim:
                report.problems.append(
                    (lineno, f"expected {report.dim} values, got {vals.shape[0]}"))
                continue
            if not np.all(np.isfinite(vals)):
                report.problems.append((lineno, "non-finite value"))
                continue
            norm = np.linalg.norm(vals)
            if abs(norm - 1.0) > NORM_TOL:
                report.problems.append((lineno, f"norm {norm!r} is not 1"))
                continue
            vectors.append(vals)
    report.n_classes = len(vectors)
    if report.ok and not vectors:
        report.problems.append((2, "no class vectors"))
    if len(vectors) >= 2:
        cosines = [float(a @ b) for a, b in combinations(vectors, 2)]
        report.cosine_min = min(cosines)
        report.cosine_max = max(cosines)
        report.cosine_mean = float(np.mean(cosines))
    return report
