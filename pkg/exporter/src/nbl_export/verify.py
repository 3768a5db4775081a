"""Validation pass over a directory of .nbla dumps."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

from .nbla import ROLE_INPUT, ROLE_OUTPUT, check_payload, read_header


@dataclass
class VerifyReport:
    checked: int = 0
    file_errors: dict[str, str] = field(default_factory=dict)
    layer_warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.file_errors and not self.layer_warnings

    def lines(self) -> list[str]:
        out = [f"checked {self.checked} files"]
        for name in sorted(self.file_errors):
            out.append(f"ERROR {name}: {self.file_errors[name]}")
        for warning in self.layer_warnings:
            out.append(f"WARN {warning}")
        if self.ok:
            out.append("all dumps valid and paired")
        return out


def verify_dumps(dump_dir: str) -> VerifyReport:
    report = VerifyReport()
    by_layer: dict[int, dict[int, dict]] = {}
    for name in sorted(os.listdir(dump_dir)):
        if not name.endswith(".nbla"):
            continue
        report.checked += 1
        path = os.path.join(dump_dir, name)
        try:
            header = read_header(path)
            check_payload(path, header)
        except ValueError as exc:
            report.file_errors[name] = str(exc)
            continue
        by_layer.setdefault(header["layer_index"], {})[header["role"]] = header

    for k in sorted(by_layer):
        roles = by_layer[k]
        if ROLE_INPUT not in roles or ROLE_OUTPUT not in roles:
            report.layer_warnings.append(f"layer {k}: unpaired (missing input or output)")
            continue
        a, b = roles[ROLE_INPUT], roles[ROLE_OUTPUT]
        if a["feature_dim"] != b["feature_dim"] or a["token_count"] != b["token_count"]:
            report.layer_warnings.append(
                f"layer {k}: shape mismatch between roles "
                f"({a['feature_dim']}x{a['token_count']} vs "
                f"{b['feature_dim']}x{b['token_count']})"
            )
    return report
