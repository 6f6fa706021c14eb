"""Define report-valued validation results."""

from dataclasses import dataclass, field
from typing import Iterable, List, Mapping


@dataclass(frozen=True)
class Finding:
    """A single validation problem."""

    code: str
    subject: str
    message: str

    def to_json(self) -> Mapping[str, str]:
        return {"code": self.code, "subject": self.subject, "message": self.message}


@dataclass(frozen=True)
class ValidationReport:
    """Ordered collection of findings; empty means valid."""

    findings: List[Finding] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.findings

    def codes(self) -> List[str]:
        return [finding.code for finding in self.findings]

    def with_code(self, code: str) -> List[Finding]:
        return [finding for finding in self.findings if finding.code == code]

    def extend(self, findings: Iterable[Finding]) -> "ValidationReport":
        return ValidationReport(list(self.findings) + list(findings))

    def to_json(self) -> Mapping[str, object]:
        return {"ok": self.ok, "findings": [finding.to_json() for finding in self.findings]}
