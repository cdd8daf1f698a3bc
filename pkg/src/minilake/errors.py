"""Exception hierarchy shared across the lakehouse modules."""


class LakeError(Exception):
    """Base class for domain errors. ``kind`` is the wire-level error name."""

    @property
    def kind(self) -> str:
        return type(self).__name__


# catalog
class UnknownRef(LakeError):
    pass


class UnknownBranch(UnknownRef):
    pass


class DuplicateBranch(LakeError):
    pass


class ProtectedBranch(LakeError):
    pass


class InvalidBranchName(LakeError):
    pass


class MergeConflict(LakeError):
    def __init__(self, tables):
        self.tables = sorted(tables)
        super().__init__(f"tables changed on both sides: {', '.join(self.tables)}")


class MergeContention(LakeError):
    pass


class NotAnAncestor(LakeError):
    pass


class DanglingReference(LakeError):
    pass


class StorageError(LakeError):
    pass


# tables and plans
class CorruptData(LakeError):
    pass


class PlanSyntaxError(LakeError):
    def __init__(self, message: str, line: int, column: int, source: str | None = None):
        self.line = line
        self.column = column
        self.source = source
        where = f"{source}:" if source else ""
        super().__init__(f"{where}{line}:{column}: {message}")


class PlanTypeError(LakeError):
    pass


class UnknownColumn(PlanTypeError):
    pass


class TypeMismatch(PlanTypeError):
    pass


class UnknownInput(PlanTypeError):
    pass


class EvalError(LakeError):
    pass


class ParseError(LakeError):
    def __init__(self, message: str, row: int, column: str | int):
        self.row = row
        self.column = column
        super().__init__(f"row {row}, column {column}: {message}")


class SchemaMismatch(LakeError):
    pass


# pipelines
class ManifestError(LakeError):
    pass


class CycleError(LakeError):
    def __init__(self, cycle):
        self.cycle = list(cycle)
        super().__init__("dependency cycle: " + " -> ".join(self.cycle))


# environments
class UnknownPackage(LakeError):
    pass


class UnknownVersion(LakeError):
    pass


class Unsatisfiable(LakeError):
    pass


class IsolationError(LakeError):
    pass


# runs and governance
class UnknownRun(LakeError):
    pass


class AuthFailed(LakeError):
    pass


class AccessDenied(LakeError):
    @property
    def kind(self) -> str:
        return "DENIED"


class VerificationFailed(LakeError):
    def __init__(self, report):
        self.report = report
        super().__init__("verification failed: " + "; ".join(
            r.message for r in report.results if not r.passed))

    @property
    def kind(self) -> str:
        return "VERIFICATION_FAILED"


class VerifierError(LakeError):
    pass


class WorkspaceError(LakeError):
    pass
