"""Exception hierarchy. Library code raises these; the CLI turns them into exit status 1."""


class CompvocabError(Exception):
    pass


class ConfigError(CompvocabError):
    pass


class FeatureExtractionError(CompvocabError):
    pass


class VocabularyError(CompvocabError):
    pass


class VocabularyFormatError(VocabularyError):
    """File missing, truncated, or failing its checksum."""


class VocabularyVersionError(VocabularyError):
    pass


class VocabularyValidationError(VocabularyError):
    def __init__(self, violations: list) -> None:
        self.violations = violations
        lines = "; ".join(str(v) for v in violations[:5])
        more = f" (+{len(violations) - 5} more)" if len(violations) > 5 else ""
        super().__init__(f"vocabulary failed validation: {lines}{more}")


class InferenceError(CompvocabError):
    pass


class LearningError(CompvocabError):
    pass


class EvaluationError(CompvocabError):
    pass


class DatasetError(CompvocabError):
    pass
