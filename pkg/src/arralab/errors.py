"""Exception types. The CLI maps these onto exit codes."""


class ArraError(Exception):
    exit_code = 1


class ConfigError(ArraError, ValueError):
    exit_code = 2


class DependencyError(ArraError):
    """A stage's input artifact is missing."""

    exit_code = 3

    def __init__(self, artifact: str, producer: str, path=None):
        self.artifact = artifact
        self.producer = producer
        self.path = path
        where = f" (expected at {path})" if path else ""
        super().__init__(f"missing {artifact}{where}; run `{producer}` first")


class NumericalAbort(ArraError):
    exit_code = 4


class ShapeError(ArraError, ValueError):
    def __init__(self, op: str, shapes: dict):
        self.op = op
        self.shapes = shapes
        desc = ", ".join(f"{k}={v}" for k, v in shapes.items())
        super().__init__(f"{op}: shape mismatch ({desc})")


class IntegrityError(ArraError):
    pass


class CaptionParseError(ArraError, ValueError):
    def __init__(self, message: str, position: int, text: str = ""):
        self.position = position
        self.text = text
        super().__init__(f"{message} at position {position}: {text!r}")


class ManifestError(ArraError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"manifest line {line}: {message}")


class VocabError(ArraError, KeyError):
    def __init__(self, word: str):
        self.word = word
        super().__init__(f"out-of-vocabulary word {word!r}")

    def __str__(self):
        return self.args[0]
