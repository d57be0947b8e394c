class MissingFilesError(FileNotFoundError):
    """Raised when manifest rows point at files that do not exist.

    ``ids`` lists every offending image id so the whole batch can be fixed
    at once instead of one file per run.
    """

    def __init__(self, ids, what="image"):
        self.ids = list(ids)
        preview = ", ".join(self.ids[:10])
        more = f" (+{len(self.ids) - 10} more)" if len(self.ids) > 10 else ""
        super().__init__(f"{len(self.ids)} missing {what} file(s): {preview}{more}")


class RecordErrors(ValueError):
    """Per-record failures collected over a batch (e.g. mask/image size mismatch)."""

    def __init__(self, failures):
        self.failures = dict(failures)
        ids = ", ".join(sorted(self.failures)[:10])
        super().__init__(f"{len(self.failures)} record(s) failed: {ids}")


class MissingStageError(RuntimeError):
    """An upstream pipeline artifact is absent or was produced by a different config."""

    def __init__(self, stage, detail=""):
        self.stage = stage
        msg = f"missing or stale upstream artifact; run `{stage}` first"
        if detail:
            msg = f"{msg} ({detail})"
        super().__init__(msg)
