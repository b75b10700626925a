"""Newline-delimited JSON study metrics.

Every scheduling and phase event is appended as one JSON object per line,
so each figure of interest (walltime histograms, efficiency, traces) can
be recomputed offline from a single file. Server and launcher append to
the same file; O_APPEND keeps whole-line writes intact.
"""

import json
import threading
import time
from pathlib import Path

from .errors import ReportError


def now_ms() -> int:
    return int(time.time() * 1000)


class MetricsWriter:
    """Append-only JSON-lines event writer, safe across threads."""

    def __init__(self, path, source: str):
        self.path = Path(path) if path else None
        self.source = source
        self._lock = threading.Lock()
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def emit(self, event: str, **payload) -> None:
        if not self.path:
            return
        record = {"event": event, "t_ms": now_ms(), "source": self.source}
        record.update(payload)
        line = json.dumps(record, separators=(",", ":")) + "\n"
        with self._lock:
            with open(self.path, "a") as fh:
                fh.write(line)


def read_events(path) -> list[dict]:
    """Load all events from a metrics file; report bad lines by number."""
    path = Path(path)
    if not path.exists():
        raise ReportError(f"metrics file not found: {path}")
    events = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            events.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ReportError(f"{path}: line {lineno}: {exc.msg}") from exc
    return events
