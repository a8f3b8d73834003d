"""
RunLog - thread-safe JSONL run log (run_log.jsonl).

Each CLI invocation appends one record per event: the resolved config, then
the outcome of the subcommand. Appends are flushed and fsync'd under a lock.
"""

import json
import os
import threading
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple
import logging

logger = logging.getLogger(__name__)

_LOG_LOCK = threading.Lock()

REQUIRED_FIELDS = {"event": str, "command": str}


class RunLog:
    """
    Append-only JSONL writer.

    - Thread-safe with threading.Lock()
    - Atomic appends (write + flush + fsync)
    - Schema check before writing
    - ISO 8601 timestamp added at write time unless deterministic
    """

    def __init__(self, log_file: Path, deterministic: bool = False):
        self.log_file = Path(log_file)
        self.deterministic = deterministic
        self._seq = 0
        self.log_file.parent.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def _validate_entry(entry: Dict[str, Any]) -> Tuple[bool, Optional[str]]:
        for field, expected_type in REQUIRED_FIELDS.items():
            if field not in entry:
                return False, f"missing field '{field}'"
            if not isinstance(entry[field], expected_type):
                return False, f"field '{field}' has wrong type (expected {expected_type.__name__})"
        return True, None

    def _stamp(self, data: Dict[str, Any]) -> Dict[str, Any]:
        entry = dict(data)
        entry["seq"] = self._seq
        if not self.deterministic:
            entry["timestamp"] = datetime.now(timezone.utc).isoformat()
        return entry

    def write(self, event: str, command: str, **payload: Any) -> bool:
        """
        Append one record.

        Returns:
            bool: True if written, False if the record was rejected or I/O failed
        """
        with _LOG_LOCK:
            entry = self._stamp({"event": event, "command": command, **payload})
            ok, error = self._validate_entry(entry)
            if not ok:
                logger.error(f"❌ Run log entry rejected: {error}")
                return False
            try:
                with open(self.log_file, "a", encoding="utf-8") as f:
                    f.write(json.dumps(entry, ensure_ascii=False, sort_keys=True, default=str) + "\n")
                    f.flush()
                    os.fsync(f.fileno())
            except OSError as e:
                logger.error(f"❌ Run log write failed: {e}")
                return False
            self._seq += 1
        logger.debug(f"✅ Run log: {event} ({command})")
        return True

    def write_config(self, command: str, config: Dict[str, Any]) -> bool:
        """Echo every resolved configuration value."""
        return self.write("config", command, config=config)

    def write_outcome(self, command: str, status: str, **details: Any) -> bool:
        return self.write("outcome", command, status=status, **details)


def read_run_log(path: Path) -> List[Dict[str, Any]]:
    if not Path(path).exists():
        return []
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
