# monitoring.py
import json
import os
import time
from typing import Any, Dict, Optional

from tqdm import tqdm

from errors import IoError


def monitor_stage(action_name: str, func, *args, **kwargs):
    """
    Wrap a pipeline stage and log:
    - latency
    - success/failure
    """

    start = time.time()

    try:
        result = func(*args, **kwargs)
        duration_ms = round((time.time() - start) * 1000)
        tqdm.write(f"[MONITOR] action={action_name} took={duration_ms}ms")
        return result

    except Exception as e:
        duration_ms = round((time.time() - start) * 1000)
        tqdm.write(f"[MONITOR] ERROR action={action_name} took={duration_ms}ms error={repr(e)}")
        raise


class MetricsWriter:
    """
    Append-only JSONL sinks in an output directory.

    metrics.jsonl carries only values that are a pure function of config and
    seed; wall-clock timings go to timings.jsonl.
    """

    METRICS_FILE = "metrics.jsonl"
    TIMINGS_FILE = "timings.jsonl"

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        try:
            os.makedirs(out_dir, exist_ok=True)
            self._metrics = open(os.path.join(out_dir, self.METRICS_FILE), "w", encoding="utf-8")
            self._timings = open(os.path.join(out_dir, self.TIMINGS_FILE), "w", encoding="utf-8")
        except OSError as ex:
            raise IoError(f"cannot open metrics files in {out_dir}: {ex}") from ex

    @staticmethod
    def _line(record: Dict[str, Any]) -> str:
        return json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n"

    def write(self, record: Dict[str, Any]) -> None:
        self._metrics.write(self._line(record))

    def event(self, iteration: int, kind: str, payload: Optional[Dict[str, Any]] = None) -> None:
        self.write({"iter": iteration, "event": kind, **(payload or {})})

    def timing(self, iteration: int, wall_ms: float) -> None:
        self._timings.write(self._line({"iter": iteration, "wall_ms": round(wall_ms, 3)}))

    def close(self) -> None:
        self._metrics.close()
        self._timings.close()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
