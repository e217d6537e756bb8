import json
import sys
from pathlib import Path

from moei2.pipeline import PipelineConfig


def load_config(path):
    return PipelineConfig.load(path) if path else PipelineConfig().validate()


def emit(obj, out):
    text = json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n"
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
        print(f"wrote {out}", file=sys.stderr)
