import json
import logging
import re
from pathlib import Path

import pandas as pd

from services.channel_core import BUILTIN_CHANNELS, Dmc, make_dmc
from services.errors import ChannelLoadError, ChannelValidationError

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.12g"
_BUILTIN = re.compile(r"^\s*([a-z0-9_]+)\s*(?:\((.*)\))?\s*$")


def _parse_builtin(spec: str) -> Dmc | None:
    match = _BUILTIN.match(spec)
    if match is None or match.group(1) not in BUILTIN_CHANNELS:
        return None
    factory = BUILTIN_CHANNELS[match.group(1)]
    raw_args = match.group(2)
    try:
        args = [float(a) for a in raw_args.split(",")] if raw_args and raw_args.strip() else []
    except ValueError:
        raise ChannelLoadError(f"built-in channel arguments must be numbers, got {raw_args!r}")
    try:
        return factory(*args)
    except (TypeError, ValueError) as exc:
        raise ChannelLoadError(f"cannot build {spec!r}: {exc}") from exc


def load_channel(spec: str) -> Dmc:
    """Load a channel from a JSON file or a built-in name.

    Built-ins are written like a call: ``example1(0.1)``, ``example2``,
    ``bsc(0.25)``, ``zchannel(0.1)``. A JSON file holds
    ``{"transition": [[...], ...], "costs": [...]}``.

    Args:
        spec (str): built-in expression or path to a JSON channel file

    Returns:
        Dmc: validated channel
    """
    builtin = _parse_builtin(spec)
    if builtin is not None:
        logger.info("using built-in channel %s", builtin.name)
        return builtin

    path = Path(spec)
    if not path.is_file():
        raise ChannelLoadError(
            f"{spec!r} is neither a channel file nor a built-in ({', '.join(sorted(BUILTIN_CHANNELS))})"
        )
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ChannelLoadError(f"{path}: malformed JSON ({exc.msg} at line {exc.lineno})") from exc
    if not isinstance(payload, dict) or "transition" not in payload or "costs" not in payload:
        raise ChannelLoadError(f"{path}: expected an object with 'transition' and 'costs'")
    try:
        return make_dmc(payload["transition"], payload["costs"], name=payload.get("name", path.stem))
    except ChannelValidationError:
        raise
    except (TypeError, ValueError) as exc:
        raise ChannelLoadError(f"{path}: {exc}") from exc


def _flatten(value) -> str:
    if isinstance(value, dict):
        return json.dumps(value, sort_keys=True, default=str)
    return str(value)


def frame_to_csv(frame: pd.DataFrame, provenance: dict) -> str:
    """CSV text with one leading ``# key: value`` line per provenance entry."""
    header = "".join(f"# {key}: {_flatten(provenance[key])}\n" for key in sorted(provenance))
    return header + frame.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def payload_to_json(payload: dict, provenance: dict) -> str:
    body = dict(payload)
    body["provenance"] = provenance
    return json.dumps(body, sort_keys=True, indent=2, default=_json_default) + "\n"


def _json_default(value):
    if hasattr(value, "tolist"):
        return value.tolist()
    if hasattr(value, "item"):
        return value.item()
    return str(value)


def write_output(text: str, out: str | None) -> None:
    """Write to ``out``, or to stdout when no path is given."""
    if out is None:
        print(text, end="")
        return
    path = Path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    logger.info("wrote %s", path)


def write_frame(frame: pd.DataFrame, provenance: dict, out: str | None, fmt: str = "csv") -> None:
    if fmt == "json":
        write_output(payload_to_json({"rows": frame.to_dict(orient="records")}, provenance), out)
    else:
        write_output(frame_to_csv(frame, provenance), out)
