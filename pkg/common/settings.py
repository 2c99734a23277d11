import json
import os
from functools import lru_cache
from pathlib import Path

from dotenv import load_dotenv
from pydantic import BaseModel, ValidationError

from common.errors import ConfigurationError, InputError


class Settings(BaseModel):
    """Process-level knobs; none of them changes numerical results."""
    log_level: str = "INFO"
    workers: int = 1


def load_settings():
    load_dotenv()
    return Settings(
        log_level=os.getenv("FAAC_LOG_LEVEL", "INFO"),
        workers=int(os.getenv("FAAC_WORKERS", "1")),
    )


@lru_cache(maxsize=None)
def load_package_config(package_dir):
    config_path = os.path.join(package_dir, "config.json")
    with open(config_path, "r") as f:
        return json.load(f)


def read_json(path):
    try:
        with open(path, "r") as f:
            return json.load(f)
    except OSError as e:
        raise InputError(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise InputError(f"{path} is not valid JSON: {e}") from e


def write_json(path, payload):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=False)
            f.write("\n")
    except OSError as e:
        raise InputError(f"cannot write {path}: {e}") from e


def write_frame(frame, target):
    """CSV without the index; a path target gets its parent directories created."""
    try:
        if isinstance(target, (str, os.PathLike)):
            os.makedirs(os.path.dirname(os.path.abspath(target)), exist_ok=True)
        frame.to_csv(target, index=False, lineterminator="\n")
    except OSError as e:
        raise InputError(f"cannot write {target}: {e}") from e


def validate(model_cls, payload, source="configuration"):
    """Validate a dict against a pydantic model, mapping failures to ConfigurationError."""
    try:
        return model_cls.model_validate(payload)
    except ValidationError as e:
        raise ConfigurationError(f"invalid {source}: {e}") from e
