import logging
import os
from datetime import datetime

import toml
import yaml

from rtwin.errors import ValidationError
from rtwin.settings import config

logger = logging.getLogger(__name__)

PYPROJECT_FILE = os.path.join(os.path.dirname(config.ROOT_DIR), "pyproject.toml")


# Extract version info from TOML
def read_pyproject_toml(file_path: str = PYPROJECT_FILE) -> dict:
    if not os.path.exists(file_path):
        return {"version": "unknown", "license": ""}
    with open(file_path) as toml_file:
        toml_data = toml.load(toml_file)
    poetry_section = toml_data.get("tool", {}).get("poetry", {})
    return {
        "version": poetry_section.get("version", "unknown"),
        "license": poetry_section.get("license", ""),
    }


def export_config(engine_config, path: str, overwrite: bool = False) -> str:
    """
    fn: export_config
    Description: Writes the effective configuration as YAML, stamped with the package version
    Args:
        engine_config (EngineConfig): configuration to write
        path (str): destination file, ".yaml" is appended when missing
        overwrite (bool): replace an existing file
    return:
        str: the written path
    """
    if not path.endswith((".yaml", ".yml")):
        path += ".yaml"
    if os.path.exists(path) and not overwrite:
        raise ValidationError(f"{path} already exists (pass --force to overwrite)")
    toml_info = read_pyproject_toml()
    data = {
        "rtwin": {
            "VERSION": toml_info["version"],
            "EXPORT_DATE": datetime.now().strftime("%Y-%m-%d %H:%M:%S"),
            "LICENSE": toml_info["license"],
        },
        **engine_config.to_dict(),
    }
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w") as file:
        yaml.safe_dump(data, file, sort_keys=False)
    logger.info(f"Configuration exported to {path}")
    return path
