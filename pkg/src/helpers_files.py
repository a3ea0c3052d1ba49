"""
Module pour la gestion des fichiers, des chemins et de la configuration.
"""

import json
import os
from pathlib import Path
from typing import Any, Dict, Optional

import yaml
from dotenv import load_dotenv

from src.constants import *
from src.model import ConfigurationError


def load_yaml_config(config_path: str) -> Dict[str, Any]:
    """Charge un fichier de configuration YAML."""
    with open(config_path, "r", encoding="utf-8") as f:
        return yaml.safe_load(f) or {}


def load_json_config(config_path: str) -> Dict[str, Any]:
    """Charge un fichier de configuration JSON fourni par l'utilisateur."""
    try:
        with open(config_path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise ConfigurationError(ERR_RUN_CONFIG.format(f"fichier introuvable {config_path}"))
    except json.JSONDecodeError as e:
        raise ConfigurationError(ERR_RUN_CONFIG.format(f"{config_path} : {e}"))


def merge_config(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Fusion récursive : les valeurs de `override` l'emportent, None est ignoré."""
    merged = dict(base)
    for key, value in override.items():
        if value is None:
            continue
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_config(merged[key], value)
        else:
            merged[key] = value
    return merged


def ensure_directory_exists(directory_path) -> Path:
    """S'assure qu'un répertoire existe, le crée si nécessaire."""
    path = Path(directory_path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def get_output_root(default: Optional[str] = None) -> Path:
    """Racine des sorties : variable ECRF_OUTPUT_ROOT (environnement ou .env), sinon le défaut."""
    load_dotenv()
    return Path(os.getenv(OUTPUT_ROOT_ENV) or default or DEFAULT_OUTPUT_ROOT)


def get_output_filename(base_name: str, extension: str, suffix: Optional[str] = None) -> str:
    """Génère un nom de fichier pour la sortie avec suffixe optionnel."""
    if suffix:
        return f"{base_name}_{suffix}.{extension}"
    return f"{base_name}.{extension}"
