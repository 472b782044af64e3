"""
Preset Loader Utility

Loads named run presets (JSON files in configs/) for the pipeline.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from components.errors import ConfigError

logger = logging.getLogger(__name__)


class PresetLoader:
    """Utility class to load and cache run presets from JSON files."""

    def __init__(self, presets_dir: Optional[Union[str, Path]] = None):
        """
        Initialize the preset loader.

        Args:
            presets_dir: Directory containing preset JSON files
        """
        if presets_dir is None:
            presets_dir = Path(__file__).parent.parent / "configs"
        self.presets_dir = Path(presets_dir)
        self._preset_cache: Dict[str, Dict[str, Any]] = {}

    def load_preset(self, preset_name: str) -> Dict[str, Any]:
        """
        Load a preset by name.

        Args:
            preset_name: Name of the preset file (without .json extension)

        Returns:
            A fresh copy of the preset dictionary

        Raises:
            ConfigError: If the preset doesn't exist or is not a JSON object
        """
        if preset_name not in self._preset_cache:
            preset_file = self.presets_dir / f"{preset_name}.json"
            if not preset_file.exists():
                raise ConfigError(f"Preset not found: {preset_file} (available: {self.list_available_presets()})")
            self._preset_cache[preset_name] = read_json_object(preset_file)
            logger.debug(f"Loaded preset '{preset_name}' from {preset_file}")
        return json.loads(json.dumps(self._preset_cache[preset_name]))

    def reload_preset(self, preset_name: str) -> Dict[str, Any]:
        """Reload a preset from disk, bypassing the cache."""
        self._preset_cache.pop(preset_name, None)
        return self.load_preset(preset_name)

    def list_available_presets(self) -> List[str]:
        if not self.presets_dir.exists():
            return []
        return sorted(f.stem for f in self.presets_dir.glob("*.json"))

    def clear_cache(self):
        self._preset_cache.clear()


def read_json_object(path: Union[str, Path]) -> Dict[str, Any]:
    """Read a JSON file that must contain an object."""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Cannot read config {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"Config {path} must contain a JSON object")
    return data


# Global instance for easy access
_preset_loader = None


def get_preset_loader() -> PresetLoader:
    """Get the global preset loader instance."""
    global _preset_loader
    if _preset_loader is None:
        _preset_loader = PresetLoader()
    return _preset_loader


def load_preset(preset_name: str) -> Dict[str, Any]:
    """Convenience function to load a preset."""
    return get_preset_loader().load_preset(preset_name)
