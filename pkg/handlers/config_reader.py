import os
from pathlib import Path

import tomli

from handlers.errors import ConfigError


class ConfigReader(object):
    def __init__(self, key_delimiter=".", config_dir=None):
        self._config = {}

        self._key_delimiter = key_delimiter
        self._config_path = str(config_dir or Path(__file__).resolve().parent.parent / "config")

        self._config_name = os.getenv("APP_ENV") or "dev"
        self._config_file = f"{self._config_name}.toml"

        self._env_prefix = "CBT"

    def _get_env_config_file(self):
        return os.path.join(self._config_path, self._config_file)

    def _merge_dicts(self, src, target):
        for k, v in src.items():
            if isinstance(v, dict) and k in target:
                self._merge_dicts(v, target[k])
            else:
                target[k] = v

    def _merge_with_env_prefix(self, key):
        key = key.replace(".", "_")

        if self._env_prefix != "":
            return f"{self._env_prefix}_{key}".upper()

        return key.upper()

    def _search_dict(self, d, keys):
        if not keys:
            return d
        for key in keys:
            val = self._find_insensitive(key, d)
            if val is not None and not isinstance(val, dict):
                return val
            elif val:
                return self._search_dict(val, keys[1::])
            else:
                return None

    def _find_insensitive(self, key, source):
        real_key = next((real for real in source.keys() if real.lower() == key.lower()), None)
        return source.get(real_key)

    def get(self, key, default=None):
        # Read from ENV first
        val = os.getenv(self._merge_with_env_prefix(key))
        if val is not None:
            return val

        val = self._find_insensitive(key, self._config)
        if val is not None:
            return val

        # Find nested parameter
        if self._key_delimiter in key:
            path = key.split(self._key_delimiter)

            source = self.get(path[0])
            if source is not None and isinstance(source, dict):
                val = self._search_dict(source, path[1::])
                if val is not None:
                    return val

        return default

    def read_config(self):
        cfg = {}
        self._config = {}

        config_file = self._get_env_config_file()
        if not os.path.exists(config_file):
            # logging must still work from any working directory
            return self

        with open(config_file, "rb") as fp:
            cfg.update(tomli.load(fp))

        self._merge_dicts(cfg, self._config)

        return self

    def read_flat(self, path):
        """
        Read a flat ``key = value`` run document.

        Nested tables are rejected: every run setting lives at the top level so
        the echoed copy in a run directory is a complete, diffable record.
        Environment variables ``CBT_<KEY>`` override file values.
        """
        try:
            with open(path, "rb") as fp:
                doc = tomli.load(fp)
        except FileNotFoundError as e:
            raise ConfigError(f"Config file not found: {path}") from e
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"Config file {path} is not valid key=value text: {e}") from e

        nested = [k for k, v in doc.items() if isinstance(v, dict)]
        if nested:
            raise ConfigError(f"Config must be flat; found tables: {', '.join(sorted(nested))}")

        for key in list(doc.keys()):
            env_val = os.getenv(self._merge_with_env_prefix(key))
            if env_val is not None:
                doc[key] = _parse_env_value(env_val)

        return doc


def _parse_env_value(raw):
    try:
        return tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        return raw
