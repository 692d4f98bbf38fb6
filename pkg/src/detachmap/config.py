"""Plain key-value configuration files.

Format: one `key = value` pair per line, `#` comments, blank lines ignored.
Keys are dotted lowercase identifiers; duplicate keys are an error so stale
manifests cannot silently shadow each other.
"""

from __future__ import annotations

from .errors import ConfigError


class KeyValueConfig:
    def __init__(self, entries: dict[str, str], source: str = "<memory>"):
        self.entries = dict(entries)
        self.source = source
        self._read = set()

    @classmethod
    def from_file(cls, path) -> "KeyValueConfig":
        entries = {}
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                text = line.strip()
                if not text or text.startswith("#"):
                    continue
                if "=" not in text:
                    raise ConfigError(f"{path}: line {lineno}: expected 'key = value'")
                key, _, value = text.partition("=")
                key = key.strip()
                if key in entries:
                    raise ConfigError(f"{path}: line {lineno}: duplicate key {key!r}")
                entries[key] = value.strip()
        return cls(entries, source=str(path))

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for key in sorted(self.entries):
                fh.write(f"{key} = {self.entries[key]}\n")

    def __contains__(self, key):
        return key in self.entries

    def raw(self, key: str, default=None) -> str | None:
        self._read.add(key)
        if key in self.entries:
            return self.entries[key]
        return default

    def require(self, key: str) -> str:
        value = self.raw(key)
        if value is None:
            raise ConfigError(f"{self.source}: missing required key {key!r}")
        return value

    def get_float(self, key: str, default=None) -> float | None:
        value = self.raw(key)
        if value is None:
            return default
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"{self.source}: key {key!r} is not a number: {value!r}") from None

    def get_int(self, key: str, default=None) -> int | None:
        value = self.raw(key)
        if value is None:
            return default
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"{self.source}: key {key!r} is not an integer: {value!r}") from None

    def get_bool(self, key: str, default=False) -> bool:
        value = self.raw(key)
        if value is None:
            return default
        lowered = value.lower()
        if lowered in ("true", "yes", "1", "on"):
            return True
        if lowered in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{self.source}: key {key!r} is not a boolean: {value!r}")

    def get_list(self, key: str, default=()) -> list[str]:
        value = self.raw(key)
        if value is None:
            return list(default)
        return [item.strip() for item in value.split(",") if item.strip()]

    def with_prefix(self, prefix: str) -> dict[str, str]:
        """Sub-keys under `prefix.` with the prefix stripped."""
        start = prefix + "."
        out = {}
        for key, value in self.entries.items():
            if key.startswith(start):
                self._read.add(key)
                out[key[len(start):]] = value
        return out
