"""Base-model registry: a directory of checkpoints plus registry.json.

The index is rewritten atomically (temp file + rename) on every append, so
a killed run never leaves a corrupt registry. Entries are keyed by
(architecture, name); re-running a grid skips entries whose checkpoint
exists and whose config hash matches.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

from .errors import DataError
from .model import ModelConfig, SegModel, load_checkpoint, save_checkpoint

REGISTRY_SCHEMA_VERSION = 1
REGISTRY_FILENAME = "registry.json"


@dataclass(frozen=True)
class RegistryEntry:
    name: str
    architecture: str
    group: tuple[str, ...]
    split: str
    seed: int
    config_hash: str
    checkpoint: str  # relative to the registry directory
    val_loss: float
    val_dice: tuple[float, float, float] | None
    epochs_run: int

    def key(self) -> tuple[str, str]:
        return (self.architecture, self.name)


def _entry_from_json(obj: dict) -> RegistryEntry:
    return RegistryEntry(
        name=obj["name"],
        architecture=obj["architecture"],
        group=tuple(obj["group"]),
        split=obj["split"],
        seed=int(obj["seed"]),
        config_hash=obj["config_hash"],
        checkpoint=obj["checkpoint"],
        val_loss=float(obj["val_loss"]),
        val_dice=tuple(obj["val_dice"]) if obj.get("val_dice") else None,
        epochs_run=int(obj["epochs_run"]),
    )


class Registry:
    def __init__(self, directory: Path):
        self.directory = Path(directory)

    @property
    def index_path(self) -> Path:
        return self.directory / REGISTRY_FILENAME

    def load_entries(self) -> list[RegistryEntry]:
        if not self.index_path.is_file():
            return []
        try:
            payload = json.loads(self.index_path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"corrupt registry index {self.index_path}: {exc}") from exc
        return [_entry_from_json(e) for e in payload.get("entries", [])]

    def _write_entries(self, entries: list[RegistryEntry]) -> None:
        self.directory.mkdir(parents=True, exist_ok=True)
        payload = {
            "schema_version": REGISTRY_SCHEMA_VERSION,
            "entries": [self._entry_to_json(e) for e in entries],
        }
        data = json.dumps(payload, indent=2, sort_keys=True) + "\n"
        fd, tmp = tempfile.mkstemp(dir=self.directory, prefix=".registry-", suffix=".tmp")
        try:
            with os.fdopen(fd, "w") as fh:
                fh.write(data)
            os.replace(tmp, self.index_path)
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)

    @staticmethod
    def _entry_to_json(e: RegistryEntry) -> dict:
        obj = asdict(e)
        obj["group"] = list(e.group)
        obj["val_dice"] = list(e.val_dice) if e.val_dice else None
        return obj

    def find(self, architecture: str, name: str) -> RegistryEntry | None:
        for e in self.load_entries():
            if e.key() == (architecture, name):
                return e
        return None

    def has_valid_entry(self, architecture: str, name: str, config_hash: str) -> bool:
        e = self.find(architecture, name)
        if e is None or e.config_hash != config_hash:
            return False
        return (self.directory / e.checkpoint).is_file()

    def append(self, entry: RegistryEntry) -> None:
        entries = [e for e in self.load_entries() if e.key() != entry.key()]
        entries.append(entry)
        entries.sort(key=lambda e: e.key())
        self._write_entries(entries)

    def checkpoint_path(self, entry: RegistryEntry) -> Path:
        return self.directory / entry.checkpoint

    def load_model(self, entry: RegistryEntry) -> SegModel:
        return load_checkpoint(self.checkpoint_path(entry))

    def store_model(
        self,
        model: SegModel,
        *,
        name: str,
        architecture: str,
        group: tuple[str, ...],
        split: str,
        seed: int,
        val_loss: float,
        val_dice: tuple[float, float, float] | None,
        epochs_run: int,
    ) -> RegistryEntry:
        rel = f"checkpoints/{architecture}__{name}.pt"
        save_checkpoint(
            model,
            self.directory / rel,
            epoch=epochs_run,
            val_metrics={"val_loss": val_loss, "val_dice": list(val_dice) if val_dice else None},
        )
        entry = RegistryEntry(
            name=name,
            architecture=architecture,
            group=group,
            split=split,
            seed=seed,
            config_hash=model.config.hash(),
            checkpoint=rel,
            val_loss=val_loss,
            val_dice=val_dice,
            epochs_run=epochs_run,
        )
        self.append(entry)
        return entry


def expected_model_config(
    model_config: ModelConfig, architecture: str, seed: int
) -> ModelConfig:
    from dataclasses import replace

    return replace(model_config, variant=architecture, seed=seed)
