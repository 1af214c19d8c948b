# src/providers/directory_provider.py

from __future__ import annotations

from pathlib import Path
from typing import List, Union

from core.models import TrainSample
from data_access import list_scene_dirs, read_scene
from providers.base import SceneProvider


class DirectoryProvider(SceneProvider):
    """Scenes previously written by `datagen`, in sorted directory order."""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        self._dirs = list_scene_dirs(self.root)

    def scene_ids(self) -> List[str]:
        return [d.name for d in self._dirs]

    def get(self, index: int) -> TrainSample:
        return read_scene(self._dirs[index])
