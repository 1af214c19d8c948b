# src/providers/base.py

from abc import ABC, abstractmethod
from typing import Iterator, List

from core.models import TrainSample


class SceneProvider(ABC):
    """A fixed, ordered collection of stereo scenes with ground truth."""

    @abstractmethod
    def scene_ids(self) -> List[str]:
        ...

    @abstractmethod
    def get(self, index: int) -> TrainSample:
        ...

    def __len__(self) -> int:
        return len(self.scene_ids())

    def __iter__(self) -> Iterator[TrainSample]:
        for i in range(len(self)):
            yield self.get(i)

    def load(self) -> List[TrainSample]:
        return list(self)
