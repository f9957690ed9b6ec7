"""Dataset id bookkeeping for the annotation loop."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

from .errors import InvariantError


@dataclass
class SamplePool:
    """Ordered id registry partitioned into labeled / unlabeled / val / test,
    with the per-round selection history.

    ``promote`` is the only mutation: it moves freshly annotated ids from the
    unlabeled to the labeled set and never lets an id live in two partitions.
    """

    labeled_ids: List[int]
    unlabeled_ids: List[int]
    val_ids: List[int]
    test_ids: List[int]
    history: List[List[int]] = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        sets = {
            "labeled": set(self.labeled_ids),
            "unlabeled": set(self.unlabeled_ids),
            "val": set(self.val_ids),
            "test": set(self.test_ids),
        }
        for name, ids in zip(sets, (self.labeled_ids, self.unlabeled_ids,
                                    self.val_ids, self.test_ids)):
            if len(sets[name]) != len(ids):
                raise InvariantError(f"pool: duplicate ids inside {name} set")
        names = list(sets)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                overlap = sets[a] & sets[b]
                if overlap:
                    raise InvariantError(f"pool: {a} and {b} share ids {sorted(overlap)[:5]}")

    def promote(self, selected: Sequence[int]) -> None:
        """Move ``selected`` from unlabeled to labeled and log the round."""
        picked = list(selected)
        if len(set(picked)) != len(picked):
            raise InvariantError(f"promote: duplicate ids in selection {picked}")
        unl = set(self.unlabeled_ids)
        missing = [i for i in picked if i not in unl]
        if missing:
            raise InvariantError(f"promote: ids {missing} not in the unlabeled pool")
        self.labeled_ids = self.labeled_ids + sorted(picked)
        chosen = set(picked)
        self.unlabeled_ids = [i for i in self.unlabeled_ids if i not in chosen]
        self.history.append(sorted(picked))
        self.validate()

    @property
    def train_ids(self) -> List[int]:
        return self.labeled_ids + self.unlabeled_ids
