"""
In-memory trial store with read auditing.

The pipeline keeps every preprocessed epoch in one `TrialStore`; the stages
fetch trials by id through it.  Every fetch is recorded per subject, so a run
can prove afterwards which subjects a stage touched (stage 1 must never read
the target subject).

Key classes: `TrialStore`
"""

import logging
import threading
from collections import Counter
from collections.abc import Iterable, Iterator
from contextlib import contextmanager

from rest_adapt.eegpack.models import Trial
from rest_adapt.kinds import TrialKind


class TrialStore:
    """
    Id-indexed collection of trials that counts reads per subject.

    Reads are attributed to the currently open audit scope (see `audit`);
    reads outside any scope go to the ``""`` scope.
    """

    def __init__(self, trials: Iterable[Trial]) -> None:
        self.log = logging.getLogger("TrialStore")
        self._trials: dict[str, Trial] = {}
        for trial in trials:
            if trial.id in self._trials:
                raise KeyError(f"duplicate trial id {trial.id!r}")
            self._trials[trial.id] = trial
        self._lock = threading.Lock()
        self._scope = ""
        self._reads: dict[str, Counter[str]] = {}

    def __len__(self) -> int:
        return len(self._trials)

    def __contains__(self, trial_id: object) -> bool:
        return trial_id in self._trials

    def __iter__(self) -> Iterator[str]:
        return iter(self._trials)

    @property
    def subjects(self) -> list[str]:
        return list(dict.fromkeys(t.subject for t in self._trials.values()))

    def ids(self, subject: str | None = None, kind: TrialKind | None = None) -> list[str]:
        """
        Trial ids in insertion order, optionally filtered.  Does not count as a read.
        """
        return [
            tid for tid, t in self._trials.items() if (subject is None or t.subject == subject) and (kind is None or t.kind == kind)
        ]

    def subject_of(self, trial_id: str) -> str:
        """
        Subject of `trial_id` (metadata lookup, not a read).
        """
        return self._trials[trial_id].subject

    def kind_of(self, trial_id: str) -> TrialKind:
        return self._trials[trial_id].kind

    def get(self, trial_id: str) -> Trial:
        trial = self._trials[trial_id]
        with self._lock:
            self._reads.setdefault(self._scope, Counter())[trial.subject] += 1
        return trial

    def get_many(self, trial_ids: Iterable[str]) -> list[Trial]:
        return [self.get(tid) for tid in trial_ids]

    @contextmanager
    def audit(self, scope: str) -> Iterator[None]:
        """
        Attribute reads inside the block to `scope`.
        """
        previous = self._scope
        self._scope = scope
        try:
            yield
        finally:
            self._scope = previous

    def reads(self, scope: str) -> dict[str, int]:
        """
        Reads per subject recorded under `scope`.
        """
        with self._lock:
            return dict(self._reads.get(scope, Counter()))

    def subjects_read(self, scope: str) -> set[str]:
        return set(self.reads(scope))
