"""Minimal environment contract shared by the grid world and the menu model."""

from __future__ import annotations

import abc
import hashlib
import json

import numpy as np

SCHEMA_VERSION = 1


class Environment(abc.ABC):
    """Episodic MDP with a finite encoded state space.

    Subclasses are immutable after construction; all randomness comes from
    the ``rng`` or ``seed`` arguments of the calling code.
    """

    #: whether :meth:`transition_pmf` is available (required by the exact method)
    has_transition_pmf: bool = False

    @property
    @abc.abstractmethod
    def n_states(self) -> int: ...

    @property
    @abc.abstractmethod
    def n_actions(self) -> int: ...

    @property
    @abc.abstractmethod
    def t_max(self) -> int: ...

    @abc.abstractmethod
    def sample_initial_state(self, rng: np.random.Generator) -> int: ...

    @abc.abstractmethod
    def is_terminal(self, state: int) -> bool: ...

    @abc.abstractmethod
    def with_theta(self, theta) -> "Environment":
        """Copy of this environment with a new parameter vector."""

    @abc.abstractmethod
    def describe(self) -> dict:
        """JSON-serialisable description used for provenance and cache keys."""

    def transition_pmf(self, state: int, action: int) -> dict[int, float]:
        raise NotImplementedError(f"{type(self).__name__} has no explicit transition pmf")

    def digest(self) -> str:
        payload = json.dumps(self.describe(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]

    def to_json(self) -> str:
        return json.dumps({"schema_version": SCHEMA_VERSION, **self.describe()}, sort_keys=True, indent=2)
