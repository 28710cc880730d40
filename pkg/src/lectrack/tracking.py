"""Word-by-word tracking sessions over an ensemble (or a single model).

Multi-word rare values can only be recognized once their last word has
arrived.  The session keeps the tracker state after every fed token, so when
the abstracted view of the stream changes it rewinds to the longest common
prefix and replays from there.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .corpus import SYSTEM, USER_ASR, DialogExample, SlotSchema, TokenEvent
from .ensemble import Ensemble, average_predictions
from .model import TrackerState, classify, prior, track_token
from .preprocess import AbstractionAssignment, AbstractionDict, abstract_example, deabstract_distribution

log = logging.getLogger(__name__)


@dataclass
class _Fed:
    event: TokenEvent
    states: dict[str, list[TrackerState]]


class TrackerSession:
    def __init__(self, ensemble: Ensemble, schema: SlotSchema, abstraction: AbstractionDict | None = None):
        self.ensemble = ensemble
        self.schema = schema
        self.abstraction = abstraction
        self.dialog = 0
        self.reset()

    def reset(self) -> None:
        self.raw: list[TokenEvent] = []
        self.fed: list[_Fed] = []
        self.assignment = AbstractionAssignment()
        self.turn = 0
        self._last_source = None
        self.dialog += 1

    @property
    def dialog_id(self) -> str:
        return f"session-{self.dialog}"

    def _initial_states(self) -> dict[str, list[TrackerState]]:
        return {
            comp: [TrackerState.initial(m.dims.hidden) for m in models]
            for comp, models in self.ensemble.members.items()
        }

    def _view(self) -> list[TokenEvent]:
        if self.abstraction is None:
            return list(self.raw)
        ex = DialogExample("stream", list(self.raw), {}, [])
        out, self.assignment = abstract_example(ex, self.abstraction, use_labels=False)
        return out.events

    def feed(self, token: str, score: float = 1.0, source: str = USER_ASR) -> dict[str, np.ndarray]:
        """Consume one token; returns the current belief per component."""
        if source == SYSTEM and self._last_source not in (None, SYSTEM):
            self.turn += 1
        self._last_source = source
        self.raw.append(TokenEvent(token, float(score), source, self.turn))
        view = self._view()
        keep = 0
        while keep < len(self.fed) and keep < len(view) and self.fed[keep].event == view[keep]:
            keep += 1
        del self.fed[keep:]
        states = self.fed[-1].states if self.fed else self._initial_states()
        for event in view[keep:]:
            states = {
                comp: [track_token(s, event, m)[0] for s, m in zip(states[comp], models)]
                for comp, models in self.ensemble.members.items()
            }
            self.fed.append(_Fed(event, states))
        return self.belief()

    def belief(self) -> dict[str, np.ndarray]:
        out = {}
        for comp, models in self.ensemble.members.items():
            if self.fed:
                dists = [classify(s, m) for s, m in zip(self.fed[-1].states[comp], models)]
            else:
                dists = [prior(m) for m in models]
            avg = average_predictions(dists)
            out[comp] = deabstract_distribution(
                avg, models[0].classes, comp, self.assignment, self.schema.values(comp)
            )
        return out
