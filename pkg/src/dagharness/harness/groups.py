from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from dagharness.recovery import RecoveryAction


class Group(str, Enum):
    G0 = "G0"
    G1 = "G1"
    G2 = "G2"
    G3 = "G3"
    G4 = "G4"
    G5 = "G5"
    G6 = "G6"


LOOP_GROUPS = frozenset({Group.G0, Group.G1, Group.G2, Group.G3})
ENGINE_GROUPS = frozenset({Group.G4, Group.G5, Group.G6})


@dataclass(frozen=True)
class GroupConfig:
    group: Group
    scheduler: str  # "loop" (one ready unit per step) or "graph"
    recovery: str  # none | retry | retry+patch | retry+patch+replan
    planner: str  # none | scripted | scripted+scaffold
    chooser: str = "engine"  # random | plan_order | engine
    lapse_rate: float = 0.0  # per prior failure, for loop groups
    replan_after: int = 0  # loop fallback after this many consecutive failures; 0 = never
    synthetic: bool = False

    @property
    def levels(self) -> frozenset:
        return frozenset(
            {
                "none": (),
                "retry": (RecoveryAction.LOCAL_RETRY,),
                "retry+patch": (RecoveryAction.LOCAL_RETRY, RecoveryAction.LOCAL_PATCH),
                "retry+patch+replan": tuple(RecoveryAction),
            }[self.recovery]
        )


GROUPS: dict[Group, GroupConfig] = {
    # G0 stands in for a strong prompted loop: fewer lapses, inline fallback. Simulated, not measured.
    Group.G0: GroupConfig(Group.G0, "loop", "none", "none", "random", 0.05, 2, synthetic=True),
    Group.G1: GroupConfig(Group.G1, "loop", "none", "none", "random", 0.10, 0),
    Group.G2: GroupConfig(Group.G2, "loop", "none", "scripted", "plan_order", 0.05, 0),
    Group.G3: GroupConfig(Group.G3, "loop", "none", "scripted+scaffold", "plan_order", 0.0, 0),
    Group.G4: GroupConfig(Group.G4, "graph", "retry", "scripted+scaffold"),
    Group.G5: GroupConfig(Group.G5, "graph", "retry+patch", "scripted+scaffold"),
    Group.G6: GroupConfig(Group.G6, "graph", "retry+patch+replan", "scripted+scaffold"),
}

MAX_LAPSE = 0.5
