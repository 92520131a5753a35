import datetime as dt

import pytest

from incident_rl.event_log import Incident
from incident_rl.mdp import PAPER_REWARDS, Mdp, RewardTable

TALK = "talk to the client"
NONE = "no measure taken"
HELD = "held with force"
SECL = "seclusion"
SEND = "send to another room"
DISTRACT = "distract client"
TERMINATE = "terminate contact"
PREVENT = "preventive measures started"

DAY0 = dt.date(2016, 1, 1)


def inc(client, day, aggression, *measures, involved="staff"):
    return Incident(client, DAY0 + dt.timedelta(days=day), aggression, involved, tuple(measures))


def two_action_mdp(gamma_unused=None) -> Mdp:
    """One state ``s``: A ends the episode (+1), B loops back (-1)."""
    return Mdp(("s", "Tau"), ("A", "B"),
               {("s", "A"): {"Tau": 1.0}, ("s", "B"): {"s": 1.0}},
               RewardTable({"s": 0, "Tau": 1}, {"A": 0, "B": -1}), {"s": 1.0})


def two_variant_mdp() -> Mdp:
    """va --talk--> Tau or pp with equal odds; pp --talk--> Tau. Mean reward -1."""
    return Mdp(("va", "pp", "Tau"), (TALK,),
               {("va", TALK): {"Tau": 0.5, "pp": 0.5}, ("pp", TALK): {"Tau": 1.0}},
               PAPER_REWARDS, {"va": 1.0})


def chain_mdp() -> Mdp:
    """Deterministic va -> pp -> Tau under talk."""
    return Mdp(("va", "pp", "Tau"), (TALK,),
               {("va", TALK): {"pp": 1.0}, ("pp", TALK): {"Tau": 1.0}},
               PAPER_REWARDS, {"va": 1.0})


@pytest.fixture
def two_action():
    return two_action_mdp()


@pytest.fixture
def two_variant():
    return two_variant_mdp()
