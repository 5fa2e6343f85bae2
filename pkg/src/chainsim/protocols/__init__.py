"""Protocol registry."""

from chainsim.protocols.base import Protocol, RunEnv
from chainsim.protocols.gossip import GossipProtocol
from chainsim.protocols.leaderless import LeaderlessProtocol
from chainsim.protocols.quorumstore import QuorumStoreProtocol
from chainsim.protocols.sampled import SampledProtocol
from chainsim.protocols.turbine import TurbineProtocol

PROTOCOLS: dict[str, type[Protocol]] = {
    cls.name: cls
    for cls in (GossipProtocol, QuorumStoreProtocol, SampledProtocol,
                LeaderlessProtocol, TurbineProtocol)
}

__all__ = ["Protocol", "RunEnv", "PROTOCOLS", "GossipProtocol",
           "QuorumStoreProtocol", "SampledProtocol", "LeaderlessProtocol",
           "TurbineProtocol"]
