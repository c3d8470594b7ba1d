"""Choreography runtime verification on a blockchain token chain.

Business-process handovers are documented as enriched transactions on a
(simulated) Bitcoin-style chain: an unspent output acts as the process
token, a zero-value data output carries the process metadata, and
script-hash outputs commit to the off-chain process data. The package
covers the byte formats, the transaction engine with the receiver's
validation checks, the six-step handover protocol with PKI identities, a
deterministic chain simulator with greedy and non-greedy publishing, and an
evaluation harness with fault injection.
"""

from .chain import ChainSim, SimConfig, load_dump
from .encoding import DataBlock, EnrichedTransaction, TxKind
from .engine import FeePolicy, ProcessToken, build_handover_template, validate_template
from .harness import ScenarioConfig, audit, run_scenario, summarize
from .model import ProcessModel, check_conformance, enumerate_valid_traces, load_model

__all__ = [
    "ChainSim",
    "DataBlock",
    "EnrichedTransaction",
    "FeePolicy",
    "ProcessModel",
    "ProcessToken",
    "ScenarioConfig",
    "SimConfig",
    "TxKind",
    "audit",
    "build_handover_template",
    "check_conformance",
    "enumerate_valid_traces",
    "load_dump",
    "load_model",
    "run_scenario",
    "summarize",
    "validate_template",
]

__version__ = "0.1.0"
