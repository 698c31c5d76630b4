"""Exclusive test-cloud orchestration with a deterministic simulated network."""

from nimbus.aggregation import ETR, FinalReport, OutputStandard, integrate_etrs, merge_eptrs, validate_output_standard
from nimbus.allocation import CloudProposal, Lease, allocate, form_clouds, register_service, release, verify_disjointness
from nimbus.execution import EPTR, ExternalRunner, SimulatedRunner, SplitMix64, run_task, simulated_runner
from nimbus.fault import ExceptionKind, FaultRecord, RecoveryAction, RecoveryContext, classify, decide_recovery
from nimbus.model import (
    ConsumerRequest,
    Module,
    ProductAllocation,
    ProductSpec,
    Registry,
    TechniqueSpec,
    TestingCloud,
    TestingService,
    ValidatedRequest,
    validate_request,
)
from nimbus.scheduler import (
    Assignment,
    DistributionMode,
    TestTask,
    WorkloadEstimate,
    decide_clone_count,
    estimate_workload,
    partition_load,
)
from nimbus.simnet import Scenario, SimResult, compute_metrics, load_scenario, run_simulation

__version__ = "0.1.0"
