"""Domain types for products, techniques, clouds and services.

Everything a Service Manager reasons about lives here: the product under
test and its request, the technique catalog, Testing Services and the
Testing Clouds that group them, product allocations and the registry that
owns all of it. Request validation (the Service Reception role) is here too.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping

from nimbus.errors import EmptyProduct, InvalidField, UnknownTechnique

SCHEMA_VERSION = "v1"


def _positive(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value) and value > 0


@dataclass(frozen=True)
class Module:
    module_id: str
    size_kloc: float


@dataclass(frozen=True)
class ProductSpec:
    product_id: str
    modules: tuple[Module, ...]
    defect_density_estimate: float = 0.0

    def module(self, module_id: str) -> Module:
        for m in self.modules:
            if m.module_id == module_id:
                return m
        raise KeyError(module_id)

    def to_dict(self) -> dict:
        return {
            "product_id": self.product_id,
            "modules": [{"module_id": m.module_id, "size_kloc": m.size_kloc} for m in self.modules],
            "defect_density_estimate": self.defect_density_estimate,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> ProductSpec:
        return cls(
            product_id=d["product_id"],
            modules=tuple(Module(m["module_id"], m["size_kloc"]) for m in d["modules"]),
            defect_density_estimate=d.get("defect_density_estimate", 0.0),
        )


@dataclass(frozen=True)
class TechniqueSpec:
    technique_id: str
    test_case_density: float
    avg_case_time: float
    avg_case_size: float = 1.0  # recorded, never used in any decision

    def to_dict(self) -> dict:
        return {
            "technique_id": self.technique_id,
            "test_case_density": self.test_case_density,
            "avg_case_time": self.avg_case_time,
            "avg_case_size": self.avg_case_size,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> TechniqueSpec:
        return cls(d["technique_id"], d["test_case_density"], d["avg_case_time"], d.get("avg_case_size", 1.0))


@dataclass(frozen=True)
class ConsumerRequest:
    product: ProductSpec
    deadline: float
    techniques: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "product": self.product.to_dict(),
            "deadline": self.deadline,
            "techniques": list(self.techniques),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> ConsumerRequest:
        return cls(ProductSpec.from_dict(d["product"]), d["deadline"], tuple(d["techniques"]))


@dataclass(frozen=True)
class ValidatedRequest:
    request: ConsumerRequest
    specs: tuple[TechniqueSpec, ...]  # same order as request.techniques

    @property
    def product(self) -> ProductSpec:
        return self.request.product

    @property
    def deadline(self) -> float:
        return self.request.deadline

    def spec(self, technique_id: str) -> TechniqueSpec:
        for s in self.specs:
            if s.technique_id == technique_id:
                return s
        raise KeyError(technique_id)


def validate_request(request: ConsumerRequest, catalog: Iterable[TechniqueSpec]) -> ValidatedRequest:
    """Check a consumer request and bind each requested technique to its spec.

    Raises a :class:`~nimbus.errors.ValidationError` subclass for the first
    problem found; nothing is repaired.
    """
    catalog = {spec.technique_id: spec for spec in catalog}
    if not catalog:
        raise InvalidField("catalog", "technique catalog is empty")

    product = request.product
    if not isinstance(product.product_id, str) or not product.product_id:
        raise InvalidField("product_id", "must be a nonempty string")
    if not product.modules:
        raise EmptyProduct(product.product_id)
    seen = set()
    for m in product.modules:
        if not isinstance(m.module_id, str) or not m.module_id:
            raise InvalidField("module_id", "must be a nonempty string")
        if m.module_id in seen:
            raise InvalidField("modules", f"duplicate module id {m.module_id!r}")
        seen.add(m.module_id)
        if not _positive(m.size_kloc):
            raise InvalidField("size_kloc", f"module {m.module_id!r} has size {m.size_kloc!r}")
    density = product.defect_density_estimate
    if isinstance(density, bool) or not isinstance(density, (int, float)) or not density >= 0:
        raise InvalidField("defect_density_estimate", "must be >= 0")
    if not _positive(request.deadline):
        raise InvalidField("deadline", f"must be > 0, got {request.deadline!r}")
    if not request.techniques:
        raise InvalidField("techniques", "at least one technique is required")
    if len(set(request.techniques)) != len(request.techniques):
        raise InvalidField("techniques", "duplicate technique")

    specs = []
    for tid in request.techniques:
        if tid not in catalog:
            raise UnknownTechnique(tid)
        spec = catalog[tid]
        for name in ("test_case_density", "avg_case_time", "avg_case_size"):
            if not _positive(getattr(spec, name)):
                raise InvalidField(name, f"technique {tid!r}")
        specs.append(spec)
    return ValidatedRequest(request, tuple(specs))


class ServiceState(str, Enum):
    FREE = "free"
    LEASED = "leased"
    FAILED = "failed"


@dataclass
class TestingService:
    """One worker of a Testing Cloud.

    ``state`` is the only mutable field; the allocation module owns it.
    """

    __test__ = False  # not a pytest class

    service_id: str
    technique_id: str
    capacity: float = 1.0
    state: ServiceState = ServiceState.FREE
    leased_to: str | None = None
    clone: bool = False

    @property
    def live(self) -> bool:
        return self.state is not ServiceState.FAILED

    def to_dict(self) -> dict:
        return {
            "service_id": self.service_id,
            "technique_id": self.technique_id,
            "capacity": self.capacity,
            "state": self.state.value,
            "leased_to": self.leased_to,
            "clone": self.clone,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> TestingService:
        return cls(
            service_id=d["service_id"],
            technique_id=d["technique_id"],
            capacity=d.get("capacity", 1.0),
            state=ServiceState(d.get("state", "free")),
            leased_to=d.get("leased_to"),
            clone=d.get("clone", False),
        )


@dataclass
class TestingCloud:
    __test__ = False

    cloud_id: str
    technique_id: str
    max_services: int
    services: list[TestingService] = field(default_factory=list)

    def service(self, service_id: str) -> TestingService:
        for s in self.services:
            if s.service_id == service_id:
                return s
        raise KeyError(service_id)

    def free_services(self) -> list[TestingService]:
        return [s for s in self.services if s.state is ServiceState.FREE]

    def to_dict(self) -> dict:
        return {
            "cloud_id": self.cloud_id,
            "technique_id": self.technique_id,
            "max_services": self.max_services,
            "services": [s.to_dict() for s in self.services],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> TestingCloud:
        services = []
        for s in d.get("services", []):
            s = dict(s)
            s.setdefault("technique_id", d["technique_id"])
            services.append(TestingService.from_dict(s))
        return cls(d["cloud_id"], d["technique_id"], d["max_services"], services)


@dataclass(frozen=True)
class ProductAllocation:
    """The set of clouds held by one product, with its Service Manager."""

    product_id: str
    manager_id: str
    cloud_ids: tuple[str, ...]

    @property
    def cloud_count(self) -> int:
        return len(self.cloud_ids)

    def to_dict(self) -> dict:
        return {
            "product_id": self.product_id,
            "manager_id": self.manager_id,
            "cloud_ids": list(self.cloud_ids),
            "cloud_count": self.cloud_count,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> ProductAllocation:
        return cls(d["product_id"], d["manager_id"], tuple(d["cloud_ids"]))


@dataclass
class Registry:
    """Service Managers, Testing Clouds and the active product allocations.

    Mutated only through :mod:`nimbus.allocation`; a single owner serializes
    every mutation.
    """

    managers: set[str] = field(default_factory=set)
    clouds: dict[str, TestingCloud] = field(default_factory=dict)
    active_allocations: dict[str, ProductAllocation] = field(default_factory=dict)
    loads: dict[str, float] = field(default_factory=dict)

    @property
    def H(self) -> int:
        return len(self.active_allocations)

    def cloud(self, cloud_id: str) -> TestingCloud:
        return self.clouds[cloud_id]

    def find_service(self, service_id: str) -> tuple[TestingCloud, TestingService]:
        for cloud in self.clouds.values():
            for s in cloud.services:
                if s.service_id == service_id:
                    return cloud, s
        raise KeyError(service_id)

    def holder(self, cloud_id: str) -> str | None:
        """Product currently holding ``cloud_id``, if any."""
        for pid, alloc in self.active_allocations.items():
            if cloud_id in alloc.cloud_ids:
                return pid
        return None

    def load(self, cloud_id: str) -> float:
        return self.loads.get(cloud_id, 0.0)

    def to_dict(self) -> dict:
        return {
            "managers": sorted(self.managers),
            "clouds": [self.clouds[c].to_dict() for c in sorted(self.clouds)],
            "active_allocations": [self.active_allocations[p].to_dict() for p in sorted(self.active_allocations)],
            "loads": {c: self.loads[c] for c in sorted(self.loads)},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> Registry:
        return cls(
            managers=set(d.get("managers", [])),
            clouds={c["cloud_id"]: TestingCloud.from_dict(c) for c in d.get("clouds", [])},
            active_allocations={
                a["product_id"]: ProductAllocation.from_dict(a) for a in d.get("active_allocations", [])
            },
            loads=dict(d.get("loads", {})),
        )

    def to_json(self) -> str:
        return json.dumps({"version": SCHEMA_VERSION, "kind": "registry", **self.to_dict()}, sort_keys=True)
