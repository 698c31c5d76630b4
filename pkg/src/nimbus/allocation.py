"""Service registration, cloud negotiation and exclusive leasing.

A product obtains its Testing Clouds in two steps. :func:`form_clouds`
proposes one candidate cloud per requested technique; :func:`allocate`
accepts the proposals and leases every named cloud to the product, or
nothing at all. Whole clouds are leased, never single services, and no
cloud or service is ever held by two products at once.

All mutating functions change ``registry`` in place and return it. The
registry has a single writer; callers serialize access.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

from nimbus.errors import (
    AllocationConflict,
    AllocationError,
    AlreadyReleased,
    CloudFull,
    DuplicateServiceId,
    NoCapacity,
    StaleProposal,
    TechniqueMismatch,
    TechniqueUnavailable,
    UnknownCloud,
)
from nimbus.model import (
    ProductAllocation,
    Registry,
    ServiceState,
    TestingCloud,
    TestingService,
    ValidatedRequest,
)


@dataclass(frozen=True)
class CloudProposal:
    product_id: str
    technique_id: str
    candidate_cloud_id: str
    current_load: float
    # services that were free when the proposal was made
    free_services: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "product_id": self.product_id,
            "technique_id": self.technique_id,
            "candidate_cloud_id": self.candidate_cloud_id,
            "current_load": self.current_load,
            "free_services": list(self.free_services),
        }


@dataclass
class Lease:
    allocation: ProductAllocation
    granted_at: int | float = 0
    released: bool = False

    @property
    def product_id(self) -> str:
        return self.allocation.product_id

    def to_dict(self) -> dict:
        return {
            "allocation": self.allocation.to_dict(),
            "granted_at": self.granted_at,
            "released": self.released,
        }


def manager_id_for(product_id: str) -> str:
    return f"sm:{product_id}"


def add_cloud(registry: Registry, cloud: TestingCloud) -> Registry:
    if cloud.cloud_id in registry.clouds:
        raise AllocationError(f"cloud {cloud.cloud_id!r} already exists")
    if cloud.max_services < 1:
        raise AllocationError(f"cloud {cloud.cloud_id!r} needs max_services >= 1")
    services, cloud.services = cloud.services, []
    registry.clouds[cloud.cloud_id] = cloud
    registry.loads.setdefault(cloud.cloud_id, 0.0)
    for s in services:
        register_service(registry, s, cloud.cloud_id)
    return registry


def _service_ids(registry: Registry):
    for cloud in registry.clouds.values():
        for s in cloud.services:
            yield s.service_id


def register_service(registry: Registry, descriptor: TestingService, cloud_id: str) -> Registry:
    """Add ``descriptor`` to ``cloud_id`` in state Free."""
    if cloud_id not in registry.clouds:
        raise UnknownCloud(f"no cloud {cloud_id!r}")
    cloud = registry.clouds[cloud_id]
    if descriptor.service_id in set(_service_ids(registry)):
        raise DuplicateServiceId(f"service {descriptor.service_id!r} is already registered")
    if descriptor.technique_id != cloud.technique_id:
        raise TechniqueMismatch(
            f"service {descriptor.service_id!r} runs {descriptor.technique_id!r}, "
            f"cloud {cloud_id!r} runs {cloud.technique_id!r}"
        )
    if len(cloud.services) >= cloud.max_services:
        raise CloudFull(f"cloud {cloud_id!r} already has {cloud.max_services} services")
    if not descriptor.capacity > 0:
        raise AllocationError(f"service {descriptor.service_id!r} needs capacity > 0")
    descriptor.state = ServiceState.FREE
    descriptor.leased_to = None
    cloud.services.append(descriptor)
    return registry


def spawn_clone(registry: Registry, cloud_id: str, service_id: str, capacity: float = 1.0) -> TestingService:
    """Register a clone service; if the cloud is leased the clone joins the lease."""
    cloud = registry.clouds[cloud_id]
    clone = TestingService(service_id, cloud.technique_id, capacity, clone=True)
    register_service(registry, clone, cloud_id)
    holder = registry.holder(cloud_id)
    if holder is not None:
        clone.state = ServiceState.LEASED
        clone.leased_to = holder
    return clone


def retire_service(registry: Registry, service_id: str) -> Registry:
    cloud, service = registry.find_service(service_id)
    if service.state is ServiceState.LEASED:
        raise AllocationError(f"service {service_id!r} is leased to {service.leased_to!r}")
    cloud.services.remove(service)
    return registry


def mark_failed(registry: Registry, service_id: str) -> TestingService:
    _, service = registry.find_service(service_id)
    service.state = ServiceState.FAILED
    service.leased_to = None
    return service


def recover(registry: Registry, service_id: str) -> TestingService:
    """Failed -> Free; a service whose cloud is still leased rejoins the lease."""
    cloud, service = registry.find_service(service_id)
    if service.state is not ServiceState.FAILED:
        return service
    service.state = ServiceState.FREE
    holder = registry.holder(cloud.cloud_id)
    if holder is not None:
        service.state = ServiceState.LEASED
        service.leased_to = holder
    return service


def form_clouds(registry: Registry, request: ValidatedRequest) -> list[CloudProposal]:
    """Propose one cloud per requested technique, in request order.

    The candidate for a technique is the matching cloud with at least one
    Free service and the smallest current load; ties go to the smallest
    cloud id.
    """
    product_id = request.product.product_id
    proposals = []
    for technique_id in request.request.techniques:
        matching = [c for c in registry.clouds.values() if c.technique_id == technique_id]
        if not matching:
            raise TechniqueUnavailable(technique_id)
        candidates = [c for c in matching if c.free_services()]
        if not candidates:
            raise NoCapacity(technique_id)
        best = min(candidates, key=lambda c: (registry.load(c.cloud_id), c.cloud_id.encode()))
        proposals.append(
            CloudProposal(
                product_id=product_id,
                technique_id=technique_id,
                candidate_cloud_id=best.cloud_id,
                current_load=registry.load(best.cloud_id),
                free_services=tuple(s.service_id for s in best.free_services()),
            )
        )
    return proposals


def allocate(
    registry: Registry,
    proposals: list[CloudProposal],
    at: int | float = 0,
    manager_id: str | None = None,
) -> Lease:
    """Lease every proposed cloud to the proposing product, all or nothing.

    All checks run before any state changes, so a raised error leaves the
    registry exactly as it was.
    """
    if not proposals:
        raise AllocationError("no proposals to allocate")
    product_id = proposals[0].product_id
    if any(p.product_id != product_id for p in proposals):
        raise AllocationError("proposals name more than one product")
    if product_id in registry.active_allocations:
        raise AllocationError(f"product {product_id!r} already holds a lease")
    cloud_ids = [p.candidate_cloud_id for p in proposals]
    if len(set(cloud_ids)) != len(cloud_ids):
        raise AllocationError("the same cloud is proposed twice")

    for p in proposals:
        cloud = registry.clouds.get(p.candidate_cloud_id)
        if cloud is None:
            raise UnknownCloud(f"no cloud {p.candidate_cloud_id!r}")
        holder = registry.holder(cloud.cloud_id)
        if holder is not None:
            raise AllocationConflict(cloud.cloud_id, holder)
        for sid in p.free_services:
            try:
                service = cloud.service(sid)
            except KeyError:
                raise StaleProposal(cloud.cloud_id, sid) from None
            if service.state is ServiceState.FAILED:
                raise StaleProposal(cloud.cloud_id, sid)
        if not cloud.free_services():
            raise StaleProposal(cloud.cloud_id, "*")

    for p in proposals:
        for service in registry.clouds[p.candidate_cloud_id].services:
            if service.state is ServiceState.FREE:
                service.state = ServiceState.LEASED
                service.leased_to = product_id
    manager_id = manager_id or manager_id_for(product_id)
    allocation = ProductAllocation(product_id, manager_id, tuple(cloud_ids))
    registry.active_allocations[product_id] = allocation
    registry.managers.add(manager_id)
    return Lease(allocation, granted_at=at)


def release(registry: Registry, lease: Lease) -> Registry:
    """End a lease. Leased services become Free; failed ones stay Failed."""
    if lease.released:
        raise AlreadyReleased(f"lease of {lease.product_id!r} was already released")
    pid = lease.product_id
    for cloud_id in lease.allocation.cloud_ids:
        cloud = registry.clouds.get(cloud_id)
        if cloud is None:
            continue
        for service in cloud.services:
            if service.state is ServiceState.LEASED and service.leased_to == pid:
                service.state = ServiceState.FREE
                service.leased_to = None
        registry.loads[cloud_id] = 0.0
    if registry.active_allocations.get(pid) == lease.allocation:
        del registry.active_allocations[pid]
    lease.released = True
    return registry


def allocation_services(registry: Registry, allocation: ProductAllocation) -> set[str]:
    out = set()
    for cloud_id in allocation.cloud_ids:
        cloud = registry.clouds.get(cloud_id)
        if cloud is not None:
            out.update(s.service_id for s in cloud.services)
    return out


def verify_disjointness(registry: Registry) -> bool:
    """True iff no cloud or service belongs to two active products.

    Also checks that every Leased service is leased to the product whose
    allocation contains its cloud.
    """
    allocations = list(registry.active_allocations.values())
    clouds = {a.product_id: set(a.cloud_ids) for a in allocations}
    services = {a.product_id: allocation_services(registry, a) for a in allocations}
    for a, b in itertools.combinations(clouds, 2):
        if clouds[a] & clouds[b] or services[a] & services[b]:
            return False
    for cloud in registry.clouds.values():
        for s in cloud.services:
            if s.state is ServiceState.LEASED:
                if s.leased_to not in clouds or cloud.cloud_id not in clouds[s.leased_to]:
                    return False
            elif s.leased_to is not None:
                return False
    return True
