"""Exception hierarchy shared by every nimbus module."""


class NimbusError(Exception):
    """Base class for all classified nimbus errors."""


# -- request validation ------------------------------------------------------

class ValidationError(NimbusError):
    pass


class UnknownTechnique(ValidationError):
    def __init__(self, technique_id: str):
        super().__init__(f"unknown technique {technique_id!r}")
        self.technique_id = technique_id


class InvalidField(ValidationError):
    def __init__(self, name: str, detail: str = ""):
        msg = f"invalid field {name!r}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.name = name


class EmptyProduct(ValidationError):
    def __init__(self, product_id: str):
        super().__init__(f"product {product_id!r} declares no modules")
        self.product_id = product_id


# -- allocation --------------------------------------------------------------

class AllocationError(NimbusError):
    pass


class CloudFull(AllocationError):
    pass


class TechniqueMismatch(AllocationError):
    pass


class DuplicateServiceId(AllocationError):
    pass


class UnknownCloud(AllocationError):
    pass


class TechniqueUnavailable(AllocationError):
    def __init__(self, technique_id: str):
        super().__init__(f"no cloud serves technique {technique_id!r}")
        self.technique_id = technique_id


class NoCapacity(AllocationError):
    def __init__(self, technique_id: str):
        super().__init__(f"every cloud for technique {technique_id!r} has zero free services")
        self.technique_id = technique_id


class AllocationConflict(AllocationError):
    """A proposed cloud was leased by another product after the proposal.

    ``retry_after`` names the product currently holding the cloud, which is
    the lease whose release the caller should wait for before re-forming.
    """

    def __init__(self, cloud_id: str, holder: str | None = None):
        super().__init__(f"cloud {cloud_id!r} is leased to {holder!r}")
        self.cloud_id = cloud_id
        self.retry_after = holder


class StaleProposal(AllocationError):
    def __init__(self, cloud_id: str, service_id: str):
        super().__init__(f"service {service_id!r} of cloud {cloud_id!r} failed after the proposal")
        self.cloud_id = cloud_id
        self.service_id = service_id


class AlreadyReleased(AllocationError):
    pass


# -- scheduling / execution --------------------------------------------------

class NoServices(NimbusError):
    pass


class ServiceFailure(NimbusError):
    def __init__(self, service_id: str, at: int | None = None):
        where = f" at tick {at}" if at is not None else ""
        super().__init__(f"service {service_id!r} failed{where}")
        self.service_id = service_id
        self.at = at


class NotLeased(NimbusError):
    pass


class RunnerError(NimbusError):
    def __init__(self, message: str, returncode: int | None = None):
        super().__init__(message)
        self.returncode = returncode


# -- aggregation -------------------------------------------------------------

class AggregationError(NimbusError):
    pass


class EmptyReportSet(AggregationError):
    pass


class OutputStandardViolation(AggregationError):
    def __init__(self, service_id: str, fields: list[str]):
        super().__init__(f"report from {service_id!r} violates the output standard: {', '.join(fields)}")
        self.service_id = service_id
        self.fields = fields


class MixedCloud(AggregationError):
    pass


class MissingCloudReport(AggregationError):
    def __init__(self, cloud_id: str):
        super().__init__(f"cloud {cloud_id!r} produced no report and was not aborted")
        self.cloud_id = cloud_id


# -- simulation --------------------------------------------------------------

class ScenarioInvalid(NimbusError):
    pass
