"""
Exception hierarchy for the scenario synthesis engine.
Every error carries the process exit code the CLI reports for it.
"""

from typing import Optional


class SocialGenError(Exception):
    """Base class for all engine errors"""

    exit_code = 1

    def __init__(self, message: str, fragment: Optional[str] = None):
        super().__init__(message)
        self.message = message
        # Offending input text, kept short for log lines
        self.fragment = fragment[:200] if fragment else fragment


class InputError(SocialGenError):
    """Malformed or invalid input (files, configs, proposals)"""

    exit_code = 2


class ParseError(InputError):
    pass


class ValidationError(InputError):
    def __init__(self, message: str, agent_id: Optional[str] = None, step: Optional[int] = None):
        location = ""
        if agent_id is not None:
            location = f" [agent {agent_id}"
            location += f", step {step}]" if step is not None else "]"
        super().__init__(message + location)
        self.agent_id = agent_id
        self.step = step


class ConfigError(InputError):
    pass


class SchemaError(InputError):
    pass


class NoJsonFound(InputError):
    pass


class ProposalReferenceError(InputError):
    pass


class SelfPairError(InputError):
    pass


class InsufficientAgents(InputError):
    pass


class InvalidSchedule(InputError):
    pass


class DimensionMismatch(InputError):
    pass


class UnknownIntent(InputError):
    pass


class EmptyBatch(InputError):
    pass


class GatewayError(SocialGenError):
    """Chat service failures"""

    exit_code = 3


class AuthError(GatewayError):
    pass


class RateLimited(GatewayError):
    pass


class ServerError(GatewayError):
    pass


class TransportError(GatewayError):
    pass


class MalformedResponse(GatewayError):
    pass


class NumericalError(SocialGenError):
    exit_code = 4


class NonFiniteReward(NumericalError):
    def __init__(self, member: int, value: float):
        super().__init__(f"Non-finite reward {value!r} for population member {member}")
        self.member = member
        self.value = value


class SolverFailure(NumericalError):
    pass
