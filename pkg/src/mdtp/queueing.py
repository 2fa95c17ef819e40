"""Analytical download-time comparison: many replicas vs one server.

Model A serves chunk requests from c replicas whose capacities pool into a
single service rate sum(mu_i); Model B is the classic single-server M/M/1.
The multi-source wait time below uses that pooled-capacity simplification,
not the full Erlang-C delay formula. All functions are pure and stateless.

Wait-time functions return None for an unstable queue (utilization >= 1)
rather than raising: saturation is an expected outcome of parameter sweeps,
not a programming error.
"""

from dataclasses import dataclass


@dataclass(frozen=True)
class QueueModelParams:
    """Arrival rate plus per-replica service rates, with the single-server
    rate used for the Model B comparison (defaults to the fastest replica)."""

    arrival_rate: float
    service_rates: tuple
    single_rate: float = None

    def __post_init__(self):
        if self.arrival_rate <= 0:
            raise ValueError(f"arrival rate must be positive, got {self.arrival_rate}")
        rates = tuple(self.service_rates)
        if not rates or any(mu <= 0 for mu in rates):
            raise ValueError(f"service rates must be non-empty and positive, got {rates}")
        object.__setattr__(self, "service_rates", rates)
        if self.single_rate is None:
            object.__setattr__(self, "single_rate", max(rates))
        elif self.single_rate <= 0:
            raise ValueError(f"single-server rate must be positive, got {self.single_rate}")


def utilization_multi(arrival_rate, service_rates):
    """Utilization of the pooled multi-replica system: lambda / sum(mu_i)."""
    return arrival_rate / sum(service_rates)


def utilization_single(arrival_rate, service_rate):
    """Utilization of a single server: lambda / mu."""
    return arrival_rate / service_rate


def wait_multi(arrival_rate, service_rates):
    """Mean time per chunk with pooled replicas: 1 / (sum(mu_i) - lambda).

    None when the system is saturated (utilization >= 1).
    """
    if utilization_multi(arrival_rate, service_rates) >= 1.0:
        return None
    return 1.0 / (sum(service_rates) - arrival_rate)


def wait_single(arrival_rate, service_rate):
    """Mean time per chunk from one server: 1 / (mu - lambda).

    None when the system is saturated (utilization >= 1).
    """
    if utilization_single(arrival_rate, service_rate) >= 1.0:
        return None
    return 1.0 / (service_rate - arrival_rate)


def compare(params):
    """Evaluate both models for one parameter set.

    Returns a dict with utilization and wait time per model, for reports
    and the queue-model CLI subcommand.
    """
    lam = params.arrival_rate
    return {
        "arrival_rate": lam,
        "service_rates": list(params.service_rates),
        "single_rate": params.single_rate,
        "utilization_multi": utilization_multi(lam, params.service_rates),
        "utilization_single": utilization_single(lam, params.single_rate),
        "wait_multi": wait_multi(lam, params.service_rates),
        "wait_single": wait_single(lam, params.single_rate),
    }
