"""meshnet: mesh-stable control and communication-topology co-design for
networks of thrust-propelled rigid bodies.

Subpackage layout:

- ``meshnet.geometry``   rotation helpers and attitude planning
- ``meshnet.dynamics``   rigid-body model, trajectories, Lie-group RK4
- ``meshnet.control``    inner/outer tracking loops and gain containers
- ``meshnet.lmi``        LMI solve wrapper and compositional PD factorization
- ``meshnet.codesign``   passivity-based gain synthesis, centralized and
  decentralized topology co-design, join/leave updates
- ``meshnet.certificates``  independent numeric re-verification of solutions
- ``meshnet.harness``    scenario configs, network simulation, metrics, CLI

The heavy optimization stack (cvxpy) is imported lazily: ``import meshnet``
stays cheap until a synthesis routine is touched.
"""

from importlib import import_module

__version__ = "0.1.0"

_SUBMODULES = (
    "geometry",
    "dynamics",
    "control",
    "lmi",
    "codesign",
    "certificates",
    "harness",
)

__all__ = list(_SUBMODULES) + ["__version__"]


def __getattr__(name: str):
    if name in _SUBMODULES:
        module = import_module(f".{name}", __name__)
        globals()[name] = module
        return module
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(__all__)
