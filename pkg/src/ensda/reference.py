"""Single-process reference study: propagate and update in a plain loop.

Runs the same models, observation generation, and update as the
distributed system, with no scheduling, sockets, or processes involved.
Because all stochastic streams are keyed on (seed, cycle, member), its
final ensemble is bit-identical to a distributed run of the same study,
which makes it the oracle for the orchestration machinery.
"""

import numpy as np

from .config import StudyConfig
from .enkf import enkf_update
from .models import init_ensemble, make_model
from .observations import make_observation_source


def run_reference_study(config: StudyConfig, assimilate: bool = True) -> dict[int, np.ndarray]:
    """Return {member_id: final dynamic state} after all cycles.

    ``assimilate=False`` skips the update (free run) for skill comparisons.
    """
    model = make_model(config.model_spec())
    base = model.initial_state()
    if config.spinup_steps:
        base = model.propagate_pure(base, config.spinup_steps)
    members = {
        m.member_id: m.values for m in init_ensemble(base, config.members, config.init_noise, config.seed)
    }
    obs_source = make_observation_source(config, base)
    n_assim = config.n_assimilated
    for cycle in range(config.cycles):
        ids = sorted(members)
        background = {i: model.propagate_pure(members[i], config.nsteps) for i in ids}
        obs = obs_source.observe(cycle)
        if assimilate:
            matrix = np.column_stack([background[i][:n_assim] for i in ids])
            analysis = enkf_update(
                matrix,
                obs,
                cycle=cycle,
                seed=config.seed,
                member_ids=ids,
                perturb=config.perturb_obs,
            )
            for col, i in enumerate(ids):
                state = background[i].copy()
                state[:n_assim] = analysis[:, col]
                members[i] = state
        else:
            members = background
    return members
