import sys
import numpy as np
import pytest

from dtgap.truss import AssetConfiguration, TrussModel, load_structure


@pytest.fixture(scope="session")
def truss():
    return load_structure()


def single_bar(E=1.0, A=1.0, L=1.0, alpha=0.0):
    """One horizontal bar, pinned at the left, roller at the right: a single free DOF (axial)."""
    return TrussModel(
        nodes=[[0.0, 0.0], [L, 0.0]],
        members=[[0, 1]],
        areas=[A],
        moduli=[E],
        groups=[0],
        supports=((0, True, True), (1, False, True)),
        sensors=(),
        load_nodes=(1,),
        n_groups=1,
        thermal_alpha=alpha,
    )


def config(health=1.0, load=25e3, pos=10, temp=20.0, n_groups=5):
    h = (health,) * n_groups if np.isscalar(health) else tuple(health)
    return AssetConfiguration(h, load, pos, temp)


def random_configs(truss, n, seed):
    rng = np.random.default_rng(seed)
    return [
        AssetConfiguration(tuple(rng.uniform(0.05, 1.0, 5)), rng.uniform(0, 6e4),
                           int(rng.integers(1, 21)), rng.uniform(*truss.temp_range))
        for _ in range(n)
    ]


@pytest.fixture(scope="session")
def calibration(truss):
    """A 2000-record design repository and 10 000 further in-distribution readings."""
    from dtgap.orchestrator import design_records
    from dtgap.repository import Repository

    repo = Repository()
    repo.ingest(design_records(truss, 2000, seed=1001))
    samples = np.stack([r.sensors for r in design_records(truss, 10_000, seed=1002)])
    return repo, samples


BENCH_SEED = 20240101


@pytest.fixture(scope="session")
def cell(truss):
    """One (epochs=1, first split) cell of the default benchmark, all three LoIs."""
    from dtgap import orchestrator as orch
    from dtgap.gapworld import GapInjectionSpec
    from dtgap.repository import Repository
    from dtgap.seeds import derive_seed

    repo = Repository()
    spec = GapInjectionSpec.random(derive_seed(BENCH_SEED, "gap_spec"))
    plan = orch.ExperimentPlan("A", 1, derive_seed(BENCH_SEED, "split", 0), dataset_size=2000,
                               design_seed=derive_seed(BENCH_SEED, "design_sim"))
    results = orch.run_cell(plan, repo, truss, spec)
    split = orch.split_dataset(repo.query(provenance="design-sim"), plan.split_seed)
    return {"repo": repo, "spec": spec, "plan": plan, "split": split, **results}


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
