import numpy as np
import pytest

from vfgrade.dataset import CaseRecord, GenantGrade, Manifest, VertebraEntry

ACCEPTANCE_RESULTS: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS, key=lambda k: (int(k.split()[0]), k)):
        ok, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {key}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_manifest(n_cases=10, per_case=3, split=None):
    cases = [CaseRecord(f"c{i:02d}", f"v/c{i:02d}.nii.gz", f"m/c{i:02d}.nii.gz",
                        [VertebraEntry(1 + k, GenantGrade((i + k) % 4)) for k in range(per_case)])
             for i in range(n_cases)]
    return Manifest(cases, split)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Six small cases on disk; enough for every grade to appear in train."""
    from vfgrade.synthdata import SynthConfig, generate_dataset

    out = tmp_path_factory.mktemp("synth")
    cfg = SynthConfig(cases=8, vertebrae_per_case=3, volume_side=32, grade_ratio=(1, 1, 1, 1), seed=5)
    generate_dataset(cfg, out)
    return out


def tiny_config(manifest, epochs=2, **sections):
    from vfgrade.config import RunConfig

    d = RunConfig.desk().to_dict()
    d["data"]["manifest"] = str(manifest)
    d["augment"].update({"canonical_side": 16, "shift_limit": 2, "box_side_range": [1, 3]})
    d["network"].update({"width_scale": 0.125, "layers": [1, 1, 1, 1]})
    d["sampler"]["n"] = 1
    d["training"].update({"epochs": epochs, "checkpoint_every": 1})
    for k, v in sections.items():
        d[k].update(v)
    return RunConfig.from_dict(d)
