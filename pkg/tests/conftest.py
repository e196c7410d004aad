import pytest

from fingernet.data.synth import SynthParams, synth_generate

import acceptance_log


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    """4 subjects x 7 synthetic 32 px images (enough for a 4/1/2 split)."""
    root = tmp_path_factory.mktemp("tiny") / "data"
    synth_generate(SynthParams(num_subjects=4, images_per_subject=7, image_size=32, seed=5), root)
    return root


def pytest_terminal_summary(terminalreporter):
    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance_log.LINES):
            terminalreporter.write_line(line)
