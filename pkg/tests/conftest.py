import logging
import time

import pytest

from motiondepth import stillbox
from motiondepth.trainer import TrainConfig, read_loss_log, train

# toy end-to-end run shared by the acceptance suite and the trained-network checks
TOY_SCENES, TOY_SEED, HELD_OUT_SEED = 8, 1, 1001
TOY_SIZE = 64
TOY_CONFIG = dict(iterations=2000, supervision="orientation", d0=0.1, lam=0.03, depth_warmup=300, seed=0, log_every=0, checkpoint_every=0)


def tiny_config(**overrides):
    """A network small enough to train a few steps on 32x32 frames in seconds."""
    base = dict(base_channels=4, num_levels=3, num_scales=3, pose_stride2=3, seq_len=3, batch_size=2, iterations=3, d0=0.1, log_every=0, checkpoint_every=0)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    stillbox.write_dataset(stillbox.generate_dataset(3, 21, width=32, height=32, frames=5), root, val_fraction=0.34)
    return root


@pytest.fixture(scope="session")
def tiny_sequences(tiny_root):
    return stillbox.load_dataset(tiny_root)


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    start = time.perf_counter()
    stillbox.write_dataset(stillbox.generate_dataset(TOY_SCENES, TOY_SEED, width=TOY_SIZE, height=TOY_SIZE), root / "train", val_fraction=0.0)
    stillbox.write_dataset(stillbox.generate_dataset(TOY_SCENES, HELD_OUT_SEED, width=TOY_SIZE, height=TOY_SIZE), root / "test", val_fraction=0.0)
    model = train(stillbox.load_dataset(root / "train"), TrainConfig(**TOY_CONFIG), root / "run")
    return {
        "root": root,
        "model": model,
        "log": read_loss_log(root / "run" / "loss_log.csv"),
        "test": stillbox.load_dataset(root / "test"),
        "seconds": time.perf_counter() - start,
    }


@pytest.fixture(autouse=True)
def _quiet_losses():
    logging.getLogger("motiondepth.losses").setLevel(logging.ERROR)


CRITERIA = {
    1: "gradient suite",
    2: "geometric invariants",
    3: "loss invariants",
    4: "rigid-scene consistency oracle",
    5: "toy end-to-end convergence",
    6: "scale-protocol property",
    7: "upside-down harness",
    8: "determinism",
}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion the test belongs to")
    config._criteria = {}
    config._criteria_notes = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    rep = (yield).get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and rep.passed):
        return
    failures = item.config._criteria.setdefault(marker.args[0], [])
    if rep.when == "call":
        item.config._criteria_notes.setdefault(marker.args[0], []).extend(f"{k} {v}" for k, v in item.user_properties)
    if rep.skipped:
        failures.append(f"{item.name} skipped")
    elif rep.failed:
        failures.append(item.name)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not config._criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(config._criteria):
        failures = config._criteria[n]
        line = f"criterion {n} ({CRITERIA[n]}): {'FAIL' if failures else 'PASS'}"
        if failures:
            line += "  <- " + ", ".join(failures)
        notes = config._criteria_notes.get(n)
        if notes:
            line += "  (" + "; ".join(notes) + ")"
        terminalreporter.write_line(line)
