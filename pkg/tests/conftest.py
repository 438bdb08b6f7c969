import pytest

# A pipeline small enough to run simulate -> train -> forecast -> evaluate in seconds.
TINY = [
    "n_lat=16", "n_lon=32", "n_steps=120",
    "base_width=8", "channel_multipliers=[1, 2]", "attention_levels=[0]",
    "stage1_epochs=1", "stage2_epochs=1", "steps_per_epoch=3", "eval_every=3", "batch_size=4",
    "stage1_warmup_steps=1", "stage2_warmup_steps=1",
    "val_inits=2", "val_members=2", "val_leads=[1, 2]",
    "n_forecast_inits=2", "forecast_steps=2", "members_per_ckpt=2",
]


@pytest.fixture
def tiny():
    return list(TINY)


# One line per acceptance criterion, repeated in the terminal summary so the
# verdicts survive output capture.
ACCEPTANCE: list[str] = []


@pytest.fixture
def verdict():
    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        ACCEPTANCE.append(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
